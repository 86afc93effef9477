//! Dense and brute-force reference implementations shared by the test targets.
//! Nothing here calls into the code under test except for plain data types.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};

use dualrec_core::dataio::{FeatureMatrix, InteractionTable, Modality};
use dualrec_core::model::{ComponentMode, FusionMode, ModelConfig, ModelParams};

/// Repeatedly drops every pair whose user or item has degree < k.
pub fn peel_kcore(pairs: &[(usize, usize)], k: usize) -> BTreeSet<(usize, usize)> {
    let mut live: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
    loop {
        let mut du = std::collections::HashMap::new();
        let mut di = std::collections::HashMap::new();
        for &(u, i) in &live {
            *du.entry(u).or_insert(0usize) += 1;
            *di.entry(i).or_insert(0usize) += 1;
        }
        let next: BTreeSet<_> = live.iter().copied().filter(|(u, i)| du[u] >= k && di[i] >= k).collect();
        if next.len() == live.len() {
            return next;
        }
        live = next;
    }
}

pub fn dense_interactions(t: &InteractionTable) -> Array2<f64> {
    let mut r = Array2::zeros((t.num_users, t.num_items));
    for &(u, i) in &t.pairs {
        r[[u, i]] = 1.0;
    }
    r
}

/// D_u^{-1/2} R D_i^{-1/2}, zero where an item has no edges.
pub fn dense_bipartite(t: &InteractionTable) -> Array2<f64> {
    let r = dense_interactions(t);
    let du = r.sum_axis(ndarray::Axis(1));
    let di = r.sum_axis(ndarray::Axis(0));
    let mut a = Array2::zeros(r.dim());
    for u in 0..r.nrows() {
        for i in 0..r.ncols() {
            if r[[u, i]] != 0.0 {
                a[[u, i]] = 1.0 / (du[u] * di[i]).sqrt();
            }
        }
    }
    a
}

/// Indices sorted by descending score, ascending index on ties.
pub fn full_sort(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v.into_iter().map(|(i, _)| i).collect()
}

/// Co-occurrence counts from R R^T, top k by full sort, softmax weights.
pub fn dense_user_graph(t: &InteractionTable, k: usize) -> Array2<f64> {
    let r = dense_interactions(t);
    let c = r.dot(&r.t());
    let n = t.num_users;
    let mut w = Array2::zeros((n, n));
    for u in 0..n {
        let cand: Vec<(usize, f64)> = (0..n).filter(|&v| v != u && c[[u, v]] > 0.0).map(|v| (v, c[[u, v]])).collect();
        let keep: Vec<usize> = full_sort(&cand).into_iter().take(k).collect();
        if keep.is_empty() {
            continue;
        }
        let top = keep.iter().map(|&v| c[[u, v]]).fold(f64::MIN, f64::max);
        let z: f64 = keep.iter().map(|&v| (c[[u, v]] - top).exp()).sum();
        for &v in &keep {
            w[[u, v]] = (c[[u, v]] - top).exp() / z;
        }
    }
    w
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / na.sqrt() / nb.sqrt()
    }
}

fn rows_f64(f: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..f.rows).map(|r| f.row(r).iter().map(|&v| v as f64).collect()).collect()
}

/// Neighbor sets (ascending) by full sort over all other items; zero rows
/// get none.
pub fn knn_lists(f: &FeatureMatrix, k: usize) -> Vec<Vec<usize>> {
    let x = rows_f64(f);
    (0..f.rows)
        .map(|i| {
            if x[i].iter().all(|&v| v == 0.0) {
                return Vec::new();
            }
            let cand: Vec<(usize, f64)> = (0..f.rows).filter(|&j| j != i).map(|j| (j, cosine(&x[i], &x[j]))).collect();
            let mut keep: Vec<usize> = full_sort(&cand).into_iter().take(k).collect();
            keep.sort_unstable();
            keep
        })
        .collect()
}

/// Weighted sum of binarized kNN graphs for the chosen modalities.
pub fn dense_item_graph(features: &[FeatureMatrix], modalities: &[Modality], k: usize, alpha_visual: f64) -> Array2<f64> {
    let m = features[0].rows;
    let mut s = Array2::zeros((m, m));
    for &modality in modalities {
        let f = features.iter().find(|f| f.modality == modality).unwrap();
        let weight = match (modalities.len(), modality) {
            (1, _) => 1.0,
            (_, Modality::Visual) => alpha_visual,
            (_, Modality::Textual) => 1.0 - alpha_visual,
        };
        for (i, row) in knn_lists(f, k).into_iter().enumerate() {
            for j in row {
                s[[i, j]] += weight;
            }
        }
    }
    s
}

pub struct DenseOutput {
    pub user_modal: Vec<Array2<f64>>,
    pub item_modal: Vec<Array2<f64>>,
    pub user_fused: Array2<f64>,
    pub item_fused: Array2<f64>,
    pub z_user: Array2<f64>,
    pub z_item: Array2<f64>,
}

fn elementwise(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(a.dim());
    for ((r, c), v) in out.indexed_iter_mut() {
        *v = f(a[[r, c]], b[[r, c]]);
    }
    out
}

fn concat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            out[[r, c]] = a[[r, c]];
        }
        for c in 0..b.ncols() {
            out[[r, a.ncols() + c]] = b[[r, c]];
        }
    }
    out
}

/// Whole forward pass with dense matrices built from the raw inputs.
pub fn dense_forward(
    params: &ModelParams,
    train: &InteractionTable,
    features: &[FeatureMatrix],
    config: &ModelConfig,
    k_user: usize,
    k_item: usize,
    alpha_visual: f64,
) -> DenseOutput {
    let a = dense_bipartite(train);
    let at = a.t().to_owned();
    let mut user_modal = Vec::new();
    let mut item_modal = Vec::new();
    for (k, m) in config.modalities.iter().enumerate() {
        let f = features.iter().find(|f| f.modality == *m).unwrap();
        let x = Array2::from_shape_vec((f.rows, f.cols), rows_f64(f).concat()).unwrap();
        let bias: &Array1<f64> = &params.proj_bias[k];
        let mut i_l = x.dot(&params.proj_weight[k]);
        for mut row in i_l.rows_mut() {
            row += bias;
        }
        let mut u_l = params.user_embed[k].clone();
        let mut u_sum = u_l.clone();
        let mut i_sum = i_l.clone();
        for _ in 0..config.layers_bipartite {
            let u_next = a.dot(&i_l);
            let i_next = at.dot(&u_l);
            u_sum += &u_next;
            i_sum += &i_next;
            u_l = u_next;
            i_l = i_next;
        }
        user_modal.push(u_sum);
        item_modal.push(i_sum);
    }
    let alpha = 1.0 / (1.0 + (-params.fusion_logit).exp());
    let beta = 1.0 - alpha;
    let (user_fused, item_fused) = if user_modal.len() == 1 {
        (user_modal[0].clone(), item_modal[0].clone())
    } else {
        let (uv, ut, iv, it) = (&user_modal[0], &user_modal[1], &item_modal[0], &item_modal[1]);
        match config.fusion {
            FusionMode::AttentiveConcat => (concat(&(uv * alpha), &(ut * beta)), concat(iv, it)),
            FusionMode::WeightedSum => (elementwise(uv, ut, |a, b| alpha * a + beta * b), elementwise(iv, it, |a, b| a + b)),
            FusionMode::Mean => (elementwise(uv, ut, |a, b| (a + b) / 2.0), elementwise(iv, it, |a, b| (a + b) / 2.0)),
            FusionMode::WeightedMax => (
                elementwise(uv, ut, |a, b| (alpha * a).max(beta * b)),
                elementwise(iv, it, f64::max),
            ),
        }
    };
    let mut z_user = user_fused.clone();
    if config.components != ComponentMode::UiOnly {
        let w = dense_user_graph(train, k_user);
        let mut h = user_fused.clone();
        for _ in 0..config.layers_user {
            h = w.dot(&h);
        }
        z_user = z_user + h;
    }
    let mut z_item = item_fused.clone();
    if config.components == ComponentMode::Full {
        let mut s = dense_item_graph(features, &config.modalities, k_item, alpha_visual);
        if config.item_row_norm {
            for mut row in s.rows_mut() {
                let total: f64 = row.sum();
                if total > 0.0 {
                    row /= total;
                }
            }
        }
        let mut h = item_fused.clone();
        for _ in 0..config.layers_item {
            h = s.dot(&h);
        }
        z_item = z_item + h;
    }
    DenseOutput {
        user_modal,
        item_modal,
        user_fused,
        item_fused,
        z_user,
        z_item,
    }
}

/// Max absolute difference over the max absolute oracle entry.
pub fn rel_err(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    assert_eq!(got.dim(), want.dim());
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Recall of a binary relevance vector over ranked positions.
pub fn brute_recall(rel: &[bool], k: usize) -> f64 {
    let total = rel.iter().filter(|r| **r).count();
    let hits = rel.iter().take(k).filter(|r| **r).count();
    hits as f64 / total as f64
}

/// DCG of the top k over DCG of the relevance vector sorted descending.
pub fn brute_ndcg(rel: &[bool], k: usize) -> f64 {
    let dcg = |v: &[bool]| -> f64 {
        v.iter()
            .take(k)
            .enumerate()
            .map(|(p, &r)| if r { 1.0 / (p as f64 + 2.0).log2() } else { 0.0 })
            .sum()
    };
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    dcg(rel) / dcg(&ideal)
}

/// One random model instance for the dense-oracle comparison.
pub struct DenseCase {
    pub train: InteractionTable,
    pub features: Vec<FeatureMatrix>,
    pub config: ModelConfig,
    pub graph: dualrec_core::graphs::GraphParams,
    pub params: ModelParams,
}

/// N, M <= 20, d <= 8, random component/fusion/modality choice and depths.
pub fn dense_case(seed: u64) -> DenseCase {
    use dualrec_core::model::parse_modalities;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=20);
    let m = rng.random_range(3..=20);
    let mut pairs = Vec::new();
    for u in 0..n {
        let deg = rng.random_range(1..=(m - 1).min(6));
        pairs.extend(sample(&mut rng, m, deg).into_iter().map(|i| (u, i)));
    }
    let train = InteractionTable::from_pairs(n, m, &pairs);
    let feat = |modality, rng: &mut rand_chacha::ChaCha8Rng| {
        let cols = rng.random_range(2..=6);
        let data = (0..m * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        FeatureMatrix::new(modality, m, cols, data).unwrap()
    };
    let features = vec![feat(Modality::Visual, &mut rng), feat(Modality::Textual, &mut rng)];
    let modalities = ["visual", "textual", "visual,textual"][rng.random_range(0..3)];
    let config = ModelConfig {
        dim: rng.random_range(1..=8),
        layers_bipartite: rng.random_range(1..=3),
        layers_user: rng.random_range(0..=2),
        layers_item: rng.random_range(0..=2),
        fusion: FusionMode::ALL[rng.random_range(0..4)],
        modalities: parse_modalities(modalities).unwrap(),
        components: ComponentMode::ALL[rng.random_range(0..3)],
        item_row_norm: rng.random_bool(0.3),
    };
    let graph = dualrec_core::graphs::GraphParams {
        k_user: rng.random_range(1..=5),
        k_item: rng.random_range(1..=5),
        alpha_visual: 0.1,
    };
    let dims: Vec<usize> = config
        .modalities
        .iter()
        .map(|&md| features.iter().find(|f| f.modality == md).unwrap().cols)
        .collect();
    let mut params = ModelParams::init(&config, n, &dims, seed);
    params.fusion_logit = rng.random_range(-2.0..2.0);
    for b in &mut params.proj_bias {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    DenseCase {
        train,
        features,
        config,
        graph,
        params,
    }
}

/// Largest relative error between the sparse pipeline and the dense oracle
/// over every intermediate and final output.
pub fn dense_case_error(case: &DenseCase) -> f64 {
    use dualrec_core::graphs::GraphSet;
    use dualrec_core::model::{self, ModelInputs};

    let graphs = GraphSet::build(&case.train, &case.features, &case.graph).unwrap();
    let inputs = ModelInputs::new(&graphs, &case.features, &case.config).unwrap();
    let state = model::forward(&case.params, &inputs, &case.config).unwrap();
    let want = dense_forward(
        &case.params,
        &case.train,
        &case.features,
        &case.config,
        case.graph.k_user,
        case.graph.k_item,
        case.graph.alpha_visual,
    );
    let mut worst = 0.0f64;
    for (k, o) in state.modal.iter().enumerate() {
        worst = worst.max(rel_err(&o.users, &want.user_modal[k]));
        worst = worst.max(rel_err(&o.items, &want.item_modal[k]));
    }
    worst = worst.max(rel_err(&state.user_fused, &want.user_fused));
    worst = worst.max(rel_err(&state.item_fused, &want.item_fused));
    worst = worst.max(rel_err(&state.z_user, &want.z_user));
    worst.max(rel_err(&state.z_item, &want.z_item))
}

/// Result of training the full model on the planted two-block toy set.
pub struct OverfitRun {
    pub losses: Vec<f64>,
    /// First epoch at which train Recall@10 (nothing masked) hit 1.0.
    pub first_perfect: Option<usize>,
    pub best_val_recall20: f64,
    /// Mean over users of 20 / (M - train degree).
    pub random_val_recall20: f64,
}

pub const OVERFIT_EPOCHS: usize = 200;

pub fn overfit_run(seed: u64) -> OverfitRun {
    use dualrec_core::dataio::{self, SplitOptions};
    use dualrec_core::graphs::{GraphParams, GraphSet};
    use dualrec_core::model::ModelInputs;
    use dualrec_core::{eval, toy, training};

    let data = toy::planted_blocks(seed, 20, 30, 10);
    let split = dataio::split_interactions(&data.table, &SplitOptions::default()).unwrap();
    let graphs = GraphSet::build(&split.train, &data.features, &GraphParams::default()).unwrap();
    let mc = ModelConfig {
        dim: 64,
        item_row_norm: true,
        ..ModelConfig::default()
    };
    let inputs = ModelInputs::new(&graphs, &data.features, &mc).unwrap();
    let tc = training::TrainConfig {
        learning_rate: 0.01,
        reg_lambda: 1e-3,
        batch_size: 64,
        max_epochs: OVERFIT_EPOCHS,
        patience: OVERFIT_EPOCHS,
        ..training::TrainConfig::default()
    };
    let truth = split.train.user_items();
    let none = vec![Vec::new(); split.num_users()];
    let params = ModelParams::init(&mc, split.num_users(), &inputs.feature_dims(), tc.seed);
    let mut first_perfect = None;
    let outcome = training::train_observed(params, &mc, &tc, &split, &inputs, |rec, st| {
        let per_user = eval::evaluate_lists(&st.z_user, &st.z_item, &truth, &none, &[10]).unwrap();
        if first_perfect.is_none() && eval::summarize(&per_user, &[10]).recall[0] == 1.0 {
            first_perfect = Some(rec.epoch);
        }
    })
    .unwrap();
    let m = split.num_items() as f64;
    let deg = split.train.user_degrees();
    let random_val_recall20 = deg.iter().map(|&d| 20.0 / (m - d as f64)).sum::<f64>() / deg.len() as f64;
    OverfitRun {
        losses: outcome.history.iter().map(|r| r.loss).collect(),
        first_perfect,
        best_val_recall20: outcome.best_val_recall20,
        random_val_recall20,
    }
}

/// Loss over the first epochs trends down within sampling noise:
/// least-squares slope below zero, last value below the first, and no epoch
/// more than 25% above the first.
pub fn loss_trends_down(losses: &[f64]) -> bool {
    let n = losses.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = losses.iter().sum::<f64>() / n;
    let slope: f64 = losses.iter().enumerate().map(|(x, y)| (x as f64 - xm) * (y - ym)).sum();
    let first = losses[0];
    slope < 0.0 && *losses.last().unwrap() < first && losses.iter().all(|&l| l <= 1.25 * first)
}
