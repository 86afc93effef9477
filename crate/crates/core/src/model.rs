//! Trainable parameters and the forward/backward pass.
//!
//! The pipeline is fixed: per-modality propagation over the normalized
//! bipartite graph (layer outputs summed), fusion of the modality
//! representations, propagation of the fused vectors over the user and item
//! homogeneous graphs (last layer kept), and summation into the final user
//! and item vectors. Scores are inner products of those vectors.
//!
//! Propagation has no transforms or nonlinearities, so every stage except
//! weighted-max fusion is linear in the node features and the backward pass
//! is a sequence of transposed sparse products.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{self, FeatureMatrix, Modality};
use crate::graphs::{GraphError, GraphSet};
use crate::sparse::CsrMatrix;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("width mismatch: {0} vs {1}")]
    Width(usize, usize),
    #[error("missing features for modality {0}")]
    MissingFeatures(Modality),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    AttentiveConcat,
    WeightedSum,
    Mean,
    WeightedMax,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::AttentiveConcat,
        FusionMode::WeightedSum,
        FusionMode::Mean,
        FusionMode::WeightedMax,
    ];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::AttentiveConcat => "attentive_concat",
            FusionMode::WeightedSum => "weighted_sum",
            FusionMode::Mean => "mean",
            FusionMode::WeightedMax => "weighted_max",
        })
    }
}

impl FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown fusion mode {s:?}"))
    }
}

/// Which graphs contribute to the final representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComponentMode {
    /// Bipartite graphs only.
    UiOnly,
    /// Adds the user co-occurrence graph.
    UiPlusUu,
    /// Adds both homogeneous graphs.
    Full,
}

impl ComponentMode {
    pub const ALL: [ComponentMode; 3] = [ComponentMode::UiOnly, ComponentMode::UiPlusUu, ComponentMode::Full];

    fn uses_user_graph(self) -> bool {
        self != ComponentMode::UiOnly
    }

    fn uses_item_graph(self) -> bool {
        self == ComponentMode::Full
    }
}

impl fmt::Display for ComponentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentMode::UiOnly => "ui_only",
            ComponentMode::UiPlusUu => "ui_plus_uu",
            ComponentMode::Full => "full",
        })
    }
}

impl FromStr for ComponentMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ComponentMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown component mode {s:?}"))
    }
}

/// Formats a modality list as `visual,textual`.
pub fn modalities_to_string(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
}

/// Parses a modality list; the result is in canonical (visual, textual) order.
pub fn parse_modalities(s: &str) -> Result<Vec<Modality>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Modality = part.parse()?;
        if out.contains(&m) {
            return Err(format!("modality {m} listed twice"));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err("empty modality list".into());
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers_bipartite: usize,
    pub layers_user: usize,
    pub layers_item: usize,
    pub fusion: FusionMode,
    pub modalities: Vec<Modality>,
    pub components: ComponentMode,
    /// Row-normalize the item graph before propagation.
    pub item_row_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers_bipartite: 2,
            layers_user: 1,
            layers_item: 1,
            fusion: FusionMode::AttentiveConcat,
            modalities: vec![Modality::Visual, Modality::Textual],
            components: ComponentMode::Full,
            item_row_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::Config("dim must be >= 1".into()));
        }
        if self.layers_bipartite == 0 {
            return Err(ModelError::Config("bipartite layers must be >= 1".into()));
        }
        if self.modalities.is_empty() || self.modalities.len() > 2 {
            return Err(ModelError::Config("one or two modalities required".into()));
        }
        let mut sorted = self.modalities.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.modalities {
            return Err(ModelError::Config("modalities must be distinct and in visual,textual order".into()));
        }
        Ok(())
    }

    /// Width of the fused and final representations.
    pub fn output_width(&self) -> usize {
        if self.modalities.len() == 2 && self.fusion == FusionMode::AttentiveConcat {
            2 * self.dim
        } else {
            self.dim
        }
    }

    /// `key=value` pairs as they appear in run configs and checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("model.dim".into(), self.dim.to_string()),
            ("model.layers_bipartite".into(), self.layers_bipartite.to_string()),
            ("model.layers_user".into(), self.layers_user.to_string()),
            ("model.layers_item".into(), self.layers_item.to_string()),
            ("model.fusion".into(), self.fusion.to_string()),
            ("model.modalities".into(), modalities_to_string(&self.modalities)),
            ("model.components".into(), self.components.to_string()),
            ("model.item_row_norm".into(), self.item_row_norm.to_string()),
        ]
    }
}

/// All trainable tensors. The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub modalities: Vec<Modality>,
    /// Per modality, N x d.
    pub user_embed: Vec<Array2<f64>>,
    /// Per modality, d_m x d.
    pub proj_weight: Vec<Array2<f64>>,
    /// Per modality, length d.
    pub proj_bias: Vec<Array1<f64>>,
    /// alpha = sigmoid(fusion_logit)
    pub fusion_logit: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Upper bound of Xavier-uniform initialization.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn xavier_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = xavier_bound(rows, cols);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ModelParams {
    /// Xavier-uniform embeddings and projections, zero biases, alpha = 0.5.
    pub fn init(config: &ModelConfig, num_users: usize, feature_dims: &[usize], seed: u64) -> Self {
        assert_eq!(feature_dims.len(), config.modalities.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut user_embed = Vec::new();
        let mut proj_weight = Vec::new();
        let mut proj_bias = Vec::new();
        for &dm in feature_dims {
            user_embed.push(xavier_uniform(&mut rng, num_users, d));
            proj_weight.push(xavier_uniform(&mut rng, dm, d));
            proj_bias.push(Array1::zeros(d));
        }
        ModelParams {
            modalities: config.modalities.clone(),
            user_embed,
            proj_weight,
            proj_bias,
            fusion_logit: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            modalities: self.modalities.clone(),
            user_embed: self.user_embed.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            proj_weight: self.proj_weight.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            proj_bias: self.proj_bias.iter().map(|a| Array1::zeros(a.raw_dim())).collect(),
            fusion_logit: 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.fusion_logit)
    }

    pub fn num_users(&self) -> usize {
        self.user_embed[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_embed[0].ncols()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in &self.modalities {
            names.push(format!("user_embed[{m}]"));
            names.push(format!("proj_weight[{m}]"));
            names.push(format!("proj_bias[{m}]"));
        }
        names.push("fusion_logit".into());
        names
    }

    /// Flat views of every tensor, in [`Self::tensor_names`] order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for k in 0..self.modalities.len() {
            out.push(self.user_embed[k].as_slice().expect("standard layout"));
            out.push(self.proj_weight[k].as_slice().expect("standard layout"));
            out.push(self.proj_bias[k].as_slice().expect("standard layout"));
        }
        out.push(std::slice::from_ref(&self.fusion_logit));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for ((u, w), b) in self
            .user_embed
            .iter_mut()
            .zip(self.proj_weight.iter_mut())
            .zip(self.proj_bias.iter_mut())
        {
            out.push(u.as_slice_mut().expect("standard layout"));
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(std::slice::from_mut(&mut self.fusion_logit));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }
}

/// Graphs in the exact form the forward and backward passes consume.
#[derive(Debug, Clone)]
pub struct PreparedGraphs {
    pub user_item: CsrMatrix,
    pub item_user: CsrMatrix,
    pub user_user: CsrMatrix,
    pub user_user_t: CsrMatrix,
    pub item_item: CsrMatrix,
    pub item_item_t: CsrMatrix,
}

impl PreparedGraphs {
    pub fn new(graphs: &GraphSet, config: &ModelConfig) -> Result<Self, ModelError> {
        let item = graphs.item_graph(&config.modalities)?;
        let item_item = if config.item_row_norm {
            item.weights.row_normalized()
        } else {
            item.weights.clone()
        };
        Ok(PreparedGraphs {
            user_item: graphs.bipartite.user_item.clone(),
            item_user: graphs.bipartite.item_user.clone(),
            user_user_t: graphs.user.weights.transpose(),
            user_user: graphs.user.weights.clone(),
            item_item_t: item_item.transpose(),
            item_item,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_item.rows
    }

    pub fn num_items(&self) -> usize {
        self.user_item.cols
    }
}

/// Frozen inputs: graphs plus per-modality features in the model's modality order.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub graphs: PreparedGraphs,
    pub features: Vec<Array2<f64>>,
}

impl ModelInputs {
    pub fn new(graphs: &GraphSet, features: &[FeatureMatrix], config: &ModelConfig) -> Result<Self, ModelError> {
        let graphs = PreparedGraphs::new(graphs, config)?;
        let features = config
            .modalities
            .iter()
            .map(|&m| {
                features
                    .iter()
                    .find(|f| f.modality == m)
                    .map(FeatureMatrix::to_array)
                    .ok_or(ModelError::MissingFeatures(m))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelInputs { graphs, features })
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.features.iter().map(|f| f.ncols()).collect()
    }
}

/// Per-layer outputs of one modality's bipartite propagation.
#[derive(Debug, Clone)]
pub struct BipartiteOutput {
    pub user_layers: Vec<Array2<f64>>,
    pub item_layers: Vec<Array2<f64>>,
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

/// Propagates layer-0 embeddings `layers` times over the normalized bipartite
/// graph and sums all layer outputs.
pub fn propagate_bipartite(
    user_item: &CsrMatrix,
    item_user: &CsrMatrix,
    users0: Array2<f64>,
    items0: Array2<f64>,
    layers: usize,
) -> BipartiteOutput {
    let mut user_layers = vec![users0];
    let mut item_layers = vec![items0];
    for l in 0..layers {
        let u_next = user_item.matmul(item_layers[l].view());
        let i_next = item_user.matmul(user_layers[l].view());
        user_layers.push(u_next);
        item_layers.push(i_next);
    }
    let users = sum_layers(&user_layers);
    let items = sum_layers(&item_layers);
    BipartiteOutput {
        user_layers,
        item_layers,
        users,
        items,
    }
}

fn sum_layers(layers: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = layers[0].clone();
    for l in &layers[1..] {
        acc += l;
    }
    acc
}

/// `h^(l+1) = W h^(l)` for `layers` steps; returns every layer, layer 0 first.
pub fn propagate_homogeneous(weights: &CsrMatrix, h0: Array2<f64>, layers: usize) -> Vec<Array2<f64>> {
    let mut out = vec![h0];
    for l in 0..layers {
        let next = weights.matmul(out[l].view());
        out.push(next);
    }
    out
}

/// Fuses per-modality user and item representations.
///
/// With one modality both sides pass through unchanged. With two, `alpha`
/// weights the first (visual) user branch and `1 - alpha` the second; items
/// use the unweighted analogue of each mode.
pub fn fuse(users: &[&Array2<f64>], items: &[&Array2<f64>], alpha: f64, mode: FusionMode) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    match (users, items) {
        ([u], [i]) => Ok(((*u).clone(), (*i).clone())),
        ([uv, ut], [iv, it]) => {
            let beta = 1.0 - alpha;
            Ok(match mode {
                FusionMode::AttentiveConcat => (
                    ndarray::concatenate(Axis(1), &[(*uv * alpha).view(), (*ut * beta).view()]).unwrap(),
                    ndarray::concatenate(Axis(1), &[iv.view(), it.view()]).unwrap(),
                ),
                FusionMode::WeightedSum => (*uv * alpha + *ut * beta, *iv + *it),
                FusionMode::Mean => ((*uv + *ut) * 0.5, (*iv + *it) * 0.5),
                FusionMode::WeightedMax => (
                    Zip::from(*uv).and(*ut).map_collect(|&a, &b| (alpha * a).max(beta * b)),
                    Zip::from(*iv).and(*it).map_collect(|&a, &b| a.max(b)),
                ),
            })
        }
        _ => Err(ModelError::Config(format!(
            "fusion needs one or two modalities, got {}",
            users.len()
        ))),
    }
}

/// Sums fused and homogeneous outputs according to the component mode.
pub fn integrate(
    user_fused: &Array2<f64>,
    user_homo: &Array2<f64>,
    item_fused: &Array2<f64>,
    item_homo: &Array2<f64>,
    mode: ComponentMode,
) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    if user_fused.dim() != user_homo.dim() {
        return Err(ModelError::Width(user_fused.ncols(), user_homo.ncols()));
    }
    if item_fused.dim() != item_homo.dim() {
        return Err(ModelError::Width(item_fused.ncols(), item_homo.ncols()));
    }
    let z_user = if mode.uses_user_graph() {
        user_fused + user_homo
    } else {
        user_fused.clone()
    };
    let z_item = if mode.uses_item_graph() {
        item_fused + item_homo
    } else {
        item_fused.clone()
    };
    Ok((z_user, z_item))
}

pub fn score(z_user: ArrayView1<'_, f64>, z_item: ArrayView1<'_, f64>) -> f64 {
    z_user.dot(&z_item)
}

/// Everything computed by one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub modal: Vec<BipartiteOutput>,
    pub alpha: f64,
    pub user_fused: Array2<f64>,
    pub item_fused: Array2<f64>,
    pub user_homo: Vec<Array2<f64>>,
    pub item_homo: Vec<Array2<f64>>,
    pub z_user: Array2<f64>,
    pub z_item: Array2<f64>,
}

impl ForwardState {
    pub fn score(&self, user: usize, item: usize) -> f64 {
        score(self.z_user.row(user), self.z_item.row(item))
    }

    /// Layer-0 item embeddings of modality index `k`.
    pub fn item_base(&self, k: usize) -> &Array2<f64> {
        &self.modal[k].item_layers[0]
    }
}

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn forward(params: &ModelParams, inputs: &ModelInputs, config: &ModelConfig) -> Result<ForwardState, ModelError> {
    let g = &inputs.graphs;
    let modal: Vec<BipartiteOutput> = (0..params.modalities.len())
        .map(|k| {
            let items0 = inputs.features[k].dot(&params.proj_weight[k]) + &params.proj_bias[k];
            propagate_bipartite(
                &g.user_item,
                &g.item_user,
                params.user_embed[k].clone(),
                items0,
                config.layers_bipartite,
            )
        })
        .collect();
    if !modal.iter().all(|o| all_finite(&o.users) && all_finite(&o.items)) {
        return Err(ModelError::NonFinite("bipartite propagation"));
    }
    let alpha = params.alpha();
    let users: Vec<&Array2<f64>> = modal.iter().map(|o| &o.users).collect();
    let items: Vec<&Array2<f64>> = modal.iter().map(|o| &o.items).collect();
    let (user_fused, item_fused) = fuse(&users, &items, alpha, config.fusion)?;

    let user_layers = if config.components.uses_user_graph() { config.layers_user } else { 0 };
    let item_layers = if config.components.uses_item_graph() { config.layers_item } else { 0 };
    let user_homo = propagate_homogeneous(&g.user_user, user_fused.clone(), user_layers);
    let item_homo = propagate_homogeneous(&g.item_item, item_fused.clone(), item_layers);
    let (z_user, z_item) = integrate(
        &user_fused,
        user_homo.last().unwrap(),
        &item_fused,
        item_homo.last().unwrap(),
        config.components,
    )?;
    if !all_finite(&z_user) || !all_finite(&z_item) {
        return Err(ModelError::NonFinite("final representations"));
    }
    Ok(ForwardState {
        modal,
        alpha,
        user_fused,
        item_fused,
        user_homo,
        item_homo,
        z_user,
        z_item,
    })
}

/// Reverse pass of [`forward`]: maps gradients on the final representations
/// to gradients on every parameter tensor. Graph weights are constants.
pub fn backward(
    params: &ModelParams,
    inputs: &ModelInputs,
    config: &ModelConfig,
    state: &ForwardState,
    grad_z_user: &Array2<f64>,
    grad_z_item: &Array2<f64>,
) -> Result<ModelParams, ModelError> {
    if grad_z_user.dim() != state.z_user.dim() || grad_z_item.dim() != state.z_item.dim() {
        return Err(ModelError::Width(grad_z_user.ncols(), state.z_user.ncols()));
    }
    let g = &inputs.graphs;

    // integration and homogeneous graphs
    let mut g_user_fused = grad_z_user.clone();
    if config.components.uses_user_graph() {
        let mut gh = grad_z_user.clone();
        for _ in 0..config.layers_user {
            gh = g.user_user_t.matmul(gh.view());
        }
        g_user_fused += &gh;
    }
    let mut g_item_fused = grad_z_item.clone();
    if config.components.uses_item_graph() {
        let mut gh = grad_z_item.clone();
        for _ in 0..config.layers_item {
            gh = g.item_item_t.matmul(gh.view());
        }
        g_item_fused += &gh;
    }

    // fusion
    let mut grads = params.zeros_like();
    let (g_users, g_items, g_alpha) = fuse_backward(state, config.fusion, &g_user_fused, &g_item_fused);
    let alpha = state.alpha;
    grads.fusion_logit = g_alpha * alpha * (1.0 - alpha);

    // bipartite propagation: U(l+1) = A I(l), I(l+1) = A^T U(l), outputs sum all layers
    for k in 0..params.modalities.len() {
        let (gu_sum, gi_sum) = (&g_users[k], &g_items[k]);
        let mut gu = gu_sum.clone();
        let mut gi = gi_sum.clone();
        for _ in 0..config.layers_bipartite {
            let gu_prev = g.user_item.matmul(gi.view()) + gu_sum;
            let gi_prev = g.item_user.matmul(gu.view()) + gi_sum;
            gu = gu_prev;
            gi = gi_prev;
        }
        // products of transposed operands may come back column-major, and
        // tensors() hands out flat row-major slices
        grads.user_embed[k] = row_major(gu);
        grads.proj_weight[k] = row_major(inputs.features[k].t().dot(&gi));
        grads.proj_bias[k] = gi.sum_axis(Axis(0));
    }
    if !grads.is_finite() {
        return Err(ModelError::NonFinite("gradients"));
    }
    Ok(grads)
}

fn row_major(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Gradients w.r.t. each modality's summed user/item outputs and alpha.
fn fuse_backward(
    state: &ForwardState,
    mode: FusionMode,
    g_user: &Array2<f64>,
    g_item: &Array2<f64>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, f64) {
    if state.modal.len() == 1 {
        return (vec![g_user.clone()], vec![g_item.clone()], 0.0);
    }
    let (uv, ut) = (&state.modal[0].users, &state.modal[1].users);
    let (iv, it) = (&state.modal[0].items, &state.modal[1].items);
    let alpha = state.alpha;
    let beta = 1.0 - alpha;
    match mode {
        FusionMode::AttentiveConcat => {
            let d = uv.ncols();
            let gu_v = g_user.slice(s![.., ..d]);
            let gu_t = g_user.slice(s![.., d..]);
            let g_alpha = (&gu_v * uv).sum() - (&gu_t * ut).sum();
            (
                vec![&gu_v * alpha, &gu_t * beta],
                vec![g_item.slice(s![.., ..d]).to_owned(), g_item.slice(s![.., d..]).to_owned()],
                g_alpha,
            )
        }
        FusionMode::WeightedSum => {
            let g_alpha = (g_user * &(uv - ut)).sum();
            (
                vec![g_user * alpha, g_user * beta],
                vec![g_item.clone(), g_item.clone()],
                g_alpha,
            )
        }
        FusionMode::Mean => (
            vec![g_user * 0.5, g_user * 0.5],
            vec![g_item * 0.5, g_item * 0.5],
            0.0,
        ),
        FusionMode::WeightedMax => {
            let mut gu_v = Array2::zeros(uv.raw_dim());
            let mut gu_t = Array2::zeros(ut.raw_dim());
            let mut g_alpha = 0.0;
            Zip::from(&mut gu_v)
                .and(&mut gu_t)
                .and(g_user)
                .and(uv)
                .and(ut)
                .for_each(|gv, gt, &g, &a, &b| {
                    if alpha * a >= beta * b {
                        *gv = alpha * g;
                        g_alpha += g * a;
                    } else {
                        *gt = beta * g;
                        g_alpha -= g * b;
                    }
                });
            let mut gi_v = Array2::zeros(iv.raw_dim());
            let mut gi_t = Array2::zeros(it.raw_dim());
            Zip::from(&mut gi_v)
                .and(&mut gi_t)
                .and(g_item)
                .and(iv)
                .and(it)
                .for_each(|gv, gt, &g, &a, &b| {
                    if a >= b {
                        *gv = g;
                    } else {
                        *gt = g;
                    }
                });
            (vec![gu_v, gu_t], vec![gi_v, gi_t], g_alpha)
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"DRCK";
const CKPT_VERSION: u32 = 1;

/// Writes a checkpoint: magic, version, a `key=value` header echoing the run
/// config, then every tensor as a named FMAT f64 block, then the fusion logit.
pub fn save_checkpoint(path: &Path, header: &[(String, String)], params: &ModelParams) -> Result<(), ModelError> {
    let io_err = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_checkpoint(&mut w, header, params).and_then(|_| w.flush()).map_err(io_err)
}

fn write_checkpoint<W: Write>(w: &mut W, header: &[(String, String)], params: &ModelParams) -> io::Result<()> {
    let mut text = String::new();
    for (k, v) in header {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let n = params.modalities.len();
    w.write_all(&(n as u32).to_le_bytes())?;
    for k in 0..n {
        let name = params.modalities[k].name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let u = &params.user_embed[k];
        dataio::write_fmat_f64(w, u.nrows(), u.ncols(), u.as_slice().unwrap())?;
        let p = &params.proj_weight[k];
        dataio::write_fmat_f64(w, p.nrows(), p.ncols(), p.as_slice().unwrap())?;
        let b = &params.proj_bias[k];
        dataio::write_fmat_f64(w, 1, b.len(), b.as_slice().unwrap())?;
    }
    w.write_all(&params.fusion_logit.to_le_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, String)>, ModelParams), ModelError> {
    let file = File::open(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&mut BufReader::new(file))
}

fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Vec<(String, String)>, ModelParams), ModelError> {
    let bad = |msg: String| ModelError::Checkpoint(msg);
    let mut read = |n: usize| -> Result<Vec<u8>, ModelError> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
        Ok(buf)
    };
    if read(4)? != CKPT_MAGIC {
        return Err(bad("magic mismatch".into()));
    }
    let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(read(8)?.try_into().unwrap()) as usize;
    let text = String::from_utf8(read(hlen)?).map_err(|_| bad("header is not UTF-8".into()))?;
    let header = text
        .lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("header line {l:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
    let mut params = ModelParams {
        modalities: Vec::new(),
        user_embed: Vec::new(),
        proj_weight: Vec::new(),
        proj_bias: Vec::new(),
        fusion_logit: 0.0,
    };
    let data_err = |e: dataio::DataError| bad(e.to_string());
    for _ in 0..n {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|e| bad(e.to_string()))?;
        let m: Modality = String::from_utf8_lossy(&name).parse().map_err(bad)?;
        let (ur, uc, u) = dataio::read_fmat_f64(r).map_err(data_err)?;
        let (pr, pc, p) = dataio::read_fmat_f64(r).map_err(data_err)?;
        let (_, bc, b) = dataio::read_fmat_f64(r).map_err(data_err)?;
        params.modalities.push(m);
        params.user_embed.push(Array2::from_shape_vec((ur, uc), u).unwrap());
        params.proj_weight.push(Array2::from_shape_vec((pr, pc), p).unwrap());
        params.proj_bias.push(Array1::from_shape_vec(bc, b).unwrap());
    }
    let mut logit = [0u8; 8];
    r.read_exact(&mut logit).map_err(|e| bad(e.to_string()))?;
    params.fusion_logit = f64::from_le_bytes(logit);
    Ok((header, params))
}
