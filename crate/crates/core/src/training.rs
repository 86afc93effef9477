//! BPR training: triplet sampling, loss, gradients, Adam and early stopping.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{InteractionTable, SplitDataset};
use crate::eval::{self, EvalError, EvalOptions, Part};
use crate::model::{self, ModelConfig, ModelError, ModelInputs, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("user {0} has interacted with every item; no negative exists")]
    NoNegative(usize),
    #[error("negative sampling for user {0} gave up after {1} attempts")]
    RejectionCap(usize, usize),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite parameter update")]
    NonFiniteUpdate,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("gradient shapes do not match parameters")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Which parameters the L2 penalty covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegScope {
    /// Batch-touched user rows and item layer-0 rows plus the projections, divided by batch size.
    Batch,
    /// Every embedding, projection and bias.
    Full,
}

impl fmt::Display for RegScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegScope::Batch => "batch",
            RegScope::Full => "full",
        })
    }
}

impl FromStr for RegScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "batch" => Ok(RegScope::Batch),
            "full" => Ok(RegScope::Full),
            other => Err(format!("unknown regularization scope {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub reg_lambda: f64,
    pub reg_scope: RegScope,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            reg_lambda: 1e-3,
            reg_scope: RegScope::Batch,
            batch_size: 2048,
            max_epochs: 1000,
            patience: 20,
            seed: 2023,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let rates_ok = self.learning_rate > 0.0 && self.reg_lambda >= 0.0;
        if !rates_ok {
            return Err(TrainError::Config("learning rate must be > 0 and lambda >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::Config("batch size, epochs and patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sorted per-user training items for membership tests.
#[derive(Debug, Clone)]
pub struct TrainIndex {
    pub num_items: usize,
    pub user_items: Vec<Vec<usize>>,
    pub pairs: Vec<(usize, usize)>,
}

impl TrainIndex {
    pub fn new(train: &InteractionTable) -> Self {
        TrainIndex {
            num_items: train.num_items,
            user_items: train.user_items(),
            pairs: train.pairs.clone(),
        }
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.user_items[user].binary_search(&item).is_ok()
    }
}

/// Uniform rejection sampling of an item the user has not interacted with.
pub fn sample_negative<R: Rng>(index: &TrainIndex, user: usize, rng: &mut R) -> Result<usize, TrainError> {
    let m = index.num_items;
    if index.user_items[user].len() >= m {
        return Err(TrainError::NoNegative(user));
    }
    let cap = 1000 + 64 * m;
    for _ in 0..cap {
        let j = rng.random_range(0..m);
        if !index.contains(user, j) {
            return Ok(j);
        }
    }
    Err(TrainError::RejectionCap(user, cap))
}

/// `batch_size` triplets with positives drawn uniformly from the training edges.
pub fn sample_triplets<R: Rng>(index: &TrainIndex, batch_size: usize, rng: &mut R) -> Result<Vec<Triplet>, TrainError> {
    (0..batch_size)
        .map(|_| {
            let (user, pos) = index.pairs[rng.random_range(0..index.pairs.len())];
            let neg = sample_negative(index, user, rng)?;
            Ok(Triplet { user, pos, neg })
        })
        .collect()
}

/// `-ln sigmoid(x)`, stable for large |x|.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn regularizer(params: &ModelParams, state: &model::ForwardState, batch: &[Triplet], lambda: f64, scope: RegScope) -> f64 {
    match scope {
        RegScope::Full => {
            let logit = params.fusion_logit;
            lambda * (params.squared_norm() - logit * logit)
        }
        RegScope::Batch => {
            let mut total = 0.0;
            for k in 0..params.modalities.len() {
                let base = state.item_base(k);
                for t in batch {
                    let u = params.user_embed[k].row(t.user);
                    let i = base.row(t.pos);
                    let j = base.row(t.neg);
                    total += u.dot(&u) + i.dot(&i) + j.dot(&j);
                }
                total += params.proj_weight[k].iter().map(|v| v * v).sum::<f64>();
            }
            lambda * total / batch.len() as f64
        }
    }
}

/// Mean BPR loss over the batch plus the L2 penalty.
pub fn bpr_loss(
    state: &model::ForwardState,
    batch: &[Triplet],
    lambda: f64,
    params: &ModelParams,
    scope: RegScope,
) -> Result<f64, TrainError> {
    let bpr: f64 = batch
        .iter()
        .map(|t| neg_log_sigmoid(state.score(t.user, t.pos) - state.score(t.user, t.neg)))
        .sum::<f64>()
        / batch.len() as f64;
    let loss = bpr + regularizer(params, state, batch, lambda, scope);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::NonFiniteLoss)
    }
}

/// Exact gradients of [`bpr_loss`] with respect to every parameter tensor.
pub fn backward(
    params: &ModelParams,
    inputs: &ModelInputs,
    config: &ModelConfig,
    state: &model::ForwardState,
    batch: &[Triplet],
    lambda: f64,
    scope: RegScope,
) -> Result<ModelParams, TrainError> {
    let b = batch.len() as f64;
    let mut gzu = Array2::zeros(state.z_user.raw_dim());
    let mut gzi = Array2::zeros(state.z_item.raw_dim());
    for t in batch {
        let delta = state.score(t.user, t.pos) - state.score(t.user, t.neg);
        // d/dx of -ln sigmoid(x) is -sigmoid(-x)
        let g = -model::sigmoid(-delta) / b;
        let zu = state.z_user.row(t.user);
        let diff = &state.z_item.row(t.pos) - &state.z_item.row(t.neg);
        gzu.row_mut(t.user).scaled_add(g, &diff);
        gzi.row_mut(t.pos).scaled_add(g, &zu);
        gzi.row_mut(t.neg).scaled_add(-g, &zu);
    }
    let mut grads = model::backward(params, inputs, config, state, &gzu, &gzi)?;

    if lambda > 0.0 {
        match scope {
            RegScope::Full => {
                let logit_grad = grads.fusion_logit;
                for (g, p) in grads.tensors_mut().into_iter().zip(params.tensors()) {
                    for (gv, pv) in g.iter_mut().zip(p) {
                        *gv += 2.0 * lambda * pv;
                    }
                }
                grads.fusion_logit = logit_grad;
            }
            RegScope::Batch => {
                let c = 2.0 * lambda / b;
                for k in 0..params.modalities.len() {
                    let base = state.item_base(k);
                    let mut item_counts = vec![0usize; base.nrows()];
                    for t in batch {
                        grads.user_embed[k].row_mut(t.user).scaled_add(c, &params.user_embed[k].row(t.user));
                        item_counts[t.pos] += 1;
                        item_counts[t.neg] += 1;
                    }
                    let x = &inputs.features[k];
                    for (i, &n) in item_counts.iter().enumerate().filter(|(_, &n)| n > 0) {
                        let g_row = &base.row(i) * (c * n as f64);
                        grads.proj_bias[k] += &g_row;
                        for (r, &xv) in x.row(i).iter().enumerate() {
                            if xv != 0.0 {
                                grads.proj_weight[k].row_mut(r).scaled_add(xv, &g_row);
                            }
                        }
                    }
                    grads.proj_weight[k].scaled_add(c, &params.proj_weight[k]);
                }
            }
        }
    }
    Ok(grads)
}

/// Forward pass, loss and gradients for one batch.
pub fn loss_and_gradients(
    params: &ModelParams,
    inputs: &ModelInputs,
    config: &ModelConfig,
    batch: &[Triplet],
    lambda: f64,
    scope: RegScope,
) -> Result<(f64, ModelParams), TrainError> {
    let state = model::forward(params, inputs, config)?;
    let loss = bpr_loss(&state, batch, lambda, params, scope)?;
    let grads = backward(params, inputs, config, &state, batch, lambda, scope)?;
    Ok((loss, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ModelParams,
    pub second: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    let shapes = |p: &ModelParams| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    if shapes(params) != shapes(grads) || shapes(params) != shapes(&state.first) {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let mut next = params.clone();
    for (((p, g), m), v) in next
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut())
    {
        for idx in 0..p.len() {
            m[idx] = b1 * m[idx] + (1.0 - b1) * g[idx];
            v[idx] = b2 * v[idx] + (1.0 - b2) * g[idx] * g[idx];
            let m_hat = m[idx] / bc1;
            let v_hat = v[idx] / bc2;
            p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if !next.is_finite() {
        return Err(TrainError::NonFiniteUpdate);
    }
    *params = next;
    Ok(())
}

/// Early stopping on a metric that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best_value: f64,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_epoch: 0,
            best_value: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value > self.best_value || self.best_epoch == 0 {
            self.best_value = value;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.stale += 1;
            StopDecision {
                improved: false,
                stop: self.stale >= self.patience,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
    pub alpha: f64,
    pub elapsed_ms: u128,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tloss\tval_recall@20\tval_ndcg@20\talpha";

    /// Tab-separated history line. Wall time is left out so the file is
    /// reproducible.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.loss, self.val_recall20, self.val_ndcg20, self.alpha
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (initial parameters if
    /// training diverged before the first evaluation).
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

/// Full training loop with per-epoch validation and early stopping on R@20.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    split: &SplitDataset,
    inputs: &ModelInputs,
) -> Result<TrainOutcome, TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    let params = ModelParams::init(model_config, split.num_users(), &inputs.feature_dims(), train_config.seed);
    train_from(params, model_config, train_config, split, inputs)
}

pub fn train_from(
    params: ModelParams,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    split: &SplitDataset,
    inputs: &ModelInputs,
) -> Result<TrainOutcome, TrainError> {
    train_observed(params, model_config, train_config, split, inputs, |_, _| {})
}

/// [`train_from`] with a callback after every completed epoch, given the
/// epoch record and the forward state of the current parameters.
pub fn train_observed(
    mut params: ModelParams,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    split: &SplitDataset,
    inputs: &ModelInputs,
    mut observe: impl FnMut(&EpochRecord, &model::ForwardState),
) -> Result<TrainOutcome, TrainError> {
    let index = TrainIndex::new(&split.train);
    if let Some(u) = (0..split.num_users()).find(|&u| index.user_items[u].len() >= index.num_items) {
        return Err(TrainError::NoNegative(u));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x5eed_0fb9);
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(train_config.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..index.pairs.len()).collect();
    let start = Instant::now();
    let eval_opts = EvalOptions {
        part: Part::Valid,
        mask_valid: false,
    };

    let mut stop_reason = StopReason::MaxEpochs;
    'epochs: for epoch in 1..=train_config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&p| {
                    let (user, pos) = index.pairs[p];
                    sample_negative(&index, user, &mut rng).map(|neg| Triplet { user, pos, neg })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let step = loss_and_gradients(
                &params,
                inputs,
                model_config,
                &batch,
                train_config.reg_lambda,
                train_config.reg_scope,
            );
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(TrainError::NonFiniteLoss) | Err(TrainError::Model(ModelError::NonFinite(_))) => {
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            match adam_step(&mut params, &grads, &mut adam, train_config.learning_rate) {
                Ok(()) => {}
                Err(TrainError::NonFiniteUpdate) => {
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss_sum += loss;
            batches += 1;
        }
        let state = match model::forward(&params, inputs, model_config) {
            Ok(s) => s,
            Err(ModelError::NonFinite(_)) => {
                stop_reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let report = eval::evaluate(&state.z_user, &state.z_item, split, eval_opts, &[20])?;
        let (r20, n20) = (report.recall[0], report.ndcg[0]);
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            val_recall20: r20,
            val_ndcg20: n20,
            alpha: params.alpha(),
            elapsed_ms: start.elapsed().as_millis(),
        });
        observe(history.last().unwrap(), &state);
        let decision = stopper.observe(epoch, r20);
        if decision.improved {
            best = params.clone();
        }
        if decision.stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch: stopper.best_epoch,
        best_val_recall20: stopper.best_value.max(0.0),
        history,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_negative() {
        let t = InteractionTable::from_pairs(1, 4, &[(0, 0), (0, 1), (0, 3)]);
        let idx = TrainIndex::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(sample_negative(&idx, 0, &mut rng).unwrap(), 2);
        }
        let full = InteractionTable::from_pairs(1, 2, &[(0, 0), (0, 1)]);
        assert!(matches!(
            sample_negative(&TrainIndex::new(&full), 0, &mut rng),
            Err(TrainError::NoNegative(0))
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let pairs: Vec<_> = (0..6).flat_map(|u| (0..3).map(move |i| (u, (u + i) % 10))).collect();
        let t = InteractionTable::from_pairs(6, 10, &pairs);
        let idx = TrainIndex::new(&t);
        let a = sample_triplets(&idx, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_triplets(&idx, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| idx.contains(t.user, t.pos) && !idx.contains(t.user, t.neg)));
    }

    #[test]
    fn negative_frequencies_are_uniform() {
        // Two candidate negatives out of five items.
        let t = InteractionTable::from_pairs(1, 5, &[(0, 0), (0, 2), (0, 4)]);
        let idx = TrainIndex::new(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let ones = (0..n).filter(|_| sample_negative(&idx, 0, &mut rng).unwrap() == 1).count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn neg_log_sigmoid_values() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((neg_log_sigmoid(1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!(neg_log_sigmoid(800.0) < 1e-300);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
    }

    fn tiny_params() -> ModelParams {
        let c = ModelConfig {
            dim: 2,
            modalities: vec![crate::dataio::Modality::Textual],
            ..Default::default()
        };
        ModelParams::init(&c, 2, &[3], 0)
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = tiny_params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.fill(0.3);
        }
        let mut st = AdamState::new(&p);
        let mut st2 = st.clone();
        let mut p2 = p.clone();
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((y - x) - 1e-3).abs() < 1e-9);
            }
        }
        adam_step(&mut p2, &g, &mut st2, 1e-3).unwrap();
        assert_eq!(p, p2);
        assert_eq!(st, st2);
    }

    #[test]
    fn early_stopping_contract() {
        let mut s = EarlyStopping::new(20);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let d = s.observe(epoch, 1.0 / epoch as f64);
            if d.stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(21));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn early_stopping_requires_strict_improvement() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 0.5).improved);
        assert!(!s.observe(2, 0.5).improved);
        assert!(s.observe(3, 0.6).improved);
        assert!(!s.observe(4, 0.1).stop);
        assert!(s.observe(5, 0.1).stop);
    }
}
