//! Central finite-difference verification of the analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Modality;
use crate::graphs::{GraphParams, GraphSet};
use crate::model::{self, ComponentMode, FusionMode, ModelConfig, ModelInputs, ModelParams};
use crate::toy;
use crate::training::{self, RegScope, TrainError, TrainIndex, Triplet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Below this magnitude coordinates are compared absolutely.
    pub tiny: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            tiny: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub label: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Loss for fixed parameters; used on both sides of every difference.
fn loss_at(
    params: &ModelParams,
    inputs: &ModelInputs,
    config: &ModelConfig,
    batch: &[Triplet],
    lambda: f64,
    scope: RegScope,
) -> Result<f64, TrainError> {
    let state = model::forward(params, inputs, config)?;
    training::bpr_loss(&state, batch, lambda, params, scope)
}

/// Compares analytic gradients against central differences on every coordinate.
/// `tamper` may modify the analytic gradients first (for testing the harness).
#[allow(clippy::too_many_arguments)]
pub fn check_gradients_with(
    label: &str,
    params: &ModelParams,
    inputs: &ModelInputs,
    config: &ModelConfig,
    batch: &[Triplet],
    lambda: f64,
    scope: RegScope,
    opts: &GradcheckOptions,
    tamper: impl FnOnce(&mut ModelParams),
) -> Result<GradcheckReport, TrainError> {
    let (_, mut analytic) = training::loss_and_gradients(params, inputs, config, batch, lambda, scope)?;
    tamper(&mut analytic);
    let names = params.tensor_names();
    let mut probe = params.clone();
    let mut report = GradcheckReport {
        label: label.to_string(),
        coords: 0,
        max_rel_err: 0.0,
        mismatches: Vec::new(),
    };
    for (t, name) in names.iter().enumerate() {
        let len = params.tensors()[t].len();
        for idx in 0..len {
            let orig = params.tensors()[t][idx];
            probe.tensors_mut()[t][idx] = orig + opts.step;
            let plus = loss_at(&probe, inputs, config, batch, lambda, scope)?;
            probe.tensors_mut()[t][idx] = orig - opts.step;
            let minus = loss_at(&probe, inputs, config, batch, lambda, scope)?;
            probe.tensors_mut()[t][idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.tensors()[t][idx];
            let scale = a.abs().max(numeric.abs());
            let diff = (a - numeric).abs();
            report.coords += 1;
            let ok = if scale < opts.tiny {
                diff < opts.abs_tol
            } else {
                let rel = diff / scale;
                report.max_rel_err = report.max_rel_err.max(rel);
                rel < opts.rel_tol
            };
            if !ok {
                report.mismatches.push(Mismatch {
                    tensor: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// One gradient-check case: component mode, fusion mode and modality set.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub components: ComponentMode,
    pub fusion: FusionMode,
    pub modalities: Vec<Modality>,
}

impl Case {
    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}",
            self.components,
            self.fusion,
            model::modalities_to_string(&self.modalities)
        )
    }
}

/// The full cartesian product: 3 component modes x 4 fusion modes x 3 modality sets.
pub fn all_cases() -> Vec<Case> {
    let sets = [
        vec![Modality::Visual],
        vec![Modality::Textual],
        vec![Modality::Visual, Modality::Textual],
    ];
    let mut out = Vec::new();
    for components in ComponentMode::ALL {
        for fusion in FusionMode::ALL {
            for modalities in &sets {
                out.push(Case {
                    components,
                    fusion,
                    modalities: modalities.clone(),
                });
            }
        }
    }
    out
}

/// Seeded toy instance for gradient checks: 8 users, 12 items, d=4, visual
/// dim 6, textual dim 5.
pub struct ToyProblem {
    pub graphs: GraphSet,
    pub features: Vec<crate::dataio::FeatureMatrix>,
    pub batch: Vec<Triplet>,
    pub num_users: usize,
    pub seed: u64,
}

impl ToyProblem {
    pub fn new(seed: u64) -> Self {
        let data = toy::random_instance(seed, 8, 12, 4, (6, 5));
        let graphs = GraphSet::build(
            &data.table,
            &data.features,
            &GraphParams {
                k_user: 3,
                k_item: 3,
                alpha_visual: 0.1,
            },
        )
        .expect("toy graphs");
        let index = TrainIndex::new(&data.table);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let batch = training::sample_triplets(&index, 16, &mut rng).expect("toy negatives");
        ToyProblem {
            graphs,
            features: data.features,
            batch,
            num_users: data.table.num_users,
            seed,
        }
    }

    pub fn config(&self, case: &Case) -> ModelConfig {
        ModelConfig {
            dim: 4,
            layers_bipartite: 2,
            layers_user: 1,
            layers_item: 1,
            fusion: case.fusion,
            modalities: case.modalities.clone(),
            components: case.components,
            item_row_norm: false,
        }
    }

    /// Xavier init with a non-neutral fusion logit and nonzero biases so every
    /// term of the chain is exercised.
    pub fn params(&self, config: &ModelConfig, inputs: &ModelInputs) -> ModelParams {
        let mut p = ModelParams::init(config, self.num_users, &inputs.feature_dims(), self.seed);
        p.fusion_logit = 0.3;
        for (k, b) in p.proj_bias.iter_mut().enumerate() {
            for (j, v) in b.iter_mut().enumerate() {
                *v = 0.05 * (j as f64 + 1.0) * if k == 0 { 1.0 } else { -1.0 };
            }
        }
        p
    }

    pub fn check(&self, case: &Case, lambda: f64, scope: RegScope, opts: &GradcheckOptions) -> Result<GradcheckReport, TrainError> {
        self.check_with(case, lambda, scope, opts, |_| {})
    }

    pub fn check_with(
        &self,
        case: &Case,
        lambda: f64,
        scope: RegScope,
        opts: &GradcheckOptions,
        tamper: impl FnOnce(&mut ModelParams),
    ) -> Result<GradcheckReport, TrainError> {
        let config = self.config(case);
        let inputs = ModelInputs::new(&self.graphs, &self.features, &config)?;
        let params = self.params(&config, &inputs);
        check_gradients_with(&case.label(), &params, &inputs, &config, &self.batch, lambda, scope, opts, tamper)
    }
}

/// Runs every case of [`all_cases`] on the seeded toy problem.
pub fn run_suite(seed: u64, lambda: f64, opts: &GradcheckOptions) -> Result<Vec<GradcheckReport>, TrainError> {
    let problem = ToyProblem::new(seed);
    all_cases()
        .iter()
        .map(|case| problem.check(case, lambda, RegScope::Batch, opts))
        .collect()
}
