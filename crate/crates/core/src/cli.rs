//! Command implementations for the `dualrec` binary.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/split/{train,valid,test}.tsv, user_ids.tsv, item_ids.tsv, manifest.txt
//! <out>/split/features/{visual,textual}.fmat
//! <out>/graphs/{bipartite,user,item,item_visual,item_textual}.graph, meta.txt
//! <out>/train/checkpoint.bin, history.tsv
//! <out>/eval/report_{valid,test}.json
//! <out>/ablate/{components,fusion,modality}.tsv
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::dataio::{self, DataError, FeatureMatrix, Modality, SplitDataset};
use crate::eval::{self, EvalError, EvalOptions, MetricsReport, Part};
use crate::gradcheck::{self, GradcheckOptions, GradcheckReport};
use crate::graphs::{GraphError, GraphSet};
use crate::model::{self, ComponentMode, FusionMode, ModelConfig, ModelError, ModelInputs, ModelParams};
use crate::training::{self, EpochRecord, StopReason, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}; last finite checkpoint written to {checkpoint}")]
    Diverged { epoch: usize, checkpoint: PathBuf },
    #[error("gradient check failed for {0} configuration(s)")]
    GradcheckFailed(usize),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::GradcheckFailed(_) => EXIT_GRADCHECK,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::MissingFeatures(_) => CliError::Config(e.to_string()),
            ModelError::Io { .. } => CliError::Other(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

/// Shared state for one command invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

/// Exclusive lock on the output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let path = out.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| CliError::Other(format!("cannot lock {}: {e} (another command running?)", out.display())))?;
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_files(paths: &[&Path]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p).map_err(io_err(p))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn kv_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn split_dir(out: &Path) -> PathBuf {
    out.join("split")
}

pub fn graphs_dir(out: &Path) -> PathBuf {
    out.join("graphs")
}

pub fn train_dir(out: &Path) -> PathBuf {
    out.join("train")
}

pub fn feature_file(out: &Path, m: Modality) -> PathBuf {
    split_dir(out).join("features").join(format!("{m}.fmat"))
}

#[derive(Debug, Clone)]
pub struct PreprocessSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub manifest: PathBuf,
}

/// k-core filtering, splitting and feature alignment. Raw feature rows are
/// indexed by the first-occurrence order of items in the raw interaction file.
pub fn cmd_preprocess(ctx: &Context) -> Result<PreprocessSummary, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let _lock = OutputLock::acquire(&ctx.out)?;
    let raw_path = cfg.interactions.as_ref().ok_or(ConfigError::Missing("data.interactions"))?;
    let raw = dataio::load_interactions(raw_path)?;
    let core = dataio::kcore_filter(&raw, cfg.kcore)?;
    let split = dataio::split_interactions(&core.table, &cfg.split)?;

    let dir = split_dir(&ctx.out);
    fs::create_dir_all(dir.join("features")).map_err(io_err(&dir))?;
    let mut inputs: Vec<&Path> = vec![raw_path.as_path()];
    let mut feature_lines = Vec::new();
    for m in Modality::ALL {
        if let Some(path) = cfg.feature_path(m) {
            let f = dataio::load_feature_matrix(path, Some(raw.num_items), m)?;
            let aligned = f.select_rows(&core.kept_items);
            dataio::store_feature_matrix(&feature_file(&ctx.out, m), &aligned)?;
            inputs.push(path.as_path());
            feature_lines.push((format!("features.{m}"), format!("features/{m}.fmat")));
        }
    }
    dataio::write_interactions(&dir.join("train.tsv"), &split.train)?;
    dataio::write_interactions(&dir.join("valid.tsv"), &split.valid)?;
    dataio::write_interactions(&dir.join("test.tsv"), &split.test)?;
    dataio::write_id_map(&dir.join("user_ids.tsv"), &core.table.user_ids)?;
    dataio::write_id_map(&dir.join("item_ids.tsv"), &core.table.item_ids)?;

    let r = cfg.split.ratios;
    let mut manifest = vec![
        ("seed".to_string(), cfg.split.seed.to_string()),
        ("ratios".to_string(), format!("{},{},{}", r[0], r[1], r[2])),
        ("kcore".to_string(), cfg.kcore.to_string()),
        ("strategy".to_string(), cfg.split.strategy.to_string()),
        ("input_hash".to_string(), hash_files(&inputs)?),
        ("users".to_string(), core.table.num_users.to_string()),
        ("items".to_string(), core.table.num_items.to_string()),
        ("interactions".to_string(), core.table.len().to_string()),
        ("train".to_string(), "train.tsv".to_string()),
        ("valid".to_string(), "valid.tsv".to_string()),
        ("test".to_string(), "test.tsv".to_string()),
        ("user_ids".to_string(), "user_ids.tsv".to_string()),
        ("item_ids".to_string(), "item_ids.tsv".to_string()),
    ];
    manifest.extend(feature_lines);
    manifest.extend(cfg.pairs(&["data.", "split."]).into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, kv_text(&manifest)).map_err(io_err(&manifest_path))?;
    Ok(PreprocessSummary {
        users: core.table.num_users,
        items: core.table.num_items,
        interactions: core.table.len(),
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
        manifest: manifest_path,
    })
}

/// A preprocessed dataset reloaded from disk.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: SplitDataset,
    pub features: Vec<FeatureMatrix>,
    pub manifest_hash: String,
}

pub fn load_prepared(out: &Path) -> Result<PreparedData, CliError> {
    let dir = split_dir(out);
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Data(format!("{}: {e} (run preprocess first)", manifest_path.display())))?;
    let manifest = parse_kv(&text);
    let get = |k: &str| lookup(&manifest, k).ok_or_else(|| CliError::Data(format!("manifest lacks {k}")));
    let seed: u64 = get("seed")?.parse().map_err(|_| CliError::Data("bad manifest seed".into()))?;
    let users = dataio::read_id_map(&dir.join(get("user_ids")?))?;
    let items = dataio::read_id_map(&dir.join(get("item_ids")?))?;
    let part = |k: &str| -> Result<_, CliError> { Ok(dataio::load_interactions_with_maps(&dir.join(get(k)?), &users, &items)?) };
    let split = SplitDataset {
        train: part("train")?,
        valid: part("valid")?,
        test: part("test")?,
        seed,
    };
    let mut features = Vec::new();
    for m in Modality::ALL {
        if let Some(rel) = lookup(&manifest, &format!("features.{m}")) {
            features.push(dataio::load_feature_matrix(&dir.join(rel), Some(items.len()), m)?);
        }
    }
    Ok(PreparedData {
        split,
        features,
        manifest_hash: sha256_hex(text.as_bytes()),
    })
}

fn graph_meta(cfg: &RunConfig, data: &PreparedData) -> String {
    let mut pairs = vec![("manifest_hash".to_string(), data.manifest_hash.clone())];
    let modalities: Vec<Modality> = data.features.iter().map(|f| f.modality).collect();
    pairs.push(("modalities".to_string(), model::modalities_to_string(&modalities)));
    pairs.extend(cfg.pairs(&["graph."]).into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    kv_text(&pairs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphBuild {
    Built,
    Cached,
}

pub fn cmd_build_graphs(ctx: &Context) -> Result<GraphBuild, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let _lock = OutputLock::acquire(&ctx.out)?;
    let data = load_prepared(&ctx.out)?;
    let dir = graphs_dir(&ctx.out);
    let meta_path = dir.join("meta.txt");
    let meta = graph_meta(cfg, &data);
    if !ctx.force {
        if let Ok(existing) = fs::read_to_string(&meta_path) {
            if existing == meta {
                return Ok(GraphBuild::Cached);
            }
            return Err(CliError::Data(format!(
                "graph cache in {} is stale (manifest or graph config changed); rerun with --force",
                dir.display()
            )));
        }
    }
    let graphs = GraphSet::build(&data.split.train, &data.features, &cfg.graph)?;
    graphs.save(&dir)?;
    fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
    Ok(GraphBuild::Built)
}

/// Loads the graph cache, failing if it was built from other data or settings.
pub fn load_graphs(cfg: &RunConfig, out: &Path, data: &PreparedData) -> Result<GraphSet, CliError> {
    let dir = graphs_dir(out);
    let meta_path = dir.join("meta.txt");
    let existing = fs::read_to_string(&meta_path)
        .map_err(|e| CliError::Data(format!("{}: {e} (run build-graphs first)", meta_path.display())))?;
    if existing != graph_meta(cfg, data) {
        return Err(CliError::Data("graph cache is stale; rerun build-graphs --force".into()));
    }
    let modalities: Vec<Modality> = data.features.iter().map(|f| f.modality).collect();
    Ok(GraphSet::load(&dir, &modalities, &cfg.graph)?)
}

fn checkpoint_header(cfg: &RunConfig, data_hash: &str, best_epoch: usize) -> Vec<(String, String)> {
    let mut h = cfg.pairs(&[]);
    h.push(("data_hash".into(), data_hash.to_string()));
    h.push(("best_epoch".into(), best_epoch.to_string()));
    h
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub valid: MetricsReport,
    pub checkpoint: PathBuf,
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), CliError> {
    let mut text = format!("{}\n", EpochRecord::HEADER);
    text.extend(history.iter().map(|r| r.to_line() + "\n"));
    fs::write(path, text).map_err(io_err(path))
}

/// Model config, data and inputs for one run.
struct Session {
    data: PreparedData,
    graphs: GraphSet,
}

impl Session {
    fn open(cfg: &RunConfig, out: &Path) -> Result<Self, CliError> {
        let data = load_prepared(out)?;
        let graphs = load_graphs(cfg, out, &data)?;
        Ok(Session { data, graphs })
    }

    fn inputs(&self, model: &ModelConfig) -> Result<ModelInputs, CliError> {
        Ok(ModelInputs::new(&self.graphs, &self.data.features, model)?)
    }
}

fn eval_report(
    cfg: &RunConfig,
    params: &ModelParams,
    inputs: &ModelInputs,
    split: &SplitDataset,
    part: Part,
    data_hash: &str,
) -> Result<MetricsReport, CliError> {
    let state = model::forward(params, inputs, &cfg.model)?;
    let opts = EvalOptions {
        part,
        mask_valid: cfg.eval_mask_valid,
    };
    let mut report = eval::evaluate(&state.z_user, &state.z_item, split, opts, &[10, 20])?;
    report.config = cfg.pairs(&[]);
    report.config.push(("data_hash".into(), data_hash.to_string()));
    report.config.push(("part".into(), part.to_string()));
    Ok(report)
}

pub fn cmd_train(ctx: &Context) -> Result<TrainSummary, CliError> {
    let cfg = &ctx.config;
    cfg.validate()?;
    let _lock = OutputLock::acquire(&ctx.out)?;
    let session = Session::open(cfg, &ctx.out)?;
    let inputs = session.inputs(&cfg.model)?;
    let outcome = training::train(&cfg.model, &cfg.train, &session.data.split, &inputs)?;

    let dir = train_dir(&ctx.out);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let checkpoint = dir.join("checkpoint.bin");
    let header = checkpoint_header(cfg, &session.data.manifest_hash, outcome.best_epoch);
    model::save_checkpoint(&checkpoint, &header, &outcome.params)?;
    write_history(&dir.join("history.tsv"), &outcome.history)?;
    if outcome.stop_reason == StopReason::Diverged {
        return Err(CliError::Diverged {
            epoch: outcome.history.len() + 1,
            checkpoint,
        });
    }
    let valid = eval_report(cfg, &outcome.params, &inputs, &session.data.split, Part::Valid, &session.data.manifest_hash)?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        stop_reason: outcome.stop_reason,
        valid,
        checkpoint,
    })
}

/// Rebuilds the run config recorded in a checkpoint header.
pub fn config_from_header(header: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    for (k, v) in header {
        if crate::config::KEYS.contains(&k.as_str()) {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

pub fn cmd_evaluate(ctx: &Context, checkpoint: Option<&Path>, part: Part) -> Result<(MetricsReport, PathBuf), CliError> {
    let default_ckpt = train_dir(&ctx.out).join("checkpoint.bin");
    let checkpoint = checkpoint.unwrap_or(&default_ckpt);
    let (header, params) = model::load_checkpoint(checkpoint)?;
    let mut cfg = config_from_header(&header)?;
    // evaluation-time switches come from the current invocation
    cfg.eval_mask_valid = ctx.config.eval_mask_valid;
    let _lock = OutputLock::acquire(&ctx.out)?;
    let session = Session::open(&cfg, &ctx.out)?;
    if lookup(&header, "data_hash") != Some(session.data.manifest_hash.as_str()) {
        return Err(CliError::Config("checkpoint was trained on different preprocessed data".into()));
    }
    if params.modalities != cfg.model.modalities || params.num_users() != session.data.split.num_users() {
        return Err(CliError::Config("checkpoint parameters do not match its config".into()));
    }
    let inputs = session.inputs(&cfg.model)?;
    let report = eval_report(&cfg, &params, &inputs, &session.data.split, part, &session.data.manifest_hash)?;
    let dir = ctx.out.join("eval");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(format!("report_{part}.json"));
    let json = serde_json::to_string_pretty(&report.to_json()).expect("serializable") + "\n";
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok((report, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    Fusion,
    Modality,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::Components => "components",
            AblationAxis::Fusion => "fusion",
            AblationAxis::Modality => "modality",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "fusion" => Ok(AblationAxis::Fusion),
            "modality" => Ok(AblationAxis::Modality),
            other => Err(format!("unknown ablation axis {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub recall10: f64,
    pub recall20: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
    pub seed: u64,
    pub data_hash: String,
}

pub const ABLATION_HEADER: &str = "variant\trecall@10\trecall@20\tndcg@10\tndcg@20\tseed\tdata_hash";

impl AblationRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.variant, self.recall10, self.recall20, self.ndcg10, self.ndcg20, self.seed, self.data_hash
        )
    }
}

/// Variants of one axis as `(label, config)`; everything else is shared.
pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::Components => {
            for c in ComponentMode::ALL {
                let mut cfg = base.clone();
                cfg.model.components = c;
                out.push((c.to_string(), cfg));
            }
        }
        AblationAxis::Fusion => {
            for f in FusionMode::ALL {
                let mut cfg = base.clone();
                cfg.model.fusion = f;
                cfg.model.modalities = vec![Modality::Visual, Modality::Textual];
                out.push((f.to_string(), cfg));
            }
        }
        AblationAxis::Modality => {
            for (label, ms) in [
                ("visual", vec![Modality::Visual]),
                ("textual", vec![Modality::Textual]),
                ("both", vec![Modality::Visual, Modality::Textual]),
            ] {
                let mut cfg = base.clone();
                cfg.model.modalities = ms;
                out.push((label.to_string(), cfg));
            }
        }
    }
    out
}

/// Trains one model per variant on the shared split and graph cache and
/// reports validation metrics.
pub fn cmd_ablate(ctx: &Context, axis: AblationAxis) -> Result<(Vec<AblationRow>, PathBuf), CliError> {
    ctx.config.validate()?;
    let _lock = OutputLock::acquire(&ctx.out)?;
    let session = Session::open(&ctx.config, &ctx.out)?;
    let mut rows = Vec::new();
    for (label, cfg) in ablation_variants(&ctx.config, axis) {
        cfg.validate()?;
        let inputs = session.inputs(&cfg.model)?;
        let outcome = training::train(&cfg.model, &cfg.train, &session.data.split, &inputs)?;
        if outcome.stop_reason == StopReason::Diverged {
            return Err(CliError::Diverged {
                epoch: outcome.history.len() + 1,
                checkpoint: PathBuf::new(),
            });
        }
        let r = eval_report(&cfg, &outcome.params, &inputs, &session.data.split, Part::Valid, &session.data.manifest_hash)?;
        rows.push(AblationRow {
            variant: label,
            recall10: r.recall_at(10).unwrap(),
            recall20: r.recall_at(20).unwrap(),
            ndcg10: r.ndcg_at(10).unwrap(),
            ndcg20: r.ndcg_at(20).unwrap(),
            seed: cfg.train.seed,
            data_hash: session.data.manifest_hash.clone(),
        });
    }
    let dir = ctx.out.join("ablate");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(format!("{axis}.tsv"));
    let mut text = String::new();
    for (k, v) in ctx.config.pairs(&[]) {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text.push_str(ABLATION_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok((rows, path))
}

/// Runs the finite-difference check over all 36 configurations on a toy
/// instance generated from `seed`.
pub fn cmd_gradcheck(seed: u64, out: &mut dyn Write) -> Result<Vec<GradcheckReport>, CliError> {
    let reports = gradcheck::run_suite(seed, 1e-3, &GradcheckOptions::default())?;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(out, "{status}\t{}\tcoords={}\tmax_rel_err={:.3e}", r.label, r.coords, r.max_rel_err)
            .map_err(|e| CliError::Other(e.to_string()))?;
        for m in &r.mismatches {
            writeln!(
                out,
                "  {}[{}]: analytic={:e} numeric={:e}",
                m.tensor, m.index, m.analytic, m.numeric
            )
            .map_err(|e| CliError::Other(e.to_string()))?;
        }
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    writeln!(out, "{} of {} configurations passed", reports.len() - failed, reports.len())
        .map_err(|e| CliError::Other(e.to_string()))?;
    if failed > 0 {
        return Err(CliError::GradcheckFailed(failed));
    }
    Ok(reports)
}
