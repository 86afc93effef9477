//! Python module `dualrec`: the command pipeline plus a few building blocks.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dualrec_core::cli::{self, CliError, Context};
use dualrec_core::config::RunConfig;
use dualrec_core::dataio::{self, InteractionTable};
use dualrec_core::eval::{self, Part};
use dualrec_core::toy;

fn to_py(e: CliError) -> PyErr {
    match e {
        CliError::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn context(config: Option<PathBuf>, out: PathBuf, overrides: Option<BTreeMap<String, String>>, force: bool) -> PyResult<Context> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(&path).map_err(|e| to_py(e.into()))?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(|e| to_py(e.into()))?;
    }
    Ok(Context { config: cfg, out, force })
}

/// Writes a planted two-block toy dataset and returns its file paths.
#[pyfunction]
#[pyo3(signature = (dir, seed=2023, users=20, items=30, per_user=10))]
fn write_toy(dir: PathBuf, seed: u64, users: usize, items: usize, per_user: usize) -> PyResult<BTreeMap<String, PathBuf>> {
    if per_user > items / 2 {
        return Err(PyValueError::new_err("per_user must be at most half the items"));
    }
    let raw = toy::write_raw(&dir, &toy::planted_blocks(seed, users, items, per_user))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut out = BTreeMap::from([("interactions".to_string(), raw.interactions)]);
    out.insert("visual".into(), raw.features[0].clone());
    out.insert("textual".into(), raw.features[1].clone());
    Ok(out)
}

/// k-core filtering and splitting; returns the kept counts.
#[pyfunction]
#[pyo3(signature = (out, config=None, overrides=None))]
fn preprocess(out: PathBuf, config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<BTreeMap<String, usize>> {
    let s = cli::cmd_preprocess(&context(config, out, overrides, false)?).map_err(to_py)?;
    Ok(BTreeMap::from([
        ("users".to_string(), s.users),
        ("items".to_string(), s.items),
        ("interactions".to_string(), s.interactions),
        ("train".to_string(), s.train),
        ("valid".to_string(), s.valid),
        ("test".to_string(), s.test),
    ]))
}

/// Builds the graph cache; returns False when an up-to-date cache was reused.
#[pyfunction]
#[pyo3(signature = (out, config=None, overrides=None, force=false))]
fn build_graphs(out: PathBuf, config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>, force: bool) -> PyResult<bool> {
    let built = cli::cmd_build_graphs(&context(config, out, overrides, force)?).map_err(to_py)?;
    Ok(built == cli::GraphBuild::Built)
}

/// Trains and checkpoints; returns the best epoch and validation metrics.
#[pyfunction]
#[pyo3(signature = (out, config=None, overrides=None))]
fn train(out: PathBuf, config: Option<PathBuf>, overrides: Option<BTreeMap<String, String>>) -> PyResult<BTreeMap<String, f64>> {
    let s = cli::cmd_train(&context(config, out, overrides, false)?).map_err(to_py)?;
    let mut m = metrics(&s.valid);
    m.insert("best_epoch".into(), s.best_epoch as f64);
    m.insert("epochs_run".into(), s.epochs_run as f64);
    Ok(m)
}

fn metrics(r: &eval::MetricsReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for (i, k) in r.ks.iter().enumerate() {
        m.insert(format!("recall@{k}"), r.recall[i]);
        m.insert(format!("ndcg@{k}"), r.ndcg[i]);
    }
    m.insert("users".into(), r.users as f64);
    m
}

/// Evaluates the checkpoint on "valid" or "test" and writes the report.
#[pyfunction]
#[pyo3(signature = (out, part="test", checkpoint=None, mask_valid=false))]
fn evaluate(out: PathBuf, part: &str, checkpoint: Option<PathBuf>, mask_valid: bool) -> PyResult<BTreeMap<String, f64>> {
    let part: Part = part.parse().map_err(PyValueError::new_err)?;
    let mut ctx = context(None, out, None, false)?;
    ctx.config.eval_mask_valid = mask_valid;
    let (report, _) = cli::cmd_evaluate(&ctx, checkpoint.as_deref(), part).map_err(to_py)?;
    Ok(metrics(&report))
}

/// Finite-difference gradient check; returns (label, max relative error, passed).
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let mut sink = Vec::new();
    let reports = match cli::cmd_gradcheck(seed, &mut sink) {
        Ok(r) => r,
        Err(CliError::GradcheckFailed(n)) => {
            return Err(PyRuntimeError::new_err(format!(
                "{n} configuration(s) failed:\n{}",
                String::from_utf8_lossy(&sink)
            )))
        }
        Err(e) => return Err(to_py(e)),
    };
    Ok(reports.iter().map(|r| (r.label.clone(), r.max_rel_err, r.passed())).collect())
}

/// Iterated k-core over (user, item) index pairs; returns the surviving pairs.
#[pyfunction]
fn kcore(pairs: Vec<(usize, usize)>, k: usize) -> PyResult<Vec<(usize, usize)>> {
    let n = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    let m = pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let table = InteractionTable::from_pairs(n, m, &pairs);
    match dataio::kcore_filter(&table, k) {
        Ok(r) => Ok(r.table.pairs.iter().map(|&(u, i)| (r.kept_users[u], r.kept_items[i])).collect()),
        Err(dataio::DataError::EmptyAfterKcore { .. }) => Ok(Vec::new()),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

#[pyfunction]
fn recall_at_k(ranking: Vec<usize>, truth: HashSet<usize>, k: usize) -> PyResult<f64> {
    eval::recall_at_k(&ranking, &truth, k).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn ndcg_at_k(ranking: Vec<usize>, truth: HashSet<usize>, k: usize) -> PyResult<f64> {
    eval::ndcg_at_k(&ranking, &truth, k).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn dualrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(write_toy, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(build_graphs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(kcore, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    Ok(())
}
