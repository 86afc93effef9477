//! Full-ranking top-K evaluation with Recall@K and NDCG@K.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};

use crate::dataio::SplitDataset;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground-truth set is empty")]
    EmptyTruth,
    #[error("no users with ground truth in the {0} part")]
    NoEvaluableUsers(Part),
    #[error("cutoff K must be >= 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Valid,
    Test,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Valid => "valid",
            Part::Test => "test",
        })
    }
}

impl FromStr for Part {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "valid" | "validation" => Ok(Part::Valid),
            "test" => Ok(Part::Test),
            other => Err(format!("unknown split part {other:?}")),
        }
    }
}

/// Top-`k` item indices by descending score, skipping `excluded` (sorted).
/// Ties go to the smaller item index; -0.0 and 0.0 tie.
pub fn rank_items(scores: &[f64], excluded: &[usize], k: usize) -> Vec<usize> {
    debug_assert!(excluded.windows(2).all(|w| w[0] < w[1]));
    let mut ex = excluded.iter().peekable();
    let mut cand: Vec<(usize, f64)> = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        if ex.peek() == Some(&&i) {
            ex.next();
            continue;
        }
        cand.push((i, s + 0.0));
    }
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|c| c.0).collect()
}

pub fn recall_at_k(topk: &[usize], truth: &HashSet<usize>, k: usize) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    let hits = topk.iter().take(k).filter(|i| truth.contains(i)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Binary-relevance NDCG with a `log2(rank + 1)` discount; the ideal DCG is
/// truncated at `min(k, |truth|)`.
pub fn ndcg_at_k(topk: &[usize], truth: &HashSet<usize>, k: usize) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(p, _)| discount(p))
        .sum();
    let idcg: f64 = (0..k.min(truth.len())).map(discount).sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMetrics {
    pub user: usize,
    /// Aligned with the `ks` passed to evaluation.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    pub config: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (k, r) in self.ks.iter().zip(&self.recall) {
            obj.insert(format!("recall@{k}"), (*r).into());
        }
        for (k, n) in self.ks.iter().zip(&self.ndcg) {
            obj.insert(format!("ndcg@{k}"), (*n).into());
        }
        obj.insert("users".into(), self.users.into());
        let config: serde_json::Map<_, _> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        obj.insert("config".into(), config.into());
        serde_json::Value::Object(obj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub part: Part,
    /// Also exclude validation items when ranking for the test part.
    pub mask_valid: bool,
}

const USER_BLOCK: usize = 256;

/// Ranks every item for each user with a non-empty `truth[u]`, excluding the
/// sorted `excluded[u]`.
pub fn evaluate_lists(
    z_user: &Array2<f64>,
    z_item: &Array2<f64>,
    truth: &[Vec<usize>],
    excluded: &[Vec<usize>],
    ks: &[usize],
) -> Result<Vec<UserMetrics>, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let users: Vec<usize> = (0..truth.len()).filter(|&u| !truth[u].is_empty()).collect();
    let mut out = Vec::with_capacity(users.len());
    for chunk in users.chunks(USER_BLOCK) {
        let zu = z_user.select(Axis(0), chunk);
        let scores = zu.dot(&z_item.t());
        for (row, &u) in chunk.iter().enumerate() {
            let view = scores.row(row);
            // the product is not guaranteed to be row-major
            let owned;
            let row_scores = match view.as_slice() {
                Some(v) => v,
                None => {
                    owned = view.to_vec();
                    &owned
                }
            };
            let top = rank_items(row_scores, &excluded[u], max_k);
            let truth_set: HashSet<usize> = truth[u].iter().copied().collect();
            out.push(UserMetrics {
                user: u,
                recall: ks.iter().map(|&k| recall_at_k(&top, &truth_set, k)).collect::<Result<_, _>>()?,
                ndcg: ks.iter().map(|&k| ndcg_at_k(&top, &truth_set, k)).collect::<Result<_, _>>()?,
            });
        }
    }
    Ok(out)
}

/// Ranks every item for each user with ground truth in the chosen part.
pub fn evaluate_users(
    z_user: &Array2<f64>,
    z_item: &Array2<f64>,
    split: &SplitDataset,
    opts: EvalOptions,
    ks: &[usize],
) -> Result<Vec<UserMetrics>, EvalError> {
    let truth = match opts.part {
        Part::Valid => split.valid.user_items(),
        Part::Test => split.test.user_items(),
    };
    let mut excluded = split.train.user_items();
    if opts.part == Part::Test && opts.mask_valid {
        for (e, v) in excluded.iter_mut().zip(split.valid.user_items()) {
            e.extend(v);
            e.sort_unstable();
            e.dedup();
        }
    }
    evaluate_lists(z_user, z_item, &truth, &excluded, ks)
}

/// Kahan-compensated mean.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean metrics over per-user results.
pub fn summarize(per_user: &[UserMetrics], ks: &[usize]) -> MetricsReport {
    MetricsReport {
        ks: ks.to_vec(),
        recall: (0..ks.len()).map(|k| mean(per_user.iter().map(|m| m.recall[k]))).collect(),
        ndcg: (0..ks.len()).map(|k| mean(per_user.iter().map(|m| m.ndcg[k]))).collect(),
        users: per_user.len(),
        config: Vec::new(),
    }
}

pub fn evaluate(
    z_user: &Array2<f64>,
    z_item: &Array2<f64>,
    split: &SplitDataset,
    opts: EvalOptions,
    ks: &[usize],
) -> Result<MetricsReport, EvalError> {
    let per_user = evaluate_users(z_user, z_item, split, opts, ks)?;
    if per_user.is_empty() {
        return Err(EvalError::NoEvaluableUsers(opts.part));
    }
    Ok(summarize(&per_user, ks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> HashSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn ranking_examples() {
        let scores = [0.1, 0.9, 0.5];
        assert_eq!(rank_items(&scores, &[], 2), vec![1, 2]);
        assert_eq!(rank_items(&scores, &[1], 2), vec![2, 0]);
        assert_eq!(rank_items(&[1.0, 2.0, 2.0, 1.0], &[], 4), vec![1, 2, 0, 3]);
        assert_eq!(rank_items(&scores, &[0, 2], 5), vec![1]);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[7, 1, 2], &set(&[7]), 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[3, 5], &set(&[4, 5]), 10).unwrap(), 0.5);
        let r = recall_at_k(&[1, 2, 9, 4], &set(&[1, 2, 3]), 10).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(recall_at_k(&[1], &set(&[]), 1), Err(EvalError::EmptyTruth)));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[4, 1], &set(&[4]), 10).unwrap(), 1.0);
        let n = ndcg_at_k(&[1, 4], &set(&[4]), 2).unwrap();
        assert!((n - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&[1, 2], &set(&[4]), 2).unwrap(), 0.0);
        assert!(matches!(ndcg_at_k(&[1], &set(&[]), 1), Err(EvalError::EmptyTruth)));
    }
}
