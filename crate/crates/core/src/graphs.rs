//! Graph construction: the normalized user-item bipartite graph, the top-k
//! user co-occurrence graph and the binarized item kNN graphs built from
//! item features.
//!
//! All graphs are built once from the training split and frozen.

use std::borrow::Cow;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};

use crate::dataio::{FeatureMatrix, InteractionTable, Modality};
use crate::sparse::CsrMatrix;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("{kind} {index} has no training interactions")]
    ZeroDegree { kind: &'static str, index: usize },
    #[error("training table is empty")]
    Empty,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("modality weights must be non-negative and sum to 1, got {0:?}")]
    BadWeights(Vec<f64>),
    #[error("no item graph for modality {0}")]
    MissingModality(Modality),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// User-item graph with symmetric normalization coefficients
/// `1 / sqrt(deg(u) * deg(i))`. Shared by every modality.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// N x M coefficients.
    pub user_item: CsrMatrix,
    /// M x N, the transpose of `user_item`.
    pub item_user: CsrMatrix,
    pub user_degrees: Vec<usize>,
    pub item_degrees: Vec<usize>,
}

impl BipartiteGraph {
    pub fn from_adjacency(user_item: CsrMatrix) -> Self {
        let user_degrees = (0..user_item.rows).map(|r| user_item.row_len(r)).collect();
        let item_user = user_item.transpose();
        let item_degrees = (0..item_user.rows).map(|r| item_user.row_len(r)).collect();
        BipartiteGraph {
            num_users: user_item.rows,
            num_items: user_item.cols,
            user_item,
            item_user,
            user_degrees,
            item_degrees,
        }
    }
}

/// Normalization coefficient for an edge between nodes of the given degrees.
pub fn symmetric_coefficient(user_degree: usize, item_degree: usize) -> f64 {
    1.0 / ((user_degree as f64) * (item_degree as f64)).sqrt()
}

/// Builds the normalized bipartite graph. Items without training interactions
/// are allowed (they keep their layer-0 embedding); users are not.
pub fn build_normalized_bipartite(train: &InteractionTable) -> Result<BipartiteGraph, GraphError> {
    if train.is_empty() {
        return Err(GraphError::Empty);
    }
    let udeg = train.user_degrees();
    if let Some(u) = udeg.iter().position(|&d| d == 0) {
        return Err(GraphError::ZeroDegree { kind: "user", index: u });
    }
    let ideg = train.item_degrees();
    let triplets: Vec<_> = train
        .pairs
        .iter()
        .map(|&(u, i)| (u, i, symmetric_coefficient(udeg[u], ideg[i])))
        .collect();
    Ok(BipartiteGraph::from_adjacency(CsrMatrix::from_triplets(
        train.num_users,
        train.num_items,
        &triplets,
    )))
}

/// Indices of the `k` largest scores, highest first; ties go to the smaller index.
pub fn top_k_indices(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let mut cand = scores.to_vec();
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(i, _)| i).collect()
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Top-k co-occurrence neighbors per user with softmax attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UserCooccurrenceGraph {
    pub k: usize,
    /// N x N, each row's weights sum to 1 unless the row is empty.
    pub weights: CsrMatrix,
}

/// Number of shared training items between `user` and every other user.
pub fn cooccurrence_counts(user_items: &[Vec<usize>], item_users: &[Vec<usize>], user: usize) -> Vec<(usize, f64)> {
    let mut counts = vec![0usize; user_items.len()];
    let mut touched = Vec::new();
    for &i in &user_items[user] {
        for &v in &item_users[i] {
            if v != user {
                if counts[v] == 0 {
                    touched.push(v);
                }
                counts[v] += 1;
            }
        }
    }
    touched.sort_unstable();
    touched.into_iter().map(|v| (v, counts[v] as f64)).collect()
}

pub fn build_user_cooccurrence(train: &InteractionTable, k: usize) -> Result<UserCooccurrenceGraph, GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    let user_items = train.user_items();
    let item_users = train.item_users();
    let rows = (0..train.num_users)
        .map(|u| {
            let counts = cooccurrence_counts(&user_items, &item_users, u);
            let keep = top_k_indices(&counts, k);
            let raw: Vec<f64> = keep
                .iter()
                .map(|v| counts.binary_search_by_key(v, |c| c.0).map(|p| counts[p].1).unwrap())
                .collect();
            keep.into_iter().zip(softmax(&raw)).collect()
        })
        .collect();
    Ok(UserCooccurrenceGraph {
        k,
        weights: CsrMatrix::from_rows(train.num_users, rows),
    })
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Binarized top-k cosine neighbor lists for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub modality: Modality,
    pub k: usize,
    /// Per item, the selected neighbor indices in ascending order (edges are
    /// binary, so the selection order carries no information).
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn to_csr(&self) -> CsrMatrix {
        let rows = self
            .neighbors
            .iter()
            .map(|n| n.iter().map(|&j| (j, 1.0)).collect())
            .collect();
        CsrMatrix::from_rows(self.neighbors.len(), rows)
    }

    pub fn from_csr(modality: Modality, k: usize, csr: &CsrMatrix) -> Self {
        KnnGraph {
            modality,
            k,
            neighbors: (0..csr.rows).map(|r| csr.row(r).map(|(c, _)| c).collect()).collect(),
        }
    }
}

/// Row-normalized copy of the features; zero rows stay zero.
fn unit_rows(features: &FeatureMatrix) -> (Array2<f64>, Vec<bool>) {
    let mut x = features.to_array();
    let mut nonzero = vec![true; x.nrows()];
    for (r, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            nonzero[r] = false;
        } else {
            row /= norm;
        }
    }
    (x, nonzero)
}

const KNN_BLOCK: usize = 256;

/// Exact kNN by full pairwise cosine similarity, computed in row blocks.
/// Zero-norm items get no neighbors of their own.
pub fn build_item_semantic_modality(features: &FeatureMatrix, k: usize) -> Result<KnnGraph, GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    let (unit, nonzero) = unit_rows(features);
    let m = unit.nrows();
    let mut neighbors = Vec::with_capacity(m);
    for start in (0..m).step_by(KNN_BLOCK) {
        let end = (start + KNN_BLOCK).min(m);
        let sims = unit.slice(s![start..end, ..]).dot(&unit.t());
        for (off, row) in sims.axis_iter(Axis(0)).enumerate() {
            let i = start + off;
            if !nonzero[i] {
                neighbors.push(Vec::new());
                continue;
            }
            let scores: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                // + 0.0 folds -0.0 into 0.0 so ties with zero-norm items stay index-ordered
                .map(|(j, &v)| (j, v.clamp(-1.0, 1.0) + 0.0))
                .collect();
            let mut keep = top_k_indices(&scores, k);
            keep.sort_unstable();
            neighbors.push(keep);
        }
    }
    Ok(KnnGraph {
        modality: features.modality,
        k,
        neighbors,
    })
}

/// Frozen item-item graph: weighted sum of the binarized per-modality graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemSemanticGraph {
    pub modality_weights: Vec<(Modality, f64)>,
    /// M x M, weights in (0, 1].
    pub weights: CsrMatrix,
}

pub fn combine_item_graphs(graphs: &[(&KnnGraph, f64)]) -> Result<ItemSemanticGraph, GraphError> {
    let alphas: Vec<f64> = graphs.iter().map(|g| g.1).collect();
    if graphs.is_empty() || alphas.iter().any(|&a| a < 0.0 || !a.is_finite()) || (alphas.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(GraphError::BadWeights(alphas));
    }
    let m = graphs[0].0.neighbors.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for (i, row) in rows.iter_mut().enumerate() {
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for (g, alpha) in graphs {
            for &j in &g.neighbors[i] {
                match acc.iter_mut().find(|e| e.0 == j) {
                    Some(e) => e.1 += alpha,
                    None => acc.push((j, *alpha)),
                }
            }
        }
        acc.retain(|e| e.1 > 0.0);
        *row = acc;
    }
    Ok(ItemSemanticGraph {
        modality_weights: graphs.iter().map(|(g, a)| (g.modality, *a)).collect(),
        weights: CsrMatrix::from_rows(m, rows),
    })
}

/// Everything the model propagates over, built from one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub bipartite: BipartiteGraph,
    pub user: UserCooccurrenceGraph,
    /// Combined graph over all available modalities.
    pub item: ItemSemanticGraph,
    pub item_knn: Vec<KnnGraph>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub k_user: usize,
    pub k_item: usize,
    pub alpha_visual: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            k_user: 10,
            k_item: 10,
            alpha_visual: 0.1,
        }
    }
}

impl GraphSet {
    pub fn build(train: &InteractionTable, features: &[FeatureMatrix], params: &GraphParams) -> Result<Self, GraphError> {
        let bipartite = build_normalized_bipartite(train)?;
        let user = build_user_cooccurrence(train, params.k_user)?;
        let item_knn = features
            .iter()
            .map(|f| build_item_semantic_modality(f, params.k_item))
            .collect::<Result<Vec<_>, _>>()?;
        let item = combine_for(&item_knn, params.alpha_visual)?;
        Ok(GraphSet {
            bipartite,
            user,
            item,
            item_knn,
        })
    }

    /// The item graph to use for a given modality subset: the combined graph
    /// when every cached modality is used, else the single modality at weight 1.
    pub fn item_graph(&self, modalities: &[Modality]) -> Result<Cow<'_, ItemSemanticGraph>, GraphError> {
        let available: Vec<Modality> = self.item_knn.iter().map(|g| g.modality).collect();
        if modalities == available.as_slice() {
            return Ok(Cow::Borrowed(&self.item));
        }
        match modalities {
            [m] => {
                let g = self
                    .item_knn
                    .iter()
                    .find(|g| g.modality == *m)
                    .ok_or(GraphError::MissingModality(*m))?;
                Ok(Cow::Owned(combine_item_graphs(&[(g, 1.0)])?))
            }
            _ => Err(GraphError::MissingModality(
                *modalities.iter().find(|m| !available.contains(m)).unwrap_or(&Modality::Visual),
            )),
        }
    }
}

fn combine_for(item_knn: &[KnnGraph], alpha_visual: f64) -> Result<ItemSemanticGraph, GraphError> {
    match item_knn {
        [] => Err(GraphError::BadWeights(vec![])),
        [g] => combine_item_graphs(&[(g, 1.0)]),
        gs => {
            let weighted: Vec<(&KnnGraph, f64)> = gs
                .iter()
                .map(|g| {
                    let a = match g.modality {
                        Modality::Visual => alpha_visual,
                        Modality::Textual => 1.0 - alpha_visual,
                    };
                    (g, a)
                })
                .collect();
            combine_item_graphs(&weighted)
        }
    }
}

/// Writes a sparse triplet graph file: a `GRAPH kind rows cols nnz` header then
/// one `row col weight` line per entry in row-major order.
pub fn write_graph(path: &Path, kind: &str, m: &CsrMatrix) -> Result<(), GraphError> {
    let io_err = |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let res: io::Result<()> = (|| {
        writeln!(w, "GRAPH {kind} {} {} {}", m.rows, m.cols, m.nnz())?;
        for (r, c, v) in m.triplets() {
            // `{}` on f64 prints the shortest representation that parses back exactly.
            writeln!(w, "{r} {c} {v}")?;
        }
        w.flush()
    })();
    res.map_err(io_err)
}

pub fn read_graph(path: &Path) -> Result<(String, CsrMatrix), GraphError> {
    let io_err = |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fmt_err = |line: usize, reason: String| GraphError::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(File::open(path).map_err(io_err)?).lines();
    let header = lines.next().ok_or_else(|| fmt_err(1, "missing header".into()))?.map_err(io_err)?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 5 || parts[0] != "GRAPH" {
        return Err(fmt_err(1, format!("bad header {header:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(1, format!("bad count {s:?}")));
    let (rows, cols, nnz) = (num(parts[2])?, num(parts[3])?, num(parts[4])?);
    let mut triplets = Vec::with_capacity(nnz);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = n + 2;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 3 {
            return Err(fmt_err(lineno, "expected `row col weight`".into()));
        }
        let r: usize = f[0].parse().map_err(|_| fmt_err(lineno, "bad row".into()))?;
        let c: usize = f[1].parse().map_err(|_| fmt_err(lineno, "bad col".into()))?;
        let v: f64 = f[2].parse().map_err(|_| fmt_err(lineno, "bad weight".into()))?;
        if r >= rows || c >= cols {
            return Err(fmt_err(lineno, format!("entry ({r}, {c}) out of bounds")));
        }
        triplets.push((r, c, v));
    }
    if triplets.len() != nnz {
        return Err(fmt_err(1, format!("header says {nnz} entries, found {}", triplets.len())));
    }
    Ok((parts[1].to_string(), CsrMatrix::from_triplets(rows, cols, &triplets)))
}

pub const BIPARTITE_FILE: &str = "bipartite.graph";
pub const USER_FILE: &str = "user.graph";
pub const ITEM_FILE: &str = "item.graph";

pub fn knn_file(m: Modality) -> String {
    format!("item_{m}.graph")
}

impl GraphSet {
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        std::fs::create_dir_all(dir).map_err(|source| GraphError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_graph(&dir.join(BIPARTITE_FILE), "bipartite", &self.bipartite.user_item)?;
        write_graph(&dir.join(USER_FILE), "user", &self.user.weights)?;
        write_graph(&dir.join(ITEM_FILE), "item", &self.item.weights)?;
        for g in &self.item_knn {
            write_graph(&dir.join(knn_file(g.modality)), &format!("item_{}", g.modality), &g.to_csr())?;
        }
        Ok(())
    }

    /// Reloads cached graphs; `k_user`, `k_item` and the modality weights are
    /// not stored in the files and come from `params`.
    pub fn load(dir: &Path, modalities: &[Modality], params: &GraphParams) -> Result<Self, GraphError> {
        let (_, ui) = read_graph(&dir.join(BIPARTITE_FILE))?;
        let (_, uu) = read_graph(&dir.join(USER_FILE))?;
        let (_, ii) = read_graph(&dir.join(ITEM_FILE))?;
        let item_knn = modalities
            .iter()
            .map(|&m| read_graph(&dir.join(knn_file(m))).map(|(_, g)| KnnGraph::from_csr(m, params.k_item, &g)))
            .collect::<Result<Vec<_>, _>>()?;
        let modality_weights = combine_for(&item_knn, params.alpha_visual)
            .map(|g| g.modality_weights)
            .unwrap_or_default();
        Ok(GraphSet {
            bipartite: BipartiteGraph::from_adjacency(ui),
            user: UserCooccurrenceGraph {
                k: params.k_user,
                weights: uu,
            },
            item: ItemSemanticGraph {
                modality_weights,
                weights: ii,
            },
            item_knn,
        })
    }
}
