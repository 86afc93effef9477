//! Interaction and feature ingestion, k-core filtering and train/valid/test splitting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FMAT_MAGIC: &[u8; 4] = b"FMAT";
/// FMAT payload stored as little-endian f32.
pub const FMAT_VERSION_F32: u32 = 1;
/// FMAT payload stored as little-endian f64 (used for checkpoints).
pub const FMAT_VERSION_F64: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed line: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("empty table")]
    EmptyTable,
    #[error("k-core filtering with k={k} left an empty table")]
    EmptyAfterKcore { k: usize },
    #[error("invalid k-core parameter k={0} (must be >= 1)")]
    InvalidK(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("user {user} has {degree} interactions; strict stratification needs at least 3")]
    TooFewInteractions { user: usize, degree: usize },
    #[error("bad FMAT header: {0}")]
    BadHeader(String),
    #[error("feature matrix has {found} rows but the interaction table has {expected} items")]
    RowMismatch { expected: usize, found: usize },
    #[error("non-finite feature value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("unknown id {id:?} in {path}")]
    UnknownId { path: PathBuf, id: String },
}

impl DataError {
    fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Deduplicated implicit-feedback pairs over dense user/item indices.
///
/// Pairs keep first-occurrence order. Split parts are views sharing the ID
/// space of the table they came from, so they may contain unused indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionTable {
    pub num_users: usize,
    pub num_items: usize,
    pub pairs: Vec<(usize, usize)>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl InteractionTable {
    /// Builds a table from raw dense pairs, collapsing duplicates.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> Self {
        let mut seen = HashSet::with_capacity(pairs.len());
        let pairs: Vec<_> = pairs.iter().copied().filter(|p| seen.insert(*p)).collect();
        assert!(pairs.iter().all(|&(u, i)| u < num_users && i < num_items));
        InteractionTable {
            num_users,
            num_items,
            pairs,
            user_ids: (0..num_users).map(|u| format!("u{u}")).collect(),
            item_ids: (0..num_items).map(|i| format!("i{i}")).collect(),
        }
    }

    /// A table over the same ID space holding only `pairs`.
    pub fn view(&self, pairs: Vec<(usize, usize)>) -> Self {
        InteractionTable {
            num_users: self.num_users,
            num_items: self.num_items,
            pairs,
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_users];
        for &(u, _) in &self.pairs {
            deg[u] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_items];
        for &(_, i) in &self.pairs {
            deg[i] += 1;
        }
        deg
    }

    /// Sorted item lists per user.
    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.pairs {
            adj[u].push(i);
        }
        for row in &mut adj {
            row.sort_unstable();
        }
        adj
    }

    /// Sorted user lists per item.
    pub fn item_users(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_items];
        for &(u, i) in &self.pairs {
            adj[i].push(u);
        }
        for row in &mut adj {
            row.sort_unstable();
        }
        adj
    }
}

/// Reads a tab-separated interaction file.
pub fn load_interactions(path: &Path) -> Result<InteractionTable, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_interactions(BufReader::new(file), path)
}

pub fn parse_interactions<R: BufRead>(reader: R, path: &Path) -> Result<InteractionTable, DataError> {
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item) = match (fields.next(), fields.next()) {
            (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: "expected at least two tab-separated fields".into(),
                })
            }
        };
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            user_ids.push(user.to_string());
            user_ids.len() - 1
        });
        let i = *item_index.entry(item.to_string()).or_insert_with(|| {
            item_ids.push(item.to_string());
            item_ids.len() - 1
        });
        if seen.insert((u, i)) {
            pairs.push((u, i));
        }
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyTable);
    }
    Ok(InteractionTable {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        pairs,
        user_ids,
        item_ids,
    })
}

/// Result of k-core filtering: the reindexed table plus, for each surviving
/// item, its index in the input table (used to align feature rows).
#[derive(Debug, Clone)]
pub struct KcoreResult {
    pub table: InteractionTable,
    pub kept_users: Vec<usize>,
    pub kept_items: Vec<usize>,
}

/// Peels users and items of degree < k until every survivor has degree >= k.
pub fn kcore_filter(table: &InteractionTable, k: usize) -> Result<KcoreResult, DataError> {
    if k == 0 {
        return Err(DataError::InvalidK(k));
    }
    let user_adj = table.user_items();
    let item_adj = table.item_users();
    let mut udeg: Vec<usize> = user_adj.iter().map(Vec::len).collect();
    let mut ideg: Vec<usize> = item_adj.iter().map(Vec::len).collect();
    let mut ualive = vec![true; table.num_users];
    let mut ialive = vec![true; table.num_items];

    // Node ids: users are 0..N, items are N..N+M.
    let n = table.num_users;
    let mut queue: Vec<usize> = (0..n)
        .filter(|&u| udeg[u] < k)
        .chain((0..table.num_items).filter(|&i| ideg[i] < k).map(|i| n + i))
        .collect();
    while let Some(node) = queue.pop() {
        if node < n {
            if !ualive[node] {
                continue;
            }
            ualive[node] = false;
            for &i in &user_adj[node] {
                if ialive[i] {
                    ideg[i] -= 1;
                    if ideg[i] + 1 == k {
                        queue.push(n + i);
                    }
                }
            }
        } else {
            let i = node - n;
            if !ialive[i] {
                continue;
            }
            ialive[i] = false;
            for &u in &item_adj[i] {
                if ualive[u] {
                    udeg[u] -= 1;
                    if udeg[u] + 1 == k {
                        queue.push(u);
                    }
                }
            }
        }
    }
    reindex(table, &ualive, &ialive).ok_or(DataError::EmptyAfterKcore { k })
}

fn reindex(table: &InteractionTable, ualive: &[bool], ialive: &[bool]) -> Option<KcoreResult> {
    let kept_users: Vec<usize> = (0..table.num_users).filter(|&u| ualive[u]).collect();
    let kept_items: Vec<usize> = (0..table.num_items).filter(|&i| ialive[i]).collect();
    if kept_users.is_empty() || kept_items.is_empty() {
        return None;
    }
    let mut umap = vec![usize::MAX; table.num_users];
    let mut imap = vec![usize::MAX; table.num_items];
    for (new, &old) in kept_users.iter().enumerate() {
        umap[old] = new;
    }
    for (new, &old) in kept_items.iter().enumerate() {
        imap[old] = new;
    }
    let pairs = table
        .pairs
        .iter()
        .filter(|&&(u, i)| ualive[u] && ialive[i])
        .map(|&(u, i)| (umap[u], imap[i]))
        .collect();
    Some(KcoreResult {
        table: InteractionTable {
            num_users: kept_users.len(),
            num_items: kept_items.len(),
            pairs,
            user_ids: kept_users.iter().map(|&u| table.user_ids[u].clone()).collect(),
            item_ids: kept_items.iter().map(|&i| table.item_ids[i].clone()).collect(),
        },
        kept_users,
        kept_items,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    /// Each user's interactions are shuffled and cut separately.
    PerUser,
    /// One shuffle over all interactions; stranded users get one pair moved to train.
    Global,
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::PerUser => "per_user",
            SplitStrategy::Global => "global",
        })
    }
}

impl std::str::FromStr for SplitStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_user" => Ok(SplitStrategy::PerUser),
            "global" => Ok(SplitStrategy::Global),
            other => Err(format!("unknown split strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub strategy: SplitStrategy,
    /// Reject users with fewer than 3 interactions.
    pub strict: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            ratios: [0.8, 0.1, 0.1],
            seed: 2023,
            strategy: SplitStrategy::PerUser,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: InteractionTable,
    pub valid: InteractionTable,
    pub test: InteractionTable,
    pub seed: u64,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train.num_users
    }

    pub fn num_items(&self) -> usize {
        self.train.num_items
    }
}

/// Counts `(train, valid)` for a group of `n` interactions; test takes the rest.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    // The small offset keeps products like 0.1 * 30 from rounding up past an integer.
    let ceil = |x: f64| ((x - 1e-9).ceil().max(0.0)) as usize;
    let train = ceil(ratios[0] * n as f64).min(n);
    let valid = ceil(ratios[1] * n as f64).min(n - train);
    (train, valid)
}

pub fn split_interactions(table: &InteractionTable, opts: &SplitOptions) -> Result<SplitDataset, DataError> {
    let r = opts.ratios;
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(DataError::BadRatios(r));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();

    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); table.num_users];
    for &(u, i) in &table.pairs {
        per_user[u].push(i);
    }
    if opts.strict {
        if let Some((user, items)) = per_user.iter().enumerate().find(|(_, v)| v.len() < 3) {
            return Err(DataError::TooFewInteractions {
                user,
                degree: items.len(),
            });
        }
    }

    match opts.strategy {
        SplitStrategy::PerUser => {
            for (u, items) in per_user.iter_mut().enumerate() {
                items.shuffle(&mut rng);
                let (nt, nv) = split_counts(items.len(), r);
                train.extend(items[..nt].iter().map(|&i| (u, i)));
                valid.extend(items[nt..nt + nv].iter().map(|&i| (u, i)));
                test.extend(items[nt + nv..].iter().map(|&i| (u, i)));
            }
        }
        SplitStrategy::Global => {
            let mut all = table.pairs.clone();
            all.shuffle(&mut rng);
            let (nt, nv) = split_counts(all.len(), r);
            test.extend_from_slice(&all[nt + nv..]);
            valid.extend_from_slice(&all[nt..nt + nv]);
            train.extend_from_slice(&all[..nt]);
            let mut has_train = vec![false; table.num_users];
            for &(u, _) in &train {
                has_train[u] = true;
            }
            for part in [&mut valid, &mut test] {
                let mut idx = 0;
                while idx < part.len() {
                    let (u, _) = part[idx];
                    if !has_train[u] {
                        has_train[u] = true;
                        train.push(part.remove(idx));
                    } else {
                        idx += 1;
                    }
                }
            }
        }
    }
    for part in [&mut train, &mut valid, &mut test] {
        part.sort_unstable();
    }
    Ok(SplitDataset {
        train: table.view(train),
        valid: table.view(valid),
        test: table.view(test),
        seed: opts.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "visual" | "v" => Ok(Modality::Visual),
            "textual" | "t" => Ok(Modality::Textual),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// Dense item feature matrix, one row per item index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != rows * cols {
            return Err(DataError::BadHeader(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(FeatureMatrix {
            modality,
            rows,
            cols,
            data,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            modality: self.modality,
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.rows, self.cols), |(r, c)| self.data[r * self.cols + c] as f64)
    }
}

/// Header of an FMAT block: (version, rows, cols).
pub fn read_fmat_header<R: Read>(r: &mut R) -> Result<(u32, usize, usize), DataError> {
    let mut buf = [0u8; 24];
    r.read_exact(&mut buf)
        .map_err(|e| DataError::BadHeader(format!("truncated header: {e}")))?;
    if &buf[..4] != FMAT_MAGIC {
        return Err(DataError::BadHeader(format!("magic {:?} is not FMAT", &buf[..4])));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    Ok((version, rows, cols))
}

pub fn write_fmat_header<W: Write>(w: &mut W, version: u32, rows: usize, cols: usize) -> io::Result<()> {
    w.write_all(FMAT_MAGIC)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())
}

/// Reads a version-1 (f32) FMAT block.
pub fn read_fmat_f32<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f32>), DataError> {
    let (version, rows, cols) = read_fmat_header(r)?;
    if version != FMAT_VERSION_F32 {
        return Err(DataError::BadHeader(format!(
            "version {version}, expected {FMAT_VERSION_F32}"
        )));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| DataError::BadHeader(format!("{rows}x{cols} overflows")))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| DataError::BadHeader(format!("truncated payload: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_fmat_f32<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f32]) -> io::Result<()> {
    write_fmat_header(w, FMAT_VERSION_F32, rows, cols)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a version-2 (f64) FMAT block.
pub fn read_fmat_f64<R: Read>(r: &mut R) -> Result<(usize, usize, Vec<f64>), DataError> {
    let (version, rows, cols) = read_fmat_header(r)?;
    if version != FMAT_VERSION_F64 {
        return Err(DataError::BadHeader(format!(
            "version {version}, expected {FMAT_VERSION_F64}"
        )));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| DataError::BadHeader(format!("{rows}x{cols} overflows")))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| DataError::BadHeader(format!("truncated payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_fmat_f64<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f64]) -> io::Result<()> {
    write_fmat_header(w, FMAT_VERSION_F64, rows, cols)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Loads an FMAT feature file; `expected_items` of `None` skips the row check.
pub fn load_feature_matrix(
    path: &Path,
    expected_items: Option<usize>,
    modality: Modality,
) -> Result<FeatureMatrix, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let (rows, cols, data) = read_fmat_f32(&mut BufReader::new(file))?;
    if let Some(expected) = expected_items {
        if rows != expected {
            return Err(DataError::RowMismatch { expected, found: rows });
        }
    }
    FeatureMatrix::new(modality, rows, cols, data)
}

pub fn store_feature_matrix(path: &Path, features: &FeatureMatrix) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_fmat_f32(&mut w, features.rows, features.cols, &features.data)
        .and_then(|_| w.flush())
        .map_err(|e| DataError::io(path, e))
}

/// Writes pairs as `external_user TAB external_item` lines.
pub fn write_interactions(path: &Path, table: &InteractionTable) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: io::Result<()> = (|| {
        for &(u, i) in &table.pairs {
            writeln!(w, "{}\t{}", table.user_ids[u], table.item_ids[i])?;
        }
        w.flush()
    })();
    res.map_err(|e| DataError::io(path, e))
}

/// Writes `external_id TAB dense_index` lines.
pub fn write_id_map(path: &Path, ids: &[String]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: io::Result<()> = (|| {
        for (idx, id) in ids.iter().enumerate() {
            writeln!(w, "{id}\t{idx}")?;
        }
        w.flush()
    })();
    res.map_err(|e| DataError::io(path, e))
}

pub fn read_id_map(path: &Path) -> Result<Vec<String>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut ids: Vec<Option<String>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| DataError::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let (id, idx) = line.rsplit_once('\t').ok_or_else(|| malformed("expected id TAB index"))?;
        let idx: usize = idx.parse().map_err(|_| malformed("index is not an integer"))?;
        if idx >= ids.len() {
            ids.resize(idx + 1, None);
        }
        if ids[idx].replace(id.to_string()).is_some() {
            return Err(malformed("duplicate index"));
        }
    }
    ids.into_iter()
        .enumerate()
        .map(|(idx, id)| {
            id.ok_or_else(|| DataError::Malformed {
                path: path.to_path_buf(),
                line: 0,
                reason: format!("index {idx} missing"),
            })
        })
        .collect()
}

/// Reads a split part written by [`write_interactions`] using fixed ID maps.
pub fn load_interactions_with_maps(
    path: &Path,
    user_ids: &[String],
    item_ids: &[String],
) -> Result<InteractionTable, DataError> {
    let uidx: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let iidx: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(u), Some(i)) = (fields.next(), fields.next()) else {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: "expected at least two tab-separated fields".into(),
            });
        };
        let unknown = |id: &str| DataError::UnknownId {
            path: path.to_path_buf(),
            id: id.to_string(),
        };
        let u = *uidx.get(u).ok_or_else(|| unknown(u))?;
        let i = *iidx.get(i).ok_or_else(|| unknown(i))?;
        if seen.insert((u, i)) {
            pairs.push((u, i));
        }
    }
    Ok(InteractionTable {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        pairs,
        user_ids: user_ids.to_vec(),
        item_ids: item_ids.to_vec(),
    })
}
