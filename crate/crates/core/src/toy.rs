//! Seeded synthetic datasets for tests, gradient checks and demos.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{self, DataError, FeatureMatrix, InteractionTable, Modality};

#[derive(Debug, Clone)]
pub struct ToyData {
    pub table: InteractionTable,
    /// Visual then textual.
    pub features: Vec<FeatureMatrix>,
}

fn random_features(rng: &mut ChaCha8Rng, modality: Modality, rows: usize, cols: usize) -> FeatureMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMatrix::new(modality, rows, cols, data).expect("finite")
}

/// Random interactions where every user has `per_user` distinct items and
/// features are uniform in [-1, 1).
pub fn random_instance(seed: u64, num_users: usize, num_items: usize, per_user: usize, dims: (usize, usize)) -> ToyData {
    assert!(per_user < num_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for u in 0..num_users {
        for i in sample(&mut rng, num_items, per_user) {
            pairs.push((u, i));
        }
    }
    let table = InteractionTable::from_pairs(num_users, num_items, &pairs);
    let features = vec![
        random_features(&mut rng, Modality::Visual, num_items, dims.0),
        random_features(&mut rng, Modality::Textual, num_items, dims.1),
    ];
    ToyData { table, features }
}

/// Two-block dataset: the first half of the users only interact with the
/// first half of the items and vice versa. Features carry the block identity
/// plus noise.
pub fn planted_blocks(seed: u64, num_users: usize, num_items: usize, per_user: usize) -> ToyData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_items = num_items / 2;
    let mut pairs = Vec::new();
    for u in 0..num_users {
        let block = usize::from(u >= num_users / 2);
        let (lo, size) = if block == 0 { (0, half_items) } else { (half_items, num_items - half_items) };
        assert!(per_user <= size);
        for i in sample(&mut rng, size, per_user) {
            pairs.push((u, lo + i));
        }
    }
    let table = InteractionTable::from_pairs(num_users, num_items, &pairs);
    let block_features = |rng: &mut ChaCha8Rng, modality, cols: usize, noise: f32| {
        let mut data = Vec::with_capacity(num_items * cols);
        for i in 0..num_items {
            let block = usize::from(i >= half_items);
            for c in 0..cols {
                let signal = if c % 2 == block { 1.0 } else { 0.0 };
                data.push(signal + noise * rng.random_range(-1.0f32..1.0));
            }
        }
        FeatureMatrix::new(modality, num_items, cols, data).expect("finite")
    };
    let features = vec![
        block_features(&mut rng, Modality::Visual, 8, 0.5),
        block_features(&mut rng, Modality::Textual, 6, 0.3),
    ];
    ToyData { table, features }
}

/// Paths of a raw dataset written by [`write_raw`].
#[derive(Debug, Clone)]
pub struct RawFiles {
    pub interactions: PathBuf,
    /// Visual then textual.
    pub features: Vec<PathBuf>,
}

/// Writes `interactions.tsv` and one `{modality}.fmat` per feature matrix into
/// `dir`. Feature rows follow the order in which items first appear in the
/// interaction file, which is the order the loader assigns; items without
/// interactions are dropped.
pub fn write_raw(dir: &Path, data: &ToyData) -> Result<RawFiles, DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut text = String::new();
    let mut seen = vec![false; data.table.num_items];
    let mut order = Vec::new();
    for &(u, i) in &data.table.pairs {
        text.push_str(&format!("{}\t{}\n", data.table.user_ids[u], data.table.item_ids[i]));
        if !seen[i] {
            seen[i] = true;
            order.push(i);
        }
    }
    let interactions = dir.join("interactions.tsv");
    fs::write(&interactions, text).map_err(|source| DataError::Io {
        path: interactions.clone(),
        source,
    })?;
    let mut features = Vec::new();
    for f in &data.features {
        let path = dir.join(format!("{}.fmat", f.modality));
        dataio::store_feature_matrix(&path, &f.select_rows(&order))?;
        features.push(path);
    }
    Ok(RawFiles { interactions, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_shape() {
        let d = planted_blocks(1, 20, 30, 10);
        assert_eq!(d.table.len(), 200);
        assert!(d.table.pairs.iter().all(|&(u, i)| (u < 10) == (i < 15)));
        assert_eq!(d.features[0].rows, 30);
    }

    #[test]
    fn raw_files_reload_aligned() {
        let d = planted_blocks(2, 20, 30, 10);
        let dir = tempfile::tempdir().unwrap();
        let raw = write_raw(dir.path(), &d).unwrap();
        let t = dataio::load_interactions(&raw.interactions).unwrap();
        let v = dataio::load_feature_matrix(&raw.features[0], Some(t.num_items), Modality::Visual).unwrap();
        for (row, id) in t.item_ids.iter().enumerate() {
            let orig: usize = id[1..].parse().unwrap();
            assert_eq!(v.row(row), d.features[0].row(orig));
        }
    }

    #[test]
    fn random_is_seeded() {
        let a = random_instance(3, 8, 12, 4, (6, 5));
        let b = random_instance(3, 8, 12, 4, (6, 5));
        assert_eq!(a.table, b.table);
        assert_eq!(a.features, b.features);
        assert_eq!(a.table.user_degrees(), vec![4; 8]);
    }
}
