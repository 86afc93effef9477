use std::collections::BTreeSet;

use proptest::prelude::*;

use dualrec_core::dataio::{self, FeatureMatrix, InteractionTable, Modality, SplitOptions, SplitStrategy};
use dualrec_core::graphs;
use dualrec_core::sparse::CsrMatrix;

fn table() -> impl Strategy<Value = InteractionTable> {
    (1..12usize, 3..20usize).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop::collection::btree_set(0..m, 1..=m), n).prop_map(move |rows| {
            let pairs: Vec<(usize, usize)> = rows
                .iter()
                .enumerate()
                .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
                .collect();
            InteractionTable::from_pairs(n, m, &pairs)
        })
    })
}

fn pair_set(t: &InteractionTable) -> BTreeSet<(usize, usize)> {
    t.pairs.iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn per_user_split_partitions_by_the_ceiling_rule(t in table(), seed in any::<u64>()) {
        let opts = SplitOptions { seed, ..SplitOptions::default() };
        let s = dataio::split_interactions(&t, &opts).unwrap();
        let (a, b, c) = (pair_set(&s.train), pair_set(&s.valid), pair_set(&s.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        let union: BTreeSet<_> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(union, pair_set(&t));
        let deg = t.user_degrees();
        let (dt, dv, dx) = (s.train.user_degrees(), s.valid.user_degrees(), s.test.user_degrees());
        for u in 0..t.num_users {
            let (nt, nv) = dataio::split_counts(deg[u], opts.ratios);
            prop_assert_eq!((dt[u], dv[u], dx[u]), (nt, nv, deg[u] - nt - nv));
        }
        prop_assert_eq!(dataio::split_interactions(&t, &opts).unwrap(), s);
    }

    #[test]
    fn global_split_keeps_users_trainable(t in table(), seed in any::<u64>()) {
        let opts = SplitOptions { seed, strategy: SplitStrategy::Global, ..SplitOptions::default() };
        let s = dataio::split_interactions(&t, &opts).unwrap();
        let (a, b, c) = (pair_set(&s.train), pair_set(&s.valid), pair_set(&s.test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        prop_assert_eq!(a.len() + b.len() + c.len(), t.len());
        prop_assert!(s.train.user_degrees().iter().all(|&d| d >= 1));
    }

    #[test]
    fn ceiling_rule_never_overflows(n in 0usize..500) {
        let (t, v) = dataio::split_counts(n, [0.8, 0.1, 0.1]);
        prop_assert!(t + v <= n);
        prop_assert!(t as f64 >= 0.8 * n as f64 - 1e-9);
    }

    #[test]
    fn fmat_roundtrip(rows in 1usize..12, cols in 1usize..12, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1e6f32..1e6)).collect();
        let f = FeatureMatrix::new(Modality::Visual, rows, cols, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fmat");
        dataio::store_feature_matrix(&path, &f).unwrap();
        prop_assert_eq!(dataio::load_feature_matrix(&path, Some(rows), Modality::Visual).unwrap(), f.clone());
        prop_assert!(dataio::load_feature_matrix(&path, Some(rows + 1), Modality::Visual).is_err());

        let wide: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>() * 1e300).collect();
        let mut buf = Vec::new();
        dataio::write_fmat_f64(&mut buf, rows, cols, &wide).unwrap();
        prop_assert_eq!(dataio::read_fmat_f64(&mut buf.as_slice()).unwrap(), (rows, cols, wide));
    }

    #[test]
    fn graph_file_roundtrip_is_bit_exact(
        trip in prop::collection::vec((0usize..9, 0usize..7, -1e3f64..1e3), 0..40),
    ) {
        let mut seen = BTreeSet::new();
        let trip: Vec<_> = trip.into_iter().filter(|t| seen.insert((t.0, t.1))).collect();
        let m = CsrMatrix::from_triplets(9, 7, &trip);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.graph");
        graphs::write_graph(&path, "user", &m).unwrap();
        let (kind, back) = graphs::read_graph(&path).unwrap();
        prop_assert_eq!(kind, "user");
        prop_assert_eq!(back, m);
    }
}

#[test]
fn interaction_errors_carry_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.tsv");
    std::fs::write(&path, "u1\ti1\nu2\n").unwrap();
    let err = dataio::load_interactions(&path).unwrap_err().to_string();
    assert!(err.contains("raw.tsv") && err.contains(":2:"), "{err}");
}

#[test]
fn non_finite_feature_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.fmat");
    let mut buf = Vec::new();
    dataio::write_fmat_f32(&mut buf, 2, 2, &[0.0, 1.0, f32::NAN, 2.0]).unwrap();
    std::fs::write(&path, buf).unwrap();
    let err = dataio::load_feature_matrix(&path, Some(2), Modality::Textual).unwrap_err().to_string();
    assert!(err.contains('1') && err.contains('0'), "{err}");
    assert!(matches!(
        dataio::load_feature_matrix(&path, Some(2), Modality::Textual),
        Err(dataio::DataError::NonFinite { row: 1, col: 0 })
    ));
}
