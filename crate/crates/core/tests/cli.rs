use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dualrec_core::cli::{self, ABLATION_HEADER};
use dualrec_core::toy;

const EXE: &str = env!("CARGO_BIN_EXE_dualrec");

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let raw = toy::write_raw(&root.join("raw"), &toy::planted_blocks(5, 40, 30, 10)).unwrap();
    let config = root.join("run.cfg");
    let text = format!(
        "# small end-to-end run\n\
         data.interactions={}\n\
         data.features.visual={}\n\
         data.features.textual={}\n\
         model.dim=16\n\
         train.lr=0.01\n\
         train.batch_size=64\n\
         train.max_epochs=12\n\
         train.patience=5\n",
        raw.interactions.display(),
        raw.features[0].display(),
        raw.features[1].display(),
    );
    fs::write(&config, text).unwrap();
    Fixture { _dir: dir, root, config }
}

fn run(f: &Fixture, out: &str, args: &[&str]) -> (i32, String, String) {
    let o = Command::new(EXE)
        .args(args)
        .arg("--config")
        .arg(&f.config)
        .arg("--out")
        .arg(f.root.join(out))
        .output()
        .unwrap();
    (
        o.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn ok(f: &Fixture, out: &str, args: &[&str]) -> String {
    let (code, stdout, stderr) = run(f, out, args);
    assert_eq!(code, 0, "{args:?}: {stderr}");
    stdout
}

/// Relative path -> contents for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, acc);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                acc.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

fn pipeline(f: &Fixture, out: &str) {
    ok(f, out, &["preprocess"]);
    ok(f, out, &["build-graphs"]);
    ok(f, out, &["train"]);
    ok(f, out, &["evaluate"]);
    ok(f, out, &["evaluate", "--part", "valid"]);
}

#[test]
fn pipeline_artifacts_are_reproducible() {
    let f = fixture();
    pipeline(&f, "a");
    let a = tree(&f.root.join("a"));
    for file in [
        "split/manifest.txt",
        "split/train.tsv",
        "split/valid.tsv",
        "split/test.tsv",
        "split/user_ids.tsv",
        "split/item_ids.tsv",
        "split/features/visual.fmat",
        "split/features/textual.fmat",
        "graphs/meta.txt",
        "train/checkpoint.bin",
        "train/history.tsv",
        "eval/report_test.json",
        "eval/report_valid.json",
    ] {
        assert!(a.contains_key(file), "missing {file}; have {:?}", a.keys().collect::<Vec<_>>());
    }
    assert!(!a.contains_key(".lock"));
    assert!(a.keys().any(|k| k.starts_with("graphs/") && k != "graphs/meta.txt"));

    pipeline(&f, "b");
    assert_eq!(a, tree(&f.root.join("b")));

    // every artifact carries its config and input hash
    let manifest = String::from_utf8(a["split/manifest.txt"].clone()).unwrap();
    assert!(manifest.contains("input_hash=") && manifest.contains("config.split.seed="));
    assert!(String::from_utf8_lossy(&a["graphs/meta.txt"]).contains("manifest_hash="));
    let report: serde_json::Value = serde_json::from_slice(&a["eval/report_test.json"]).unwrap();
    let text = report.to_string();
    assert!(text.contains("data_hash") && text.contains("train.seed"), "{text}");
    let history = String::from_utf8(a["train/history.tsv"].clone()).unwrap();
    assert!(history.starts_with("epoch\tloss\t"));
    assert!(history.lines().count() >= 2);
}

#[test]
fn graphs_are_frozen_and_rebuild_is_identical() {
    let f = fixture();
    ok(&f, "o", &["preprocess"]);
    ok(&f, "o", &["build-graphs"]);
    let graphs = |f: &Fixture| tree(&f.root.join("o/graphs"));
    let before = graphs(&f);
    ok(&f, "o", &["train"]);
    assert_eq!(graphs(&f), before);
    ok(&f, "o", &["build-graphs"]);
    ok(&f, "o", &["build-graphs", "--force"]);
    assert_eq!(graphs(&f), before);

    // a different graph config leaves a stale cache
    let (code, _, err) = run(&f, "o", &["build-graphs", "--set", "graph.k_item=3"]);
    assert_eq!(code, cli::EXIT_DATA, "{err}");
    ok(&f, "o", &["build-graphs", "--force", "--set", "graph.k_item=3"]);
    assert_ne!(graphs(&f), before);
    // training against the rebuilt cache with the old config is refused
    let (code, _, _) = run(&f, "o", &["train"]);
    assert_eq!(code, cli::EXIT_DATA);
}

#[test]
fn evaluation_is_deterministic() {
    let f = fixture();
    ok(&f, "o", &["preprocess"]);
    ok(&f, "o", &["build-graphs"]);
    ok(&f, "o", &["train"]);
    ok(&f, "o", &["evaluate"]);
    let first = fs::read(f.root.join("o/eval/report_test.json")).unwrap();
    ok(&f, "o", &["evaluate"]);
    assert_eq!(fs::read(f.root.join("o/eval/report_test.json")).unwrap(), first);
    ok(&f, "o", &["evaluate", "--set", "eval.mask_valid=true"]);
    let masked: serde_json::Value =
        serde_json::from_slice(&fs::read(f.root.join("o/eval/report_test.json")).unwrap()).unwrap();
    assert!(masked.to_string().contains("\"eval.mask_valid\":\"true\""), "{masked}");
}

#[test]
fn ablation_rows_share_seed_and_hash() {
    let f = fixture();
    ok(&f, "o", &["preprocess"]);
    ok(&f, "o", &["build-graphs"]);
    for (axis, rows) in [("components", 3), ("fusion", 4), ("modality", 3)] {
        ok(&f, "o", &["ablate", "--axis", axis, "--set", "train.max_epochs=4"]);
        let text = fs::read_to_string(f.root.join(format!("o/ablate/{axis}.tsv"))).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        assert_eq!(lines.next(), Some(ABLATION_HEADER));
        let body: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
        assert_eq!(body.len(), rows, "{axis}");
        assert!(body.iter().all(|r| r.len() == 7 && r[5] == body[0][5] && r[6] == body[0][6]));
        assert!(body.iter().all(|r| r[1..5].iter().all(|v| (0.0..=1.0).contains(&v.parse::<f64>().unwrap()))));
    }
}

#[test]
fn exit_codes_are_distinct() {
    let f = fixture();
    let codes = [cli::EXIT_OK, cli::EXIT_OTHER, cli::EXIT_CONFIG, cli::EXIT_DATA, cli::EXIT_DIVERGED, cli::EXIT_GRADCHECK];
    let mut sorted = codes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), codes.len());

    assert_eq!(run(&f, "o", &["preprocess", "--set", "no.such.key=1"]).0, cli::EXIT_CONFIG);
    assert_eq!(run(&f, "o", &["preprocess", "--set", "model.dim=zero"]).0, cli::EXIT_CONFIG);
    assert_eq!(run(&f, "o", &["ablate", "--axis", "colour"]).0, cli::EXIT_CONFIG);
    assert_eq!(run(&f, "o", &["train"]).0, cli::EXIT_DATA);
    assert_eq!(run(&f, "o", &["preprocess", "--set", "data.kcore=50"]).0, cli::EXIT_DATA);

    ok(&f, "o", &["preprocess"]);
    ok(&f, "o", &["build-graphs"]);
    let (code, _, err) = run(&f, "o", &["train", "--set", "train.lr=1e300"]);
    assert_eq!(code, cli::EXIT_DIVERGED, "{err}");
    assert!(f.root.join("o/train/checkpoint.bin").exists());

    fs::write(f.root.join("o/.lock"), "").unwrap();
    let (code, _, err) = run(&f, "o", &["train"]);
    assert_eq!(code, cli::EXIT_OTHER);
    assert!(err.contains("lock"), "{err}");
    fs::remove_file(f.root.join("o/.lock")).unwrap();
    ok(&f, "o", &["train"]);
}

#[test]
fn gradcheck_command_passes() {
    let o = Command::new(EXE).args(["gradcheck", "--seed", "3"]).output().unwrap();
    assert_eq!(o.status.code(), Some(cli::EXIT_OK));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 36);
    assert!(out.contains("36 of 36"));
}
