use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[sampling]
n_pairs = 120

[model]
d_model = 16
n_heads = 2
n_blocks = 1
text_layers = 1

[train]
epochs = 2
combiner_epochs = 2

[eval_set]
cases_per_query = 1

[sweep]
counts = [40, 80]
seeds = [0]

[ablation]
seeds = [0]
"#;

fn zscir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zscir"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(path: &Path) -> serde_json::Value {
    let name = format!("{}.manifest.json", path.file_name().unwrap().to_string_lossy());
    serde_json::from_slice(&std::fs::read(path.with_file_name(name)).unwrap()).unwrap()
}

#[test]
fn pipeline_runs_end_to_end_from_one_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = with_config(d, SMALL);
    for cmd in ["generate-data", "train", "finetune-combiner", "evaluate", "gallery"] {
        ok(&zscir(d, &["--config", &cfg, cmd]));
    }
    for f in [
        "collection.jsonl",
        "triplets.jsonl",
        "eval_set.jsonl",
        "model.ckpt",
        "train_log.jsonl",
        "model_combiner.ckpt",
        "report.json",
        "report.md",
        "gallery.html",
    ] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let m = manifest(&d.join("report.json"));
    let train_m = manifest(&d.join("model.ckpt"));
    assert_eq!(m["config_hash"], train_m["config_hash"]);
    assert!(m["input_hashes"]["model_combiner.ckpt"].is_string());
    assert!(train_m["input_hashes"]["triplets.jsonl"].is_string());
    assert!(train_m["content_hashes"]["model.ckpt"].is_string());

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], m["config_hash"]);
    let html = std::fs::read_to_string(d.join("gallery.html")).unwrap();
    assert!(html.contains("data:image/png;base64,"));
    assert!(html.contains("class=\"gt\"") || html.contains("gt not retrieved"));
}

#[test]
fn generate_data_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        let cfg = with_config(d, SMALL);
        ok(&zscir(d, &["--config", &cfg, "--seed", "3", "generate-data"]));
    }
    for f in ["collection.jsonl", "triplets.jsonl", "eval_set.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    // Manifests differ only in where they were written.
    let (ma, mb) = (manifest(&a.path().join("triplets.jsonl")), manifest(&b.path().join("triplets.jsonl")));
    for key in ["config_hash", "seed", "content_hashes"] {
        assert_eq!(ma[key], mb[key], "{key}");
    }
}

#[test]
fn config_errors_use_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = with_config(d, "[train]\nepochz = 3\n");
    let out = zscir(d, &["--config", &bad, "generate-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    // Missing inputs are a configuration problem too.
    let good = with_config(d, SMALL);
    assert_eq!(zscir(d, &["--config", &good, "train"]).status.code(), Some(2));
    assert_eq!(zscir(d, &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("collection.jsonl"), "{not json\n").unwrap();
    std::fs::write(d.join("triplets.jsonl"), "").unwrap();
    let cfg = with_config(d, SMALL);
    assert_eq!(zscir(d, &["--config", &cfg, "train"]).status.code(), Some(1));
}

#[test]
fn environment_overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = with_config(d, SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_zscir"))
        .args(["--config", &cfg, "generate-data", "--out"])
        .arg(d)
        .env("ZSCIR__SAMPLING__N_PAIRS", "30")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&out);
    let m = manifest(&d.join("triplets.jsonl"));
    assert_eq!(m["config"]["sampling"]["n_pairs"], 30);
    let lines = std::fs::read_to_string(d.join("triplets.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 30);
}

#[test]
fn sweep_and_ablation_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = with_config(d, SMALL);
    ok(&zscir(d, &["--config", &cfg, "scale-sweep"]));
    let csv = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[0].starts_with("n_triplets,R@1,R@5"));
    assert!(rows[1].starts_with("40,") && rows[2].starts_with("80,"));
    let png = std::fs::read(d.join("sweep.png")).unwrap();
    assert_eq!(&png[..4], b"\x89PNG");

    ok(&zscir(d, &["--config", &cfg, "ablate"]));
    let md = std::fs::read_to_string(d.join("ablation.md")).unwrap();
    for v in ["full", "no_ema", "no_cross_attention"] {
        assert!(md.contains(&format!("| {v} |")), "{md}");
    }
}
