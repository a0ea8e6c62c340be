mod common;

use std::path::Path;
use std::process::{Command, Output};

fn livesketch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_livesketch"))
        .args(args)
        .env_remove("LIVESKETCH_CONFIG")
        .env_remove("LIVESKETCH_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = livesketch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = livesketch(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn eval_help_exits_0() {
    let out = livesketch(&["eval", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--models"));
}

#[test]
fn serve_without_index_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = livesketch(&["serve", "--index", s(&dir.path().join("missing")), "--models", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("image index"));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, "{not json").unwrap();
    let out = livesketch(&["--config", s(&path), "ingest", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn quickdraw_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ndjson");
    let mut lines = String::new();
    for (word, n) in [("cat", 6), ("dog", 6), ("owl", 2)] {
        for i in 0..n {
            lines.push_str(&format!(
                "{{\"word\":\"{word}\",\"drawing\":[[[0,{a},20],[0,10,{a}]],[[5,9],[5,1]]]}}\n",
                a = 10 + i
            ));
        }
    }
    lines.push_str("{\"word\":\"cat\",\"drawing\":\"oops\"}\n");
    std::fs::write(&input, lines).unwrap();
    let out = dir.path().join("data");
    ok(&["ingest", "--input", s(&input), "--classes", "cat,dog", "--per-class", "5", "--out", s(&out)]);
    let manifest = livesketch::dataset::load_manifest(&out).unwrap();
    assert_eq!(manifest.classes, vec!["cat", "dog"]);
    assert_eq!(manifest.train + manifest.test + manifest.images.len(), 10);

    let short = livesketch(&["ingest", "--input", s(&input), "--classes", "cat,owl", "--per-class", "5", "--out", s(&out)]);
    assert_eq!(short.status.code(), Some(1));
}

#[test]
fn full_pipeline_on_the_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("config.json");
    common::write_config(&common::tiny_config(0), &config);
    let (data, models, index, eval) = (root.join("data"), root.join("models"), root.join("index"), root.join("eval"));
    let c = s(&config);
    ok(&["--config", c, "--seed", "5", "ingest", "--out", s(&data)]);
    ok(&["--config", c, "--seed", "5", "train-vae", "--data", s(&data), "--models", s(&models)]);
    ok(&["--config", c, "--seed", "5", "train-raster", "--data", s(&data), "--models", s(&models)]);
    ok(&["--config", c, "--seed", "5", "train-joint", "--data", s(&data), "--models", s(&models)]);
    ok(&["--config", c, "--seed", "5", "index", "--data", s(&data), "--models", s(&models), "--out", s(&index)]);
    let table = ok(&["--config", c, "--seed", "5", "eval", "--data", s(&data), "--models", s(&models), "--out", s(&eval)]);
    assert!(table.contains("S2S V-R"), "{table}");
    for name in ["s2s-v-r.json", "s2i-ls.json", "table.txt", "perturb.json", "perturb.svg"] {
        assert!(eval.join(name).exists(), "{name} missing");
    }
    let report: livesketch::eval::ExperimentReport =
        serde_json::from_str(&std::fs::read_to_string(eval.join("s2s-v-r.json")).unwrap()).unwrap();
    assert_eq!(report.seed, 5);

    let sheet = root.join("demo.svg");
    let demo = ok(&["--config", c, "perturb-demo", "--data", s(&data), "--models", s(&models), "--out", s(&sheet)]);
    assert!(demo.contains("Backprop"));
    assert!(std::fs::read_to_string(&sheet).unwrap().starts_with("<svg"));

    // training stages out of order fail instead of inventing missing models
    let fresh = root.join("fresh");
    let out = livesketch(&["--config", c, "train-joint", "--data", s(&data), "--models", s(&fresh)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_comes_from_the_environment() {
    let cli = <livesketch::cli::Cli as clap::Parser>::try_parse_from(["livesketch", "ingest", "--out", "x"]).unwrap();
    assert_eq!(cli.seed, None);
    let out = Command::new(env!("CARGO_BIN_EXE_livesketch"))
        .args(["--help"])
        .output()
        .unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    assert!(help.contains("LIVESKETCH_SEED") && help.contains("LIVESKETCH_CONFIG"));
}
