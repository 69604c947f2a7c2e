use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
mode = "probabilistic"
hidden = 4
static_hidden = 4
window = 30
batch_size = 4
epochs = 2
batches_per_epoch = 2
val_batches = 1
k_mc = 3
unc_window = 30
rho_init = -3.0
ubl_epochs = 1
ubl_temperatures = [1.0, 2.0]
forward_hidden = 4
forward_window = 60
forward_warmup = 20
forward_epochs = 1
forward_batches_per_epoch = 2
forward_batch_size = 4
noise_fractions = [0.05]
noise_stds = [1.0]
seeds = [0]
"#;

fn bin(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inverse-basin"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(cwd: &Path, args: &[&str]) -> i32 {
    bin(cwd, args).status.code().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        std::fs::write(root.join("c.toml"), CONFIG).unwrap();
        assert_eq!(code(&root, &["generate", "--entities", "5", "--days", "800", "--seed", "2", "--out", "data"]), 0);
        Self { _tmp: tmp, root }
    }

    fn run(&self, args: &[&str]) -> i32 {
        code(&self.root, args)
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.root.join(rel)).unwrap()).unwrap()
    }

    fn header(&self, rel: &str) -> Vec<String> {
        let text = std::fs::read_to_string(self.root.join(rel)).unwrap();
        text.lines().next().unwrap().split(',').map(String::from).collect()
    }
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

#[test]
fn schemas_match_golden_file() {
    let f = Fixture::new();
    let train = ["--config", "c.toml", "--data", "data"];
    let with = |extra: &[&'static str]| train.iter().chain(extra).copied().collect::<Vec<_>>();
    assert_eq!(f.run(&[&["train-inverse"][..], &with(&["--out", "prob"])].concat()), 0);
    assert_eq!(f.run(&[&["ubl"][..], &with(&["--base", "prob", "--out", "ubl"])].concat()), 0);
    assert_eq!(f.run(&[&["train-forward"][..], &with(&["--out", "fwd"])].concat()), 0);
    assert_eq!(f.run(&[&["robustness-sweep"][..], &with(&["--out", "sweep"])].concat()), 0);
    let mut got: BTreeMap<String, Vec<String>> = BTreeMap::new();
    got.insert("generate/report.json".into(), keys(&f.json("data/report.json")));
    got.insert("train-inverse/report.json".into(), keys(&f.json("prob/report.json")));
    got.insert("ubl/report.json".into(), keys(&f.json("ubl/report.json")));
    got.insert("train-forward/report.json".into(), keys(&f.json("fwd/report.json")));
    got.insert("robustness-sweep/report.json".into(), keys(&f.json("sweep/report.json")));
    got.insert("history.csv".into(), f.header("prob/history.csv"));
    got.insert("predictions.csv".into(), f.header("fwd/predictions.csv"));
    got.insert("sweep.csv".into(), f.header("sweep/sweep.csv"));
    assert_eq!(f.run(&["evaluate", "--run", "prob"]), 0);
    assert_eq!(f.run(&["evaluate", "--run", "ubl"]), 0);
    got.insert("evaluate/report.json".into(), keys(&f.json("prob/report.json")));
    got.insert("uncertainty.csv".into(), f.header("prob/uncertainty.csv"));
    got.insert("metrics.csv".into(), f.header("prob/metrics.csv"));
    assert_eq!(f.run(&["report", "--runs", "prob", "ubl", "--out", "cmp"]), 0);
    got.insert("report/report.json".into(), keys(&f.json("cmp/report.json")));
    got.insert("comparison.csv".into(), f.header("cmp/comparison.csv"));
    got.insert("scatter.csv".into(), f.header("cmp/scatter.csv"));
    assert!(f.root.join("cmp/scatter_prob.svg").is_file());

    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/schema.json");
    let golden: BTreeMap<String, Vec<String>> = serde_json::from_slice(&std::fs::read(golden_path).unwrap()).unwrap();
    assert_eq!(got, golden);

    let rep = f.json("prob/report.json");
    for k in ["static_mse", "static_nse", "epistemic_mean", "coverage_1sd", "coverage_2sd", "unc_time_mean", "corr_per_feature"] {
        assert!(rep.get(k).is_some(), "missing {k}");
    }
    let cmp = std::fs::read_to_string(f.root.join("cmp/comparison.csv")).unwrap();
    assert!(cmp.contains("\nprob,probabilistic,encoder,"));
    assert!(cmp.contains("\nubl,ubl_phase2,encoder,"));
}

#[test]
fn phase_two_from_config_reproduces_the_ubl_subcommand() {
    let f = Fixture::new();
    assert_eq!(f.run(&["train-inverse", "--config", "c.toml", "--data", "data", "--out", "prob"]), 0);
    assert_eq!(f.run(&["ubl", "--config", "c.toml", "--data", "data", "--base", "prob", "--out", "ubl"]), 0);
    let art = f.json("ubl/penalty.json");
    let t = art["t_scale"].as_f64().unwrap();
    let cfg = format!(
        "{CONFIG}\nubl_temperatures = [{t:?}]\n"
    )
    .replace("mode = \"probabilistic\"", "mode = \"ubl_phase2\"\nubl_source = \"prob/checkpoint.json\"\nubl_penalty = \"ubl/penalty.json\"")
    .replace("ubl_temperatures = [1.0, 2.0]\n", "");
    std::fs::write(f.root.join("p2.toml"), cfg).unwrap();
    assert_eq!(f.run(&["train-inverse", "--config", "p2.toml", "--data", "data", "--out", "p2"]), 0);
    let a = std::fs::read(f.root.join("ubl/checkpoint.json")).unwrap();
    let b = std::fs::read(f.root.join("p2/checkpoint.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(f.json("p2/report.json")["mode"], "ubl_phase2");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let f = Fixture::new();
    assert_eq!(f.run(&["train-inverse", "--bogus"]), 1);
    assert_eq!(f.run(&["launch"]), 1);
    assert_eq!(f.run(&["--help"]), 0);
    assert_eq!(f.run(&["evaluate", "--run", "missing"]), 1);
    std::fs::write(f.root.join("bad.toml"), "hidden = 0\n").unwrap();
    assert_eq!(f.run(&["train-inverse", "--config", "bad.toml", "--data", "data", "--out", "x"]), 1);
    std::fs::write(f.root.join("typo.toml"), "hiden = 4\n").unwrap();
    assert_eq!(f.run(&["train-inverse", "--config", "typo.toml", "--data", "data", "--out", "x"]), 1);
    assert_eq!(f.run(&["train-inverse", "--config", "c.toml", "--data", "nowhere", "--out", "x"]), 1);
    // A deterministic base cannot seed phase two.
    std::fs::write(f.root.join("det.toml"), format!("{CONFIG}").replace("\"probabilistic\"", "\"deterministic\"")).unwrap();
    assert_eq!(f.run(&["train-inverse", "--config", "det.toml", "--data", "data", "--out", "det"]), 0);
    assert_eq!(f.run(&["ubl", "--config", "c.toml", "--data", "data", "--base", "det", "--out", "u"]), 1);
    // Output path blocked by a regular file: an I/O failure at runtime.
    std::fs::write(f.root.join("blocker"), "").unwrap();
    assert_eq!(f.run(&["train-inverse", "--config", "c.toml", "--data", "data", "--out", "blocker/run"]), 2);
}

#[test]
fn writes_only_inside_the_output_directory() {
    let f = Fixture::new();
    let before: Vec<_> = std::fs::read_dir(&f.root).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(f.run(&["train-inverse", "--config", "c.toml", "--data", "data", "--out", "r", "--seed", "9"]), 0);
    let mut after: Vec<_> = std::fs::read_dir(&f.root).unwrap().map(|e| e.unwrap().file_name()).collect();
    after.retain(|n| n != "r");
    let mut before = before;
    before.sort();
    after.sort();
    assert_eq!(before, after);
    assert_eq!(f.json("r/report.json")["seed"], 9);
    let data_files: Vec<_> = std::fs::read_dir(f.root.join("data")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(data_files.len(), 4);
}

#[test]
fn documented_example_config_is_complete_and_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/example.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let cfg = invbasin::train::TrainConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, invbasin::train::TrainConfig::default());
    let table: toml_keys::Keys = text.parse().unwrap();
    let defaults: toml_keys::Keys = invbasin::train::TrainConfig::default().to_toml().parse().unwrap();
    for k in defaults.0 {
        assert!(table.0.contains(&k), "example config lacks `{k}`");
    }
}

/// Top-level keys of a flat TOML file, commented-out lines included.
mod toml_keys {
    pub struct Keys(pub Vec<String>);

    impl std::str::FromStr for Keys {
        type Err = ();
        fn from_str(s: &str) -> Result<Self, ()> {
            Ok(Keys(
                s.lines()
                    .map(|l| l.trim().trim_start_matches('#').trim())
                    .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
                    .filter(|k| !k.is_empty() && !k.contains(' '))
                    .collect(),
            ))
        }
    }
}
