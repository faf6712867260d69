use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[model]
layers = 2
hidden = 16
heads = 2

[schedule]
steps = 40
batch_windows = 8
eval_every = 20

[synthetic]
documents = 60

[head_fit]
tolerance = 1e-8

[supportness]
samples = 300
epochs = 5
widths = [4]
fractions = [1.0]
"#;

struct Store {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Store {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Store { _tmp: tmp, root, config }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_nwp"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .arg("--threads")
            .arg("1")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let o = self.raw(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        last_json(&o)
    }
}

fn last_json(o: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&o.stdout).lines().last().unwrap()).unwrap()
}

fn run_dir(v: &Value) -> PathBuf {
    PathBuf::from(v["run_dir"].as_str().unwrap())
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn tau_outside_unit_interval_is_a_usage_error() {
    let s = Store::new();
    let o = s.raw(&["alpha", "--checkpoint", "x.ckpt", "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("(0, 1]"));
    assert_eq!(s.raw(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(s.raw(&["alpha", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1_with_an_error_record() {
    let s = Store::new();
    let bogus = s.root.join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = s.raw(&["alpha", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let last = String::from_utf8_lossy(&o.stderr).lines().last().unwrap().to_string();
    let record: Value = serde_json::from_str(&last).unwrap();
    assert!(record["error"].is_string() && record["message"].is_string());
    let left: Vec<_> = fs::read_dir(s.out()).map(|d| d.collect()).unwrap_or_default();
    assert!(left.is_empty(), "failed run left {left:?}");
}

#[test]
fn empty_store_reports_nothing() {
    let s = Store::new();
    fs::create_dir_all(s.root.join("empty")).unwrap();
    let o = s.raw(&["report", "--from", s.root.join("empty").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("notice"));
    let v = last_json(&o);
    assert!(v["run_dir"].is_null());
}

#[test]
fn pipeline_reports_and_replays_byte_identically() {
    let s = Store::new();
    let train = run_dir(&s.ok(&["train"]));
    let best = train.join("best.ckpt");
    let best = best.to_str().unwrap();
    let fit = run_dir(&s.ok(&["head-fit", "--checkpoint", best]));
    let head = fit.join("head.ckpt");
    let head = head.to_str().unwrap();
    let verify = s.ok(&["verify-rep", "--checkpoint", head]);
    assert!(verify["summary"]["max_relative_error"].as_f64().unwrap() <= 1e-3);
    let alpha = s.ok(&["alpha", "--checkpoint", head, "--tau", "0.3"]);
    s.ok(&["graph", "--checkpoint", head, "--tau", "0.3"]);
    s.ok(&["ablate", "--checkpoint", best, "--regimes", "heads-only"]);

    let again = s.ok(&["alpha", "--checkpoint", head, "--tau", "0.3"]);
    assert_ne!(run_dir(&again), run_dir(&alpha), "runs must never share a directory");
    assert_eq!(csv_files(&run_dir(&again)), csv_files(&run_dir(&alpha)));

    let replay = s.ok(&["replay", run_dir(&alpha).join("manifest.json").to_str().unwrap()]);
    assert!(run_dir(&replay).starts_with(s.out().join("replays")));

    let store = s.out();
    let first = run_dir(&s.ok(&["report", "--from", store.to_str().unwrap()]));
    let reports = s.root.join("reports");
    let o = Command::new(env!("CARGO_BIN_EXE_nwp"))
        .args(["report", "--from", store.to_str().unwrap(), "--out", reports.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success());
    let second = run_dir(&last_json(&o));
    let a = csv_files(&first);
    assert!(a.contains_key("ablation.csv") && a.contains_key("support_by_frequency.csv"));
    assert_eq!(a, csv_files(&second));

    let support = alpha["summary"]["support"].as_u64().unwrap() as usize;
    let bins: usize = rows(&first.join("support_by_frequency.csv"))
        .iter()
        .filter(|r| r[0] == *run_dir(&alpha).file_name().unwrap().to_str().unwrap())
        .map(|r| r[3].parse::<usize>().unwrap())
        .sum();
    assert_eq!(bins, support);

    let ablate_dir = fs::read_dir(&store)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("ablate-"))
        .unwrap();
    let stored = rows(&ablate_dir.join("ablation.csv"));
    let table = rows(&first.join("ablation.csv"));
    assert_eq!(table.len(), stored.len());
    for (t, r) in table.iter().zip(&stored) {
        assert_eq!(&t[0], ablate_dir.file_name().unwrap().to_str().unwrap());
        assert_eq!(t.iter().skip(1).collect::<Vec<_>>(), r.iter().collect::<Vec<_>>());
    }

    fs::remove_file(ablate_dir.join("ablation.csv")).unwrap();
    let o = s.raw(&["report", "--from", store.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(ablate_dir.join("manifest.json").to_str().unwrap()), "{err}");
}

#[test]
fn out_directory_defaults_from_the_environment() {
    let s = Store::new();
    let target = s.root.join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_nwp"))
        .args(["gen-corpus", "--config", s.config.to_str().unwrap()])
        .env("NWP_OUT", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run_dir(&last_json(&o)).starts_with(&target));
}
