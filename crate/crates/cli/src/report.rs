//! Figure and table data assembled from the runs in a result store.
//!
//! Each output CSV concatenates one per-run CSV across all runs of the
//! producing command, with a leading `run` column naming the run directory.
//!
//! Two files are derived rather than concatenated:
//! - `support_by_frequency.csv` (`run, frequency_bucket, tokens, support_samples`):
//!   `tokens` counts vocabulary entries by training frequency, and every
//!   support sample is counted once under its target's bucket, so the
//!   `support_samples` column of a run sums to its support-set size.
//! - `summary.txt`: support proportion per `alpha` run and the top Type-2
//!   degrees per `graph` run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::{json, Value};

use crate::commands::FREQUENCY_BUCKETS;
use crate::store::{scan, Manifest, Run, MANIFEST};

/// `(report file, producing command, per-run file)`.
pub const TABLES: [(&str, &str, &str); 15] = [
    ("training_curves.csv", "train", "curve.csv"),
    ("head_fit.csv", "head-fit", "fit.csv"),
    ("representer_check.csv", "verify-rep", "verify.csv"),
    ("support_by_token.csv", "alpha", "tokens.csv"),
    ("support_by_category.csv", "alpha", "categories.csv"),
    ("threshold_sensitivity.csv", "alpha", "threshold.csv"),
    ("support_rate_by_frequency.csv", "alpha", "frequency.csv"),
    ("counterfactual.csv", "counterfactual", "counterfactual.csv"),
    ("type2_graph_edges.csv", "graph", "edges.csv"),
    ("type2_graph_degrees.csv", "graph", "degrees.csv"),
    ("type2_graph_top.csv", "graph", "top.csv"),
    ("ablation.csv", "ablate", "ablation.csv"),
    ("sweep.csv", "sweep", "sweep.csv"),
    ("predict_accuracy.csv", "predict-support", "grid.csv"),
    ("layer_probe.csv", "probe", "probe.csv"),
];

/// Manifests of every non-report run under `root`.
pub fn source_manifests(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    Ok(scan(root)?
        .into_iter()
        .filter(|(_, m)| m.command.name() != "report")
        .map(|(dir, _)| dir.join(MANIFEST))
        .collect())
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_table(path: &Path) -> anyhow::Result<(csv::StringRecord, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

pub fn emit(from: &Path, run: &mut Run) -> anyhow::Result<Value> {
    let runs: Vec<(PathBuf, Manifest)> =
        scan(from)?.into_iter().filter(|(_, m)| m.command.name() != "report").collect();
    for (dir, m) in &runs {
        for o in &m.outputs {
            if !dir.join(&o.path).exists() {
                bail!("run {} is missing {} listed in its manifest", dir.join(MANIFEST).display(), o.path);
            }
        }
    }
    let mut written = Vec::new();
    for (out_name, command, file) in TABLES {
        let mut header: Option<csv::StringRecord> = None;
        let mut w = csv::Writer::from_writer(Vec::new());
        for (dir, m) in runs.iter().filter(|(_, m)| m.command.name() == command) {
            if !m.outputs.iter().any(|o| o.path == file) {
                continue;
            }
            let (h, rows) = read_table(&dir.join(file))?;
            match &header {
                None => {
                    let mut full = csv::StringRecord::from(vec!["run"]);
                    full.extend(h.iter());
                    w.write_record(&full)?;
                    header = Some(h);
                }
                Some(prev) if *prev != h => bail!("{} in {} has a different schema", file, dir.display()),
                Some(_) => {}
            }
            let name = run_name(dir);
            for row in rows {
                let mut full = csv::StringRecord::from(vec![name.as_str()]);
                full.extend(row.iter());
                w.write_record(&full)?;
            }
        }
        if header.is_some() {
            run.write(out_name, &w.into_inner()?)?;
            written.push(out_name);
        }
    }

    let mut histogram = csv::Writer::from_writer(Vec::new());
    histogram.write_record(["run", "frequency_bucket", "tokens", "support_samples"])?;
    let mut summary = String::new();
    let mut have_alpha = false;
    for (dir, m) in runs.iter().filter(|(_, m)| m.command.name() == "alpha") {
        have_alpha = true;
        let name = run_name(dir);
        let (h, rows) = read_table(&dir.join("tokens.csv"))?;
        let occ = h.iter().position(|c| c == "occurrences").context("tokens.csv lacks occurrences")?;
        let mut tokens = [0usize; FREQUENCY_BUCKETS.len()];
        for r in &rows {
            let o: usize = r[occ].parse()?;
            if let Some(k) = FREQUENCY_BUCKETS.iter().position(|&(_, lo, hi)| (lo..=hi).contains(&o)) {
                tokens[k] += 1;
            }
        }
        let (_, freq) = read_table(&dir.join("frequency.csv"))?;
        for r in &freq {
            let k = FREQUENCY_BUCKETS.iter().position(|&(b, _, _)| b == &r[0]).context("unknown frequency bucket")?;
            histogram.write_record([name.as_str(), &r[0], &tokens[k].to_string(), &r[2]])?;
        }
        let (_, cats) = read_table(&dir.join("categories.csv"))?;
        let samples: usize = cats.iter().map(|r| r[1].parse::<usize>()).sum::<Result<_, _>>()?;
        let support: usize = cats.iter().map(|r| r[2].parse::<usize>()).sum::<Result<_, _>>()?;
        writeln!(
            summary,
            "{name}: tau={} gamma={} samples={samples} support={support} proportion={:.4}",
            m.globals.tau,
            m.globals.gamma,
            support as f64 / samples.max(1) as f64
        )?;
    }
    if have_alpha {
        run.write("support_by_frequency.csv", &histogram.into_inner()?)?;
        written.push("support_by_frequency.csv");
    }
    for (dir, _) in runs.iter().filter(|(_, m)| m.command.name() == "graph") {
        let (_, rows) = read_table(&dir.join("top.csv"))?;
        writeln!(summary, "{}: top degrees", run_name(dir))?;
        for r in rows {
            writeln!(summary, "  {} #{} token {} degree {}", &r[0], &r[1], &r[2], &r[3])?;
        }
    }
    if !summary.is_empty() {
        run.write("summary.txt", summary.as_bytes())?;
        written.push("summary.txt");
    }
    Ok(json!({ "runs": runs.len(), "files": written }))
}
