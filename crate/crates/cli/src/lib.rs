//! `nwp`: command-line driver for the support-sample analyses.
//!
//! Every subcommand writes into a fresh run directory under `--out` with a
//! manifest that is sufficient to re-execute it (`nwp replay`).

pub mod commands;
pub mod config;
pub mod report;
pub mod store;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::RunConfig;
use store::{hash_file, sha256_hex, FileHash, Globals, Manifest};

#[derive(Debug, Parser)]
#[command(name = "nwp", version, about = "Support-sample analysis of next-word prediction models")]
pub struct Cli {
    /// Master seed for model init, data split and the demo corpus.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Result store directory.
    #[arg(long, global = true, env = "NWP_OUT", default_value = "nwp-out")]
    pub out: PathBuf,
    /// Worker threads for parallel maps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Support threshold, in (0, 1].
    #[arg(long, global = true, default_value_t = 0.9, value_parser = parse_tau)]
    pub tau: f64,
    /// Memorization confidence, in [0, 1].
    #[arg(long, global = true, default_value_t = 0.5, value_parser = parse_gamma)]
    pub gamma: f64,
    /// L2 strength of head fits (overrides the config file).
    #[arg(long, global = true, value_parser = parse_lambda)]
    pub lambda: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("not a number: {e}"))
}

fn parse_tau(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("tau must be in (0, 1], got {v}"))
    }
}

fn parse_gamma(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("gamma must be in [0, 1], got {v}"))
    }
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("lambda must be positive, got {v}"))
    }
}

/// Token corpus input; the demo corpus is generated from the config when
/// no file is given.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize, PartialEq)]
pub struct CorpusArgs {
    /// One document per line, space-separated token ids.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sidecar with `sample_id category` per line.
    #[arg(long, requires = "corpus")]
    pub categories: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Write the synthetic demo corpus, its category sidecar and spec.
    GenCorpus {
        /// Synthetic spec TOML (default: the config's `synthetic` section).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the language model; keeps step-0, scheduled, best and last checkpoints.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        steps: Option<usize>,
        /// Extra steps to checkpoint (comma separated).
        #[arg(long, value_delimiter = ',')]
        keep: Vec<usize>,
    },
    /// Refit the head to stationarity on frozen training-split features.
    HeadFit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Tolerance on the Euclidean norm of the head gradient.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Start from a zero head instead of the checkpoint's head.
        #[arg(long)]
        cold: bool,
    },
    /// Representer coefficients, support and memorization annotations.
    Alpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Threshold-sensitivity grid.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        grid: Vec<f64>,
    },
    /// Check that the head equals its representer reconstruction.
    VerifyRep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Largest acceptable max-over-tokens relative error.
        #[arg(long, default_value_t = 1e-3)]
        max_error: f64,
    },
    /// Subtract support-set contributions from the head and re-measure.
    Counterfactual {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Tokens to analyze (comma separated); default: automatic selection.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<u32>,
        /// Number of automatically selected tokens.
        #[arg(long, default_value_t = 5)]
        pick: usize,
        #[arg(long, default_value_t = 5)]
        min_support: usize,
        #[arg(long, default_value_t = 20)]
        max_support: usize,
        /// Use a least-squares scale instead of the stationary 1/(2Nλ).
        #[arg(long)]
        approximate: bool,
    },
    /// Type-2 token graph and degree tables.
    Graph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Degrees sum edge multiplicities instead of counting neighbours.
        #[arg(long)]
        weighted: bool,
    },
    /// Removal-retraining ablations.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_delimiter = ',', default_value = "hard,soft,random")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "heads-only,full-model")]
        regimes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Full-model regime starts from the base parameters.
        #[arg(long)]
        warm_start: bool,
    },
    /// Retrain across a knob grid and record support statistics.
    Sweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        knob: String,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Predict support labels from checkpoint features.
    PredictSupport {
        /// Checkpoint whose support annotations are the gold labels.
        #[arg(long)]
        gold: PathBuf,
        /// Checkpoints to extract features from (default: the gold one).
        #[arg(long, value_delimiter = ',')]
        at: Vec<PathBuf>,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_delimiter = ',', default_value = "last-hidden,all-hidden,projected-gradient")]
        features: Vec<String>,
    },
    /// Per-layer probe heads.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Also probe fixed random features of the same width.
        #[arg(long)]
        random_control: bool,
    },
    /// Figure and table data from every run in a result store.
    Report {
        #[arg(long)]
        from: PathBuf,
    },
    /// Re-execute a run from its manifest and compare outputs.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::Train { .. } => "train",
            Command::HeadFit { .. } => "head-fit",
            Command::Alpha { .. } => "alpha",
            Command::VerifyRep { .. } => "verify-rep",
            Command::Counterfactual { .. } => "counterfactual",
            Command::Graph { .. } => "graph",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
            Command::PredictSupport { .. } => "predict-support",
            Command::Probe { .. } => "probe",
            Command::Report { .. } => "report",
            Command::Replay { .. } => "replay",
        }
    }

    /// Input files whose hashes pin the run.
    fn input_files(&self) -> Vec<PathBuf> {
        let mut v = Vec::new();
        let corpus = |c: &CorpusArgs, v: &mut Vec<PathBuf>| {
            v.extend(c.corpus.iter().cloned());
            v.extend(c.categories.iter().cloned());
        };
        match self {
            Command::GenCorpus { spec } => v.extend(spec.iter().cloned()),
            Command::Train { corpus: c, .. } | Command::Sweep { corpus: c, .. } => corpus(c, &mut v),
            Command::HeadFit { checkpoint, corpus: c, .. }
            | Command::Alpha { checkpoint, corpus: c, .. }
            | Command::VerifyRep { checkpoint, corpus: c, .. }
            | Command::Counterfactual { checkpoint, corpus: c, .. }
            | Command::Graph { checkpoint, corpus: c, .. }
            | Command::Ablate { checkpoint, corpus: c, .. }
            | Command::Probe { checkpoint, corpus: c, .. } => {
                v.push(checkpoint.clone());
                corpus(c, &mut v);
            }
            Command::PredictSupport { gold, at, corpus: c, .. } => {
                v.push(gold.clone());
                v.extend(at.iter().cloned());
                corpus(c, &mut v);
            }
            Command::Report { from } => v.extend(report::source_manifests(from).unwrap_or_default()),
            Command::Replay { .. } => {}
        }
        v
    }

    /// Rewrites every path argument as an absolute path.
    fn absolutize(&mut self) -> anyhow::Result<()> {
        let abs = |p: &mut PathBuf| -> anyhow::Result<()> {
            *p = std::fs::canonicalize(&*p).with_context(|| format!("input {} not found", p.display()))?;
            Ok(())
        };
        let corpus = |c: &mut CorpusArgs| -> anyhow::Result<()> {
            if let Some(p) = c.corpus.as_mut() {
                abs(p)?;
            }
            if let Some(p) = c.categories.as_mut() {
                abs(p)?;
            }
            Ok(())
        };
        match self {
            Command::GenCorpus { spec } => {
                if let Some(p) = spec.as_mut() {
                    abs(p)?;
                }
            }
            Command::Train { corpus: c, .. } | Command::Sweep { corpus: c, .. } => corpus(c)?,
            Command::HeadFit { checkpoint, corpus: c, .. }
            | Command::Alpha { checkpoint, corpus: c, .. }
            | Command::VerifyRep { checkpoint, corpus: c, .. }
            | Command::Counterfactual { checkpoint, corpus: c, .. }
            | Command::Graph { checkpoint, corpus: c, .. }
            | Command::Ablate { checkpoint, corpus: c, .. }
            | Command::Probe { checkpoint, corpus: c, .. } => {
                abs(checkpoint)?;
                corpus(c)?;
            }
            Command::PredictSupport { gold, at, corpus: c, .. } => {
                abs(gold)?;
                for p in at.iter_mut() {
                    abs(p)?;
                }
                corpus(c)?;
            }
            Command::Report { from } => abs(from)?,
            Command::Replay { manifest } => abs(manifest)?,
        }
        Ok(())
    }
}

/// What a finished run reports on stdout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub summary: serde_json::Value,
}

pub fn globals_from(cli: &Cli) -> anyhow::Result<Globals> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_seed(cli.seed);
    if let Some(l) = cli.lambda {
        config.head_fit.lambda = l;
    }
    Ok(Globals { seed: cli.seed, tau: cli.tau, gamma: cli.gamma, lambda: config.head_fit.lambda, config })
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        // A second call in one process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let globals = globals_from(&cli)?;
    let mut command = cli.command;
    command.absolutize()?;
    match command {
        Command::Replay { manifest } => replay(&manifest, &cli.out),
        command => execute(&command, &globals, &cli.out),
    }
}

/// Runs one command into a new run directory and writes its manifest.
pub fn execute(command: &Command, globals: &Globals, out: &Path) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let inputs = command
        .input_files()
        .iter()
        .map(|p| Ok(FileHash { path: p.display().to_string(), sha256: hash_file(p)? }))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if matches!(command, Command::Report { .. }) && inputs.is_empty() {
        eprintln!("notice: no runs found; nothing to report");
        return Ok(Outcome { run_dir: None, manifest: None, summary: serde_json::json!({ "runs": 0 }) });
    }
    let key = sha256_hex(serde_json::to_string(&(command, globals, &inputs))?.as_bytes());
    let mut run = store::Run::create(out, command.name(), &key)?;
    let summary = match commands::dispatch(command, globals, &mut run) {
        Ok(s) => s,
        Err(e) => {
            run.abandon();
            return Err(e);
        }
    };
    let dir = run.dir.clone();
    let manifest = run.finish(|outputs| Manifest {
        tool: "nwp".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.clone(),
        globals: globals.clone(),
        inputs,
        outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })?;
    Ok(Outcome { run_dir: Some(dir), manifest: Some(manifest), summary })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub file: String,
    pub identical: bool,
}

/// Re-executes `manifest` into `<out>/replays` and compares every output
/// file. Any differing CSV is an error.
pub fn replay(manifest_path: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let original = Manifest::load(manifest_path)?;
    for input in &original.inputs {
        let now = hash_file(Path::new(&input.path))?;
        if now != input.sha256 {
            bail!("input {} changed since the recorded run", input.path);
        }
    }
    let outcome = execute(&original.command, &original.globals, &out.join("replays"))?;
    let fresh = Manifest::load(outcome.manifest.as_ref().expect("execute writes a manifest"))?;
    let checks: Vec<ReplayCheck> = original
        .outputs
        .iter()
        .map(|o| ReplayCheck {
            file: o.path.clone(),
            identical: fresh.outputs.iter().any(|f| f.path == o.path && f.sha256 == o.sha256),
        })
        .collect();
    let csv_mismatch: Vec<&str> =
        checks.iter().filter(|c| !c.identical && c.file.ends_with(".csv")).map(|c| c.file.as_str()).collect();
    if !csv_mismatch.is_empty() || fresh.outputs.len() != original.outputs.len() {
        bail!("replay is not byte-identical: {}", csv_mismatch.join(", "));
    }
    Ok(Outcome {
        run_dir: outcome.run_dir,
        manifest: outcome.manifest,
        summary: serde_json::json!({ "replayed": manifest_path, "files": checks }),
    })
}

/// Machine-readable error record for a failed command.
pub fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<nwp_core::Error>())
        .map(|e| e.kind())
        .unwrap_or("error");
    let message: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    serde_json::json!({ "error": kind, "message": message.join(": ") })
}
