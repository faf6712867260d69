//! One function per subcommand. Each reads its inputs, calls into
//! `nwp_core`, and writes tidy CSVs into the run directory.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::{json, Value};

use nwp_core::ablation::{AblationContext, AblationPlan, Knob, Method, Regime};
use nwp_core::checkpoint;
use nwp_core::counterfactual::{run_counterfactual, Mode, Selector, Subtractor};
use nwp_core::headfit::{head_only_retrain, HeadFitConfig};
use nwp_core::probe::{probe_all, probe_csv, probe_random, ProbeConfig};
use nwp_core::representer::{compute_alphas, threshold_sweep, verify_representer};
use nwp_core::supportness::{
    extract_features, labeled_subset, run_cell, run_threshold_cell, save_features, ClassifierSpec, FeatureCacheHeader, FeatureKind, GridCell,
    LabeledFeatureSet,
};
use nwp_core::synth::{generate_synthetic, SyntheticSpec};
use nwp_core::train::train;
use nwp_core::type2graph::build_graph;
use nwp_core::{Corpus, DataSplit, ModelSnapshot, SplitSpec, SupportIndex, SupportType, Tensor, TokenId};

use crate::store::{Globals, Run};
use crate::{Command, CorpusArgs};

/// Kernel non-negativity fraction below which a counterfactual direction
/// is reported as premise-unmet.
pub const KERNEL_PREMISE: f64 = 0.95;

pub fn dispatch(command: &Command, g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    match command {
        Command::GenCorpus { spec } => gen_corpus(spec.as_deref(), g, run),
        Command::Train { corpus, steps, keep } => train_cmd(corpus, *steps, keep, g, run),
        Command::HeadFit { checkpoint, corpus, tol, max_iters, cold } => {
            head_fit(checkpoint, corpus, *tol, *max_iters, *cold, g, run)
        }
        Command::Alpha { checkpoint, corpus, grid } => alpha(checkpoint, corpus, grid, g, run),
        Command::VerifyRep { checkpoint, corpus, max_error } => verify_rep(checkpoint, corpus, *max_error, g, run),
        Command::Counterfactual { checkpoint, corpus, tokens, pick, min_support, max_support, approximate } => {
            counterfactual(checkpoint, corpus, tokens, (*pick, *min_support, *max_support), *approximate, g, run)
        }
        Command::Graph { checkpoint, corpus, top, weighted } => graph(checkpoint, corpus, *top, *weighted, g, run),
        Command::Ablate { checkpoint, corpus, methods, regimes, seeds, warm_start } => {
            ablate(checkpoint, corpus, methods, regimes, seeds, *warm_start, g, run)
        }
        Command::Sweep { corpus, knob, grid } => sweep(corpus, knob, grid, g, run),
        Command::PredictSupport { gold, at, corpus, features } => predict_support(gold, at, corpus, features, g, run),
        Command::Probe { checkpoint, corpus, random_control } => probe(checkpoint, corpus, *random_control, g, run),
        Command::Report { from } => crate::report::emit(from, run),
        Command::Replay { .. } => bail!("replay cannot be nested"),
    }
}

pub fn demo_spec(g: &Globals) -> SyntheticSpec {
    SyntheticSpec { seed: g.seed, ..g.config.synthetic.clone() }
}

fn load_corpus(args: &CorpusArgs, vocab: usize, context: usize, g: &Globals) -> anyhow::Result<Corpus> {
    match &args.corpus {
        Some(path) => Ok(Corpus::ingest(path, vocab, context, args.categories.as_deref())?),
        None => {
            let spec = demo_spec(g);
            if spec.vocab_size != vocab || spec.context != context {
                bail!(
                    "demo corpus has vocab {} / context {}, model expects {vocab} / {context}",
                    spec.vocab_size,
                    spec.context
                );
            }
            Ok(generate_synthetic(&spec)?.corpus)
        }
    }
}

fn load_snapshot(path: &Path, args: &CorpusArgs, g: &Globals) -> anyhow::Result<(ModelSnapshot, Corpus)> {
    let snap = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let corpus = load_corpus(args, snap.config.vocab_size, snap.config.context, g)?;
    snap.check_corpus(&corpus)?;
    Ok((snap, corpus))
}

fn split_of(snap: &ModelSnapshot, corpus: &Corpus, g: &Globals) -> anyhow::Result<DataSplit> {
    let spec = snap.split.clone().unwrap_or_else(|| g.config.schedule.split.clone());
    Ok(DataSplit::by_documents(corpus, &spec)?)
}

fn short(hash: &str) -> String {
    hash.chars().take(12).collect()
}

fn gen_corpus(spec: Option<&Path>, g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let spec = match spec {
        Some(p) => SyntheticSpec { seed: g.seed, ..SyntheticSpec::load(p)? },
        None => demo_spec(g),
    };
    let s = generate_synthetic(&spec)?;
    run.write("corpus.txt", s.corpus.to_text().as_bytes())?;
    run.write("categories.txt", s.corpus.categories_text().unwrap_or_default().as_bytes())?;
    run.write("synthetic.toml", spec.to_toml().as_bytes())?;
    #[derive(Serialize)]
    struct Row<'a> {
        token: usize,
        class: &'a str,
    }
    let rows: Vec<Row> = s.token_classes.iter().enumerate().map(|(token, class)| Row { token, class }).collect();
    run.write_csv("token_classes.csv", &rows)?;
    Ok(json!({ "documents": s.corpus.docs().len(), "samples": s.corpus.len(), "fingerprint": s.corpus.fingerprint() }))
}

fn train_cmd(args: &CorpusArgs, steps: Option<usize>, keep: &[usize], g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let config = g.config.model.clone();
    let corpus = load_corpus(args, config.vocab_size, config.context, g)?;
    let mut schedule = g.config.schedule.clone();
    if let Some(s) = steps {
        schedule.steps = s;
    }
    schedule.checkpoints.extend_from_slice(keep);
    schedule.checkpoints.sort_unstable();
    schedule.checkpoints.dedup();
    let out = train(&corpus, &config, &schedule)?;
    for snap in &out.checkpoints {
        let name = format!("checkpoints/step-{:06}.ckpt", snap.step);
        run.write(&name, &checkpoint::to_bytes(snap))?;
    }
    run.write("best.ckpt", &checkpoint::to_bytes(&out.best))?;
    run.write("last.ckpt", &checkpoint::to_bytes(&out.last))?;
    run.write_csv("curve.csv", &out.curve)?;
    Ok(json!({
        "samples": corpus.len(),
        "best_step": out.best.step,
        "best_val_loss": out.best.val_loss,
        "last_step": out.last.step,
        "diverged_at": out.diverged_at,
    }))
}

fn fit_config(g: &Globals) -> HeadFitConfig {
    HeadFitConfig { lambda: g.lambda, ..g.config.head_fit }
}

fn head_fit(
    path: &Path,
    args: &CorpusArgs,
    tol: Option<f64>,
    max_iters: Option<usize>,
    cold: bool,
    g: &Globals,
    run: &mut Run,
) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let split = split_of(&snap, &corpus, g)?;
    let mut cfg = fit_config(g);
    if let Some(t) = tol {
        cfg.tolerance = t;
    }
    if let Some(m) = max_iters {
        cfg.max_iters = m;
    }
    let (fitted, fit) = head_only_retrain(&snap, &corpus, &split.train, &cfg, !cold)?;
    run.write("head.ckpt", &checkpoint::to_bytes(&fitted))?;
    #[derive(Serialize)]
    struct Row {
        samples: usize,
        lambda: f64,
        tolerance: f64,
        loss: f64,
        grad_max_norm: f64,
        iterations: usize,
        evaluations: usize,
        converged: bool,
    }
    let row = Row {
        samples: split.train.len(),
        lambda: cfg.lambda,
        tolerance: cfg.tolerance,
        loss: fit.loss,
        grad_max_norm: fit.grad_max_norm,
        iterations: fit.iterations,
        evaluations: fit.evaluations,
        converged: fit.converged,
    };
    run.write_csv("fit.csv", &[&row])?;
    Ok(serde_json::to_value(HeadFitSummary {
        converged: fit.converged,
        grad_max_norm: fit.grad_max_norm,
        iterations: fit.iterations,
        loss: fit.loss,
    })?)
}

#[derive(Serialize)]
struct HeadFitSummary {
    converged: bool,
    grad_max_norm: f64,
    iterations: usize,
    loss: f64,
}

fn index_for(snap: &ModelSnapshot, corpus: &Corpus, g: &Globals) -> anyhow::Result<(DataSplit, SupportIndex)> {
    let split = split_of(snap, corpus, g)?;
    let index = compute_alphas(snap, corpus, &split.train, g.tau, g.gamma)?;
    Ok((split, index))
}

/// Frequency buckets (by occurrences as a training target).
pub const FREQUENCY_BUCKETS: [(&str, usize, usize); 4] =
    [("1-2", 1, 2), ("3-9", 3, 9), ("10-49", 10, 49), ("50+", 50, usize::MAX)];

fn alpha(path: &Path, args: &CorpusArgs, grid: &[f64], g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let (split, index) = index_for(&snap, &corpus, g)?;
    run.write("support.tsv", index.index_text().as_bytes())?;
    run.write("summary.csv", index.summary_csv(Some(&corpus))?.as_bytes())?;

    let counts = corpus.target_counts(&split.train);
    #[derive(Serialize, Default, Clone)]
    struct TokenRow {
        token: usize,
        occurrences: usize,
        support_samples: usize,
        type1: usize,
        type2: usize,
    }
    let mut tokens: Vec<TokenRow> =
        (0..snap.config.vocab_size).map(|t| TokenRow { token: t, occurrences: counts[t], ..Default::default() }).collect();
    for a in &index.annotations {
        if a.is_support() {
            tokens[a.target as usize].support_samples += 1;
        }
        for e in &a.entries {
            match e.kind {
                SupportType::Type1 => tokens[e.token as usize].type1 += 1,
                SupportType::Type2 => tokens[e.token as usize].type2 += 1,
            }
        }
    }
    tokens.retain(|r| r.occurrences > 0 || r.type1 + r.type2 > 0);
    run.write_csv("tokens.csv", &tokens)?;

    #[derive(Serialize, Default)]
    struct CategoryRow {
        category: String,
        samples: usize,
        support: usize,
        non_support: usize,
        memorized: usize,
    }
    let mut cats: BTreeMap<String, CategoryRow> = BTreeMap::new();
    for a in &index.annotations {
        let name = corpus.category(a.id).unwrap_or("untagged").to_string();
        let row = cats.entry(name.clone()).or_insert_with(|| CategoryRow { category: name, ..Default::default() });
        row.samples += 1;
        if a.is_support() {
            row.support += 1;
        } else {
            row.non_support += 1;
        }
        if a.is_memorized(g.gamma) {
            row.memorized += 1;
        }
    }
    run.write_csv("categories.csv", &cats.into_values().collect::<Vec<_>>())?;
    run.write_csv("threshold.csv", &threshold_sweep(&index.annotations, grid)?)?;

    #[derive(Serialize)]
    struct FreqRow {
        bucket: &'static str,
        samples: usize,
        support: usize,
        support_rate: f64,
    }
    let freq: Vec<FreqRow> = FREQUENCY_BUCKETS
        .iter()
        .map(|&(bucket, lo, hi)| {
            let members: Vec<_> = index
                .annotations
                .iter()
                .filter(|a| (lo..=hi).contains(&counts[a.target as usize]))
                .collect();
            let support = members.iter().filter(|a| a.is_support()).count();
            FreqRow {
                bucket,
                samples: members.len(),
                support,
                support_rate: if members.is_empty() { f64::NAN } else { support as f64 / members.len() as f64 },
            }
        })
        .collect();
    run.write_csv("frequency.csv", &freq)?;

    let violations = index.claim1_violations(g.gamma);
    let max_type2 = index
        .annotations
        .iter()
        .map(|a| a.entries.iter().filter(|e| e.kind == SupportType::Type2).count())
        .max()
        .unwrap_or(0);
    if g.tau >= 0.5 && g.gamma >= 0.5 && !violations.is_empty() {
        bail!(nwp_core::Error::Invariant(format!(
            "memorized samples must be non-support: {} violations",
            violations.len()
        )));
    }
    Ok(json!({
        "checkpoint": short(&index.checkpoint),
        "samples": index.len(),
        "support": index.support_count(),
        "support_proportion": index.support_count() as f64 / index.len().max(1) as f64,
        "memorized": index.memorized_ids(g.gamma)?.len(),
        "claim1_violations": violations.len(),
        "max_type2_per_sample": max_type2,
    }))
}

fn verify_rep(path: &Path, args: &CorpusArgs, max_error: f64, g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let split = split_of(&snap, &corpus, g)?;
    let check = verify_representer(&snap, &corpus, &split.train, Some(g.lambda))?;
    #[derive(Serialize)]
    struct Row {
        token: usize,
        relative_error: f64,
    }
    let rows: Vec<Row> =
        check.relative_error.iter().enumerate().map(|(token, &relative_error)| Row { token, relative_error }).collect();
    run.write_csv("verify.csv", &rows)?;
    println!("max relative reconstruction error {:e} (token {})", check.max_relative_error, check.worst_token);
    if !(check.max_relative_error <= max_error) {
        bail!(nwp_core::Error::Invariant(format!(
            "representer identity: max relative error {:e} exceeds {max_error:e}",
            check.max_relative_error
        )));
    }
    Ok(json!({
        "max_relative_error": check.max_relative_error,
        "worst_token": check.worst_token,
        "samples": check.samples,
        "lambda": check.lambda,
    }))
}

/// Tokens whose support set size lies in `[lo, hi]` and contains both
/// support types, ascending by id.
pub fn counterfactual_candidates(index: &SupportIndex, lo: usize, hi: usize) -> Vec<TokenId> {
    index
        .by_token()
        .into_iter()
        .filter(|(_, list)| {
            (lo..=hi).contains(&list.len())
                && list.iter().any(|x| x.1 == SupportType::Type1)
                && list.iter().any(|x| x.1 == SupportType::Type2)
        })
        .map(|(v, _)| v)
        .collect()
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct CounterfactualRow {
    pub checkpoint: String,
    pub token: TokenId,
    pub selector: String,
    pub seed: u64,
    pub removed: usize,
    pub full_loss_before: f64,
    pub full_loss_after: f64,
    pub subset_loss_before: f64,
    pub subset_loss_after: f64,
    pub subset_p_before: f64,
    pub subset_p_after: f64,
    pub subset_size: usize,
    pub kernel_nonnegative: f64,
    pub premise_met: bool,
}

fn counterfactual(
    path: &Path,
    args: &CorpusArgs,
    tokens: &[u32],
    (pick, lo, hi): (usize, usize, usize),
    approximate: bool,
    g: &Globals,
    run: &mut Run,
) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let (split, index) = index_for(&snap, &corpus, g)?;
    let mode = if approximate { Mode::Approximate } else { Mode::Exact };
    let sub = Subtractor::new(&snap, &corpus, &split.train, mode)?;
    let chosen: Vec<TokenId> = if tokens.is_empty() {
        counterfactual_candidates(&index, lo, hi).into_iter().take(pick).collect()
    } else {
        tokens.to_vec()
    };
    let mut rows = Vec::new();
    for &v in &chosen {
        for sel in [
            Selector::Support { token: v },
            Selector::Type1 { token: v },
            Selector::Type2 { token: v },
            Selector::Random { token: v, seed: g.seed },
        ] {
            let r = run_counterfactual(&sub, &index, v, &sel)?;
            rows.push(CounterfactualRow {
                checkpoint: short(&index.checkpoint),
                token: v,
                selector: r.selector,
                seed: g.seed,
                removed: r.removed,
                full_loss_before: r.before.full_loss,
                full_loss_after: r.after.full_loss,
                subset_loss_before: r.before.subset_loss,
                subset_loss_after: r.after.subset_loss,
                subset_p_before: r.before.subset_mean_p,
                subset_p_after: r.after.subset_mean_p,
                subset_size: r.before.subset_size,
                kernel_nonnegative: r.kernel_nonnegative,
                premise_met: r.kernel_nonnegative >= KERNEL_PREMISE,
            });
        }
    }
    run.write_csv("counterfactual.csv", &rows)?;
    Ok(json!({ "tokens": chosen, "scale": sub.scale(), "rows": rows.len() }))
}

fn graph(path: &Path, args: &CorpusArgs, top: usize, weighted: bool, g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let (_, index) = index_for(&snap, &corpus, g)?;
    let graph = build_graph(&index);
    #[derive(Serialize)]
    struct Edge {
        source: TokenId,
        target: TokenId,
        multiplicity: usize,
    }
    let edges: Vec<Edge> =
        graph.edges.iter().map(|(&(source, target), &multiplicity)| Edge { source, target, multiplicity }).collect();
    run.write_csv("edges.csv", &edges)?;
    run.write_csv("degrees.csv", &graph.degrees(weighted))?;
    #[derive(Serialize)]
    struct Top {
        direction: &'static str,
        rank: usize,
        token: TokenId,
        degree: usize,
    }
    let stats = graph.degree_stats(top, weighted)?;
    let mut rows = Vec::new();
    for (direction, list) in [("in", &stats.top_in), ("out", &stats.top_out)] {
        rows.extend(list.iter().enumerate().map(|(k, &(token, degree))| Top { direction, rank: k + 1, token, degree }));
    }
    run.write_csv("top.csv", &rows)?;
    Ok(json!({ "nodes": graph.nodes().len(), "edges": graph.edge_count() }))
}

fn parse_regime(s: &str) -> anyhow::Result<Regime> {
    match s {
        "heads-only" => Ok(Regime::HeadsOnly),
        "full-model" => Ok(Regime::FullModel),
        other => bail!(nwp_core::Error::InvalidArgument(format!("unknown regime {other}"))),
    }
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct AblationRow {
    pub checkpoint: String,
    pub corpus: String,
    pub method: Method,
    pub regime: Regime,
    pub seed: u64,
    pub tau: f64,
    pub retained: usize,
    pub original: usize,
    pub test_loss: f64,
    pub new_support_before: usize,
    pub new_support_after: usize,
    pub original_support_before: usize,
    pub original_support_after: usize,
    pub support_loss_after: f64,
    pub flagged: bool,
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    path: &Path,
    args: &CorpusArgs,
    methods: &[String],
    regimes: &[String],
    seeds: &[u64],
    warm_start: bool,
    g: &Globals,
    run: &mut Run,
) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let (split, index) = index_for(&snap, &corpus, g)?;
    let methods = methods.iter().map(|m| Method::parse(m)).collect::<nwp_core::Result<Vec<_>>>()?;
    let regimes = regimes.iter().map(|r| parse_regime(r)).collect::<anyhow::Result<Vec<_>>>()?;
    let (ckpt, fingerprint) = (short(&index.checkpoint), short(&corpus.fingerprint()));
    let ctx = AblationContext::new(&corpus, &snap, split, index, fit_config(g), g.config.schedule.clone())?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for &regime in &regimes {
            for &method in &methods {
                let r = ctx.run(&AblationPlan { method, regime, seed, warm_start })?;
                rows.push(AblationRow {
                    checkpoint: ckpt.clone(),
                    corpus: fingerprint.clone(),
                    method: r.method,
                    regime: r.regime,
                    seed: r.seed,
                    tau: r.tau,
                    retained: r.retained,
                    original: r.original,
                    test_loss: r.test_loss,
                    new_support_before: r.new_support_before,
                    new_support_after: r.new_support_after,
                    original_support_before: r.original_support_before,
                    original_support_after: r.original_support_after,
                    support_loss_after: r.support_loss_after,
                    flagged: r.flagged,
                });
            }
        }
    }
    run.write_csv("ablation.csv", &rows)?;
    Ok(json!({ "rows": rows.len() }))
}

fn sweep(args: &CorpusArgs, knob: &str, grid: &[f64], g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let knob = match knob {
        "data-size" => Knob::DataSize,
        "weight-decay" => Knob::WeightDecay,
        "embedding-dropout" => Knob::EmbeddingDropout,
        other => bail!(nwp_core::Error::InvalidArgument(format!("unknown knob {other}"))),
    };
    let config = &g.config.model;
    let corpus = load_corpus(args, config.vocab_size, config.context, g)?;
    let points = nwp_core::ablation::sweep(&corpus, config, &g.config.schedule, knob, grid, g.tau)?;
    run.write_csv("sweep.csv", &points)?;
    Ok(json!({ "points": points.len() }))
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct GridRow {
    pub panel: String,
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub feature: String,
    pub classifier: String,
    pub train_fraction: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub majority_baseline: f64,
    pub best_epoch: usize,
    pub test_size: usize,
    pub flag: String,
}

impl GridRow {
    fn from_cell(checkpoint: &str, c: GridCell) -> Self {
        let r = c.report.as_ref();
        GridRow {
            panel: c.panel,
            checkpoint: checkpoint.to_string(),
            checkpoint_step: c.checkpoint_step,
            feature: c.feature,
            classifier: c.classifier,
            train_fraction: c.train_fraction,
            train_accuracy: r.map_or(f64::NAN, |r| r.train_accuracy),
            val_accuracy: r.map_or(f64::NAN, |r| r.val_accuracy),
            test_accuracy: r.map_or(f64::NAN, |r| r.test_accuracy),
            majority_baseline: r.map_or(f64::NAN, |r| r.majority_baseline),
            best_epoch: r.map_or(0, |r| r.best_epoch),
            test_size: r.map_or(0, |r| r.test_size),
            flag: c.flag,
        }
    }
}

fn parse_feature(s: &str, g: &Globals) -> anyhow::Result<FeatureKind> {
    Ok(match s {
        "last-hidden" => FeatureKind::LastHidden,
        "all-hidden" => FeatureKind::AllHidden,
        "projected-gradient" => {
            FeatureKind::ProjectedGradient { dim: g.config.supportness.projection_dim, seed: g.seed }
        }
        other => bail!(nwp_core::Error::InvalidArgument(format!("unknown feature kind {other}"))),
    })
}

fn predict_support(
    gold_path: &Path,
    at: &[std::path::PathBuf],
    args: &CorpusArgs,
    features: &[String],
    g: &Globals,
    run: &mut Run,
) -> anyhow::Result<Value> {
    let sc = &g.config.supportness;
    let (gold, corpus) = load_snapshot(gold_path, args, g)?;
    let split = split_of(&gold, &corpus, g)?;
    let ids = labeled_subset(&split.train, sc.samples, g.seed);
    let gold_index = compute_alphas(&gold, &corpus, &ids, g.tau, g.gamma)?;
    let labels: Vec<u8> = gold_index.annotations.iter().map(|a| a.is_support() as u8).collect();
    let split_spec = SplitSpec::new([0.8, 0.1, 0.1], g.seed)?;
    let kinds = features.iter().map(|f| parse_feature(f, g)).collect::<anyhow::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        bail!(nwp_core::Error::InvalidArgument("no feature kinds requested".into()));
    }
    let mut snaps = Vec::new();
    if at.is_empty() {
        snaps.push(gold.clone());
    }
    for p in at {
        let s = checkpoint::load(p)?;
        s.check_corpus(&corpus)?;
        snaps.push(s);
    }
    let classifier = |hidden: Vec<usize>| ClassifierSpec {
        hidden,
        epochs: sc.epochs,
        batch: sc.batch,
        lr: sc.lr,
        seed: g.seed,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut first: Option<(String, u64, String, LabeledFeatureSet)> = None;
    for snap in &snaps {
        let hash = snap.params.hash();
        for kind in &kinds {
            let phi = extract_features(snap, &corpus, &ids, kind)?;
            let header = FeatureCacheHeader {
                checkpoint: hash.clone(),
                spec: kind.fingerprint(),
                rows: phi.rows(),
                dim: phi.cols(),
                ids: ids.clone(),
            };
            let name = format!("features/{}-{}.bin", short(&hash), kind.name());
            std::fs::create_dir_all(run.path("features"))?;
            save_features(&run.path(&name), &header, &phi)?;
            run.record(&name);
            let set = LabeledFeatureSet::new(ids.clone(), phi, labels.clone(), &split_spec)?;
            for spec in [classifier(Vec::new()), classifier(vec![sc.mlp_width])] {
                let cell = run_cell("stage", snap.step as u64, kind.name(), &set, &spec, 1.0)?;
                rows.push(GridRow::from_cell(&short(&hash), cell));
            }
            if first.is_none() {
                first = Some((short(&hash), snap.step as u64, kind.name().to_string(), set));
            }
        }
    }
    let (ckpt, step, feature, set) = first.expect("at least one checkpoint and feature");
    for &w in &sc.widths {
        let cell = run_cell("capacity", step, &feature, &set, &classifier(vec![w]), 1.0)?;
        rows.push(GridRow::from_cell(&ckpt, cell));
    }
    for &f in &sc.fractions {
        let cell = run_cell("data-size", step, &feature, &set, &classifier(vec![sc.mlp_width]), f)?;
        rows.push(GridRow::from_cell(&ckpt, cell));
    }
    let scores: Vec<Vec<f64>> = gold_index.annotations.iter().map(|a| vec![a.score]).collect();
    let sanity = LabeledFeatureSet::new(ids.clone(), Tensor::from_rows(&scores)?, labels.clone(), &split_spec)?;
    let cell = run_threshold_cell("sanity", gold.step as u64, "score", &sanity)?;
    rows.push(GridRow::from_cell(&short(&gold_index.checkpoint), cell));
    run.write_csv("grid.csv", &rows)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok(json!({ "samples": ids.len(), "support": positives, "cells": rows.len() }))
}

fn probe(path: &Path, args: &CorpusArgs, random_control: bool, g: &Globals, run: &mut Run) -> anyhow::Result<Value> {
    let (snap, corpus) = load_snapshot(path, args, g)?;
    let split = split_of(&snap, &corpus, g)?;
    let before = snap.params.hash();
    let cfg = ProbeConfig { fit: fit_config(g), tau: g.tau, gamma: g.gamma };
    let mut reports = probe_all(&snap, &corpus, &split.train, &cfg)?;
    if random_control {
        let r = probe_random(&corpus, &split.train, snap.config.hidden, snap.config.vocab_size, g.seed, &cfg)?;
        reports.insert(0, r);
    }
    if snap.params.hash() != before {
        bail!(nwp_core::Error::Invariant("probe heads must not alter the base snapshot".into()));
    }
    run.write("probe.csv", probe_csv(&reports, &corpus.category_names())?.as_bytes())?;
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    if g.tau >= 0.5 && g.gamma >= 0.5 && violations > 0 {
        bail!(nwp_core::Error::Invariant(format!("memorized samples must be non-support: {violations} violations")));
    }
    Ok(json!({
        "layers": reports.iter().map(|r| json!({
            "layer": r.layer, "non_support": r.non_support, "memorized": r.memorized,
            "violations": r.violations, "converged": r.converged
        })).collect::<Vec<_>>()
    }))
}
