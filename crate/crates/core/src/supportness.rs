//! Predicting support vs non-support from checkpoint features.
//!
//! Features are the last hidden vector, all hidden vectors concatenated, or
//! the per-sample gradient of `p(y|x)` over every parameter projected by a
//! seeded dense sign matrix. Classifiers are logistic regression or a small
//! MLP trained with Adam, selected on validation accuracy.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hex, Corpus, SplitSpec, SplitTag};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ModelSnapshot};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::stream;
use crate::tape::GradTape;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    LastHidden,
    AllHidden,
    ProjectedGradient { dim: usize, seed: u64 },
}

impl FeatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::LastHidden => "last-hidden",
            FeatureKind::AllHidden => "all-hidden",
            FeatureKind::ProjectedGradient { .. } => "projected-gradient",
        }
    }

    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("feature kind serializes")
    }
}

/// Dense `P × k` matrix with entries `±1/√k`, drawn 64 signs per word from
/// the `projection` stream.
#[derive(Debug, Clone)]
pub struct SignProjection {
    pub input_dim: usize,
    pub dim: usize,
    pub seed: u64,
    matrix: Vec<f64>,
}

impl SignProjection {
    pub fn new(input_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("projection dimensions must be >= 1".into()));
        }
        let mut rng = stream(seed, "projection");
        let v = 1.0 / (dim as f64).sqrt();
        let total = input_dim * dim;
        let mut matrix = Vec::with_capacity(total);
        while matrix.len() < total {
            let bits: u64 = rng.gen();
            for b in 0..64.min(total - matrix.len()) {
                matrix.push(if (bits >> b) & 1 == 1 { v } else { -v });
            }
        }
        Ok(SignProjection { input_dim, dim, seed, matrix })
    }

    /// SHA-256 of the matrix values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.matrix {
            h.update(x.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Projects the rows of `x` (`n × P`).
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!("projection expects {} columns, got {}", self.input_dim, x.cols())));
        }
        let (n, p, k) = (x.rows(), self.input_dim, self.dim);
        let mut out = vec![0.0; n * k];
        gemm(n, p, k, x.data(), p as isize, 1, &self.matrix, k as isize, 1, &mut out, 0.0);
        Tensor::new(vec![n, k], out)
    }
}

/// Flattened `∇_θ p(y|x)` over every parameter in canonical order.
pub fn target_prob_gradient(snapshot: &ModelSnapshot, corpus: &Corpus, id: usize) -> Result<Vec<f64>> {
    let prefix = corpus.prefix(id);
    let mut tape = GradTape::new();
    let vars = snapshot.params.register(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, &snapshot.config, prefix, None, false);
    let p = tape.target_prob(out.logits, prefix.len() - 1, corpus.target(id))?;
    let grads = tape.backward(p)?;
    let mut flat = Vec::with_capacity(snapshot.params.num_scalars());
    for (slot, t) in snapshot.params.tensors().iter().enumerate() {
        match grads.get(slot) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    Ok(flat)
}

const GRAD_BATCH: usize = 256;

pub fn extract_features(snapshot: &ModelSnapshot, corpus: &Corpus, ids: &[usize], kind: &FeatureKind) -> Result<Tensor> {
    snapshot.check_corpus(corpus)?;
    match kind {
        FeatureKind::LastHidden => Ok(snapshot.representations(corpus, ids, &[snapshot.config.layers])?.remove(0)),
        FeatureKind::AllHidden => {
            let layers: Vec<usize> = (1..=snapshot.config.layers).collect();
            let parts = snapshot.representations(corpus, ids, &layers)?;
            let d = snapshot.config.hidden;
            let mut out = Tensor::zeros(&[ids.len(), d * layers.len()]);
            for r in 0..ids.len() {
                let row = out.row_mut(r);
                for (j, p) in parts.iter().enumerate() {
                    row[j * d..(j + 1) * d].copy_from_slice(p.row(r));
                }
            }
            Ok(out)
        }
        FeatureKind::ProjectedGradient { dim, seed } => {
            let proj = SignProjection::new(snapshot.params.num_scalars(), *dim, *seed)?;
            projected_gradients(snapshot, corpus, ids, &proj)
        }
    }
}

pub fn projected_gradients(
    snapshot: &ModelSnapshot,
    corpus: &Corpus,
    ids: &[usize],
    proj: &SignProjection,
) -> Result<Tensor> {
    let p = snapshot.params.num_scalars();
    if proj.input_dim != p {
        return Err(Error::Shape(format!("projection input {} vs {p} parameters", proj.input_dim)));
    }
    let mut out = Tensor::zeros(&[ids.len(), proj.dim]);
    for (b, chunk) in ids.chunks(GRAD_BATCH).enumerate() {
        let grads: Vec<Result<Vec<f64>>> =
            chunk.par_iter().map(|&id| target_prob_gradient(snapshot, corpus, id)).collect();
        let mut data = Vec::with_capacity(chunk.len() * p);
        for g in grads {
            data.extend(g?);
        }
        let z = proj.project(&Tensor::new(vec![chunk.len(), p], data)?)?;
        for r in 0..chunk.len() {
            out.row_mut(b * GRAD_BATCH + r).copy_from_slice(z.row(r));
        }
    }
    Ok(out)
}

/// Seeded uniform subset of `pool` of size `samples` (all of it if smaller),
/// ascending.
pub fn labeled_subset(pool: &[usize], samples: usize, seed: u64) -> Vec<usize> {
    if samples >= pool.len() {
        return pool.to_vec();
    }
    let mut rng = stream(seed, "supportness-samples");
    let mut ids: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), samples).into_iter().map(|j| pool[j]).collect();
    ids.sort_unstable();
    ids
}

/// Features, 0/1 labels and split tags for one classifier task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    pub ids: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub tags: Vec<SplitTag>,
}

impl LabeledFeatureSet {
    /// Sample-level split: tags are a pure function of `(sample id, seed)`.
    pub fn new(ids: Vec<usize>, features: Tensor, labels: Vec<u8>, split: &SplitSpec) -> Result<Self> {
        if features.rows() != ids.len() || labels.len() != ids.len() {
            return Err(Error::Shape("features, labels and ids disagree in length".into()));
        }
        split.validate()?;
        let tags = split.assign(&ids);
        Ok(LabeledFeatureSet { ids, features, labels, tags })
    }

    pub fn rows(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.ids.len()).filter(|&k| self.tags[k] == tag).collect()
    }

    /// Keeps a seeded uniform fraction of the train rows (val/test intact).
    pub fn subsample_train(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
        }
        let train = self.rows(SplitTag::Train);
        let keep = ((train.len() as f64 * fraction).round() as usize).max(1);
        let mut rng = stream(seed, "classifier-subsample");
        let chosen: std::collections::BTreeSet<usize> =
            rand::seq::index::sample(&mut rng, train.len(), keep).into_iter().map(|j| train[j]).collect();
        let rows: Vec<usize> =
            (0..self.ids.len()).filter(|k| self.tags[*k] != SplitTag::Train || chosen.contains(k)).collect();
        Ok(LabeledFeatureSet {
            ids: rows.iter().map(|&k| self.ids[k]).collect(),
            features: self.features.gather_rows(&rows),
            labels: rows.iter().map(|&k| self.labels[k]).collect(),
            tags: rows.iter().map(|&k| self.tags[k]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Tanh,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    /// Empty for a linear (logistic) classifier.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            hidden: Vec::new(),
            activation: Activation::Tanh,
            epochs: 60,
            batch: 128,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ClassifierSpec {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn mlp(width: usize) -> Self {
        ClassifierSpec { hidden: vec![width], ..Default::default() }
    }

    pub fn name(&self) -> String {
        if self.hidden.is_empty() {
            "linear".into()
        } else {
            format!("mlp-{}", self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Test accuracy of always predicting the train-majority class.
    pub majority_baseline: f64,
    pub best_epoch: usize,
    pub test_size: usize,
}

pub struct Classifier {
    spec: ClassifierSpec,
    params: Vec<Tensor>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Classifier {
    fn logits(&self, x: &Tensor) -> Vec<f64> {
        let mut tape = GradTape::new();
        let out = self.forward(&mut tape, &self.standardize(x));
        tape.value(out).data().to_vec()
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    fn forward(&self, tape: &mut GradTape, x: &Tensor) -> crate::tape::Var {
        let vars: Vec<_> = self.params.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let mut h = tape.constant(x.clone());
        let layers = vars.len() / 2;
        for l in 0..layers {
            h = tape.matmul(h, vars[2 * l]);
            h = tape.add_row(h, vars[2 * l + 1]);
            if l + 1 < layers {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Gelu => tape.gelu(h),
                };
            }
        }
        h
    }

    pub fn predict(&self, x: &Tensor) -> Vec<u8> {
        self.logits(x).iter().map(|&z| (z >= 0.0) as u8).collect()
    }
}

fn accuracy(pred: &[u8], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

pub fn train_classifier(set: &LabeledFeatureSet, spec: &ClassifierSpec) -> Result<(Classifier, ClassifierReport)> {
    let train = set.rows(SplitTag::Train);
    let val = set.rows(SplitTag::Valid);
    let test = set.rows(SplitTag::Test);
    let positives = train.iter().filter(|&&k| set.labels[k] == 1).count();
    if train.is_empty() || positives == 0 || positives == train.len() {
        return Err(Error::InvalidArgument("classifier train split has a single class".into()));
    }
    if spec.epochs == 0 || spec.batch == 0 {
        return Err(Error::InvalidArgument("epochs and batch must be >= 1".into()));
    }
    let d = set.features.cols();
    let xtr = set.features.gather_rows(&train);
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..xtr.rows() {
        for (m, v) in mean.iter_mut().zip(xtr.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= xtr.rows() as f64);
    for r in 0..xtr.rows() {
        for ((s, v), m) in var.iter_mut().zip(xtr.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / xtr.rows() as f64).sqrt().max(1e-12)).collect();

    let mut rng = stream(spec.seed, "classifier-init");
    let mut widths = vec![d];
    widths.extend(&spec.hidden);
    widths.push(1);
    let mut params = Vec::new();
    for w in widths.windows(2) {
        params.push(crate::rng::normal_tensor(&mut rng, &[w[0], w[1]], 1.0 / (w[0] as f64).sqrt()));
        params.push(Tensor::zeros(&[w[1]]));
    }
    let mut clf = Classifier { spec: spec.clone(), params, mean, std };
    let xs = clf.standardize(&set.features);
    let labels_f: Vec<f64> = set.labels.iter().map(|&l| l as f64).collect();
    let mut opt = OptimizerState::new(OptimizerKind::adamw(), spec.lr, spec.weight_decay, &clf.params)?;
    let mut order_rng = stream(spec.seed, "classifier-order");
    let mut order = train.clone();

    let eval = |c: &Classifier, rows: &[usize]| -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let mut tape = GradTape::new();
        let out = c.forward(&mut tape, &xs.gather_rows(rows));
        let pred: Vec<u8> = tape.value(out).data().iter().map(|&z| (z >= 0.0) as u8).collect();
        accuracy(&pred, &rows.iter().map(|&k| set.labels[k]).collect::<Vec<_>>())
    };
    let select_rows = if val.is_empty() { &train } else { &val };
    let mut best = (eval(&clf, select_rows), 0usize, clf.params.clone());
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(spec.batch) {
            let mut tape = GradTape::new();
            let out = clf.forward(&mut tape, &xs.gather_rows(batch));
            let y: Vec<f64> = batch.iter().map(|&k| labels_f[k]).collect();
            let loss = tape.bce_logits(out, &y);
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = grads.into_slots().into_iter().map(|t| t.expect("classifier params")).collect();
            opt.step(&mut clf.params, &g)?;
        }
        let acc = eval(&clf, select_rows);
        if acc > best.0 {
            best = (acc, epoch, clf.params.clone());
        }
    }
    clf.params = best.2;
    let majority = (2 * positives >= train.len()) as u8;
    let test_labels: Vec<u8> = test.iter().map(|&k| set.labels[k]).collect();
    let report = ClassifierReport {
        train_accuracy: eval(&clf, &train),
        val_accuracy: eval(&clf, &val),
        test_accuracy: eval(&clf, &test),
        majority_baseline: accuracy(&vec![majority; test.len()], &test_labels),
        best_epoch: best.1,
        test_size: test.len(),
    };
    Ok((clf, report))
}

/// Header of a cached feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheHeader {
    pub checkpoint: String,
    pub spec: String,
    pub rows: usize,
    pub dim: usize,
    pub ids: Vec<usize>,
}

const FEAT_MAGIC: &[u8; 8] = b"NWPFEAT\0";

pub fn save_features(path: &Path, header: &FeatureCacheHeader, features: &Tensor) -> Result<()> {
    if features.rows() != header.rows || features.cols() != header.dim || header.ids.len() != header.rows {
        return Err(Error::Shape("feature cache header does not match the matrix".into()));
    }
    let mut out = Vec::with_capacity(64 + features.len() * 8);
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    let h = serde_json::to_vec(header)?;
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<(FeatureCacheHeader, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Corrupt { path: path.to_path_buf(), message: m.into() };
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != FEAT_MAGIC {
        return Err(corrupt("not a feature cache"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    if u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) != 1 {
        return Err(corrupt("unsupported version"));
    }
    let hl = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    if body.len() < 20 + hl {
        return Err(corrupt("truncated header"));
    }
    let header: FeatureCacheHeader = serde_json::from_slice(&body[20..20 + hl])?;
    let raw = &body[20 + hl..];
    if raw.len() != header.rows * header.dim * 8 {
        return Err(corrupt("matrix size does not match header"));
    }
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let t = Tensor::new(vec![header.rows, header.dim], data)?;
    Ok((header, t))
}

/// One accuracy-grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub panel: String,
    pub checkpoint_step: u64,
    pub feature: String,
    pub classifier: String,
    pub train_fraction: f64,
    pub report: Option<ClassifierReport>,
    /// Why the cell has no report (for example a single-class train split).
    pub flag: String,
}

pub fn run_cell(
    panel: &str,
    step: u64,
    feature: &str,
    set: &LabeledFeatureSet,
    spec: &ClassifierSpec,
    fraction: f64,
) -> Result<GridCell> {
    let sub = if fraction < 1.0 { set.subsample_train(fraction, spec.seed)? } else { set.clone() };
    let (report, flag) = match train_classifier(&sub, spec) {
        Ok((_, r)) => (Some(r), String::new()),
        Err(Error::InvalidArgument(m)) if m.contains("single class") => (None, "degenerate".to_string()),
        Err(e) => return Err(e),
    };
    Ok(GridCell {
        panel: panel.to_string(),
        checkpoint_step: step,
        feature: feature.to_string(),
        classifier: spec.name(),
        train_fraction: fraction,
        report,
        flag,
    })
}

/// One-feature linear classifier fit in closed form: the cut between
/// adjacent sorted train values with the fewest train errors, placed at the
/// midpoint (the max-margin cut when the classes separate). Returns the
/// threshold, the orientation (`true`: positive above) and the report.
pub fn fit_threshold(set: &LabeledFeatureSet) -> Result<(f64, bool, ClassifierReport)> {
    if set.features.cols() != 1 {
        return Err(Error::InvalidArgument("threshold classifier takes exactly one feature".into()));
    }
    let train = set.rows(SplitTag::Train);
    let positives = train.iter().filter(|&&k| set.labels[k] == 1).count();
    if train.is_empty() || positives == 0 || positives == train.len() {
        return Err(Error::InvalidArgument("classifier train split has a single class".into()));
    }
    let x = |k: usize| set.features.row(k)[0];
    let mut sorted = train.clone();
    sorted.sort_by(|&a, &b| x(a).total_cmp(&x(b)).then(a.cmp(&b)));
    // errors of "positive above cut" with the cut before position 0
    let mut above_errors = train.len() - positives;
    let mut best = (above_errors.min(positives), 0usize, above_errors <= positives);
    for i in 0..sorted.len() {
        if set.labels[sorted[i]] == 1 {
            above_errors += 1;
        } else {
            above_errors -= 1;
        }
        let cut = i + 1;
        if cut < sorted.len() && x(sorted[cut]) == x(sorted[i]) {
            continue;
        }
        let below_errors = train.len() - above_errors;
        let cand = (above_errors.min(below_errors), cut, above_errors <= below_errors);
        if cand.0 < best.0 {
            best = cand;
        }
    }
    let (_, cut, above) = best;
    let threshold = match cut {
        0 => x(sorted[0]) - 1.0,
        c if c == sorted.len() => x(sorted[c - 1]) + 1.0,
        c => 0.5 * (x(sorted[c - 1]) + x(sorted[c])),
    };
    let predict = |k: usize| ((x(k) > threshold) == above) as u8;
    let acc = |rows: &[usize]| {
        accuracy(&rows.iter().map(|&k| predict(k)).collect::<Vec<_>>(), &rows.iter().map(|&k| set.labels[k]).collect::<Vec<_>>())
    };
    let (val, test) = (set.rows(SplitTag::Valid), set.rows(SplitTag::Test));
    let majority = (2 * positives >= train.len()) as u8;
    let test_labels: Vec<u8> = test.iter().map(|&k| set.labels[k]).collect();
    let report = ClassifierReport {
        train_accuracy: acc(&train),
        val_accuracy: acc(&val),
        test_accuracy: acc(&test),
        majority_baseline: accuracy(&vec![majority; test.len()], &test_labels),
        best_epoch: 0,
        test_size: test.len(),
    };
    Ok((threshold, above, report))
}

/// Grid cell for [`fit_threshold`]; classifier name `threshold`.
pub fn run_threshold_cell(panel: &str, step: u64, feature: &str, set: &LabeledFeatureSet) -> Result<GridCell> {
    let (report, flag) = match fit_threshold(set) {
        Ok((_, _, r)) => (Some(r), String::new()),
        Err(Error::InvalidArgument(m)) if m.contains("single class") => (None, "degenerate".to_string()),
        Err(e) => return Err(e),
    };
    Ok(GridCell {
        panel: panel.to_string(),
        checkpoint_step: step,
        feature: feature.to_string(),
        classifier: "threshold".to_string(),
        train_fraction: 1.0,
        report,
        flag,
    })
}
