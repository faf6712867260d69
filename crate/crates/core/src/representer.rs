//! α-scores, support sets and the representer identity.
//!
//! For a head `Θ` over features `φ(x_i)`, the coefficient of sample `i` in
//! row `v` is `α_{i,v} = 1(y_i = v) − p(v|x_i)`. A sample supports `v` when
//! `|α_{i,v}| ≥ τ`: Type-1 when `v = y_i`, Type-2 otherwise. At a stationary
//! head of the L2-regularised loss, `θ_v = (1/2Nλ) Σ_i α_{i,v} φ(x_i)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::headfit::{sample_set_fingerprint, HeadProblem};
use crate::model::ModelSnapshot;
use crate::tensor::{argmax, gemm, Tensor};

/// Largest head-gradient coordinate accepted as stationary for verification.
pub const STATIONARY_MAX_GRAD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SupportType {
    Type1,
    Type2,
}

impl SupportType {
    pub fn as_str(self) -> &'static str {
        match self {
            SupportType::Type1 => "type1",
            SupportType::Type2 => "type2",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "type1" => Some(SupportType::Type1),
            "type2" => Some(SupportType::Type2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportEntry {
    pub token: TokenId,
    pub alpha: f64,
    pub kind: SupportType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnnotation {
    pub id: usize,
    pub target: TokenId,
    pub p_target: f64,
    /// Most probable token, lowest id on ties.
    pub argmax: TokenId,
    pub p_argmax: f64,
    /// `s_i = max_v |α_{i,v}|`.
    pub score: f64,
    /// `Σ_v α_{i,v}` as accumulated in f64; zero up to rounding.
    pub alpha_sum: f64,
    pub entries: Vec<SupportEntry>,
}

impl SampleAnnotation {
    pub fn is_support(&self) -> bool {
        !self.entries.is_empty()
    }

    pub fn is_memorized(&self, gamma: f64) -> bool {
        self.argmax == self.target && self.p_target >= gamma
    }
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must be in (0, 1], got {tau}")));
    }
    Ok(())
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must be in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Annotates one probability row.
pub fn annotate_row(id: usize, target: TokenId, probs: &[f64], tau: f64) -> SampleAnnotation {
    let y = target as usize;
    let mut entries = Vec::new();
    let type1 = 1.0 - probs[y];
    if type1 >= tau {
        entries.push(SupportEntry { token: target, alpha: type1, kind: SupportType::Type1 });
    }
    let mut score = type1;
    let mut alpha_sum = type1;
    for (v, &p) in probs.iter().enumerate() {
        if v == y {
            continue;
        }
        alpha_sum -= p;
        score = score.max(p);
        if p >= tau {
            entries.push(SupportEntry { token: v as TokenId, alpha: -p, kind: SupportType::Type2 });
        }
    }
    let a = argmax(probs);
    SampleAnnotation {
        id,
        target,
        p_target: probs[y],
        argmax: a as TokenId,
        p_argmax: probs[a],
        score,
        alpha_sum,
        entries,
    }
}

/// Final-layer features `φ(x_i)` for `ids`, one row each.
pub fn final_features(snapshot: &ModelSnapshot, corpus: &Corpus, ids: &[usize]) -> Result<Tensor> {
    Ok(snapshot.representations(corpus, ids, &[snapshot.config.layers])?.remove(0))
}

/// Annotations for `ids` (in order) under head `head` applied to `features`.
pub fn annotate_features(
    features: &Tensor,
    head: &Tensor,
    corpus: &Corpus,
    ids: &[usize],
    tau: f64,
) -> Result<Vec<SampleAnnotation>> {
    check_tau(tau)?;
    let targets: Vec<TokenId> = ids.iter().map(|&i| corpus.target(i)).collect();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    // λ only enters the loss, not the probabilities.
    let problem = HeadProblem::new(features, &targets, head.rows(), 1.0)?;
    let mut out = Vec::with_capacity(ids.len());
    problem.for_each_probs(head, |k, probs| out.push(annotate_row(ids[k], targets[k], probs, tau)));
    Ok(out)
}

/// Support annotations bound to one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportIndex {
    pub checkpoint: String,
    pub tau: f64,
    pub gamma: f64,
    pub annotations: Vec<SampleAnnotation>,
}

pub fn compute_alphas(
    snapshot: &ModelSnapshot,
    corpus: &Corpus,
    ids: &[usize],
    tau: f64,
    gamma: f64,
) -> Result<SupportIndex> {
    check_tau(tau)?;
    check_gamma(gamma)?;
    let phi = final_features(snapshot, corpus, ids)?;
    let annotations = annotate_features(&phi, snapshot.params.head(), corpus, ids, tau)?;
    Ok(SupportIndex { checkpoint: snapshot.params.hash(), tau, gamma, annotations })
}

impl SupportIndex {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.annotations.iter().map(|a| a.id).collect()
    }

    pub fn support_ids(&self) -> Vec<usize> {
        self.annotations.iter().filter(|a| a.is_support()).map(|a| a.id).collect()
    }

    pub fn non_support_ids(&self) -> Vec<usize> {
        self.annotations.iter().filter(|a| !a.is_support()).map(|a| a.id).collect()
    }

    pub fn support_count(&self) -> usize {
        self.annotations.iter().filter(|a| a.is_support()).count()
    }

    pub fn memorized_ids(&self, gamma: f64) -> Result<Vec<usize>> {
        check_gamma(gamma)?;
        Ok(self.annotations.iter().filter(|a| a.is_memorized(gamma)).map(|a| a.id).collect())
    }

    /// `S_v` for every token with at least one supporting sample.
    pub fn by_token(&self) -> BTreeMap<TokenId, Vec<(usize, SupportType)>> {
        let mut out: BTreeMap<TokenId, Vec<(usize, SupportType)>> = BTreeMap::new();
        for a in &self.annotations {
            for e in &a.entries {
                out.entry(e.token).or_default().push((a.id, e.kind));
            }
        }
        out
    }

    /// Samples of `S_v`, optionally restricted to one type.
    pub fn support_of(&self, v: TokenId, kind: Option<SupportType>) -> Vec<usize> {
        self.annotations
            .iter()
            .filter(|a| a.entries.iter().any(|e| e.token == v && kind.map_or(true, |k| e.kind == k)))
            .map(|a| a.id)
            .collect()
    }

    /// Claim-1 check: memorized samples that are nonetheless support.
    pub fn claim1_violations(&self, gamma: f64) -> Vec<usize> {
        self.annotations.iter().filter(|a| a.is_memorized(gamma) && a.is_support()).map(|a| a.id).collect()
    }

    pub fn get(&self, id: usize) -> Option<&SampleAnnotation> {
        self.annotations
            .binary_search_by_key(&id, |a| a.id)
            .ok()
            .map(|k| &self.annotations[k])
            .or_else(|| self.annotations.iter().find(|a| a.id == id))
    }

    /// Writes the `(sample, token, α, type)` table with a binding header.
    pub fn index_text(&self) -> String {
        let mut s = format!(
            "#nwp-support-index\tversion=1\tcheckpoint={}\ttau={}\tgamma={}\tsamples={}\n",
            self.checkpoint,
            self.tau,
            self.gamma,
            self.annotations.len()
        );
        s.push_str("sample\ttoken\talpha\ttype\n");
        for a in &self.annotations {
            for e in &a.entries {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", a.id, e.token, e.alpha, e.kind.as_str());
            }
        }
        s
    }

    /// Per-sample summary rows (also needed to reload the index).
    pub fn summary_csv(&self, corpus: Option<&Corpus>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "sample", "target", "category", "p_target", "argmax", "p_argmax", "score", "alpha_sum", "support",
            "memorized",
        ])?;
        for a in &self.annotations {
            let cat = corpus.and_then(|c| c.category(a.id)).unwrap_or("");
            w.write_record([
                a.id.to_string(),
                a.target.to_string(),
                cat.to_string(),
                a.p_target.to_string(),
                a.argmax.to_string(),
                a.p_argmax.to_string(),
                a.score.to_string(),
                a.alpha_sum.to_string(),
                (a.is_support() as u8).to_string(),
                (a.is_memorized(self.gamma) as u8).to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?).expect("utf8"))
    }

    pub fn save(&self, index_path: &Path, summary_path: &Path, corpus: Option<&Corpus>) -> Result<()> {
        fs::write(index_path, self.index_text()).map_err(|e| Error::io(index_path, e))?;
        fs::write(summary_path, self.summary_csv(corpus)?).map_err(|e| Error::io(summary_path, e))
    }

    pub fn load(index_path: &Path, summary_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse { path: index_path.to_path_buf(), line, message };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#nwp-support-index") {
            return Err(parse_err(1, "missing support-index header".into()));
        }
        let mut kv = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| parse_err(1, format!("bad header field {f}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        if kv.get("version").map(String::as_str) != Some("1") {
            return Err(parse_err(1, "unsupported version".into()));
        }
        let num = |k: &str| -> Result<f64> {
            kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| parse_err(1, format!("missing {k}")))
        };
        let (tau, gamma) = (num("tau")?, num("gamma")?);
        let checkpoint = kv.get("checkpoint").cloned().unwrap_or_default();
        let mut rdr = csv::Reader::from_path(summary_path)?;
        let mut annotations = Vec::new();
        let mut pos = BTreeMap::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: usize| -> Result<&str> {
                rec.get(c).ok_or_else(|| Error::Parse {
                    path: summary_path.to_path_buf(),
                    line: k + 2,
                    message: "short row".into(),
                })
            };
            let bad = |m: &str| Error::Parse { path: summary_path.to_path_buf(), line: k + 2, message: m.into() };
            let f = |c: usize| -> Result<f64> { get(c)?.parse().map_err(|_| bad("bad number")) };
            let u = |c: usize| -> Result<u64> { get(c)?.parse().map_err(|_| bad("bad integer")) };
            let a = SampleAnnotation {
                id: u(0)? as usize,
                target: u(1)? as TokenId,
                p_target: f(3)?,
                argmax: u(4)? as TokenId,
                p_argmax: f(5)?,
                score: f(6)?,
                alpha_sum: f(7)?,
                entries: Vec::new(),
            };
            pos.insert(a.id, annotations.len());
            annotations.push(a);
        }
        for (n, line) in lines.enumerate().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let line_no = n + 2;
            if cols.len() != 4 {
                return Err(parse_err(line_no, "expected 4 columns".into()));
            }
            let id: usize = cols[0].parse().map_err(|_| parse_err(line_no, "bad sample".into()))?;
            let token: TokenId = cols[1].parse().map_err(|_| parse_err(line_no, "bad token".into()))?;
            let alpha: f64 = cols[2].parse().map_err(|_| parse_err(line_no, "bad alpha".into()))?;
            let kind = SupportType::parse(cols[3]).ok_or_else(|| parse_err(line_no, "bad type".into()))?;
            let &k = pos.get(&id).ok_or_else(|| parse_err(line_no, format!("sample {id} not in summary")))?;
            annotations[k].entries.push(SupportEntry { token, alpha, kind });
        }
        Ok(SupportIndex { checkpoint, tau, gamma, annotations })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub support: usize,
    pub proportion: f64,
}

/// Support count per threshold, from the scores alone.
pub fn threshold_sweep(annotations: &[SampleAnnotation], grid: &[f64]) -> Result<Vec<SweepPoint>> {
    let n = annotations.len();
    grid.iter()
        .map(|&tau| {
            check_tau(tau)?;
            let support = annotations.iter().filter(|a| a.score >= tau).count();
            Ok(SweepPoint { tau, support, proportion: if n == 0 { 0.0 } else { support as f64 / n as f64 } })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresenterCheck {
    /// `‖θ_v − θ̂_v‖ / max(‖θ_v‖, ε)` per token.
    pub relative_error: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_token: TokenId,
    pub epsilon: f64,
    pub lambda: f64,
    pub samples: usize,
}

pub const REPRESENTER_EPSILON: f64 = 1e-12;

/// `θ̂ = (1/2Nλ) Σ_i α_i φ_iᵀ` over the rows of `features`.
pub fn reconstruct_head(features: &Tensor, targets: &[TokenId], head: &Tensor, lambda: f64) -> Result<Tensor> {
    let (v, d) = (head.rows(), head.cols());
    let problem = HeadProblem::new(features, targets, v, lambda)?;
    let n = targets.len();
    let mut alpha = vec![0.0; n * v];
    problem.for_each_probs(head, |k, p| {
        let row = &mut alpha[k * v..(k + 1) * v];
        for (a, &pv) in row.iter_mut().zip(p) {
            *a = -pv;
        }
        row[targets[k] as usize] += 1.0;
    });
    let mut out = vec![0.0; v * d];
    gemm(v, n, d, &alpha, 1, v as isize, features.data(), d as isize, 1, &mut out, 0.0);
    let scale = 1.0 / (2.0 * n as f64 * lambda);
    out.iter_mut().for_each(|x| *x *= scale);
    Tensor::new(vec![v, d], out)
}

pub fn compare_heads(head: &Tensor, reconstructed: &Tensor) -> (Vec<f64>, f64, TokenId) {
    let mut rel = Vec::with_capacity(head.rows());
    for v in 0..head.rows() {
        let (a, b) = (head.row(v), reconstructed.row(v));
        let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        rel.push(diff / crate::tensor::norm(a).max(REPRESENTER_EPSILON));
    }
    let worst = argmax(&rel);
    (rel.clone(), rel[worst], worst as TokenId)
}

/// Checks the representer identity for a head fit to stationarity on
/// exactly `ids`. Refuses heads without a stationary fit on that set.
pub fn verify_representer(
    snapshot: &ModelSnapshot,
    corpus: &Corpus,
    ids: &[usize],
    lambda: Option<f64>,
) -> Result<RepresenterCheck> {
    let st = snapshot
        .stationary
        .as_ref()
        .ok_or_else(|| Error::NotStationary("snapshot has no stationary head fit".into()))?;
    if !st.converged || !(st.grad_max_norm <= STATIONARY_MAX_GRAD) {
        return Err(Error::NotStationary(format!(
            "head gradient max-norm {} exceeds {STATIONARY_MAX_GRAD}",
            st.grad_max_norm
        )));
    }
    if let Some(l) = lambda {
        if l != st.lambda {
            return Err(Error::NotStationary(format!("head was fit with lambda {} not {l}", st.lambda)));
        }
    }
    if st.sample_set != sample_set_fingerprint(corpus, ids) {
        return Err(Error::NotStationary("head was fit on a different sample set".into()));
    }
    let phi = final_features(snapshot, corpus, ids)?;
    let targets: Vec<TokenId> = ids.iter().map(|&i| corpus.target(i)).collect();
    let hat = reconstruct_head(&phi, &targets, snapshot.params.head(), st.lambda)?;
    let (relative_error, max_relative_error, worst_token) = compare_heads(snapshot.params.head(), &hat);
    Ok(RepresenterCheck {
        relative_error,
        max_relative_error,
        worst_token,
        epsilon: REPRESENTER_EPSILON,
        lambda: st.lambda,
        samples: ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headfit::{fit_head, HeadFitConfig};

    #[test]
    fn perfect_prediction_is_never_support() {
        let a = annotate_row(0, 1, &[0.0, 1.0, 0.0], 1e-9);
        assert_eq!(a.score, 0.0);
        assert!(!a.is_support());
        assert!(a.is_memorized(1.0));
    }

    #[test]
    fn sample_can_be_type1_and_type2_at_once() {
        let a = annotate_row(3, 0, &[0.05, 0.92, 0.03], 0.9);
        assert_eq!(a.entries.len(), 2);
        assert_eq!(a.entries[0], SupportEntry { token: 0, alpha: 0.95, kind: SupportType::Type1 });
        assert_eq!(a.entries[1], SupportEntry { token: 1, alpha: -0.92, kind: SupportType::Type2 });
        assert!((a.score - 0.95).abs() < 1e-15);
        assert!(a.alpha_sum.abs() < 1e-15);
    }

    #[test]
    fn type2_scans_every_token_not_just_argmax() {
        let a = annotate_row(0, 2, &[0.45, 0.45, 0.1], 0.4);
        let t2: Vec<_> = a.entries.iter().filter(|e| e.kind == SupportType::Type2).map(|e| e.token).collect();
        assert_eq!(t2, vec![0, 1]);
        assert_eq!(a.argmax, 0);
    }

    #[test]
    fn tau_and_gamma_are_validated() {
        assert!(check_tau(0.0).is_err());
        assert!(check_tau(1.5).is_err());
        assert!(check_tau(1.0).is_ok());
        assert!(check_gamma(-0.1).is_err());
        assert!(check_gamma(0.0).is_ok());
    }

    #[test]
    fn single_sample_closed_form() {
        // N = 1, |V| = 2, φ = (1, 0): stationarity gives θ_0 = −θ_1 = (a, 0)
        // with a = (1 − σ(2a)) / (2λ); the fitted head must match it and the
        // reconstruction must agree.
        let lambda = 0.1;
        let phi = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let targets = [0u32];
        let p = HeadProblem::new(&phi, &targets, 2, lambda).unwrap();
        let fit = fit_head(&p, None, &HeadFitConfig { lambda, tolerance: 1e-12, ..Default::default() }).unwrap();
        let mut a: f64 = 0.5;
        for _ in 0..200 {
            // Newton on g(a) = 2λa − (1 − σ(2a))
            let s = 1.0 / (1.0 + (-2.0 * a).exp());
            let g = 2.0 * lambda * a - (1.0 - s);
            let dg = 2.0 * lambda + 2.0 * s * (1.0 - s);
            a -= g / dg;
        }
        assert!((fit.head.data()[0] - a).abs() < 1e-9);
        assert!((fit.head.data()[2] + a).abs() < 1e-9);
        let hat = reconstruct_head(&phi, &targets, &fit.head, lambda).unwrap();
        let (_, max, _) = compare_heads(&fit.head, &hat);
        assert!(max <= 1e-6);
    }

    #[test]
    fn sweep_is_monotone() {
        let anns: Vec<_> = [0.1, 0.5, 0.95, 1.0, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &p)| annotate_row(i, 0, &[1.0 - p, p], 0.9))
            .collect();
        let pts = threshold_sweep(&anns, &[0.5, 0.7, 0.9, 1.0]).unwrap();
        let counts: Vec<_> = pts.iter().map(|p| p.support).collect();
        assert_eq!(counts, vec![3, 2, 2, 1]);
        assert!(threshold_sweep(&anns, &[0.0]).is_err());
    }
}
