//! Per-layer probe heads: fit a fresh head on each layer's representations
//! and count the samples that layer renders non-support or memorized.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::headfit::{fit_head, HeadFitConfig, HeadProblem};
use crate::model::ModelSnapshot;
use crate::representer::{annotate_features, check_gamma, check_tau, SampleAnnotation};
use crate::rng::{normal_tensor, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// 1-based layer index; 0 marks the random-feature control.
    pub layer: usize,
    pub samples: usize,
    pub non_support: usize,
    pub memorized: usize,
    pub non_support_by_category: BTreeMap<String, usize>,
    pub memorized_by_category: BTreeMap<String, usize>,
    pub loss: f64,
    pub grad_max_norm: f64,
    pub converged: bool,
    /// Memorized samples that are support; nonzero only if the subset
    /// property fails.
    pub violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub fit: HeadFitConfig,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { fit: HeadFitConfig::default(), tau: 0.9, gamma: 0.5 }
    }
}

/// Fits a zero-initialized head on `features` and annotates `ids` against it.
pub fn probe_features(
    layer: usize,
    features: &Tensor,
    corpus: &Corpus,
    ids: &[usize],
    vocab: usize,
    config: &ProbeConfig,
) -> Result<(ProbeReport, Vec<SampleAnnotation>)> {
    check_tau(config.tau)?;
    check_gamma(config.gamma)?;
    let targets: Vec<TokenId> = ids.iter().map(|&i| corpus.target(i)).collect();
    let problem = HeadProblem::new(features, &targets, vocab, config.fit.lambda)?;
    let fit = fit_head(&problem, None, &config.fit)?;
    let ann = annotate_features(features, &fit.head, corpus, ids, config.tau)?;
    let cat = |id: usize| corpus.category(id).unwrap_or("untagged").to_string();
    let mut report = ProbeReport {
        layer,
        samples: ids.len(),
        non_support: 0,
        memorized: 0,
        non_support_by_category: BTreeMap::new(),
        memorized_by_category: BTreeMap::new(),
        loss: fit.loss,
        grad_max_norm: fit.grad_max_norm,
        converged: fit.converged,
        violations: 0,
    };
    for a in &ann {
        if !a.is_support() {
            report.non_support += 1;
            *report.non_support_by_category.entry(cat(a.id)).or_default() += 1;
        }
        if a.is_memorized(config.gamma) {
            report.memorized += 1;
            *report.memorized_by_category.entry(cat(a.id)).or_default() += 1;
            if a.is_support() {
                report.violations += 1;
            }
        }
    }
    Ok((report, ann))
}

pub fn probe_layer(
    snapshot: &ModelSnapshot,
    corpus: &Corpus,
    ids: &[usize],
    layer: usize,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if layer == 0 || layer > snapshot.config.layers {
        return Err(Error::InvalidArgument(format!("layer {layer} outside 1..={}", snapshot.config.layers)));
    }
    let phi = snapshot.representations(corpus, ids, &[layer])?.remove(0);
    Ok(probe_features(layer, &phi, corpus, ids, snapshot.config.vocab_size, config)?.0)
}

/// One report per layer, in layer order.
pub fn probe_all(snapshot: &ModelSnapshot, corpus: &Corpus, ids: &[usize], config: &ProbeConfig) -> Result<Vec<ProbeReport>> {
    let layers: Vec<usize> = (1..=snapshot.config.layers).collect();
    let reps = snapshot.representations(corpus, ids, &layers)?;
    reps.par_iter()
        .enumerate()
        .map(|(j, phi)| Ok(probe_features(j + 1, phi, corpus, ids, snapshot.config.vocab_size, config)?.0))
        .collect()
}

/// Control: the same probe on fixed standard-normal vectors of width `dim`.
pub fn probe_random(
    corpus: &Corpus,
    ids: &[usize],
    dim: usize,
    vocab: usize,
    seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let phi = normal_tensor(&mut stream(seed, "probe-random"), &[ids.len(), dim], 1.0);
    Ok(probe_features(0, &phi, corpus, ids, vocab, config)?.0)
}

/// CSV with one row per (layer, variant) and one column per category.
pub fn probe_csv(reports: &[ProbeReport], categories: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["layer".to_string(), "variant".into(), "total".into(), "samples".into(), "loss".into(), "converged".into()];
    header.extend(categories.iter().cloned());
    w.write_record(&header)?;
    for r in reports {
        for (variant, total, by) in [
            ("non-support", r.non_support, &r.non_support_by_category),
            ("memorized", r.memorized, &r.memorized_by_category),
        ] {
            let mut row = vec![
                r.layer.to_string(),
                variant.to_string(),
                total.to_string(),
                r.samples.to_string(),
                format!("{}", r.loss),
                r.converged.to_string(),
            ];
            row.extend(categories.iter().map(|c| by.get(c).copied().unwrap_or(0).to_string()));
            w.write_record(&row)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Invariant(e.to_string()))?)
        .map_err(|e| Error::Invariant(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_counts_partition_totals() {
        let docs = vec![vec![1, 2, 3, 1, 2, 3, 1, 2], vec![3, 2, 1, 3, 2, 1]];
        let corpus = Corpus::from_documents(docs, 4, 4).unwrap();
        let cats = (0..corpus.len()).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()).collect();
        let corpus = corpus.with_categories(cats).unwrap();
        let ids = corpus.all_ids();
        let cfg = ProbeConfig { tau: 0.5, ..Default::default() };
        let r = probe_random(&corpus, &ids, 3, 4, 1, &cfg).unwrap();
        assert_eq!(r.non_support_by_category.values().sum::<usize>(), r.non_support);
        assert_eq!(r.memorized_by_category.values().sum::<usize>(), r.memorized);
        assert_eq!(r.violations, 0);
        let csv = probe_csv(&[r], &corpus.category_names()).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
