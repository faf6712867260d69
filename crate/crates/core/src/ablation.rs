//! Removal-retraining experiments and the data-size / weight-decay /
//! embedding-dropout sweeps.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DataSplit, TokenId};
use crate::error::{Error, Result};
use crate::headfit::{fit_head, HeadFitConfig, HeadProblem};
use crate::model::{ModelConfig, ModelSnapshot};
use crate::representer::{annotate_features, final_features, SampleAnnotation, SupportIndex};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::train::{train_from, train_on, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Hard,
    Soft,
    Random,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Hard, Method::Soft, Method::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hard => "hard",
            Method::Soft => "soft",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Method::Hard),
            "soft" => Ok(Method::Soft),
            "random" => Ok(Method::Random),
            _ => Err(Error::InvalidArgument(format!("unknown removal method {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    HeadsOnly,
    FullModel,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::HeadsOnly => "heads-only",
            Regime::FullModel => "full-model",
        }
    }
}

/// Retained sample ids (ascending) for one removal method.
pub fn build_removal_set(annotations: &[SampleAnnotation], method: Method, seed: u64) -> Vec<usize> {
    let mut kept: Vec<usize> = match method {
        Method::Hard => annotations.iter().filter(|a| a.is_support()).map(|a| a.id).collect(),
        Method::Random => {
            let k = annotations.iter().filter(|a| a.is_support()).count();
            let mut rng = stream(seed, "ablation-random");
            sample_indices(&mut rng, annotations.len(), k).into_iter().map(|j| annotations[j].id).collect()
        }
        Method::Soft => {
            let mut rng = stream(seed, "ablation-soft");
            annotations.iter().filter(|a| rng.gen::<f64>() < a.score).map(|a| a.id).collect()
        }
    };
    kept.sort_unstable();
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub method: Method,
    pub regime: Regime,
    pub seed: u64,
    /// Full-model regime only: start from the base parameters.
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
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
    /// Mean loss on the original support samples after retraining.
    pub support_loss_after: f64,
    pub flagged: bool,
}

/// Shared inputs for a family of plans over one base snapshot.
pub struct AblationContext<'a> {
    pub corpus: &'a Corpus,
    pub base: &'a ModelSnapshot,
    pub split: DataSplit,
    pub base_index: SupportIndex,
    pub head_fit: HeadFitConfig,
    pub schedule: Schedule,
    train_features: Tensor,
    test_features: Tensor,
}

impl<'a> AblationContext<'a> {
    /// `base_index` must annotate exactly `split.train` under `base`.
    pub fn new(
        corpus: &'a Corpus,
        base: &'a ModelSnapshot,
        split: DataSplit,
        base_index: SupportIndex,
        head_fit: HeadFitConfig,
        schedule: Schedule,
    ) -> Result<Self> {
        if base_index.ids() != split.train {
            return Err(Error::InvalidArgument("base index must cover the training split in order".into()));
        }
        if split.test.is_empty() {
            return Err(Error::InvalidArgument("ablation needs a non-empty test split".into()));
        }
        let train_features = final_features(base, corpus, &split.train)?;
        let test_features = final_features(base, corpus, &split.test)?;
        Ok(AblationContext { corpus, base, split, base_index, head_fit, schedule, train_features, test_features })
    }

    fn targets(&self, ids: &[usize]) -> Vec<TokenId> {
        ids.iter().map(|&i| self.corpus.target(i)).collect()
    }

    pub fn run(&self, plan: &AblationPlan) -> Result<AblationResult> {
        let tau = self.base_index.tau;
        let retained = build_removal_set(&self.base_index.annotations, plan.method, plan.seed);
        if retained.is_empty() {
            return Err(Error::InvalidArgument(format!("{} removal retains no samples", plan.method.as_str())));
        }
        let pos: Vec<usize> = retained
            .iter()
            .map(|id| self.split.train.binary_search(id).expect("retained ids come from the train split"))
            .collect();
        let new_support_before = pos.iter().filter(|&&k| self.base_index.annotations[k].is_support()).count();
        let support_rows: Vec<usize> =
            (0..self.split.train.len()).filter(|&k| self.base_index.annotations[k].is_support()).collect();

        let (orig_after, test_loss, flagged): (Vec<SampleAnnotation>, f64, bool) = match plan.regime {
            Regime::HeadsOnly => {
                let phi = self.train_features.gather_rows(&pos);
                let y = self.targets(&retained);
                let problem = HeadProblem::new(&phi, &y, self.base.config.vocab_size, self.head_fit.lambda)?;
                let fit = fit_head(&problem, None, &self.head_fit)?;
                let all = annotate_features(&self.train_features, &fit.head, self.corpus, &self.split.train, tau)?;
                let test = mean_nll(&self.test_features, &self.targets(&self.split.test), &fit.head);
                (all, test, !fit.converged)
            }
            Regime::FullModel => {
                let init = if plan.warm_start {
                    self.base.clone()
                } else {
                    ModelSnapshot::init(ModelConfig { seed: plan.seed, ..self.base.config.clone() })?
                };
                let out = train_from(self.corpus, init, &self.schedule, &retained, &self.split.valid)?;
                let model = out.best;
                let all = annotate_features(
                    &final_features(&model, self.corpus, &self.split.train)?,
                    model.params.head(),
                    self.corpus,
                    &self.split.train,
                    tau,
                )?;
                let test = model.mean_nll(self.corpus, &self.split.test)?;
                (all, test, out.diverged_at.is_some())
            }
        };
        let new_support_after = pos.iter().filter(|&&k| orig_after[k].is_support()).count();
        let original_support_after = orig_after.iter().filter(|a| a.is_support()).count();
        let support_loss_after = if support_rows.is_empty() {
            f64::NAN
        } else {
            support_rows.iter().map(|&k| -orig_after[k].p_target.ln()).sum::<f64>() / support_rows.len() as f64
        };
        Ok(AblationResult {
            method: plan.method,
            regime: plan.regime,
            seed: plan.seed,
            tau,
            retained: retained.len(),
            original: self.split.train.len(),
            test_loss,
            new_support_before,
            new_support_after,
            original_support_before: self.base_index.support_count(),
            original_support_after,
            support_loss_after,
            flagged,
        })
    }
}

/// Mean NLL of `head` over feature rows.
pub fn mean_nll(features: &Tensor, targets: &[TokenId], head: &Tensor) -> f64 {
    if targets.is_empty() {
        return f64::NAN;
    }
    let problem = HeadProblem::new(features, targets, head.rows(), 1.0).expect("validated shapes");
    let mut total = 0.0;
    problem.for_each_probs(head, |k, p| total -= p[targets[k] as usize].ln());
    total / targets.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Knob {
    DataSize,
    WeightDecay,
    EmbeddingDropout,
}

impl Knob {
    pub fn as_str(self) -> &'static str {
        match self {
            Knob::DataSize => "data-size",
            Knob::WeightDecay => "weight-decay",
            Knob::EmbeddingDropout => "embedding-dropout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub knob: Knob,
    pub value: f64,
    pub train_samples: usize,
    pub test_loss: f64,
    pub support: usize,
    pub support_proportion: f64,
    pub flagged: bool,
}

/// One train + annotate run per grid value. Data-size values are fractions
/// of the training documents (seeded subsample, nested across values).
pub fn sweep(
    corpus: &Corpus,
    config: &ModelConfig,
    schedule: &Schedule,
    knob: Knob,
    grid: &[f64],
    tau: f64,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let split = DataSplit::by_documents(corpus, &schedule.split)?;
    let mut docs: Vec<usize> = split.train.iter().map(|&i| corpus.sample(i).doc).collect();
    docs.dedup();
    let doc_rank = {
        let mut order: Vec<(u64, usize)> =
            docs.iter().map(|&d| (crate::rng::hash_u64(config.seed, "data-size", d as u64), d)).collect();
        order.sort_unstable();
        order.into_iter().map(|(_, d)| d).collect::<Vec<_>>()
    };
    grid.iter()
        .map(|&value| {
            let mut cfg = config.clone();
            let mut train_ids = split.train.clone();
            match knob {
                Knob::DataSize => {
                    if !(value > 0.0 && value <= 1.0) {
                        return Err(Error::InvalidArgument(format!("data-size fraction {value} outside (0, 1]")));
                    }
                    let keep = ((doc_rank.len() as f64 * value).round() as usize).max(1);
                    let mut chosen: Vec<usize> = doc_rank[..keep].to_vec();
                    chosen.sort_unstable();
                    train_ids = chosen.iter().flat_map(|&d| corpus.doc_sample_ids(d)).collect();
                }
                Knob::WeightDecay => cfg.weight_decay = value,
                Knob::EmbeddingDropout => cfg.embedding_dropout = value,
            }
            cfg.validate()?;
            let out = train_on(corpus, &cfg, schedule, &train_ids, &split.valid)?;
            let model = out.best;
            let phi = final_features(&model, corpus, &train_ids)?;
            let anns = annotate_features(&phi, model.params.head(), corpus, &train_ids, tau)?;
            let support = anns.iter().filter(|a| a.is_support()).count();
            Ok(SweepPoint {
                knob,
                value,
                train_samples: train_ids.len(),
                test_loss: model.mean_nll(corpus, &split.test)?,
                support,
                support_proportion: support as f64 / train_ids.len() as f64,
                flagged: out.diverged_at.is_some(),
            })
        })
        .collect()
}
