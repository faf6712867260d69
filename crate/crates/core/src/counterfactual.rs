//! Subtraction counterfactuals: remove a sample set's representer
//! contribution from every head row and measure the effect.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::headfit::HeadProblem;
use crate::model::ModelSnapshot;
use crate::representer::{final_features, SupportIndex, SupportType};
use crate::rng::stream;
use crate::tensor::{gemm, log_sum_exp, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "selector", rename_all = "kebab-case")]
pub enum Selector {
    Support { token: TokenId },
    Type1 { token: TokenId },
    Type2 { token: TokenId },
    /// `|S_v|` samples drawn uniformly without replacement from the index.
    Random { token: TokenId, seed: u64 },
    Explicit { ids: Vec<usize> },
}

impl Selector {
    pub fn name(&self) -> &'static str {
        match self {
            Selector::Support { .. } => "support",
            Selector::Type1 { .. } => "type1",
            Selector::Type2 { .. } => "type2",
            Selector::Random { .. } => "random",
            Selector::Explicit { .. } => "explicit",
        }
    }

    /// Removal set in ascending id order.
    pub fn resolve(&self, index: &SupportIndex) -> Vec<usize> {
        let mut ids = match self {
            Selector::Support { token } => index.support_of(*token, None),
            Selector::Type1 { token } => index.support_of(*token, Some(SupportType::Type1)),
            Selector::Type2 { token } => index.support_of(*token, Some(SupportType::Type2)),
            Selector::Random { token, seed } => {
                let k = index.support_of(*token, None).len();
                let pool = index.ids();
                let mut rng = stream(*seed, &format!("counterfactual-random/{token}"));
                sample_indices(&mut rng, pool.len(), k.min(pool.len())).into_iter().map(|j| pool[j]).collect()
            }
            Selector::Explicit { ids } => ids.clone(),
        };
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Scale `1/(2Nλ)` from the stationary fit.
    #[default]
    Exact,
    /// Scale fitted by least squares between the head and its reconstruction.
    Approximate,
}

/// `Σ_{i∈R} α_i φ_iᵀ` with α from `head`'s probabilities.
fn alpha_outer(features: &Tensor, targets: &[TokenId], head: &Tensor) -> Result<Tensor> {
    let (v, d, n) = (head.rows(), head.cols(), targets.len());
    if n == 0 {
        return Ok(Tensor::zeros(&[v, d]));
    }
    let problem = HeadProblem::new(features, targets, v, 1.0)?;
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
    Tensor::new(vec![v, d], out)
}

/// Precomputed features for the fit set; subtractions then cost one GEMM.
pub struct Subtractor<'a> {
    pub snapshot: &'a ModelSnapshot,
    corpus: &'a Corpus,
    ids: Vec<usize>,
    features: Tensor,
    scale: f64,
    pub mode: Mode,
}

impl<'a> Subtractor<'a> {
    /// `fit_ids` is the sample set the head was fit on (its `N`).
    pub fn new(snapshot: &'a ModelSnapshot, corpus: &'a Corpus, fit_ids: &[usize], mode: Mode) -> Result<Self> {
        let features = final_features(snapshot, corpus, fit_ids)?;
        let scale = match mode {
            Mode::Exact => {
                let st = snapshot
                    .stationary
                    .as_ref()
                    .filter(|s| s.converged)
                    .ok_or_else(|| Error::NotStationary("exact subtraction needs a stationary head".into()))?;
                if st.samples != fit_ids.len() {
                    return Err(Error::NotStationary(format!(
                        "head was fit on {} samples, not {}",
                        st.samples,
                        fit_ids.len()
                    )));
                }
                1.0 / (2.0 * st.samples as f64 * st.lambda)
            }
            Mode::Approximate => {
                let targets: Vec<TokenId> = fit_ids.iter().map(|&i| corpus.target(i)).collect();
                let full = alpha_outer(&features, &targets, snapshot.params.head())?;
                let den: f64 = full.data().iter().map(|x| x * x).sum();
                if den == 0.0 {
                    return Err(Error::InvalidArgument("reconstruction is identically zero".into()));
                }
                full.data().iter().zip(snapshot.params.head().data()).map(|(a, b)| a * b).sum::<f64>() / den
            }
        };
        let mut ids = fit_ids.to_vec();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("fit ids contain duplicates".into()));
        }
        let order: Vec<usize> = {
            let mut o: Vec<usize> = (0..fit_ids.len()).collect();
            o.sort_by_key(|&k| fit_ids[k]);
            o
        };
        let features = features.gather_rows(&order);
        Ok(Subtractor { snapshot, corpus, ids, features, scale, mode })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn fit_ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    fn rows_of(&self, removal: &[usize]) -> Result<Vec<usize>> {
        removal
            .iter()
            .map(|id| {
                self.ids
                    .binary_search(id)
                    .map_err(|_| Error::InvalidArgument(format!("sample {id} is not in the fit set")))
            })
            .collect()
    }

    /// The head after removing `removal`'s contribution. Other parameters
    /// are shared unchanged.
    pub fn subtract(&self, removal: &[usize]) -> Result<ModelSnapshot> {
        let rows = self.rows_of(removal)?;
        let mut out = self.snapshot.clone();
        if rows.is_empty() {
            return Ok(out);
        }
        let phi = self.features.gather_rows(&rows);
        let targets: Vec<TokenId> = removal.iter().map(|&i| self.corpus.target(i)).collect();
        let delta = alpha_outer(&phi, &targets, self.snapshot.params.head())?;
        let mut head = self.snapshot.params.head().clone();
        head.axpy(-self.scale, &delta);
        out.params.set_head(head)?;
        out.stationary = None;
        Ok(out)
    }

    /// Mean NLL over `ids` and mean `p(v|x)` on the `y = v` part, using the
    /// cached features with `head`.
    pub fn measure(&self, head: &Tensor, v: TokenId) -> Result<Measures> {
        let targets: Vec<TokenId> = self.ids.iter().map(|&i| self.corpus.target(i)).collect();
        if !targets.contains(&v) {
            return Err(Error::UnknownTarget(v));
        }
        let problem = HeadProblem::new(&self.features, &targets, head.rows(), 1.0)?;
        let (mut full, mut sub, mut pv, mut n_sub) = (0.0, 0.0, 0.0, 0usize);
        problem.for_each_probs(head, |k, p| {
            let nll = -p[targets[k] as usize].ln();
            full += nll;
            if targets[k] == v {
                sub += nll;
                pv += p[v as usize];
                n_sub += 1;
            }
        });
        let n = targets.len() as f64;
        Ok(Measures { full_loss: full / n, subset_loss: sub / n_sub as f64, subset_mean_p: pv / n_sub as f64, subset_size: n_sub })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub full_loss: f64,
    pub subset_loss: f64,
    pub subset_mean_p: f64,
    pub subset_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub token: TokenId,
    pub selector: String,
    pub removed: usize,
    pub before: Measures,
    pub after: Measures,
    /// Fraction of distinct pairs within the `y = v` subset with `φᵀφ' ≥ 0`.
    pub kernel_nonnegative: f64,
}

/// Runs one selector for token `v`: subtract, re-measure, audit the kernel
/// premise on the `y = v` subset.
pub fn run_counterfactual(sub: &Subtractor, index: &SupportIndex, v: TokenId, selector: &Selector) -> Result<CounterfactualReport> {
    let removal = selector.resolve(index);
    let before = sub.measure(sub.snapshot.params.head(), v)?;
    let modified = sub.subtract(&removal)?;
    let after = sub.measure(modified.params.head(), v)?;
    let subset: Vec<usize> =
        sub.ids.iter().enumerate().filter(|(_, &i)| sub.corpus.target(i) == v).map(|(k, _)| k).collect();
    let pairs: Vec<(usize, usize)> =
        subset.iter().enumerate().flat_map(|(n, &a)| subset[n + 1..].iter().map(move |&b| (a, b))).collect();
    let kernel = if pairs.is_empty() { f64::NAN } else { kernel_nonnegativity(sub.features(), &pairs) };
    Ok(CounterfactualReport {
        token: v,
        selector: selector.name().to_string(),
        removed: removal.len(),
        before,
        after,
        kernel_nonnegative: kernel,
    })
}

/// Fraction of index pairs `(i, j)` with `φ_iᵀφ_j ≥ 0`.
pub fn kernel_nonnegativity(features: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let ok = pairs.iter().filter(|&&(i, j)| crate::tensor::dot(features.row(i), features.row(j)) >= 0.0).count();
    ok as f64 / pairs.len() as f64
}

/// Seeded uniform random pairs among `n` rows.
pub fn random_pairs(n: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::Rng;
    if n == 0 {
        return Vec::new();
    }
    let mut rng = stream(seed, "kernel-pairs");
    (0..count).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect()
}

/// Mean NLL over `ids` by full forward passes; the independent evaluation
/// path used to cross-check cached-feature measurements.
pub fn forward_loss(snapshot: &ModelSnapshot, corpus: &Corpus, ids: &[usize]) -> Result<f64> {
    snapshot.mean_nll(corpus, ids)
}

/// Mean NLL of `head` over precomputed feature rows.
pub fn feature_loss(features: &Tensor, targets: &[TokenId], head: &Tensor) -> Result<f64> {
    let logits = features.matmul_t(head);
    let mut total = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        let row = logits.row(k);
        total += log_sum_exp(row) - row[t as usize];
    }
    Ok(total / targets.len() as f64)
}
