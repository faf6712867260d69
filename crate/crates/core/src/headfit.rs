//! Fitting the LM head to a stationary point of
//! `L(Θ) = −(1/N) Σ log softmax(Θ φ_i)[y_i] + λ‖Θ‖²` over frozen features.
//!
//! The default solver is L-BFGS with a derivative-driven line search, which
//! keeps making progress when loss differences fall below f64 resolution.
//! Plain gradient descent is available for reference runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::model::{ModelSnapshot, Stationarity};
use crate::tensor::{gemm, log_sum_exp, Tensor};

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Solver {
    Lbfgs { memory: usize },
    GradientDescent { lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadFitConfig {
    pub lambda: f64,
    /// Stop once the Euclidean norm of the head gradient is at most this,
    /// which also bounds every coordinate.
    pub tolerance: f64,
    pub max_iters: usize,
    pub solver: Solver,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        HeadFitConfig { lambda: 1e-3, tolerance: 1e-6, max_iters: 5000, solver: Solver::Lbfgs { memory: 10 } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub head: Tensor,
    pub loss: f64,
    pub grad_max_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Softmax-regression objective over fixed features.
pub struct HeadProblem<'a> {
    pub features: &'a Tensor,
    pub targets: &'a [TokenId],
    pub vocab: usize,
    pub lambda: f64,
}

impl<'a> HeadProblem<'a> {
    pub fn new(features: &'a Tensor, targets: &'a [TokenId], vocab: usize, lambda: f64) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != targets.len() {
            return Err(Error::Shape(format!("features {:?} for {} targets", features.shape(), targets.len())));
        }
        if targets.is_empty() {
            return Err(Error::InvalidArgument("head fit needs at least one sample".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab, index: i });
        }
        Ok(HeadProblem { features, targets, vocab, lambda })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Loss and gradient at `head` (`|V| × d`).
    pub fn evaluate(&self, head: &Tensor) -> (f64, Tensor) {
        let (n, d, v) = (self.targets.len(), self.dim(), self.vocab);
        let parts: Vec<(f64, Vec<f64>)> = (0..n)
            .step_by(CHUNK)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&start| {
                let rows = CHUNK.min(n - start);
                let phi = &self.features.data()[start * d..(start + rows) * d];
                let mut logits = vec![0.0; rows * v];
                gemm(rows, d, v, phi, d as isize, 1, head.data(), 1, d as isize, &mut logits, 0.0);
                let mut loss = 0.0;
                for (r, row) in logits.chunks_mut(v).enumerate() {
                    let y = self.targets[start + r] as usize;
                    let lse = log_sum_exp(row);
                    loss += lse - row[y];
                    for z in row.iter_mut() {
                        *z = (*z - lse).exp();
                    }
                    row[y] -= 1.0;
                }
                let mut g = vec![0.0; v * d];
                gemm(v, rows, d, &logits, 1, v as isize, phi, d as isize, 1, &mut g, 0.0);
                (loss, g)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; v * d];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut reg = 0.0;
        for (gi, &w) in grad.iter_mut().zip(head.data()) {
            *gi = *gi * inv_n + 2.0 * self.lambda * w;
            reg += w * w;
        }
        (loss * inv_n + self.lambda * reg, Tensor::new(vec![v, d], grad).expect("head shape"))
    }

    /// `p(·|x_i)` rows for all samples under `head`, computed chunk by chunk
    /// and handed to `visit(sample index, probability row)`.
    pub fn for_each_probs(&self, head: &Tensor, mut visit: impl FnMut(usize, &[f64])) {
        let (n, d, v) = (self.targets.len(), self.dim(), self.vocab);
        for start in (0..n).step_by(CHUNK) {
            let rows = CHUNK.min(n - start);
            let phi = &self.features.data()[start * d..(start + rows) * d];
            let mut logits = vec![0.0; rows * v];
            gemm(rows, d, v, phi, d as isize, 1, head.data(), 1, d as isize, &mut logits, 0.0);
            for (r, row) in logits.chunks_mut(v).enumerate() {
                crate::tensor::softmax_in_place(row);
                visit(start + r, row);
            }
        }
    }
}

pub fn fit_head(problem: &HeadProblem, init: Option<&Tensor>, config: &HeadFitConfig) -> Result<HeadFit> {
    if !(config.tolerance > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be > 0".into()));
    }
    let shape = [problem.vocab, problem.dim()];
    let x0 = match init {
        Some(h) if h.shape() == shape => h.clone(),
        Some(h) => return Err(Error::Shape(format!("initial head {:?}, expected {shape:?}", h.shape()))),
        None => Tensor::zeros(&shape),
    };
    match config.solver {
        Solver::Lbfgs { memory } => lbfgs(problem, x0, config, memory.max(1)),
        Solver::GradientDescent { lr } => gradient_descent(problem, x0, config, lr),
    }
}

fn gradient_descent(problem: &HeadProblem, mut x: Tensor, config: &HeadFitConfig, lr: f64) -> Result<HeadFit> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be > 0".into()));
    }
    let (mut f, mut g) = problem.evaluate(&x);
    let mut it = 0;
    while crate::tensor::norm(g.data()) > config.tolerance && it < config.max_iters {
        x.axpy(-lr, &g);
        (f, g) = problem.evaluate(&x);
        if !f.is_finite() {
            return Err(Error::Diverged { step: it });
        }
        it += 1;
    }
    let gmax = g.max_abs();
    let converged = crate::tensor::norm(g.data()) <= config.tolerance;
    Ok(HeadFit { head: x, loss: f, grad_max_norm: gmax, iterations: it, evaluations: it + 1, converged })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lbfgs(problem: &HeadProblem, x0: Tensor, config: &HeadFitConfig, memory: usize) -> Result<HeadFit> {
    let shape = x0.shape().to_vec();
    let mut x = x0.into_data();
    let eval = |x: &[f64]| {
        let (f, g) = problem.evaluate(&Tensor::new(shape.clone(), x.to_vec()).expect("shape"));
        (f, g.into_data())
    };
    let (mut f, mut g) = eval(&x);
    let mut evaluations = 1;
    let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    let mut iterations = 0;
    let max_abs = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l2 = |g: &[f64]| dot(g, g).sqrt();
    while l2(&g) > config.tolerance && iterations < config.max_iters {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = hist.back().map(|(s, y, _)| dot(s, y) / dot(y, y)).unwrap_or_else(|| {
            1.0 / g.iter().map(|v| v.abs()).sum::<f64>().max(1.0)
        });
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut dphi0 = dot(&g, &dir);
        if !(dphi0 < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &dir);
        }

        let (alpha, fx, gx, n_eval) = line_search(&eval, &x, f, dphi0, &dir);
        evaluations += n_eval;
        let s: Vec<f64> = dir.iter().map(|d| alpha * d).collect();
        let xn: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        if !fx.is_finite() {
            return Err(Error::Diverged { step: iterations });
        }
        let y: Vec<f64> = gx.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let stalled = xn == x;
        x = xn;
        f = fx;
        g = gx;
        iterations += 1;
        if stalled {
            if hist.is_empty() {
                break;
            }
            hist.clear();
        }
    }
    let gmax = max_abs(&g);
    Ok(HeadFit {
        head: Tensor::new(shape, x).expect("shape"),
        loss: f,
        grad_max_norm: gmax,
        iterations,
        evaluations,
        converged: l2(&g) <= config.tolerance,
    })
}

/// Finds a step along `dir` with `|φ'(α)| ≤ c2 |φ'(0)|` and a loss no
/// larger than `f0` beyond rounding slack. The objective is convex, so `φ'`
/// is monotone and the derivative alone brackets the step.
fn line_search(
    eval: &impl Fn(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    f0: f64,
    dphi0: f64,
    dir: &[f64],
) -> (f64, f64, Vec<f64>, usize) {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let slack = 8.0 * f64::EPSILON * f0.abs().max(1.0);
    let (mut lo, mut dlo) = (0.0, dphi0);
    let (mut hi, mut dhi) = (f64::INFINITY, f64::NAN);
    let mut alpha = 1.0;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for k in 1..=40 {
        let xa: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + alpha * d).collect();
        let (fa, ga) = eval(&xa);
        let da = dot(&ga, dir);
        let armijo = fa <= f0 + C1 * alpha * dphi0 + slack;
        if fa.is_finite() && armijo && da.abs() <= C2 * dphi0.abs() {
            return (alpha, fa, ga, k);
        }
        if fa.is_finite() && fa <= f0 + slack && best.as_ref().map_or(true, |b| fa < b.1) {
            best = Some((alpha, fa, ga));
        }
        if !fa.is_finite() || !armijo || da > 0.0 {
            hi = alpha;
            dhi = if fa.is_finite() { da } else { f64::NAN };
        } else {
            lo = alpha;
            dlo = da;
        }
        alpha = if hi.is_finite() {
            let width = hi - lo;
            let secant = if dhi.is_finite() && dhi > dlo { lo - dlo * width / (dhi - dlo) } else { lo + 0.5 * width };
            secant.clamp(lo + 0.1 * width, hi - 0.1 * width)
        } else {
            2.0 * alpha
        };
    }
    match best {
        Some((a, f, g)) => (a, f, g, 40),
        None => (0.0, f0, eval(x).1, 41),
    }
}

/// Fingerprint of a sample-id set within a corpus.
pub fn sample_set_fingerprint(corpus: &Corpus, ids: &[usize]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(corpus.fingerprint().as_bytes());
    for &i in ids {
        h.update((i as u64).to_le_bytes());
    }
    crate::corpus::hex(&h.finalize())
}

/// Refits the head of `snapshot` on the frozen last-layer representations
/// of `ids`. The backbone is untouched; the returned snapshot records the
/// stationarity facts. `warm_start` begins from the current head, otherwise
/// from zero.
pub fn head_only_retrain(
    snapshot: &ModelSnapshot,
    corpus: &Corpus,
    ids: &[usize],
    config: &HeadFitConfig,
    warm_start: bool,
) -> Result<(ModelSnapshot, HeadFit)> {
    if snapshot.params.is_tied() {
        return Err(Error::InvalidArgument("head-only retraining needs an untied head".into()));
    }
    let phi = snapshot.representations(corpus, ids, &[snapshot.config.layers])?.remove(0);
    let targets: Vec<TokenId> = ids.iter().map(|&i| corpus.target(i)).collect();
    let problem = HeadProblem::new(&phi, &targets, snapshot.config.vocab_size, config.lambda)?;
    let init = if warm_start { Some(snapshot.params.head()) } else { None };
    let fit = fit_head(&problem, init, config)?;
    let mut out = snapshot.clone();
    out.params.set_head(fit.head.clone())?;
    out.stationary = Some(Stationarity {
        lambda: config.lambda,
        tolerance: config.tolerance,
        grad_max_norm: fit.grad_max_norm,
        samples: ids.len(),
        sample_set: sample_set_fingerprint(corpus, ids),
        converged: fit.converged,
    });
    Ok((out, fit))
}
