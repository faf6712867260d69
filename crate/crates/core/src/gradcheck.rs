//! Central finite-difference oracle for reverse-mode gradients.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub coordinates: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { coordinates: 100, step: 1e-5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub slot: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// Coordinates whose relative error exceeds `rel_tol` and whose
    /// absolute error exceeds `abs_floor`.
    pub fn failures(&self, rel_tol: f64, abs_floor: f64) -> Vec<&CoordinateCheck> {
        self.checks
            .iter()
            .filter(|c| c.rel_error > rel_tol && (c.analytic - c.numeric).abs() > abs_floor)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `(f(θ + h·e) − f(θ − h·e)) / 2h` for one coordinate.
pub fn central_difference(f: &impl Fn(&[Tensor]) -> f64, params: &[Tensor], slot: usize, index: usize, h: f64) -> f64 {
    let mut p = params.to_vec();
    let orig = p[slot].data()[index];
    p[slot].data_mut()[index] = orig + h;
    let plus = f(&p);
    p[slot].data_mut()[index] = orig - h;
    let minus = f(&p);
    (plus - minus) / (2.0 * h)
}

/// Compares `grad(params)` with central differences of `loss` at randomly
/// chosen coordinates (uniform over all parameter entries).
pub fn check_coordinates(
    params: &[Tensor],
    loss: impl Fn(&[Tensor]) -> f64,
    grad: impl Fn(&[Tensor]) -> Vec<Tensor>,
    config: &GradCheckConfig,
) -> GradCheckReport {
    let analytic = grad(params);
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = crate::rng::stream(config.seed, "gradcheck");
    let mut checks = Vec::with_capacity(config.coordinates);
    for _ in 0..config.coordinates {
        let mut flat = rng.gen_range(0..total);
        let mut slot = 0;
        while flat >= params[slot].len() {
            flat -= params[slot].len();
            slot += 1;
        }
        let numeric = central_difference(&loss, params, slot, flat, config.step);
        let a = analytic[slot].data()[flat];
        checks.push(CoordinateCheck { slot, index: flat, analytic: a, numeric, rel_error: relative_error(a, numeric) });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    GradCheckReport { checks, max_rel_error }
}
