use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// `θ ← θ − lr·(g + 2λθ)`: the exact gradient of `loss + λ‖θ‖²`.
    GradientDescent,
    /// Adam moments with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: &[Tensor]) -> Result<Self> {
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        let zeros = |ps: &[Tensor]| ps.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let (first, second) = match kind {
            OptimizerKind::GradientDescent => (Vec::new(), Vec::new()),
            OptimizerKind::AdamW { .. } => (zeros(params), zeros(params)),
        };
        Ok(OptimizerState { kind, lr, weight_decay, step: 0, first, second })
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("param {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        match self.kind {
            OptimizerKind::GradientDescent => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * (d + 2.0 * wd * *x);
                    }
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                if self.first.len() != params.len() {
                    return Err(Error::Shape("moment buffers do not match parameters".into()));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    if m.shape() != p.shape() {
                        return Err(Error::Shape("moment buffer shape".into()));
                    }
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((x, &d), mm), vv) in it {
                        *mm = beta1 * *mm + (1.0 - beta1) * d;
                        *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                        let update = (*mm / c1) / ((*vv / c2).sqrt() + eps);
                        *x -= lr * (update + wd * *x);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut opt = OptimizerState::new(OptimizerKind::GradientDescent, 0.3, 0.0, &p).unwrap();
        opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn pure_decay_step() {
        let mut p = scalar_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::GradientDescent, 1.0, 0.5, &p).unwrap();
        opt.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        assert_eq!(p[0].data()[0], 0.0);
    }

    #[test]
    fn gd_update_is_negative_gradient_of_regularized_loss() {
        // loss(θ) = (θ − 3)² / 2, so d/dθ [loss + λθ²] = (θ − 3) + 2λθ
        let (theta, lambda, lr) = (0.75, 0.2, 0.1);
        let mut p = scalar_param(theta);
        let mut opt = OptimizerState::new(OptimizerKind::GradientDescent, lr, lambda, &p).unwrap();
        let g = Tensor::new(vec![1], vec![theta - 3.0]).unwrap();
        opt.step(&mut p, &[g]).unwrap();
        let symbolic = theta - lr * ((theta - 3.0) + 2.0 * lambda * theta);
        assert_eq!(p[0].data()[0], symbolic);
    }

    #[test]
    fn quadratic_bowl_converges_to_minimizer() {
        // f(x, y) = (x − 1)² + 2(y + 2)² + xy; ∇f = 0 at A⁻¹b
        // A = [[2, 1], [1, 4]], b = [2, −8]  ⇒  x* = (16/7, −18/7)
        let mut p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut opt = OptimizerState::new(OptimizerKind::GradientDescent, 0.3, 0.0, &p).unwrap();
        for _ in 0..100 {
            let (x, y) = (p[0].data()[0], p[0].data()[1]);
            let g = Tensor::new(vec![2], vec![2.0 * (x - 1.0) + y, 4.0 * (y + 2.0) + x]).unwrap();
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0].data()[0] - 16.0 / 7.0).abs() < 1e-6);
        assert!((p[0].data()[1] + 18.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::adamw(), 0.1, 0.0, &p).unwrap();
        assert!(opt.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert!(OptimizerState::new(OptimizerKind::GradientDescent, 0.1, -1.0, &p).is_err());
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p = scalar_param(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::adamw(), 0.01, 0.0, &p).unwrap();
        opt.step(&mut p, &[Tensor::new(vec![1], vec![5.0]).unwrap()]).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
    }
}
