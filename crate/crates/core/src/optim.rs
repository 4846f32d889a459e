//! Adam with decoupled weight decay, split into parameter groups so the
//! denoiser and the fusion module can run at different learning rates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-group optimizer state: first/second moment accumulators shaped like
/// their parameters, plus the shared step counter.
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl OptimizerState {
    pub fn new<S: Scalar>(config: AdamWConfig, params: &[Tensor<S>]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        }
    }

    /// One decoupled-weight-decay update, in place, reading each parameter's
    /// accumulated gradient (missing gradients count as zero). Decay is
    /// applied first, then the bias-corrected adaptive step.
    pub fn step<S: Scalar>(&mut self, params: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::invalid(
                "optimizer_step",
                format!("state holds {} params, got {}", self.shapes.len(), params.len()),
            ));
        }
        for (p, shape) in params.iter().zip(&self.shapes) {
            if p.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_or_zeros();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad[j].to_f64();
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    let mut x = data[j].to_f64();
                    x *= 1.0 - c.lr * c.weight_decay;
                    x -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    data[j] = S::from_f64(x);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_a_fixed_point() {
        let p = Tensor::<f64>::from_vec(vec![3], vec![0.5, -1.0, 2.0])
            .unwrap()
            .requires_grad();
        let mut state = OptimizerState::new(
            AdamWConfig { weight_decay: 0.0, ..Default::default() },
            &[p.clone()],
        );
        state.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, -1.0, 2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_scalar_step_matches_hand_evaluation() {
        // p=1, g=0.5, lr=0.01, b1=0.9, b2=0.999, eps=1e-8, wd=0.1:
        //   decay:  p = 1 * (1 - 0.001) = 0.999
        //   m=0.05, v=2.5e-4; mhat=0.5, vhat=0.25
        //   p = 0.999 - 0.01 * 0.5 / (0.5 + 1e-8)
        let p = Tensor::<f64>::from_vec(vec![1], vec![1.0]).unwrap().requires_grad();
        p.accumulate_grad(&[0.5]);
        let cfg = AdamWConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut state = OptimizerState::new(cfg, &[p.clone()]);
        state.step(&[p.clone()]).unwrap();
        let expected = 0.999 - 0.01 * 0.5 / (0.5f64 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15, "{} vs {expected}", p.item());
    }

    #[test]
    fn shape_drift_is_rejected() {
        let p = Tensor::<f32>::zeros(vec![2]).requires_grad();
        let mut state = OptimizerState::new(AdamWConfig::default(), &[p]);
        let other = Tensor::<f32>::zeros(vec![3]).requires_grad();
        assert!(state.step(&[other]).is_err());
    }
}
