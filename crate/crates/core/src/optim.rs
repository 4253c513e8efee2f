//! Parameter updates: plain SGD and Adam.
//!
//! The optimizer reads each parameter's accumulated `grad` buffer; a missing
//! buffer counts as a zero gradient (legitimate when a path is blocked by
//! stop-gradient). Moment buffers are keyed by position, so the caller must
//! pass the same parameter list every step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    eta: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(eta: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            eta,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(eta: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            eta,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, eta: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::sgd(eta),
            OptimizerKind::Adam => Optimizer::adam(eta, beta1, beta2, eps),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the parameter list.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let Some(grad) = p.grad.clone() else { continue };
                    for (x, g) in p.data_mut().iter_mut().zip(&grad) {
                        *x -= self.eta * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                    self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                }
                if self.m.len() != params.len() {
                    return Err(Error::Corruption(format!(
                        "optimizer: {} moment buffers for {} params",
                        self.m.len(),
                        params.len()
                    )));
                }
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    if self.m[i].len() != p.numel() {
                        return Err(Error::Corruption(
                            "optimizer: parameter size changed between steps".into(),
                        ));
                    }
                    let grad: Vec<f64> =
                        p.grad.clone().unwrap_or_else(|| vec![0.0; p.numel()]);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *x -= self.eta * mhat / (vhat.sqrt() + self.eps);
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
    use approx::assert_abs_diff_eq;

    #[test]
    fn sgd_applies_plain_update() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        p.grad = Some(vec![0.5, -1.0]);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_abs_diff_eq!(p.data()[0], 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(p.data()[1], -1.9, epsilon = 1e-15);
    }

    #[test]
    fn sgd_skips_params_without_grad() {
        let mut p = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 3.0);
    }

    #[test]
    fn adam_first_step_moves_by_eta() {
        // with bias correction, |update| of the first step is eta * g/(|g|+eps)
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        p.grad = Some(vec![4.0]);
        let mut opt = Optimizer::adam(1e-3, 0.9, 0.999, 1e-8);
        opt.step(&mut [&mut p]).unwrap();
        assert_abs_diff_eq!(p.data()[0], -1e-3, epsilon = 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (x-3)^2
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut opt = Optimizer::adam(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let x = p.data()[0];
            p.grad = Some(vec![2.0 * (x - 3.0)]);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_abs_diff_eq!(p.data()[0], 3.0, epsilon = 1e-2);
    }
}
