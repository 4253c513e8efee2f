//! Multi-label losses over raw logits: binary cross-entropy and the
//! asymmetric loss (separate focusing exponents for positives and negatives
//! plus probability clipping of negatives). Both reduce by the mean over
//! batch times classes and register their own backward rules on the tape.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{softplus, stable_sigmoid, Tensor};

/// Which loss a training stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Asl,
}

/// Loss selection plus asymmetric-loss hyperparameters.
///
/// The asymmetric defaults (`gamma_pos`=0, `gamma_neg`=4, `prob_shift`=0.05)
/// are the common external convention for this loss, not values pinned by
/// any experiment here; run manifests flag them as assumptions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub prob_shift: f64,
}

impl LossConfig {
    pub fn bce() -> Self {
        LossConfig {
            kind: LossKind::Bce,
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            prob_shift: 0.0,
        }
    }

    pub fn asl_default() -> Self {
        LossConfig {
            kind: LossKind::Asl,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            prob_shift: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::Config(
                "loss: focusing exponents must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.prob_shift) {
            return Err(Error::Config(format!(
                "loss: prob_shift must be in [0,1), got {}",
                self.prob_shift
            )));
        }
        Ok(())
    }

    /// Apply the configured loss to logits against binary targets.
    pub fn apply(&self, g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
        self.validate()?;
        match self.kind {
            LossKind::Bce => g.bce_with_logits(logits, targets),
            LossKind::Asl => {
                g.asymmetric_loss(logits, targets, self.gamma_pos, self.gamma_neg, self.prob_shift)
            }
        }
    }
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "loss: logits shape {:?} vs targets shape {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input("loss: targets must be exactly 0 or 1".into()));
    }
    Ok(())
}

impl Graph {
    /// Mean binary cross-entropy from logits, in the stable log-sum-exp form
    /// `max(l,0) - l*y + log(1+exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        check_targets(self.value(logits), targets)?;
        let count = targets.numel() as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &y)| l.max(0.0) - l * y + softplus(-l.abs()))
            .sum();
        let y = targets.clone();
        Ok(self.push_unary_loss(
            Tensor::scalar(total / count),
            logits,
            Box::new(move |g, logits_val| {
                logits_val
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&l, &yv)| g * (stable_sigmoid(l) - yv) / count)
                    .collect()
            }),
        ))
    }

    /// Mean asymmetric loss. With `p = sigmoid(l)` and
    /// `pm = max(p - prob_shift, 0)`:
    /// positives contribute `-(1-p)^gamma_pos * log(p)`, negatives
    /// `-pm^gamma_neg * log(1-pm)`. Zero exponents and zero shift reduce it
    /// to binary cross-entropy.
    pub fn asymmetric_loss(
        &mut self,
        logits: Var,
        targets: &Tensor,
        gamma_pos: f64,
        gamma_neg: f64,
        prob_shift: f64,
    ) -> Result<Var> {
        check_targets(self.value(logits), targets)?;
        if !(0.0..1.0).contains(&prob_shift) {
            return Err(Error::Config(format!(
                "loss: prob_shift must be in [0,1), got {}",
                prob_shift
            )));
        }
        if gamma_pos < 0.0 || gamma_neg < 0.0 {
            return Err(Error::Config(
                "loss: focusing exponents must be nonnegative".into(),
            ));
        }
        let count = targets.numel() as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &y)| asl_element(l, y, gamma_pos, gamma_neg, prob_shift))
            .sum();
        let y = targets.clone();
        Ok(self.push_unary_loss(
            Tensor::scalar(total / count),
            logits,
            Box::new(move |g, logits_val| {
                logits_val
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&l, &yv)| {
                        g * asl_element_grad(l, yv, gamma_pos, gamma_neg, prob_shift) / count
                    })
                    .collect()
            }),
        ))
    }
}

fn asl_element(l: f64, y: f64, gamma_pos: f64, gamma_neg: f64, shift: f64) -> f64 {
    let p = stable_sigmoid(l);
    if y == 1.0 {
        // log(p) = -softplus(-l)
        let log_p = -softplus(-l);
        -(1.0 - p).powf(gamma_pos) * log_p
    } else {
        let pm = (p - shift).max(0.0);
        if pm == 0.0 {
            return 0.0;
        }
        // 1 - pm = (1-p) + shift; 1-p computed as sigmoid(-l)
        let one_minus_pm = stable_sigmoid(-l) + shift;
        let log_term = if shift == 0.0 {
            -softplus(l)
        } else {
            one_minus_pm.ln()
        };
        -pm.powf(gamma_neg) * log_term
    }
}

fn asl_element_grad(l: f64, y: f64, gamma_pos: f64, gamma_neg: f64, shift: f64) -> f64 {
    let p = stable_sigmoid(l);
    let dp = p * (1.0 - p);
    if y == 1.0 {
        let log_p = -softplus(-l);
        // d/dl of -(1-p)^g log(p)
        gamma_pos * p * (1.0 - p).powf(gamma_pos) * log_p - (1.0 - p).powf(gamma_pos + 1.0)
    } else {
        let pm = p - shift;
        if pm <= 0.0 {
            // clipped region; at the kink itself take the flat side
            return 0.0;
        }
        let one_minus_pm = stable_sigmoid(-l) + shift;
        let log_term = if shift == 0.0 {
            -softplus(l)
        } else {
            one_minus_pm.ln()
        };
        let d_dpm = -gamma_neg * pm.powf(gamma_neg - 1.0) * log_term
            + pm.powf(gamma_neg) / one_minus_pm;
        d_dpm * dp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn run_bce(logits: &[f64], targets: &[f64]) -> f64 {
        let n = logits.len();
        let mut g = Graph::new();
        let lv = g.leaf(Tensor::from_vec(&[1, n], logits.to_vec()).unwrap(), true);
        let y = Tensor::from_vec(&[1, n], targets.to_vec()).unwrap();
        let loss = g.bce_with_logits(lv, &y).unwrap();
        g.value(loss).item().unwrap()
    }

    fn run_asl(logits: &[f64], targets: &[f64], gp: f64, gn: f64, shift: f64) -> f64 {
        let n = logits.len();
        let mut g = Graph::new();
        let lv = g.leaf(Tensor::from_vec(&[1, n], logits.to_vec()).unwrap(), true);
        let y = Tensor::from_vec(&[1, n], targets.to_vec()).unwrap();
        let loss = g.asymmetric_loss(lv, &y, gp, gn, shift).unwrap();
        g.value(loss).item().unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let loss = run_bce(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bce_saturates_without_overflow() {
        let loss = run_bce(&[20.0], &[1.0]);
        assert!(loss < 1e-8 && loss > 0.0);
        let loss = run_bce(&[700.0, -700.0], &[1.0, 0.0]);
        assert!(loss.is_finite());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = crate::rng::stream_rng(21, crate::rng::Stream::Aux);
        let logits: Vec<f64> = (0..56).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let targets: Vec<f64> = (0..56).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let naive: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&l, &y)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 56.0;
        let loss = run_bce(&logits, &targets);
        assert_abs_diff_eq!(loss, naive, epsilon = 1e-10);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut g = Graph::new();
        let lv = g.leaf(Tensor::zeros(&[1, 2]), true);
        let y = Tensor::from_vec(&[1, 2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            g.bce_with_logits(lv, &y),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn asl_with_zero_focusing_equals_bce() {
        let mut rng = crate::rng::stream_rng(22, crate::rng::Stream::Aux);
        let logits: Vec<f64> = (0..40).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let targets: Vec<f64> = (0..40).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let a = run_asl(&logits, &targets, 0.0, 0.0, 0.0);
        let b = run_bce(&logits, &targets);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn asl_clips_easy_negatives_to_zero() {
        // sigmoid(l) <= 0.05 for l <= ln(0.05/0.95)
        let l = (0.05f64 / 0.95).ln() - 1.0;
        let loss = run_asl(&[l], &[0.0], 0.0, 4.0, 0.05);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn asl_matches_scalar_oracle() {
        let (gp, gn, shift) = (0.0, 4.0, 0.05);
        for &l in &[-3.0, -0.5, 0.2, 1.7, 4.0] {
            for &y in &[0.0, 1.0] {
                let p = 1.0 / (1.0 + (-l as f64).exp());
                let expect = if y == 1.0 {
                    -(1.0 - p).powf(gp) * p.ln()
                } else {
                    let pm = (p - shift).max(0.0);
                    if pm == 0.0 {
                        0.0
                    } else {
                        -pm.powf(gn) * (1.0 - pm).ln()
                    }
                };
                let got = run_asl(&[l], &[y], gp, gn, shift);
                assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn asl_rejects_bad_shift() {
        let mut g = Graph::new();
        let lv = g.leaf(Tensor::zeros(&[1, 2]), true);
        let y = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            g.asymmetric_loss(lv, &y, 0.0, 4.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = crate::rng::stream_rng(23, crate::rng::Stream::Aux);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let targets: Vec<f64> = (0..10).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            assert!(run_bce(&logits, &targets) >= 0.0);
            assert!(run_asl(&logits, &targets, 1.0, 4.0, 0.05) >= 0.0);
        }
    }

    #[test]
    fn increasing_gamma_neg_decreases_negative_loss() {
        // monotone focusing for fixed p in (shift, 1)
        for &l in &[-1.0, 0.0, 1.0, 2.5] {
            let mut prev = f64::INFINITY;
            for gn in [0.0, 1.0, 2.0, 4.0, 8.0] {
                let cur = run_asl(&[l], &[0.0], 0.0, gn, 0.05);
                assert!(
                    cur < prev,
                    "loss not strictly decreasing at l={}, gamma_neg={}",
                    l,
                    gn
                );
                prev = cur;
            }
        }
    }
}
