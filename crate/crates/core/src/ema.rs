//! Momentum branch maintenance: the per-batch EMA update, its exact
//! closed-form oracle, and a verifier for the unrolled-gradient
//! approximation of the update.
//!
//! The update is `eps_t = m*eps_{t-1} + (1-m)*theta_{t-1}`. Unrolling it over
//! a plain-SGD trajectory gives the approximation
//! `eps_t ~ theta_t + sum_{i=1..t-1} m^i * eta * grad_{t-i} + m^t*(eps_1 - theta_1)`,
//! whose residual against the exact recursion must shrink with the learning
//! rate. [`verify_unrolled_approximation`] measures exactly that.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Momentum coefficient and step counter for one EMA-tracked branch.
///
/// The tracked parameter copies themselves live in the model's momentum
/// block; [`EmaState::update_pairs`] walks (theta, epsilon) tensor pairs.
#[derive(Debug, Clone)]
pub struct EmaState {
    m: f64,
    t: u64,
}

impl EmaState {
    pub fn new(m: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!(
                "ema: momentum must be in [0,1), got {}",
                m
            )));
        }
        Ok(EmaState { m, t: 0 })
    }

    pub fn momentum(&self) -> f64 {
        self.m
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One EMA step over every (theta, epsilon) pair. Called once per
    /// mini-batch, after the optimizer step.
    pub fn update_pairs<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a Tensor, &'a mut Tensor)>,
    {
        for (theta, epsilon) in pairs {
            if theta.shape() != epsilon.shape() {
                return Err(Error::Corruption(format!(
                    "ema: theta shape {:?} does not match epsilon shape {:?}",
                    theta.shape(),
                    epsilon.shape()
                )));
            }
            ema_update_slice(self.m, theta.data(), epsilon.data_mut());
        }
        self.t += 1;
        Ok(())
    }
}

/// Elementwise `eps = m*eps + (1-m)*theta`, clamped into the convex hull of
/// the two operands so rounding can never push an element outside
/// [min(eps,theta), max(eps,theta)].
pub fn ema_update_slice(m: f64, theta: &[f64], epsilon: &mut [f64]) {
    debug_assert_eq!(theta.len(), epsilon.len());
    for (e, &th) in epsilon.iter_mut().zip(theta) {
        let blended = m * *e + (1.0 - m) * th;
        let (lo, hi) = if *e <= th { (*e, th) } else { (th, *e) };
        *e = blended.clamp(lo, hi);
    }
}

/// Exact unrolled recursion:
/// `eps_t = m^(t-1)*eps_1 + (1-m)*sum_{i=1..t-1} m^(t-1-i)*theta_i`.
///
/// `theta_history[i]` holds theta_{i+1}; entries 0..t-1 must be present.
pub fn ema_closed_form(
    theta_history: &[Vec<f64>],
    epsilon1: &[f64],
    m: f64,
    t: usize,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Usage("ema_closed_form: t starts at 1".into()));
    }
    if theta_history.len() < t - 1 {
        return Err(Error::Usage(format!(
            "ema_closed_form: need {} theta snapshots for t={}, got {}",
            t - 1,
            t,
            theta_history.len()
        )));
    }
    let dim = epsilon1.len();
    let mut out = vec![0.0; dim];
    // m^(t-1) by repeated multiplication, matching the iterated update's
    // operation count closely enough for the 1e-12 exactness contract.
    let mut lead = 1.0;
    for _ in 0..t - 1 {
        lead *= m;
    }
    for (o, &e1) in out.iter_mut().zip(epsilon1) {
        *o = lead * e1;
    }
    for i in 1..t {
        let theta_i = &theta_history[i - 1];
        if theta_i.len() != dim {
            return Err(Error::Usage(format!(
                "ema_closed_form: snapshot {} has dim {}, expected {}",
                i,
                theta_i.len(),
                dim
            )));
        }
        let mut w = 1.0 - m;
        for _ in 0..t - 1 - i {
            w *= m;
        }
        for (o, &th) in out.iter_mut().zip(theta_i) {
            *o += w * th;
        }
    }
    Ok(out)
}

/// A recorded plain-SGD trajectory: snapshots theta_1..theta_T, the gradient
/// at each visited point g_1..g_{T-1}, the learning rate, and the initial
/// momentum copy.
#[derive(Debug, Clone)]
pub struct SgdTrace {
    pub eta: f64,
    /// theta[k] is the parameter vector at step k+1.
    pub theta: Vec<Vec<f64>>,
    /// grads[k] is the loss gradient at theta[k]; one shorter than `theta`.
    pub grads: Vec<Vec<f64>>,
    /// Initial momentum copy eps_1 (usually equal to theta_1).
    pub epsilon1: Vec<f64>,
}

impl SgdTrace {
    /// Check the trace really is plain SGD: theta_{k+1} = theta_k - eta*g_k.
    pub fn validate_sgd(&self) -> Result<()> {
        if self.theta.is_empty() {
            return Err(Error::Usage("sgd trace: empty".into()));
        }
        if self.grads.len() + 1 != self.theta.len() {
            return Err(Error::Usage(format!(
                "sgd trace: {} snapshots need {} gradients, got {}",
                self.theta.len(),
                self.theta.len() - 1,
                self.grads.len()
            )));
        }
        let dim = self.theta[0].len();
        if self.epsilon1.len() != dim {
            return Err(Error::Usage("sgd trace: epsilon1 dim mismatch".into()));
        }
        for k in 0..self.grads.len() {
            if self.theta[k + 1].len() != dim || self.grads[k].len() != dim {
                return Err(Error::Usage("sgd trace: ragged dimensions".into()));
            }
            for j in 0..dim {
                let predicted = self.theta[k][j] - self.eta * self.grads[k][j];
                let err = (self.theta[k + 1][j] - predicted).abs();
                let scale = 1.0 + self.theta[k + 1][j].abs();
                if err > 1e-9 * scale {
                    return Err(Error::Usage(format!(
                        "sgd trace: step {} is not a plain SGD update (deviation {:.3e}); \
                         the unrolled approximation only applies to plain SGD runs",
                        k + 1,
                        err
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.theta.len()
    }
}

/// Residual of the unrolled approximation at one step for one learning rate.
#[derive(Debug, Clone, Copy)]
pub struct ResidualRow {
    pub step: usize,
    pub eta: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
}

/// Residuals over a whole trace.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
}

impl ResidualReport {
    pub fn final_max_residual(&self) -> f64 {
        self.rows.last().map(|r| r.max_residual).unwrap_or(0.0)
    }
}

/// Compare the unrolled-gradient approximation against the exact EMA
/// recursion along a recorded plain-SGD run.
///
/// For each prefix length t the report row holds
/// `max_j |eps_t[j] - rhs_t[j]|` where `eps_t` comes from iterating the
/// update and `rhs_t` is the approximation's right-hand side.
pub fn verify_unrolled_approximation(trace: &SgdTrace, m: f64) -> Result<ResidualReport> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!(
            "ema: momentum must be in [0,1), got {}",
            m
        )));
    }
    trace.validate_sgd()?;
    let dim = trace.epsilon1.len();
    let total = trace.steps();

    let mut rows = Vec::with_capacity(total);
    let mut epsilon = trace.epsilon1.clone();
    for t in 1..=total {
        if t >= 2 {
            // eps_t from eps_{t-1} and theta_{t-1}
            ema_update_slice(m, &trace.theta[t - 2], &mut epsilon);
        }
        // rhs_t = theta_t + eta * sum_{i=1..t-1} m^i g_{t-i} + m^t (eps_1 - theta_1)
        let mut rhs = trace.theta[t - 1].clone();
        let mut mpow = m;
        for i in 1..t {
            let g = &trace.grads[t - 1 - i];
            for j in 0..dim {
                rhs[j] += mpow * trace.eta * g[j];
            }
            mpow *= m;
        }
        let mut mt = 1.0;
        for _ in 0..t {
            mt *= m;
        }
        for j in 0..dim {
            rhs[j] += mt * (trace.epsilon1[j] - trace.theta[0][j]);
        }
        let mut max_r: f64 = 0.0;
        let mut sum_r = 0.0;
        for j in 0..dim {
            let r = (epsilon[j] - rhs[j]).abs();
            max_r = max_r.max(r);
            sum_r += r;
        }
        rows.push(ResidualRow {
            step: t,
            eta: trace.eta,
            max_residual: max_r,
            mean_residual: sum_r / dim as f64,
        });
    }
    Ok(ResidualReport { rows })
}

/// A fixed random quadratic `L(theta) = 0.5*sum a_i (theta_i - b_i)^2`
/// used as the verifier's toy problem.
#[derive(Debug, Clone)]
pub struct QuadraticToy {
    curvature: Vec<f64>,
    target: Vec<f64>,
    theta1: Vec<f64>,
}

impl QuadraticToy {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Aux);
        let curvature = (0..dim).map(|_| rng.gen_range(0.5..2.0)).collect();
        let target = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta1 = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        QuadraticToy {
            curvature,
            target,
            theta1,
        }
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.curvature)
            .zip(&self.target)
            .map(|((&th, &a), &b)| a * (th - b))
            .collect()
    }

    /// Run plain SGD for `steps` snapshots and record the trace
    /// (with eps_1 = theta_1).
    pub fn record_sgd(&self, eta: f64, steps: usize) -> SgdTrace {
        let mut theta = vec![self.theta1.clone()];
        let mut grads = Vec::new();
        for _ in 1..steps {
            let current = theta.last().unwrap();
            let g = self.gradient(current);
            let next: Vec<f64> = current
                .iter()
                .zip(&g)
                .map(|(&th, &gv)| th - eta * gv)
                .collect();
            grads.push(g);
            theta.push(next);
        }
        SgdTrace {
            eta,
            theta,
            grads,
            epsilon1: self.theta1.clone(),
        }
    }
}

/// Verifier outcome across a ladder of learning rates.
#[derive(Debug, Clone)]
pub struct MonotoneReport {
    pub reports: Vec<ResidualReport>,
    /// Final-step max residuals, one per learning rate.
    pub final_residuals: Vec<f64>,
    /// True when the final residual strictly decreases as eta halves.
    pub monotone: bool,
}

impl MonotoneReport {
    /// CSV rows: step, eta, max_residual, mean_residual.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,eta,max_residual,mean_residual")?;
        for report in &self.reports {
            for row in &report.rows {
                writeln!(
                    w,
                    "{},{},{:.17e},{:.17e}",
                    row.step, row.eta, row.max_residual, row.mean_residual
                )?;
            }
        }
        Ok(())
    }
}

/// Run the quadratic toy at `eta`, `eta/2`, `eta/4` and check that the
/// final-step residual of the unrolled approximation decreases monotonically.
pub fn residual_ladder(
    dim: usize,
    steps: usize,
    m: f64,
    eta: f64,
    seed: u64,
) -> Result<MonotoneReport> {
    let toy = QuadraticToy::new(dim, seed);
    let mut reports = Vec::new();
    let mut finals = Vec::new();
    for k in 0..3 {
        let scaled = eta / f64::powi(2.0, k);
        let trace = toy.record_sgd(scaled, steps);
        let report = verify_unrolled_approximation(&trace, m)?;
        finals.push(report.final_max_residual());
        reports.push(report);
    }
    let monotone = finals.windows(2).all(|w| w[1] < w[0]);
    Ok(MonotoneReport {
        reports,
        final_residuals: finals,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_momentum_copies_theta_exactly() {
        let mut eps = vec![5.0, -3.0, 1e300];
        let theta = vec![1.0, 2.0, 3.0];
        ema_update_slice(0.0, &theta, &mut eps);
        assert_eq!(eps, theta);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut eps = vec![1.0];
        ema_update_slice(0.9, &[0.0], &mut eps);
        assert_abs_diff_eq!(eps[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn fixed_point_is_exact() {
        let c = 0.731;
        let mut eps = vec![c];
        for _ in 0..1000 {
            ema_update_slice(0.999, &[c], &mut eps);
        }
        assert_eq!(eps[0], c);
    }

    #[test]
    fn geometric_forgetting_to_zero_is_bit_exact() {
        // theta held at 0: |eps_t| = m^t |eps_0| with the same multiply order
        let m = 0.95;
        let mut eps = vec![1.7];
        let mut expect = 1.7;
        for _ in 0..200 {
            ema_update_slice(m, &[0.0], &mut eps);
            expect *= m;
        }
        assert_eq!(eps[0], expect);
    }

    #[test]
    fn geometric_forgetting_general_center() {
        let (m, c) = (0.9, 2.5);
        let mut eps = vec![-1.0];
        for _ in 0..50 {
            ema_update_slice(m, &[c], &mut eps);
        }
        let expect = c + m.powi(50) * (-1.0 - c);
        assert_abs_diff_eq!(eps[0], expect, epsilon = 1e-12 * c.abs());
    }

    #[test]
    fn closed_form_degenerate_cases() {
        // t=1: empty sum, eps unchanged
        let eps1 = vec![2.0, -1.0];
        let out = ema_closed_form(&[], &eps1, 0.7, 1).unwrap();
        assert_eq!(out, eps1);
        // t=2, m=0.5, eps1=2, theta1=0 -> 1.0
        let out = ema_closed_form(&[vec![0.0]], &[2.0], 0.5, 2).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn closed_form_requires_history() {
        let r = ema_closed_form(&[vec![0.0]], &[1.0], 0.5, 4);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn closed_form_matches_iteration_ten_steps() {
        let mut rng = stream_rng(40, Stream::Aux);
        let m = 0.99;
        let history: Vec<Vec<f64>> = (0..9).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect();
        let eps1 = vec![rng.gen_range(-2.0..2.0)];
        let mut eps = eps1.clone();
        for theta in &history {
            ema_update_slice(m, theta, &mut eps);
        }
        let closed = ema_closed_form(&history, &eps1, m, 10).unwrap();
        let rel = (eps[0] - closed[0]).abs() / eps[0].abs().max(1e-30);
        assert!(rel <= 1e-12, "relative error {}", rel);
    }

    #[test]
    fn update_pairs_rejects_shape_mismatch() {
        let theta = Tensor::zeros(&[2, 2]);
        let mut eps = Tensor::zeros(&[4]);
        let mut state = EmaState::new(0.9).unwrap();
        let r = state.update_pairs(std::iter::once((&theta, &mut eps)));
        assert!(matches!(r, Err(Error::Corruption(_))));
    }

    #[test]
    fn state_counts_steps() {
        let theta = Tensor::full(&[3], 1.0);
        let mut eps = Tensor::zeros(&[3]);
        let mut state = EmaState::new(0.5).unwrap();
        for _ in 0..4 {
            state.update_pairs(std::iter::once((&theta, &mut eps))).unwrap();
        }
        assert_eq!(state.step_count(), 4);
        assert!(EmaState::new(1.0).is_err());
    }

    #[test]
    fn verifier_zero_eta_residual_is_exactly_zero() {
        let toy = QuadraticToy::new(4, 77);
        let trace = toy.record_sgd(0.0, 20);
        let report = verify_unrolled_approximation(&trace, 0.9).unwrap();
        for row in &report.rows {
            assert_eq!(row.max_residual, 0.0);
        }
    }

    #[test]
    fn verifier_t2_matches_symbolic_expansion() {
        // residual at t=2 is |(1-m)(m(eps1-theta1) + eta*g1)|
        let (m, eta) = (0.9, 0.01);
        let (theta1, eps1) = (0.8, -0.3);
        let g1 = 1.3 * (theta1 - 0.2);
        let trace = SgdTrace {
            eta,
            theta: vec![vec![theta1], vec![theta1 - eta * g1]],
            grads: vec![vec![g1]],
            epsilon1: vec![eps1],
        };
        let report = verify_unrolled_approximation(&trace, m).unwrap();
        let expect = ((1.0 - m) * (m * (eps1 - theta1) + eta * g1)).abs();
        assert_abs_diff_eq!(report.rows[1].max_residual, expect, epsilon = 1e-14);
    }

    #[test]
    fn verifier_rejects_non_sgd_trace() {
        let trace = SgdTrace {
            eta: 0.1,
            theta: vec![vec![1.0], vec![0.5]],
            grads: vec![vec![0.1]], // 1.0 - 0.1*0.1 = 0.99 != 0.5
            epsilon1: vec![1.0],
        };
        assert!(matches!(
            verify_unrolled_approximation(&trace, 0.9),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn residual_ladder_is_monotone_on_quadratic() {
        let report = residual_ladder(6, 50, 0.9, 1e-3, 3).unwrap();
        assert!(
            report.monotone,
            "residuals not monotone: {:?}",
            report.final_residuals
        );
        assert!(report.final_residuals[0] > 0.0);
    }

    proptest! {
        #[test]
        fn convexity_of_update(
            m in 0.0f64..0.9999,
            eps in -100.0f64..100.0,
            theta in -100.0f64..100.0,
        ) {
            let mut e = vec![eps];
            ema_update_slice(m, &[theta], &mut e);
            let (lo, hi) = if eps <= theta { (eps, theta) } else { (theta, eps) };
            prop_assert!(e[0] >= lo && e[0] <= hi);
        }

        #[test]
        fn closed_form_matches_iteration(
            seed in 0u64..1000,
            t in 1usize..100,
            m_idx in 0usize..4,
        ) {
            let m = [0.0, 0.5, 0.9, 0.999][m_idx];
            let mut rng = stream_rng(seed, Stream::Aux);
            let dim = 3;
            let history: Vec<Vec<f64>> = (0..t - 1)
                .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let eps1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut eps = eps1.clone();
            for theta in &history {
                ema_update_slice(m, theta, &mut eps);
            }
            let closed = ema_closed_form(&history, &eps1, m, t).unwrap();
            for j in 0..dim {
                let denom = eps[j].abs().max(1e-30);
                prop_assert!((eps[j] - closed[j]).abs() / denom <= 1e-12);
            }
        }
    }
}
