//! Noise-schedule tables, forward diffusion, one-step clean-latent recovery,
//! and deterministic DDIM stepping.
//!
//! Time steps are 1-indexed: `alpha_bar(t)` is the product of `alpha_1..=t`,
//! and `alpha_bar(0)` is defined as 1 so a DDIM step whose predecessor is 0
//! returns the clean prediction.
//!
//! Table math is kept in `f64` regardless of the tensor scalar width; results
//! are rounded once on store. That keeps the heavily amplified identities
//! (anything divided by `sqrt(alpha_bar)` near the end of the schedule) inside
//! 32-bit verification tolerances.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_1: f64 = 1e-4;
pub const DEFAULT_BETA_T: f64 = 2e-2;
pub const DEFAULT_DDIM_STEPS: usize = 50;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp inclusive of both endpoints.
    pub fn linear(t_max: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::invalid("linear_schedule", format!("T must be >= 2, got {t_max}")));
        }
        if !(0.0 < beta_1 && beta_1 < beta_t && beta_t < 1.0) {
            return Err(Error::invalid(
                "linear_schedule",
                format!("need 0 < beta_1 < beta_T < 1, got {beta_1} and {beta_t}"),
            ));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut alphas = Vec::with_capacity(t_max);
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut running = 1.0f64;
        for i in 0..t_max {
            let beta = beta_1 + (beta_t - beta_1) * i as f64 / (t_max - 1) as f64;
            let alpha = 1.0 - beta;
            running *= alpha;
            betas.push(beta);
            alphas.push(alpha);
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule { t_max, betas, alphas, alpha_bars })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_1, DEFAULT_BETA_T).expect("default schedule is valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) == 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::TimeStepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }

    /// Test hook: corrupts one table entry so downstream identity checks can
    /// demonstrate they actually depend on the table.
    pub fn corrupt_alpha_bar(&mut self, t: usize, value: f64) {
        self.alpha_bars[t - 1] = value;
    }
}

fn zip_f64<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(f64, f64) -> f64) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| S::from_f64(f(x.to_f64(), y.to_f64())))
        .collect();
    Tensor::new_raw(a.shape().to_vec(), data, false)
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    s: &NoiseSchedule,
) -> Result<Tensor<S>> {
    s.check_t(t)?;
    check_same_shape("forward_diffuse", z0, eps)?;
    let ab = s.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(zip_f64(z0, eps, |z, e| ca * z + cb * e))
}

/// One-step backward diffusion: `z_0 = (z_t - sqrt(1-alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_z0<S: Scalar>(
    z_t: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<S>> {
    s.check_t(t)?;
    check_same_shape("predict_z0", z_t, eps)?;
    let ab = s.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(zip_f64(z_t, eps, |z, e| (z - cb * e) / ca))
}

/// Descending sub-sequence of scheduled steps plus each step's predecessor.
#[derive(Debug, Clone)]
pub struct DdimPlan {
    steps: Vec<(usize, usize)>,
}

impl DdimPlan {
    /// `(t, t_prev)` pairs, largest `t` first; the final predecessor is 0.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Evenly strided descending sub-sequence of `{1..T}` of length `steps`.
pub fn ddim_plan(s: &NoiseSchedule, steps: usize) -> Result<DdimPlan> {
    let t_max = s.t_max();
    if steps == 0 || steps > t_max {
        return Err(Error::invalid(
            "ddim_plan",
            format!("steps must be in 1..={t_max}, got {steps}"),
        ));
    }
    let ts: Vec<usize> = (0..steps).map(|j| (steps - j) * t_max / steps).collect();
    let mut pairs = Vec::with_capacity(steps);
    for (j, &t) in ts.iter().enumerate() {
        let prev = if j + 1 < steps { ts[j + 1] } else { 0 };
        pairs.push((t, prev));
    }
    debug_assert!(pairs.windows(2).all(|w| w[0].0 > w[1].0));
    Ok(DdimPlan { steps: pairs })
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    eps_pred: &Tensor<S>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<S>> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(
            "ddim_step",
            format!("t_prev {t_prev} must be below t {t}"),
        ));
    }
    check_same_shape("ddim_step", z_t, eps_pred)?;
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let (ca, cb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(zip_f64(z_t, eps_pred, |z, e| {
        let z0_hat = (z - cb * e) / ca;
        pa * z0_hat + pb * e
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, rel_l2_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle for the running product, via log-space summation.
    fn alpha_bar_oracle(t_max: usize, beta_1: f64, beta_t: f64, t: usize) -> f64 {
        let mut acc = 0.0f64;
        for i in 0..t {
            let beta = beta_1 + (beta_t - beta_1) * i as f64 / (t_max - 1) as f64;
            acc += (1.0 - beta).ln();
        }
        acc.exp()
    }

    #[test]
    fn default_schedule_tables() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.t_max(), 1000);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-18);
        // Single-factor product.
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // Regression anchor, cross-checked against the log-space oracle.
        let oracle = alpha_bar_oracle(1000, 1e-4, 2e-2, 1000);
        assert!(
            (s.alpha_bar(1000) - oracle).abs() / oracle < 1e-10,
            "{} vs {oracle}",
            s.alpha_bar(1000)
        );
        assert!((s.alpha_bar(1000) - 4.0357e-5).abs() < 1e-8);
    }

    #[test]
    fn schedule_bounds_are_enforced() {
        assert!(NoiseSchedule::linear(1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(1000, 2e-2, 1e-4).is_err());
        assert!(NoiseSchedule::linear(1000, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(1000, 1e-4, 1.0).is_err());
    }

    #[test]
    fn monotonicity_invariants() {
        let s = NoiseSchedule::default_linear();
        for t in 2..=s.t_max() {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            let snr = |t: usize| s.alpha_bar(t) / (1.0 - s.alpha_bar(t));
            assert!(snr(t) < snr(t - 1));
        }
        // The running product matches its recurrence exactly as computed.
        for t in 2..=s.t_max() {
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
        }
    }

    #[test]
    fn forward_diffuse_zero_noise_and_t1_limit() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = Tensor::<f32>::randn(vec![4, 4], &mut rng);
        let zeros = Tensor::<f32>::zeros(vec![4, 4]);
        let z_t = forward_diffuse(&z0, 300, &zeros, &s).unwrap();
        let expected = z0.map(|v| (s.alpha_bar(300).sqrt() * v as f64) as f32);
        assert!(max_abs_diff(&z_t, &expected) < 1e-7);

        // alpha_bar -> 1 limit at t=1: distance to z0 is O(sqrt(1 - alpha_bar_1)).
        let eps = Tensor::<f32>::randn(vec![4, 4], &mut rng);
        let z_1 = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        let bound = 5.0 * (1.0 - s.alpha_bar(1)).sqrt();
        assert!(max_abs_diff(&z_1, &z0) < bound, "{} vs {bound}", max_abs_diff(&z_1, &z0));
    }

    #[test]
    fn predict_z0_inverts_forward_diffuse() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &t in &[1usize, 250, 500, 750, 1000] {
            let z0 = Tensor::<f32>::randn(vec![2, 8, 8], &mut rng);
            let eps = Tensor::<f32>::randn(vec![2, 8, 8], &mut rng);
            let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let back = predict_z0(&z_t, &eps, t, &s).unwrap();
            assert!(rel_l2_error(&back, &z0) < 1e-5, "t={t}");
        }
        // 64-bit: near machine-exact.
        let z0 = Tensor::<f64>::randn(vec![64], &mut rng);
        let eps = Tensor::<f64>::randn(vec![64], &mut rng);
        let z_t = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        let back = predict_z0(&z_t, &eps, 1000, &s).unwrap();
        assert!(rel_l2_error(&back, &z0) < 1e-10);
    }

    #[test]
    fn predict_z0_zero_noise_rescales() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z_t = Tensor::<f64>::randn(vec![16], &mut rng);
        let zeros = Tensor::<f64>::zeros(vec![16]);
        let out = predict_z0(&z_t, &zeros, 500, &s).unwrap();
        let expected = z_t.map(|v| v / s.alpha_bar(500).sqrt());
        assert!(max_abs_diff(&out, &expected) < 1e-14);
    }

    #[test]
    fn predict_z0_matches_independent_evaluation() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z0 = Tensor::<f64>::randn(vec![32], &mut rng);
        let eps = Tensor::<f64>::randn(vec![32], &mut rng);
        let t = 500;
        let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let out = predict_z0(&z_t, &eps, t, &s).unwrap();
        let ab = s.alpha_bar(t);
        let oracle: Vec<f64> = z_t
            .to_vec()
            .iter()
            .zip(eps.to_vec())
            .map(|(&z, e)| (z - (1.0 - ab).sqrt() * e) / ab.sqrt())
            .collect();
        let oracle = Tensor::<f64>::from_vec(vec![32], oracle).unwrap();
        assert!(max_abs_diff(&out, &oracle) < 1e-15);
    }

    #[test]
    fn time_step_range_checks() {
        let s = NoiseSchedule::default_linear();
        let z = Tensor::<f32>::zeros(vec![4]);
        assert!(forward_diffuse(&z, 0, &z, &s).is_err());
        assert!(forward_diffuse(&z, 1001, &z, &s).is_err());
        assert!(predict_z0(&z, &z, 1001, &s).is_err());
        let bad = Tensor::<f32>::zeros(vec![5]);
        assert!(forward_diffuse(&z, 10, &bad, &s).is_err());
    }

    #[test]
    fn ddim_plan_shapes() {
        let s = NoiseSchedule::default_linear();
        let full = ddim_plan(&s, 1000).unwrap();
        assert_eq!(full.len(), 1000);
        assert_eq!(full.pairs()[0], (1000, 999));
        assert_eq!(full.pairs()[999], (1, 0));

        let one = ddim_plan(&s, 1).unwrap();
        assert_eq!(one.pairs(), &[(1000, 0)]);

        let fifty = ddim_plan(&s, 50).unwrap();
        assert_eq!(fifty.len(), 50);
        assert_eq!(fifty.pairs()[0], (1000, 980));
        assert_eq!(fifty.pairs()[49], (20, 0));
        for w in fifty.pairs().windows(2) {
            assert_eq!(w[0].0 - w[1].0, 20);
        }
        assert!(ddim_plan(&s, 0).is_err());
        assert!(ddim_plan(&s, 1001).is_err());
    }

    #[test]
    fn ddim_step_terminal_returns_clean_prediction() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z0 = Tensor::<f64>::randn(vec![16], &mut rng);
        let eps = Tensor::<f64>::randn(vec![16], &mut rng);
        let t = 20;
        let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let out = ddim_step(&z_t, &eps, t, 0, &s).unwrap();
        assert!(rel_l2_error(&out, &z0) < 1e-12);
    }

    #[test]
    fn ddim_step_zero_prediction_rescales() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let z_t = Tensor::<f64>::randn(vec![16], &mut rng);
        let zeros = Tensor::<f64>::zeros(vec![16]);
        let (t, t_prev) = (500, 480);
        let out = ddim_step(&z_t, &zeros, t, t_prev, &s).unwrap();
        let ratio = (s.alpha_bar(t_prev) / s.alpha_bar(t)).sqrt();
        let expected = z_t.map(|v| ratio * v);
        assert!(max_abs_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn ddim_step_rejects_bad_predecessor() {
        let s = NoiseSchedule::default_linear();
        let z = Tensor::<f32>::zeros(vec![4]);
        assert!(ddim_step(&z, &z, 100, 100, &s).is_err());
        assert!(ddim_step(&z, &z, 100, 120, &s).is_err());
    }

    #[test]
    fn true_noise_oracle_reconstructs_z0_over_default_plan() {
        let s = NoiseSchedule::default_linear();
        let plan = ddim_plan(&s, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z0 = Tensor::<f32>::randn(vec![4, 8, 8], &mut rng);
        let eps = Tensor::<f32>::randn(vec![4, 8, 8], &mut rng);
        let mut z = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        let mut prev_err = f64::INFINITY;
        for &(t, t_prev) in plan.pairs() {
            let z0_hat = predict_z0(&z, &eps, t, &s).unwrap();
            let err = rel_l2_error(&z0_hat, &z0);
            // Exact algebra keeps this constant; allow float noise only.
            assert!(err <= prev_err + 1e-6, "error grew at t={t}: {err} > {prev_err}");
            prev_err = err;
            z = ddim_step(&z, &eps, t, t_prev, &s).unwrap();
        }
        assert!(rel_l2_error(&z, &z0) < 1e-3);
    }
}
