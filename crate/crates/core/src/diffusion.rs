//! Forward/reverse score-based diffusion with a linear noise schedule.
//!
//! The forward process runs on t in [0, 1] and admits closed-form marginals:
//! given clean data `x0`, the state at time t is Gaussian with mean
//! `mean_coef(t) * x0` and isotropic variance `lambda(t)`, where
//!
//! ```text
//! cum_beta(t)  = beta0*t + (beta1 - beta0)*t^2/2
//! mean_coef(t) = exp(-cum_beta(t)/2)
//! lambda(t)    = 1 - exp(-cum_beta(t))
//! ```
//!
//! Generation integrates the reverse-time SDE with an Euler-Maruyama step
//! (`reverse_step`) driven by a score function, starting from a standard
//! Gaussian terminal state. For Gaussian data the score is available in
//! closed form, which gives an end-to-end analytic oracle for the sampler.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Noise scales below this cannot form a usable score-matching target.
pub const LAMBDA_EPSILON: f64 = 1e-8;

/// Lower bound of the training-time distribution; keeps draws away from the
/// lambda -> 0 singularity at t = 0.
pub const TRAIN_T_MIN: f64 = 1e-3;

/// Linear-in-time noise schedule over the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        if !(beta0 > 0.0 && beta1 >= beta0) {
            return Err(Error::domain(format!(
                "noise schedule requires 0 < beta0 <= beta1, got beta0={beta0}, beta1={beta1}"
            )));
        }
        Ok(Self { beta0, beta1 })
    }

    /// Instantaneous rate beta(t).
    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// Integral of beta over [0, t], evaluated in closed form.
    pub fn cum_beta(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.beta0 * t + (self.beta1 - self.beta0) * t * t / 2.0)
    }

    /// Closed-form marginal coefficients at time t.
    pub fn marginal_params(&self, t: f64) -> Result<MarginalParams> {
        let cum = self.cum_beta(t)?;
        Ok(MarginalParams {
            mean_coef: (-0.5 * cum).exp(),
            variance: 1.0 - (-cum).exp(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.beta0, self.beta1).map(|_| ())
    }
}

/// Mean coefficient and variance of the forward marginal `x_t | x_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalParams {
    /// Multiplier on `x0` in the conditional mean; in (0, 1].
    pub mean_coef: f64,
    /// Isotropic conditional variance lambda(t); in [0, 1).
    pub variance: f64,
}

/// Settings for the discretized reverse sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of reverse steps N.
    pub n_steps: usize,
    /// Include the sqrt(beta_t/N) * z noise term in each step.
    pub stochastic: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            stochastic: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::domain("sampler requires n_steps >= 1"));
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_time_positive(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(format!("time {t} outside (0, 1]")));
    }
    Ok(())
}

/// Elementwise standard normal draw of the given shape.
pub fn standard_normal(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Diffuse `x0` to time t.
///
/// Returns `(x_t, eps)` where `eps ~ Normal(0, lambda(t) I)` is the realized
/// noise, i.e. `x_t = mean_coef(t) * x0 + eps`. The returned `eps` is the
/// quantity targeted by [`score_matching_loss`]: the true conditional score
/// at `x_t` is `-eps / lambda(t)`.
pub fn forward_sample(
    x0: &Array2<f64>,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_time_positive(t)?;
    let mp = schedule.marginal_params(t)?;
    let z = standard_normal(x0.dim(), rng);
    let eps = z.mapv(|v| v * mp.variance.sqrt());
    let xt = x0.mapv(|v| v * mp.mean_coef) + &eps;
    Ok((xt, eps))
}

/// Score of the conditional `p_t(x_t | x_0)`: `-(x_t - mean_coef*x0) / lambda(t)`.
pub fn true_score_gaussian(
    xt: &Array2<f64>,
    x0: &Array2<f64>,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_time_positive(t)?;
    if xt.dim() != x0.dim() {
        return Err(Error::shape(format!(
            "xt {:?} vs x0 {:?}",
            xt.dim(),
            x0.dim()
        )));
    }
    let mp = schedule.marginal_params(t)?;
    if mp.variance < LAMBDA_EPSILON {
        return Err(Error::domain(format!(
            "lambda(t)={:.3e} singular at t={t}",
            mp.variance
        )));
    }
    Ok(ndarray::Zip::from(xt)
        .and(x0)
        .map_collect(|&a, &b| -(a - mp.mean_coef * b) / mp.variance))
}

/// Score of the *marginal* p_t when the data distribution is
/// `Normal(mean, data_var * I)`.
///
/// The marginal at time t is Gaussian with mean `mean_coef * mean` and
/// variance `mean_coef^2 * data_var + lambda(t)`, so its score is available
/// exactly. Used as the end-to-end oracle for the reverse sampler.
pub fn gaussian_data_score(
    xt: &Array2<f64>,
    mean: f64,
    data_var: f64,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_time_positive(t)?;
    if data_var < 0.0 {
        return Err(Error::domain(format!("data variance {data_var} < 0")));
    }
    let mp = schedule.marginal_params(t)?;
    let var = mp.mean_coef * mp.mean_coef * data_var + mp.variance;
    if var < LAMBDA_EPSILON {
        return Err(Error::domain(format!(
            "marginal variance {var:.3e} singular at t={t}"
        )));
    }
    Ok(xt.mapv(|v| -(v - mp.mean_coef * mean) / var))
}

/// One Euler-Maruyama step of the reverse-time SDE at time t.
///
/// `x' = x + (beta_t/N) * (x/2 + score) + sqrt(beta_t/N) * z` with the noise
/// term dropped when the sampler is deterministic.
pub fn reverse_step(
    xt: &Array2<f64>,
    t: f64,
    score: &Array2<f64>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Array2<f64> {
    let h = schedule.beta(t) / cfg.n_steps as f64;
    let mut out = ndarray::Zip::from(xt)
        .and(score)
        .map_collect(|&x, &s| x + h * (0.5 * x + s));
    if cfg.stochastic {
        let z = standard_normal(xt.dim(), rng);
        out.zip_mut_with(&z, |o, &n| *o += h.sqrt() * n);
    }
    out
}

/// Integrate the reverse chain from a standard Gaussian terminal state.
///
/// Runs `reverse_step` at t = 1, (N-1)/N, ..., 1/N, handing `conditioning`
/// to `score_fn` unchanged on every step, and returns the final state.
/// A non-finite score aborts with the offending step index.
pub fn reverse_sample<C, F>(
    mut score_fn: F,
    shape: (usize, usize),
    conditioning: &C,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Array2<f64>>
where
    C: ?Sized,
    F: FnMut(&Array2<f64>, f64, &C) -> Array2<f64>,
{
    cfg.validate()?;
    let n = cfg.n_steps;
    let mut x = standard_normal(shape, rng);
    for step in 0..n {
        let t = (n - step) as f64 / n as f64;
        let score = score_fn(&x, t, conditioning);
        if score.dim() != shape {
            return Err(Error::shape(format!(
                "score shape {:?} != state shape {:?} at step {step}",
                score.dim(),
                shape
            )));
        }
        if !score.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "score function returned non-finite values at step {step} (t={t})"
            )));
        }
        x = reverse_step(&x, t, &score, schedule, cfg, rng);
    }
    Ok(x)
}

/// Denoising score-matching loss for a score function at a fixed time.
///
/// Draws `x_t` via [`forward_sample`] and returns the elementwise mean of
/// `(score(x_t) + eps/lambda(t))^2`. Times with lambda below
/// [`LAMBDA_EPSILON`] yield [`Error::DegenerateNoise`], which training loops
/// treat as "redraw t".
pub fn score_matching_loss<F>(
    mut score_fn: F,
    x0: &Array2<f64>,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64>
where
    F: FnMut(&Array2<f64>, f64) -> Array2<f64>,
{
    check_time_positive(t)?;
    let mp = schedule.marginal_params(t)?;
    if mp.variance < LAMBDA_EPSILON {
        return Err(Error::DegenerateNoise {
            t,
            lambda: mp.variance,
        });
    }
    let (xt, eps) = forward_sample(x0, t, schedule, rng)?;
    let pred = score_fn(&xt, t);
    if pred.dim() != x0.dim() {
        return Err(Error::shape(format!(
            "score shape {:?} != data shape {:?}",
            pred.dim(),
            x0.dim()
        )));
    }
    let n = x0.len() as f64;
    let loss = ndarray::Zip::from(&pred)
        .and(&eps)
        .fold(0.0, |acc, &s, &e| {
            let r = s + e / mp.variance;
            acc + r * r
        })
        / n;
    Ok(loss)
}

/// Draw a training time uniformly from (TRAIN_T_MIN, 1], redrawing while the
/// noise scale is degenerate.
pub fn draw_training_time(schedule: &NoiseSchedule, rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>();
        let t = TRAIN_T_MIN + (1.0 - TRAIN_T_MIN) * u;
        if let Ok(mp) = schedule.marginal_params(t) {
            if mp.variance >= LAMBDA_EPSILON {
                return t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn cum_beta_closed_form() {
        let s = sched();
        assert_eq!(s.cum_beta(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(s.cum_beta(0.5).unwrap(), 2.51875, epsilon = 1e-12);
        assert_abs_diff_eq!(s.cum_beta(1.0).unwrap(), 10.025, epsilon = 1e-12);
    }

    #[test]
    fn cum_beta_rejects_out_of_range() {
        let s = sched();
        assert!(s.cum_beta(-0.1).is_err());
        assert!(s.cum_beta(1.1).is_err());
    }

    #[test]
    fn marginal_params_reference_values() {
        let s = sched();
        let mp0 = s.marginal_params(0.0).unwrap();
        assert_eq!(mp0.mean_coef, 1.0);
        assert_eq!(mp0.variance, 0.0);

        let mp = s.marginal_params(0.5).unwrap();
        assert_abs_diff_eq!(mp.mean_coef, (-0.5f64 * 2.51875).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(mp.mean_coef, 0.2838, epsilon = 1e-4);
        assert_abs_diff_eq!(mp.variance, 0.9194, epsilon = 1e-4);

        let mp1 = s.marginal_params(1.0).unwrap();
        assert_abs_diff_eq!(mp1.mean_coef, (-5.0125f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(mp1.variance, 1.0 - (-10.025f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(mp1.variance, 0.99996, epsilon = 1e-5);
    }

    #[test]
    fn marginal_params_monotone_over_grid() {
        let s = sched();
        let mut prev = s.marginal_params(1e-3).unwrap();
        for i in 2..=1000 {
            let t = i as f64 / 1000.0;
            let mp = s.marginal_params(t).unwrap();
            assert!(mp.variance > prev.variance, "lambda not increasing at t={t}");
            assert!(
                mp.mean_coef < prev.mean_coef,
                "mean_coef not decreasing at t={t}"
            );
            prev = mp;
        }
    }

    #[test]
    fn schedule_invariants_enforced() {
        assert!(NoiseSchedule::new(0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(2.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.05, 20.0).is_ok());
    }

    #[test]
    fn forward_sample_zero_data_is_pure_noise() {
        let s = sched();
        let mut rng = rng_from_seed(11);
        let x0 = Array2::zeros((3, 4));
        let (xt, eps) = forward_sample(&x0, 0.7, &s, &mut rng).unwrap();
        assert_eq!(xt, eps);
    }

    #[test]
    fn forward_sample_small_t_stays_near_data() {
        let s = sched();
        let mut rng = rng_from_seed(5);
        let x0 = Array2::from_elem((2, 2), 3.0);
        let (xt, _) = forward_sample(&x0, 1e-6, &s, &mut rng).unwrap();
        for &v in xt.iter() {
            assert_abs_diff_eq!(v, 3.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn true_score_zero_at_conditional_mean() {
        let s = sched();
        let x0 = Array2::from_shape_fn((2, 3), |(i, j)| (i + 2 * j) as f64);
        let mp = s.marginal_params(0.4).unwrap();
        let xt = x0.mapv(|v| v * mp.mean_coef);
        let score = true_score_gaussian(&xt, &x0, 0.4, &s).unwrap();
        for &v in score.iter() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn true_score_hand_value() {
        // lambda = 0.5 at the solving time; pick it by inverting 1-exp(-c)=0.5.
        let s = sched();
        let target_cum = (2.0f64).ln();
        // solve beta0*t + (beta1-beta0)t^2/2 = ln 2 for t via bisection
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if s.cum_beta(mid).unwrap() < target_cum {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        let mp = s.marginal_params(t).unwrap();
        assert_abs_diff_eq!(mp.variance, 0.5, epsilon = 1e-10);

        let x0 = Array2::zeros((1, 1));
        let xt = Array2::from_elem((1, 1), 1.0);
        let score = true_score_gaussian(&xt, &x0, t, &s).unwrap();
        assert_abs_diff_eq!(score[[0, 0]], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn true_score_singular_at_zero() {
        let s = sched();
        let x = Array2::zeros((1, 1));
        assert!(true_score_gaussian(&x, &x, 0.0, &s).is_err());
    }

    #[test]
    fn consistency_identity_with_replayed_eps() {
        let s = sched();
        let mut rng = rng_from_seed(99);
        let x0 = standard_normal((4, 6), &mut rng);
        for &t in &[0.05, 0.3, 0.6, 0.95] {
            let (xt, eps) = forward_sample(&x0, t, &s, &mut rng).unwrap();
            let mp = s.marginal_params(t).unwrap();
            let score = true_score_gaussian(&xt, &x0, t, &s).unwrap();
            let expected = eps.mapv(|e| -e / mp.variance);
            for (a, b) in score.iter().zip(expected.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn reverse_step_hand_value() {
        // beta(t)=0.2 under a flat schedule; x=1, score=-1, N=10.
        let s = NoiseSchedule::new(0.2, 0.2).unwrap();
        let cfg = SamplerConfig {
            n_steps: 10,
            stochastic: false,
        };
        let mut rng = rng_from_seed(0);
        let xt = Array2::from_elem((1, 1), 1.0);
        let score = Array2::from_elem((1, 1), -1.0);
        let out = reverse_step(&xt, 0.5, &score, &s, &cfg, &mut rng);
        assert_abs_diff_eq!(out[[0, 0]], 0.99, epsilon = 1e-15);
    }

    #[test]
    fn reverse_step_zero_is_fixed_point() {
        let s = sched();
        let cfg = SamplerConfig {
            n_steps: 4,
            stochastic: false,
        };
        let mut rng = rng_from_seed(0);
        let x = Array2::zeros((2, 2));
        let out = reverse_step(&x, 0.75, &x, &s, &cfg, &mut rng);
        assert_eq!(out, x);
    }

    #[test]
    fn reverse_sample_passes_conditioning_through() {
        let s = sched();
        let cfg = SamplerConfig {
            n_steps: 7,
            stochastic: true,
        };
        let mut rng = rng_from_seed(3);
        let tag = String::from("payload");
        let mut seen = 0usize;
        let out = reverse_sample(
            |x, _t, c: &String| {
                assert_eq!(c, "payload");
                seen += 1;
                Array2::zeros(x.dim())
            },
            (2, 3),
            &tag,
            &s,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(seen, 7);
        assert_eq!(out.dim(), (2, 3));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reverse_sample_aborts_on_non_finite_score() {
        let s = sched();
        let cfg = SamplerConfig {
            n_steps: 5,
            stochastic: false,
        };
        let mut rng = rng_from_seed(4);
        let err = reverse_sample(
            |x, t, _c: &()| {
                if t < 0.9 {
                    Array2::from_elem(x.dim(), f64::NAN)
                } else {
                    Array2::zeros(x.dim())
                }
            },
            (1, 1),
            &(),
            &s,
            &cfg,
            &mut rng,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 1"), "diagnostic missing step index: {msg}");
    }

    #[test]
    fn reverse_sample_deterministic_per_seed() {
        let s = sched();
        let cfg = SamplerConfig {
            n_steps: 20,
            stochastic: true,
        };
        let run = || {
            let mut rng = rng_from_seed(1234);
            reverse_sample(
                |x, t, _: &()| gaussian_data_score(x, 1.0, 0.25, t, &s).unwrap(),
                (5, 2),
                &(),
                &s,
                &cfg,
                &mut rng,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn score_matching_loss_hand_value() {
        // With a zero score net the loss is mean((eps/lambda)^2); replay eps
        // by seeding, then recompute expected directly.
        let s = sched();
        let x0 = Array2::from_elem((1, 1), 0.0);
        let t = 0.5;
        let mp = s.marginal_params(t).unwrap();
        let mut rng = rng_from_seed(21);
        let (_, eps) = forward_sample(&x0, t, &s, &mut rng).unwrap();
        let mut rng2 = rng_from_seed(21);
        let loss = score_matching_loss(|x, _| Array2::zeros(x.dim()), &x0, t, &s, &mut rng2)
            .unwrap();
        let expected = (eps[[0, 0]] / mp.variance).powi(2);
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn score_matching_loss_zero_for_true_score() {
        let s = sched();
        let mut rng = rng_from_seed(8);
        let x0 = standard_normal((3, 5), &mut rng);
        let t = 0.4;
        // Replay the same eps the loss will draw, then hand the loss the exact
        // conditional score as a lookup.
        let mut replay = rng.clone();
        let (_xt, eps) = forward_sample(&x0, t, &s, &mut replay).unwrap();
        let mp = s.marginal_params(t).unwrap();
        let truth = eps.mapv(|e| -e / mp.variance);
        let loss =
            score_matching_loss(|_x, _t| truth.clone(), &x0, t, &s, &mut rng).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn degenerate_lambda_skips() {
        let s = NoiseSchedule::new(1e-10, 1e-10).unwrap();
        let x0 = Array2::zeros((1, 1));
        let mut rng = rng_from_seed(2);
        match score_matching_loss(|x, _| Array2::zeros(x.dim()), &x0, 1e-3, &s, &mut rng) {
            Err(Error::DegenerateNoise { .. }) => {}
            other => panic!("expected DegenerateNoise, got {other:?}"),
        }
    }

    #[test]
    fn training_time_stays_in_range() {
        let s = sched();
        let mut rng = rng_from_seed(77);
        for _ in 0..1000 {
            let t = draw_training_time(&s, &mut rng);
            assert!(t > TRAIN_T_MIN && t <= 1.0);
        }
    }
}
