//! Gaussian diffusion over feature grids: noise schedule, forward noising,
//! the hybrid `simple + λ·vlb` objective with a learned variance, and the
//! ancestral (DDPM) and implicit (DDIM) reverse samplers.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is 1.

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::kv::{self, KvError, KvWriter};
use crate::nn::Float;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(&'static str),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("sampling steps {steps} outside 2..={max}")]
    StepsOutOfRange { steps: usize, max: usize },
    #[error("eta {0} outside [0, 1]")]
    InvalidEta(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Serializable parameters of a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { num_steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool, KvError> {
        match key {
            "num_steps" => self.num_steps = kv::parse_value(key, value)?,
            "beta_start" => self.beta_start = kv::parse_value(key, value)?,
            "beta_end" => self.beta_end = kv::parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn write_kv(&self, w: &mut KvWriter, prefix: &str) {
        w.put(&format!("{prefix}num_steps"), self.num_steps)
            .put(&format!("{prefix}beta_start"), self.beta_start)
            .put(&format!("{prefix}beta_end"), self.beta_end);
    }
}

/// Linear-β noise schedule and its derived products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if num_steps < 2 {
            return Err(DiffusionError::InvalidSchedule("need at least two steps"));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule("need 0 < beta_start < beta_end < 1"));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.num_steps() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.num_steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Posterior variance with the degenerate `t = 1` entry replaced by the
    /// `t = 2` value, so that its logarithm is finite.
    pub fn posterior_variance_clipped(&self, t: usize) -> f64 {
        if t == 1 {
            self.posterior_variance(2)
        } else {
            self.posterior_variance(t)
        }
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0·x_0 + ct·x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = self.beta(t) * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * self.alpha(t).sqrt() / (1.0 - ab);
        (c0, ct)
    }

    /// Per-element reverse-step variance for interpolation weight `v`:
    /// `β_t^v · β̃_t^(1-v)`, which hits both endpoints exactly.
    pub fn interpolated_variance(&self, t: usize, v: f64) -> f64 {
        self.beta(t).powf(v) * self.posterior_variance_clipped(t).powf(1.0 - v)
    }
}

/// Network prediction at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput<F> {
    pub eps_hat: Array3<F>,
    /// Weight in `[0, 1]` between the posterior variance (0) and `β_t` (1).
    pub var_interp: Array3<F>,
}

impl<F: Float> DenoiserOutput<F> {
    pub fn is_finite(&self) -> bool {
        self.eps_hat.iter().all(|v| v.is_finite())
            && self.var_interp.iter().all(|v| v.is_finite() && *v >= F::zero() && *v <= F::one())
    }
}

fn check_shape<A, B>(a: &Array3<A>, b: &Array3<B>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::ShapeMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// `sqrt(ᾱ_t)·x_0 + sqrt(1-ᾱ_t)·eps`.
pub fn forward_noise<F: Float>(
    x0: &Array3<F>,
    t: usize,
    eps: &Array3<F>,
    schedule: &NoiseSchedule,
) -> Result<Array3<F>, DiffusionError> {
    schedule.check_t(t)?;
    check_shape(x0, eps)?;
    Ok(forward_noise_with(x0, eps, schedule.alpha_bar(t)))
}

/// Forward noising with an explicit `ᾱ`; `alpha_bar = 1` returns `x0`.
pub fn forward_noise_with<F: Float>(x0: &Array3<F>, eps: &Array3<F>, alpha_bar: f64) -> Array3<F> {
    let a = F::from_f64c(alpha_bar.sqrt());
    let b = F::from_f64c((1.0 - alpha_bar).sqrt());
    let mut out = Array3::zeros(x0.raw_dim());
    Zip::from(&mut out).and(x0).and(eps).for_each(|o, &x, &e| *o = a * x + b * e);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub simple: f64,
    pub vlb: f64,
}

/// Gradient of the total loss with respect to the two network heads.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    pub d_eps_hat: Array3<F>,
    pub d_var_interp: Array3<F>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Hybrid objective `simple + vlb_weight·vlb`, both terms averaged over
/// elements.
///
/// `simple` is the noise-prediction MSE. `vlb` is the KL between the true
/// posterior and the model's reverse Gaussian (the decoder NLL at `t = 1`),
/// evaluated with the predicted mean held constant, so only the variance head
/// receives its gradient.
pub fn training_loss<F: Float>(
    out: &DenoiserOutput<F>,
    eps: &Array3<F>,
    x0: &Array3<F>,
    xt: &Array3<F>,
    t: usize,
    schedule: &NoiseSchedule,
    vlb_weight: f64,
) -> Result<(LossTerms, LossGrad<F>), DiffusionError> {
    training_loss_detached(out, &out.eps_hat, eps, x0, xt, t, schedule, vlb_weight)
}

/// [`training_loss`] with the reverse mean of the variance term computed from
/// `mean_eps` instead of `out.eps_hat`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_detached<F: Float>(
    out: &DenoiserOutput<F>,
    mean_eps: &Array3<F>,
    eps: &Array3<F>,
    x0: &Array3<F>,
    xt: &Array3<F>,
    t: usize,
    schedule: &NoiseSchedule,
    vlb_weight: f64,
) -> Result<(LossTerms, LossGrad<F>), DiffusionError> {
    schedule.check_t(t)?;
    for other in [mean_eps, eps, x0, xt, &out.var_interp] {
        check_shape(&out.eps_hat, other)?;
    }
    if !out.is_finite() {
        return Err(DiffusionError::NonFinite("model output"));
    }
    if [eps, x0, xt].iter().any(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(DiffusionError::NonFinite("loss input"));
    }

    let n = out.eps_hat.len() as f64;
    let beta = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = beta / (1.0 - ab).sqrt();
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    let log_beta = beta.ln();
    let log_post = schedule.posterior_variance_clipped(t).ln();
    let d_s_dv = log_beta - log_post;

    let mut simple = 0.0;
    let mut vlb = 0.0;
    let mut d_eps_hat = Array3::zeros(out.eps_hat.raw_dim());
    let mut d_var = Array3::zeros(out.eps_hat.raw_dim());

    let heads = d_eps_hat.iter_mut().zip(d_var.iter_mut()).zip(out.eps_hat.iter().zip(out.var_interp.iter()));
    let targets = eps.iter().zip(x0.iter()).zip(xt.iter()).zip(mean_eps.iter());
    for (((de, dv), (&eh, &v)), (((&e, &x0v), &xtv), &em)) in heads.zip(targets) {
        let (eh, v, e, x0v, xtv, em) = (eh.to_f64c(), v.to_f64c(), e.to_f64c(), x0v.to_f64c(), xtv.to_f64c(), em.to_f64c());

        let diff = eh - e;
        simple += diff * diff;
        *de = F::from_f64c(2.0 * diff / n);

        let model_mean = inv_sqrt_alpha * (xtv - eps_coef * em);
        let s = v * log_beta + (1.0 - v) * log_post;
        let inv_var = (-s).exp();
        let (term, d_term_ds) = if t == 1 {
            let r2 = (x0v - model_mean).powi(2);
            (0.5 * (LN_2PI + s + r2 * inv_var), 0.5 * (1.0 - r2 * inv_var))
        } else {
            let true_mean = c0 * x0v + ct * xtv;
            let r2 = (true_mean - model_mean).powi(2);
            let ratio = (log_post - s).exp();
            (0.5 * (-1.0 + s - log_post + ratio + r2 * inv_var), 0.5 * (1.0 - ratio - r2 * inv_var))
        };
        vlb += term;
        *dv = F::from_f64c(vlb_weight * d_term_ds * d_s_dv / n);
    }

    let simple = simple / n;
    let vlb = vlb / n;
    Ok((LossTerms { total: simple + vlb_weight * vlb, simple, vlb }, LossGrad { d_eps_hat, d_var_interp: d_var }))
}

/// A noise predictor bound to one conditioning type.
pub trait NoisePredictor {
    type Cond;

    fn predict(&self, x_t: &Array3<f32>, t: usize, cond: &Self::Cond) -> DenoiserOutput<f32>;
}

fn checked_predict<M: NoisePredictor>(
    model: &M,
    x_t: &Array3<f32>,
    t: usize,
    cond: &M::Cond,
) -> Result<DenoiserOutput<f32>, DiffusionError> {
    let out = model.predict(x_t, t, cond);
    check_shape(x_t, &out.eps_hat)?;
    check_shape(x_t, &out.var_interp)?;
    if !out.is_finite() {
        return Err(DiffusionError::NonFinite("model output"));
    }
    Ok(out)
}

/// Mean and per-element variance of `p_θ(x_{t-1} | x_t)`.
pub fn reverse_moments(
    out: &DenoiserOutput<f32>,
    x_t: &Array3<f32>,
    t: usize,
    schedule: &NoiseSchedule,
) -> (Array3<f64>, Array3<f64>) {
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut mean = Array3::zeros(x_t.raw_dim());
    let mut var = Array3::zeros(x_t.raw_dim());
    Zip::from(&mut mean)
        .and(&mut var)
        .and(x_t)
        .and(&out.eps_hat)
        .and(&out.var_interp)
        .for_each(|m, s, &x, &e, &v| {
            *m = inv_sqrt_alpha * (x as f64 - eps_coef * e as f64);
            *s = schedule.interpolated_variance(t, v as f64);
        });
    (mean, var)
}

/// One ancestral step `x_t -> x_{t-1}` using caller-supplied standard normal
/// `noise` (ignored at `t = 1`).
pub fn ddpm_step<M: NoisePredictor>(
    model: &M,
    x_t: &Array3<f32>,
    t: usize,
    cond: &M::Cond,
    schedule: &NoiseSchedule,
    noise: &Array3<f32>,
) -> Result<Array3<f32>, DiffusionError> {
    schedule.check_t(t)?;
    check_shape(x_t, noise)?;
    let out = checked_predict(model, x_t, t, cond)?;
    let (mean, var) = reverse_moments(&out, x_t, t, schedule);
    let mut next = Array3::zeros(x_t.raw_dim());
    Zip::from(&mut next).and(&mean).and(&var).and(noise).for_each(|o, &m, &s, &z| {
        *o = if t == 1 { m as f32 } else { (m + s.sqrt() * z as f64) as f32 };
    });
    Ok(next)
}

/// Full ancestral sampling from `x_T` down to `x_0`.
pub fn ddpm_sample<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    x_t: &Array3<f32>,
    cond: &M::Cond,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array3<f32>, DiffusionError> {
    let mut x = x_t.clone();
    for t in (1..=schedule.num_steps()).rev() {
        let noise = if t > 1 { standard_normal(x.dim(), rng) } else { Array3::zeros(x.raw_dim()) };
        x = ddpm_step(model, &x, t, cond, schedule, &noise)?;
    }
    Ok(x)
}

pub fn standard_normal<R: Rng + ?Sized>(dim: (usize, usize, usize), rng: &mut R) -> Array3<f32> {
    Array3::from_shape_simple_fn(dim, || rng.sample::<f32, _>(StandardNormal))
}

/// `steps` timesteps evenly spaced from `T` down to 1, both ends included.
pub fn ddim_timesteps(num_steps: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps < 2 || steps > num_steps {
        return Err(DiffusionError::StepsOutOfRange { steps, max: num_steps });
    }
    let span = (num_steps - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps).map(|i| (num_steps as f64 - i as f64 * span).round() as usize).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimOptions {
    pub steps: usize,
    pub eta: f64,
    /// Optional symmetric bound applied to every intermediate `x_0` estimate.
    pub x0_clip: Option<f32>,
}

impl DdimOptions {
    pub fn deterministic(steps: usize) -> Self {
        DdimOptions { steps, eta: 0.0, x0_clip: None }
    }
}

/// DDIM reverse process over an evenly spaced sub-sequence of timesteps.
///
/// With `eta = 0` no randomness is drawn and the result is a deterministic
/// function of `(x_T, cond)`.
pub fn ddim_sample<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    x_t: &Array3<f32>,
    cond: &M::Cond,
    schedule: &NoiseSchedule,
    opts: &DdimOptions,
    rng: &mut R,
) -> Result<Array3<f32>, DiffusionError> {
    if !(0.0..=1.0).contains(&opts.eta) {
        return Err(DiffusionError::InvalidEta(opts.eta));
    }
    let times = ddim_timesteps(schedule.num_steps(), opts.steps)?;
    let mut x = x_t.clone();
    for (i, &t) in times.iter().enumerate() {
        let prev = times.get(i + 1).copied().unwrap_or(0);
        let out = checked_predict(model, &x, t, cond)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(prev);
        let sigma = opts.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 { Some(standard_normal(x.dim(), rng)) } else { None };

        let mut next = Array3::zeros(x.raw_dim());
        Zip::indexed(&mut next).and(&x).and(&out.eps_hat).for_each(|idx, o, &xv, &e| {
            let (xv, mut e) = (xv as f64, e as f64);
            let mut x0 = (xv - (1.0 - ab).sqrt() * e) / ab.sqrt();
            if let Some(c) = opts.x0_clip {
                let clipped = x0.clamp(-(c as f64), c as f64);
                if clipped != x0 {
                    x0 = clipped;
                    e = (xv - ab.sqrt() * x0) / (1.0 - ab).sqrt();
                }
            }
            let mut v = ab_prev.sqrt() * x0 + dir * e;
            if let Some(z) = &noise {
                v += sigma * z[idx] as f64;
            }
            *o = v as f32;
        });
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        let mut running = 1.0f64;
        for t in 1..=1000 {
            running *= s.alpha(t);
            assert!((s.alpha_bar(t) - running).abs() <= 1e-12 * running);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn terminal_alpha_bar_regression() {
        // Independent product in log space.
        let log_ab: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        let expected = log_ab.exp();
        let s = default_schedule();
        assert!((s.alpha_bar(1000) - expected).abs() < 1e-12 * expected);
        assert!((expected - 4.035_829_765e-5).abs() < 1e-14, "{expected:e}");
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(NoiseSchedule::linear(1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 2e-2, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 1e-2).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let x0 = Array3::<f64>::from_elem((2, 2, 1), 1.0);
        let eps = Array3::<f64>::from_elem((2, 2, 1), 1.0);
        let out = forward_noise_with(&x0, &eps, 0.25);
        assert!(out.iter().all(|&v| (v - (0.5 + 0.75f64.sqrt())).abs() < 1e-15));
        assert!(out.iter().all(|&v| (v - 1.3660).abs() < 1e-4));
        let rnd = Array3::from_shape_fn((2, 2, 1), |(a, b, _)| (a * 2 + b) as f64 - 1.5);
        assert_eq!(forward_noise_with(&rnd, &eps, 1.0), rnd);

        let s = default_schedule();
        assert!(matches!(forward_noise(&x0, 0, &eps, &s), Err(DiffusionError::TimestepOutOfRange { .. })));
        assert!(matches!(forward_noise(&x0, 1001, &eps, &s), Err(DiffusionError::TimestepOutOfRange { .. })));
        let wrong = Array3::<f64>::zeros((1, 2, 1));
        assert!(matches!(forward_noise(&x0, 5, &wrong, &s), Err(DiffusionError::ShapeMismatch(..))));
    }

    fn out_with(eps_hat: Array3<f64>, v: f64) -> DenoiserOutput<f64> {
        let var_interp = Array3::from_elem(eps_hat.raw_dim(), v);
        DenoiserOutput { eps_hat, var_interp }
    }

    #[test]
    fn simple_loss_examples() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eps = standard_normal((4, 4, 1), &mut rng).mapv(|v| v as f64);
        let x0 = standard_normal((4, 4, 1), &mut rng).mapv(|v| v as f64);
        let xt = forward_noise(&x0, 10, &eps, &s).unwrap();
        let (exact, _) = training_loss(&out_with(eps.clone(), 0.5), &eps, &x0, &xt, 10, &s, 1e-3).unwrap();
        assert_eq!(exact.simple, 0.0);
        let (off, _) = training_loss(&out_with(&eps + 1.0, 0.5), &eps, &x0, &xt, 10, &s, 1e-3).unwrap();
        assert!((off.simple - 1.0).abs() < 1e-12);
        assert!((off.total - (off.simple + 1e-3 * off.vlb)).abs() < 1e-15);
    }

    /// Elementwise Gaussian KL computed from first principles.
    fn kl_oracle(mu_q: f64, var_q: f64, mu_p: f64, var_p: f64) -> f64 {
        (var_p / var_q).ln() / 2.0 + (var_q + (mu_q - mu_p).powi(2)) / (2.0 * var_p) - 0.5
    }

    #[test]
    fn vlb_matches_closed_form_kl() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 10;
        let eps = standard_normal((4, 4, 1), &mut rng).mapv(|v| v as f64);
        let x0 = standard_normal((4, 4, 1), &mut rng).mapv(|v| v as f64);
        let eps_hat = standard_normal((4, 4, 1), &mut rng).mapv(|v| v as f64 * 0.3) + &eps;
        let var_interp = Array3::from_shape_fn((4, 4, 1), |_| rng.random::<f64>());
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let out = DenoiserOutput { eps_hat: eps_hat.clone(), var_interp: var_interp.clone() };
        let (terms, _) = training_loss(&out, &eps, &x0, &xt, t, &s, 1e-3).unwrap();

        // Posterior and model moments rebuilt from the schedule products.
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let beta = 1.0 - ab / ab_prev;
        let post_var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        let mut total = 0.0;
        for i in 0..16 {
            let (r, c) = (i / 4, i % 4);
            let x0v = x0[[r, c, 0]];
            let xtv = xt[[r, c, 0]];
            let mu_q = (ab_prev.sqrt() * beta * x0v + (1.0 - beta).sqrt() * (1.0 - ab_prev) * xtv) / (1.0 - ab);
            let x0_hat = (xtv - (1.0 - ab).sqrt() * eps_hat[[r, c, 0]]) / ab.sqrt();
            let mu_p = (ab_prev.sqrt() * beta * x0_hat + (1.0 - beta).sqrt() * (1.0 - ab_prev) * xtv) / (1.0 - ab);
            let v = var_interp[[r, c, 0]];
            let var_p = (v * beta.ln() + (1.0 - v) * post_var.ln()).exp();
            total += kl_oracle(mu_q, post_var, mu_p, var_p);
        }
        let oracle = total / 16.0;
        assert!((terms.vlb - oracle).abs() <= 1e-6 * oracle.abs(), "{} vs {}", terms.vlb, oracle);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 2, 37, 900] {
            let eps = standard_normal((2, 3, 2), &mut rng).mapv(|v| v as f64);
            let x0 = standard_normal((2, 3, 2), &mut rng).mapv(|v| v as f64);
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let eps_hat = standard_normal((2, 3, 2), &mut rng).mapv(|v| v as f64);
            let var_interp = Array3::from_shape_fn((2, 3, 2), |_| rng.random_range(0.1..0.9));
            let lam = 0.5;
            let out = DenoiserOutput { eps_hat: eps_hat.clone(), var_interp: var_interp.clone() };
            let (_, grad) = training_loss(&out, &eps, &x0, &xt, t, &s, lam).unwrap();
            let h = 1e-6;
            for i in 0..12 {
                let idx = (i / 6, (i / 2) % 3, i % 2);
                // The variance gradient excludes the (stop-gradient) mean path,
                // so perturb only the variance head here.
                let mut vp = var_interp.clone();
                vp[idx] += h;
                let mut vm = var_interp.clone();
                vm[idx] -= h;
                let lp = training_loss(&out_with_var(&eps_hat, vp), &eps, &x0, &xt, t, &s, lam).unwrap().0;
                let lm = training_loss(&out_with_var(&eps_hat, vm), &eps, &x0, &xt, t, &s, lam).unwrap().0;
                let num = (lp.total - lm.total) / (2.0 * h);
                assert!((num - grad.d_var_interp[idx]).abs() < 1e-6 * (1.0 + num.abs()), "t={t}");
                // The simple term alone carries the eps gradient.
                let mut ep = eps_hat.clone();
                ep[idx] += h;
                let mut em = eps_hat.clone();
                em[idx] -= h;
                let sp = training_loss(&out_with_var(&ep, var_interp.clone()), &eps, &x0, &xt, t, &s, lam).unwrap().0;
                let sm = training_loss(&out_with_var(&em, var_interp.clone()), &eps, &x0, &xt, t, &s, lam).unwrap().0;
                let num = (sp.simple - sm.simple) / (2.0 * h);
                assert!((num - grad.d_eps_hat[idx]).abs() < 1e-6 * (1.0 + num.abs()));
            }
        }
    }

    fn out_with_var(eps_hat: &Array3<f64>, var_interp: Array3<f64>) -> DenoiserOutput<f64> {
        DenoiserOutput { eps_hat: eps_hat.clone(), var_interp }
    }

    #[test]
    fn loss_rejects_non_finite() {
        let s = default_schedule();
        let z = Array3::<f64>::zeros((2, 2, 1));
        let mut bad = z.clone();
        bad[[0, 0, 0]] = f64::NAN;
        assert!(training_loss(&out_with(z.clone(), 0.5), &bad, &z, &z, 3, &s, 1e-3).is_err());
        assert!(training_loss(&out_with(bad, 0.5), &z, &z, &z, 3, &s, 1e-3).is_err());
    }

    /// Linear closed-form predictor `eps_hat = a_t · x_t` with a fixed
    /// variance weight.
    struct LinearToy {
        gain: f32,
        v: f32,
    }

    impl NoisePredictor for LinearToy {
        type Cond = ();
        fn predict(&self, x_t: &Array3<f32>, t: usize, _: &()) -> DenoiserOutput<f32> {
            let g = self.gain * (t as f32 / 1000.0).sqrt();
            DenoiserOutput { eps_hat: x_t.mapv(|x| g * x), var_interp: Array3::from_elem(x_t.raw_dim(), self.v) }
        }
    }

    #[test]
    fn ddpm_step_variance_endpoints() {
        let s = default_schedule();
        let x = Array3::from_shape_fn((2, 2, 1), |(a, b, _)| a as f32 - b as f32 * 0.5);
        for (v, t) in [(0.0f32, 5usize), (1.0, 5), (0.0, 700), (1.0, 700)] {
            let model = LinearToy { gain: 0.8, v };
            let out = model.predict(&x, t, &());
            let (_, var) = reverse_moments(&out, &x, t, &s);
            let expected = if v == 0.0 { s.posterior_variance(t) } else { s.beta(t) };
            assert!(var.iter().all(|&sv| sv == expected), "v={v} t={t}");
        }
    }

    #[test]
    fn ddpm_final_step_is_deterministic_mean() {
        let s = default_schedule();
        let model = LinearToy { gain: 0.5, v: 0.3 };
        let x = Array3::from_elem((2, 2, 1), 0.7f32);
        let zero = Array3::zeros((2, 2, 1));
        let ones = Array3::from_elem((2, 2, 1), 1.0f32);
        let a = ddpm_step(&model, &x, 1, &(), &s, &zero).unwrap();
        let b = ddpm_step(&model, &x, 1, &(), &s, &ones).unwrap();
        assert_eq!(a, b);
        let (mean, _) = reverse_moments(&model.predict(&x, 1, &()), &x, 1, &s);
        assert_eq!(a, mean.mapv(|m| m as f32));
        assert!(ddpm_step(&model, &x, 0, &(), &s, &zero).is_err());
    }

    #[test]
    fn ddim_timesteps_are_even_and_inclusive() {
        assert_eq!(ddim_timesteps(1000, 2).unwrap(), vec![1000, 1]);
        assert_eq!(ddim_timesteps(1000, 5).unwrap(), vec![1000, 750, 501, 251, 1]);
        let all = ddim_timesteps(50, 50).unwrap();
        assert_eq!(all, (1..=50).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(1000, 1).is_err());
        assert!(ddim_timesteps(1000, 1001).is_err());
    }

    #[test]
    fn ddim_eta_zero_is_bit_identical() {
        let s = default_schedule();
        let model = LinearToy { gain: 0.9, v: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = standard_normal((3, 3, 2), &mut rng);
        let opts = DdimOptions::deterministic(7);
        let a = ddim_sample(&model, &x_t, &(), &s, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ddim_sample(&model, &x_t, &(), &s, &opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bits = |a: &Array3<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let bad = DdimOptions { eta: 1.5, ..opts };
        assert!(ddim_sample(&model, &x_t, &(), &s, &bad, &mut rng).is_err());
    }

    #[test]
    fn ddim_rejects_nan_model() {
        struct Broken;
        impl NoisePredictor for Broken {
            type Cond = ();
            fn predict(&self, x: &Array3<f32>, _: usize, _: &()) -> DenoiserOutput<f32> {
                DenoiserOutput { eps_hat: x.mapv(|_| f32::NAN), var_interp: x.mapv(|_| 0.5) }
            }
        }
        let s = default_schedule();
        let x = Array3::zeros((1, 1, 1));
        let err = ddim_sample(&Broken, &x, &(), &s, &DdimOptions::deterministic(3), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(err, Err(DiffusionError::NonFinite("model output")));
    }
}
