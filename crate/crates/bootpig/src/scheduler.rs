//! Variance-preserving noise schedule and reverse samplers (DDPM / DDIM).
//!
//! The forward process is x_t = alpha_t * x + sigma_t * eps with
//! alpha_t^2 + sigma_t^2 = 1. Timesteps are 1-based; t = 0 denotes the clean
//! signal (alpha = 1, sigma = 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Tensor};

/// Per-timestep coefficients of the forward noising process.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    timesteps: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// alpha_t, valid for t in 0..=T (t = 0 gives 1.0).
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    /// sigma_t, valid for t in 0..=T (t = 0 gives 0.0).
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigma[t - 1]
        }
    }

    /// Build a schedule from explicit coefficients; enforces the
    /// variance-preserving and monotonicity invariants.
    pub fn from_coefficients(alpha: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != sigma.len() {
            return Err(Error::Config(
                "alpha/sigma must be non-empty and equal length".into(),
            ));
        }
        for (i, (&a, &s)) in alpha.iter().zip(sigma.iter()).enumerate() {
            if ((a * a + s * s) - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "alpha^2 + sigma^2 != 1 at t={} ({})",
                    i + 1,
                    a * a + s * s
                )));
            }
            if i > 0 && (a > alpha[i - 1] || s < sigma[i - 1]) {
                return Err(Error::Config(format!(
                    "alpha must be non-increasing and sigma non-decreasing (t={})",
                    i + 1
                )));
            }
        }
        Ok(NoiseSchedule {
            timesteps: alpha.len(),
            alpha,
            sigma,
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Config(format!(
                "timestep {t} out of range 1..={}",
                self.timesteps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Config(format!("unknown sampler kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// DDIM stochasticity in [0, 1]; ignored for DDPM (always 1).
    pub eta: f64,
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::Config(format!(
                "sampler steps {} out of range 1..={timesteps}",
                self.steps
            )));
        }
        if timesteps % self.steps != 0 {
            return Err(Error::Config(format!(
                "sampler steps {} must evenly sub-sample {timesteps} timesteps",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }

    /// Effective eta: DDPM is the eta = 1 ancestral special case.
    pub fn effective_eta(&self) -> f64 {
        match self.kind {
            SamplerKind::Ddpm => 1.0,
            SamplerKind::Ddim => self.eta,
        }
    }

    /// Descending (t, t_prev) pairs covering T..0 in `steps` strides.
    pub fn timestep_pairs(&self, timesteps: usize) -> Result<Vec<(usize, usize)>> {
        self.validate(timesteps)?;
        let stride = timesteps / self.steps;
        Ok((0..self.steps)
            .map(|i| {
                let t = timesteps - i * stride;
                (t, t - stride)
            })
            .collect())
    }
}

/// Linear-beta variance-preserving schedule: alpha_t = sqrt(prod(1 - beta_s)).
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("timesteps must be positive".into()));
    }
    if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) || beta_start > beta_end
    {
        return Err(Error::Config(format!(
            "invalid beta range [{beta_start}, {beta_end}]; need 0 <= start <= end < 1"
        )));
    }
    let mut alpha = Vec::with_capacity(timesteps);
    let mut sigma = Vec::with_capacity(timesteps);
    let mut alpha_bar = 1.0f64;
    for i in 0..timesteps {
        let beta = if timesteps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
        };
        alpha_bar *= 1.0 - beta;
        alpha.push(alpha_bar.sqrt());
        sigma.push((1.0 - alpha_bar).sqrt());
    }
    Ok(NoiseSchedule {
        timesteps,
        alpha,
        sigma,
    })
}

/// Forward noising: alpha_t * x + sigma_t * eps.
pub fn add_noise<E: Element>(
    x: &Tensor<E>,
    eps: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "add_noise",
            format!("x shape {:?} vs eps shape {:?}", x.shape(), eps.shape()),
        ));
    }
    let xa = ops::scale(x, E::from_f64(sched.alpha(t)))?;
    let es = ops::scale(eps, E::from_f64(sched.sigma(t)))?;
    ops::add(&xa, &es)
}

/// Forward noising with one timestep per batch element (axis 0).
pub fn add_noise_batch<E: Element>(
    x: &Tensor<E>,
    eps: &Tensor<E>,
    ts: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if x.shape().first() != Some(&ts.len()) {
        return Err(Error::shape(
            "add_noise_batch",
            format!("{} timesteps for batch shape {:?}", ts.len(), x.shape()),
        ));
    }
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "add_noise_batch",
            format!("x shape {:?} vs eps shape {:?}", x.shape(), eps.shape()),
        ));
    }
    let mut rows = Vec::with_capacity(ts.len());
    let inner: Vec<usize> = x.shape().to_vec();
    let mut row_shape = vec![1usize];
    row_shape.extend_from_slice(&inner[1..]);
    for (i, &t) in ts.iter().enumerate() {
        let xi = ops::reshape(&ops::select0(x, i)?, &row_shape)?;
        let ei = ops::reshape(&ops::select0(eps, i)?, &row_shape)?;
        rows.push(add_noise(&xi, &ei, t, sched)?);
    }
    let refs: Vec<&Tensor<E>> = rows.iter().collect();
    ops::concat(&refs, 0)
}

/// One reverse step from level t to level t_prev given the predicted noise.
///
/// The predicted clean signal (x_t - sigma_t * eps_hat) / alpha_t is clamped
/// to [-1, 1] before re-noising. With eta = 0 the step is deterministic;
/// eta = 1 reproduces DDPM ancestral variance. `noise` supplies the
/// stochastic component and is required when the step variance is non-zero.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<E: Element>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Config(format!("t_prev {t_prev} must be below t {t}")));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::shape(
            "ddim_step",
            format!("x_t shape {:?} vs eps_hat shape {:?}", x_t.shape(), eps_hat.shape()),
        ));
    }
    let a_t = sched.alpha(t);
    let s_t = sched.sigma(t);
    let a_p = sched.alpha(t_prev);
    let s_p = sched.sigma(t_prev);
    if a_t == 0.0 {
        return Err(Error::numerics("ddim_step", format!("alpha_{t} is zero")));
    }

    // Posterior std for the stochastic part; at eta = 1 this equals the DDPM
    // ancestral posterior std.
    let var_ratio = if s_t > 0.0 {
        (s_p * s_p) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_p * a_p))
    } else {
        0.0
    };
    let sigma_tilde = eta * var_ratio.max(0.0).sqrt();
    let dir_coeff = ((s_p * s_p) - sigma_tilde * sigma_tilde).max(0.0).sqrt();

    if sigma_tilde > 0.0 && noise.is_none() {
        return Err(Error::Config(
            "ddim_step with eta > 0 requires a noise tensor".into(),
        ));
    }
    if let Some(z) = noise {
        if z.shape() != x_t.shape() {
            return Err(Error::shape(
                "ddim_step",
                format!("noise shape {:?} vs x shape {:?}", z.shape(), x_t.shape()),
            ));
        }
    }

    let xd = x_t.data();
    let ed = eps_hat.data();
    let mut out = vec![E::zero(); xd.len()];
    let one = E::one();
    let a_t_e = E::from_f64(a_t);
    let s_t_e = E::from_f64(s_t);
    let a_p_e = E::from_f64(a_p);
    let dir_e = E::from_f64(dir_coeff);
    let st_e = E::from_f64(sigma_tilde);
    for i in 0..xd.len() {
        let mut x0 = (xd[i] - s_t_e * ed[i]) / a_t_e;
        if x0 > one {
            x0 = one;
        }
        if x0 < -one {
            x0 = -one;
        }
        out[i] = a_p_e * x0 + dir_e * ed[i];
        if sigma_tilde > 0.0 {
            out[i] += st_e * noise.unwrap().data()[i];
        }
    }
    Tensor::from_op_nograd("ddim_step", x_t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn desk() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = desk();
        assert_eq!(s.timesteps(), 1000);
        assert!(s.alpha(1) >= 0.999, "alpha_1 = {}", s.alpha(1));
        assert!(s.sigma(1000) >= 0.99, "sigma_T = {}", s.sigma(1000));
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
    }

    #[test]
    fn schedule_is_variance_preserving_and_monotone() {
        let s = desk();
        for t in 1..=1000 {
            let a = s.alpha(t);
            let sg = s.sigma(t);
            assert!((a * a + sg * sg - 1.0).abs() < 1e-10, "t={t}");
            assert!(a <= s.alpha(t - 1) + 1e-12);
            assert!(sg >= s.sigma(t - 1) - 1e-12);
        }
    }

    #[test]
    fn single_step_zero_beta_is_identity() {
        let s = make_schedule(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alpha(1), 1.0);
        assert_eq!(s.sigma(1), 0.0);
        let x = Tensor::from_vec(vec![0.3f64, -0.7], &[2]).unwrap();
        let eps = Tensor::from_vec(vec![5.0f64, 5.0], &[2]).unwrap();
        let y = add_noise(&x, &eps, 1, &s).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn bad_beta_ranges_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, -0.1, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn from_coefficients_validates() {
        let s = NoiseSchedule::from_coefficients(vec![0.8], vec![0.6]).unwrap();
        assert_eq!(s.alpha(1), 0.8);
        assert!(NoiseSchedule::from_coefficients(vec![0.8], vec![0.5]).is_err());
        assert!(NoiseSchedule::from_coefficients(vec![0.6, 0.8], vec![0.8, 0.6]).is_err());
        assert!(NoiseSchedule::from_coefficients(vec![], vec![]).is_err());
    }

    #[test]
    fn add_noise_coefficient_oracle() {
        // alpha = 0.8, sigma = 0.6, x = [1, 0], eps = [0, 1] -> [0.8, 0.6].
        let s = NoiseSchedule::from_coefficients(vec![0.8], vec![0.6]).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 0.0], &[2]).unwrap();
        let eps = Tensor::from_vec(vec![0.0f64, 1.0], &[2]).unwrap();
        let y = add_noise(&x, &eps, 1, &s).unwrap();
        assert!((y.data()[0] - 0.8).abs() < 1e-12);
        assert!((y.data()[1] - 0.6).abs() < 1e-12);
        assert!(add_noise(&x, &eps, 0, &s).is_err());
        assert!(add_noise(&x, &eps, 2, &s).is_err());
    }

    #[test]
    fn noised_second_moment_matches_theory() {
        // E||x_t||^2 = alpha^2 ||x||^2 + sigma^2 n for unit-normal eps.
        let s = desk();
        let t = 600;
        let n = 64usize;
        let x: Vec<f64> = (0..n).map(|i| ((i % 7) as f64 - 3.0) / 3.0).collect();
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let xt = Tensor::from_vec(x, &[n]).unwrap();
        let trials = 4000;
        let mut acc = 0.0;
        for k in 0..trials {
            let mut r = rng::derived(99, 1, k);
            let eps = Tensor::from_vec(rng::randn_vec::<f64>(&mut r, n), &[n]).unwrap();
            let y = add_noise(&xt, &eps, t, &s).unwrap();
            acc += y.data().iter().map(|v| v * v).sum::<f64>();
        }
        let got = acc / trials as f64;
        let want = s.alpha(t).powi(2) * x2 + s.sigma(t).powi(2) * n as f64;
        assert!(
            (got - want).abs() / want < 0.03,
            "second moment {got} vs theory {want}"
        );
    }

    #[test]
    fn sampler_config_validation() {
        let ok = SamplerConfig { kind: SamplerKind::Ddim, steps: 50, eta: 0.0 };
        ok.validate(1000).unwrap();
        let bad_div = SamplerConfig { steps: 7, ..ok };
        assert!(bad_div.validate(1000).is_err());
        let bad_eta = SamplerConfig { eta: 1.5, ..ok };
        assert!(bad_eta.validate(1000).is_err());
        let zero = SamplerConfig { steps: 0, ..ok };
        assert!(zero.validate(1000).is_err());
        assert_eq!(
            SamplerConfig { kind: SamplerKind::Ddpm, steps: 10, eta: 0.0 }.effective_eta(),
            1.0
        );
        assert_eq!("ddim".parse::<SamplerKind>().unwrap(), SamplerKind::Ddim);
        assert!("plms".parse::<SamplerKind>().is_err());
    }

    #[test]
    fn timestep_pairs_cover_range() {
        let cfg = SamplerConfig { kind: SamplerKind::Ddim, steps: 4, eta: 0.0 };
        let pairs = cfg.timestep_pairs(1000).unwrap();
        assert_eq!(pairs, vec![(1000, 750), (750, 500), (500, 250), (250, 0)]);
        let full = SamplerConfig { steps: 1000, ..cfg };
        let pairs = full.timestep_pairs(1000).unwrap();
        assert_eq!(pairs.len(), 1000);
        assert_eq!(pairs[0], (1000, 999));
        assert_eq!(pairs[999], (1, 0));
    }

    #[test]
    fn ddim_deterministic_inverts_exact_prediction() {
        // If eps_hat equals the true eps used to noise x0, the eta = 0 step
        // lands exactly on the t_prev noising of x0.
        let s = desk();
        let n = 16usize;
        let mut r = rng::seeded(42);
        let x0: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * 1.6 - 0.8).collect();
        let x0t = Tensor::from_vec(x0, &[n]).unwrap();
        let eps = Tensor::from_vec(rng::randn_vec::<f64>(&mut r, n), &[n]).unwrap();
        for &(t, tp) in &[(1000usize, 900usize), (500, 400), (100, 0)] {
            let xt = add_noise(&x0t, &eps, t, &s).unwrap();
            let got = ddim_step(&xt, &eps, t, tp, &s, 0.0, None).unwrap();
            let want = if tp == 0 {
                x0t.clone()
            } else {
                add_noise(&x0t, &eps, tp, &s).unwrap()
            };
            for (g, w) in got.data().iter().zip(want.data().iter()) {
                assert!((g - w).abs() < 1e-9, "t={t}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn ddim_clamps_predicted_signal() {
        // eps_hat = 0 makes x0_pred = x_t / alpha_t; a large x_t must clamp.
        let s = desk();
        let t = 900;
        let xt = Tensor::from_vec(vec![50.0f64], &[1]).unwrap();
        let z = Tensor::from_vec(vec![0.0f64], &[1]).unwrap();
        let y = ddim_step(&xt, &z, t, 800, &s, 0.0, None).unwrap();
        assert!((y.data()[0] - s.alpha(800)).abs() < 1e-12);
    }

    #[test]
    fn ddim_eta1_variance_matches_ddpm_posterior() {
        // Monte-Carlo variance of the eta = 1 step equals the ancestral
        // posterior variance sigma_tilde^2 within 5%.
        let s = desk();
        let (t, tp) = (800usize, 799usize);
        let a_t = s.alpha(t);
        let s_t = s.sigma(t);
        let a_p = s.alpha(tp);
        let s_p = s.sigma(tp);
        let var_want = (s_p * s_p) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_p * a_p));

        let xt = Tensor::from_vec(vec![0.1f64], &[1]).unwrap();
        let eh = Tensor::from_vec(vec![0.2f64], &[1]).unwrap();
        let trials = 20000;
        let mut vals = Vec::with_capacity(trials);
        for k in 0..trials as u64 {
            let mut r = rng::derived(7, 2, k);
            let z = Tensor::from_vec(vec![rng::normal_f64(&mut r)], &[1]).unwrap();
            vals.push(ddim_step(&xt, &eh, t, tp, &s, 1.0, Some(&z)).unwrap().data()[0]);
        }
        let mean: f64 = vals.iter().sum::<f64>() / trials as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / trials as f64;
        assert!(
            (var - var_want).abs() / var_want < 0.05,
            "mc var {var} vs posterior var {var_want}"
        );
    }

    #[test]
    fn ddim_stochastic_requires_noise() {
        let s = desk();
        let xt = Tensor::from_vec(vec![0.1f64], &[1]).unwrap();
        let eh = Tensor::from_vec(vec![0.0f64], &[1]).unwrap();
        assert!(ddim_step(&xt, &eh, 800, 700, &s, 1.0, None).is_err());
        assert!(ddim_step(&xt, &eh, 700, 800, &s, 0.0, None).is_err());
    }
}
