//! Discrete forward-diffusion schedules, forward noising and ancestral
//! (DDPM) reverse steps.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1` implied.

use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{check_dim, Error, Result};
use crate::random::{self, Rng};
use crate::score::{cfg_combine, Condition, EpsPredictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β linear in t.
    Linear,
    /// √β linear in t (the latent-diffusion convention).
    ScaledLinear,
    /// Cosine ᾱ curve, with β clamped into `[beta_start, beta_end]`.
    Cosine,
}

/// Serializable description of a schedule; the table is rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.02;

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        Self { kind: ScheduleKind::Linear, timesteps, beta_start, beta_end }
    }

    /// Linear schedule with the T=1000 endpoints rescaled by `1000 / T`, so
    /// that a short chain covers the same total noise.
    pub fn linear_rescaled(timesteps: usize) -> Self {
        let k = 1000.0 / timesteps as f64;
        Self::linear(timesteps, Self::DEFAULT_BETA_START * k, Self::DEFAULT_BETA_END * k)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::linear(1000, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// A forward-noised sample together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub z: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

pub fn build_schedule(config: ScheduleConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::new(config)
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { kind, timesteps: n, beta_start: b0, beta_end: b1 } = config;
        if n < 2 {
            return Err(Error::config(format!("schedule needs T >= 2, got {n}")));
        }
        if !(b0 > 0.0 && b1 < 1.0 && b0 <= b1) {
            return Err(Error::config(format!("beta range [{b0}, {b1}] must satisfy 0 < beta_start <= beta_end < 1")));
        }
        let span = (n - 1) as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..n).map(|i| b0 + (b1 - b0) * i as f64 / span).collect(),
            ScheduleKind::ScaledLinear => {
                let (s0, s1) = (b0.sqrt(), b1.sqrt());
                (0..n)
                    .map(|i| {
                        let s = s0 + (s1 - s0) * i as f64 / span;
                        s * s
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let s = 0.008;
                    ((t / n as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=n).map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(b0, b1)).collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(n);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if !alpha_bars.iter().all(|a| *a > 0.0 && *a < 1.0) {
            return Err(Error::config("schedule underflows: some alpha_bar is not in (0, 1)"));
        }
        Ok(Self { config, betas, alpha_bars })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Range { t, max: self.timesteps() });
        }
        Ok(())
    }

    /// ᾱ_t for `t ∈ [0, T]`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Hash of the ᾱ table; used to tie checkpoints and runs to a schedule.
    pub fn hash(&self) -> String {
        digest::hash_f64s(&self.alpha_bars)
    }

    /// `round(frac · T)` clamped into `[1, T]`.
    pub fn fraction(&self, frac: f64) -> usize {
        ((frac * self.timesteps() as f64).round() as usize).clamp(1, self.timesteps())
    }

    /// Maps timesteps given on a T=1000 grid onto this schedule.
    pub fn scaled_grid(&self, grid_at_1000: &[usize]) -> Vec<usize> {
        grid_at_1000.iter().map(|&t| self.fraction(t as f64 / 1000.0)).collect()
    }

    pub fn add_noise(&self, x: &[f64], t: usize, eps: &[f64]) -> Result<NoisySample> {
        self.check_t(t)?;
        check_dim(x.len(), eps.len())?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let z = x.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect();
        Ok(NoisySample { z, t, eps: eps.to_vec() })
    }

    /// Mean of the DDPM reverse transition `p(z_{t-1} | z_t)` with `eps_hat`
    /// standing in for the noise.
    pub fn posterior_mean(&self, z_t: &[f64], eps_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_dim(z_t.len(), eps_hat.len())?;
        let beta = self.beta(t);
        let coef = beta / (1.0 - self.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        Ok(z_t.iter().zip(eps_hat).map(|(z, e)| inv_sqrt_alpha * (z - coef * e)).collect())
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// One ancestral step `z_t → z_{t−1}`. No noise is drawn at t = 1.
    pub fn ancestral_step(&self, z_t: &[f64], eps_hat: &[f64], t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut z = self.posterior_mean(z_t, eps_hat, t)?;
        if t > 1 {
            let sd = self.posterior_variance(t).sqrt();
            let noise = random::standard_normal(rng, z.len());
            for (zi, n) in z.iter_mut().zip(noise) {
                *zi += sd * n;
            }
        }
        Ok(z)
    }

    /// Full reverse chain from `z_T ~ N(0, I)` with an arbitrary ε-estimate.
    pub fn run_chain<F>(&self, dim: usize, rng: &mut Rng, mut eps_fn: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
    {
        let mut z = random::standard_normal(rng, dim);
        for t in (1..=self.timesteps()).rev() {
            let eps_hat = eps_fn(&z, t)?;
            z = self.ancestral_step(&z, &eps_hat, t, rng)?;
        }
        Ok(z)
    }
}

/// Ancestral sampling with classifier-free guidance applied at every step.
pub fn sample(
    pred: &dyn EpsPredictor,
    sched: &NoiseSchedule,
    y: &Condition,
    s: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if !(s >= 0.0) {
        return Err(Error::config(format!("guidance scale must be >= 0, got {s}")));
    }
    sched.run_chain(pred.dim(), rng, |z, t| {
        let uncond = pred.predict(z, &Condition::Null, t)?;
        let cond = pred.predict(z, y, t)?;
        cfg_combine(&uncond, &cond, s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng_from_seed;

    /// Independent product accumulation in a different order.
    fn brute_alpha_bar(b0: f64, b1: f64, n: usize, t: usize) -> f64 {
        let mut logs = 0.0;
        for i in (0..t).rev() {
            let beta = b0 + (b1 - b0) * (i as f64) / ((n - 1) as f64);
            logs += (1.0 - beta).ln();
        }
        logs.exp()
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn last_alpha_bar_matches_brute_force_product() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let brute = brute_alpha_bar(1e-4, 0.02, 1000, 1000);
        // Frozen from a 40-digit product of (1 - beta_i).
        let frozen = 4.035_829_765_375_683e-5;
        assert!((brute / frozen - 1.0).abs() < 1e-10, "{brute}");
        assert!((s.alpha_bar(1000) / frozen - 1.0).abs() < 1e-12);
        assert!((s.alpha_bar(1000) / brute - 1.0).abs() < 1e-10);
        let mid = brute_alpha_bar(1e-4, 0.02, 1000, 500);
        assert!((s.alpha_bar(500) / mid - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::new(ScheduleConfig::linear(10, 1e-4, 0.02)).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for kind in [ScheduleKind::ScaledLinear, ScheduleKind::Cosine] {
            let c = ScheduleConfig { kind, timesteps: 50, beta_start: 1e-4, beta_end: 0.5 };
            let s = NoiseSchedule::new(c).unwrap();
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(NoiseSchedule::new(ScheduleConfig::linear(1, 1e-4, 0.02)), Err(Error::Config(_))));
        assert!(NoiseSchedule::new(ScheduleConfig::linear(10, 0.0, 0.02)).is_err());
        assert!(NoiseSchedule::new(ScheduleConfig::linear(10, 0.1, 1.0)).is_err());
        assert!(NoiseSchedule::new(ScheduleConfig::linear(10, 0.3, 0.2)).is_err());
    }

    #[test]
    fn add_noise_edge_cases() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let x = [0.5, -1.0, 2.0];
        let a = s.alpha_bar(300);
        let z = s.add_noise(&x, 300, &[0.0; 3]).unwrap();
        for (zi, xi) in z.z.iter().zip(&x) {
            assert_eq!(*zi, a.sqrt() * xi);
        }
        let eps = [0.3, 0.1, -0.7];
        let z = s.add_noise(&[0.0; 3], 300, &eps).unwrap();
        for (zi, ei) in z.z.iter().zip(&eps) {
            assert_eq!(*zi, (1.0 - a).sqrt() * ei);
        }
        assert_eq!(z.eps, eps);
        assert!(matches!(s.add_noise(&x, 300, &[0.0; 2]), Err(Error::Dimension { .. })));
        assert!(matches!(s.add_noise(&x, 0, &[0.0; 3]), Err(Error::Range { .. })));
        assert!(matches!(s.add_noise(&x, 1001, &[0.0; 3]), Err(Error::Range { .. })));
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let mut rng = rng_from_seed(7);
        let t = 400;
        let x = [1.0, -2.0];
        let n = 10_000;
        let mut zs = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let eps = random::standard_normal(&mut rng, 2);
            let z = s.add_noise(&x, t, &eps).unwrap();
            zs[0].push(z.z[0]);
            zs[1].push(z.z[1]);
        }
        let target = 1.0 - s.alpha_bar(t);
        for c in &zs {
            let v = crate::stats::variance(c);
            assert!((v / target - 1.0).abs() < 0.05, "variance {v} vs {target}");
        }
    }

    #[test]
    fn terminal_step_is_deterministic() {
        let s = NoiseSchedule::new(ScheduleConfig::linear_rescaled(100)).unwrap();
        let z = [0.3, -0.2];
        let e = [0.1, 0.4];
        let a = s.ancestral_step(&z, &e, 1, &mut rng_from_seed(1)).unwrap();
        let b = s.ancestral_step(&z, &e, 1, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, b);
        assert!(s.ancestral_step(&z, &e, 0, &mut rng_from_seed(1)).is_err());
        assert!(s.ancestral_step(&z, &e, 101, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn exact_eps_moves_toward_clean_signal() {
        let s = NoiseSchedule::new(ScheduleConfig::linear_rescaled(100)).unwrap();
        let x = [1.5, -0.5, 0.25];
        let mut rng = rng_from_seed(3);
        for t in [2, 10, 50, 100] {
            let eps = random::standard_normal(&mut rng, 3);
            let ns = s.add_noise(&x, t, &eps).unwrap();
            let mean = s.posterior_mean(&ns.z, &ns.eps, t).unwrap();
            let target: Vec<f64> = x.iter().map(|v| s.alpha_bar(t - 1).sqrt() * v).collect();
            let before = crate::stats::distance(&ns.z, &target);
            let after = crate::stats::distance(&mean, &target);
            assert!(after < before, "t={t}: {after} !< {before}");
        }
        // At t = 1 the exact noise recovers x itself.
        let eps = [0.2, -0.1, 0.3];
        let ns = s.add_noise(&x, 1, &eps).unwrap();
        let out = s.ancestral_step(&ns.z, &ns.eps, 1, &mut rng).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_json_shape() {
        let json = serde_json::to_value(ScheduleConfig::default()).unwrap();
        assert_eq!(json["kind"], "linear");
        assert_eq!(json["T"], 1000);
        assert_eq!(json["beta_start"], 1e-4);
        assert_eq!(json["beta_end"], 0.02);
        let back: ScheduleConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, ScheduleConfig::default());
    }
}
