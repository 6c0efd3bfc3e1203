//! Desk-scale domains with known densities: a 2-D two-mode mixture and an
//! 8×8 "bars" image mixture, each with a degraded condition standing in for
//! a negative prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::Rng;
use crate::score::{Component, Condition, GaussianMixture, MixtureSpec};
use crate::stats;

/// An analytic domain plus the metadata the engine and probes need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDomain {
    pub spec: MixtureSpec,
    /// `[height, width]` for image domains, `[dim]` otherwise.
    pub shape: Vec<usize>,
    /// Component standard deviation shared by every clean component.
    pub sigma: f64,
}

impl ToyDomain {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Component means of condition `y`.
    pub fn modes(&self, y: &Condition) -> Result<Vec<Vec<f64>>> {
        Ok(self.spec.mixture(y)?.components.iter().map(|c| c.mean.clone()).collect())
    }

    /// Distance from `x` to every component mean of `y`.
    pub fn mode_distances(&self, x: &[f64], y: &Condition) -> Result<Vec<f64>> {
        Ok(self.modes(y)?.iter().map(|m| stats::distance(x, m)).collect())
    }

    /// `n_per_condition` samples from each class, plus as many degraded
    /// records made by corrupting null samples with `corrupt`.
    pub fn dataset(
        &self,
        n_per_condition: usize,
        rng: &mut Rng,
        corrupt: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Vec<(Vec<f64>, Condition)>> {
        let mut out = Vec::new();
        for (y, m) in self.spec.conditions() {
            match y {
                Condition::Class(_) => {
                    out.extend((0..n_per_condition).map(|_| (m.sample(rng), *y)));
                }
                Condition::Degraded => {
                    let null = self.spec.mixture(&Condition::Null)?;
                    out.extend((0..n_per_condition).map(|_| (corrupt(&null.sample(rng)), *y)));
                }
                Condition::Null => {}
            }
        }
        if out.is_empty() {
            return Err(Error::config("domain has no class conditions"));
        }
        Ok(out)
    }
}

/// Parameters of the 2-D two-mode domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoModeConfig {
    /// Class-0 mode.
    pub mode_a: [f64; 2],
    /// Class-1 mode.
    pub mode_b: [f64; 2],
    pub sigma: f64,
    /// Extra variance of the degraded condition's components.
    pub degraded_extra_variance: f64,
}

impl Default for TwoModeConfig {
    fn default() -> Self {
        Self { mode_a: [-2.0, 0.0], mode_b: [2.0, 0.0], sigma: 0.5, degraded_extra_variance: 1.0 }
    }
}

/// Two equal-weight classes in the plane. The degraded condition keeps the
/// mode locations but inflates their variance, so its δD pulls samples back
/// onto the sharp modes.
pub fn two_mode(cfg: TwoModeConfig) -> Result<ToyDomain> {
    if !(cfg.sigma > 0.0) || !(cfg.degraded_extra_variance > 0.0) || cfg.mode_a == cfg.mode_b {
        return Err(Error::config("two-mode domain needs distinct modes and positive variances"));
    }
    let var = cfg.sigma * cfg.sigma;
    let (a, b) = (cfg.mode_a.to_vec(), cfg.mode_b.to_vec());
    let wide = var + cfg.degraded_extra_variance;
    let degraded =
        GaussianMixture::new(vec![Component::new(a.clone(), wide, 0.5), Component::new(b.clone(), wide, 0.5)]);
    let classes = vec![(0, GaussianMixture::single(a, var)), (1, GaussianMixture::single(b, var))];
    let spec = MixtureSpec::from_classes(classes, &[0.5, 0.5], Some(degraded))?;
    Ok(ToyDomain { spec, shape: vec![2], sigma: cfg.sigma })
}

/// Parameters of the bars image domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarsConfig {
    pub size: usize,
    pub sigma: f64,
    pub background: f64,
    pub foreground: f64,
    pub bar_width: usize,
    /// Factor applied to pixel values of degraded means after blurring.
    pub degraded_contrast: f64,
    /// Box-blur passes applied to degraded means.
    pub degraded_blur_passes: usize,
    /// Added to the component variance of the degraded condition.
    pub degraded_extra_variance: f64,
}

impl Default for BarsConfig {
    fn default() -> Self {
        Self {
            size: 8,
            sigma: 0.5,
            background: -0.8,
            foreground: 0.8,
            bar_width: 2,
            degraded_contrast: 0.5,
            degraded_blur_passes: 1,
            degraded_extra_variance: 0.0,
        }
    }
}

impl BarsConfig {
    pub fn corrupt(&self, x: &[f64]) -> Vec<f64> {
        corrupt(x, self.size, self.size, self.degraded_blur_passes, self.degraded_contrast)
    }

    fn bar_starts(&self) -> Vec<usize> {
        (0..self.size.saturating_sub(self.bar_width - 1)).step_by(self.bar_width + 1).collect()
    }
}

/// Class 0: horizontal bars; class 1: vertical bars. Each bar position is
/// one equally weighted component. The degraded condition holds blurred,
/// contrast-reduced copies of every clean mean with the same variance.
pub fn bars(cfg: BarsConfig) -> Result<ToyDomain> {
    if cfg.size < 3
        || cfg.bar_width == 0
        || cfg.bar_width >= cfg.size
        || !(cfg.sigma >= 0.0)
        || !(cfg.degraded_extra_variance >= 0.0)
    {
        return Err(Error::config("invalid bars configuration"));
    }
    let n = cfg.size;
    let var = cfg.sigma * cfg.sigma;
    let starts = cfg.bar_starts();
    let image = |horizontal: bool, s: usize| {
        let mut img = vec![cfg.background; n * n];
        for r in 0..n {
            for c in 0..n {
                let k = if horizontal { r } else { c };
                if k >= s && k < s + cfg.bar_width {
                    img[r * n + c] = cfg.foreground;
                }
            }
        }
        img
    };
    let w = 1.0 / starts.len() as f64;
    let class = |horizontal: bool| {
        GaussianMixture::new(starts.iter().map(|&s| Component::new(image(horizontal, s), var, w)).collect())
    };
    let (h, v) = (class(true), class(false));
    let degraded = GaussianMixture::new(
        h.components
            .iter()
            .chain(&v.components)
            .map(|c| Component::new(cfg.corrupt(&c.mean), var + cfg.degraded_extra_variance, 0.5 * c.weight))
            .collect(),
    );
    let spec = MixtureSpec::from_classes(vec![(0, h), (1, v)], &[0.5, 0.5], Some(degraded))?;
    Ok(ToyDomain { spec, shape: vec![n, n], sigma: cfg.sigma })
}

/// 3×3 box blur with edge clamping.
pub fn box_blur(x: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for dr in [-1i64, 0, 1] {
                for dc in [-1i64, 0, 1] {
                    let rr = (r as i64 + dr).clamp(0, height as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, width as i64 - 1) as usize;
                    acc += x[rr * width + cc];
                }
            }
            out[r * width + c] = acc / 9.0;
        }
    }
    out
}

/// `passes` box blurs followed by scaling toward zero by `contrast`.
pub fn corrupt(x: &[f64], height: usize, width: usize, passes: usize, contrast: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for _ in 0..passes {
        y = box_blur(&y, height, width);
    }
    y.iter().map(|v| v * contrast).collect()
}

/// Mean squared forward difference over both axes; a sharpness proxy.
pub fn gradient_energy(x: &[f64], height: usize, width: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in 0..height {
        for c in 0..width {
            let v = x[r * width + c];
            if c + 1 < width {
                acc += (x[r * width + c + 1] - v).powi(2);
                n += 1;
            }
            if r + 1 < height {
                acc += (x[(r + 1) * width + c] - v).powi(2);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Fraction of entries with `|v| ≥ limit`.
pub fn saturation(x: &[f64], limit: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().filter(|v| v.abs() >= limit).count() as f64 / x.len() as f64
}
