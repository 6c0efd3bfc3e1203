//! Exact ε-prediction for isotropic Gaussian-mixture data.
//!
//! For data `x ~ Σ_k w_k N(μ_k, σ_k² I)` noised to `z = √ᾱ x + √(1−ᾱ) ε`,
//! each component has marginal `N(√ᾱ μ_k, v_k I)` with
//! `v_k = ᾱ σ_k² + 1 − ᾱ`, and the optimal predictor is
//! `ε*(z) = (z − √ᾱ E[x | z]) / √(1 − ᾱ)`.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Condition, EpsPredictor};
use crate::digest;
use crate::error::{check_dim, Error, Result};
use crate::random::Rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Isotropic variance σ²; zero is a point mass.
    pub variance: f64,
    pub weight: f64,
}

impl Component {
    pub fn new(mean: Vec<f64>, variance: f64, weight: f64) -> Self {
        Self { mean, variance, weight }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GaussianMixture {
    pub components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Self {
        Self { components }
    }

    pub fn single(mean: Vec<f64>, variance: f64) -> Self {
        Self::new(vec![Component::new(mean, variance, 1.0)])
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    fn validate(&self, dim: usize, label: &Condition) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::config(format!("mixture for {label} has no components")));
        }
        let mut total = 0.0;
        for c in &self.components {
            check_dim(dim, c.mean.len())?;
            if !(c.variance >= 0.0) || !(c.weight > 0.0) {
                return Err(Error::config(format!("mixture for {label}: variance must be >= 0 and weight > 0")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights for {label} sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Per-component log joint terms `log w_k + log N(z; √ᾱ μ_k, v_k I)`
    /// without the shared `−d/2 log 2π`.
    fn log_terms(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let d = z.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let v = alpha_bar * c.variance + 1.0 - alpha_bar;
                let sq: f64 = z
                    .iter()
                    .zip(&c.mean)
                    .map(|(zi, mi)| {
                        let r = zi - sa * mi;
                        r * r
                    })
                    .sum();
                c.weight.ln() - 0.5 * d * v.ln() - 0.5 * sq / v
            })
            .collect()
    }

    /// Posterior component probabilities given `z` at noise level `ᾱ`.
    pub fn responsibilities(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let logs = self.log_terms(z, alpha_bar);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= total);
        r
    }

    /// Closed-form `E[x | z]`.
    pub fn posterior_mean(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let r = self.responsibilities(z, alpha_bar);
        let mut out = vec![0.0; z.len()];
        for (c, rk) in self.components.iter().zip(&r) {
            let v = alpha_bar * c.variance + 1.0 - alpha_bar;
            let gain = sa * c.variance / v;
            for ((o, zi), mi) in out.iter_mut().zip(z).zip(&c.mean) {
                *o += rk * (mi + gain * (zi - sa * mi));
            }
        }
        out
    }

    /// Optimal ε-prediction at noise level `ᾱ`.
    pub fn eps(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let sn = (1.0 - alpha_bar).sqrt();
        self.posterior_mean(z, alpha_bar).iter().zip(z).map(|(m, zi)| (zi - sa * m) / sn).collect()
    }

    /// `log p_t(z)` of the noised marginal.
    pub fn log_density(&self, z: &[f64], alpha_bar: f64) -> f64 {
        let logs = self.log_terms(z, alpha_bar);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        use rand::Rng as _;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &self.components[pick];
        let sd = c.variance.sqrt();
        c.mean.iter().map(|m| m + sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
    }
}

/// Per-condition data distributions for the analytic oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    dim: usize,
    conditions: BTreeMap<Condition, GaussianMixture>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionEntry {
    condition: Condition,
    components: Vec<Component>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureSpecRepr {
    dim: usize,
    conditions: Vec<ConditionEntry>,
}

impl Serialize for MixtureSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MixtureSpecRepr {
            dim: self.dim,
            conditions: self
                .conditions
                .iter()
                .map(|(c, m)| ConditionEntry { condition: *c, components: m.components.clone() })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MixtureSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MixtureSpecRepr::deserialize(d)?;
        let conditions =
            repr.conditions.into_iter().map(|e| (e.condition, GaussianMixture::new(e.components))).collect();
        MixtureSpec::new(repr.dim, conditions).map_err(serde::de::Error::custom)
    }
}

impl MixtureSpec {
    /// Validates weights, variances and dimensions. A `Null` entry is required.
    pub fn new(dim: usize, conditions: BTreeMap<Condition, GaussianMixture>) -> Result<Self> {
        if !conditions.contains_key(&Condition::Null) {
            return Err(Error::config("mixture spec needs a null-condition mixture"));
        }
        for (label, m) in &conditions {
            m.validate(dim, label)?;
        }
        Ok(Self { dim, conditions })
    }

    /// Builds the spec from per-class mixtures; the null mixture is their
    /// prior-weighted union. `degraded`, if given, is used verbatim.
    pub fn from_classes(
        classes: Vec<(u32, GaussianMixture)>,
        priors: &[f64],
        degraded: Option<GaussianMixture>,
    ) -> Result<Self> {
        if classes.len() != priors.len() || classes.is_empty() {
            return Err(Error::config("need one prior per class"));
        }
        let dim = classes[0].1.dim();
        let mut union = Vec::new();
        for ((_, m), p) in classes.iter().zip(priors) {
            for c in &m.components {
                union.push(Component::new(c.mean.clone(), c.variance, c.weight * p));
            }
        }
        let mut map = BTreeMap::new();
        map.insert(Condition::Null, GaussianMixture::new(union));
        for (id, m) in classes {
            map.insert(Condition::Class(id), m);
        }
        if let Some(d) = degraded {
            map.insert(Condition::Degraded, d);
        }
        Self::new(dim, map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mixture(&self, y: &Condition) -> Result<&GaussianMixture> {
        self.conditions.get(y).ok_or(Error::UnknownCondition(*y))
    }

    pub fn conditions(&self) -> impl Iterator<Item = (&Condition, &GaussianMixture)> {
        self.conditions.iter()
    }

    /// Replaces (or adds) the mixture for one condition.
    pub fn with_condition(mut self, y: Condition, m: GaussianMixture) -> Result<Self> {
        self.conditions.insert(y, m);
        Self::new(self.dim, self.conditions)
    }
}

/// `ε*(z, y, t)` for a known mixture.
pub fn analytic_eps(spec: &MixtureSpec, sched: &NoiseSchedule, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_dim(spec.dim, z.len())?;
    Ok(spec.mixture(y)?.eps(z, sched.alpha_bar(t)))
}

/// The analytic oracle as an [`EpsPredictor`].
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    spec: MixtureSpec,
    sched: NoiseSchedule,
}

impl AnalyticPredictor {
    pub fn new(spec: MixtureSpec, sched: NoiseSchedule) -> Self {
        Self { spec, sched }
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn posterior_mean(&self, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
        self.sched.check_t(t)?;
        check_dim(self.spec.dim, z.len())?;
        Ok(self.spec.mixture(y)?.posterior_mean(z, self.sched.alpha_bar(t)))
    }

    pub fn log_density(&self, z: &[f64], y: &Condition, t: usize) -> Result<f64> {
        self.sched.check_t(t)?;
        Ok(self.spec.mixture(y)?.log_density(z, self.sched.alpha_bar(t)))
    }
}

impl EpsPredictor for AnalyticPredictor {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn predict(&self, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
        analytic_eps(&self.spec, &self.sched, z, y, t)
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&(&self.spec, self.sched.config())).expect("serializable");
        digest::sha256_hex(&json)
    }
}
