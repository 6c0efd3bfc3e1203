//! ε-predictors and classifier-free guidance.

mod analytic;
mod checkpoint;
mod denoiser;
#[cfg(feature = "remote")]
mod remote;
pub mod wire;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use analytic::{analytic_eps, AnalyticPredictor, Component, GaussianMixture, MixtureSpec};
pub use checkpoint::{load_model, save_model, ModelHeader};
pub use denoiser::{aux_update, train_eps_model, DenoiserArch, EpsModel, TrainConfig, TrainRecord, TrainReport};
#[cfg(feature = "remote")]
pub use remote::{remote_predictor, RemoteConfig, RemotePredictor};

/// The negative prompt handed to text-conditioned remote models for
/// [`Condition::Degraded`].
pub const NEGATIVE_PROMPT: &str = "unrealistic, blurry, low quality, out of focus, ugly, \
low contrast, dull, dark, low-resolution, gloomy";

/// What a prediction is conditioned on.
///
/// `Null` is the unconditioned token; `Degraded` is the toy-scale stand-in
/// for a negative prompt (a condition whose data are corrupted copies of
/// real samples).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Null,
    Class(u32),
    Degraded,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Null => f.write_str("null"),
            Condition::Class(id) => write!(f, "class:{id}"),
            Condition::Degraded => f.write_str("degraded"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" | "" => Ok(Condition::Null),
            "degraded" | "neg" => Ok(Condition::Degraded),
            _ => s
                .strip_prefix("class:")
                .and_then(|id| id.parse().ok())
                .map(Condition::Class)
                .ok_or_else(|| Error::config(format!("cannot parse condition {s:?}"))),
        }
    }
}

impl Serialize for Condition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `ε_φ(z; y, t)`. Implementations are deterministic: the same `(z, y, t)`
/// always yields the same output.
pub trait EpsPredictor: Send + Sync {
    fn dim(&self) -> usize;

    fn predict(&self, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>>;

    /// Content hash identifying the predictor in run manifests.
    fn fingerprint(&self) -> String;
}

impl<P: EpsPredictor + ?Sized> EpsPredictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
        (**self).predict(z, y, t)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s: f64,
}

impl GuidanceConfig {
    pub fn new(s: f64) -> Result<Self> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::config(format!("guidance scale must be finite and >= 0, got {s}")));
        }
        Ok(Self { s })
    }
}

/// Classifier-free guidance `ε_∅ + s (ε_y − ε_∅)`.
///
/// Evaluated as `(1 − s) ε_∅ + s ε_y`, which collapses to `ε_y` and `ε_∅`
/// bit-exactly at `s = 1` and `s = 0`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], s: f64) -> Result<Vec<f64>> {
    check_dim(eps_uncond.len(), eps_cond.len())?;
    let keep = 1.0 - s;
    Ok(eps_uncond.iter().zip(eps_cond).map(|(u, c)| keep * u + s * c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn collapse_cases() {
        let u = [0.3, -1.7, 2.5e-3];
        let c = [1.1, 0.2, -4.0];
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&[0.0], &[1.0], 7.5).unwrap(), vec![7.5]);
        assert!(matches!(cfg_combine(&u, &c[..2], 2.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn condition_round_trips_through_text() {
        for c in [Condition::Null, Condition::Class(7), Condition::Degraded] {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert!("class:x".parse::<Condition>().is_err());
        assert!(GuidanceConfig::new(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn cfg_is_affine_in_scale(
            u in prop::collection::vec(-10.0f64..10.0, 1..16),
            s1 in 0.0f64..120.0,
            s2 in 0.0f64..120.0,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::random::rng_from_seed(seed);
            let c: Vec<f64> = crate::random::standard_normal(&mut rng, u.len());
            let a = cfg_combine(&u, &c, s1).unwrap();
            let b = cfg_combine(&u, &c, s2).unwrap();
            let z = cfg_combine(&u, &c, 0.0).unwrap();
            let lhs: Vec<f64> = a.iter().zip(&b).zip(&z).map(|((a, b), z)| a + b - z).collect();
            let rhs = cfg_combine(&u, &c, s1 + s2).unwrap();
            let scale = crate::stats::norm(&u) + (s1 + s2) * crate::stats::norm(&c) + 1.0;
            prop_assert!(crate::stats::distance(&lhs, &rhs) <= 1e-12 * scale);
        }
    }
}
