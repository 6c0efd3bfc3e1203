//! Distillation directions in sample space.
//!
//! Every estimator takes the noise draw from the caller, so paired runs and
//! the two branches of DDS see exactly the same `ε`. A direction is a loss
//! gradient: a generator update moves against it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decompose::domain_from_uncond;
use crate::digest;
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score::{cfg_combine, Condition, EpsPredictor};
use crate::stats::{self, sub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Sds,
    Nfsd,
    Dds,
    Vsd,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Sds, Estimator::Nfsd, Estimator::Dds, Estimator::Vsd];

    /// Guidance scale used when none is configured: 100 for SDS, 7.5
    /// otherwise.
    pub fn default_scale(self) -> f64 {
        match self {
            Estimator::Sds => 100.0,
            _ => 7.5,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Sds => "sds",
            Estimator::Nfsd => "nfsd",
            Estimator::Dds => "dds",
            Estimator::Vsd => "vsd",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sds" => Ok(Estimator::Sds),
            "nfsd" => Ok(Estimator::Nfsd),
            "dds" => Ok(Estimator::Dds),
            "vsd" => Ok(Estimator::Vsd),
            _ => Err(Error::config(format!("unknown estimator {s:?} (sds, nfsd, dds, vsd)"))),
        }
    }
}

/// `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    ConstantOne,
    OneMinusAlphaBar,
}

impl WeightFn {
    pub fn eval(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            WeightFn::ConstantOne => 1.0,
            WeightFn::OneMinusAlphaBar => 1.0 - sched.alpha_bar(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub direction: Vec<f64>,
    pub weight: f64,
    pub t: usize,
    pub estimator: Estimator,
    pub eps_used: Vec<f64>,
}

impl GradEstimate {
    pub fn norm(&self) -> f64 {
        stats::norm(&self.direction)
    }

    /// Short hash of `(t, ε)`, logged to prove paired runs share draws.
    pub fn draw_fingerprint(&self) -> String {
        digest::draw_fingerprint(self.t, &self.eps_used)
    }
}

/// Weight, noised sample and `ε_∅` shared by the estimators.
struct Prepared {
    w: f64,
    z: Vec<f64>,
    uncond: Vec<f64>,
}

fn prepare<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
    eps: &[f64],
    w: WeightFn,
) -> Result<Prepared> {
    check_dim(pred.dim(), x.len())?;
    let z = sched.add_noise(x, t, eps)?.z;
    let uncond = pred.predict(&z, &Condition::Null, t)?;
    Ok(Prepared { w: w.eval(sched, t), z, uncond })
}

fn guided<P: EpsPredictor + ?Sized>(pred: &P, p: &Prepared, y: &Condition, t: usize, s: f64) -> Result<Vec<f64>> {
    if *y == Condition::Null {
        return Ok(p.uncond.clone());
    }
    let cond = pred.predict(&p.z, y, t)?;
    cfg_combine(&p.uncond, &cond, s)
}

fn estimate(direction: Vec<f64>, w: f64, t: usize, estimator: Estimator, eps: &[f64]) -> GradEstimate {
    GradEstimate { direction, weight: w, t, estimator, eps_used: eps.to_vec() }
}

/// `w(t)·(ε^s(z_t; y, t) − ε)`.
#[allow(clippy::too_many_arguments)]
pub fn sds_grad<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    y: &Condition,
    t: usize,
    eps: &[f64],
    s: f64,
    w: WeightFn,
) -> Result<GradEstimate> {
    let p = prepare(pred, sched, x, t, eps, w)?;
    let g = guided(pred, &p, y, t, s)?;
    let dir = g.iter().zip(eps).map(|(g, e)| p.w * (g - e)).collect();
    Ok(estimate(dir, p.w, t, Estimator::Sds, eps))
}

/// `w(t)·(δD + s·δC)`: two predictor calls below `tau`, three above.
#[allow(clippy::too_many_arguments)]
pub fn nfsd_grad<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    y: &Condition,
    t: usize,
    eps: &[f64],
    s: f64,
    w: WeightFn,
    tau: usize,
    y_neg: &Condition,
) -> Result<GradEstimate> {
    if tau == 0 {
        return Err(Error::config("tau must be at least 1"));
    }
    let p = prepare(pred, sched, x, t, eps, w)?;
    let delta_d = domain_from_uncond(pred, &p.z, &p.uncond, t, tau, y_neg)?;
    let delta_c = if *y == Condition::Null { vec![0.0; x.len()] } else { sub(&pred.predict(&p.z, y, t)?, &p.uncond) };
    let dir = delta_d.iter().zip(&delta_c).map(|(d, c)| p.w * (d + s * c)).collect();
    Ok(estimate(dir, p.w, t, Estimator::Nfsd, eps))
}

/// Both forms of the DDS direction at one shared noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DdsForms {
    /// `sds(x, y) − sds(x_ref, y_ref)`, the direction actually used.
    pub two_sds: Vec<f64>,
    /// `w·s·(δC_edit − δC_orig)`.
    pub reduced: Vec<f64>,
    /// `w·(ε_∅(z) − ε_∅(z_ref))`; vanishes when `x = x_ref`.
    pub uncond_gap: Vec<f64>,
}

/// DDS with both algebraic forms. `two_sds = reduced + uncond_gap` holds for
/// every input; the gap is exactly zero when both branches are noised from
/// the same sample.
#[allow(clippy::too_many_arguments)]
pub fn dds_forms<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    y: &Condition,
    x_ref: &[f64],
    y_ref: &Condition,
    t: usize,
    eps: &[f64],
    s: f64,
    w: WeightFn,
) -> Result<DdsForms> {
    check_dim(x.len(), x_ref.len())?;
    let edit = prepare(pred, sched, x, t, eps, w)?;
    let orig = prepare(pred, sched, x_ref, t, eps, w)?;
    let w = edit.w;
    let c_edit = pred.predict(&edit.z, y, t)?;
    let c_orig = pred.predict(&orig.z, y_ref, t)?;
    let g_edit = cfg_combine(&edit.uncond, &c_edit, s)?;
    let g_orig = cfg_combine(&orig.uncond, &c_orig, s)?;
    let two_sds = g_edit.iter().zip(&g_orig).zip(eps).map(|((a, b), e)| w * (a - e) - w * (b - e)).collect();
    let dc_edit = sub(&c_edit, &edit.uncond);
    let dc_orig = sub(&c_orig, &orig.uncond);
    let reduced = dc_edit.iter().zip(&dc_orig).map(|(a, b)| w * s * (a - b)).collect();
    let uncond_gap = edit.uncond.iter().zip(&orig.uncond).map(|(a, b)| w * (a - b)).collect();
    Ok(DdsForms { two_sds, reduced, uncond_gap })
}

/// Largest relative mismatch tolerated between the DDS forms before the
/// estimate is rejected as numerically broken.
pub const DDS_FORM_TOLERANCE: f64 = 1e-10;

#[allow(clippy::too_many_arguments)]
pub fn dds_grad<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    y: &Condition,
    x_ref: &[f64],
    y_ref: &Condition,
    t: usize,
    eps: &[f64],
    s: f64,
    w: WeightFn,
) -> Result<GradEstimate> {
    let forms = dds_forms(pred, sched, x, y, x_ref, y_ref, t, eps, s, w)?;
    let rebuilt = stats::add(&forms.reduced, &forms.uncond_gap);
    let err = stats::distance(&forms.two_sds, &rebuilt);
    let scale = stats::norm(&forms.reduced) + stats::norm(&forms.uncond_gap) + stats::norm(&forms.two_sds);
    if err > DDS_FORM_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!("DDS forms disagree by {err:e}")));
    }
    let weight = w.eval(sched, t);
    Ok(estimate(forms.two_sds, weight, t, Estimator::Dds, eps))
}

/// `w(t)·(ε^s(z_t; y, t) − aux(z_t; y, t))`.
#[allow(clippy::too_many_arguments)]
pub fn vsd_grad<P: EpsPredictor + ?Sized, A: EpsPredictor + ?Sized>(
    pred: &P,
    aux: &A,
    sched: &NoiseSchedule,
    x: &[f64],
    y: &Condition,
    t: usize,
    eps: &[f64],
    s: f64,
    w: WeightFn,
) -> Result<GradEstimate> {
    check_dim(pred.dim(), aux.dim())?;
    let p = prepare(pred, sched, x, t, eps, w)?;
    let g = guided(pred, &p, y, t, s)?;
    let a = aux.predict(&p.z, y, t)?;
    let dir = g.iter().zip(&a).map(|(g, a)| p.w * (g - a)).collect();
    Ok(estimate(dir, p.w, t, Estimator::Vsd, eps))
}
