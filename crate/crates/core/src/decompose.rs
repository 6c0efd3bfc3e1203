//! Splitting the guided prediction into condition, domain and denoising
//! parts, plus the probes used to look at each part.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::io::Csv;
use crate::random::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::score::{cfg_combine, Condition, EpsPredictor};
use crate::stats::{self, sub};

/// `round(0.2·T)`, the low-noise cut below which δD is the plain
/// unconditional prediction.
pub fn default_tau(timesteps: usize) -> usize {
    ((0.2 * timesteps as f64).round() as usize).max(1)
}

/// Threshold for an arbitrary fraction of `T`, clamped into `[1, T]`.
pub fn tau_from_frac(timesteps: usize, frac: f64) -> usize {
    ((frac * timesteps as f64).round() as usize).clamp(1, timesteps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedScore {
    pub delta_c: Vec<f64>,
    pub delta_d: Vec<f64>,
    /// `ε_∅ − δD`.
    pub delta_n: Vec<f64>,
    pub guided: Vec<f64>,
    pub s: f64,
    pub t: usize,
}

impl DecomposedScore {
    /// `δD + δN + s·δC`, which reproduces `guided` up to rounding.
    pub fn recombined(&self) -> Vec<f64> {
        self.delta_d.iter().zip(&self.delta_n).zip(&self.delta_c).map(|((d, n), c)| d + n + self.s * c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualScanRow {
    pub t: usize,
    /// Mean of `‖ε_∅(z_t) − ε‖`.
    pub residual_norm: f64,
    /// Mean of `‖ε_∅(z_t) − ε‖ / ‖ε‖`.
    pub relative_norm: f64,
    /// Mean Pearson correlation between `ε_∅(z_t) − ε` and `x`.
    pub correlation: f64,
}

/// `δC = ε_y − ε_∅`, from exactly two predictor calls.
pub fn condition_direction<P: EpsPredictor + ?Sized>(pred: &P, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
    let cond = pred.predict(z, y, t)?;
    let uncond = pred.predict(z, &Condition::Null, t)?;
    Ok(sub(&cond, &uncond))
}

/// δD from an already computed `ε_∅`: `ε_∅` below `tau`, otherwise
/// `ε_∅ − ε_neg`.
pub(crate) fn domain_from_uncond<P: EpsPredictor + ?Sized>(
    pred: &P,
    z: &[f64],
    eps_uncond: &[f64],
    t: usize,
    tau: usize,
    y_neg: &Condition,
) -> Result<Vec<f64>> {
    if t < tau {
        return Ok(eps_uncond.to_vec());
    }
    let neg = pred.predict(z, y_neg, t)?;
    Ok(sub(eps_uncond, &neg))
}

fn check_tau(tau: usize) -> Result<()> {
    if tau == 0 {
        return Err(Error::config("tau must be at least 1"));
    }
    Ok(())
}

pub fn domain_direction<P: EpsPredictor + ?Sized>(
    pred: &P,
    z: &[f64],
    t: usize,
    tau: usize,
    y_neg: &Condition,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let uncond = pred.predict(z, &Condition::Null, t)?;
    domain_from_uncond(pred, z, &uncond, t, tau, y_neg)
}

pub fn decompose_score<P: EpsPredictor + ?Sized>(
    pred: &P,
    z: &[f64],
    y: &Condition,
    t: usize,
    s: f64,
    tau: usize,
    y_neg: &Condition,
) -> Result<DecomposedScore> {
    check_tau(tau)?;
    let uncond = pred.predict(z, &Condition::Null, t)?;
    let cond = if *y == Condition::Null { uncond.clone() } else { pred.predict(z, y, t)? };
    let delta_d = domain_from_uncond(pred, z, &uncond, t, tau, y_neg)?;
    Ok(DecomposedScore {
        delta_c: sub(&cond, &uncond),
        delta_n: sub(&uncond, &delta_d),
        guided: cfg_combine(&uncond, &cond, s)?,
        delta_d,
        s,
        t,
    })
}

/// Noises `x_id` and `x_ood` with the same `eps` and returns
/// `(ε_∅(z_id), ε_∅(z_ood) − ε_∅(z_id))`, the in-domain denoising estimate
/// and the domain-correction estimate.
pub fn probe_id_ood<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x_id: &[f64],
    x_ood: &[f64],
    eps: &[f64],
    t: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(x_id.len(), x_ood.len())?;
    let z_id = sched.add_noise(x_id, t, eps)?.z;
    let z_ood = sched.add_noise(x_ood, t, eps)?.z;
    let e_id = pred.predict(&z_id, &Condition::Null, t)?;
    let e_ood = pred.predict(&z_ood, &Condition::Null, t)?;
    let delta_d = sub(&e_ood, &e_id);
    Ok((e_id, delta_d))
}

/// For each `t`, averages `‖ε_∅(z_t) − ε‖`, its ratio to `‖ε‖` and its
/// correlation with `x` over `n_draws` noise draws. Draw `i` uses a
/// sub-stream keyed by `i`, so results do not depend on evaluation order.
pub fn residual_scan<P: EpsPredictor + ?Sized>(
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    ts: &[usize],
    rng: &mut Rng,
    n_draws: usize,
) -> Result<Vec<ResidualScanRow>> {
    if n_draws == 0 {
        return Err(Error::config("residual scan needs at least one draw"));
    }
    let base = rng.next_u64();
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check_t(t)?;
        let (mut norm, mut rel, mut corr) = (0.0, 0.0, 0.0);
        for i in 0..n_draws {
            let mut r = random::draw_rng(base, random::streams::PROBE, i as u64);
            let eps = random::standard_normal(&mut r, x.len());
            let z = sched.add_noise(x, t, &eps)?.z;
            let residual = sub(&pred.predict(&z, &Condition::Null, t)?, &eps);
            let n = stats::norm(&residual);
            norm += n;
            rel += n / stats::norm(&eps).max(f64::MIN_POSITIVE);
            corr += stats::pearson(&residual, x);
        }
        let k = n_draws as f64;
        rows.push(ResidualScanRow {
            t,
            residual_norm: norm / k,
            relative_norm: rel / k,
            correlation: (corr / k).clamp(-1.0, 1.0),
        });
    }
    Ok(rows)
}

pub fn residual_scan_csv(rows: &[ResidualScanRow]) -> Csv {
    let mut csv = Csv::with_header(&["t", "residual_norm", "relative_norm", "correlation"]);
    for r in rows {
        csv.row(&[
            r.t.to_string(),
            r.residual_norm.to_string(),
            r.relative_norm.to_string(),
            r.correlation.to_string(),
        ]);
    }
    csv
}
