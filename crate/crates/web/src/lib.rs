//! Browser demo on the 2-D two-mode domain: guided sampling sweeps, SDS and
//! NFSD optimisation paths, and the δC/δD/δN decomposition on a grid.
//!
//! Every export returns a JSON string; the plain-Rust functions behind them
//! are what the native tests exercise.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use score_forge::decompose::{decompose_score, default_tau};
use score_forge::distill::{nfsd_grad, sds_grad, Estimator};
use score_forge::engine::{iteration_draw, DistillConfig};
use score_forge::optim::{adam_step, AdamState};
use score_forge::random::{draw_rng, standard_normal, streams};
use score_forge::schedule::{sample, NoiseSchedule, ScheduleConfig};
use score_forge::score::{AnalyticPredictor, Condition};
use score_forge::stats::{self, VectorMoments};
use score_forge::toy::{two_mode, TwoModeConfig};
use score_forge::Result;

/// Domain knobs shared by the three demos.
#[derive(Debug, Clone, Copy)]
pub struct Scene {
    pub separation: f64,
    pub sigma: f64,
}

impl Scene {
    fn build(self) -> Result<(AnalyticPredictor, NoiseSchedule, [Vec<f64>; 2])> {
        let h = self.separation / 2.0;
        let domain =
            two_mode(TwoModeConfig { mode_a: [-h, 0.0], mode_b: [h, 0.0], sigma: self.sigma, ..Default::default() })?;
        let sched = NoiseSchedule::new(ScheduleConfig::default())?;
        let pred = AnalyticPredictor::new(domain.spec, sched.clone());
        Ok((pred, sched, [vec![-h, 0.0], vec![h, 0.0]]))
    }
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub s: f64,
    pub samples: Vec<[f64; 2]>,
    /// Chains closer to the class-0 mode than to the class-1 mode.
    pub in_mode: usize,
    /// Covariance trace of the in-mode chains.
    pub trace_cov: f64,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub modes: [Vec<f64>; 2],
    pub rows: Vec<SweepRow>,
}

/// Class-0 ancestral samples at each guidance scale, common noise across scales.
pub fn run_sweep(scene: Scene, scales: &[f64], chains: usize, seed: u64) -> Result<Sweep> {
    let (pred, sched, modes) = scene.build()?;
    let mut rows = Vec::with_capacity(scales.len());
    for &s in scales {
        let mut m = VectorMoments::new(2);
        let mut samples = Vec::with_capacity(chains);
        for i in 0..chains {
            let x = sample(&pred, &sched, &Condition::Class(0), s, &mut draw_rng(seed, streams::SAMPLE, i as u64))?;
            if stats::distance(&x, &modes[0]) <= stats::distance(&x, &modes[1]) {
                m.push(&x);
            }
            samples.push([x[0], x[1]]);
        }
        let trace_cov = if m.count() > 1 { m.trace_cov() } else { 0.0 };
        rows.push(SweepRow { s, samples, in_mode: m.count(), trace_cov });
    }
    Ok(Sweep { modes, rows })
}

#[derive(Debug, Serialize)]
pub struct Trajectory {
    pub modes: [Vec<f64>; 2],
    pub t: Vec<usize>,
    pub sds: Vec<[f64; 2]>,
    pub nfsd: Vec<[f64; 2]>,
}

/// SDS and NFSD paths of a point optimised towards class 0 from `start`,
/// both fed the same `(t, ε)` sequence.
pub fn run_trajectory(scene: Scene, start: [f64; 2], s: f64, iters: usize, seed: u64) -> Result<Trajectory> {
    let (pred, sched, modes) = scene.build()?;
    let base = DistillConfig { s: Some(s), iters, seed, ..Default::default() };
    base.validate()?;
    let tau = base.tau(&sched);
    let y = Condition::Class(0);
    let mut paths = Vec::new();
    let mut ts = Vec::with_capacity(iters);
    for est in [Estimator::Sds, Estimator::Nfsd] {
        let mut x = start.to_vec();
        let mut adam = AdamState::new(2);
        let mut path = vec![start];
        for iter in 0..iters {
            let (t, eps) = iteration_draw(&base, iter, &sched, 2);
            let g = match est {
                Estimator::Sds => sds_grad(&pred, &sched, &x, &y, t, &eps, s, base.weight_fn)?,
                _ => nfsd_grad(&pred, &sched, &x, &y, t, &eps, s, base.weight_fn, tau, &base.y_neg)?,
            };
            adam_step(&mut adam, &mut x, &g.direction, &base.adam())?;
            path.push([x[0], x[1]]);
            if est == Estimator::Sds {
                ts.push(t);
            }
        }
        paths.push(path);
    }
    let nfsd = paths.pop().unwrap_or_default();
    let sds = paths.pop().unwrap_or_default();
    Ok(Trajectory { modes, t: ts, sds, nfsd })
}

#[derive(Debug, Serialize)]
pub struct Field {
    pub t: usize,
    pub tau: usize,
    pub points: Vec<[f64; 2]>,
    pub delta_c: Vec<[f64; 2]>,
    pub delta_d: Vec<[f64; 2]>,
    pub delta_n: Vec<[f64; 2]>,
}

/// δC, δD and δN at `n × n` points of `[-extent, extent]²`, each point noised
/// to `t` with one shared ε.
pub fn run_field(scene: Scene, t: usize, s: f64, n: usize, extent: f64, seed: u64) -> Result<Field> {
    let (pred, sched, _) = scene.build()?;
    sched.check_t(t)?;
    let tau = default_tau(sched.timesteps());
    let eps = standard_normal(&mut draw_rng(seed, streams::PROBE, 0), 2);
    let mut f = Field { t, tau, points: vec![], delta_c: vec![], delta_d: vec![], delta_n: vec![] };
    let step = if n > 1 { 2.0 * extent / (n - 1) as f64 } else { 0.0 };
    let pair = |v: &[f64]| [v[0], v[1]];
    for i in 0..n {
        for j in 0..n {
            let x = [-extent + j as f64 * step, -extent + i as f64 * step];
            let z = sched.add_noise(&x, t, &eps)?.z;
            let d = decompose_score(&pred, &z, &Condition::Class(0), t, s, tau, &Condition::Degraded)?;
            f.points.push(x);
            f.delta_c.push(pair(&d.delta_c));
            f.delta_d.push(pair(&d.delta_d));
            f.delta_n.push(pair(&d.delta_n));
        }
    }
    Ok(f)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn cfg_sweep(
    separation: f64,
    sigma: f64,
    scales: Vec<f64>,
    chains: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(run_sweep(Scene { separation, sigma }, &scales, chains, seed.into()))
}

#[wasm_bindgen]
pub fn sds_nfsd_trajectory(
    separation: f64,
    sigma: f64,
    start_x: f64,
    start_y: f64,
    s: f64,
    iters: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(run_trajectory(Scene { separation, sigma }, [start_x, start_y], s, iters, seed.into()))
}

#[wasm_bindgen]
pub fn decomposition_field(
    separation: f64,
    sigma: f64,
    t: usize,
    s: f64,
    n: usize,
    extent: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(run_field(Scene { separation, sigma }, t, s, n, extent, seed.into()))
}
