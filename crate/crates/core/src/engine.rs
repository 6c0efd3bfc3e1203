//! The distillation loop: timestep annealing, shared noise draws, estimator
//! dispatch, generator pullback and Adam updates.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decompose::tau_from_frac;
use crate::distill::{self, Estimator, GradEstimate, WeightFn};
use crate::error::{Error, Result};
use crate::generators::GeneratorParams;
use crate::io::{self, Csv};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::random::{self, Rng};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::score::{aux_update, Condition, EpsModel, EpsPredictor, TrainConfig};
use crate::stats::{self, VectorMoments};

/// Upper-timestep annealing. `t_max` holds at `t_max_start_frac·T` for
/// `warmup_iters`, then moves linearly to `t_max_end_frac·T` over
/// `ramp_iters` (a step when zero) and stays there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    /// Defaults to 20% of the run.
    pub warmup_iters: Option<usize>,
    pub ramp_iters: usize,
    pub t_max_start_frac: f64,
    pub t_max_end_frac: f64,
    pub t_min_frac: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { warmup_iters: None, ramp_iters: 0, t_max_start_frac: 0.98, t_max_end_frac: 0.5, t_min_frac: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VsdConfig {
    pub aux_steps_per_iter: usize,
    pub aux_lr: f64,
}

impl Default for VsdConfig {
    fn default() -> Self {
        Self { aux_steps_per_iter: 1, aux_lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdsConfig {
    /// Condition describing the reference sample (the initial render unless
    /// `reference` is set).
    pub y_ref: Condition,
    pub reference: Option<Vec<f64>>,
}

impl Default for DdsConfig {
    fn default() -> Self {
        Self { y_ref: Condition::Null, reference: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub estimator: Estimator,
    /// CFG scale; `None` picks the estimator's default.
    pub s: Option<f64>,
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub weight_fn: WeightFn,
    pub anneal: AnnealConfig,
    pub seed: u64,
    pub tau_frac: f64,
    pub condition: Condition,
    pub y_neg: Condition,
    /// Generator checkpoint interval in iterations; 0 disables.
    pub checkpoint_every: usize,
    pub vsd: Option<VsdConfig>,
    pub dds: Option<DdsConfig>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::Nfsd,
            s: None,
            iters: 1000,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            weight_fn: WeightFn::ConstantOne,
            anneal: AnnealConfig::default(),
            seed: 0,
            tau_frac: 0.2,
            condition: Condition::Class(0),
            y_neg: Condition::Degraded,
            checkpoint_every: 0,
            vsd: None,
            dds: None,
        }
    }
}

impl DistillConfig {
    pub fn scale(&self) -> f64 {
        self.s.unwrap_or_else(|| self.estimator.default_scale())
    }

    pub fn warmup_iters(&self) -> usize {
        self.anneal.warmup_iters.unwrap_or(self.iters / 5)
    }

    pub fn tau(&self, sched: &NoiseSchedule) -> usize {
        tau_from_frac(sched.timesteps(), self.tau_frac)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.anneal;
        if !(0.0 < a.t_min_frac
            && a.t_min_frac < a.t_max_end_frac
            && a.t_max_end_frac <= a.t_max_start_frac
            && a.t_max_start_frac <= 1.0)
        {
            return Err(Error::config(
                "anneal fractions must satisfy 0 < t_min_frac < t_max_end_frac <= t_max_start_frac <= 1",
            ));
        }
        if self.iters == 0 {
            return Err(Error::config("iters must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be positive"));
        }
        let s = self.scale();
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::config("guidance scale must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.tau_frac) {
            return Err(Error::config("tau_frac must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn t_min(&self, timesteps: usize) -> usize {
        ((self.anneal.t_min_frac * timesteps as f64).ceil() as usize).clamp(1, timesteps)
    }

    /// Largest timestep that may be drawn at `iter`.
    pub fn t_max(&self, iter: usize, timesteps: usize) -> usize {
        let a = &self.anneal;
        let warm = self.warmup_iters();
        let frac = if iter < warm {
            a.t_max_start_frac
        } else if a.ramp_iters > 0 && iter - warm < a.ramp_iters {
            let p = (iter - warm) as f64 / a.ramp_iters as f64;
            a.t_max_start_frac + p * (a.t_max_end_frac - a.t_max_start_frac)
        } else {
            a.t_max_end_frac
        };
        ((frac * timesteps as f64 + 1e-9).floor() as usize).clamp(self.t_min(timesteps), timesteps)
    }
}

/// Uniform integer in `[t_min, t_max(iter)]`.
pub fn sample_timestep(cfg: &DistillConfig, iter: usize, timesteps: usize, rng: &mut Rng) -> usize {
    rng.random_range(cfg.t_min(timesteps)..=cfg.t_max(iter, timesteps))
}

/// The `(t, ε)` pair for one iteration. Depends only on `(seed, iter)`, so
/// every estimator, and a resumed run, sees the same draws.
pub fn iteration_draw(cfg: &DistillConfig, iter: usize, sched: &NoiseSchedule, dim: usize) -> (usize, Vec<f64>) {
    let mut tr = random::draw_rng(cfg.seed, random::streams::TIMESTEP, iter as u64);
    let t = sample_timestep(cfg, iter, sched.timesteps(), &mut tr);
    let mut nr = random::draw_rng(cfg.seed, random::streams::NOISE, iter as u64);
    (t, random::standard_normal(&mut nr, dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub estimator: Estimator,
    pub t: usize,
    pub t_max: usize,
    pub norm: f64,
    pub weight: f64,
    pub draw: String,
    /// Distances from the render used at this iteration to each tracked mode.
    pub mode_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: DistillConfig,
    pub scale: f64,
    pub tau: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub schedule_hash: String,
    pub predictor: String,
    pub generator_init: String,
    pub aux_init: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub generator: GeneratorParams,
    pub final_render: Vec<f64>,
    pub records: Vec<IterRecord>,
    pub manifest: RunManifest,
}

/// State needed to continue a run from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    /// First iteration still to run.
    pub next_iter: usize,
    pub generator: GeneratorParams,
    pub adam: AdamState,
    pub records: Vec<IterRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where periodic and failure checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Points whose distance to each render is logged.
    pub modes: Vec<Vec<f64>>,
    pub resume: Option<ResumeState>,
}

const CKPT_GEN: &str = "generator-latest";
const CKPT_ADAM: &str = "adam-latest";
const CKPT_RECORDS: &str = "records-latest.json";

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    n: usize,
    next_iter: usize,
}

pub fn save_checkpoint(dir: &Path, state: &ResumeState, seed: u64) -> Result<()> {
    let mut mv = state.adam.m.clone();
    mv.extend_from_slice(&state.adam.v);
    let header = AdamHeader { step: state.adam.step, n: state.adam.m.len(), next_iter: state.next_iter };
    io::write_blob(&dir.join(CKPT_ADAM), &header, &mv)?;
    io::write_json(&dir.join(CKPT_RECORDS), &state.records)?;
    state.generator.save(&dir.join(CKPT_GEN), seed, state.next_iter)?;
    Ok(())
}

/// Loads the latest checkpoint in `dir`, if any.
pub fn load_checkpoint(dir: &Path) -> Result<Option<ResumeState>> {
    if !dir.join(CKPT_GEN).with_extension("json").exists() {
        return Ok(None);
    }
    let (generator, gh) = GeneratorParams::load(&dir.join(CKPT_GEN))?;
    let (ah, mv): (AdamHeader, Vec<f64>) = io::read_blob(&dir.join(CKPT_ADAM))?;
    let records: Vec<IterRecord> = io::read_json(&dir.join(CKPT_RECORDS))?;
    if ah.next_iter != gh.iter || records.len() != gh.iter || mv.len() != 2 * ah.n {
        return Err(Error::config(format!("checkpoint in {} is inconsistent", dir.display())));
    }
    let (m, v) = mv.split_at(ah.n);
    Ok(Some(ResumeState {
        next_iter: gh.iter,
        generator,
        adam: AdamState { m: m.to_vec(), v: v.to_vec(), step: ah.step },
        records,
    }))
}

/// Runs `cfg.iters` distillation steps on `gen`. For VSD, `aux` is fine-tuned
/// on every render and must be given.
pub fn run_distillation<P: EpsPredictor + ?Sized>(
    cfg: &DistillConfig,
    pred: &P,
    gen: GeneratorParams,
    sched: &NoiseSchedule,
    mut aux: Option<&mut EpsModel>,
    opts: RunOptions,
) -> Result<RunResult> {
    cfg.validate()?;
    let dim = gen.output_len();
    if dim != pred.dim() {
        return Err(Error::Dimension { expected: pred.dim(), got: dim });
    }
    if cfg.estimator == Estimator::Vsd && aux.is_none() {
        return Err(Error::config("VSD needs an auxiliary model"));
    }
    if cfg.estimator == Estimator::Vsd && opts.resume.is_some() {
        return Err(Error::config("VSD runs cannot be resumed"));
    }
    let s = cfg.scale();
    let tau = cfg.tau(sched);
    let w = cfg.weight_fn;
    let y = cfg.condition;
    let adam_cfg = cfg.adam();
    let aux_train = cfg.vsd.clone().unwrap_or_default();
    let aux_cfg = TrainConfig { lr: aux_train.aux_lr, batch_size: 1, seed: cfg.seed, ..Default::default() };
    let mut aux_rng = random::rng_stream(cfg.seed, random::streams::AUX);

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        scale: s,
        tau,
        seed: cfg.seed,
        schedule: sched.config(),
        schedule_hash: sched.hash(),
        predictor: pred.fingerprint(),
        generator_init: gen.theta_hash(),
        aux_init: aux.as_ref().map(|a| a.params_hash()),
    };

    let (mut gen, mut adam, mut records, start) = match opts.resume {
        Some(r) => {
            if r.generator.kind != gen.kind || r.generator.theta.len() != gen.theta.len() {
                return Err(Error::config("checkpoint does not match the configured generator"));
            }
            (r.generator, r.adam, r.records, r.next_iter)
        }
        None => {
            let n = gen.theta.len();
            (gen, AdamState::new(n), Vec::with_capacity(cfg.iters), 0)
        }
    };

    let dds = cfg.dds.clone().unwrap_or_default();
    let x_ref = match (&dds.reference, cfg.estimator) {
        (Some(r), _) => r.clone(),
        (None, Estimator::Dds) => {
            if start > 0 {
                return Err(Error::config("resuming DDS needs an explicit reference"));
            }
            gen.render()?
        }
        _ => Vec::new(),
    };

    for iter in start..cfg.iters {
        let x = gen.render()?;
        let (t, eps) = iteration_draw(cfg, iter, sched, dim);
        let est: GradEstimate = match cfg.estimator {
            Estimator::Sds => distill::sds_grad(pred, sched, &x, &y, t, &eps, s, w)?,
            Estimator::Nfsd => distill::nfsd_grad(pred, sched, &x, &y, t, &eps, s, w, tau, &cfg.y_neg)?,
            Estimator::Dds => distill::dds_grad(pred, sched, &x, &y, &x_ref, &dds.y_ref, t, &eps, s, w)?,
            Estimator::Vsd => {
                let a = aux.as_deref().expect("checked above");
                distill::vsd_grad(pred, a, sched, &x, &y, t, &eps, s, w)?
            }
        };
        let grad = gen.pullback(&est.direction)?;
        let finite = est.direction.iter().chain(&grad).all(|v| v.is_finite());
        records.push(IterRecord {
            iter,
            estimator: cfg.estimator,
            t,
            t_max: cfg.t_max(iter, sched.timesteps()),
            norm: est.norm(),
            weight: est.weight,
            draw: est.draw_fingerprint(),
            mode_distances: opts.modes.iter().map(|m| stats::distance(&x, m)).collect(),
        });
        if !finite {
            records.pop();
            abort_checkpoint(&opts.checkpoint_dir, cfg, iter, &gen, &adam, &records);
            return Err(Error::Diverged { iter, reason: "non-finite gradient".into() });
        }
        if let Err(e) = adam_step(&mut adam, &mut gen.theta, &grad, &adam_cfg) {
            records.pop();
            abort_checkpoint(&opts.checkpoint_dir, cfg, iter, &gen, &adam, &records);
            return Err(Error::Diverged { iter, reason: e.to_string() });
        }
        if !gen.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { iter, reason: "non-finite parameters".into() });
        }
        if let Some(a) = aux.as_deref_mut() {
            if cfg.estimator == Estimator::Vsd {
                aux_update(a, &[x], &y, sched, &mut aux_rng, aux_train.aux_steps_per_iter, &aux_cfg)
                    .map_err(|e| Error::Diverged { iter, reason: format!("aux update: {e}") })?;
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                let state = ResumeState {
                    next_iter: iter + 1,
                    generator: gen.clone(),
                    adam: adam.clone(),
                    records: records.clone(),
                };
                save_checkpoint(dir, &state, cfg.seed)?;
                log::debug!("checkpoint at iteration {}", iter + 1);
            }
        }
        if iter % 100 == 0 {
            log::debug!("iter {iter}: t = {t}, |dir| = {:.4e}", est.norm());
        }
    }
    let final_render = gen.render()?;
    Ok(RunResult { generator: gen, final_render, records, manifest })
}

fn abort_checkpoint(
    dir: &Option<PathBuf>,
    cfg: &DistillConfig,
    iter: usize,
    gen: &GeneratorParams,
    adam: &AdamState,
    records: &[IterRecord],
) {
    if let Some(dir) = dir {
        let state =
            ResumeState { next_iter: iter, generator: gen.clone(), adam: adam.clone(), records: records.to_vec() };
        if let Err(e) = save_checkpoint(dir, &state, cfg.seed) {
            log::error!("could not write failure checkpoint: {e}");
        }
    }
}

/// Per-iteration metrics as CSV. Columns `d_mode<k>` follow the fixed ones.
pub fn metrics_csv(records: &[IterRecord]) -> Csv {
    let n_modes = records.first().map_or(0, |r| r.mode_distances.len());
    let mut cols: Vec<String> =
        ["iter", "estimator", "t", "t_max", "norm", "weight", "draw"].iter().map(|s| s.to_string()).collect();
    cols.extend((0..n_modes).map(|k| format!("d_mode{k}")));
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut csv = Csv::with_header(&col_refs);
    for r in records {
        let mut row = vec![
            r.iter.to_string(),
            r.estimator.to_string(),
            r.t.to_string(),
            r.t_max.to_string(),
            r.norm.to_string(),
            r.weight.to_string(),
            r.draw.clone(),
        ];
        row.extend(r.mode_distances.iter().map(|d| d.to_string()));
        csv.row(&row);
    }
    csv
}

/// `(iter, t, draw)` per iteration; equal across paired runs.
pub fn draw_log(records: &[IterRecord]) -> Vec<(usize, usize, String)> {
    records.iter().map(|r| (r.iter, r.t, r.draw.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: Estimator,
    pub trace_cov: f64,
    pub mean: Vec<f64>,
    /// `trace_cov / ‖mean‖²`.
    pub dispersion: f64,
}

/// Monte-Carlo covariance trace and mean of the SDS and NFSD directions at a
/// fixed `(x, t)`, both evaluated on the same `n_draws` noise draws.
pub fn grad_variance_probe<P: EpsPredictor + ?Sized>(
    cfg: &DistillConfig,
    pred: &P,
    sched: &NoiseSchedule,
    x: &[f64],
    t: usize,
    n_draws: usize,
) -> Result<Vec<VarianceReport>> {
    if n_draws < 100 {
        return Err(Error::config("variance probe needs at least 100 draws"));
    }
    sched.check_t(t)?;
    let (s, tau, w, y) = (cfg.scale(), cfg.tau(sched), cfg.weight_fn, cfg.condition);
    let mut sds = VectorMoments::new(x.len());
    let mut nfsd = VectorMoments::new(x.len());
    for i in 0..n_draws {
        let mut r = random::draw_rng(cfg.seed, random::streams::PROBE, i as u64);
        let eps = random::standard_normal(&mut r, x.len());
        sds.push(&distill::sds_grad(pred, sched, x, &y, t, &eps, s, w)?.direction);
        nfsd.push(&distill::nfsd_grad(pred, sched, x, &y, t, &eps, s, w, tau, &cfg.y_neg)?.direction);
    }
    Ok([(Estimator::Sds, sds), (Estimator::Nfsd, nfsd)]
        .into_iter()
        .map(|(estimator, m)| {
            let trace_cov = m.trace_cov();
            let mean = m.mean().to_vec();
            let n2 = stats::dot(&mean, &mean);
            VarianceReport { estimator, trace_cov, dispersion: trace_cov / n2.max(f64::MIN_POSITIVE), mean }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{init_params, FieldArch, GeneratorKind};
    use crate::schedule::ScheduleConfig;
    use crate::score::{AnalyticPredictor, GaussianMixture, MixtureSpec};
    use crate::toy;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::linear_rescaled(100)).unwrap()
    }

    #[test]
    fn anneal_bounds_and_determinism() {
        let cfg = DistillConfig { iters: 1000, ..Default::default() };
        let big = 1000;
        let mut before = Vec::new();
        for iter in 0..1000 {
            let mut r = random::draw_rng(3, random::streams::TIMESTEP, iter);
            let t = sample_timestep(&cfg, iter as usize, big, &mut r);
            assert!(t >= 20 && t <= cfg.t_max(iter as usize, big));
            if iter < 200 {
                assert!(t as f64 <= 0.98 * big as f64);
                before.push(t);
            } else {
                assert!(t <= 500);
            }
        }
        assert_eq!(cfg.t_max(199, big), 980);
        assert_eq!(cfg.t_max(200, big), 500);
        let again: Vec<usize> = (0..200)
            .map(|i| sample_timestep(&cfg, i, big, &mut random::draw_rng(3, random::streams::TIMESTEP, i as u64)))
            .collect();
        assert_eq!(before, again);

        let ramp = DistillConfig { anneal: AnnealConfig { ramp_iters: 100, ..Default::default() }, ..cfg.clone() };
        assert_eq!(ramp.t_max(250, big), 740);
        assert_eq!(ramp.t_max(400, big), 500);
    }

    #[test]
    fn config_validation() {
        let ok = DistillConfig::default();
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.anneal.t_min_frac = 0.6;
        assert!(bad.validate().is_err());
        assert!(DistillConfig { iters: 0, ..ok.clone() }.validate().is_err());
        assert!(DistillConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert_eq!(DistillConfig { estimator: Estimator::Sds, ..ok.clone() }.scale(), 100.0);
        assert_eq!(ok.scale(), 7.5);
    }

    #[test]
    fn paired_runs_share_draws_and_are_deterministic() {
        let d = toy::two_mode(toy::TwoModeConfig::default()).unwrap();
        let s = sched();
        let pred = AnalyticPredictor::new(d.spec.clone(), s.clone());
        let gen = GeneratorParams::identity(vec![0.3, -0.2]);
        let base = DistillConfig { iters: 60, seed: 11, ..Default::default() };
        let run = |e: Estimator| {
            let cfg = DistillConfig { estimator: e, ..base.clone() };
            run_distillation(&cfg, &pred, gen.clone(), &s, None, RunOptions::default()).unwrap()
        };
        let a = run(Estimator::Nfsd);
        let b = run(Estimator::Sds);
        let c = run(Estimator::Nfsd);
        assert_eq!(a.records.len(), 60);
        assert_eq!(draw_log(&a.records), draw_log(&b.records));
        assert_eq!(metrics_csv(&a.records).as_str(), metrics_csv(&c.records).as_str());
        assert_eq!(a.generator, c.generator);
        assert!(a.records.iter().all(|r| r.t <= r.t_max));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let d = toy::two_mode(toy::TwoModeConfig::default()).unwrap();
        let s = sched();
        let pred = AnalyticPredictor::new(d.spec.clone(), s.clone());
        let mut rng = random::rng_from_seed(0);
        let gen = init_params(GeneratorKind::Identity, &[2], FieldArch::default(), &mut rng).unwrap();
        // Fixed warmup, so truncating `iters` leaves the draws unchanged.
        let anneal = AnnealConfig { warmup_iters: Some(8), ..Default::default() };
        let full_cfg = DistillConfig { iters: 40, checkpoint_every: 15, anneal, ..Default::default() };
        let full = run_distillation(&full_cfg, &pred, gen.clone(), &s, None, RunOptions::default()).unwrap();

        let short = DistillConfig { iters: 30, ..full_cfg.clone() };
        let opts = RunOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        run_distillation(&short, &pred, gen.clone(), &s, None, opts).unwrap();
        let state = load_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(state.next_iter, 30);
        let opts = RunOptions { resume: Some(state), ..Default::default() };
        let resumed = run_distillation(&full_cfg, &pred, gen, &s, None, opts).unwrap();
        assert_eq!(resumed.generator, full.generator);
        assert_eq!(metrics_csv(&resumed.records).as_str(), metrics_csv(&full.records).as_str());
    }

    #[test]
    fn divergence_aborts_with_checkpoint() {
        struct Nan;
        impl EpsPredictor for Nan {
            fn dim(&self) -> usize {
                2
            }
            fn predict(&self, _: &[f64], _: &Condition, _: usize) -> Result<Vec<f64>> {
                Ok(vec![f64::NAN, 0.0])
            }
            fn fingerprint(&self) -> String {
                "nan".into()
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let cfg = DistillConfig { iters: 5, ..Default::default() };
        let err = run_distillation(&cfg, &Nan, GeneratorParams::identity(vec![0.0, 0.0]), &sched(), None, opts);
        assert!(matches!(err, Err(Error::Diverged { iter: 0, .. })));
        assert_eq!(load_checkpoint(dir.path()).unwrap().unwrap().next_iter, 0);
    }

    #[test]
    fn exact_denoiser_has_zero_sds_variance() {
        let mean = vec![0.4, -0.4, 0.1];
        let g = GaussianMixture::single(mean.clone(), 0.0);
        let spec = MixtureSpec::from_classes(vec![(0, g)], &[1.0], None).unwrap();
        let s = sched();
        let pred = AnalyticPredictor::new(spec, s.clone());
        let cfg = DistillConfig { y_neg: Condition::Null, ..Default::default() };
        let reports = grad_variance_probe(&cfg, &pred, &s, &mean, 50, 100).unwrap();
        assert!(reports[0].trace_cov < 1e-20);
        assert!(grad_variance_probe(&cfg, &pred, &s, &mean, 50, 10).is_err());
    }
}
