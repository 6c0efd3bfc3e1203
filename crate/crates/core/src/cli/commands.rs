use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, ScoreSource, T_GRID_1000};
use crate::decompose::{decompose_score, probe_id_ood, residual_scan, residual_scan_csv};
use crate::distill::Estimator;
use crate::engine::{self, load_checkpoint, run_distillation, RunOptions, RunResult};
use crate::error::{Error, Result};
use crate::generators::init_params;
use crate::io::{self, Csv};
use crate::random;
use crate::schedule::{sample as ancestral_sample, NoiseSchedule};
use crate::score::{
    analytic_eps, load_model, save_model, train_eps_model, AnalyticPredictor, Condition, EpsModel, EpsPredictor,
};
use crate::stats::{self, VectorMoments};
use crate::toy::ToyDomain;

#[derive(Debug, Serialize, Deserialize)]
struct CommandManifest {
    command: String,
    version: String,
    config_hash: String,
    config: RunConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Completion {
    command: String,
    config_hash: String,
}

const MANIFEST: &str = "manifest.json";
const COMPLETE: &str = "complete.json";

/// Writes the manifest, or reports that the same run already finished.
/// Returns `false` when there is nothing to do.
fn prepare(out: &Path, cfg: &RunConfig, command: &str, force: bool) -> Result<bool> {
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let done = out.join(COMPLETE);
    if !force && done.exists() {
        let c: Completion = io::read_json(&done)?;
        if c.command == command && c.config_hash == hash {
            log::info!("{} already holds a completed {command} run; use --force to redo it", out.display());
            return Ok(false);
        }
    }
    let manifest = out.join(MANIFEST);
    if !force && manifest.exists() {
        let m: CommandManifest = io::read_json(&manifest)?;
        if m.command != command || m.config_hash != hash {
            return Err(Error::config(format!(
                "{} holds a different run ({} {}); use --force or another --out",
                out.display(),
                m.command,
                &m.config_hash[..12]
            )));
        }
    }
    if force {
        for stale in [done, out.join("checkpoints")] {
            if stale.is_dir() {
                fs::remove_dir_all(&stale)?;
            } else if stale.exists() {
                fs::remove_file(&stale)?;
            }
        }
        for est in Estimator::ALL {
            let d = out.join(est.to_string());
            if d.is_dir() {
                fs::remove_dir_all(d)?;
            }
        }
    }
    let m = CommandManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config: cfg.clone(),
    };
    io::write_json(&manifest, &m)?;
    Ok(true)
}

fn complete(out: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    io::write_json(&out.join(COMPLETE), &Completion { command: command.to_string(), config_hash: cfg.hash() })
}

struct Resolved {
    pred: Box<dyn EpsPredictor>,
    /// The loaded model when the predictor came from a checkpoint.
    model: Option<EpsModel>,
    shape: Vec<usize>,
}

fn resolve_predictor(cfg: &RunConfig, sched: &NoiseSchedule, domain: Option<&ToyDomain>) -> Result<Resolved> {
    let resolved = match cfg.score.source {
        ScoreSource::Analytic => {
            let d = domain.ok_or_else(|| Error::config("domain: section required for score.source = \"analytic\""))?;
            Resolved {
                pred: Box::new(AnalyticPredictor::new(d.spec.clone(), sched.clone())),
                model: None,
                shape: d.shape.clone(),
            }
        }
        ScoreSource::Checkpoint => {
            let stem = cfg
                .score
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("score.checkpoint: required for score.source = \"checkpoint\""))?;
            let model = load_model(stem)?;
            if model.schedule_hash() != sched.hash() {
                return Err(Error::config(format!(
                    "checkpoint {} was trained on a different schedule than [schedule]",
                    stem.display()
                )));
            }
            let shape = domain.map_or_else(|| vec![model.data_dim()], |d| d.shape.clone());
            Resolved { pred: Box::new(model.clone()), model: Some(model), shape }
        }
        ScoreSource::Remote => resolve_remote(cfg, sched, domain)?,
    };
    let n: usize = resolved.shape.iter().product();
    if n != resolved.pred.dim() {
        return Err(Error::Dimension { expected: resolved.pred.dim(), got: n });
    }
    Ok(resolved)
}

#[cfg(feature = "remote")]
fn resolve_remote(cfg: &RunConfig, sched: &NoiseSchedule, _domain: Option<&ToyDomain>) -> Result<Resolved> {
    let rc = cfg
        .score
        .remote
        .clone()
        .ok_or_else(|| Error::config("score.remote: required for score.source = \"remote\""))?;
    let shape = rc.shape.clone();
    let pred = crate::score::remote_predictor(rc, sched)?;
    Ok(Resolved { pred: Box::new(pred), model: None, shape })
}

#[cfg(not(feature = "remote"))]
fn resolve_remote(_: &RunConfig, _: &NoiseSchedule, _: Option<&ToyDomain>) -> Result<Resolved> {
    Err(Error::config("this build has no remote predictor support"))
}

fn image_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [h, w] => Some((*h, *w)),
        _ => None,
    }
}

fn dump_pgm(cfg: &RunConfig, shape: &[usize], path: &Path, values: &[f64]) -> Result<()> {
    if let (true, Some((h, w))) = (cfg.output.pgm, image_dims(shape)) {
        let (lo, hi) = io::symmetric_range(values);
        io::write_pgm(path, w, h, values, lo, hi)?;
    }
    Ok(())
}

fn vector_csv(header: &[&str], width: usize) -> Csv {
    let mut cols: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    cols.extend((0..width).map(|i| format!("v{i}")));
    let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    Csv::with_header(&refs)
}

fn with_values(mut fields: Vec<String>, values: &[f64]) -> Vec<String> {
    fields.extend(values.iter().map(|v| v.to_string()));
    fields
}

pub fn train_score(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let ds = cfg
        .score
        .dataset
        .clone()
        .ok_or_else(|| Error::config("score.dataset: missing section (required by train-score)"))?;
    let domain = cfg.require_domain("by train-score")?;
    if !prepare(out, cfg, "train-score", force)? {
        return Ok(());
    }
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let mut rng = random::rng_stream(ds.seed, random::streams::DATASET);
    let mut data = Vec::new();
    for (y, m) in domain.spec.conditions() {
        if *y != Condition::Null {
            data.extend((0..ds.n_per_condition).map(|_| (m.sample(&mut rng), *y)));
        }
    }
    if data.is_empty() {
        return Err(Error::config("domain has no conditions to train on"));
    }
    log::info!("training on {} records for {} steps", data.len(), cfg.score.train.steps);
    let report = train_eps_model(&data, &sched, &cfg.score.train)?;
    let header = save_model(&report.model, &out.join("model"))?;

    let mut curve = Csv::with_header(&["step", "loss", "lr"]);
    for r in &report.curve {
        curve.row(&[r.step.to_string(), r.loss.to_string(), r.lr.to_string()]);
    }
    curve.write(&out.join("train_curve.csv"))?;

    let rmse = heldout_rmse(&report.model, &domain, &sched, ds.heldout, ds.seed)?;
    let passed = rmse <= ds.max_heldout_rmse;
    if !passed {
        log::warn!("held-out RMSE {rmse:.4} exceeds {}", ds.max_heldout_rmse);
    }
    io::write_json(
        &out.join("train.json"),
        &serde_json::json!({
            "model": header,
            "records": data.len(),
            "heldout_rmse": rmse,
            "max_heldout_rmse": ds.max_heldout_rmse,
            "passed": passed,
        }),
    )?;
    complete(out, cfg, "train-score")
}

/// Per-coordinate RMSE between the model and the oracle on fresh noisings of
/// fresh samples, one draw per condition in the model's vocabulary in turn.
fn heldout_rmse(model: &EpsModel, domain: &ToyDomain, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    use rand::Rng as _;
    let vocab: Vec<Condition> = model.vocab().to_vec();
    let mut rng = random::rng_stream(seed, random::streams::PROBE);
    let (mut se, mut count) = (0.0, 0usize);
    for i in 0..n.max(1) {
        let y = vocab[i % vocab.len()];
        let x = domain.spec.mixture(&y)?.sample(&mut rng);
        let t = rng.random_range(1..=sched.timesteps());
        let eps = random::standard_normal(&mut rng, x.len());
        let z = sched.add_noise(&x, t, &eps)?.z;
        let got = model.predict(&z, &y, t)?;
        let want = analytic_eps(&domain.spec, sched, &z, &y, t)?;
        se += got.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok((se / count as f64).sqrt())
}

pub fn distill(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    cfg.distill.validate()?;
    if !prepare(out, cfg, "distill", force)? {
        return Ok(());
    }
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let domain = cfg.domain()?;
    let r = resolve_predictor(cfg, &sched, domain.as_ref())?;
    let modes = match &domain {
        Some(d) => d.modes(&cfg.distill.condition)?,
        None => Vec::new(),
    };
    let estimators = cfg.estimators();
    let paired = estimators.len() > 1;
    for est in estimators {
        let dir = if paired { out.join(est.to_string()) } else { out.to_path_buf() };
        fs::create_dir_all(&dir)?;
        let done = dir.join("done.json");
        if done.exists() {
            let c: Completion = io::read_json(&done)?;
            if c.config_hash == cfg.hash() {
                log::info!("{est} already finished in {}", dir.display());
                continue;
            }
        }
        let mut dc = cfg.distill.clone();
        dc.estimator = est;
        let init_seed = cfg.generator.init_seed.unwrap_or(dc.seed);
        let mut init_rng = random::rng_stream(init_seed, random::streams::GENERATOR_INIT);
        let gen = init_params(cfg.generator.kind, &r.shape, cfg.generator.arch, &mut init_rng)?;

        let ckpt = dir.join("checkpoints");
        fs::create_dir_all(&ckpt)?;
        let resume = if est == Estimator::Vsd { None } else { load_checkpoint(&ckpt)? };
        if let Some(state) = &resume {
            log::info!("resuming {est} at iteration {}", state.next_iter);
        }
        let mut aux = match est {
            Estimator::Vsd => Some(r.model.clone().ok_or_else(|| {
                Error::config("vsd needs score.source = \"checkpoint\": the auxiliary model starts as a copy of it")
            })?),
            _ => None,
        };
        let opts = RunOptions { checkpoint_dir: Some(ckpt), modes: modes.clone(), resume };
        log::info!("{est}: s = {}, {} iterations", dc.scale(), dc.iters);
        let result = run_distillation(&dc, r.pred.as_ref(), gen, &sched, aux.as_mut(), opts)?;
        write_run(cfg, &dir, &r.shape, &result, &modes)?;
        io::write_json(&done, &Completion { command: "distill".into(), config_hash: cfg.hash() })?;
    }
    complete(out, cfg, "distill")
}

fn write_run(cfg: &RunConfig, dir: &Path, shape: &[usize], result: &RunResult, modes: &[Vec<f64>]) -> Result<()> {
    io::write_json(&dir.join("run.json"), &result.manifest)?;
    engine::metrics_csv(&result.records).write(&dir.join("metrics.csv"))?;
    let mut draws = Csv::with_header(&["iter", "t", "draw"]);
    for (iter, t, draw) in engine::draw_log(&result.records) {
        draws.row(&[iter.to_string(), t.to_string(), draw]);
    }
    draws.write(&dir.join("draws.csv"))?;
    let distances: Vec<f64> = modes.iter().map(|m| stats::distance(&result.final_render, m)).collect();
    io::write_json(
        &dir.join("final.json"),
        &serde_json::json!({ "render": result.final_render, "mode_distances": distances }),
    )?;
    result.generator.save(&dir.join("generator-final"), result.manifest.seed, result.records.len())?;
    dump_pgm(cfg, shape, &dir.join("final.pgm"), &result.final_render)
}

pub fn decompose_report(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let domain = cfg.require_domain("for the probe points")?;
    if !prepare(out, cfg, "decompose-report", force)? {
        return Ok(());
    }
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let r = resolve_predictor(cfg, &sched, Some(&domain))?;
    let p = &cfg.probe;
    let grid = p.t_grid.clone().unwrap_or_else(|| sched.scaled_grid(&T_GRID_1000));
    let x_id = domain
        .modes(&p.condition)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::config("probe condition has no components"))?;
    let x_ood = if p.in_domain_only {
        x_id.clone()
    } else {
        let degraded = domain.modes(&cfg.distill.y_neg).map_err(|_| {
            Error::config("probe: the domain has no degraded condition; set probe.in_domain_only = true")
        })?;
        degraded
            .into_iter()
            .min_by(|a, b| stats::distance(a, &x_id).total_cmp(&stats::distance(b, &x_id)))
            .expect("mixtures have at least one component")
    };
    let tau = cfg.distill.tau(&sched);
    let dim = x_id.len();
    let mut rng = random::rng_stream(p.seed, random::streams::PROBE);
    let eps = random::standard_normal(&mut rng, dim);

    let fields_dir = out.join("fields");
    fs::create_dir_all(&fields_dir)?;
    let mut fields = vector_csv(&["t", "component", "norm"], dim);
    let mut summary = Csv::with_header(&[
        "t",
        "point",
        "norm_delta_c",
        "norm_delta_d",
        "norm_delta_n",
        "norm_guided",
        "recombination_error",
    ]);
    for &t in &grid {
        let (e_id, delta_d) = probe_id_ood(r.pred.as_ref(), &sched, &x_id, &x_ood, &eps, t)?;
        let z_id = sched.add_noise(&x_id, t, &eps)?.z;
        let delta_c = crate::decompose::condition_direction(r.pred.as_ref(), &z_id, &p.condition, t)?;
        for (name, v) in [("delta_c", &delta_c), ("delta_d", &delta_d), ("delta_n", &e_id)] {
            fields.row(&with_values(vec![t.to_string(), name.to_string(), stats::norm(v).to_string()], v));
            dump_pgm(cfg, &r.shape, &fields_dir.join(format!("t{t}_{name}.pgm")), v)?;
        }
        for (label, x) in [("id", &x_id), ("ood", &x_ood)] {
            let z = sched.add_noise(x, t, &eps)?.z;
            let d = decompose_score(r.pred.as_ref(), &z, &p.condition, t, p.s, tau, &cfg.distill.y_neg)?;
            summary.row(&[
                t.to_string(),
                label.to_string(),
                stats::norm(&d.delta_c).to_string(),
                stats::norm(&d.delta_d).to_string(),
                stats::norm(&d.delta_n).to_string(),
                stats::norm(&d.guided).to_string(),
                stats::relative_error(&d.recombined(), &d.guided).to_string(),
            ]);
        }
    }
    fields.write(&out.join("fields.csv"))?;
    summary.write(&out.join("decomposition.csv"))?;
    dump_pgm(cfg, &r.shape, &out.join("x_id.pgm"), &x_id)?;
    dump_pgm(cfg, &r.shape, &out.join("x_ood.pgm"), &x_ood)?;

    for (label, x) in [("id", &x_id), ("ood", &x_ood)] {
        let mut scan_rng = random::rng_stream(p.seed, random::streams::PROBE);
        let rows = residual_scan(r.pred.as_ref(), &sched, x, &grid, &mut scan_rng, p.n_draws)?;
        residual_scan_csv(&rows).write(&out.join(format!("residual_{label}.csv")))?;
    }
    complete(out, cfg, "decompose-report")
}

pub fn sample(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let sc = &cfg.sample;
    if sc.scales.is_empty() || sc.chains == 0 {
        return Err(Error::config("sample: scales and chains must be non-empty"));
    }
    if !prepare(out, cfg, "sample", force)? {
        return Ok(());
    }
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let domain = cfg.domain()?;
    let r = resolve_predictor(cfg, &sched, domain.as_ref())?;
    let modes: Vec<Vec<f64>> = match &domain {
        Some(d) => d.modes(&Condition::Null)?,
        None => Vec::new(),
    };
    let dim = r.pred.dim();
    let mut variance = Csv::with_header(&["s", "mode", "count", "trace_cov"]);
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir)?;
    for &s in &sc.scales {
        let mut all = VectorMoments::new(dim);
        let mut per_mode: Vec<VectorMoments> = modes.iter().map(|_| VectorMoments::new(dim)).collect();
        let mut dumped = vector_csv(&["chain"], dim);
        for i in 0..sc.chains {
            let mut rng = random::draw_rng(sc.seed, random::streams::SAMPLE, i as u64);
            let x = ancestral_sample(r.pred.as_ref(), &sched, &sc.condition, s, &mut rng)?;
            all.push(&x);
            if let Some(k) = nearest(&modes, &x) {
                per_mode[k].push(&x);
            }
            if i < sc.dump {
                dumped.row(&with_values(vec![i.to_string()], &x));
                dump_pgm(cfg, &r.shape, &samples_dir.join(format!("s{s}_{i}.pgm")), &x)?;
            }
        }
        dumped.write(&samples_dir.join(format!("s{s}.csv")))?;
        variance.row(&[s.to_string(), "all".into(), all.count().to_string(), all.trace_cov().to_string()]);
        for (k, m) in per_mode.iter().enumerate() {
            let tr = if m.count() > 1 { m.trace_cov() } else { f64::NAN };
            variance.row(&[s.to_string(), k.to_string(), m.count().to_string(), tr.to_string()]);
        }
        log::info!("s = {s}: overall trace covariance {:.4}", all.trace_cov());
    }
    variance.write(&out.join("variance.csv"))?;
    complete(out, cfg, "sample")
}

fn nearest(modes: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    modes.iter().enumerate().min_by(|a, b| stats::distance(a.1, x).total_cmp(&stats::distance(b.1, x))).map(|(k, _)| k)
}

/// Output directory: `--out` wins over `output.dir`.
pub fn output_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| cfg.output.dir.clone())
}
