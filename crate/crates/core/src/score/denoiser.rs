//! A small fully-connected conditional ε-predictor with hand-derived
//! reverse-mode gradients.
//!
//! Input is `[z, time features, condition embedding]`; hidden layers use
//! SiLU. The condition embedding is `e_∅ + o_y` where the per-condition
//! offset `o_y` starts at zero and `o_∅ ≡ 0`. With condition dropout 1.0 the
//! offsets never receive gradient, so conditional and unconditional
//! predictions stay identical.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Condition, EpsPredictor};
use crate::digest;
use crate::error::{check_dim, Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::random::{self, Rng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserArch {
    pub hidden: Vec<usize>,
    /// Number of sinusoid frequencies; the time embedding has twice as many features.
    pub time_frequencies: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], time_frequencies: 6, cond_dim: 16 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    null_emb: usize,
    offsets: usize,
    layers: Vec<Dense>,
    total: usize,
}

impl Layout {
    fn new(data_dim: usize, arch: &DenoiserArch, vocab_len: usize) -> Self {
        let mut cursor = 0;
        let null_emb = cursor;
        cursor += arch.cond_dim;
        let offsets = cursor;
        cursor += (vocab_len - 1) * arch.cond_dim;
        let input = data_dim + 2 * arch.time_frequencies + arch.cond_dim;
        let mut widths = vec![input];
        widths.extend(&arch.hidden);
        widths.push(data_dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let d = Dense { w: cursor, b: cursor + w[0] * w[1], fan_in: w[0], fan_out: w[1] };
                cursor += w[0] * w[1] + w[1];
                d
            })
            .collect();
        Self { null_emb, offsets, layers, total: cursor }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct Cache {
    /// `acts[0]` is the network input; `acts[l]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
}

/// Trainable ε-predictor. Parameters live in one flat vector so checkpoints
/// and optimizer state are plain arrays.
#[derive(Debug, Clone)]
pub struct EpsModel {
    data_dim: usize,
    arch: DenoiserArch,
    vocab: Vec<Condition>,
    timesteps: usize,
    schedule_hash: String,
    seed: u64,
    layout: Layout,
    params: Vec<f64>,
    opt: Option<AdamState>,
}

impl EpsModel {
    /// Fresh model with LeCun-normal weights. `vocab` must not repeat
    /// entries; `Null` is added at index 0 if missing.
    pub fn new(
        data_dim: usize,
        arch: DenoiserArch,
        vocab: &[Condition],
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        let mut full = vec![Condition::Null];
        for c in vocab {
            if !full.contains(c) {
                full.push(*c);
            }
        }
        if data_dim == 0 || arch.cond_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::config("denoiser dimensions must be positive"));
        }
        let layout = Layout::new(data_dim, &arch, full.len());
        let mut rng = random::rng_stream(seed, random::streams::TRAIN);
        let mut params = vec![0.0; layout.total];
        random::fill_standard_normal(&mut rng, &mut params[layout.null_emb..layout.null_emb + arch.cond_dim]);
        for l in &layout.layers {
            let sd = (1.0 / l.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, sd).expect("positive sd");
            for p in &mut params[l.w..l.w + l.fan_in * l.fan_out] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            data_dim,
            arch,
            vocab: full,
            timesteps: sched.timesteps(),
            schedule_hash: sched.hash(),
            seed,
            layout,
            params,
            opt: None,
        })
    }

    pub(crate) fn from_parts(
        data_dim: usize,
        arch: DenoiserArch,
        vocab: Vec<Condition>,
        timesteps: usize,
        schedule_hash: String,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        if vocab.first() != Some(&Condition::Null) {
            return Err(Error::config("denoiser vocabulary must start with null"));
        }
        let layout = Layout::new(data_dim, &arch, vocab.len());
        check_dim(layout.total, params.len())?;
        Ok(Self { data_dim, arch, vocab, timesteps, schedule_hash, seed, layout, params, opt: None })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn vocab(&self) -> &[Condition] {
        &self.vocab
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn schedule_hash(&self) -> &str {
        &self.schedule_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Layer sizes `[input, hidden.., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.layout.layers[0].fan_in];
        v.extend(self.layout.layers.iter().map(|l| l.fan_out));
        v
    }

    /// Hash of the parameter blob.
    pub fn params_hash(&self) -> String {
        digest::hash_f64s(&self.params)
    }

    fn cond_index(&self, y: &Condition) -> Result<usize> {
        self.vocab.iter().position(|c| c == y).ok_or(Error::UnknownCondition(*y))
    }

    fn input_width(&self) -> usize {
        self.layout.layers[0].fan_in
    }

    fn write_input(&self, row: &mut ArrayViewMut1<f64>, z: &[f64], t: usize, cond: usize) {
        let d = self.data_dim;
        let f = self.arch.time_frequencies;
        for (i, v) in z.iter().enumerate() {
            row[i] = *v;
        }
        let frac = t as f64 / self.timesteps as f64;
        for k in 0..f {
            let w = std::f64::consts::PI * (1u64 << k) as f64 * frac;
            row[d + 2 * k] = w.sin();
            row[d + 2 * k + 1] = w.cos();
        }
        let base = d + 2 * f;
        let cd = self.arch.cond_dim;
        let null = &self.params[self.layout.null_emb..self.layout.null_emb + cd];
        for j in 0..cd {
            row[base + j] = null[j];
        }
        if cond > 0 {
            let off = self.layout.offsets + (cond - 1) * cd;
            for j in 0..cd {
                row[base + j] += self.params[off + j];
            }
        }
    }

    fn weights(&self, l: &Dense) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((l.fan_in, l.fan_out), &self.params[l.w..l.w + l.fan_in * l.fan_out])
            .expect("layout");
        let b = ArrayView1::from(&self.params[l.b..l.b + l.fan_out]);
        (w, b)
    }

    fn forward(&self, input: Array2<f64>) -> Cache {
        let n_layers = self.layout.layers.len();
        let mut acts = vec![input];
        let mut pres = Vec::with_capacity(n_layers);
        for (i, l) in self.layout.layers.iter().enumerate() {
            let (w, b) = self.weights(l);
            let mut pre = acts[i].dot(&w);
            pre += &b;
            let act = if i + 1 < n_layers { pre.mapv(silu) } else { pre.clone() };
            pres.push(pre);
            acts.push(act);
        }
        Cache { acts, pres }
    }

    /// Accumulates parameter gradients of `Σ d_out · out` into `grad`.
    fn backward(&self, cache: &Cache, d_out: Array2<f64>, conds: &[usize], grad: &mut [f64]) {
        let n_layers = self.layout.layers.len();
        let mut delta = d_out;
        for i in (0..n_layers).rev() {
            let l = &self.layout.layers[i];
            if i + 1 < n_layers {
                let pre = &cache.pres[i];
                delta.zip_mut_with(pre, |d, p| *d *= silu_grad(*p));
            }
            let dw = cache.acts[i].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            {
                let mut gw =
                    ArrayViewMut2::from_shape((l.fan_in, l.fan_out), &mut grad[l.w..l.w + l.fan_in * l.fan_out])
                        .expect("layout");
                gw += &dw;
                let mut gb = ArrayViewMut1::from(&mut grad[l.b..l.b + l.fan_out]);
                gb += &db;
            }
            let (w, _) = self.weights(l);
            delta = delta.dot(&w.t());
        }
        // `delta` is now d/d(input); route the embedding slice.
        let cd = self.arch.cond_dim;
        let base = self.data_dim + 2 * self.arch.time_frequencies;
        let d_emb = delta.slice(s![.., base..base + cd]);
        for (row, &c) in d_emb.outer_iter().zip(conds) {
            for j in 0..cd {
                grad[self.layout.null_emb + j] += row[j];
            }
            if c > 0 {
                let off = self.layout.offsets + (c - 1) * cd;
                for j in 0..cd {
                    grad[off + j] += row[j];
                }
            }
        }
    }

    /// Batched prediction; rows of the result are ε̂ for each input.
    pub fn predict_batch(&self, zs: &[Vec<f64>], ts: &[usize], ys: &[Condition]) -> Result<Array2<f64>> {
        let conds = ys.iter().map(|y| self.cond_index(y)).collect::<Result<Vec<_>>>()?;
        let mut input = Array2::zeros((zs.len(), self.input_width()));
        for (i, (z, &t)) in zs.iter().zip(ts).enumerate() {
            check_dim(self.data_dim, z.len())?;
            if t == 0 || t > self.timesteps {
                return Err(Error::Range { t, max: self.timesteps });
            }
            self.write_input(&mut input.row_mut(i), z, t, conds[i]);
        }
        let mut cache = self.forward(input);
        Ok(cache.acts.pop().expect("output layer"))
    }

    /// Mean-squared ε error and its parameter gradient on one batch.
    fn loss_and_grad(&self, zs: &[Vec<f64>], ts: &[usize], conds: &[usize], targets: &Array2<f64>) -> (f64, Vec<f64>) {
        let mut input = Array2::zeros((zs.len(), self.input_width()));
        for (i, z) in zs.iter().enumerate() {
            self.write_input(&mut input.row_mut(i), z, ts[i], conds[i]);
        }
        let cache = self.forward(input);
        let out = cache.acts.last().expect("output");
        let diff = out - targets;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let d_out = diff.mapv(|d| 2.0 * d / n);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, d_out, conds, &mut grad);
        (loss, grad)
    }

    /// Denoising-objective steps on `(x, y)` records, shared by full training
    /// and online auxiliary fine-tuning.
    fn fit(
        &mut self,
        data: &[(Vec<f64>, Condition)],
        sched: &NoiseSchedule,
        cfg: &TrainConfig,
        steps: usize,
        rng: &mut Rng,
        mut on_step: impl FnMut(usize, f64, f64),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("training data is empty"));
        }
        if sched.timesteps() != self.timesteps {
            return Err(Error::config("schedule length differs from the model's"));
        }
        let conds = data
            .iter()
            .map(|(x, y)| {
                check_dim(self.data_dim, x.len())?;
                self.cond_index(y)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = cfg.batch_size.max(1);
        let mut opt = self.opt.take().unwrap_or_else(|| AdamState::new(self.params.len()));
        let start_step = opt.step as usize;
        for k in 0..steps {
            let mut zs = Vec::with_capacity(batch);
            let mut ts = Vec::with_capacity(batch);
            let mut cs = Vec::with_capacity(batch);
            let mut targets = Array2::zeros((batch, self.data_dim));
            for b in 0..batch {
                let i = rng.random_range(0..data.len());
                let t = rng.random_range(1..=self.timesteps);
                let eps = random::standard_normal(rng, self.data_dim);
                let drop = cfg.cond_dropout > 0.0 && rng.random::<f64>() < cfg.cond_dropout;
                let ns = sched.add_noise(&data[i].0, t, &eps)?;
                zs.push(ns.z);
                ts.push(t);
                cs.push(if drop { 0 } else { conds[i] });
                targets.row_mut(b).assign(&Array1::from(eps));
            }
            let (loss, grad) = self.loss_and_grad(&zs, &ts, &cs, &targets);
            let global = start_step + k;
            if !loss.is_finite() {
                self.opt = Some(opt);
                return Err(Error::Training { iter: global, loss });
            }
            let lr = cfg.lr_at(global);
            let adam = AdamConfig { lr, ..AdamConfig::default() };
            adam_step(&mut opt, &mut self.params, &grad, &adam)
                .map_err(|_| Error::Training { iter: global, loss: f64::NAN })?;
            on_step(global, loss, lr);
        }
        self.opt = Some(opt);
        Ok(())
    }

    /// Drops optimizer moments, e.g. after copying a base model into an
    /// auxiliary one.
    pub fn reset_optimizer(&mut self) {
        self.opt = None;
    }
}

impl EpsPredictor for EpsModel {
    fn dim(&self) -> usize {
        self.data_dim
    }

    fn predict(&self, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
        let out = self.predict_batch(&[z.to_vec()], &[t], &[*y])?;
        Ok(out.row(0).to_vec())
    }

    fn fingerprint(&self) -> String {
        self.params_hash()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the end of a cosine decay, as a fraction of `lr`.
    pub final_lr_frac: f64,
    pub cond_dropout: f64,
    pub seed: u64,
    pub arch: DenoiserArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 128,
            lr: 2e-3,
            final_lr_frac: 0.05,
            cond_dropout: 0.1,
            seed: 0,
            arch: DenoiserArch::default(),
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || step >= self.steps {
            return self.lr * self.final_lr_frac;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: EpsModel,
    pub curve: Vec<TrainRecord>,
}

/// Trains a fresh conditional denoiser on `(x, y)` records with condition
/// dropout. Deterministic given `cfg.seed`.
pub fn train_eps_model(
    dataset: &[(Vec<f64>, Condition)],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dim = dataset.first().map(|r| r.0.len()).ok_or_else(|| Error::config("dataset is empty"))?;
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::config("cond_dropout must lie in [0, 1]"));
    }
    let mut vocab: Vec<Condition> = dataset.iter().map(|r| r.1).collect();
    vocab.sort();
    vocab.dedup();
    let mut model = EpsModel::new(dim, cfg.arch.clone(), &vocab, sched, cfg.seed)?;
    let mut rng = random::rng_stream(cfg.seed, random::streams::DATASET + 100);
    let mut curve = Vec::with_capacity(cfg.steps);
    model.fit(dataset, sched, cfg, cfg.steps, &mut rng, |step, loss, lr| curve.push(TrainRecord { step, loss, lr }))?;
    model.reset_optimizer();
    Ok(TrainReport { model, curve })
}

/// Online fine-tuning of an auxiliary model on the current renders, all
/// labelled `y`. Optimizer moments persist across calls.
pub fn aux_update(
    aux: &mut EpsModel,
    renders: &[Vec<f64>],
    y: &Condition,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let data: Vec<(Vec<f64>, Condition)> = renders.iter().map(|x| (x.clone(), *y)).collect();
    let fixed = TrainConfig { final_lr_frac: 1.0, cond_dropout: 0.0, ..cfg.clone() };
    aux.fit(&data, sched, &fixed, steps, rng, |_, _, _| {})
}
