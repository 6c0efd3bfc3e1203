//! HTTP client for a bridge serving a pretrained ε-predictor.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::wire::{self, PredictRequest, PredictResponse, ScheduleResponse};
use super::{Condition, EpsPredictor, NEGATIVE_PROMPT};
use crate::digest;
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

/// Largest tolerated |ᾱ_remote − ᾱ_local| during the handshake.
pub const SCHEDULE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model_id: String,
    /// Latent shape sent with every request, e.g. `[4, 64, 64]`.
    pub shape: Vec<usize>,
    /// Prompts for `class:N` conditions, keyed by the condition string.
    #[serde(default)]
    pub prompts: BTreeMap<String, String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Extra attempts after a transport failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    2
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            shape,
            prompts: BTreeMap::new(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
        }
    }

    pub fn with_prompt(mut self, y: Condition, prompt: impl Into<String>) -> Self {
        self.prompts.insert(y.to_string(), prompt.into());
        self
    }
}

#[derive(Debug)]
pub struct RemotePredictor {
    config: RemoteConfig,
    agent: Agent,
    dim: usize,
    prompts: BTreeMap<Condition, String>,
    schedule_hash: String,
    timesteps: usize,
}

/// Connects to `config.endpoint` and checks that the served ᾱ table matches
/// `sched`; refuses to build a predictor otherwise.
pub fn remote_predictor(config: RemoteConfig, sched: &NoiseSchedule) -> Result<RemotePredictor> {
    let dim: usize = config.shape.iter().product();
    if dim == 0 {
        return Err(Error::config("remote shape must be non-empty"));
    }
    if !(config.timeout_secs > 0.0) {
        return Err(Error::config("remote timeout must be positive"));
    }
    let mut prompts = BTreeMap::new();
    prompts.insert(Condition::Null, String::new());
    prompts.insert(Condition::Degraded, NEGATIVE_PROMPT.to_string());
    for (k, v) in &config.prompts {
        prompts.insert(k.parse()?, v.clone());
    }
    let agent: Agent = Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let pred =
        RemotePredictor { config, agent, dim, prompts, schedule_hash: sched.hash(), timesteps: sched.timesteps() };
    pred.handshake(sched)?;
    Ok(pred)
}

impl RemotePredictor {
    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn prompt_for(&self, y: &Condition) -> Result<&str> {
        self.prompts.get(y).map(String::as_str).ok_or(Error::UnknownCondition(*y))
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn handshake(&self, sched: &NoiseSchedule) -> Result<()> {
        let body = self.with_retries(|| self.get("schedule"))?;
        let served: ScheduleResponse =
            serde_json::from_str(&body).map_err(|e| Error::Protocol(format!("/schedule: {e}")))?;
        let remote = served.alpha_bars()?;
        if remote.len() != sched.timesteps() {
            return Err(Error::config(format!(
                "remote schedule has T = {}, local has T = {}",
                remote.len(),
                sched.timesteps()
            )));
        }
        let worst = remote.iter().zip(sched.alpha_bars()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if worst > SCHEDULE_TOLERANCE {
            return Err(Error::config(format!(
                "remote alpha_bar table differs from local by {worst:.3e} (> {SCHEDULE_TOLERANCE:e})"
            )));
        }
        log::info!("remote schedule handshake ok (max |Δᾱ| = {worst:.2e})");
        Ok(())
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retriable() && attempt < self.config.retries => {
                    attempt += 1;
                    log::warn!("remote call failed ({e}); retry {attempt}/{}", self.config.retries);
                    std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
                }
                other => return other,
            }
        }
    }

    fn get(&self, path: &str) -> Result<String> {
        let resp = self.agent.get(&self.url(path)).call().map_err(transport)?;
        read_body(resp, path)
    }

    fn post(&self, path: &str, body: &str) -> Result<String> {
        let resp = self
            .agent
            .post(&self.url(path))
            .header("content-type", "application/json")
            .send(body)
            .map_err(transport)?;
        read_body(resp, path)
    }
}

fn transport(e: ureq::Error) -> Error {
    Error::Transport(e.to_string())
}

fn read_body(mut resp: ureq::http::Response<ureq::Body>, path: &str) -> Result<String> {
    let status = resp.status().as_u16();
    let body = resp.body_mut().read_to_string().map_err(transport)?;
    match status {
        200..=299 => Ok(body),
        500..=599 => Err(Error::Transport(format!("/{path}: HTTP {status}: {body}"))),
        _ => Err(Error::Protocol(format!("/{path}: HTTP {status}: {body}"))),
    }
}

impl EpsPredictor for RemotePredictor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, z: &[f64], y: &Condition, t: usize) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        if t == 0 || t > self.timesteps {
            return Err(Error::Range { t, max: self.timesteps });
        }
        let prompt = self.prompt_for(y)?;
        let req = PredictRequest {
            z: wire::encode_f32(z),
            shape: self.config.shape.clone(),
            t: wire::to_wire_t(t),
            prompt: prompt.to_string(),
            model_id: Some(self.config.model_id.clone()),
        };
        let body = serde_json::to_string(&req)?;
        let started = Instant::now();
        let text = self.with_retries(|| self.post("predict", &body))?;
        let resp: PredictResponse =
            serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("/predict: {e}")))?;
        let eps = wire::decode_f32(&resp.eps_hat)?;
        if eps.len() != self.dim {
            return Err(Error::Protocol(format!("/predict returned {} values, expected {}", eps.len(), self.dim)));
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("/predict returned non-finite values".into()));
        }
        log::trace!("predict t={t} y={y} in {:?}", started.elapsed());
        Ok(eps)
    }

    fn fingerprint(&self) -> String {
        digest::sha256_hex(
            format!("{}|{}|{}", self.config.endpoint, self.config.model_id, self.schedule_hash).as_bytes(),
        )
    }
}
