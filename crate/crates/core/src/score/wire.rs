//! JSON wire format shared with the model bridge.
//!
//! Arrays travel as base64 of little-endian `f32`. Timesteps on the wire
//! are 0-based (`t_wire = t - 1`), matching the indexing of the served
//! scheduler tables.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text.trim()).map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Protocol(format!("payload of {} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub z: String,
    pub shape: Vec<usize>,
    pub t: usize,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub eps_hat: String,
    #[serde(default)]
    pub shape: Option<Vec<usize>>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub latency_ms: Option<f64>,
}

/// `alpha_bars` may arrive either as a JSON number array or as a base64
/// f32 string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireArray {
    Numbers(Vec<f64>),
    Base64(String),
}

impl WireArray {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            WireArray::Numbers(v) => Ok(v.clone()),
            WireArray::Base64(s) => decode_f32(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleResponse {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub alpha_bars: WireArray,
}

impl ScheduleResponse {
    /// Validated ᾱ table: length `T`, finite, in (0, 1), strictly decreasing.
    pub fn alpha_bars(&self) -> Result<Vec<f64>> {
        let a = self.alpha_bars.values()?;
        if a.len() != self.timesteps {
            return Err(Error::Protocol(format!(
                "schedule declares T = {} but carries {} entries",
                self.timesteps,
                a.len()
            )));
        }
        if a.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v < 1.0)) || a.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Protocol("alpha_bars must be strictly decreasing in (0, 1)".into()));
        }
        Ok(a)
    }
}

pub fn to_wire_t(t: usize) -> usize {
    t - 1
}
