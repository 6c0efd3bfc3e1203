//! File artifacts: atomic writes, flat f64 blobs with JSON headers, PGM
//! dumps and small CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::digest;
use crate::error::{Error, Result};

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path.file_name().ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// `stem.json` + `stem.bin` pair.
pub fn blob_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes a little-endian f64 blob and its header; returns the blob hash.
pub fn write_blob<H: Serialize>(stem: &Path, header: &H, values: &[f64]) -> Result<String> {
    let (json, bin) = blob_paths(stem);
    let bytes = digest::f64_le_bytes(values);
    atomic_write(&bin, &bytes)?;
    write_json(&json, header)?;
    Ok(digest::sha256_hex(&bytes))
}

pub fn read_blob<H: DeserializeOwned>(stem: &Path) -> Result<(H, Vec<f64>)> {
    let (json, bin) = blob_paths(stem);
    let header = read_json(&json)?;
    let bytes = fs::read(&bin)?;
    let values = digest::f64_from_le_bytes(&bytes)
        .ok_or_else(|| Error::config(format!("{}: length not a multiple of 8", bin.display())))?;
    Ok((header, values))
}

/// Binary 8-bit PGM of a row-major `width × height` field, mapping
/// `[lo, hi]` linearly onto `[0, 255]` with clamping.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Dimension { expected: width * height, got: values.len() });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|v| {
        let u = ((v - lo) / span).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Result<()> {
    atomic_write(path, &pgm_bytes(width, height, values, lo, hi)?)
}

/// Symmetric display range `[-m, m]` for a signed field.
pub fn symmetric_range(values: &[f64]) -> (f64, f64) {
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        (-1.0, 1.0)
    } else {
        (-m, m)
    }
}

/// Minimal CSV builder; values are written with Rust's shortest round-trip
/// float formatting, so identical inputs give byte-identical files.
#[derive(Debug, Clone, Default)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn with_header(cols: &[&str]) -> Self {
        let mut c = Self::default();
        c.buf.push_str(&cols.join(","));
        c.buf.push('\n');
        c
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.buf.as_bytes())
    }
}
