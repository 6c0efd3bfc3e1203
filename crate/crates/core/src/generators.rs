//! Differentiable generators `x = g(θ)` with hand-written pullbacks.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::io;
use crate::random::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// `g(θ) = θ`.
    #[default]
    Identity,
    /// Coordinate network evaluated on a fixed `[height, width]` grid.
    Field,
}

/// Coordinate-network hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldArch {
    pub width: usize,
    /// Number of sin/cos octaves per axis.
    pub frequencies: usize,
    /// Standard deviation of the output-layer weights at init.
    pub output_scale: f64,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self { width: 64, frequencies: 4, output_scale: 0.05 }
    }
}

impl FieldArch {
    fn n_features(&self) -> usize {
        2 + 4 * self.frequencies
    }

    fn n_params(&self) -> usize {
        let (p, h) = (self.n_features(), self.width);
        h * p + h + h * h + h + h + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub kind: GeneratorKind,
    /// Output shape; `[height, width]` for fields.
    pub shape: Vec<usize>,
    pub arch: FieldArch,
    pub theta: Vec<f64>,
}

/// Header of a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHeader {
    pub kind: GeneratorKind,
    pub shape: Vec<usize>,
    pub arch: FieldArch,
    pub seed: u64,
    pub iter: usize,
    pub theta_hash: String,
}

struct FieldWeights<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
    w3: ArrayView1<'a, f64>,
    b3: f64,
}

struct FieldOffsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

fn field_offsets(arch: &FieldArch) -> FieldOffsets {
    let (p, h) = (arch.n_features(), arch.width);
    let w1 = 0;
    let b1 = w1 + h * p;
    let w2 = b1 + h;
    let b2 = w2 + h * h;
    let w3 = b2 + h;
    let b3 = w3 + h;
    FieldOffsets { w1, b1, w2, b2, w3, b3 }
}

/// Positional features `[u, v, sin(2^k π u), cos(2^k π u), sin(2^k π v),
/// cos(2^k π v)]` at pixel centres mapped into `[-1, 1]²`.
pub fn field_features(height: usize, width: usize, frequencies: usize) -> Array2<f64> {
    let p = 2 + 4 * frequencies;
    let mut f = Array2::zeros((height * width, p));
    let coord = |i: usize, n: usize| (2.0 * i as f64 + 1.0) / n as f64 - 1.0;
    for r in 0..height {
        for c in 0..width {
            let (u, v) = (coord(c, width), coord(r, height));
            let mut row = f.row_mut(r * width + c);
            row[0] = u;
            row[1] = v;
            for k in 0..frequencies {
                let w = PI * (1u64 << k) as f64;
                row[2 + 4 * k] = (w * u).sin();
                row[3 + 4 * k] = (w * u).cos();
                row[4 + 4 * k] = (w * v).sin();
                row[5 + 4 * k] = (w * v).cos();
            }
        }
    }
    f
}

struct FieldPass {
    feats: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array1<f64>,
}

impl GeneratorParams {
    pub fn identity(theta: Vec<f64>) -> Self {
        let n = theta.len();
        Self { kind: GeneratorKind::Identity, shape: vec![n], arch: FieldArch::default(), theta }
    }

    pub fn output_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn theta_hash(&self) -> String {
        digest::hash_f64s(&self.theta)
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            GeneratorKind::Identity => check_dim(self.output_len(), self.theta.len()),
            GeneratorKind::Field => {
                if self.shape.len() != 2 || self.output_len() == 0 {
                    return Err(Error::config("field generator needs shape [height, width]"));
                }
                if self.arch.width == 0 {
                    return Err(Error::config("field width must be positive"));
                }
                check_dim(self.arch.n_params(), self.theta.len())
            }
        }
    }

    fn weights(&self) -> FieldWeights<'_> {
        let (p, h) = (self.arch.n_features(), self.arch.width);
        let o = field_offsets(&self.arch);
        let th = &self.theta;
        FieldWeights {
            w1: ArrayView2::from_shape((h, p), &th[o.w1..o.b1]).expect("layout"),
            b1: ArrayView1::from(&th[o.b1..o.w2]),
            w2: ArrayView2::from_shape((h, h), &th[o.w2..o.b2]).expect("layout"),
            b2: ArrayView1::from(&th[o.b2..o.w3]),
            w3: ArrayView1::from(&th[o.w3..o.b3]),
            b3: th[o.b3],
        }
    }

    fn field_forward(&self) -> FieldPass {
        let feats = field_features(self.shape[0], self.shape[1], self.arch.frequencies);
        let w = self.weights();
        let h1 = (feats.dot(&w.w1.t()) + w.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&w.w2.t()) + w.b2).mapv(f64::tanh);
        let out = h2.dot(&w.w3) + w.b3;
        FieldPass { feats, h1, h2, out }
    }

    pub fn render(&self) -> Result<Vec<f64>> {
        self.validate()?;
        check_finite(&self.theta, "generator parameters")?;
        match self.kind {
            GeneratorKind::Identity => Ok(self.theta.clone()),
            GeneratorKind::Field => Ok(self.field_forward().out.to_vec()),
        }
    }

    /// `(∂x/∂θ)ᵀ · grad_x`.
    pub fn pullback(&self, grad_x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        check_dim(self.output_len(), grad_x.len())?;
        match self.kind {
            GeneratorKind::Identity => Ok(grad_x.to_vec()),
            GeneratorKind::Field => Ok(self.field_pullback(grad_x)),
        }
    }

    fn field_pullback(&self, grad_x: &[f64]) -> Vec<f64> {
        let pass = self.field_forward();
        let w = self.weights();
        let o = field_offsets(&self.arch);
        let g = ArrayView1::from(grad_x);
        let mut out = vec![0.0; self.theta.len()];

        out[o.b3] = g.sum();
        out[o.w3..o.b3].copy_from_slice(pass.h2.t().dot(&g).as_slice().expect("contiguous"));
        // dA2 = (g ⊗ w3) ⊙ (1 − h2²)
        let mut da2 = g.insert_axis(Axis(1)).dot(&w.w3.insert_axis(Axis(0)));
        da2.zip_mut_with(&pass.h2, |d, h| *d *= 1.0 - h * h);
        write_block(&mut out[o.w2..o.b2], da2.t().dot(&pass.h1));
        out[o.b2..o.w3].copy_from_slice(da2.sum_axis(Axis(0)).as_slice().expect("contiguous"));
        let mut da1 = da2.dot(&w.w2);
        da1.zip_mut_with(&pass.h1, |d, h| *d *= 1.0 - h * h);
        write_block(&mut out[o.w1..o.b1], da1.t().dot(&pass.feats));
        out[o.b1..o.w2].copy_from_slice(da1.sum_axis(Axis(0)).as_slice().expect("contiguous"));
        out
    }

    pub fn save(&self, stem: &Path, seed: u64, iter: usize) -> Result<GeneratorHeader> {
        let header = GeneratorHeader {
            kind: self.kind,
            shape: self.shape.clone(),
            arch: self.arch,
            seed,
            iter,
            theta_hash: self.theta_hash(),
        };
        io::write_blob(stem, &header, &self.theta)?;
        Ok(header)
    }

    pub fn load(stem: &Path) -> Result<(Self, GeneratorHeader)> {
        let (header, theta): (GeneratorHeader, Vec<f64>) = io::read_blob(stem)?;
        let params = Self { kind: header.kind, shape: header.shape.clone(), arch: header.arch, theta };
        params.validate()?;
        if params.theta_hash() != header.theta_hash {
            return Err(Error::config(format!("generator checkpoint {} is corrupt", stem.display())));
        }
        Ok((params, header))
    }
}

fn write_block(dst: &mut [f64], src: Array2<f64>) {
    let src = src.as_standard_layout();
    dst.copy_from_slice(src.as_slice().expect("standard layout"));
}

/// Identity: `θ ~ N(0, I)`. Field: LeCun-normal hidden layers, output
/// weights with standard deviation `arch.output_scale / √width`, zero
/// biases.
pub fn init_params(kind: GeneratorKind, shape: &[usize], arch: FieldArch, rng: &mut Rng) -> Result<GeneratorParams> {
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::config("generator shape must be non-empty"));
    }
    match kind {
        GeneratorKind::Identity => {
            Ok(GeneratorParams { kind, shape: shape.to_vec(), arch, theta: random::standard_normal(rng, n) })
        }
        GeneratorKind::Field => {
            let mut theta = vec![0.0; arch.n_params()];
            let o = field_offsets(&arch);
            let (p, h) = (arch.n_features(), arch.width);
            fill_normal(rng, &mut theta[o.w1..o.b1], (1.0 / p as f64).sqrt());
            fill_normal(rng, &mut theta[o.w2..o.b2], (1.0 / h as f64).sqrt());
            fill_normal(rng, &mut theta[o.w3..o.b3], arch.output_scale / (h as f64).sqrt());
            let g = GeneratorParams { kind, shape: shape.to_vec(), arch, theta };
            g.validate()?;
            Ok(g)
        }
    }
}

fn fill_normal(rng: &mut Rng, out: &mut [f64], sd: f64) {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    for v in out {
        *v = normal.sample(rng);
    }
}
