//! Dense row-major `f32` tensors and the handful of kernels the model needs.
//!
//! Every kernel accumulates in `f64` and rounds once on store. Matmul sums
//! over the inner index in ascending order, so results are reproducible
//! bit-for-bit across runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::new", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows. Panics on ragged input; test helper.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f32) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn absmax(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Concatenates rank-2 tensors along rows.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("vstack"))?;
        let (_, cols) = first.dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::shape("vstack", format!("{c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// `c = a · b` for `a: [M×K]`, `b: [K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("[{m}x{k}] x [{k2}x{n}]"),
        ));
    }
    let mut out = vec![0f32; m * n];
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

/// Root-mean-square normalization over the last axis.
pub fn rmsnorm(x: &Tensor, gamma: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape.last().unwrap();
    if gamma.shape != [d] {
        return Err(Error::shape(
            "rmsnorm",
            format!("gamma {:?} vs last dim {d}", gamma.shape),
        ));
    }
    let mut out = vec![0f32; x.data.len()];
    for (src, dst) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = src.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let denom = (ms + eps as f64).sqrt();
        for ((o, &v), &g) in dst.iter_mut().zip(src).zip(&gamma.data) {
            *o = if denom > 0.0 {
                (v as f64 / denom * g as f64) as f32
            } else {
                0.0
            };
        }
    }
    Tensor::new(x.shape.clone(), out)?.check_finite("rmsnorm")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    let data = x
        .data
        .iter()
        .map(|&v| kind.apply(v as f64) as f32)
        .collect();
    Tensor::new(x.shape.clone(), data)?.check_finite("activation")
}

/// Row-wise softmax where row `t` may only see columns `j <= t + offset`.
pub fn causal_softmax_rows(scores: &Tensor, offset: usize) -> Result<Tensor> {
    let (t, s) = scores.dims2()?;
    let mut out = vec![0f32; t * s];
    for row in 0..t {
        let visible = (row + offset + 1).min(s);
        if visible == 0 {
            return Err(Error::FullyMasked { row });
        }
        let src = &scores.data[row * s..row * s + visible];
        let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = src.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out[row * s..row * s + visible].iter_mut().zip(&exps) {
            *o = (e / z) as f32;
        }
    }
    Tensor::new(vec![t, s], out)?.check_finite("causal_softmax_rows")
}

/// Rotary position embedding over `[T×H×Dh]`, rotating consecutive pairs
/// `(2i, 2i+1)` by `pos · theta^(-2i/Dh)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], theta: f32) -> Result<Tensor> {
    let (t, h, dh) = match x.shape[..] {
        [t, h, dh] => (t, h, dh),
        _ => return Err(Error::shape("rope_apply", format!("expected [T,H,Dh], got {:?}", x.shape))),
    };
    if dh % 2 != 0 {
        return Err(Error::OddHeadDim(dh));
    }
    if positions.len() != t {
        return Err(Error::shape(
            "rope_apply",
            format!("{} positions for {t} rows", positions.len()),
        ));
    }
    let inv_freq: Vec<f64> = (0..dh / 2)
        .map(|i| (theta as f64).powf(-(2.0 * i as f64) / dh as f64))
        .collect();
    let mut out = x.data.clone();
    for (ti, &pos) in positions.iter().enumerate() {
        let rot: Vec<(f64, f64)> = inv_freq
            .iter()
            .map(|f| {
                let a = pos as f64 * f;
                (a.cos(), a.sin())
            })
            .collect();
        for hi in 0..h {
            let base = (ti * h + hi) * dh;
            for (i, &(c, s)) in rot.iter().enumerate() {
                let x0 = x.data[base + 2 * i] as f64;
                let x1 = x.data[base + 2 * i + 1] as f64;
                out[base + 2 * i] = (x0 * c - x1 * s) as f32;
                out[base + 2 * i + 1] = (x0 * s + x1 * c) as f32;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)?.check_finite("rope_apply")
}
