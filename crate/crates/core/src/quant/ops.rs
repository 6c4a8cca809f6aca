//! Symmetric INT8 primitives: absmax scale estimation, round-to-nearest
//! quantization onto `[-127, 127]`, dequantization and an exact integer
//! matmul.

use crate::error::{Error, Result};
use crate::quant::spec::Granularity;
use crate::tensor::Tensor;

pub const QMAX: i32 = 127;

/// Quantization scale(s) for a rank-2 tensor (rank-1 is treated as one row).
#[derive(Debug, Clone, PartialEq)]
pub enum Scales {
    PerTensor(f32),
    PerRow(Vec<f32>),
    PerColumn(Vec<f32>),
}

impl Scales {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        match self {
            Scales::PerTensor(s) => *s,
            Scales::PerRow(v) => v[row],
            Scales::PerColumn(v) => v[col],
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        match self {
            Scales::PerTensor(s) => std::slice::from_ref(s),
            Scales::PerRow(v) | Scales::PerColumn(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub q: Vec<i8>,
    pub scales: Scales,
}

fn rows_cols(x: &Tensor) -> (usize, usize) {
    let cols = *x.shape().last().unwrap();
    (x.len() / cols, cols)
}

/// `absmax / 127`, with an all-zero input mapping to 1.0.
#[inline]
pub fn scale_from_absmax(absmax: f32) -> f32 {
    if absmax == 0.0 {
        1.0
    } else {
        (absmax as f64 / QMAX as f64) as f32
    }
}

pub fn absmax_scale(x: &Tensor, granularity: Granularity) -> Scales {
    let (rows, cols) = rows_cols(x);
    let data = x.data();
    match granularity {
        Granularity::PerTensor => Scales::PerTensor(scale_from_absmax(x.absmax())),
        Granularity::PerToken => Scales::PerRow(
            data.chunks_exact(cols)
                .map(|r| scale_from_absmax(r.iter().fold(0.0f32, |m, v| m.max(v.abs()))))
                .collect(),
        ),
        Granularity::PerChannel => {
            let mut m = vec![0.0f32; cols];
            for r in 0..rows {
                for (mc, v) in m.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                    *mc = mc.max(v.abs());
                }
            }
            Scales::PerColumn(m.into_iter().map(scale_from_absmax).collect())
        }
    }
}

/// Rounds to nearest with ties away from zero, then saturates.
#[inline]
pub fn quantize_value(x: f32, scale: f32) -> i8 {
    let q = (x as f64 / scale as f64).round();
    q.clamp(-(QMAX as f64), QMAX as f64) as i8
}

pub fn quantize_symmetric(x: &Tensor, scales: &Scales) -> Result<QTensor> {
    let (rows, cols) = rows_cols(x);
    match scales {
        Scales::PerRow(v) if v.len() != rows => {
            return Err(Error::shape("quantize_symmetric", format!("{} row scales for {rows} rows", v.len())))
        }
        Scales::PerColumn(v) if v.len() != cols => {
            return Err(Error::shape("quantize_symmetric", format!("{} column scales for {cols} columns", v.len())))
        }
        _ => {}
    }
    if let Some(&bad) = scales.as_slice().iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::NonPositiveScale(bad));
    }
    let data = x.data();
    let q: Vec<i8> = match scales {
        Scales::PerTensor(s) => data.iter().map(|&v| quantize_value(v, *s)).collect(),
        Scales::PerRow(v) => data
            .chunks_exact(cols)
            .zip(v)
            .flat_map(|(row, &s)| row.iter().map(move |&x| quantize_value(x, s)))
            .collect(),
        Scales::PerColumn(v) => data
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(v).map(|(&x, &s)| quantize_value(x, s)))
            .collect(),
    };
    debug_assert_eq!(q.len(), rows * cols);
    Ok(QTensor {
        shape: x.shape().to_vec(),
        q,
        scales: scales.clone(),
    })
}

pub fn dequantize(qt: &QTensor) -> Result<Tensor> {
    let cols = *qt.shape.last().unwrap();
    let data = qt
        .q
        .iter()
        .enumerate()
        .map(|(i, &q)| (q as f64 * qt.scales.at(i / cols, i % cols) as f64) as f32)
        .collect();
    Tensor::new(qt.shape.clone(), data)
}

/// Exact `i32` product of `[M×K]` and `[K×N]` INT8 matrices. `K ≤ 2^15`
/// keeps the sum within range.
pub fn int_matmul(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Vec<i32> {
    let wide: Vec<i16> = b.iter().map(|&v| v as i16).collect();
    int_matmul_wide(a, &wide, m, k, n)
}

/// [`int_matmul`] with the right operand already widened to `i16`. Every
/// product of two INT8 codes fits in `i16` (at most 127 * 127), so the inner
/// loop multiplies in 16 bits and accumulates in 32, which vectorizes well.
/// Zero activation codes are skipped.
pub fn int_matmul_wide(a: &[i8], b: &[i16], m: usize, k: usize, n: usize) -> Vec<i32> {
    debug_assert!(k <= 1 << 15);
    debug_assert!(a.len() == m * k && b.len() == k * n);
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0 {
                continue;
            }
            // codes lie in [-127, 127] and k <= 2^15, so neither the product
            // nor the sum can overflow; wrapping ops keep the loop vectorizable
            // when overflow checks are on
            let av = av as i16;
            for (s, &bv) in acc.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *s = s.wrapping_add(av.wrapping_mul(bv) as i32);
            }
        }
    }
    out
}
