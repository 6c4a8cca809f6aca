//! Scaled dot-product attention with optional INT8 batched matmuls.
//!
//! With quantization on, `Q`, `K` (cached positions included), the softmax
//! probabilities and `V` are each quantized dynamically per tensor across all
//! heads; both products accumulate in `i32` and are dequantized with the
//! product of the operand scales.

use crate::error::{Error, Result};
use crate::quant::ops::{quantize_value, scale_from_absmax};
use crate::tensor::{causal_softmax_rows, Tensor};

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape(op, format!("expected rank 3, got {:?}", t.shape()))),
    }
}

fn quantize_all(data: &[f32]) -> (Vec<i8>, f64) {
    let s = scale_from_absmax(data.iter().fold(0.0f32, |m, v| m.max(v.abs())));
    (data.iter().map(|&v| quantize_value(v, s)).collect(), s as f64)
}

/// `q: [T×H×Dh]`, `k, v: [S×H×Dh]`; query row `t` sits at absolute position
/// `offset + t` and sees keys `0..=offset + t`. Returns `[T×H×Dh]`.
pub fn bmm_quantized_attention(q: &Tensor, k: &Tensor, v: &Tensor, offset: usize, quantize: bool) -> Result<Tensor> {
    let (t, h, dh) = dims3(q, "attention")?;
    let (s, hk, dk) = dims3(k, "attention")?;
    if v.shape() != k.shape() || hk != h || dk != dh {
        return Err(Error::shape(
            "attention",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    // scores for every head, [H][T×S]
    let mut probs = Vec::with_capacity(h);
    let quant_qk = quantize.then(|| (quantize_all(qd), quantize_all(kd)));
    for head in 0..h {
        let mut scores = vec![0f32; t * s];
        for ti in 0..t {
            let visible = (offset + ti + 1).min(s);
            for si in 0..visible {
                let qo = (ti * h + head) * dh;
                let ko = (si * h + head) * dh;
                let dot = match &quant_qk {
                    None => (0..dh).map(|d| qd[qo + d] as f64 * kd[ko + d] as f64).sum::<f64>(),
                    Some(((qq, sq), (kq, sk))) => {
                        let acc = (0..dh).fold(0i32, |a, d| a.wrapping_add((qq[qo + d] as i32).wrapping_mul(kq[ko + d] as i32)));
                        acc as f64 * sq * sk
                    }
                };
                scores[ti * s + si] = (dot * inv_sqrt) as f32;
            }
        }
        let p = causal_softmax_rows(&Tensor::new(vec![t, s], scores)?, offset)?;
        probs.push(p.into_data());
    }

    // P·V over the visible keys only; each output element still sums its
    // terms in key order, and masked probabilities are exactly zero
    let mut out = vec![0f32; t * h * dh];
    if quantize {
        let all: Vec<f32> = probs.iter().flatten().copied().collect();
        let (pq, sp) = quantize_all(&all);
        let (vq, sv) = quantize_all(vd);
        let mut acc = vec![0i32; dh];
        for head in 0..h {
            let pbase = head * t * s;
            for ti in 0..t {
                acc.fill(0);
                let visible = (offset + ti + 1).min(s);
                for si in 0..visible {
                    let p = pq[pbase + ti * s + si] as i32;
                    if p == 0 {
                        continue;
                    }
                    let vrow = &vq[(si * h + head) * dh..(si * h + head + 1) * dh];
                    for (a, &v) in acc.iter_mut().zip(vrow) {
                        *a = a.wrapping_add(p.wrapping_mul(v as i32));
                    }
                }
                let o = &mut out[(ti * h + head) * dh..(ti * h + head + 1) * dh];
                for (o, &a) in o.iter_mut().zip(&acc) {
                    *o = (a as f64 * sp * sv) as f32;
                }
            }
        }
    } else {
        let mut acc = vec![0f64; dh];
        for (head, p) in probs.iter().enumerate() {
            for ti in 0..t {
                acc.fill(0.0);
                let visible = (offset + ti + 1).min(s);
                for si in 0..visible {
                    let pv = p[ti * s + si] as f64;
                    let vrow = &vd[(si * h + head) * dh..(si * h + head + 1) * dh];
                    for (a, &v) in acc.iter_mut().zip(vrow) {
                        *a += pv * v as f64;
                    }
                }
                let o = &mut out[(ti * h + head) * dh..(ti * h + head + 1) * dh];
                for (o, &a) in o.iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            }
        }
    }
    Tensor::new(vec![t, h, dh], out)?.check_finite("attention")
}
