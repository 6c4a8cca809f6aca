use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModuleId;
use crate::quant::ops::{absmax_scale, dequantize, int_matmul_wide, quantize_symmetric, QTensor, Scales};
use crate::quant::spec::{Granularity, QuantSpec, QuantTarget, Timing};
use crate::tensor::{matmul, Tensor};

/// How one linear group executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearMode {
    Fp,
    W8a8,
    /// INT8 weights dequantized to real values, activations left unquantized.
    W8a16,
}

/// Weights quantized once when a plan is built.
#[derive(Debug, Clone)]
pub struct PreparedWeight {
    pub quantized: QTensor,
    pub dequantized: Tensor,
    /// INT8 codes widened to `i16` for the integer kernel.
    wide: Vec<i16>,
}

impl PreparedWeight {
    pub fn new(weight: &Tensor, spec: &QuantSpec) -> Result<Self> {
        if spec.target != QuantTarget::Weight {
            return Err(Error::QuantSpec(format!("{spec:?} is not a weight scheme")));
        }
        let scales = absmax_scale(weight, spec.granularity);
        let quantized = quantize_symmetric(weight, &scales)?;
        let dequantized = dequantize(&quantized)?;
        let wide = quantized.q.iter().map(|&v| v as i16).collect();
        Ok(Self {
            quantized,
            dequantized,
            wide,
        })
    }
}

/// Everything a single linear call needs from the plan.
#[derive(Debug, Clone, Copy)]
pub struct LinearEntry<'a> {
    pub module: ModuleId,
    pub mode: LinearMode,
    pub activation: QuantSpec,
    pub weight: Option<&'a PreparedWeight>,
    pub static_scale: Option<f32>,
}

/// Quantizes an activation per `spec`, using `static_scale` for static timing.
pub fn quantize_activation(
    x: &Tensor,
    spec: &QuantSpec,
    static_scale: Option<f32>,
    module: ModuleId,
) -> Result<QTensor> {
    let scales = match spec.timing {
        Timing::Dynamic => absmax_scale(x, spec.granularity),
        Timing::Static => {
            debug_assert_eq!(spec.granularity, Granularity::PerTensor);
            Scales::PerTensor(static_scale.ok_or(Error::MissingStaticScale(module))?)
        }
    };
    quantize_symmetric(x, &scales)
}

/// `x · W` under the entry's execution mode.
pub fn quantized_linear(x: &Tensor, weight: &Tensor, entry: &LinearEntry<'_>) -> Result<Tensor> {
    match entry.mode {
        LinearMode::Fp => matmul(x, weight),
        LinearMode::W8a16 => {
            let w = entry
                .weight
                .ok_or_else(|| Error::QuantSpec(format!("{} has no prepared weights", entry.module)))?;
            matmul(x, &w.dequantized)
        }
        LinearMode::W8a8 => {
            let w = entry
                .weight
                .ok_or_else(|| Error::QuantSpec(format!("{} has no prepared weights", entry.module)))?;
            let (m, k) = x.dims2()?;
            let (k2, n) = weight.dims2()?;
            if k != k2 {
                return Err(Error::shape("quantized_linear", format!("[{m}x{k}] x [{k2}x{n}]")));
            }
            let qx = quantize_activation(x, &entry.activation, entry.static_scale, entry.module)?;
            let acc = int_matmul_wide(&qx.q, &w.wide, m, k, n);
            let sw: Vec<f64> = (0..n).map(|j| w.quantized.scales.at(0, j) as f64).collect();
            let mut out = vec![0f32; m * n];
            // combined scale sx * sw; computed once for a per-tensor activation
            // scale, once per row otherwise
            let mut combined = vec![0f64; n];
            let mut current: Option<f32> = None;
            for i in 0..m {
                let sx = qx.scales.at(i, 0);
                if current != Some(sx) || matches!(qx.scales, Scales::PerRow(_)) {
                    for (c, s) in combined.iter_mut().zip(&sw) {
                        *c = sx as f64 * s;
                    }
                    current = Some(sx);
                }
                for ((o, &a), c) in out[i * n..(i + 1) * n].iter_mut().zip(&acc[i * n..(i + 1) * n]).zip(&combined) {
                    *o = (a as f64 * c) as f32;
                }
            }
            Tensor::new(vec![m, n], out)?.check_finite("quantized_linear")
        }
    }
}
