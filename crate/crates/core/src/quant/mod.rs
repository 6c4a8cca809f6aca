//! Simulated INT8 quantization and execution plans.

mod bmm;
mod linear;
mod ops;
mod plan;
mod spec;

pub use bmm::bmm_quantized_attention;
pub use linear::{quantize_activation, quantized_linear, LinearEntry, LinearMode, PreparedWeight};
pub use ops::{
    absmax_scale, dequantize, int_matmul, int_matmul_wide, quantize_symmetric, quantize_value, scale_from_absmax, QTensor, Scales,
    QMAX,
};
pub use plan::{ExecutionPlan, PlanBuilder};
pub use spec::{Granularity, QuantSpec, QuantTarget, Timing};
