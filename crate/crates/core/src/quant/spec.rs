use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Activation,
    Weight,
    Bmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per row of a `[T × d]` activation.
    PerToken,
    /// One scale per output column of a `[d_in × d_out]` weight.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    Dynamic,
    Static,
}

/// Symmetric 8-bit quantization scheme descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub target: QuantTarget,
    pub granularity: Granularity,
    pub timing: Timing,
    pub bits: u8,
    pub symmetric: bool,
}

impl QuantSpec {
    pub fn new(target: QuantTarget, granularity: Granularity, timing: Timing) -> Result<Self> {
        let spec = Self {
            target,
            granularity,
            timing,
            bits: 8,
            symmetric: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::QuantSpec(m.to_string()));
        if self.bits != 8 || !self.symmetric {
            return bad("only symmetric 8-bit quantization is supported");
        }
        match (self.target, self.granularity, self.timing) {
            (QuantTarget::Activation, Granularity::PerChannel, _) => {
                bad("per-channel activation quantization is not allowed")
            }
            (QuantTarget::Activation, Granularity::PerToken, Timing::Static) => {
                bad("static scales are calibrated per tensor")
            }
            (QuantTarget::Weight, Granularity::PerToken, _) => {
                bad("weights have no token axis")
            }
            (QuantTarget::Bmm, g, t) if g != Granularity::PerTensor || t != Timing::Dynamic => {
                bad("bmm operands are quantized dynamically per tensor")
            }
            _ => Ok(()),
        }
    }

    /// AQ1: dynamic per-token activations.
    pub const AQ1: QuantSpec = QuantSpec {
        target: QuantTarget::Activation,
        granularity: Granularity::PerToken,
        timing: Timing::Dynamic,
        bits: 8,
        symmetric: true,
    };

    /// AQ2: dynamic per-tensor activations.
    pub const AQ2: QuantSpec = QuantSpec {
        target: QuantTarget::Activation,
        granularity: Granularity::PerTensor,
        timing: Timing::Dynamic,
        bits: 8,
        symmetric: true,
    };

    /// AQ3: static per-tensor activations from calibration.
    pub const AQ3: QuantSpec = QuantSpec {
        target: QuantTarget::Activation,
        granularity: Granularity::PerTensor,
        timing: Timing::Static,
        bits: 8,
        symmetric: true,
    };

    pub const WEIGHT_PER_CHANNEL: QuantSpec = QuantSpec {
        target: QuantTarget::Weight,
        granularity: Granularity::PerChannel,
        timing: Timing::Static,
        bits: 8,
        symmetric: true,
    };

    pub const WEIGHT_PER_TENSOR: QuantSpec = QuantSpec {
        target: QuantTarget::Weight,
        granularity: Granularity::PerTensor,
        timing: Timing::Static,
        bits: 8,
        symmetric: true,
    };

    pub const BMM: QuantSpec = QuantSpec {
        target: QuantTarget::Bmm,
        granularity: Granularity::PerTensor,
        timing: Timing::Dynamic,
        bits: 8,
        symmetric: true,
    };
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.granularity {
            Granularity::PerTensor => "per-tensor",
            Granularity::PerToken => "per-token",
            Granularity::PerChannel => "per-channel",
        };
        let t = match self.timing {
            Timing::Dynamic => "dyn",
            Timing::Static => "static",
        };
        match self.target {
            QuantTarget::Weight => write!(f, "{g}"),
            _ => write!(f, "{g}-{t}"),
        }
    }
}
