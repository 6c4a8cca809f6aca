use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Swiglu,
    Geglu,
    Plain,
}

impl FfnKind {
    pub fn is_glu(self) -> bool {
        !matches!(self, FfnKind::Plain)
    }

    pub fn activation(self) -> Activation {
        match self {
            FfnKind::Swiglu => Activation::Silu,
            FfnKind::Geglu | FfnKind::Plain => Activation::Gelu,
        }
    }

    /// Output width of the fused input projection.
    pub fn in_width(self, d_ff: usize) -> usize {
        if self.is_glu() {
            2 * d_ff
        } else {
            d_ff
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rmsnorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub ffn_kind: FfnKind,
    pub norm_kind: NormKind,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub bos_id: TokenId,
    /// Longest sequence (including any cached prefix) the model accepts.
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_head == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return bad(format!("d_head {} must be even for rotary embedding", self.d_head));
        }
        if self.bos_id as usize >= self.vocab_size {
            return bad(format!("bos_id {} >= vocab_size {}", self.bos_id, self.vocab_size));
        }
        if !(self.rope_theta > 0.0) {
            return bad("rope_theta must be positive".into());
        }
        if self.d_model.max(self.d_ff) > (1 << 15) {
            return bad("input widths above 2^15 would overflow INT32 accumulation".into());
        }
        Ok(())
    }

    /// Every quantizable linear group, in forward order.
    pub fn module_ids(&self) -> Vec<ModuleId> {
        (0..self.n_layers)
            .flat_map(|layer| ModuleKind::ALL.iter().map(move |&kind| ModuleId { layer, kind }))
            .collect()
    }

    pub fn n_modules(&self) -> usize {
        self.n_layers * ModuleKind::ALL.len()
    }

    /// Input width of a module.
    pub fn module_in_dim(&self, kind: ModuleKind) -> usize {
        match kind {
            ModuleKind::Qkv | ModuleKind::Out | ModuleKind::GateUp => self.d_model,
            ModuleKind::Down => self.d_ff,
        }
    }
}

/// Linear groups inside one decoder layer. Siblings that consume the same
/// input (query/key/value; gate/up) form a single group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Qkv,
    Out,
    GateUp,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [
        ModuleKind::Qkv,
        ModuleKind::Out,
        ModuleKind::GateUp,
        ModuleKind::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Qkv => "qkv",
            ModuleKind::Out => "out",
            ModuleKind::GateUp => "gate_up",
            ModuleKind::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qkv" => Ok(ModuleKind::Qkv),
            "out" => Ok(ModuleKind::Out),
            "gate_up" | "up" => Ok(ModuleKind::GateUp),
            "down" => Ok(ModuleKind::Down),
            other => Err(Error::Config(format!("unknown module kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        Self { layer, kind }
    }

    /// Dense index `layer * 4 + kind`.
    pub fn index(self) -> usize {
        self.layer * ModuleKind::ALL.len() + self.kind.index()
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind.as_str())
    }
}
