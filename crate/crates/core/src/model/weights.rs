use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, ModuleId, ModuleKind};
use crate::tensor::Tensor;

/// Parameters of one Pre-LN decoder block. Linear weights are stored as
/// `[d_in × d_out]` so that `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    /// Fused query/key/value projection, `[d_model × 3·d_model]`.
    pub wqkv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    /// Fused gate/up projection, gate columns first; `[d_model × d_ff]`
    /// (up only) for the plain feed-forward.
    pub w_gate_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerWeights {
            attn_norm: Tensor::filled(&[d], 1.0),
            wqkv: Tensor::zeros(&[d, 3 * d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm: Tensor::filled(&[d], 1.0),
            w_gate_up: Tensor::zeros(&[d, cfg.ffn_kind.in_width(cfg.d_ff)]),
            w_down: Tensor::zeros(&[cfg.d_ff, d]),
        };
        Self {
            embed: Tensor::zeros(&[cfg.vocab_size, d]),
            layers: vec![layer; cfg.n_layers],
            final_norm: Tensor::filled(&[d], 1.0),
            lm_head: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    pub fn linear(&self, id: ModuleId) -> &Tensor {
        let l = &self.layers[id.layer];
        match id.kind {
            ModuleKind::Qkv => &l.wqkv,
            ModuleKind::Out => &l.wo,
            ModuleKind::GateUp => &l.w_gate_up,
            ModuleKind::Down => &l.w_down,
        }
    }

    pub fn linear_mut(&mut self, id: ModuleId) -> &mut Tensor {
        let l = &mut self.layers[id.layer];
        match id.kind {
            ModuleKind::Qkv => &mut l.wqkv,
            ModuleKind::Out => &mut l.wo,
            ModuleKind::GateUp => &mut l.w_gate_up,
            ModuleKind::Down => &mut l.w_down,
        }
    }

    /// Named tensors in container order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wqkv"), &l.wqkv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.w_gate_up"), &l.w_gate_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Rebuilds weights from tensors in `named()` order, checking shapes
    /// against the config.
    pub fn from_named(cfg: &ModelConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::zeros(cfg);
        let expected: Vec<(String, Vec<usize>)> = template
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&tensors) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.drain(..).map(|(_, t)| t);
        let mut next = || it.next().expect("count checked above");
        let embed = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wqkv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Ok(Self {
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}
