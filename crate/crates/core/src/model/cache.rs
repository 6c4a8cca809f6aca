use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, TokenId};
use crate::tensor::Tensor;

/// Per-layer keys/values, each stored flat as `[len × n_heads × d_head]`.
/// Keys are stored after rotary embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    n_heads: usize,
    d_head: usize,
    cached_len: usize,
    full_precision: bool,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            n_heads: cfg.n_heads,
            d_head: cfg.d_head,
            cached_len: 0,
            full_precision: true,
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cached_len
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    /// True when every appended state was computed without quantization.
    pub fn is_full_precision(&self) -> bool {
        self.full_precision
    }

    pub(crate) fn mark_quantized(&mut self) {
        self.full_precision = false;
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.keys.len() != cfg.n_layers || self.n_heads != cfg.n_heads || self.d_head != cfg.d_head {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers x {} heads x {}, model {} x {} x {}",
                self.keys.len(),
                self.n_heads,
                self.d_head,
                cfg.n_layers,
                cfg.n_heads,
                cfg.d_head
            )));
        }
        Ok(())
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub fn keys_tensor(&self, layer: usize) -> Option<Tensor> {
        self.layer_tensor(&self.keys[layer])
    }

    pub fn values_tensor(&self, layer: usize) -> Option<Tensor> {
        self.layer_tensor(&self.values[layer])
    }

    fn layer_tensor(&self, data: &[f32]) -> Option<Tensor> {
        if self.cached_len == 0 {
            return None;
        }
        Tensor::new(vec![self.cached_len, self.n_heads, self.d_head], data.to_vec()).ok()
    }

    pub(crate) fn append(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    /// Called once all layers have appended `n` new positions.
    pub(crate) fn advance(&mut self, n: usize) {
        self.cached_len += n;
        let stride = self.n_heads * self.d_head;
        debug_assert!(self
            .keys
            .iter()
            .chain(&self.values)
            .all(|v| v.len() == self.cached_len * stride));
    }

    /// Bytes held by keys and values across all layers.
    pub fn memory_bytes(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|v| v.len() * std::mem::size_of::<f32>())
            .sum()
    }

    /// Bytes one cached position occupies across all layers.
    pub fn bytes_per_position(&self) -> usize {
        2 * self.keys.len() * self.n_heads * self.d_head * std::mem::size_of::<f32>()
    }
}

/// A full-precision context computed once and reused ahead of every
/// evaluated sequence: its cache plus the logits at its last position, which
/// predict the first token that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    pub tokens: Vec<TokenId>,
    pub cache: KvCache,
    pub last_logits: Vec<f32>,
}

impl PrefixState {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
