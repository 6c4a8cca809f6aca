//! Synthetic test substrate: a byte tokenizer, a seeded corpus sampler and a
//! generator for small models with engineered activation spikes.

mod corpus;
mod generator;
mod tokenizer;

use serde::{Deserialize, Serialize};

pub use corpus::{
    alphabet_index, alphabet_tokens, sample_corpus, successor, windows, CorpusSource, ALPHABET, FOLLOW_PROB,
    SECOND_OCCURRENCE_PROB,
};
pub use generator::{gen_spike_model, reference_config, spike_config_for, verify_spike_model, SpikeDiagnostics, MIN_D_MODEL};
pub use tokenizer::ToyTokenizer;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    /// Only the first occurrence of the spike token in a sequence spikes.
    FirstOccurrence,
    /// Every occurrence spikes.
    Static,
    /// No spike unit at all.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeConfig {
    pub spike_token: TokenId,
    pub spike_layer: usize,
    pub spike_mode: SpikeMode,
    /// Minimum max-median ratio at the spike layer's `down` input.
    pub target_ratio: f64,
    /// Residual dimension carrying the occurrence marker.
    pub marker_dim: usize,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            spike_token: b'\n' as TokenId,
            spike_layer: 1,
            spike_mode: SpikeMode::FirstOccurrence,
            target_ratio: 1000.0,
            marker_dim: 29,
        }
    }
}

impl SpikeConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.spike_token == cfg.bos_id {
            return fail("spike token must differ from BOS".into());
        }
        if self.spike_token as usize >= cfg.vocab_size {
            return fail(format!("spike token {} outside vocabulary", self.spike_token));
        }
        if alphabet_index(self.spike_token).is_some() {
            return fail(format!("spike token {} is part of the grammar alphabet", self.spike_token));
        }
        if self.spike_layer >= cfg.n_layers {
            return fail(format!("spike layer {} but only {} layers", self.spike_layer, cfg.n_layers));
        }
        if self.spike_mode == SpikeMode::FirstOccurrence && self.spike_layer == 0 {
            return fail("first-occurrence spikes need a marker layer before the spike layer".into());
        }
        if !(self.target_ratio >= 10.0) {
            return fail(format!("target ratio {} must be at least 10", self.target_ratio));
        }
        if self.marker_dim >= cfg.d_model {
            return fail(format!("marker dim {} outside d_model {}", self.marker_dim, cfg.d_model));
        }
        Ok(())
    }
}
