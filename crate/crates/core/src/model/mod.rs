//! Pre-LN decoder-only transformer with GLU or plain feed-forward blocks.

mod cache;
mod config;
pub mod container;
mod forward;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use cache::{KvCache, PrefixState};
pub use config::{FfnKind, ModelConfig, ModuleId, ModuleKind, NormKind, TokenId};
pub use forward::{glu_ffn, ForwardTrace, TraceOptions};
pub use weights::{LayerWeights, ModelWeights};

use crate::error::Result;
use crate::synth::SpikeConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Present for generated spike models.
    pub spike: Option<SpikeConfig>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            weights,
            spike: None,
        })
    }

    /// Gaussian weights with standard deviation `std / sqrt(d_in)` and unit
    /// norm gains; used for tests and benches.
    pub fn random(config: ModelConfig, seed: u64, std: f32) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ModelWeights::zeros(&config);
        let fill = |t: &mut crate::tensor::Tensor, rng: &mut ChaCha8Rng| {
            let din = t.shape()[0] as f32;
            let n = Normal::new(0.0f32, std / din.sqrt()).expect("finite std");
            for v in t.data_mut() {
                *v = n.sample(rng);
            }
        };
        let emb = Normal::new(0.0f32, 1.0).expect("unit normal");
        for v in weights.embed.data_mut() {
            *v = emb.sample(&mut rng);
        }
        for l in &mut weights.layers {
            fill(&mut l.wqkv, &mut rng);
            fill(&mut l.wo, &mut rng);
            fill(&mut l.w_gate_up, &mut rng);
            fill(&mut l.w_down, &mut rng);
        }
        fill(&mut weights.lm_head, &mut rng);
        Self::new(config, weights)
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        self.config.module_ids()
    }

    /// Hex SHA-256 of the serialized container; identifies the model in every
    /// downstream artifact.
    pub fn fingerprint(&self) -> String {
        let bytes = container::to_bytes(self).expect("in-memory model always serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use crate::error::Error;
    use crate::quant::{ExecutionPlan, LinearEntry, LinearMode, QuantSpec};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn fp_entry(kind: ModuleKind) -> LinearEntry<'static> {
        LinearEntry {
            module: ModuleId::new(0, kind),
            mode: LinearMode::Fp,
            activation: QuantSpec::AQ2,
            weight: None,
            static_scale: None,
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn single_token_logit_shape() {
        let m = tiny(FfnKind::Swiglu, 1);
        let tr = m.forward(&[19], None, &ExecutionPlan::fp(&m), TraceOptions::NONE).unwrap();
        assert_eq!(tr.logits.shape(), &[1, 20]);
        assert_eq!(tr.hidden_absmax.len(), 2);
    }

    #[test]
    fn rejects_bad_tokens_and_empty_input() {
        let m = tiny(FfnKind::Swiglu, 1);
        let plan = ExecutionPlan::fp(&m);
        assert!(matches!(
            m.forward(&[19, 20], None, &plan, TraceOptions::NONE),
            Err(Error::TokenOutOfRange { token: 20, .. })
        ));
        assert!(matches!(m.forward(&[], None, &plan, TraceOptions::NONE), Err(Error::Empty(_))));
        let other = Model::random(
            ModelConfig {
                n_heads: 4,
                d_head: 4,
                ..tiny_config(FfnKind::Swiglu)
            },
            1,
            1.0,
        )
        .unwrap();
        let mut foreign = KvCache::new(&other.config);
        assert!(matches!(
            m.forward(&[19], Some(&mut foreign), &plan, TraceOptions::NONE),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn zero_gate_zeroes_swiglu_ffn() {
        let d_ff = 4;
        let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[1.5, 0.2, -0.7]]);
        let mut gu = Tensor::zeros(&[3, 2 * d_ff]);
        for i in 0..3 {
            for j in d_ff..2 * d_ff {
                gu.set2(i, j, 0.3 * (i + j) as f32);
            }
        }
        let down = Tensor::filled(&[d_ff, 3], 1.0);
        let (out, tap) = glu_ffn(&x, &gu, &down, FfnKind::Swiglu, &fp_entry(ModuleKind::GateUp), &fp_entry(ModuleKind::Down)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(tap.data().iter().all(|&v| v == 0.0));

        // zero up weights: also zero
        let mut gu = Tensor::zeros(&[3, 2 * d_ff]);
        for i in 0..3 {
            for j in 0..d_ff {
                gu.set2(i, j, 1.0);
            }
        }
        let (out, _) = glu_ffn(&x, &gu, &down, FfnKind::Geglu, &fp_entry(ModuleKind::GateUp), &fp_entry(ModuleKind::Down)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_dimensional_glu_tap() {
        // gate(x) = x, up(x) = 2x, silu, x = 1
        let x = Tensor::from_rows(&[&[1.0]]);
        let gu = Tensor::from_rows(&[&[1.0, 2.0]]);
        let down = Tensor::from_rows(&[&[1.0]]);
        let (out, tap) = glu_ffn(&x, &gu, &down, FfnKind::Swiglu, &fp_entry(ModuleKind::GateUp), &fp_entry(ModuleKind::Down)).unwrap();
        approx::assert_abs_diff_eq!(tap.data()[0], 1.46212, epsilon = 1e-5);
        assert_eq!(out.data()[0], tap.data()[0]);
    }

    #[test]
    fn plain_ffn_has_no_gate() {
        let x = Tensor::from_rows(&[&[1.0, -2.0]]);
        let up = Tensor::from_rows(&[&[0.5, 1.0, 0.0], &[0.25, -1.0, 3.0]]);
        let down = Tensor::filled(&[3, 2], 1.0);
        let (_, tap) = glu_ffn(&x, &up, &down, FfnKind::Plain, &fp_entry(ModuleKind::GateUp), &fp_entry(ModuleKind::Down)).unwrap();
        let pre = [0.5 - 0.5, 1.0 + 2.0, -6.0];
        for (t, p) in tap.data().iter().zip(pre) {
            approx::assert_abs_diff_eq!(*t as f64, crate::tensor::Activation::Gelu.apply(p), epsilon = 1e-6);
        }
        // GLU-width weights are rejected for the plain block
        let wide = Tensor::zeros(&[2, 6]);
        assert!(glu_ffn(&x, &wide, &down, FfnKind::Plain, &fp_entry(ModuleKind::GateUp), &fp_entry(ModuleKind::Down)).is_err());
    }

    #[test]
    fn taps_cover_every_module() {
        for kind in [FfnKind::Swiglu, FfnKind::Geglu, FfnKind::Plain] {
            let m = tiny(kind, 3);
            let tr = m.forward(&[19, 1, 2, 3], None, &ExecutionPlan::fp(&m), TraceOptions::TAPS).unwrap();
            assert_eq!(tr.taps.len(), 4 * m.config.n_layers);
            assert_eq!(tr.taps[&ModuleId::new(1, ModuleKind::Down)].shape(), &[4, 24]);
        }
    }

    #[test]
    fn pre_ln_taps_are_normalized_rows() {
        let mut m = tiny(FfnKind::Swiglu, 4);
        // blow up the residual stream; the normalized taps must not follow
        for v in m.weights.embed.data_mut() {
            *v *= 1000.0;
        }
        let tr = m.forward(&[19, 1, 5, 7, 2], None, &ExecutionPlan::fp(&m), TraceOptions::TAPS).unwrap();
        for layer in 0..2 {
            for kind in [ModuleKind::Qkv, ModuleKind::GateUp] {
                let tap = &tr.taps[&ModuleId::new(layer, kind)];
                for r in 0..tap.shape()[0] {
                    let row = tap.row(r);
                    let rms = (row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / row.len() as f64).sqrt();
                    approx::assert_abs_diff_eq!(rms, 1.0, epsilon = 1e-4);
                }
            }
        }
        assert!(tr.hidden_absmax[0].iter().all(|&h| h > 100.0));
    }

    #[test]
    fn build_kv_cache_single_bos() {
        let m = tiny(FfnKind::Swiglu, 5);
        let (cache, _) = m.build_kv_cache(&[19]).unwrap();
        assert_eq!(cache.cached_len(), 1);
        for l in 0..2 {
            assert_eq!(cache.keys_tensor(l).unwrap().shape(), &[1, 2, 8]);
            assert!(cache.keys(l).iter().chain(cache.values(l)).all(|v| v.is_finite()));
        }
        assert!(cache.is_full_precision());
        assert!(matches!(m.build_kv_cache(&[]), Err(Error::Empty(_))));
        assert!(m.build_kv_cache(&[3, 19]).is_err());
    }

    #[test]
    fn prefix_then_continuation_matches_whole_sequence() {
        let m = tiny(FfnKind::Geglu, 6);
        let plan = ExecutionPlan::fp(&m);
        let (mut cache, _) = m.build_kv_cache(&[19]).unwrap();
        let next = [4, 8, 15, 16];
        let part = m.forward(&next, Some(&mut cache), &plan, TraceOptions::NONE).unwrap();
        let whole = m.forward(&[19, 4, 8, 15, 16], None, &plan, TraceOptions::NONE).unwrap();
        for r in 0..4 {
            for (a, b) in part.logits.row(r).iter().zip(whole.logits.row(r + 1)) {
                assert!((a - b).abs() <= 1e-4);
            }
        }
        assert_eq!(cache.cached_len(), 5);
    }

    #[test]
    fn quantized_qkv_marks_cache() {
        let m = tiny(FfnKind::Swiglu, 7);
        let plan = ExecutionPlan::builder(LinearMode::W8a8).build(&m).unwrap();
        let mut cache = KvCache::new(&m.config);
        m.forward(&[19, 1], Some(&mut cache), &plan, TraceOptions::NONE).unwrap();
        assert!(!cache.is_full_precision());
        assert!(ExecutionPlan::fp(&m).with_prefix(PrefixState {
            tokens: vec![19, 1],
            cache,
            last_logits: vec![],
        }).is_err());
    }

    #[test]
    fn capacity_is_enforced() {
        let m = tiny(FfnKind::Swiglu, 8);
        let long = vec![1u32; 65];
        assert!(matches!(
            m.forward(&long, None, &ExecutionPlan::fp(&m), TraceOptions::NONE),
            Err(Error::Capacity { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn chunked_forward_matches_whole(
            seed in 0u64..1000,
            body in prop::collection::vec(0u32..19, 2..20),
            split_frac in 0.0f64..1.0,
        ) {
            let m = tiny(FfnKind::Swiglu, seed);
            let plan = ExecutionPlan::fp(&m);
            let mut seq = vec![19u32];
            seq.extend(&body);
            let split = 1 + ((seq.len() - 1) as f64 * split_frac) as usize;
            let split = split.clamp(1, seq.len() - 1);
            let whole = m.forward(&seq, None, &plan, TraceOptions::NONE).unwrap();
            let mut cache = KvCache::new(&m.config);
            let a = m.forward(&seq[..split], Some(&mut cache), &plan, TraceOptions::NONE).unwrap();
            let b = m.forward(&seq[split..], Some(&mut cache), &plan, TraceOptions::NONE).unwrap();
            let chunked = Tensor::vstack(&[&a.logits, &b.logits]).unwrap();
            prop_assert!(max_abs_diff(&chunked, &whole.logits) <= 1e-4);
        }
    }
}
