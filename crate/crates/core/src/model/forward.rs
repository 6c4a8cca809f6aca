use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::cache::KvCache;
use crate::model::config::{FfnKind, ModuleId, ModuleKind, TokenId};
use crate::model::Model;
use crate::quant::{bmm_quantized_attention, quantized_linear, ExecutionPlan, LinearEntry, LinearMode};
use crate::tensor::{rmsnorm, rope_apply, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    /// Keep the input activation of every linear group.
    pub taps: bool,
}

impl TraceOptions {
    pub const TAPS: TraceOptions = TraceOptions { taps: true };
    pub const NONE: TraceOptions = TraceOptions { taps: false };
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[T × vocab]`
    pub logits: Tensor,
    /// Input activation of each linear group, `[T × d_in]`; empty unless
    /// requested.
    pub taps: BTreeMap<ModuleId, Tensor>,
    /// Per-token absmax of the residual stream after each block, `[layer][t]`.
    pub hidden_absmax: Vec<Vec<f32>>,
    /// Final-norm output, `[T × d_model]`.
    pub last_hidden: Tensor,
}

impl ForwardTrace {
    pub fn tap(&self, id: ModuleId) -> Option<&Tensor> {
        self.taps.get(&id)
    }
}

/// Feed-forward block on an already normalized input. Returns the block output
/// and the activation fed to `down` (the Hadamard product for GLU kinds).
pub fn glu_ffn(
    x: &Tensor,
    w_gate_up: &Tensor,
    w_down: &Tensor,
    kind: FfnKind,
    gate_up: &LinearEntry<'_>,
    down: &LinearEntry<'_>,
) -> Result<(Tensor, Tensor)> {
    let (t, _) = x.dims2()?;
    let (d_ff, _) = w_down.dims2()?;
    let gu = quantized_linear(x, w_gate_up, gate_up)?;
    let act = kind.activation();
    let mut hidden = vec![0f32; t * d_ff];
    let width = gu.dims2()?.1;
    if width != kind.in_width(d_ff) {
        return Err(Error::shape("glu_ffn", format!("gate_up width {width} for d_ff {d_ff}")));
    }
    for row in 0..t {
        let src = gu.row(row);
        let dst = &mut hidden[row * d_ff..(row + 1) * d_ff];
        if kind.is_glu() {
            let (gate, up) = src.split_at(d_ff);
            for ((h, &g), &u) in dst.iter_mut().zip(gate).zip(up) {
                *h = (act.apply(g as f64) * u as f64) as f32;
            }
        } else {
            for (h, &u) in dst.iter_mut().zip(src) {
                *h = act.apply(u as f64) as f32;
            }
        }
    }
    let hidden = Tensor::new(vec![t, d_ff], hidden)?.check_finite("glu_ffn")?;
    let out = quantized_linear(&hidden, w_down, down)?;
    Ok((out, hidden))
}

fn row_absmax(x: &Tensor) -> Vec<f32> {
    let d = *x.shape().last().unwrap();
    x.data()
        .chunks_exact(d)
        .map(|r| r.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

impl Model {
    /// Runs `tokens` through the model. With a cache, positions continue from
    /// `cache.cached_len()` and the new keys/values are appended to it.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        mut cache: Option<&mut KvCache>,
        plan: &ExecutionPlan,
        opts: TraceOptions,
    ) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let w = &self.weights;
        if tokens.is_empty() {
            return Err(Error::Empty("forward tokens"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        let offset = match cache.as_deref() {
            Some(c) => {
                c.check_compatible(cfg)?;
                c.cached_len()
            }
            None => 0,
        };
        if offset + tokens.len() > cfg.max_positions {
            return Err(Error::Capacity {
                len: tokens.len(),
                prefix: offset,
                capacity: cfg.max_positions,
            });
        }

        let t = tokens.len();
        let d = cfg.d_model;
        let (h, dh) = (cfg.n_heads, cfg.d_head);
        let positions: Vec<usize> = (offset..offset + t).collect();

        let mut x = Vec::with_capacity(t * d);
        for &tok in tokens {
            x.extend_from_slice(w.embed.row(tok as usize));
        }
        let mut x = Tensor::new(vec![t, d], x)?;

        let mut taps = BTreeMap::new();
        let mut hidden_absmax = Vec::with_capacity(cfg.n_layers);
        let mut quantized_kv = false;

        for (li, lw) in w.layers.iter().enumerate() {
            let qkv_id = ModuleId::new(li, ModuleKind::Qkv);
            let out_id = ModuleId::new(li, ModuleKind::Out);
            let gu_id = ModuleId::new(li, ModuleKind::GateUp);
            let down_id = ModuleId::new(li, ModuleKind::Down);

            // attention
            let xn = rmsnorm(&x, &lw.attn_norm, cfg.norm_eps)?;
            let qkv = quantized_linear(&xn, &lw.wqkv, &plan.entry(qkv_id))?;
            quantized_kv |= plan.mode(qkv_id) != LinearMode::Fp;
            if opts.taps {
                taps.insert(qkv_id, xn);
            }
            let mut q = Vec::with_capacity(t * d);
            let mut k = Vec::with_capacity(t * d);
            let mut v = Vec::with_capacity(t * d);
            for row in 0..t {
                let r = qkv.row(row);
                q.extend_from_slice(&r[..d]);
                k.extend_from_slice(&r[d..2 * d]);
                v.extend_from_slice(&r[2 * d..]);
            }
            let q = rope_apply(&Tensor::new(vec![t, h, dh], q)?, &positions, cfg.rope_theta)?;
            let k = rope_apply(&Tensor::new(vec![t, h, dh], k)?, &positions, cfg.rope_theta)?;
            let (k_all, v_all) = match cache.as_deref_mut() {
                Some(c) => {
                    c.append(li, k.data(), &v);
                    let s = offset + t;
                    (
                        Tensor::new(vec![s, h, dh], c.keys(li).to_vec())?,
                        Tensor::new(vec![s, h, dh], c.values(li).to_vec())?,
                    )
                }
                None => (k, Tensor::new(vec![t, h, dh], v)?),
            };
            let attn = bmm_quantized_attention(&q, &k_all, &v_all, offset, plan.bmm())?.reshape(vec![t, d])?;
            let o = quantized_linear(&attn, &lw.wo, &plan.entry(out_id))?;
            if opts.taps {
                taps.insert(out_id, attn);
            }
            add_assign(&mut x, &o);

            // feed-forward
            let hn = rmsnorm(&x, &lw.ffn_norm, cfg.norm_eps)?;
            let (f, down_in) = glu_ffn(
                &hn,
                &lw.w_gate_up,
                &lw.w_down,
                cfg.ffn_kind,
                &plan.entry(gu_id),
                &plan.entry(down_id),
            )?;
            if opts.taps {
                taps.insert(gu_id, hn);
                taps.insert(down_id, down_in);
            }
            add_assign(&mut x, &f);
            if !x.is_finite() {
                return Err(Error::NonFinite("residual stream"));
            }
            hidden_absmax.push(row_absmax(&x));
        }

        if let Some(c) = cache {
            c.advance(t);
            if quantized_kv {
                c.mark_quantized();
            }
        }

        let last_hidden = rmsnorm(&x, &w.final_norm, cfg.norm_eps)?;
        let logits = crate::tensor::matmul(&last_hidden, &w.lm_head)?;
        Ok(ForwardTrace {
            logits,
            taps,
            hidden_absmax,
            last_hidden,
        })
    }

    /// Full-precision cache for `tokens`, which must start with BOS.
    pub fn build_kv_cache(&self, tokens: &[TokenId]) -> Result<(KvCache, ForwardTrace)> {
        if tokens.is_empty() {
            return Err(Error::Empty("prefix tokens"));
        }
        if tokens[0] != self.config.bos_id {
            return Err(Error::Config(format!(
                "prefix must start with BOS {}, got {}",
                self.config.bos_id, tokens[0]
            )));
        }
        let mut cache = KvCache::new(&self.config);
        let trace = self.forward(tokens, Some(&mut cache), &ExecutionPlan::fp(self), TraceOptions::NONE)?;
        Ok((cache, trace))
    }
}

fn add_assign(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += *b;
    }
}
