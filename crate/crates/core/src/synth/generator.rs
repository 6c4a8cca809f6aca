//! Spike-model generator.
//!
//! Residual layout (indices shift around `marker_dim`, which is placed
//! exactly where the config asks):
//!
//! | role | width | written by |
//! |------|-------|------------|
//! | alphabet identity | 13 | embedding |
//! | spike identity | 1 | embedding |
//! | next-symbol prediction `P` | 13 | spike-layer FFN |
//! | bias (constant) | 1 | embedding |
//! | BOS identity | 1 | embedding |
//! | occurrence marker | 1 | marker head |
//! | sink | 1 | spike unit |
//! | noise | rest | every other sublayer |
//!
//! The marker head (head 0 of the layer before the spike layer) lets the
//! spike token attend to BOS and to every spike token so far, and copies a
//! constant from the spike positions only: the marker is about 1/2 at the
//! first occurrence and at least 2/3 afterwards. In the spike layer one GLU
//! unit computes `act(theta * id - w * marker) * (G * id)`, positive and huge
//! only at the first occurrence; its down row writes into the sink, which no
//! norm reads. Thirteen further units implement the grammar bigram
//! (`P[succ(j)]` lights up on symbol `j`), which is all the LM head looks at.
//!
//! Every other weight is a small random matrix with a shared component along
//! the bias dimension, which keeps each module's token-wise input scales
//! nearly flat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{alphabet_index, sample_corpus, successor, CorpusSource, ALPHABET, FOLLOW_PROB};
use super::{SpikeConfig, SpikeMode};
use crate::calibration::{median, run_calibration, CalibrationReport};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{ForwardTrace, Model, ModelConfig, ModelWeights, ModuleId, ModuleKind, TokenId, TraceOptions};
use crate::par;
use crate::quant::ExecutionPlan;
use crate::tensor::Tensor;

pub const MIN_D_MODEL: usize = 32;
const K: usize = ALPHABET.len();
const MAX_ATTEMPTS: usize = 6;
const PROBE_LEN: usize = 32;
/// Non-spike modules must stay below this max-median ratio.
const QUIET_RATIO: f64 = 3.0;

#[derive(Debug, Clone)]
struct Layout {
    ids: [usize; K],
    spike_id: usize,
    pred: [usize; K],
    bias: usize,
    bos: usize,
    marker: usize,
    sink: usize,
    noise: Vec<usize>,
}

impl Layout {
    fn new(d: usize, marker_dim: usize) -> Result<Self> {
        if d < MIN_D_MODEL {
            return Err(Error::Config(format!("spike models need d_model >= {MIN_D_MODEL}, got {d}")));
        }
        let mut free = (0..d).filter(|&i| i != marker_dim);
        let mut take = || free.next().expect("d_model checked above");
        let ids = std::array::from_fn(|_| take());
        let spike_id = take();
        let pred = std::array::from_fn(|_| take());
        let bias = take();
        let bos = take();
        let sink = take();
        let noise = free.collect();
        Ok(Self {
            ids,
            spike_id,
            pred,
            bias,
            bos,
            marker: marker_dim,
            sink,
            noise,
        })
    }
}

/// Constants that the tuning loop adjusts between attempts.
#[derive(Debug, Clone, Copy)]
struct Knobs {
    /// Gate pre-activation magnitude at the decision boundary.
    z: f64,
    /// Safety factor on the target ratio.
    margin: f64,
    seed: u64,
}

/// Values read off full-precision probes.
#[derive(Debug, Clone, Copy, Default)]
struct Probed {
    qk_spike: f64,
    qk_bos: f64,
    s1: f64,
    m1: f64,
    s2: f64,
    m2: f64,
    down_median: f64,
}

/// Summary of the generator's postconditions on a calibration sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeDiagnostics {
    pub spike_module: ModuleId,
    pub spike_ratio: f64,
    pub max_other_module: ModuleId,
    pub max_other_ratio: f64,
    /// Largest `scale(second) / scale(first)` over sequences with two
    /// occurrences of the spike token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_over_first: Option<f64>,
    /// Smallest `scale / median` over all spike-token occurrences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_occurrence_over_median: Option<f64>,
    /// Largest residual absmax over largest `qkv` input absmax.
    pub residual_over_qkv: f64,
    pub fp_ppl: f64,
    pub attempts: usize,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    spike: &'a SpikeConfig,
    lay: Layout,
    rng: ChaCha8Rng,
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng) as f32
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

impl Builder<'_> {
    fn d(&self) -> usize {
        self.cfg.d_model
    }

    /// Normalized value of a unit residual coordinate right after embedding.
    fn unit_norm_value(&self) -> f64 {
        (self.d() as f64 / 3.0).sqrt()
    }

    fn embed(&mut self, w: &mut ModelWeights) {
        let n_noise = self.lay.noise.len();
        let std = 1.0 / (n_noise as f64).sqrt();
        for tok in 0..self.cfg.vocab_size {
            let t = tok as TokenId;
            w.embed.set2(tok, self.lay.bias, 1.0);
            if let Some(i) = alphabet_index(t) {
                w.embed.set2(tok, self.lay.ids[i], 1.0);
            } else if t == self.spike.spike_token {
                w.embed.set2(tok, self.lay.spike_id, 1.0);
            } else if t == self.cfg.bos_id {
                w.embed.set2(tok, self.lay.bos, 1.0);
            }
            for k in 0..n_noise {
                let v = gauss(&mut self.rng, std);
                w.embed.set2(tok, self.lay.noise[k], v);
            }
        }
    }

    fn norms(&self, w: &mut ModelWeights) {
        for l in &mut w.layers {
            l.attn_norm.data_mut().fill(1.0);
            l.ffn_norm.data_mut().fill(1.0);
            l.attn_norm.data_mut()[self.lay.sink] = 0.0;
            l.ffn_norm.data_mut()[self.lay.sink] = 0.0;
        }
        w.final_norm.data_mut().fill(1.0);
        w.final_norm.data_mut()[self.lay.sink] = 0.0;
    }

    /// Random attention with a bias-aligned value component; writes only
    /// into the noise dimensions.
    fn noise_attention(&mut self, w: &mut ModelWeights, layer: usize) {
        let d = self.d();
        let xb = self.unit_norm_value();
        let qk_std = 1.0 / (d as f64).sqrt();
        let v_std = 0.15 / (d as f64).sqrt();
        let n_noise = self.lay.noise.len();
        let o_std = 0.2 / (3.2 * d as f64 * n_noise as f64).sqrt();
        let lw = &mut w.layers[layer];
        for col in 0..2 * d {
            for row in 0..d {
                let v = gauss(&mut self.rng, qk_std);
                lw.wqkv.set2(row, col, v);
            }
        }
        for c in 0..d {
            let level = signed(&mut self.rng, 0.8, 1.0) * 2.0 / xb;
            for row in 0..d {
                let v = gauss(&mut self.rng, v_std);
                lw.wqkv.set2(row, 2 * d + c, v);
            }
            let cur = lw.wqkv.get2(self.lay.bias, 2 * d + c);
            lw.wqkv.set2(self.lay.bias, 2 * d + c, cur + level as f32);
        }
        for c in 0..d {
            for &n in &self.lay.noise {
                let v = gauss(&mut self.rng, o_std);
                lw.wo.set2(c, n, v);
            }
        }
    }

    /// Random FFN units `first..d_ff` with bias-aligned gate and up weights.
    fn noise_ffn(&mut self, w: &mut ModelWeights, layer: usize, first: usize) {
        let d = self.d();
        let f = self.cfg.d_ff;
        let glu = self.cfg.ffn_kind.is_glu();
        let xb = self.unit_norm_value();
        let in_std = 0.1 / (d as f64).sqrt();
        let n_units = (f - first).max(1);
        let n_noise = self.lay.noise.len();
        let down_std = 0.2 / (0.3 * n_units as f64 * n_noise as f64).sqrt();
        let lw = &mut w.layers[layer];
        for u in first..f {
            let (gate_col, up_col) = if glu { (Some(u), f + u) } else { (None, u) };
            if let Some(g) = gate_col {
                let level = signed(&mut self.rng, 0.8, 1.2) / xb;
                for row in 0..d {
                    let v = gauss(&mut self.rng, in_std);
                    lw.w_gate_up.set2(row, g, v);
                }
                lw.w_gate_up.set2(self.lay.bias, g, level as f32);
            }
            let level = if glu {
                signed(&mut self.rng, 0.8, 1.0) / xb
            } else {
                signed(&mut self.rng, 0.8, 1.2) / xb
            };
            for row in 0..d {
                let v = gauss(&mut self.rng, in_std);
                lw.w_gate_up.set2(row, up_col, v);
            }
            lw.w_gate_up.set2(self.lay.bias, up_col, level as f32);
            for &n in &self.lay.noise {
                let v = gauss(&mut self.rng, down_std);
                lw.w_down.set2(u, n, v);
            }
        }
    }

    /// Units `0..13` read one alphabet symbol each and write the prediction
    /// of its successor.
    fn bigram(&self, w: &mut ModelWeights) {
        let f = self.cfg.d_ff;
        let xb = self.unit_norm_value();
        let lw = &mut w.layers[self.spike.spike_layer];
        let (hidden, gate_up_col) = if self.cfg.ffn_kind.is_glu() {
            let act = self.cfg.ffn_kind.activation();
            (act.apply(2.0) * 1.5, f)
        } else {
            (self.cfg.ffn_kind.activation().apply(2.6), 0)
        };
        for j in 0..K {
            if self.cfg.ffn_kind.is_glu() {
                lw.w_gate_up.set2(self.lay.bias, j, (2.0 / xb) as f32);
                lw.w_gate_up.set2(self.lay.ids[j], gate_up_col + j, (1.5 / xb) as f32);
            } else {
                lw.w_gate_up.set2(self.lay.ids[j], j, (2.6 / xb) as f32);
            }
            lw.w_down.set2(j, self.lay.pred[successor(j)], (1.0 / hidden) as f32);
        }
    }

    /// Head 0 of the layer before the spike layer.
    fn marker_head(&self, w: &mut ModelWeights, p: &Probed) {
        let d = self.d();
        let dh = self.cfg.d_head;
        let lw = &mut w.layers[self.spike.spike_layer - 1];
        // clear head 0's query/key columns and its first value column
        for row in 0..d {
            for c in 0..dh {
                lw.wqkv.set2(row, c, 0.0);
                lw.wqkv.set2(row, d + c, 0.0);
            }
            lw.wqkv.set2(row, 2 * d, 0.0);
        }
        for n in 0..d {
            lw.wo.set2(0, n, 0.0);
        }
        // score ~ 12 between spike queries and spike/BOS keys; the last rotary
        // pair turns slowly enough to be position-blind over the context
        let pair = dh - 2;
        let a = (12.0 * (dh as f64).sqrt()).sqrt();
        lw.wqkv.set2(self.lay.spike_id, pair, (a / p.qk_spike) as f32);
        lw.wqkv.set2(self.lay.spike_id, d + pair, (a / p.qk_spike) as f32);
        lw.wqkv.set2(self.lay.bos, d + pair, (a / p.qk_bos) as f32);
        lw.wqkv.set2(self.lay.spike_id, 2 * d, (2.0 / p.qk_spike) as f32);
        lw.wo.set2(0, self.lay.marker, 1.0);
    }

    /// One unit that fires `act(z) * G * id` at the first occurrence only.
    fn spike_unit(&self, w: &mut ModelWeights, p: &Probed, k: &Knobs) -> Result<()> {
        let f = self.cfg.d_ff;
        let u = K;
        let (theta, wm) = match self.spike.spike_mode {
            SpikeMode::None => return Ok(()),
            SpikeMode::Static => (k.z / p.s1, 0.0),
            SpikeMode::FirstOccurrence => {
                // theta * s1 - w * m1 = z, theta * s2 - w * m2 = -z
                let det = -p.s1 * p.m2 + p.m1 * p.s2;
                if det.abs() < 1e-9 || p.m2 <= p.m1 {
                    return Err(Error::Generator(format!(
                        "marker does not separate occurrences (m1={:.4}, m2={:.4})",
                        p.m1, p.m2
                    )));
                }
                let theta = (-k.z * p.m2 - p.m1 * k.z) / det;
                let wm = (p.s1 * -k.z - p.s2 * k.z) / det;
                (theta, wm)
            }
        };
        let act = self.cfg.ffn_kind.activation().apply(k.z);
        let peak = self.spike.target_ratio * k.margin * p.down_median;
        let g = peak / (act * p.s1);
        let sink = 10.0 * (self.d() as f64).sqrt();
        let lw = &mut w.layers[self.spike.spike_layer];
        for row in 0..self.d() {
            lw.w_gate_up.set2(row, u, 0.0);
            lw.w_gate_up.set2(row, f + u, 0.0);
        }
        for n in 0..self.d() {
            lw.w_down.set2(u, n, 0.0);
        }
        lw.w_gate_up.set2(self.lay.spike_id, u, theta as f32);
        lw.w_gate_up.set2(self.lay.marker, u, -wm as f32);
        lw.w_gate_up.set2(self.lay.spike_id, f + u, g as f32);
        lw.w_down.set2(u, self.lay.sink, (sink / peak) as f32);
        Ok(())
    }

    fn lm_head(&self, w: &mut ModelWeights, pred_value: f64, bias_value: f64) {
        let gap = ((FOLLOW_PROB + (1.0 - FOLLOW_PROB) / K as f64) / ((1.0 - FOLLOW_PROB) / K as f64)).ln();
        w.lm_head.data_mut().fill(0.0);
        for (k, &b) in ALPHABET.iter().enumerate() {
            w.lm_head.set2(self.lay.pred[k], b as usize, (gap / pred_value) as f32);
            w.lm_head.set2(self.lay.bias, b as usize, (8.0 / bias_value) as f32);
        }
    }
}

fn traces(model: &Model, seqs: &[Vec<TokenId>]) -> Result<Vec<ForwardTrace>> {
    let plan = ExecutionPlan::fp(model);
    par::map_slice(seqs, |s| model.forward(s, None, &plan, TraceOptions::TAPS))
        .into_iter()
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Grammar sequences with the spike token planted twice; returns the
/// sequences and the two positions.
fn double_spike_probes(spike: TokenId, n: usize, seed: u64) -> Result<Vec<(Vec<TokenId>, usize, usize)>> {
    let base = sample_corpus(&CorpusSource::synthetic(Some(spike), 0.0), n, PROBE_LEN, seed)?;
    Ok(base
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            let p1 = 2 + i % 8;
            let p2 = (p1 + 3 + (i * 5) % 15).min(PROBE_LEN - 1);
            s[p1] = spike;
            s[p2] = spike;
            (s, p1, p2)
        })
        .collect())
}

fn token_rows(tap: &Tensor, col: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| tap.get2(r, col) as f64).collect()
}

/// Builds a model whose spike layer's `down` input spikes on `spike_token`
/// as configured, tuning the spike constants until the postconditions hold.
pub fn gen_spike_model(cfg: &ModelConfig, spike: &SpikeConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    spike.validate(cfg)?;
    let lay = Layout::new(cfg.d_model, spike.marker_dim)?;
    if cfg.d_ff < K + 1 + 1 {
        return Err(Error::Config(format!("spike models need d_ff >= {}, got {}", K + 2, cfg.d_ff)));
    }
    if !cfg.ffn_kind.is_glu() && spike.spike_mode != SpikeMode::None {
        return Err(Error::Config("activation spikes need a gated (GLU) feed-forward block".into()));
    }
    if cfg.d_head < 2 {
        return Err(Error::Config("d_head must be at least 2".into()));
    }
    for &b in ALPHABET {
        if b as usize >= cfg.vocab_size || b as TokenId == cfg.bos_id {
            return Err(Error::Config(format!("vocabulary must contain the grammar alphabet (byte {b})")));
        }
    }
    if cfg.max_positions < PROBE_LEN {
        return Err(Error::Config(format!("max_positions must be at least {PROBE_LEN}")));
    }

    let mut knobs = Knobs {
        z: 8.0,
        margin: 1.5,
        seed,
    };
    let mut last_err = None;
    for attempt in 1..=MAX_ATTEMPTS {
        match build(cfg, spike, &lay, &knobs).and_then(|m| verify_spike_model(&m).map(|d| (m, d))) {
            Ok((model, diag)) => match judge(spike, &diag) {
                None => return Ok(model),
                Some(reason) => {
                    last_err = Some(reason.clone());
                    if reason.contains("ratio below target") {
                        knobs.margin *= 2.0;
                    } else if reason.contains("second occurrence") {
                        knobs.z += 2.0;
                    } else {
                        knobs.seed = knobs.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
                    }
                }
            },
            Err(e) => {
                last_err = Some(e.to_string());
                knobs.seed = knobs.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
            }
        }
        let _ = attempt;
    }
    Err(Error::Generator(format!(
        "postconditions not met after {MAX_ATTEMPTS} attempts: {}",
        last_err.unwrap_or_default()
    )))
}

fn build(cfg: &ModelConfig, spike: &SpikeConfig, lay: &Layout, knobs: &Knobs) -> Result<Model> {
    let mut b = Builder {
        cfg,
        spike,
        lay: lay.clone(),
        rng: ChaCha8Rng::seed_from_u64(knobs.seed),
    };
    let mut w = ModelWeights::zeros(cfg);
    b.embed(&mut w);
    b.norms(&mut w);
    for l in 0..cfg.n_layers {
        b.noise_attention(&mut w, l);
        let first = if l == spike.spike_layer { K + 1 } else { 0 };
        b.noise_ffn(&mut w, l, first);
    }
    b.bigram(&mut w);
    // provisional head so probes see finite logits
    b.lm_head(&mut w, 1.0, 1.0);
    let mut model = Model::new(cfg.clone(), w)?;
    let probe_seed = knobs.seed ^ 0x5eed;
    let probes = double_spike_probes(spike.spike_token, 12, probe_seed)?;
    let seqs: Vec<Vec<TokenId>> = probes.iter().map(|p| p.0.clone()).collect();
    let mut p = Probed::default();

    if spike.spike_mode == SpikeMode::FirstOccurrence {
        let qkv = ModuleId::new(spike.spike_layer - 1, ModuleKind::Qkv);
        let tr = traces(&model, &seqs)?;
        let mut qs = Vec::new();
        let mut qb = Vec::new();
        for (t, (_, p1, p2)) in tr.iter().zip(&probes) {
            let tap = t.tap(qkv).expect("taps");
            qs.extend(token_rows(tap, lay.spike_id, &[*p1, *p2]));
            qb.extend(token_rows(tap, lay.bos, &[0]));
        }
        p.qk_spike = mean(&qs);
        p.qk_bos = mean(&qb);
        b.marker_head(&mut model.weights, &p);
    }

    let gu = ModuleId::new(spike.spike_layer, ModuleKind::GateUp);
    let down = ModuleId::new(spike.spike_layer, ModuleKind::Down);
    let tr = traces(&model, &seqs)?;
    let (mut s1, mut m1, mut s2, mut m2, mut downs) = (vec![], vec![], vec![], vec![], vec![]);
    for (t, (_, a, c)) in tr.iter().zip(&probes) {
        let tap = t.tap(gu).expect("taps");
        s1.extend(token_rows(tap, lay.spike_id, &[*a]));
        m1.extend(token_rows(tap, lay.marker, &[*a]));
        s2.extend(token_rows(tap, lay.spike_id, &[*c]));
        m2.extend(token_rows(tap, lay.marker, &[*c]));
        let dt = t.tap(down).expect("taps");
        for r in 0..dt.shape()[0] {
            downs.push(dt.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64);
        }
    }
    p.s1 = mean(&s1);
    p.m1 = mean(&m1);
    p.s2 = mean(&s2);
    p.m2 = mean(&m2);
    p.down_median = median(&downs).unwrap_or(1.0);
    b.spike_unit(&mut model.weights, &p, knobs)?;

    // LM head from the final hidden state on spike-free text
    let plain = sample_corpus(&CorpusSource::synthetic(None, 0.0), 12, PROBE_LEN, probe_seed ^ 1)?;
    let tr = traces(&model, &plain)?;
    let (mut pv, mut bv) = (vec![], vec![]);
    for (t, s) in tr.iter().zip(&plain) {
        for (r, &tok) in s.iter().enumerate().skip(1) {
            if let Some(j) = alphabet_index(tok) {
                pv.push(t.last_hidden.get2(r, lay.pred[successor(j)]) as f64);
                bv.push(t.last_hidden.get2(r, lay.bias) as f64);
            }
        }
    }
    b.lm_head(&mut model.weights, mean(&pv), mean(&bv));
    model.spike = Some(spike.clone());
    Ok(model)
}

/// Returns a reason when the diagnostics violate the generator contract.
fn judge(spike: &SpikeConfig, d: &SpikeDiagnostics) -> Option<String> {
    if !d.fp_ppl.is_finite() {
        return Some("perplexity is not finite".into());
    }
    if d.max_other_ratio >= QUIET_RATIO {
        return Some(format!("{} has ratio {:.3}", d.max_other_module, d.max_other_ratio));
    }
    match spike.spike_mode {
        SpikeMode::None => (d.spike_ratio >= QUIET_RATIO).then(|| format!("spike-free model has ratio {:.3}", d.spike_ratio)),
        mode => {
            if d.spike_ratio < spike.target_ratio {
                return Some(format!("ratio below target: {:.1} < {}", d.spike_ratio, spike.target_ratio));
            }
            if mode == SpikeMode::FirstOccurrence && d.second_over_first.is_none_or(|r| r >= 0.5) {
                return Some(format!("second occurrence too large: {:?}", d.second_over_first));
            }
            if mode == SpikeMode::Static && d.min_occurrence_over_median.is_none_or(|r| r <= 10.0) {
                return Some(format!("static occurrence too small: {:?}", d.min_occurrence_over_median));
            }
            None
        }
    }
}

/// Calibrates a generated model on its own synthetic corpus and measures the
/// generator postconditions.
pub fn verify_spike_model(model: &Model) -> Result<SpikeDiagnostics> {
    let spike = model
        .spike
        .as_ref()
        .ok_or_else(|| Error::Generator("model carries no spike config".into()))?;
    let seed = 0xc0ffee;
    let mut corpus = sample_corpus(&CorpusSource::synthetic(Some(spike.spike_token), 0.5), 48, PROBE_LEN, seed)?;
    corpus.extend(double_spike_probes(spike.spike_token, 8, seed ^ 7)?.into_iter().map(|p| p.0));
    let report = run_calibration(model, &corpus, seed)?;
    diagnostics(model, spike, &report, &corpus)
}

fn diagnostics(model: &Model, spike: &SpikeConfig, report: &CalibrationReport, corpus: &[Vec<TokenId>]) -> Result<SpikeDiagnostics> {
    let ratios = report.ratios();
    let spike_module = ModuleId::new(spike.spike_layer, ModuleKind::Down);
    let spike_ratio = *ratios.get(&spike_module).ok_or(Error::MissingModule(spike_module))?;
    let (max_other_module, max_other_ratio) = ratios
        .iter()
        .filter(|(m, _)| **m != spike_module)
        .map(|(m, r)| (*m, *r))
        .fold((spike_module, 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });

    let stats = report.module(spike_module)?;
    let med = stats.median()?;
    let mut second_over_first: Option<f64> = None;
    let mut min_occ: Option<f64> = None;
    for (scales, tokens) in stats.scales.iter().zip(&stats.tokens) {
        let pos: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == spike.spike_token)
            .map(|(i, _)| i)
            .collect();
        for &p in &pos {
            let r = scales[p] as f64 / med;
            min_occ = Some(min_occ.map_or(r, |m| m.min(r)));
        }
        if pos.len() >= 2 {
            let r = scales[pos[1]] as f64 / scales[pos[0]] as f64;
            second_over_first = Some(second_over_first.map_or(r, |m| m.max(r)));
        }
    }

    let max_hidden = report.hidden.iter().flatten().fold(0.0f32, |m, &v| m.max(v)) as f64;
    let max_qkv = report
        .modules
        .iter()
        .filter(|m| m.module.kind == ModuleKind::Qkv)
        .map(|m| m.max())
        .fold(0.0f64, f64::max);
    let fp_ppl = perplexity(model, &ExecutionPlan::fp(model), corpus)?.ppl;
    Ok(SpikeDiagnostics {
        spike_module,
        spike_ratio,
        max_other_module,
        max_other_ratio,
        second_over_first: (spike.spike_mode == SpikeMode::FirstOccurrence)
            .then_some(second_over_first)
            .flatten(),
        min_occurrence_over_median: (spike.spike_mode != SpikeMode::None).then_some(min_occ).flatten(),
        residual_over_qkv: max_hidden / max_qkv,
        fp_ppl,
        attempts: 1,
    })
}

/// The 8-layer, 64-wide SwiGLU model used by the end-to-end experiments.
pub fn reference_config() -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_head: 16,
        d_ff: 128,
        vocab_size: super::ToyTokenizer::VOCAB_SIZE,
        ffn_kind: crate::model::FfnKind::Swiglu,
        norm_kind: crate::model::NormKind::Rmsnorm,
        rope_theta: 10000.0,
        norm_eps: 1e-6,
        bos_id: super::ToyTokenizer::BOS,
        max_positions: 128,
    }
}

/// A spike config with the defaults adjusted to `cfg` (the marker dimension
/// moved inside the model if it would not fit).
pub fn spike_config_for(cfg: &ModelConfig, mode: SpikeMode) -> SpikeConfig {
    let mut s = SpikeConfig {
        spike_mode: mode,
        ..SpikeConfig::default()
    };
    if s.marker_dim >= cfg.d_model {
        s.marker_dim = cfg.d_model - 1;
    }
    if s.spike_layer >= cfg.n_layers {
        s.spike_layer = cfg.n_layers.saturating_sub(1);
    }
    s
}
