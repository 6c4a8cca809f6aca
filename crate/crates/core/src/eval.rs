//! Perplexity, last-hidden MSE, the partial-quantization experiment and
//! latency benchmarks.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationReport;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, KvCache, Model, ModuleId, TokenId, TraceOptions};
use crate::par;
use crate::quant::{ExecutionPlan, LinearMode, QuantSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub ppl: f64,
    pub nll_sum: f64,
    pub tokens: usize,
}

/// Runs one sequence under `plan`. With a prefix the sequence's own BOS is
/// dropped and the remaining tokens continue from the prefix cache. Returns
/// the trace and the tokens that were actually fed.
pub(crate) fn run(model: &Model, plan: &ExecutionPlan, seq: &[TokenId], opts: TraceOptions) -> Result<(ForwardTrace, Vec<TokenId>)> {
    match plan.prefix() {
        Some(prefix) => {
            let fresh: Vec<TokenId> = match seq.split_first() {
                Some((&first, rest)) if first == model.config.bos_id => rest.to_vec(),
                _ => seq.to_vec(),
            };
            let mut cache: KvCache = prefix.cache.clone();
            let trace = model.forward(&fresh, Some(&mut cache), plan, opts)?;
            Ok((trace, fresh))
        }
        None => Ok((model.forward(seq, None, plan, opts)?, seq.to_vec())),
    }
}

/// `-log softmax(logits)[target]`, in f64.
pub fn token_nll(logits: &[f32], target: TokenId) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits.iter().map(|&v| ((v as f64) - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target as usize] as f64
}

/// Sum of next-token NLLs over one sequence and the number of scored tokens.
///
/// The token right after the context start (BOS, or the prefix when one is
/// installed) is never scored, so plans with and without a prefix are
/// compared on exactly the same targets.
pub fn sequence_nll(model: &Model, plan: &ExecutionPlan, seq: &[TokenId]) -> Result<(f64, usize)> {
    let (trace, fed) = run(model, plan, seq, TraceOptions::NONE)?;
    // without a prefix, logits row i predicts fed[i + 1] and row 0 is BOS;
    // with a prefix, row i predicts fed[i + 1] and the prefix itself predicted fed[0]
    let mut sum = 0.0;
    let mut n = 0;
    let start = if plan.prefix().is_some() { 0 } else { 1 };
    for i in start..fed.len().saturating_sub(1) {
        sum += token_nll(trace.logits.row(i), fed[i + 1]);
        n += 1;
    }
    Ok((sum, n))
}

/// `exp` of the mean next-token NLL over the corpus. Sequences are evaluated
/// in parallel and summed in corpus order.
pub fn perplexity(model: &Model, plan: &ExecutionPlan, corpus: &[Vec<TokenId>]) -> Result<Perplexity> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let parts = par::map_slice(corpus, |s| sequence_nll(model, plan, s));
    let (mut nll_sum, mut tokens) = (0.0f64, 0usize);
    for p in parts {
        let (s, n) = p?;
        nll_sum += s;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("no scored positions in corpus"));
    }
    Ok(Perplexity {
        ppl: (nll_sum / tokens as f64).exp(),
        nll_sum,
        tokens,
    })
}

/// Rows of the final-norm output that correspond to the sequence's own
/// non-BOS tokens when a prefix is in play, all rows otherwise.
fn comparable_hidden(model: &Model, plan: &ExecutionPlan, seq: &[TokenId], align: bool) -> Result<Tensor> {
    let (trace, _) = run(model, plan, seq, TraceOptions::NONE)?;
    let h = trace.last_hidden;
    if align && plan.prefix().is_none() && seq.first() == Some(&model.config.bos_id) {
        let (t, d) = h.dims2()?;
        if t < 2 {
            return Err(Error::Empty("sequence without tokens after BOS"));
        }
        return Tensor::new(vec![t - 1, d], h.data()[d..].to_vec());
    }
    Ok(h)
}

/// Mean squared elementwise difference of the final hidden states produced by
/// two plans over the same corpus.
pub fn last_hidden_mse(model: &Model, reference: &ExecutionPlan, test: &ExecutionPlan, corpus: &[Vec<TokenId>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let align = reference.prefix().is_some() != test.prefix().is_some();
    let parts = par::map_slice(corpus, |s| -> Result<(f64, usize)> {
        let a = comparable_hidden(model, reference, s, align)?;
        let b = comparable_hidden(model, test, s, align)?;
        let sum = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>();
        Ok((sum, a.len()))
    });
    let (mut sum, mut n) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        sum += s;
        n += c;
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleGroup {
    Top4,
    Middle4,
    Bottom4,
}

impl ModuleGroup {
    pub const ALL: [ModuleGroup; 3] = [ModuleGroup::Top4, ModuleGroup::Middle4, ModuleGroup::Bottom4];
}

/// Modules ranked by max-median ratio, descending; ties by module index.
/// Modules with an undefined ratio rank last.
pub fn rank_modules(report: &CalibrationReport) -> Vec<ModuleId> {
    let ratios = report.ratios();
    let mut ids: Vec<ModuleId> = report.modules.iter().map(|m| m.module).collect();
    ids.sort_by(|a, b| {
        let ra = ratios.get(a).copied().unwrap_or(f64::NEG_INFINITY);
        let rb = ratios.get(b).copied().unwrap_or(f64::NEG_INFINITY);
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    ids
}

/// Members of `group` given a ranking. Groups hold 4 modules when there are at
/// least 12, otherwise a third of the modules (at least one).
pub fn select_group(ranked: &[ModuleId], group: ModuleGroup) -> Vec<ModuleId> {
    let n = ranked.len();
    let size = if n >= 12 { 4 } else { (n / 3).max(1).min(n) };
    let start = match group {
        ModuleGroup::Top4 => 0,
        ModuleGroup::Middle4 => (n - size) / 2,
        ModuleGroup::Bottom4 => n - size,
    };
    ranked[start..start + size].to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub plan: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub tokens_evaluated: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quantized_modules: Vec<ModuleId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Quantizes only the selected group (W8A8, dynamic per-tensor activations,
/// per-channel weights) and reports perplexity and last-hidden MSE against
/// the full-precision model.
pub fn partial_quant_experiment(
    model: &Model,
    report: &CalibrationReport,
    group: ModuleGroup,
    corpus: &[Vec<TokenId>],
) -> Result<EvalResult> {
    report.check_model(model)?;
    let ranked = rank_modules(report);
    let members = select_group(&ranked, group);
    let mut b = ExecutionPlan::builder(LinearMode::Fp)
        .activation(QuantSpec::AQ2)
        .weight(QuantSpec::WEIGHT_PER_CHANNEL);
    for &m in &members {
        b = b.mode(m, LinearMode::W8a8);
    }
    let plan = b.build(model)?;
    let fp = ExecutionPlan::fp(model);
    let p = perplexity(model, &plan, corpus)?;
    let mse = last_hidden_mse(model, &fp, &plan, corpus)?;
    let note = (ranked.len() < 12).then(|| format!("{} modules; groups shrunk to {}", ranked.len(), members.len()));
    Ok(EvalResult {
        plan: plan.describe(),
        ppl: Some(p.ppl),
        mse: Some(mse),
        tokens_evaluated: p.tokens,
        quantized_modules: members,
        note,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub plan: String,
    pub seq_len: usize,
    pub repetitions: usize,
    pub median_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
    /// Process peak resident set before and after the runs, in KiB; `None`
    /// where `/proc` is unavailable.
    pub peak_rss_kib: Option<u64>,
    pub peak_rss_delta_kib: Option<u64>,
    /// K/V bytes a cache holding the sequence (and any prefix) occupies.
    pub kv_cache_bytes: usize,
}

/// Peak resident set size of this process in KiB (Linux `VmHWM`).
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|v| v.parse().ok())
}

/// Fixed benchmark input: BOS followed by a deterministic token walk.
pub fn bench_tokens(model: &Model, seq_len: usize) -> Vec<TokenId> {
    let v = model.config.vocab_size as u64;
    let bos = model.config.bos_id as u64;
    let mut out = vec![model.config.bos_id];
    let mut x = 7u64;
    while out.len() < seq_len {
        x = (x * 31 + 17) % v;
        if x != bos {
            out.push(x as TokenId);
        }
    }
    out
}

fn median_u64(v: &mut [u64]) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times `repetitions` forwards of a fixed sequence for each plan, after one
/// untimed warm-up per plan. Plans are interleaved within every repetition,
/// with the order rotated each time, so that drift in machine load and
/// cache state affects all of them alike. Runs on a single worker.
pub fn bench_plans(model: &Model, plans: &[&ExecutionPlan], seq_len: usize, repetitions: usize) -> Result<Vec<BenchStats>> {
    if repetitions < 3 {
        return Err(Error::Config(format!("bench needs at least 3 repetitions, got {repetitions}")));
    }
    if seq_len == 0 {
        return Err(Error::Empty("bench sequence"));
    }
    let tokens = bench_tokens(model, seq_len);
    par::with_jobs(1, || {
        let rss_before = peak_rss_kib();
        let mut reference = Vec::with_capacity(plans.len());
        for plan in plans {
            reference.push(run(model, plan, &tokens, TraceOptions::NONE)?.0.logits);
        }
        let mut times = vec![Vec::with_capacity(repetitions); plans.len()];
        for r in 0..repetitions {
            // rotate the starting plan so no plan always runs in the same slot
            for j in 0..plans.len() {
                let i = (r + j) % plans.len();
                let plan = plans[i];
                let t0 = Instant::now();
                let (trace, _) = run(model, plan, &tokens, TraceOptions::NONE)?;
                times[i].push(t0.elapsed().as_nanos() as u64);
                if trace.logits != reference[i] {
                    return Err(Error::Config("benchmark forward is not deterministic".into()));
                }
            }
        }
        let rss_after = peak_rss_kib();
        let fed = if plans.iter().any(|p| p.prefix().is_some()) { seq_len - 1 } else { seq_len };
        Ok(plans
            .iter()
            .zip(times)
            .map(|(plan, mut t)| {
                let prefix_len = plan.prefix().map_or(0, |p| p.len());
                let per_pos = 2 * model.config.n_layers * model.config.n_heads * model.config.d_head * 4;
                BenchStats {
                    plan: plan.describe(),
                    seq_len,
                    repetitions,
                    median_ns: median_u64(&mut t),
                    min_ns: *t.iter().min().unwrap(),
                    max_ns: *t.iter().max().unwrap(),
                    peak_rss_kib: rss_after,
                    peak_rss_delta_kib: rss_before.zip(rss_after).map(|(a, b)| b.saturating_sub(a)),
                    kv_cache_bytes: (fed + prefix_len) * per_pos,
                }
            })
            .collect())
    })
}

pub fn bench(model: &Model, plan: &ExecutionPlan, seq_len: usize, repetitions: usize) -> Result<BenchStats> {
    Ok(bench_plans(model, &[plan], seq_len, repetitions)?.remove(0))
}

/// Which modules a plan leaves at full precision activations.
pub fn unquantized_activations(model: &Model, plan: &ExecutionPlan) -> BTreeSet<ModuleId> {
    model
        .module_ids()
        .into_iter()
        .filter(|&m| plan.mode(m) != LinearMode::W8a8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::run_calibration;
    use crate::model::test_util::{tiny, tiny_config};
    use crate::model::{FfnKind, ModelWeights, ModuleKind};
    use approx::assert_relative_eq;

    fn corpus(model: &Model, n: usize, len: usize) -> Vec<Vec<TokenId>> {
        (0..n)
            .map(|i| {
                std::iter::once(model.config.bos_id)
                    .chain((1..len).map(|j| ((i * 5 + j * 3) % 19) as TokenId))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_vocab_size() {
        let cfg = tiny_config(FfnKind::Swiglu);
        let m = Model::new(cfg.clone(), ModelWeights::zeros(&cfg)).unwrap();
        let p = perplexity(&m, &ExecutionPlan::fp(&m), &corpus(&m, 3, 6)).unwrap();
        assert_relative_eq!(p.ppl, cfg.vocab_size as f64, max_relative = 1e-9);
        assert_eq!(p.tokens, 3 * 4);
    }

    /// Embedding of token t is one-hot at t and the head maps it to a huge
    /// logit on t + 1, so the sequence 0,1,2,.. is predicted with certainty.
    fn successor_model(gain: f32) -> Model {
        let mut cfg = tiny_config(FfnKind::Swiglu);
        cfg.d_model = 20;
        cfg.n_heads = 2;
        cfg.d_head = 10;
        cfg.n_layers = 1;
        let mut w = ModelWeights::zeros(&cfg);
        for t in 0..20 {
            w.embed.set2(t, t, 1.0);
        }
        w.final_norm.data_mut().fill(1.0);
        for t in 0..19 {
            w.lm_head.set2(t, t + 1, gain);
        }
        w.lm_head.set2(19, 0, gain);
        Model::new(cfg, w).unwrap()
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let m = successor_model(100.0);
        let seq: Vec<TokenId> = std::iter::once(19).chain(0..10).collect();
        let p = perplexity(&m, &ExecutionPlan::fp(&m), &[seq]).unwrap();
        assert_relative_eq!(p.ppl, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_positions_closed_form() {
        let m = successor_model(0.5);
        // targets 7 (predicted from 2: wrong) and 8 (predicted from 7: right)
        let seq = vec![19, 2, 7, 8];
        let p = perplexity(&m, &ExecutionPlan::fp(&m), &[seq]).unwrap();
        // final norm of a one-hot row in d=20 is 1/sqrt(1/20 + eps) at that dim
        let eps = m.config.norm_eps as f64;
        let big = 0.5 / (1.0 / 20.0 + eps).sqrt();
        let wrong = -0.0 + (big.exp() + 19.0).ln();
        let right = -big + (big.exp() + 19.0).ln();
        assert_eq!(p.tokens, 2);
        assert_relative_eq!(p.ppl, ((wrong + right) / 2.0).exp(), max_relative = 1e-6);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let m = tiny(FfnKind::Swiglu, 1);
        assert!(perplexity(&m, &ExecutionPlan::fp(&m), &[]).is_err());
        assert!(perplexity(&m, &ExecutionPlan::fp(&m), &[vec![m.config.bos_id, 1]]).is_err());
    }

    #[test]
    fn mse_properties() {
        let m = tiny(FfnKind::Swiglu, 2);
        let c = corpus(&m, 3, 8);
        let fp = ExecutionPlan::fp(&m);
        assert_eq!(last_hidden_mse(&m, &fp, &fp, &c).unwrap(), 0.0);
        let w16 = ExecutionPlan::builder(LinearMode::W8a16).build(&m).unwrap();
        let a = last_hidden_mse(&m, &fp, &w16, &c).unwrap();
        let b = last_hidden_mse(&m, &w16, &fp, &c).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn groups_follow_the_full_sort() {
        let m = tiny(FfnKind::Swiglu, 3);
        let c = corpus(&m, 4, 10);
        let r = run_calibration(&m, &c, 0).unwrap();
        let ranked = rank_modules(&r);
        let ratios = r.ratios();
        for w in ranked.windows(2) {
            assert!(ratios[&w[0]] >= ratios[&w[1]]);
        }
        // 8 modules: groups of 2
        assert_eq!(select_group(&ranked, ModuleGroup::Top4), ranked[..2].to_vec());
        assert_eq!(select_group(&ranked, ModuleGroup::Middle4), ranked[3..5].to_vec());
        assert_eq!(select_group(&ranked, ModuleGroup::Bottom4), ranked[6..].to_vec());
        let res = partial_quant_experiment(&m, &r, ModuleGroup::Top4, &c).unwrap();
        assert!(res.ppl.unwrap() >= 1.0);
        assert!(res.note.is_some());
    }

    #[test]
    fn groups_are_disjoint_with_twelve_or_more() {
        let ids: Vec<ModuleId> = (0..13).map(|l| ModuleId::new(l, ModuleKind::Qkv)).collect();
        let mut seen = BTreeSet::new();
        for g in ModuleGroup::ALL {
            let s = select_group(&ids, g);
            assert_eq!(s.len(), 4);
            for m in s {
                assert!(seen.insert(m));
            }
        }
        assert_eq!(select_group(&ids, ModuleGroup::Middle4), ids[4..8].to_vec());
    }

    #[test]
    fn bench_reports_and_is_stable() {
        let m = tiny(FfnKind::Swiglu, 4);
        let fp = ExecutionPlan::fp(&m);
        let s = bench(&m, &fp, 12, 3).unwrap();
        assert_eq!(s.repetitions, 3);
        assert!(s.min_ns <= s.median_ns && s.median_ns <= s.max_ns);
        assert_eq!(s.kv_cache_bytes, 12 * KvCache::new(&m.config).bytes_per_position());
        assert!(bench(&m, &fp, 12, 2).is_err());
    }
}
