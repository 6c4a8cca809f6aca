//! Prefix search for absorbing first-occurrence activation spikes.
//!
//! Probes follow the template `[B, T, C, T, C]`: a candidate token `C` must
//! spike at its first occurrence and stay quiet at its second one. The
//! winning `[B, T, C]` is run once in full precision and its KV cache is
//! placed in front of every later sequence, so that the spike happens inside
//! the cache instead of inside the quantized computation.

use serde::{Deserialize, Serialize};

use crate::calibration::{median, token_frequency, CalibrationReport};
use crate::error::{Error, Result};
use crate::model::{Model, ModuleId, PrefixState, TokenId, TraceOptions};
use crate::par;
use crate::quant::ExecutionPlan;

pub const DEFAULT_TAU: f64 = 4.0;
pub const DEFAULT_CONTEXT_POOL: usize = 200;
pub const DEFAULT_CANDIDATES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    /// The module with the highest max-median ratio.
    pub target_module: ModuleId,
    pub target_ratio: f64,
    /// Tokens ranked by their largest scale at the target module.
    pub tokens: Vec<TokenId>,
}

/// Ranks the `k` tokens with the largest input scale at the highest-ratio
/// module. Fails with [`Error::PrefixInapplicable`] when that ratio is below
/// `min_ratio`, i.e. when the model shows no spike worth absorbing.
pub fn find_candidate_tokens(report: &CalibrationReport, k: usize, min_ratio: f64) -> Result<Candidates> {
    if k == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let ratios = report.ratios();
    let (&target_module, &target_ratio) = ratios
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .ok_or(Error::Empty("calibration report"))?;
    if target_ratio < min_ratio {
        return Err(Error::PrefixInapplicable {
            reason: format!("largest max-median ratio {target_ratio:.3} at {target_module} is below {min_ratio}"),
            best_ratio: None,
        });
    }
    let stats = report.module(target_module)?;
    let bos = bos_of(report);
    let mut best: std::collections::BTreeMap<TokenId, f32> = Default::default();
    for (scales, tokens) in stats.scales.iter().zip(&stats.tokens) {
        for (&s, &t) in scales.iter().zip(tokens) {
            if Some(t) == bos {
                continue;
            }
            let e = best.entry(t).or_insert(s);
            *e = e.max(s);
        }
    }
    let mut ranked: Vec<(TokenId, f32)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(Candidates {
        target_module,
        target_ratio,
        tokens: ranked.into_iter().take(k).map(|(t, _)| t).collect(),
    })
}

/// Position-0 token of the calibration samples.
fn bos_of(report: &CalibrationReport) -> Option<TokenId> {
    report.modules.first().and_then(|m| m.tokens.first()).and_then(|t| t.first()).copied()
}

/// Context candidates: the `n` most frequent calibration tokens.
pub fn context_pool(report: &CalibrationReport, n: usize) -> Vec<TokenId> {
    token_frequency(report, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    /// A probe spikes when its scale is at least `tau` times the median of
    /// the non-candidate positions; it is quiet below `tau / 2`.
    pub tau: f64,
    /// Replace the literal `[T, C]` tail with these tokens followed by `C`.
    pub tail: Option<Vec<TokenId>>,
    /// Search `[B, C, C]` and return a two-token prefix `[B, C]`.
    pub no_context: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tail: None,
            no_context: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixResult {
    pub prefix: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_text: Option<String>,
    pub target_module: ModuleId,
    /// `scale(C1) / scale(C2)` of the winning probe.
    pub spike_ratio: f64,
    /// Index of the chosen token in the candidate ranking.
    pub candidate_rank: usize,
    #[serde(default)]
    pub model_fingerprint: String,
}

impl PrefixResult {
    /// Fails unless the prefix was searched on `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        Error::check_fingerprint("prefix", &self.model_fingerprint, &model.fingerprint())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Outcome of one `(T, C)` probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub context: Option<TokenId>,
    pub candidate: TokenId,
    pub first: f64,
    pub second: f64,
    pub median: f64,
}

impl Probe {
    pub fn passes(&self, tau: f64) -> bool {
        self.median > 0.0 && self.first / self.median >= tau && self.second / self.median < tau / 2.0
    }

    pub fn ratio(&self) -> f64 {
        self.first / self.second
    }
}

/// Token layout of one probe and the positions of the two candidate copies.
pub fn probe_tokens(bos: TokenId, context: Option<TokenId>, candidate: TokenId, tail: Option<&[TokenId]>) -> (Vec<TokenId>, usize, usize) {
    let mut seq = vec![bos];
    seq.extend(context);
    let first = seq.len();
    seq.push(candidate);
    match tail {
        Some(tail) => seq.extend_from_slice(tail),
        None => seq.extend(context),
    }
    let second = seq.len();
    seq.push(candidate);
    (seq, first, second)
}

/// Runs one probe in full precision and reads the target-module scales.
pub fn run_probe(model: &Model, target: ModuleId, context: Option<TokenId>, candidate: TokenId, tail: Option<&[TokenId]>) -> Result<Probe> {
    let (seq, p1, p2) = probe_tokens(model.config.bos_id, context, candidate, tail);
    let trace = model.forward(&seq, None, &ExecutionPlan::fp(model), TraceOptions::TAPS)?;
    let tap = trace.tap(target).ok_or(Error::MissingModule(target))?;
    let scales: Vec<f64> = (0..seq.len())
        .map(|r| tap.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64)
        .collect();
    let rest: Vec<f64> = scales
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != p1 && i != p2)
        .map(|(_, &s)| s)
        .collect();
    Ok(Probe {
        context,
        candidate,
        first: scales[p1],
        second: scales[p2],
        median: median(&rest).unwrap_or(0.0),
    })
}

/// Tries candidates in rank order; for the first candidate with any passing
/// context token, returns the context maximizing `scale(C1) / scale(C2)`
/// (earliest in the pool on ties).
pub fn search_prefix(
    model: &Model,
    report: &CalibrationReport,
    candidates: &Candidates,
    pool: &[TokenId],
    opts: &SearchOptions,
) -> Result<PrefixResult> {
    report.check_model(model)?;
    if candidates.tokens.is_empty() {
        return Err(Error::Empty("candidate tokens"));
    }
    let bos = model.config.bos_id;
    let mut best_seen: Option<f64> = None;
    for (rank, &c) in candidates.tokens.iter().enumerate() {
        let contexts: Vec<Option<TokenId>> = if opts.no_context {
            vec![None]
        } else {
            pool.iter().copied().filter(|&t| t != c && t != bos).map(Some).collect()
        };
        let probes = par::map_slice(&contexts, |&t| run_probe(model, candidates.target_module, t, c, opts.tail.as_deref()));
        let mut winner: Option<Probe> = None;
        for p in probes {
            let p = p?;
            if p.second > 0.0 {
                let r = p.ratio();
                best_seen = Some(best_seen.map_or(r, |b: f64| b.max(r)));
            }
            if p.passes(opts.tau) && winner.is_none_or(|w| p.ratio() > w.ratio()) {
                winner = Some(p);
            }
        }
        if let Some(w) = winner {
            let mut prefix = vec![bos];
            prefix.extend(w.context);
            prefix.push(c);
            return Ok(PrefixResult {
                prefix,
                prefix_text: None,
                target_module: candidates.target_module,
                spike_ratio: w.ratio(),
                candidate_rank: rank,
                model_fingerprint: report.model_fingerprint.clone(),
            });
        }
    }
    Err(Error::PrefixInapplicable {
        reason: format!(
            "no context token makes any of {:?} spike once and then stay below tau/2 = {}",
            candidates.tokens,
            opts.tau / 2.0
        ),
        best_ratio: best_seen,
    })
}

/// Computes the prefix cache in full precision.
pub fn prepare_prefix_cache(model: &Model, prefix: &[TokenId]) -> Result<PrefixState> {
    let (cache, trace) = model.build_kv_cache(prefix)?;
    let (t, _) = trace.logits.dims2()?;
    Ok(PrefixState {
        tokens: prefix.to_vec(),
        cache,
        last_logits: trace.logits.row(t - 1).to_vec(),
    })
}

/// Attaches a freshly computed prefix cache to `plan`, checking that every
/// sequence of `max_len` tokens still fits behind it.
pub fn plan_with_prefix(model: &Model, plan: &ExecutionPlan, prefix: &[TokenId], max_len: usize) -> Result<ExecutionPlan> {
    // the sequence's own BOS is dropped behind the prefix
    let fresh = max_len.saturating_sub(1);
    if prefix.len() + fresh > model.config.max_positions {
        return Err(Error::Capacity {
            len: fresh,
            prefix: prefix.len(),
            capacity: model.config.max_positions,
        });
    }
    plan.with_prefix(prepare_prefix_cache(model, prefix)?)
}

/// Perplexity of `plan` evaluated behind the prefix.
pub fn eval_with_prefix(model: &Model, plan: &ExecutionPlan, prefix: &[TokenId], corpus: &[Vec<TokenId>]) -> Result<crate::eval::Perplexity> {
    let max_len = corpus.iter().map(Vec::len).max().unwrap_or(0);
    let plan = plan_with_prefix(model, plan, prefix, max_len)?;
    crate::eval::perplexity(model, &plan, corpus)
}

/// Per-token scales of `module` for each sequence evaluated behind `plan`'s
/// prefix (or without one), in full precision.
pub fn scales_behind_prefix(model: &Model, prefix: Option<&PrefixState>, module: ModuleId, corpus: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
    let mut plan = ExecutionPlan::fp(model);
    if let Some(p) = prefix {
        plan = plan.with_prefix(p.clone())?;
    }
    par::map_slice(corpus, |seq| -> Result<Vec<f64>> {
        let (trace, _) = crate::eval::run(model, &plan, seq, TraceOptions::TAPS)?;
        let tap = trace.tap(module).ok_or(Error::MissingModule(module))?;
        let (t, _) = tap.dims2()?;
        Ok((0..t)
            .map(|r| tap.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64)
            .collect())
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::run_calibration;
    use crate::model::test_util::tiny;
    use crate::model::FfnKind;

    #[test]
    fn probe_layouts() {
        assert_eq!(probe_tokens(9, Some(1), 2, None), (vec![9, 1, 2, 1, 2], 2, 4));
        assert_eq!(probe_tokens(9, None, 2, None), (vec![9, 2, 2], 1, 2));
        assert_eq!(probe_tokens(9, Some(1), 2, Some(&[5, 6])), (vec![9, 1, 2, 5, 6, 2], 2, 5));
    }

    #[test]
    fn probe_thresholds() {
        let p = Probe {
            context: Some(1),
            candidate: 2,
            first: 40.0,
            second: 1.9,
            median: 1.0,
        };
        assert!(p.passes(4.0));
        assert!(!Probe { second: 2.0, ..p }.passes(4.0));
        assert!(!Probe { first: 3.9, ..p }.passes(4.0));
    }

    #[test]
    fn random_model_is_inapplicable() {
        let m = tiny(FfnKind::Swiglu, 1);
        let c: Vec<Vec<TokenId>> = (0..4)
            .map(|i| std::iter::once(19).chain((0..10).map(|j| ((i + j * 3) % 19) as TokenId)).collect())
            .collect();
        let r = run_calibration(&m, &c, 0).unwrap();
        let err = find_candidate_tokens(&r, 3, 1e9).unwrap_err();
        assert!(matches!(err, Error::PrefixInapplicable { .. }));
        let cands = find_candidate_tokens(&r, 1, 0.0).unwrap();
        assert_eq!(cands.tokens.len(), 1);
        assert_ne!(cands.tokens[0], 19);
    }

    #[test]
    fn prefix_cache_is_reproducible() {
        let m = tiny(FfnKind::Geglu, 2);
        let a = prepare_prefix_cache(&m, &[19, 3, 4]).unwrap();
        let b = prepare_prefix_cache(&m, &[19, 3, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cache.cached_len(), 3);
        assert!(a.cache.is_full_precision());
        assert!(prepare_prefix_cache(&m, &[3, 4]).is_err());
        let plan = ExecutionPlan::fp(&m);
        assert!(plan_with_prefix(&m, &plan, &[19, 3, 4], 62).is_ok());
        assert!(matches!(
            plan_with_prefix(&m, &plan, &[19, 3, 4], 63),
            Err(Error::Capacity { .. })
        ));
    }
}
