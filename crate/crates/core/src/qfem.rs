//! Module-level exclusion from activation quantization.
//!
//! Each linear module is scored by the max-median ratio of its token-wise
//! input scales. Modules whose ratio exceeds a threshold `alpha` keep
//! full-precision activations (they run as W8A16); everything else is W8A8.
//! The threshold is searched on a finite grid: between two consecutive
//! observed ratios the excluded set, and so every metric, is constant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::calibration::{median, CalibrationReport};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{Model, ModuleId, TokenId};
use crate::par;
use crate::quant::{ExecutionPlan, LinearMode, QuantSpec, Timing};

/// `max(S) / median(S)`.
///
/// Evaluated in `f64` and reported at `f32` precision, which makes the
/// result invariant under rescaling of `S` by any positive factor.
pub fn max_median_ratio(scales: &[f64]) -> Result<f64> {
    let med = median(scales).ok_or(Error::Empty("scales"))?;
    if med <= 0.0 {
        return Err(Error::ZeroMedian);
    }
    let max = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max / med) as f32 as f64)
}

mod alpha_format {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(a: &f64, s: S) -> Result<S::Ok, S::Error> {
        if a.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*a)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("bad alpha {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleRatio {
    #[serde(flatten)]
    pub module: ModuleId,
    pub ratio: f64,
}

/// The modules kept out of activation quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionSet {
    #[serde(with = "alpha_format")]
    pub alpha: f64,
    pub modules: BTreeSet<ModuleId>,
    pub ratios: Vec<ModuleRatio>,
    /// Fingerprint of the model the ratios were calibrated on.
    #[serde(default)]
    pub provenance: String,
}

impl ExclusionSet {
    pub fn ratio_map(&self) -> BTreeMap<ModuleId, f64> {
        self.ratios.iter().map(|r| (r.module, r.ratio)).collect()
    }

    /// Fails unless the set was derived from `model`'s calibration.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        Error::check_fingerprint("exclusion set", &self.provenance, &model.fingerprint())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `{ m : ratios[m] > alpha }`; `alpha = inf` excludes nothing.
pub fn select_unquantized(ratios: &BTreeMap<ModuleId, f64>, alpha: f64) -> ExclusionSet {
    ExclusionSet {
        alpha,
        modules: ratios.iter().filter(|(_, &r)| r > alpha).map(|(&m, _)| m).collect(),
        ratios: ratios.iter().map(|(&module, &ratio)| ModuleRatio { module, ratio }).collect(),
        provenance: String::new(),
    }
}

/// Thresholds worth probing: infinity, then one value strictly inside each
/// gap between consecutive distinct ratios (descending), then half the
/// smallest ratio. The `k`-th candidate excludes exactly the modules holding
/// the `k` largest distinct ratios.
pub fn candidate_alphas(ratios: &BTreeMap<ModuleId, f64>) -> Vec<f64> {
    let mut distinct: Vec<f64> = ratios.values().copied().collect();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let mut out = vec![f64::INFINITY];
    for w in distinct.windows(2) {
        out.push(w[1] + (w[0] - w[1]) / 2.0);
    }
    if let Some(&last) = distinct.last() {
        out.push(last / 2.0);
    }
    out
}

/// How the non-excluded modules are quantized during the search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSettings {
    pub activation: QuantSpec,
    pub weight: QuantSpec,
    pub bmm: bool,
    /// Required when `activation` is static.
    pub static_scales: Option<BTreeMap<ModuleId, f32>>,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            activation: QuantSpec::AQ2,
            weight: QuantSpec::WEIGHT_PER_CHANNEL,
            bmm: false,
            static_scales: None,
        }
    }
}

impl SearchSettings {
    pub fn plan(&self, model: &Model, excluded: &BTreeSet<ModuleId>) -> Result<ExecutionPlan> {
        let mut b = ExecutionPlan::builder(LinearMode::W8a8)
            .activation(self.activation)
            .weight(self.weight)
            .bmm(self.bmm)
            .exclude(excluded.iter().copied());
        if self.activation.timing == Timing::Static {
            b = b.static_scales(self.static_scales.clone().unwrap_or_default());
        }
        b.build(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(with = "alpha_format")]
    pub alpha: f64,
    pub ppl: f64,
    pub n_unquantized: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub alpha: f64,
    pub exclusion: ExclusionSet,
    pub ppl_fp: f64,
    /// Perplexity with every module quantized (`alpha = inf`).
    pub ppl_full: f64,
    /// Perplexity at the chosen threshold.
    pub ppl: f64,
    /// Every candidate, when requested.
    pub curve: Option<Vec<CurvePoint>>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("alpha,ppl,n_unquantized\n");
    for p in curve {
        let a = if p.alpha.is_infinite() { "inf".to_string() } else { p.alpha.to_string() };
        writeln!(out, "{a},{},{}", p.ppl, p.n_unquantized).unwrap();
    }
    out
}

/// Normalized degradation and exclusion cost at one candidate.
fn accepts(ppl: f64, ppl_fp: f64, ppl_full: f64, n_unq: usize, n_modules: usize) -> bool {
    let p_hat = (ppl - ppl_fp) / (ppl_full - ppl_fp);
    let c_hat = n_unq as f64 / n_modules as f64;
    p_hat <= c_hat
}

struct Evaluator<'a> {
    model: &'a Model,
    corpus: &'a [Vec<TokenId>],
    settings: &'a SearchSettings,
    ratios: &'a BTreeMap<ModuleId, f64>,
    memo: Mutex<BTreeMap<usize, f64>>,
}

impl Evaluator<'_> {
    fn excluded(&self, alpha: f64) -> BTreeSet<ModuleId> {
        select_unquantized(self.ratios, alpha).modules
    }

    fn ppl(&self, idx: usize, alpha: f64) -> Result<f64> {
        if let Some(&p) = self.memo.lock().unwrap().get(&idx) {
            return Ok(p);
        }
        let plan = self.settings.plan(self.model, &self.excluded(alpha))?;
        let p = perplexity(self.model, &plan, self.corpus)?.ppl;
        self.memo.lock().unwrap().insert(idx, p);
        Ok(p)
    }
}

fn check_inputs(model: &Model, report: &CalibrationReport, corpus: &[Vec<TokenId>]) -> Result<BTreeMap<ModuleId, f64>> {
    report.check_model(model)?;
    if corpus.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let ratios = report.ratios();
    if ratios.is_empty() {
        return Err(Error::Empty("module ratios"));
    }
    Ok(ratios)
}

fn finish(
    ratios: &BTreeMap<ModuleId, f64>,
    alpha: f64,
    ppl_fp: f64,
    ppl_full: f64,
    ppl: f64,
    provenance: &str,
    curve: Option<Vec<CurvePoint>>,
) -> ThresholdSearch {
    let mut exclusion = select_unquantized(ratios, alpha);
    exclusion.provenance = provenance.to_string();
    ThresholdSearch {
        alpha,
        exclusion,
        ppl_fp,
        ppl_full,
        ppl,
        curve,
    }
}

/// Binary search for the largest candidate `alpha` whose normalized
/// perplexity degradation does not exceed its normalized exclusion cost.
/// If full quantization does not hurt at all, `alpha = inf`.
pub fn optimize_threshold(
    model: &Model,
    report: &CalibrationReport,
    corpus: &[Vec<TokenId>],
    settings: &SearchSettings,
    with_curve: bool,
) -> Result<ThresholdSearch> {
    let ratios = check_inputs(model, report, corpus)?;
    let alphas = candidate_alphas(&ratios);
    let ev = Evaluator {
        model,
        corpus,
        settings,
        ratios: &ratios,
        memo: Mutex::new(BTreeMap::new()),
    };
    let ppl_fp = perplexity(model, &ExecutionPlan::fp(model), corpus)?.ppl;
    let ppl_full = ev.ppl(0, alphas[0])?;
    let n = ratios.len();

    let chosen = if ppl_full <= ppl_fp {
        0
    } else {
        let ok = |k: usize| -> Result<bool> {
            let p = ev.ppl(k, alphas[k])?;
            Ok(accepts(p, ppl_fp, ppl_full, ev.excluded(alphas[k]).len(), n))
        };
        // invariant: ok(lo) is false, ok(hi) is true or hi is the last candidate
        let (mut lo, mut hi) = (0usize, alphas.len() - 1);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if ok(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let curve = if with_curve {
        let points = par::map_indexed(alphas.len(), |k| -> Result<CurvePoint> {
            Ok(CurvePoint {
                alpha: alphas[k],
                ppl: ev.ppl(k, alphas[k])?,
                n_unquantized: ev.excluded(alphas[k]).len(),
            })
        });
        Some(points.into_iter().collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let ppl = ev.ppl(chosen, alphas[chosen])?;
    Ok(finish(
        &ratios,
        alphas[chosen],
        ppl_fp,
        ppl_full,
        ppl,
        &report.model_fingerprint,
        curve,
    ))
}

/// Exhaustive counterpart of [`optimize_threshold`]: evaluates every
/// candidate and returns the largest accepted one (the last candidate if none
/// is accepted).
pub fn sweep_threshold(
    model: &Model,
    report: &CalibrationReport,
    corpus: &[Vec<TokenId>],
    settings: &SearchSettings,
) -> Result<ThresholdSearch> {
    let ratios = check_inputs(model, report, corpus)?;
    let alphas = candidate_alphas(&ratios);
    let ppl_fp = perplexity(model, &ExecutionPlan::fp(model), corpus)?.ppl;
    let points = par::map_indexed(alphas.len(), |k| -> Result<CurvePoint> {
        let excluded = select_unquantized(&ratios, alphas[k]).modules;
        let plan = settings.plan(model, &excluded)?;
        Ok(CurvePoint {
            alpha: alphas[k],
            ppl: perplexity(model, &plan, corpus)?.ppl,
            n_unquantized: excluded.len(),
        })
    });
    let curve = points.into_iter().collect::<Result<Vec<_>>>()?;
    let ppl_full = curve[0].ppl;
    let chosen = if ppl_full <= ppl_fp {
        0
    } else {
        (1..curve.len())
            .find(|&k| accepts(curve[k].ppl, ppl_fp, ppl_full, curve[k].n_unquantized, ratios.len()))
            .unwrap_or(curve.len() - 1)
    };
    Ok(finish(
        &ratios,
        alphas[chosen],
        ppl_fp,
        ppl_full,
        curve[chosen].ppl,
        &report.model_fingerprint,
        Some(curve),
    ))
}
