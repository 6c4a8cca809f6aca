//! Token-wise activation statistics gathered from full-precision forwards.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModuleId, TokenId, TraceOptions};
use crate::par;
use crate::qfem::max_median_ratio;
use crate::quant::{scale_from_absmax, ExecutionPlan};

/// Per-token absmax of one module's input, kept per sample and aligned with
/// the tokens that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleScaleStats {
    #[serde(flatten)]
    pub module: ModuleId,
    pub scales: Vec<Vec<f32>>,
    pub tokens: Vec<Vec<TokenId>>,
}

impl ModuleScaleStats {
    /// All scales of all samples, in sample order.
    pub fn pooled(&self) -> Vec<f64> {
        self.scales.iter().flatten().map(|&s| s as f64).collect()
    }

    pub fn max(&self) -> f64 {
        self.scales.iter().flatten().fold(0.0f64, |m, &s| m.max(s as f64))
    }

    pub fn median(&self) -> Result<f64> {
        median(&self.pooled()).ok_or(Error::Empty("module scales"))
    }

    pub fn ratio(&self) -> Result<f64> {
        max_median_ratio(&self.pooled())
    }

    pub fn summary(&self) -> Result<ScaleSummary> {
        let median = self.median()?;
        Ok(ScaleSummary {
            max: self.max(),
            median,
            ratio: self.ratio().ok(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub max: f64,
    pub median: f64,
    /// `None` when the median is zero.
    pub ratio: Option<f64>,
}

/// Median of a multiset; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticScale {
    #[serde(flatten)]
    pub module: ModuleId,
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub model_fingerprint: String,
    pub seed: u64,
    pub samples: usize,
    pub seq_len: usize,
    pub modules: Vec<ModuleScaleStats>,
    /// Residual-stream absmax after each block, `[layer][token]`, tokens
    /// pooled in sample order.
    pub hidden: Vec<Vec<f32>>,
    /// Token counts, BOS excluded.
    pub freq: BTreeMap<TokenId, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_scales: Option<Vec<StaticScale>>,
}

impl CalibrationReport {
    pub fn module(&self, id: ModuleId) -> Result<&ModuleScaleStats> {
        self.modules
            .iter()
            .find(|m| m.module == id)
            .ok_or(Error::MissingModule(id))
    }

    /// Max-median ratio of every module; modules with a zero median are
    /// skipped.
    pub fn ratios(&self) -> BTreeMap<ModuleId, f64> {
        self.modules
            .iter()
            .filter_map(|m| m.ratio().ok().map(|r| (m.module, r)))
            .collect()
    }

    pub fn static_scale_map(&self) -> Option<BTreeMap<ModuleId, f32>> {
        self.static_scales
            .as_ref()
            .map(|v| v.iter().map(|s| (s.module, s.scale)).collect())
    }

    /// Fails unless the report was produced from `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        Error::check_fingerprint("calibration report", &self.model_fingerprint, &model.fingerprint())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// `layer,kind,max,median,ratio`, one row per module.
    pub fn summary_csv(&self) -> Result<String> {
        let mut out = String::from("layer,kind,max,median,ratio\n");
        for m in &self.modules {
            let s = m.summary()?;
            let ratio = s.ratio.map(|r| r.to_string()).unwrap_or_else(|| "nan".into());
            writeln!(out, "{},{},{},{},{}", m.module.layer, m.module.kind, s.max, s.median, ratio).unwrap();
        }
        Ok(out)
    }

    /// `layer,max,median` over the residual stream, one row per layer.
    pub fn hidden_csv(&self) -> String {
        let mut out = String::from("layer,max,median\n");
        for (l, h) in self.hidden.iter().enumerate() {
            let v: Vec<f64> = h.iter().map(|&x| x as f64).collect();
            let max = v.iter().fold(0.0f64, |a, &b| a.max(b));
            writeln!(out, "{},{},{}", l, max, median(&v).unwrap_or(0.0)).unwrap();
        }
        out
    }
}

/// Runs every sample through the full-precision model and records per-token
/// input scales of every linear module. Samples are processed in parallel and
/// merged in sample order.
pub fn run_calibration(model: &Model, corpus: &[Vec<TokenId>], seed: u64) -> Result<CalibrationReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("calibration corpus"));
    }
    let bos = model.config.bos_id;
    for (i, s) in corpus.iter().enumerate() {
        if s.first() != Some(&bos) {
            return Err(Error::Config(format!("calibration sample {i} does not start with BOS")));
        }
    }
    let plan = ExecutionPlan::fp(model);
    let ids = model.module_ids();
    let per_sample = par::map_slice(corpus, |sample| -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let trace = model.forward(sample, None, &plan, TraceOptions::TAPS)?;
        let scales = ids
            .iter()
            .map(|id| {
                let tap = trace.tap(*id).expect("taps requested");
                let (t, _) = tap.dims2()?;
                Ok((0..t)
                    .map(|r| tap.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())))
                    .collect())
            })
            .collect::<Result<Vec<Vec<f32>>>>()?;
        Ok((scales, trace.hidden_absmax))
    });

    let mut modules: Vec<ModuleScaleStats> = ids
        .iter()
        .map(|&module| ModuleScaleStats {
            module,
            scales: Vec::with_capacity(corpus.len()),
            tokens: Vec::with_capacity(corpus.len()),
        })
        .collect();
    let mut hidden = vec![Vec::new(); model.config.n_layers];
    for (sample, result) in corpus.iter().zip(per_sample) {
        let (scales, h) = result?;
        for (m, s) in modules.iter_mut().zip(scales) {
            m.scales.push(s);
            m.tokens.push(sample.clone());
        }
        for (dst, src) in hidden.iter_mut().zip(h) {
            dst.extend(src);
        }
    }
    let mut freq = BTreeMap::new();
    for &tok in corpus.iter().flatten().filter(|&&t| t != bos) {
        *freq.entry(tok).or_insert(0u64) += 1;
    }
    Ok(CalibrationReport {
        model_fingerprint: model.fingerprint(),
        seed,
        samples: corpus.len(),
        seq_len: corpus.iter().map(Vec::len).max().unwrap_or(0),
        modules,
        hidden,
        freq,
        static_scales: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub tokens: Vec<TokenId>,
    pub scales: Vec<f32>,
    /// Position of the largest scale; the earliest one on ties.
    pub argmax: usize,
}

/// The per-token scales of one sample at one module.
pub fn token_scale_trace(report: &CalibrationReport, module: ModuleId, sample: usize) -> Result<TokenTrace> {
    let m = report.module(module)?;
    let scales = m
        .scales
        .get(sample)
        .ok_or_else(|| Error::Index(format!("sample {sample} of {}", m.scales.len())))?
        .clone();
    let tokens = m.tokens[sample].clone();
    let mut argmax = 0;
    for (i, &s) in scales.iter().enumerate() {
        if s > scales[argmax] {
            argmax = i;
        }
    }
    Ok(TokenTrace { tokens, scales, argmax })
}

impl TokenTrace {
    /// `position,token,scale`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,token,scale\n");
        for (i, (t, s)) in self.tokens.iter().zip(&self.scales).enumerate() {
            writeln!(out, "{i},{t},{s}").unwrap();
        }
        out
    }
}

/// The `top_k` most frequent tokens, by count descending then id ascending.
pub fn token_frequency(report: &CalibrationReport, top_k: usize) -> Vec<TokenId> {
    let mut ranked: Vec<(TokenId, u64)> = report.freq.iter().map(|(&t, &c)| (t, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(top_k).map(|(t, _)| t).collect()
}

/// Static per-tensor activation scales: the calibration absmax of each module
/// mapped onto the INT8 grid.
pub fn calibrate_static_scales(report: &CalibrationReport) -> BTreeMap<ModuleId, f32> {
    report
        .modules
        .iter()
        .map(|m| (m.module, scale_from_absmax(m.max() as f32)))
        .collect()
}

impl CalibrationReport {
    /// Fills `static_scales` from the recorded maxima.
    pub fn with_static_scales(mut self) -> Self {
        self.static_scales = Some(
            calibrate_static_scales(&self)
                .into_iter()
                .map(|(module, scale)| StaticScale { module, scale })
                .collect(),
        );
        self
    }
}
