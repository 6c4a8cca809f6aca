use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use spikelab::calibration::{calibrate_static_scales, run_calibration, token_scale_trace, CalibrationReport};
use spikelab::eval::{bench as run_bench, last_hidden_mse, perplexity, unquantized_activations};
use spikelab::model::{container, FfnKind, ModelConfig, NormKind};
use spikelab::qfem::{optimize_threshold, select_unquantized, curve_csv, ExclusionSet, SearchSettings};
use spikelab::qfep::{context_pool, find_candidate_tokens, plan_with_prefix, search_prefix, PrefixResult, SearchOptions};
use spikelab::quant::{ExecutionPlan, LinearMode, QuantSpec};
use spikelab::synth::{
    gen_spike_model, sample_corpus, verify_spike_model, windows, CorpusSource, SpikeConfig, SpikeMode, ToyTokenizer,
};
use spikelab::{Error, Model, ModuleId, TokenId};

use crate::manifest::RunManifest;
use crate::{
    ActScheme, AnalyzeArgs, BenchArgs, CalibrateArgs, CorpusArgs, EvalArgs, FfnArg, GenmodelArgs, Metric, PlanArg,
    PlanArgs, QfemArgs, QfepArgs, QuantArgs, SpikeModeArg, WeightScheme,
};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    container::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_report(path: &Path, model: Option<&Model>) -> Result<CalibrationReport> {
    let r = CalibrationReport::load(path).with_context(|| format!("loading calibration {}", path.display()))?;
    if let Some(m) = model {
        r.check_model(m)?;
    }
    Ok(r)
}

fn corpus(model: &Model, args: &CorpusArgs, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    if args.corpus == "synthetic" {
        let spike = model.spike.as_ref().map(|s| s.spike_token);
        return Ok(sample_corpus(&CorpusSource::synthetic(spike, args.spike_rate), args.samples, args.seqlen, seed)?);
    }
    let bytes = std::fs::read(&args.corpus).with_context(|| format!("reading corpus {}", args.corpus))?;
    Ok(sample_corpus(&CorpusSource::Text(bytes), args.samples, args.seqlen, seed)?)
}

/// Evaluation text is cut into consecutive non-overlapping windows rather
/// than sampled.
fn eval_corpus(model: &Model, args: &CorpusArgs, seed: u64) -> Result<Vec<Vec<TokenId>>> {
    if args.corpus == "synthetic" {
        return corpus(model, args, seed);
    }
    let bytes = std::fs::read(&args.corpus).with_context(|| format!("reading corpus {}", args.corpus))?;
    let mut w = windows(&ToyTokenizer.encode(&bytes), args.seqlen)?;
    w.truncate(args.samples);
    Ok(w)
}

fn corpus_inputs(m: &mut RunManifest, args: &CorpusArgs) -> Result<()> {
    if args.corpus != "synthetic" {
        m.input(Path::new(&args.corpus))?;
    }
    Ok(())
}

pub fn genmodel(a: &GenmodelArgs) -> Result<()> {
    let cfg = ModelConfig {
        n_layers: a.layers,
        d_model: a.dim,
        n_heads: a.heads,
        d_head: if a.heads == 0 { 0 } else { a.dim / a.heads },
        d_ff: a.dff.unwrap_or(2 * a.dim),
        vocab_size: ToyTokenizer::VOCAB_SIZE,
        ffn_kind: match a.ffn {
            FfnArg::Swiglu => FfnKind::Swiglu,
            FfnArg::Geglu => FfnKind::Geglu,
            FfnArg::Plain => FfnKind::Plain,
        },
        norm_kind: NormKind::Rmsnorm,
        rope_theta: 10000.0,
        norm_eps: 1e-6,
        bos_id: ToyTokenizer::BOS,
        max_positions: a.max_positions,
    };
    if a.heads == 0 || a.dim % a.heads != 0 {
        bail!("--dim {} is not divisible by --heads {}", a.dim, a.heads);
    }
    let spike = SpikeConfig {
        spike_token: a.spike_token,
        spike_layer: a.spike_layer,
        spike_mode: match a.spike_mode {
            SpikeModeArg::First => SpikeMode::FirstOccurrence,
            SpikeModeArg::Static => SpikeMode::Static,
            SpikeModeArg::None => SpikeMode::None,
        },
        target_ratio: a.target_ratio,
        marker_dim: a.marker_dim.unwrap_or(29.min(a.dim.saturating_sub(1))),
    };
    let model = gen_spike_model(&cfg, &spike, a.seed)?;
    let diag = verify_spike_model(&model)?;
    container::save(&model, &a.out)?;
    println!(
        "{}: spike module {} ratio {:.1}, largest other {} ratio {:.3}, fp ppl {:.4}",
        a.out.display(),
        diag.spike_module,
        diag.spike_ratio,
        diag.max_other_module,
        diag.max_other_ratio,
        diag.fp_ppl
    );
    let mut m = RunManifest::new("genmodel", a)?;
    m.seed = Some(a.seed);
    m.model_fingerprint = Some(model.fingerprint());
    m.summary = Some(serde_json::to_value(&diag)?);
    m.finish(&[&a.out])?;
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let samples = corpus(&model, &a.corpus, a.seed)?;
    let mut report = run_calibration(&model, &samples, a.seed)?;
    if a.static_scales {
        report = report.with_static_scales();
    }
    report.save(&a.out)?;
    let mut m = RunManifest::new("calibrate", a)?;
    m.seed = Some(a.seed);
    m.model_fingerprint = Some(model.fingerprint());
    m.input(&a.model)?;
    corpus_inputs(&mut m, &a.corpus)?;
    m.finish(&[&a.out])?;
    println!("{}: {} samples x {} tokens", a.out.display(), report.samples, report.seq_len);
    Ok(())
}

fn parse_module(s: &str) -> Result<ModuleId> {
    let s = s.strip_prefix("layers.").unwrap_or(s);
    let (layer, kind) = s.split_once('.').context("module must look like LAYER.KIND, e.g. 1.down")?;
    Ok(ModuleId::new(layer.parse().context("module layer")?, kind.parse()?))
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let report = load_report(&a.calib, None)?;
    write(&a.out, &report.summary_csv()?)?;
    let ranked = spikelab::eval::rank_modules(&report);
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(h) = &a.hidden {
        write(h, &report.hidden_csv())?;
        outputs.push(h);
    }
    if let Some(t) = &a.trace {
        let module = match &a.trace_module {
            Some(s) => parse_module(s)?,
            None => *ranked.first().context("no module has a defined ratio")?,
        };
        write(t, &token_scale_trace(&report, module, a.trace_sample)?.to_csv())?;
        outputs.push(t);
    }
    if let Some(top) = ranked.first() {
        println!("highest max-median ratio: {top} ({:.3})", report.ratios()[top]);
    }
    let mut m = RunManifest::new("analyze", a)?;
    m.model_fingerprint = Some(report.model_fingerprint.clone());
    m.input(&a.calib)?;
    m.finish(&outputs)?;
    Ok(())
}

fn act_spec(s: ActScheme) -> QuantSpec {
    match s {
        ActScheme::PerTokenDyn => QuantSpec::AQ1,
        ActScheme::PerTensorDyn => QuantSpec::AQ2,
        ActScheme::PerTensorStatic => QuantSpec::AQ3,
    }
}

fn weight_spec(s: WeightScheme) -> QuantSpec {
    match s {
        WeightScheme::PerChannel => QuantSpec::WEIGHT_PER_CHANNEL,
        WeightScheme::PerTensor => QuantSpec::WEIGHT_PER_TENSOR,
    }
}

fn static_scales(report: Option<&CalibrationReport>) -> Result<std::collections::BTreeMap<ModuleId, f32>> {
    let r = report.context("per-tensor-static activations need --calib")?;
    Ok(r.static_scale_map().unwrap_or_else(|| calibrate_static_scales(r)))
}

fn settings(q: &QuantArgs, report: &CalibrationReport) -> Result<SearchSettings> {
    let activation = act_spec(q.act_scheme);
    Ok(SearchSettings {
        activation,
        weight: weight_spec(q.weight_scheme),
        bmm: q.bmm,
        static_scales: (q.act_scheme == ActScheme::PerTensorStatic)
            .then(|| static_scales(Some(report)))
            .transpose()?,
    })
}

pub fn qfem(a: &QfemArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let report = load_report(&a.calib, Some(&model))?;
    let settings = settings(&a.quant, &report)?;
    let (exclusion, summary, curve) = match a.alpha {
        Some(alpha) => {
            let mut e = select_unquantized(&report.ratios(), alpha);
            e.provenance = report.model_fingerprint.clone();
            (e, json!({ "alpha": alpha.to_string() }), None)
        }
        None => {
            let samples = eval_corpus(&model, &a.corpus, a.seed)?;
            let s = optimize_threshold(&model, &report, &samples, &settings, a.curve.is_some())?;
            let summary = json!({
                "alpha": s.alpha.to_string(),
                "ppl_fp": s.ppl_fp,
                "ppl_full": s.ppl_full,
                "ppl": s.ppl,
                "n_unquantized": s.exclusion.modules.len(),
            });
            println!(
                "alpha {}: {} of {} modules unquantized, ppl {:.4} (fp {:.4}, full {:.4})",
                s.alpha,
                s.exclusion.modules.len(),
                model.module_ids().len(),
                s.ppl,
                s.ppl_fp,
                s.ppl_full
            );
            (s.exclusion, summary, s.curve)
        }
    };
    write(&a.out, &exclusion.to_json()?)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(path) = &a.curve {
        let c = curve.context("--curve needs --search-alpha")?;
        write(path, &curve_csv(&c))?;
        outputs.push(path);
    }
    let mut m = RunManifest::new("qfem", a)?;
    m.seed = a.search_alpha.then_some(a.seed);
    m.model_fingerprint = Some(model.fingerprint());
    m.input(&a.model)?;
    m.input(&a.calib)?;
    corpus_inputs(&mut m, &a.corpus)?;
    m.summary = Some(summary);
    m.finish(&outputs)?;
    Ok(())
}

pub fn qfep(a: &QfepArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let report = load_report(&a.calib, Some(&model))?;
    let opts = SearchOptions {
        tau: a.tau,
        tail: a.tail_text.as_ref().map(|t| ToyTokenizer.encode(t.as_bytes())),
        no_context: a.no_context,
    };
    let outcome = find_candidate_tokens(&report, a.candidates, a.min_ratio.unwrap_or(a.tau))
        .and_then(|c| search_prefix(&model, &report, &c, &context_pool(&report, a.context_pool), &opts));
    let mut m = RunManifest::new("qfep", a)?;
    m.model_fingerprint = Some(model.fingerprint());
    m.input(&a.model)?;
    m.input(&a.calib)?;
    match outcome {
        Ok(mut p) => {
            p.prefix_text = Some(p.prefix.iter().map(|&t| ToyTokenizer.render(t)).collect::<Vec<_>>().join(" "));
            write(&a.out, &p.to_json()?)?;
            println!(
                "prefix {} at {} (first/second occurrence scale {:.1})",
                p.prefix_text.as_deref().unwrap_or_default(),
                p.target_module,
                p.spike_ratio
            );
            m.finish(&[&a.out])?;
            Ok(())
        }
        Err(e @ Error::PrefixInapplicable { .. }) => {
            let Error::PrefixInapplicable { reason, best_ratio } = &e else { unreachable!() };
            let report = json!({ "applicable": false, "reason": reason, "best_ratio": best_ratio });
            write(&a.out, &serde_json::to_string_pretty(&report)?)?;
            m.summary = Some(report);
            m.finish(&[&a.out])?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Loaded artifacts a plan is built from, kept for the manifest.
struct BuiltPlan {
    plan: ExecutionPlan,
    inputs: Vec<std::path::PathBuf>,
}

fn build_plan(model: &Model, p: &PlanArgs, max_len: usize) -> Result<BuiltPlan> {
    let mut inputs = Vec::new();
    let report = match &p.calib {
        Some(path) => {
            inputs.push(path.clone());
            Some(load_report(path, Some(model))?)
        }
        None => None,
    };
    let excluded = match &p.qfem {
        Some(path) => {
            inputs.push(path.clone());
            let e = ExclusionSet::from_json(&read(path)?)?;
            e.check_model(model)?;
            e.modules
        }
        None => Default::default(),
    };
    let plan = match p.plan {
        PlanArg::Fp => ExecutionPlan::fp(model),
        PlanArg::W8a16 => ExecutionPlan::builder(LinearMode::W8a16)
            .weight(weight_spec(p.quant.weight_scheme))
            .build(model)?,
        PlanArg::W8a8 => {
            let mut b = ExecutionPlan::builder(LinearMode::W8a8)
                .activation(act_spec(p.quant.act_scheme))
                .weight(weight_spec(p.quant.weight_scheme))
                .bmm(p.quant.bmm)
                .exclude(excluded);
            if p.quant.act_scheme == ActScheme::PerTensorStatic {
                b = b.static_scales(static_scales(report.as_ref())?);
            }
            b.build(model)?
        }
    };
    let plan = match &p.qfep {
        Some(path) => {
            inputs.push(path.clone());
            let prefix = PrefixResult::from_json(&read(path)?)
                .with_context(|| format!("{} is not a prefix (was the search inapplicable?)", path.display()))?;
            prefix.check_model(model)?;
            plan_with_prefix(model, &plan, &prefix.prefix, max_len)?
        }
        None => plan,
    };
    Ok(BuiltPlan { plan, inputs })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let samples = eval_corpus(&model, &a.corpus, a.seed)?;
    let max_len = samples.iter().map(Vec::len).max().unwrap_or(0);
    let built = build_plan(&model, &a.plan, max_len)?;
    let plan = &built.plan;
    let ppl = matches!(a.metric, Metric::Ppl | Metric::Both)
        .then(|| perplexity(&model, plan, &samples))
        .transpose()?;
    let mse = matches!(a.metric, Metric::Mse | Metric::Both)
        .then(|| last_hidden_mse(&model, &ExecutionPlan::fp(&model), plan, &samples))
        .transpose()?;
    let result = json!({
        "model_fingerprint": model.fingerprint(),
        "plan": plan.describe(),
        "ppl": ppl.map(|p| p.ppl),
        "nll_sum": ppl.map(|p| p.nll_sum),
        "mse": mse,
        "tokens_evaluated": ppl.map(|p| p.tokens),
        "unquantized_activations": unquantized_activations(&model, plan).len(),
        "prefix": plan.prefix().map(|p| p.tokens.clone()),
    });
    write(&a.out, &serde_json::to_string_pretty(&result)?)?;
    println!(
        "{}: ppl {} mse {}",
        plan.describe(),
        ppl.map_or("-".into(), |p| format!("{:.4}", p.ppl)),
        mse.map_or("-".into(), |m| format!("{m:.4e}"))
    );
    let mut m = RunManifest::new("eval", a)?;
    m.seed = Some(a.seed);
    m.model_fingerprint = Some(model.fingerprint());
    m.input(&a.model)?;
    for p in &built.inputs {
        m.input(p)?;
    }
    corpus_inputs(&mut m, &a.corpus)?;
    m.finish(&[&a.out])?;
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let built = build_plan(&model, &a.plan, a.seqlen)?;
    let stats = run_bench(&model, &built.plan, a.seqlen, a.reps)?;
    write(&a.out, &serde_json::to_string_pretty(&stats)?)?;
    println!(
        "{}: median {:.3} ms over {} runs (min {:.3}, max {:.3}), kv cache {} bytes",
        stats.plan,
        stats.median_ns as f64 / 1e6,
        stats.repetitions,
        stats.min_ns as f64 / 1e6,
        stats.max_ns as f64 / 1e6,
        stats.kv_cache_bytes
    );
    let mut m = RunManifest::new("bench", a)?;
    m.model_fingerprint = Some(model.fingerprint());
    m.input(&a.model)?;
    for p in &built.inputs {
        m.input(p)?;
    }
    m.finish(&[&a.out])?;
    Ok(())
}
