//! Sequential vs data-parallel execution of the heavy stages.
//!
//! Each stage runs once on a single worker and once on the default pool.
//! Building with `--no-default-features` removes rayon entirely; both
//! variants then measure the plain-iteration fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spikelab::calibration::{run_calibration, CalibrationReport};
use spikelab::eval::perplexity;
use spikelab::par;
use spikelab::qfep::{context_pool, find_candidate_tokens, search_prefix, SearchOptions, DEFAULT_CANDIDATES, DEFAULT_TAU};
use spikelab::quant::{ExecutionPlan, LinearMode, QuantSpec};
use spikelab::synth::{gen_spike_model, reference_config, sample_corpus, spike_config_for, CorpusSource, SpikeMode};
use spikelab::{Model, TokenId};

struct Setup {
    model: Model,
    report: CalibrationReport,
    corpus: Vec<Vec<TokenId>>,
}

fn setup() -> Setup {
    let cfg = reference_config();
    let model = gen_spike_model(&cfg, &spike_config_for(&cfg, SpikeMode::FirstOccurrence), 42).unwrap();
    let spike = model.spike.as_ref().map(|s| s.spike_token);
    let corpus = sample_corpus(&CorpusSource::synthetic(spike, 0.5), 32, 32, 1).unwrap();
    let report = run_calibration(&model, &corpus, 1).unwrap().with_static_scales();
    Setup { model, report, corpus }
}

const VARIANTS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn stages(c: &mut Criterion) {
    let s = setup();
    let w8a8 = ExecutionPlan::builder(LinearMode::W8a8)
        .activation(QuantSpec::AQ2)
        .weight(QuantSpec::WEIGHT_PER_CHANNEL)
        .build(&s.model)
        .unwrap();
    let cands = find_candidate_tokens(&s.report, DEFAULT_CANDIDATES, DEFAULT_TAU).unwrap();
    let pool = context_pool(&s.report, 64);

    let mut g = c.benchmark_group("stages");
    g.sample_size(10);
    for (name, jobs) in VARIANTS {
        g.bench_with_input(BenchmarkId::new("calibration", name), &jobs, |b, &j| {
            b.iter(|| par::with_jobs(j, || run_calibration(&s.model, &s.corpus, 1).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("perplexity_w8a8", name), &jobs, |b, &j| {
            b.iter(|| par::with_jobs(j, || perplexity(&s.model, &w8a8, &s.corpus).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("prefix_search", name), &jobs, |b, &j| {
            b.iter(|| {
                par::with_jobs(j, || {
                    search_prefix(&s.model, &s.report, &cands, &pool, &SearchOptions::default()).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn schemes(c: &mut Criterion) {
    let s = setup();
    let scales = s.report.static_scale_map().unwrap();
    let mut g = c.benchmark_group("forward_64");
    for (name, spec) in [("aq1", QuantSpec::AQ1), ("aq2", QuantSpec::AQ2), ("aq3", QuantSpec::AQ3)] {
        let mut b = ExecutionPlan::builder(LinearMode::W8a8)
            .activation(spec)
            .weight(QuantSpec::WEIGHT_PER_CHANNEL);
        if spec == QuantSpec::AQ3 {
            b = b.static_scales(scales.clone());
        }
        let plan = b.build(&s.model).unwrap();
        let seq = spikelab::eval::bench_tokens(&s.model, 64);
        g.bench_function(name, |bch| bch.iter(|| spikelab::eval::sequence_nll(&s.model, &plan, &seq).unwrap()));
    }
    g.bench_function("fp", |bch| {
        let plan = ExecutionPlan::fp(&s.model);
        let seq = spikelab::eval::bench_tokens(&s.model, 64);
        bch.iter(|| spikelab::eval::sequence_nll(&s.model, &plan, &seq).unwrap())
    });
    g.finish();
}

criterion_group!(benches, stages, schemes);
criterion_main!(benches);
