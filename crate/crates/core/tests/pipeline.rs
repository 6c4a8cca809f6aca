//! End-to-end behaviour of generated models through the public API.

use spikelab::calibration::run_calibration;
use spikelab::eval::perplexity;
use spikelab::model::{container, TraceOptions};
use spikelab::par;
use spikelab::qfem::{select_unquantized, ExclusionSet};
use spikelab::qfep::{context_pool, find_candidate_tokens, search_prefix, SearchOptions, DEFAULT_CANDIDATES, DEFAULT_TAU};
use spikelab::quant::{ExecutionPlan, LinearMode, QuantSpec};
use spikelab::synth::{gen_spike_model, reference_config, sample_corpus, spike_config_for, verify_spike_model, CorpusSource, SpikeMode};
use spikelab::{Error, Model, ModuleId, ModuleKind, TokenId};

fn model(mode: SpikeMode, seed: u64) -> Model {
    let cfg = reference_config();
    gen_spike_model(&cfg, &spike_config_for(&cfg, mode), seed).unwrap()
}

fn corpus(m: &Model, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let spike = m.spike.as_ref().map(|s| s.spike_token);
    sample_corpus(&CorpusSource::synthetic(spike, 0.5), n, 32, seed).unwrap()
}

#[test]
fn generated_models_meet_their_contract_in_every_mode() {
    for mode in [SpikeMode::FirstOccurrence, SpikeMode::Static, SpikeMode::None] {
        let m = model(mode, 7);
        let d = verify_spike_model(&m).unwrap();
        assert!(d.max_other_ratio < 3.0, "{mode:?}: {d:?}");
        match mode {
            SpikeMode::None => assert!(d.spike_ratio < 3.0, "{d:?}"),
            _ => {
                assert!(d.spike_ratio >= 1000.0, "{mode:?}: {d:?}");
                assert_eq!(d.spike_module, ModuleId::new(1, ModuleKind::Down));
            }
        }
        if mode == SpikeMode::FirstOccurrence {
            assert!(d.second_over_first.unwrap() < 0.5, "{d:?}");
        }
        if mode == SpikeMode::Static {
            assert!(d.min_occurrence_over_median.unwrap() > 10.0, "{d:?}");
        }
    }
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let a = model(SpikeMode::FirstOccurrence, 3);
    let b = model(SpikeMode::FirstOccurrence, 3);
    assert_eq!(container::to_bytes(&a).unwrap(), container::to_bytes(&b).unwrap());
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn container_round_trip_preserves_outputs() {
    let m = model(SpikeMode::FirstOccurrence, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gslm");
    container::save(&m, &path).unwrap();
    let back = container::load(&path).unwrap();
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert_eq!(back.spike, m.spike);
    let toks = &corpus(&m, 1, 9)[0];
    let plan = ExecutionPlan::fp(&m);
    let a = m.forward(toks, None, &plan, TraceOptions::NONE).unwrap();
    let b = back.forward(toks, None, &ExecutionPlan::fp(&back), TraceOptions::NONE).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn calibration_ignores_worker_count() {
    let m = model(SpikeMode::FirstOccurrence, 11);
    let c = corpus(&m, 24, 1);
    let one = par::with_jobs(1, || run_calibration(&m, &c, 1).unwrap());
    let three = par::with_jobs(3, || run_calibration(&m, &c, 1).unwrap());
    assert_eq!(one.to_json().unwrap(), three.to_json().unwrap());
}

#[test]
fn artifacts_refuse_a_different_model() {
    let a = model(SpikeMode::FirstOccurrence, 1);
    let b = model(SpikeMode::FirstOccurrence, 2);
    let report = run_calibration(&a, &corpus(&a, 8, 1), 1).unwrap();
    assert!(matches!(report.check_model(&b), Err(Error::FingerprintMismatch { .. })));
    report.check_model(&a).unwrap();
    let ex = ExclusionSet {
        provenance: report.model_fingerprint.clone(),
        ..select_unquantized(&report.ratios(), 10.0)
    };
    ex.check_model(&a).unwrap();
    assert!(matches!(ex.check_model(&b), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn excluding_the_spike_module_repairs_per_tensor_quantization() {
    let m = model(SpikeMode::FirstOccurrence, 42);
    let report = run_calibration(&m, &corpus(&m, 48, 1), 1).unwrap();
    let eval = corpus(&m, 32, 2);
    let ex = select_unquantized(&report.ratios(), 100.0);
    assert_eq!(ex.modules.len(), 1);
    let plan = |excluded: &std::collections::BTreeSet<ModuleId>| {
        ExecutionPlan::builder(LinearMode::W8a8)
            .activation(QuantSpec::AQ2)
            .weight(QuantSpec::WEIGHT_PER_CHANNEL)
            .exclude(excluded.iter().copied())
            .build(&m)
            .unwrap()
    };
    let fp = perplexity(&m, &ExecutionPlan::fp(&m), &eval).unwrap().ppl;
    let full = perplexity(&m, &plan(&Default::default()), &eval).unwrap().ppl;
    let kept = perplexity(&m, &plan(&ex.modules), &eval).unwrap().ppl;
    assert!(full > 1.5 * fp, "fp {fp}, full {full}");
    assert!((kept - fp).abs() < 0.05 * fp, "fp {fp}, kept {kept}");
}

#[test]
fn prefix_search_depends_on_the_spike_mode() {
    let first = model(SpikeMode::FirstOccurrence, 42);
    let r = run_calibration(&first, &corpus(&first, 48, 1), 1).unwrap();
    let c = find_candidate_tokens(&r, DEFAULT_CANDIDATES, DEFAULT_TAU).unwrap();
    let found = search_prefix(&first, &r, &c, &context_pool(&r, 64), &SearchOptions::default()).unwrap();
    assert_eq!(found.prefix.len(), 3);
    assert_eq!(found.prefix[0], first.config.bos_id);
    assert_eq!(found.prefix[2], first.spike.as_ref().unwrap().spike_token);

    let stat = model(SpikeMode::Static, 42);
    let r = run_calibration(&stat, &corpus(&stat, 48, 1), 1).unwrap();
    let c = find_candidate_tokens(&r, DEFAULT_CANDIDATES, DEFAULT_TAU).unwrap();
    let res = search_prefix(&stat, &r, &c, &context_pool(&r, 64), &SearchOptions::default());
    assert!(matches!(res, Err(Error::PrefixInapplicable { .. })), "{res:?}");
}
