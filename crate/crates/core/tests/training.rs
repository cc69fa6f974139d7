mod common;

use common::{toy_batch, toy_models};
use fae_core::alignment::{alignment_loss, realign};
use fae_core::encoder::FeatureGrid;
use fae_core::explainer::{framed, AttentionMap, ContextScale, Explainer, Vocabulary};
use fae_core::numerics::Tape;
use fae_core::training::{
    caption_examples, explainer_loss, train_explainer, train_explainer_with, AlignInput, CaptionExample, LossBreakdown,
    TrainConfig,
};
use fae_core::Error;

fn loss(
    explainer: &Explainer<f64>,
    aligner: &fae_core::alignment::Aligner<f64>,
    batch: &[CaptionExample<f64>],
    config: &TrainConfig,
) -> LossBreakdown {
    let mut tape = Tape::new();
    let be = explainer.params.bind(&mut tape);
    let ba = aligner.params.bind(&mut tape);
    let refs: Vec<&CaptionExample<f64>> = batch.iter().collect();
    explainer_loss(explainer, aligner, &mut tape, &be, &ba, &refs, config).unwrap().breakdown(&tape)
}

/// Teacher-forced replay through the single-step API: per-step log-probability
/// of the target and attention map.
fn replay(explainer: &Explainer<f64>, ex: &CaptionExample<f64>) -> (Vec<f64>, Vec<AttentionMap>) {
    let seq = framed(&ex.tokens);
    let mut state = explainer.initial_state(&ex.features).unwrap();
    let (mut logp, mut maps) = (Vec::new(), Vec::new());
    for w in seq.windows(2) {
        let (logits, alpha, next) = explainer.decode_step(w[0], &state, &ex.features).unwrap();
        let l = logits.data();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        logp.push(l[w[1]] - lse);
        maps.push(alpha);
        state = next;
    }
    (logp, maps)
}

#[test]
fn terms_match_single_step_replay() {
    let (e, a) = toy_models::<f64>(21);
    let batch = toy_batch::<f64>(22);
    let config = TrainConfig {
        lambda_align: 0.7,
        lambda_ds: 0.3,
        ..TrainConfig::default()
    };
    let got = loss(&e, &a, &batch, &config);

    let (mut ce, mut align, mut ds, mut n) = (0.0, 0.0, 0.0, 0usize);
    for ex in &batch {
        let (logp, maps) = replay(&e, ex);
        n += logp.len();
        ce -= logp.iter().sum::<f64>();
        let mut states = a.encode_bidirectional(&framed(&ex.tokens)).unwrap();
        states.states.truncate(maps.len());
        let (realigned, _) = realign(&e, &states, &ex.features).unwrap();
        align += alignment_loss(&maps, &realigned).unwrap();
        for j in 0..4 {
            let covered: f64 = maps.iter().map(|m| m.weights[j]).sum();
            ds += (1.0 - covered).powi(2);
        }
    }
    let n = n as f64;
    assert!((got.ce - ce / n).abs() < 1e-12, "{} vs {}", got.ce, ce / n);
    assert!((got.align - align / n).abs() < 1e-12);
    assert!((got.ds - ds / n).abs() < 1e-12);
    assert!((got.total - (ce + 0.7 * align + 0.3 * ds) / n).abs() < 1e-12);
}

#[test]
fn zero_weights_leave_cross_entropy_alone() {
    let (e, a) = toy_models::<f64>(3);
    let batch = toy_batch::<f64>(4);
    let config = TrainConfig {
        lambda_align: 0.0,
        lambda_ds: 0.0,
        ..TrainConfig::default()
    };
    let b = loss(&e, &a, &batch, &config);
    assert_eq!(b.total, b.ce);
    assert_eq!(b.align, 0.0);
}

#[test]
fn uniform_predictions_cost_log_vocabulary() {
    let (e, a) = toy_models::<f64>(5);
    let zero = Explainer::<f64>::zeroed(e.config).unwrap();
    let b = loss(
        &zero,
        &a,
        &toy_batch(6),
        &TrainConfig {
            lambda_align: 0.0,
            ..TrainConfig::default()
        },
    );
    assert!((b.ce - 12f64.ln()).abs() < 1e-12);
}

#[test]
fn empty_batch_is_a_contract_error() {
    let (e, a) = toy_models::<f64>(1);
    let mut tape = Tape::new();
    let be = e.params.bind(&mut tape);
    let ba = a.params.bind(&mut tape);
    let r = explainer_loss(&e, &a, &mut tape, &be, &ba, &[], &TrainConfig::default());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn two_pass_aligns_on_decoded_sequences() {
    let (e, a) = toy_models::<f64>(8);
    let batch = toy_batch::<f64>(9);
    let forced = loss(&e, &a, &batch, &TrainConfig::default());
    let two = loss(
        &e,
        &a,
        &batch,
        &TrainConfig {
            align_input: AlignInput::TwoPass,
            ..TrainConfig::default()
        },
    );
    assert_eq!(forced.ce, two.ce);
    assert!(two.align.is_finite() && two.align >= 0.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (mut e, mut a) = toy_models::<f64>(10);
    let (e0, a0) = (e.params.clone(), a.params.clone());
    let config = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 1,
        precision: fae_core::Precision::F64,
        ..TrainConfig::default()
    };
    let log = train_explainer(&config, &mut e, &mut a, &toy_batch(11)).unwrap();
    assert_eq!(log.epochs.len(), 2);
    for ((_, x), (_, y)) in e.params.iter().zip(e0.iter()).chain(a.params.iter().zip(a0.iter())) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let run = || {
        let (mut e, mut a) = toy_models::<f64>(12);
        let config = TrainConfig {
            epochs: 150,
            batch_size: 2,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let log = train_explainer_with(&config, &mut e, &mut a, &toy_batch(13), |ep| seen.push(ep.epoch)).unwrap();
        assert_eq!(seen, (1..=150).collect::<Vec<_>>());
        (log, e.params)
    };
    let (log, params) = run();
    let (log2, params2) = run();
    assert_eq!(log, log2);
    for ((_, x), (_, y)) in params.iter().zip(params2.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let ce: Vec<f64> = log.epochs.iter().map(|e| e.ce).collect();
    assert!(ce[ce.len() - 1] < 0.5 * ce[0], "{ce:?}");
}

#[test]
fn epoch_log_is_json_lines() {
    let (mut e, mut a) = toy_models::<f64>(14);
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let log = train_explainer(&config, &mut e, &mut a, &toy_batch(15)).unwrap();
    let text = log.to_jsonl();
    assert_eq!(text.lines().count(), 3);
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i + 1);
        for key in ["ce", "align", "ds", "total"] {
            assert!(v[key].is_number());
        }
    }
}

#[test]
fn exploding_steps_report_divergence() {
    let (mut e, mut a) = toy_models::<f64>(16);
    let config = TrainConfig {
        learning_rate: 1e300,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let r = train_explainer(&config, &mut e, &mut a, &toy_batch(17));
    assert!(matches!(r, Err(Error::Divergence { epoch: 1, .. })), "{r:?}");
    assert!(FeatureGrid::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let (mut e, mut a) = toy_models::<f64>(18);
    let data = toy_batch::<f64>(19);
    for bad in [
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda_align: -0.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            context_scale: ContextScale::Sat,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(train_explainer(&bad, &mut e, &mut a, &data), Err(Error::Contract(_))));
    }
    assert!(train_explainer(&TrainConfig::default(), &mut e, &mut a, &[]).is_err());
}

#[test]
fn config_json_uses_defaults_and_rejects_unknown_keys() {
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "align_input": "two_pass"}"#).unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.align_input, AlignInput::TwoPass);
    assert_eq!(c.learning_rate, TrainConfig::default().learning_rate);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn one_example_per_caption() {
    let vocab = Vocabulary::from_captions(["a b", "b c"]);
    let grid = FeatureGrid::<f64>::new(1, 1, 1, vec![0.5]).unwrap();
    let caps = vec![vec!["a b".to_string(), "b c".to_string(), "c".to_string()]];
    let ex = caption_examples(&[grid], &caps, &vocab);
    assert_eq!(ex.len(), 3);
    assert_eq!(ex[1].tokens, vec![vocab.id("b"), vocab.id("c")]);
}
