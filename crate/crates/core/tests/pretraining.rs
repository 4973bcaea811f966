//! End-to-end pre-training behavior: loss levels, determinism, padding
//! equivalence, regime isolation, MLM evaluation, and light-encoder MLM
//! initialization.

use lslu_core::backbone::{Backbone, BackboneConfig};
use lslu_core::clm_data::{
    apply_masking, batchify, build_pair_sequence, build_query_only_example, CLMExample,
    ConversationPair, MaskMode, MaskingPolicy, MaskingStats, Vocab,
};
use lslu_core::datasim::{generate_corpus, Grammar};
use lslu_core::light_encoder::{DomainSchema, LightEncoder, LightEncoderConfig};
use lslu_core::optim::OptimizerConfig;
use lslu_core::pretrain::{
    backbone_mlm_logits, evaluate_mlm, init_light_encoder_mlm, mlm_example_loss, pretrain,
    InitConfig, PretrainConfig, Regime,
};
use lslu_core::tape::Tape;
use lslu_core::tensor::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn mini_backbone_config(vocab: usize) -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: vocab,
        max_positions: 40,
        n_type_ids: 2,
        dropout: 0.1,
    }
}

fn music_data(n: usize, seed: u64) -> (Vocab, Vec<ConversationPair>) {
    let grammar = Grammar::music();
    let vocab = Vocab::from_tokens(grammar.vocabulary());
    let (_, pairs) = generate_corpus(&grammar, n, seed).unwrap();
    (vocab, pairs)
}

fn quick_config(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig {
        regime: Regime::Clm,
        epochs,
        batch_size: 16,
        optimizer: OptimizerConfig::adam(1e-3),
        seed,
        masking: MaskingPolicy::default(),
        mix_ratio: 0,
    }
}

#[test]
fn initial_loss_near_uniform_and_halves_after_training() {
    let (vocab, pairs) = music_data(200, 3);
    let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 11).unwrap();
    let mut cfg = quick_config(20, 5);
    cfg.batch_size = 8;
    cfg.optimizer = OptimizerConfig::adam(3e-3);
    let trace = pretrain(&mut backbone, &pairs, &[], &vocab, &cfg).unwrap();

    let initial = trace.first_loss().unwrap();
    let uniform = (vocab.len() as f64).ln();
    assert!(
        (initial - uniform).abs() < 0.2,
        "initial loss {initial} not near ln(V) = {uniform}"
    );

    let final_loss = trace.final_loss().unwrap();
    assert!(
        final_loss < 0.5 * initial,
        "loss did not halve: initial {initial}, final {final_loss}"
    );
}

#[test]
fn identical_seeds_give_bitwise_identical_traces() {
    let (vocab, pairs) = music_data(60, 7);
    let run = || {
        let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 21).unwrap();
        pretrain(&mut backbone, &pairs, &[], &vocab, &quick_config(2, 9)).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.steps.len(), b.steps.len());
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!(
            x.loss.to_bits(),
            y.loss.to_bits(),
            "step {} diverged",
            x.step
        );
        assert_eq!(x.masked_acc.to_bits(), y.masked_acc.to_bits());
    }
}

#[test]
fn empty_corpus_rejected() {
    let (vocab, _) = music_data(1, 0);
    let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 1).unwrap();
    assert!(pretrain(&mut backbone, &[], &[], &vocab, &quick_config(1, 0)).is_err());
}

#[test]
fn padded_batch_loss_equals_sum_of_unpadded_losses() {
    let (vocab, pairs) = music_data(12, 13);
    let backbone = Backbone::new(mini_backbone_config(vocab.len()), 17).unwrap();
    let policy = MaskingPolicy::default();
    let mut rng = StdRng::seed_from_u64(3);
    let mut stats = MaskingStats::default();
    let examples: Vec<CLMExample> = pairs
        .iter()
        .map(|p| {
            let seq = build_pair_sequence(p, &vocab, 40).unwrap();
            apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap()
        })
        .collect();

    let loss_of = |ex: &CLMExample| -> Option<f64> {
        let mut tape = Tape::inference();
        mlm_example_loss(&backbone, &mut tape, ex, None)
            .unwrap()
            .map(|(v, _, _)| tape.value(v).item())
    };

    let unpadded_sum: f64 = examples.iter().filter_map(&loss_of).sum();
    let batches = batchify(&examples, 4, Some(40)).unwrap();
    let padded_sum: f64 = batches
        .iter()
        .flat_map(|batch| batch.iter().filter_map(&loss_of))
        .sum();
    assert!(
        (unpadded_sum - padded_sum).abs() < 1e-10,
        "padded {padded_sum} vs unpadded {unpadded_sum}"
    );
}

#[test]
fn query_only_regime_never_consumes_response_tokens() {
    // responses carry a token absent from every query; with random
    // replacement disabled its id can only appear via response consumption
    let grammar = Grammar::music();
    let vocab = Vocab::from_tokens(
        grammar
            .vocabulary()
            .into_iter()
            .chain(["tonight".to_string()]),
    );
    let (_, mut pairs) = generate_corpus(&grammar, 40, 19).unwrap();
    for p in &mut pairs {
        p.response_tokens.push("tonight".into());
    }
    let sentinel = vocab.id("tonight");
    assert_ne!(sentinel, 1, "sentinel must be a known vocab token");
    for p in &pairs {
        assert!(!p.query_tokens.contains(&"tonight".to_string()));
    }
    let policy = MaskingPolicy {
        mode: MaskMode::Mixed,
        mask_rate: 0.3,
        replace_probs: (1.0, 0.0, 0.0),
    };
    let mut rng = StdRng::seed_from_u64(23);
    let mut stats = MaskingStats::default();
    for p in &pairs {
        let ex = build_query_only_example(p, &vocab, &policy, &mut rng, &mut stats, 40).unwrap();
        assert!(!ex.input_ids.contains(&sentinel));
        assert!(!ex.mlm_labels.iter().flatten().any(|&id| id == sentinel));
    }
}

#[test]
fn mixed_regime_interleaves_plain_batches() {
    let (vocab, pairs) = music_data(32, 29);
    let text: Vec<Vec<String>> = pairs.iter().map(|p| p.response_tokens.clone()).collect();
    let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 31).unwrap();
    let mut cfg = quick_config(1, 37);
    cfg.mix_ratio = 1;
    let trace = pretrain(&mut backbone, &pairs, &text, &vocab, &cfg).unwrap();
    // 32 pairs / batch 16 = 2 clm batches + 2 interleaved plain batches
    assert_eq!(trace.steps.len(), 4);
}

#[test]
fn evaluate_mlm_oracle_uniform_and_batch_invariance() {
    let (vocab, pairs) = music_data(30, 41);
    let policy = MaskingPolicy::default();
    let mut rng = StdRng::seed_from_u64(43);
    let mut stats = MaskingStats::default();
    let examples: Vec<CLMExample> = pairs
        .iter()
        .map(|p| {
            let seq = build_pair_sequence(p, &vocab, 40).unwrap();
            apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap()
        })
        .collect();

    // planted oracle: logits one-hot on the original token
    let oracle = evaluate_mlm(&examples, |ex| {
        let mut logits = Tensor::zeros(ex.len(), vocab.len());
        for (pos, label) in ex.mlm_labels.iter().enumerate() {
            if let Some(id) = label {
                logits.data[pos * vocab.len() + id] = 10.0;
            }
        }
        Ok(logits)
    })
    .unwrap();
    assert_eq!(oracle.accuracy, 1.0);

    // untrained model: accuracy near the uniform baseline
    let backbone = Backbone::new(mini_backbone_config(vocab.len()), 47).unwrap();
    let eval = evaluate_mlm(&examples, |ex| backbone_mlm_logits(&backbone, ex)).unwrap();
    let uniform = 1.0 / vocab.len() as f64;
    assert!(
        eval.accuracy < 20.0 * uniform + 0.1,
        "untrained accuracy {} unreasonably high",
        eval.accuracy
    );

    // pure function of predictions: any grouping of the examples agrees
    let (first, second) = examples.split_at(examples.len() / 2);
    let eval_a = evaluate_mlm(first, |ex| backbone_mlm_logits(&backbone, ex)).unwrap();
    let eval_b = evaluate_mlm(second, |ex| backbone_mlm_logits(&backbone, ex)).unwrap();
    let merged = (eval_a.accuracy * eval_a.n_positions as f64
        + eval_b.accuracy * eval_b.n_positions as f64)
        / (eval_a.n_positions + eval_b.n_positions) as f64;
    assert!((merged - eval.accuracy).abs() < 1e-12);
}

#[test]
fn unlabeled_logit_changes_never_move_the_loss() {
    let (vocab, pairs) = music_data(5, 53);
    let policy = MaskingPolicy::default();
    let mut rng = StdRng::seed_from_u64(59);
    let mut stats = MaskingStats::default();
    let seq = build_pair_sequence(&pairs[0], &vocab, 40).unwrap();
    let ex = apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap();
    assert!(!ex.masked_positions().is_empty());

    let base_logits = {
        let mut rng = StdRng::seed_from_u64(61);
        Tensor::uniform(ex.len(), vocab.len(), 2.0, &mut rng)
    };
    let base = evaluate_mlm(std::slice::from_ref(&ex), |_| Ok(base_logits.clone())).unwrap();
    let unlabeled: Vec<usize> = (0..ex.len())
        .filter(|&i| ex.mlm_labels[i].is_none())
        .collect();
    for &pos in &unlabeled {
        let mut doctored = base_logits.clone();
        for j in 0..vocab.len() {
            doctored.data[pos * vocab.len() + j] += 7.0 * (j as f64 + 1.0);
        }
        let eval = evaluate_mlm(std::slice::from_ref(&ex), |_| Ok(doctored.clone())).unwrap();
        assert_eq!(eval.mean_loss.to_bits(), base.mean_loss.to_bits());
        assert_eq!(eval.accuracy.to_bits(), base.accuracy.to_bits());
    }
}

fn toy_light(backbone: &Backbone, seed: u64) -> LightEncoder {
    let schema = DomainSchema::from_grammar(&Grammar::music());
    let mut cfg = LightEncoderConfig::concat_lstm(32);
    cfg.dropout = 0.0;
    LightEncoder::new(
        cfg,
        schema,
        backbone.config.n_layers,
        backbone.config.d_model,
        seed,
    )
    .unwrap()
}

#[test]
fn light_encoder_mlm_init_freezes_backbone_and_learns() {
    let (vocab, pairs) = music_data(120, 67);
    let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 71).unwrap();
    // init runs against a briefly pre-trained backbone, as in the pipeline
    let mut pre = quick_config(10, 68);
    pre.optimizer = OptimizerConfig::adam(3e-3);
    pretrain(&mut backbone, &pairs, &[], &vocab, &pre).unwrap();

    // guard: unfrozen backbone is rejected
    let mut light = toy_light(&backbone, 73);
    let cfg = InitConfig {
        epochs: 10,
        seed: 79,
        batch_size: 8,
        optimizer: OptimizerConfig::adam(3e-3),
        ..Default::default()
    };
    assert!(init_light_encoder_mlm(&backbone, &mut light, &pairs, &vocab, &cfg).is_err());

    backbone.freeze();
    let checksum_before = backbone.fingerprint();
    let heads_before: Vec<u64> = LightEncoder::head_param_names()
        .iter()
        .map(|n| light.params.get(n).tensor.fingerprint())
        .collect();

    let trace = init_light_encoder_mlm(&backbone, &mut light, &pairs, &vocab, &cfg).unwrap();
    assert_eq!(
        backbone.fingerprint(),
        checksum_before,
        "backbone changed during MLM init"
    );

    // output layers keep their fresh initialization
    let heads_after: Vec<u64> = LightEncoder::head_param_names()
        .iter()
        .map(|n| light.params.get(n).tensor.fingerprint())
        .collect();
    assert_eq!(heads_before, heads_after);
    // the temporary head is gone
    assert!(light.params.try_get("tmp_mlm.w").is_none());
    assert!(light.params.try_get("tmp_mlm.b").is_none());
    // every light parameter is trainable again
    assert_eq!(light.params.trainable_names().len(), light.params.len());

    let steps_per_epoch = trace.steps.len() / 10;
    let first = trace.first_loss().unwrap();
    let last = trace.epoch_mean_loss(steps_per_epoch, 9).unwrap();
    assert!(
        last <= 0.7 * first,
        "init loss fell only from {first} to {last} (< 30% drop)"
    );
}

#[test]
fn all_three_regimes_train() {
    let (vocab, pairs) = music_data(40, 83);
    let text: Vec<Vec<String>> = pairs.iter().map(|p| p.response_tokens.clone()).collect();
    for regime in [Regime::Clm, Regime::QueryOnly, Regime::PlainMlm] {
        let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 89).unwrap();
        let cfg = PretrainConfig {
            regime,
            epochs: 2,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 97,
            mix_ratio: 1,
            ..Default::default()
        };
        let trace = pretrain(&mut backbone, &pairs, &text, &vocab, &cfg).unwrap();
        assert!(!trace.steps.is_empty(), "{regime:?} produced no steps");
        assert!(trace.steps.iter().all(|s| s.loss.is_finite()));
    }
}

#[test]
fn untrained_model_mean_loss_is_near_uniform() {
    let (vocab, pairs) = music_data(40, 131);
    let backbone = Backbone::new(mini_backbone_config(vocab.len()), 137).unwrap();
    let policy = MaskingPolicy::default();
    let mut rng = StdRng::seed_from_u64(139);
    let mut stats = MaskingStats::default();
    let examples: Vec<CLMExample> = pairs
        .iter()
        .map(|p| {
            let seq = build_pair_sequence(p, &vocab, 40).unwrap();
            apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap()
        })
        .collect();
    let eval = evaluate_mlm(&examples, |ex| backbone_mlm_logits(&backbone, ex)).unwrap();
    let uniform = (vocab.len() as f64).ln();
    assert!(
        (eval.mean_loss - uniform).abs() < 0.1,
        "untrained mean loss {} vs ln(V) = {uniform}",
        eval.mean_loss
    );
}

#[test]
fn exploding_learning_rate_aborts_with_step_index() {
    let (vocab, pairs) = music_data(30, 151);
    let mut backbone = Backbone::new(mini_backbone_config(vocab.len()), 157).unwrap();
    let mut cfg = quick_config(5, 163);
    cfg.optimizer = OptimizerConfig::adam(1e300); // one step overflows the weights
    match pretrain(&mut backbone, &pairs, &[], &vocab, &cfg) {
        Err(lslu_core::error::Error::Numeric(msg)) => {
            assert!(
                msg.contains("step"),
                "abort message lacks a step index: {msg}"
            );
        }
        Err(other) => panic!("expected a numeric abort, got {other}"),
        Ok(_) => panic!("training survived an absurd learning rate"),
    }
}
