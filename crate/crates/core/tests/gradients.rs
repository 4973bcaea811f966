//! Finite-difference verification of every composite the models use:
//! MLP, attention block, LSTM cell, CRF NLL, pooling variants, joint loss.
//! Dropout is disabled throughout so the losses are deterministic.

use lslu_core::backbone::LayerActivations;
use lslu_core::backbone::{Backbone, BackboneConfig};
use lslu_core::clm_data::CLMExample;
use lslu_core::gradcheck::finite_difference_check;
use lslu_core::light_encoder::{DomainSchema, IcRepr, LightEncoder, LightEncoderConfig};
use lslu_core::param::{ParamSet, Parameter};
use lslu_core::pretrain::mlm_example_loss;
use lslu_core::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const EPS: f64 = 1e-5;

fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 15,
        max_positions: 12,
        n_type_ids: 2,
        dropout: 0.0,
    }
}

fn tiny_schema() -> DomainSchema {
    DomainSchema {
        domain_name: "t".into(),
        intents: vec!["A".into(), "B".into(), "C".into()],
        slot_labels: vec!["O".into(), "B-x".into(), "I-x".into()],
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable("w1", Tensor::glorot(5, 7, &mut rng)))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "b1",
                Tensor::uniform(1, 7, 0.1, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable("w2", Tensor::glorot(7, 6, &mut rng)))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "b2",
                Tensor::uniform(1, 6, 0.1, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable("w3", Tensor::glorot(6, 4, &mut rng)))
            .unwrap();
        let x = Tensor::uniform(3, 5, 1.0, &mut rng);
        let report = finite_difference_check(
            move |ps, tape| {
                let xv = tape.constant(x.clone());
                let w1 = tape.param(ps.get("w1"));
                let b1 = tape.param(ps.get("b1"));
                let w2 = tape.param(ps.get("w2"));
                let b2 = tape.param(ps.get("b2"));
                let w3 = tape.param(ps.get("w3"));
                let h = tape.matmul(xv, w1)?;
                let h = tape.add_row(h, b1)?;
                let h = tape.tanh(h);
                let h = tape.matmul(h, w2)?;
                let h = tape.add_row(h, b2)?;
                let h = tape.gelu(h);
                let h = tape.matmul(h, w3)?;
                let sm = tape.softmax_rows(h);
                let sq = tape.mul(sm, sm)?;
                Ok(tape.mean_all(sq))
            },
            &mut params,
            EPS,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "seed {seed}: {}",
            report.max_rel_err
        );
    }
}

#[test]
fn attention_block_gradients_match_finite_differences() {
    // whole backbone forward to the masked-LM loss, padding included
    for seed in 0..10u64 {
        let backbone = Backbone::new(tiny_backbone_config(), seed).unwrap();
        let example = CLMExample {
            input_ids: vec![2, 6, 4, 7, 3, 0],
            type_ids: vec![0, 0, 1, 1, 1, 0],
            attention_mask: vec![true, true, true, true, true, false],
            mlm_labels: vec![None, Some(5), None, Some(9), None, None],
        };
        let mut params =
            std::mem::take(&mut Backbone::new(tiny_backbone_config(), seed).unwrap().params);
        let report = finite_difference_check(
            |ps, tape| {
                let model = Backbone {
                    config: tiny_backbone_config(),
                    params: ps.clone(),
                };
                let (loss, _, _) =
                    mlm_example_loss(&model, tape, &example, None)?.expect("labeled");
                Ok(loss)
            },
            &mut params,
            EPS,
        )
        .unwrap();
        let _ = backbone;
        assert!(
            report.max_rel_err < 1e-4,
            "seed {seed}: {}",
            report.max_rel_err
        );
    }
}

fn random_acts(rng: &mut StdRng, n_layers: usize, t: usize, d: usize) -> LayerActivations {
    LayerActivations {
        per_layer: (0..n_layers)
            .map(|_| Tensor::uniform(t, d, 1.0, rng))
            .collect(),
        attention_mask: vec![true; t],
    }
}

fn light_loss_gradcheck(cfg: LightEncoderConfig, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xabcd);
    let le = LightEncoder::new(cfg, tiny_schema(), 2, 8, seed).unwrap();
    // 3 real tokens framed by [CLS]/[SEP]: 5 rows
    let acts = random_acts(&mut rng, 2, 5, 8);
    let gold_slots = vec![1usize, 2, 0];
    let mut params = le.params.clone();
    let schema = le.schema.clone();
    let config = le.config;
    let report = finite_difference_check(
        move |ps, tape| {
            let model = LightEncoder {
                config,
                schema: schema.clone(),
                params: ps.clone(),
                n_backbone_layers: 2,
                d_model: 8,
            };
            model.loss_from_activations(tape, &acts, 1, &gold_slots, None)
        },
        &mut params,
        EPS,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn joint_loss_gradients_all_pooling_variants() {
    for seed in 0..10u64 {
        for cfg in [
            LightEncoderConfig::concat_lstm(4),
            LightEncoderConfig::linear_lstm(4),
            LightEncoderConfig::lastlayer_lstm(4),
            LightEncoderConfig::concat(4),
        ] {
            let mut cfg = cfg;
            cfg.dropout = 0.0;
            let err = light_loss_gradcheck(cfg, seed);
            assert!(
                err < 1e-4,
                "variant {} seed {seed}: {err}",
                cfg.variant_name()
            );
        }
    }
}

#[test]
fn mean_pool_ic_repr_gradients() {
    let mut cfg = LightEncoderConfig::concat_lstm(4);
    cfg.dropout = 0.0;
    cfg.ic_repr = IcRepr::MeanPool;
    for seed in 0..3u64 {
        let err = light_loss_gradcheck(cfg, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn crf_nll_gradients_match_finite_differences() {
    // 3-token, 3-label instances; tolerance 1e-5 per the oracle contract
    for seed in 0..10u64 {
        let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(37) + 5);
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable(
                "em",
                Tensor::uniform(3, 3, 1.5, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "tr",
                Tensor::uniform(3, 3, 1.0, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "st",
                Tensor::uniform(1, 3, 1.0, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "sp",
                Tensor::uniform(1, 3, 1.0, &mut rng),
            ))
            .unwrap();
        let gold = vec![
            rng.gen_range(0..3),
            rng.gen_range(0..3),
            rng.gen_range(0..3),
        ];
        let report = finite_difference_check(
            move |ps, tape| {
                let em = tape.param(ps.get("em"));
                let tr = tape.param(ps.get("tr"));
                let st = tape.param(ps.get("st"));
                let sp = tape.param(ps.get("sp"));
                lslu_core::crf::crf_nll(tape, em, tr, st, sp, &gold)
            },
            &mut params,
            EPS,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "seed {seed}: {}",
            report.max_rel_err
        );
    }
}

#[test]
fn lstm_cell_gradients_match_finite_differences() {
    // isolate the BiLSTM: last-layer pooling, no dense nonlinearity effects
    // beyond GELU, single LSTM layer
    for seed in 0..10u64 {
        let mut cfg = LightEncoderConfig::lastlayer_lstm(5);
        cfg.lstm_layers = 1;
        cfg.dropout = 0.0;
        let err = light_loss_gradcheck(cfg, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = StdRng::seed_from_u64(seed + 100);
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable(
                "x",
                Tensor::uniform(4, 6, 2.0, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "g",
                Tensor::uniform(1, 6, 1.0, &mut rng),
            ))
            .unwrap();
        params
            .insert(Parameter::trainable(
                "b",
                Tensor::uniform(1, 6, 1.0, &mut rng),
            ))
            .unwrap();
        let report = finite_difference_check(
            |ps, tape| {
                let x = tape.param(ps.get("x"));
                let g = tape.param(ps.get("g"));
                let b = tape.param(ps.get("b"));
                let ln = tape.layer_norm(x, g, b, 1e-12)?;
                let sq = tape.mul(ln, ln)?;
                Ok(tape.mean_all(sq))
            },
            &mut params,
            EPS,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "seed {seed}: {}",
            report.max_rel_err
        );
    }
}
