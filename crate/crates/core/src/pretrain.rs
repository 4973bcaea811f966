//! Masked-LM pre-training loops for the three regimes (conversational pairs,
//! query-only, plain text) and the light-encoder MLM initialization step.

use crate::backbone::Backbone;
use crate::clm_data::{
    apply_masking, batchify, build_pair_sequence, build_query_only_example, CLMExample,
    ConversationPair, MaskMode, MaskingPolicy, MaskingStats, PairSequence, Vocab,
};
use crate::error::{Error, Result};
use crate::light_encoder::LightEncoder;
use crate::optim::{Adam, OptimizerConfig};
use crate::param::Parameter;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Query-response pairs with entity masking, optionally mixed with plain
    /// text batches.
    Clm,
    /// Query side only, optionally mixed with plain text batches.
    QueryOnly,
    /// Plain single-segment text with standard masking.
    PlainMlm,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "clm" => Ok(Regime::Clm),
            "query_only" | "query-only" => Ok(Regime::QueryOnly),
            "plain_mlm" | "plain-mlm" => Ok(Regime::PlainMlm),
            other => Err(Error::Config(format!(
                "unknown regime {other:?} (clm, query_only, plain_mlm)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub masking: MaskingPolicy,
    /// Plain-text batches interleaved per conversational batch (clm and
    /// query_only regimes; ignored without a text corpus).
    pub mix_ratio: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            regime: Regime::Clm,
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-4),
            seed: 0,
            masking: MaskingPolicy::default(),
            mix_ratio: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceStep {
    pub step: u64,
    pub loss: f64,
    pub masked_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub steps: Vec<TraceStep>,
    pub epoch_masked_acc: Vec<f64>,
    pub wall_clock: Duration,
    pub masking_stats: MaskingStats,
}

impl TrainingTrace {
    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Mean loss over the first and last epoch's steps.
    pub fn epoch_mean_loss(&self, steps_per_epoch: usize, epoch: usize) -> Option<f64> {
        let chunk: Vec<&TraceStep> = self
            .steps
            .iter()
            .skip(epoch * steps_per_epoch)
            .take(steps_per_epoch)
            .collect();
        if chunk.is_empty() {
            return None;
        }
        Some(chunk.iter().map(|s| s.loss).sum::<f64>() / chunk.len() as f64)
    }

    /// Line-oriented metrics: `step<TAB>loss<TAB>masked_acc`.
    pub fn to_metrics_text(&self) -> String {
        let mut s = String::new();
        for step in &self.steps {
            s.push_str(&format!(
                "{}\t{:.6}\t{:.6}\n",
                step.step, step.loss, step.masked_acc
            ));
        }
        s
    }
}

/// Build one epoch's worth of masked examples for a regime.
pub fn build_epoch_examples(
    regime: Regime,
    pairs: &[ConversationPair],
    text: &[Vec<String>],
    vocab: &Vocab,
    policy: &MaskingPolicy,
    max_positions: usize,
    rng: &mut StdRng,
    stats: &mut MaskingStats,
) -> Result<Vec<CLMExample>> {
    let mut out = Vec::new();
    match regime {
        Regime::Clm => {
            for pair in pairs {
                let seq = build_pair_sequence(pair, vocab, max_positions)?;
                out.push(apply_masking(&seq, policy, rng, stats)?);
            }
        }
        Regime::QueryOnly => {
            for pair in pairs {
                out.push(build_query_only_example(
                    pair,
                    vocab,
                    policy,
                    rng,
                    stats,
                    max_positions,
                )?);
            }
        }
        Regime::PlainMlm => {
            for sentence in text {
                out.push(plain_text_example(
                    sentence,
                    vocab,
                    policy,
                    rng,
                    stats,
                    max_positions,
                )?);
            }
        }
    }
    Ok(out)
}

/// `[CLS] sentence [SEP]`, all-zero types, standard masking (no entities).
pub fn plain_text_example(
    tokens: &[String],
    vocab: &Vocab,
    policy: &MaskingPolicy,
    rng: &mut StdRng,
    stats: &mut MaskingStats,
    max_positions: usize,
) -> Result<CLMExample> {
    if tokens.is_empty() {
        return Err(Error::Data("plain text example: empty sentence".into()));
    }
    let total = tokens.len() + 2;
    if total > max_positions {
        return Err(Error::Data(format!(
            "sentence length {total} exceeds max positions {max_positions}"
        )));
    }
    let mut input_ids = Vec::with_capacity(total);
    input_ids.push(crate::clm_data::CLS_ID);
    for t in tokens {
        input_ids.push(vocab.id(t));
    }
    input_ids.push(crate::clm_data::SEP_ID);
    let seq = PairSequence {
        input_ids,
        type_ids: vec![0; total],
        entity_spans: Vec::new(),
        vocab_size: vocab.len(),
    };
    let standard = MaskingPolicy {
        mode: MaskMode::Standard,
        ..*policy
    };
    apply_masking(&seq, &standard, rng, stats)
}

/// Sum of masked-position cross-entropies for one example, plus the number
/// of labeled positions and how many were predicted correctly. Returns
/// `None` for examples with no labeled positions.
pub fn mlm_example_loss(
    backbone: &Backbone,
    tape: &mut Tape,
    example: &CLMExample,
    rng: Option<&mut StdRng>,
) -> Result<Option<(Var, usize, usize)>> {
    let labeled: Vec<usize> = example.masked_positions();
    if labeled.is_empty() {
        return Ok(None);
    }
    let outputs = tape_forward(backbone, tape, example, rng)?;
    let final_hidden = *outputs.last().expect("n_layers >= 1");
    let rows = tape.gather_rows(final_hidden, &labeled)?;
    let logits = backbone.mlm_logits_on_tape(tape, rows)?;
    let targets: Vec<usize> = labeled
        .iter()
        .map(|&p| example.mlm_labels[p].expect("labeled position"))
        .collect();

    let vocab_size = backbone.config.vocab_size;
    let correct = {
        let lt = tape.value(logits);
        targets
            .iter()
            .enumerate()
            .filter(|(row, &gold)| {
                let r = lt.row_slice(*row);
                let mut best = 0usize;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best == gold
            })
            .count()
    };

    let lse = tape.lse_rows(logits);
    let logp = tape.sub_col(logits, lse)?;
    let flat: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(row, &g)| row * vocab_size + g)
        .collect();
    let picked = tape.gather_elems(logp, &flat)?;
    let sum = tape.sum_all(picked);
    let loss = tape.scale(sum, -1.0);
    Ok(Some((loss, targets.len(), correct)))
}

fn tape_forward(
    backbone: &Backbone,
    tape: &mut Tape,
    example: &CLMExample,
    rng: Option<&mut StdRng>,
) -> Result<Vec<Var>> {
    backbone.forward_on_tape(
        tape,
        &example.input_ids,
        &example.type_ids,
        &example.attention_mask,
        rng,
    )
}

/// Pre-train the backbone (all parameters plus MLM head trainable).
pub fn pretrain(
    backbone: &mut Backbone,
    pairs: &[ConversationPair],
    text: &[Vec<String>],
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<TrainingTrace> {
    match cfg.regime {
        Regime::PlainMlm if text.is_empty() => {
            return Err(Error::Data(
                "pretrain: plain_mlm regime needs a text corpus".into(),
            ))
        }
        Regime::Clm | Regime::QueryOnly if pairs.is_empty() => {
            return Err(Error::Data("pretrain: empty pair corpus".into()))
        }
        _ => {}
    }
    if vocab.len() != backbone.config.vocab_size {
        return Err(Error::Config(format!(
            "vocab size {} does not match backbone vocab_size {}",
            vocab.len(),
            backbone.config.vocab_size
        )));
    }
    backbone.unfreeze();

    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer);
    let mut trace = TrainingTrace::default();
    let mut step_index = 0u64;
    let max_positions = backbone.config.max_positions;

    for epoch in 0..cfg.epochs {
        let mut stats = MaskingStats::default();
        let mut main = build_epoch_examples(
            cfg.regime,
            pairs,
            text,
            vocab,
            &cfg.masking,
            max_positions,
            &mut rng,
            &mut stats,
        )?;
        main.shuffle(&mut rng);
        let mut batches = batchify(&main, cfg.batch_size, None)?;
        batches.retain(|b| b.len() == cfg.batch_size); // drop-last

        // interleave plain-text batches for the mixed regimes
        if cfg.mix_ratio > 0 && !text.is_empty() && cfg.regime != Regime::PlainMlm {
            let mut plain = Vec::new();
            let needed = batches.len() * cfg.mix_ratio * cfg.batch_size;
            while plain.len() < needed {
                for sentence in text {
                    plain.push(plain_text_example(
                        sentence,
                        vocab,
                        &cfg.masking,
                        &mut rng,
                        &mut stats,
                        max_positions,
                    )?);
                    if plain.len() >= needed {
                        break;
                    }
                }
            }
            plain.shuffle(&mut rng);
            let plain_batches = batchify(&plain, cfg.batch_size, None)?;
            let mut merged = Vec::with_capacity(batches.len() * (1 + cfg.mix_ratio));
            let mut plain_iter = plain_batches.into_iter();
            for batch in batches {
                merged.push(batch);
                for _ in 0..cfg.mix_ratio {
                    if let Some(p) = plain_iter.next() {
                        merged.push(p);
                    }
                }
            }
            batches = merged;
        }

        let mut epoch_correct = 0usize;
        let mut epoch_total = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let mut total_loss: Option<Var> = None;
            let mut n_positions = 0usize;
            let mut n_correct = 0usize;
            for example in batch {
                if let Some((loss, count, correct)) =
                    mlm_example_loss(backbone, &mut tape, example, Some(&mut rng))?
                {
                    n_positions += count;
                    n_correct += correct;
                    total_loss = Some(match total_loss {
                        None => loss,
                        Some(acc) => tape.add(acc, loss)?,
                    });
                }
            }
            let Some(total) = total_loss else { continue };
            let mean = tape.scale(total, 1.0 / n_positions as f64);
            let loss_value = tape.value(mean).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pre-training loss at step {step_index}"
                )));
            }
            let grads = tape.backward(mean)?;
            backbone.params.load_grads(&grads)?;
            opt.step(&mut backbone.params)?;

            trace.steps.push(TraceStep {
                step: step_index,
                loss: loss_value,
                masked_acc: n_correct as f64 / n_positions as f64,
            });
            step_index += 1;
            epoch_correct += n_correct;
            epoch_total += n_positions;
        }
        let _ = epoch;
        trace.epoch_masked_acc.push(if epoch_total == 0 {
            0.0
        } else {
            epoch_correct as f64 / epoch_total as f64
        });
        trace.masking_stats.zero_candidate_examples += stats.zero_candidate_examples;
    }
    trace.wall_clock = started.elapsed();
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct InitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub masking: MaskingPolicy,
    /// Example layout for the init task. Query-only matches the framing the
    /// fine-tuned encoder consumes at prediction time.
    pub regime: Regime,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            epochs: 2,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(5e-4),
            seed: 0,
            masking: MaskingPolicy::default(),
            regime: Regime::QueryOnly,
        }
    }
}

/// Initialize the light encoder by masked language modeling against the
/// frozen backbone. A temporary linear head maps the light encoder's token
/// outputs to vocabulary scores; it is discarded afterwards. The IC/CRF
/// output layers take no part and keep their fresh initialization.
pub fn init_light_encoder_mlm(
    backbone: &Backbone,
    light: &mut LightEncoder,
    pairs: &[ConversationPair],
    vocab: &Vocab,
    cfg: &InitConfig,
) -> Result<TrainingTrace> {
    if !backbone.is_frozen() {
        return Err(Error::Config(
            "init_light_encoder_mlm requires a frozen backbone (call backbone.freeze() first)"
                .into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Data(
            "init_light_encoder_mlm: empty pair corpus".into(),
        ));
    }
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let rep = light.config.rep_width();

    // temporary MLM head, trained together with the light encoder body
    light.params.insert(Parameter::trainable(
        "tmp_mlm.w",
        Tensor::glorot(rep, vocab.len(), &mut rng),
    ))?;
    light.params.insert(Parameter::trainable(
        "tmp_mlm.b",
        Tensor::zeros(1, vocab.len()),
    ))?;
    // output layers are excluded from this stage
    let is_head = |name: &str| name.starts_with("light.ic.") || name.starts_with("light.crf.");
    light.params.set_trainable_where(is_head, false);

    let result = run_init_loop(backbone, light, pairs, vocab, cfg, &mut rng, started);

    light.params.set_trainable_where(is_head, true);
    light.params.remove("tmp_mlm.w");
    light.params.remove("tmp_mlm.b");
    result
}

fn run_init_loop(
    backbone: &Backbone,
    light: &mut LightEncoder,
    pairs: &[ConversationPair],
    vocab: &Vocab,
    cfg: &InitConfig,
    rng: &mut StdRng,
    started: Instant,
) -> Result<TrainingTrace> {
    let mut opt = Adam::new(cfg.optimizer);
    let mut trace = TrainingTrace::default();
    let mut step_index = 0u64;
    let max_positions = backbone.config.max_positions;

    for _epoch in 0..cfg.epochs {
        let mut stats = MaskingStats::default();
        let mut examples = build_epoch_examples(
            cfg.regime,
            pairs,
            &[],
            vocab,
            &cfg.masking,
            max_positions,
            rng,
            &mut stats,
        )?;
        examples.shuffle(rng);
        let mut batches = batchify(&examples, cfg.batch_size, None)?;
        batches.retain(|b| b.len() == cfg.batch_size);

        let mut epoch_correct = 0usize;
        let mut epoch_total = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let mut total_loss: Option<Var> = None;
            let mut n_positions = 0usize;
            let mut n_correct = 0usize;
            for example in batch {
                let labeled = example.masked_positions();
                if labeled.is_empty() {
                    continue;
                }
                let acts = backbone.encode(
                    &example.input_ids,
                    &example.type_ids,
                    &example.attention_mask,
                )?;
                let pooled = light.pool(&mut tape, &acts)?;
                let rep = light.encode_light(&mut tape, pooled, Some(rng))?;
                let rows = tape.gather_rows(rep, &labeled)?;
                let w = tape.param(light.params.get("tmp_mlm.w"));
                let b = tape.param(light.params.get("tmp_mlm.b"));
                let logits = tape.matmul(rows, w)?;
                let logits = tape.add_row(logits, b)?;

                let targets: Vec<usize> = labeled
                    .iter()
                    .map(|&p| example.mlm_labels[p].expect("labeled"))
                    .collect();
                let lt = tape.value(logits);
                for (row, &gold) in targets.iter().enumerate() {
                    let r = lt.row_slice(row);
                    let mut best = 0usize;
                    for (j, &v) in r.iter().enumerate() {
                        if v > r[best] {
                            best = j;
                        }
                    }
                    if best == gold {
                        n_correct += 1;
                    }
                }
                let lse = tape.lse_rows(logits);
                let logp = tape.sub_col(logits, lse)?;
                let flat: Vec<usize> = targets
                    .iter()
                    .enumerate()
                    .map(|(row, &g)| row * vocab.len() + g)
                    .collect();
                let picked = tape.gather_elems(logp, &flat)?;
                let sum = tape.sum_all(picked);
                let loss = tape.scale(sum, -1.0);
                n_positions += targets.len();
                total_loss = Some(match total_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let Some(total) = total_loss else { continue };
            let mean = tape.scale(total, 1.0 / n_positions as f64);
            let loss_value = tape.value(mean).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite init loss at step {step_index}"
                )));
            }
            let grads = tape.backward(mean)?;
            light.params.load_grads(&grads)?;
            opt.step(&mut light.params)?;
            trace.steps.push(TraceStep {
                step: step_index,
                loss: loss_value,
                masked_acc: n_correct as f64 / n_positions as f64,
            });
            step_index += 1;
            epoch_correct += n_correct;
            epoch_total += n_positions;
        }
        trace.epoch_masked_acc.push(if epoch_total == 0 {
            0.0
        } else {
            epoch_correct as f64 / epoch_total as f64
        });
        trace.masking_stats.zero_candidate_examples += stats.zero_candidate_examples;
    }
    trace.wall_clock = started.elapsed();
    Ok(trace)
}

#[derive(Debug, Clone, Copy)]
pub struct MlmEval {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n_positions: usize,
}

/// Masked-token accuracy and mean cross-entropy over held-out examples.
/// `logits_fn` maps an example to full `[seq_len × vocab]` scores; the
/// metric reads only the labeled positions, so unlabeled logits are inert.
pub fn evaluate_mlm<F>(examples: &[CLMExample], mut logits_fn: F) -> Result<MlmEval>
where
    F: FnMut(&CLMExample) -> Result<Tensor>,
{
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0f64;
    for example in examples {
        let labeled = example.masked_positions();
        if labeled.is_empty() {
            continue;
        }
        let logits = logits_fn(example)?;
        if logits.rows() != example.len() {
            return Err(Error::ShapeMismatch {
                op: "evaluate_mlm",
                lhs: vec![logits.rows()],
                rhs: vec![example.len()],
            });
        }
        for &pos in &labeled {
            let gold = example.mlm_labels[pos].expect("labeled");
            let row = logits.row_slice(pos);
            let mut best = 0usize;
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
                max = max.max(v);
            }
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[gold];
            if best == gold {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("evaluate_mlm: no labeled positions".into()));
    }
    Ok(MlmEval {
        accuracy: correct as f64 / total as f64,
        mean_loss: loss_sum / total as f64,
        n_positions: total,
    })
}

/// Full-vocabulary logits from the backbone for one example (inference).
pub fn backbone_mlm_logits(backbone: &Backbone, example: &CLMExample) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let outputs = tape_forward(backbone, &mut tape, example, None)?;
    let hidden = *outputs.last().expect("n_layers >= 1");
    let logits = backbone.mlm_logits_on_tape(&mut tape, hidden)?;
    Ok(tape.value(logits).clone())
}
