//! Bidirectional transformer encoder (mini-BERT): additive token/position/type
//! embeddings, post-norm attention + feed-forward blocks, per-layer activation
//! output for downstream pooling, and a tied masked-LM head.

use crate::error::{Error, Result};
use crate::param::{ParamSet, Parameter};
use crate::tape::{Tape, Var, NEG_MASK};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_type_ids: usize,
    pub dropout: f64,
}

pub const LN_EPS: f64 = 1e-12;

impl BackboneConfig {
    /// Desk-scale default: full pre-training plus fine-tuning in minutes on
    /// one CPU core.
    pub fn toy(vocab_size: usize) -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_positions: 64,
            n_type_ids: 2,
            dropout: 0.1,
        }
    }

    /// BERT-base dimensions, used by the analytic parameter accounting.
    pub fn paper() -> Self {
        BackboneConfig {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            vocab_size: 30522,
            max_positions: 512,
            n_type_ids: 2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_type_ids != 2 {
            return Err(Error::Config(
                "type embedding is binary: n_type_ids must be 2".into(),
            ));
        }
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer token representations from a frozen (or training) backbone.
/// Exactly `n_layers` entries; the raw embedding sum is not included.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub per_layer: Vec<Tensor>,
    pub attention_mask: Vec<bool>,
}

impl LayerActivations {
    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn seq_len(&self) -> usize {
        self.attention_mask.len()
    }

    pub fn d_model(&self) -> usize {
        self.per_layer[0].cols()
    }
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_model;

        let add = |name: String, t: Tensor, params: &mut ParamSet| -> Result<()> {
            params.insert(Parameter::trainable(&name, t))
        };
        add(
            "embed.token".into(),
            Tensor::uniform(config.vocab_size, d, 0.02, &mut rng),
            &mut params,
        )?;
        add(
            "embed.pos".into(),
            Tensor::uniform(config.max_positions, d, 0.02, &mut rng),
            &mut params,
        )?;
        add(
            "embed.type".into(),
            Tensor::uniform(config.n_type_ids, d, 0.02, &mut rng),
            &mut params,
        )?;
        add("embed.ln.g".into(), Tensor::full(1, d, 1.0), &mut params)?;
        add("embed.ln.b".into(), Tensor::zeros(1, d), &mut params)?;
        for l in 0..config.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                add(
                    format!("layer{l}.attn.{proj}"),
                    Tensor::glorot(d, d, &mut rng),
                    &mut params,
                )?;
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                add(
                    format!("layer{l}.attn.{bias}"),
                    Tensor::zeros(1, d),
                    &mut params,
                )?;
            }
            add(
                format!("layer{l}.ln1.g"),
                Tensor::full(1, d, 1.0),
                &mut params,
            )?;
            add(format!("layer{l}.ln1.b"), Tensor::zeros(1, d), &mut params)?;
            add(
                format!("layer{l}.ffn.w1"),
                Tensor::glorot(d, config.d_ff, &mut rng),
                &mut params,
            )?;
            add(
                format!("layer{l}.ffn.b1"),
                Tensor::zeros(1, config.d_ff),
                &mut params,
            )?;
            add(
                format!("layer{l}.ffn.w2"),
                Tensor::glorot(config.d_ff, d, &mut rng),
                &mut params,
            )?;
            add(format!("layer{l}.ffn.b2"), Tensor::zeros(1, d), &mut params)?;
            add(
                format!("layer{l}.ln2.g"),
                Tensor::full(1, d, 1.0),
                &mut params,
            )?;
            add(format!("layer{l}.ln2.b"), Tensor::zeros(1, d), &mut params)?;
        }
        add(
            "mlm.bias".into(),
            Tensor::zeros(1, config.vocab_size),
            &mut params,
        )?;
        Ok(Backbone { config, params })
    }

    pub fn freeze(&mut self) {
        self.params.set_all_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_all_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    fn check_ids(&self, token_ids: &[usize], type_ids: &[u8], positions: &[usize]) -> Result<()> {
        if token_ids.len() != type_ids.len() || token_ids.len() != positions.len() {
            return Err(Error::Data(format!(
                "embed: got {} token ids, {} type ids, {} positions",
                token_ids.len(),
                type_ids.len(),
                positions.len()
            )));
        }
        if token_ids.is_empty() {
            return Err(Error::Data("embed: empty sequence".into()));
        }
        if let Some(i) = token_ids.iter().position(|&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id at sequence index",
                index: i,
                limit: self.config.vocab_size,
            });
        }
        if let Some(i) = type_ids
            .iter()
            .position(|&t| t as usize >= self.config.n_type_ids)
        {
            return Err(Error::IndexOutOfRange {
                what: "type id at sequence index",
                index: i,
                limit: 2,
            });
        }
        if let Some(i) = positions
            .iter()
            .position(|&p| p >= self.config.max_positions)
        {
            return Err(Error::IndexOutOfRange {
                what: "position at sequence index",
                index: i,
                limit: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// token + position + type embedding, then layer norm.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        type_ids: &[u8],
        positions: &[usize],
    ) -> Result<Var> {
        self.check_ids(token_ids, type_ids, positions)?;
        let tok_table = tape.param(self.params.get("embed.token"));
        let pos_table = tape.param(self.params.get("embed.pos"));
        let type_table = tape.param(self.params.get("embed.type"));
        let tok = tape.gather_rows(tok_table, token_ids)?;
        let pos = tape.gather_rows(pos_table, positions)?;
        let typ_idx: Vec<usize> = type_ids.iter().map(|&t| t as usize).collect();
        let typ = tape.gather_rows(type_table, &typ_idx)?;
        let sum = tape.add(tok, pos)?;
        let sum = tape.add(sum, typ)?;
        let g = tape.param(self.params.get("embed.ln.g"));
        let b = tape.param(self.params.get("embed.ln.b"));
        tape.layer_norm(sum, g, b, LN_EPS)
    }

    /// Full encoder pass; returns each of the `n_layers` transformer layer
    /// outputs. `rng` enables train-mode dropout on attention weights.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        token_ids: &[usize],
        type_ids: &[u8],
        mask: &[bool],
        mut rng: Option<&mut StdRng>,
    ) -> Result<Vec<Var>> {
        let seq_len = token_ids.len();
        if seq_len > self.config.max_positions {
            return Err(Error::Data(format!(
                "sequence length {seq_len} exceeds max positions {}",
                self.config.max_positions
            )));
        }
        if mask.len() != seq_len {
            return Err(Error::Data(format!(
                "attention mask length {} does not match sequence length {seq_len}",
                mask.len()
            )));
        }
        let positions: Vec<usize> = (0..seq_len).collect();
        let mut x = self.embed_on_tape(tape, token_ids, type_ids, &positions)?;

        // additive column mask: 0 at real positions, NEG_MASK at padding
        let mask_row: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 0.0 } else { NEG_MASK })
            .collect();
        let mask_mat = {
            let mut data = Vec::with_capacity(seq_len * seq_len);
            for _ in 0..seq_len {
                data.extend_from_slice(&mask_row);
            }
            tape.constant(Tensor::matrix(seq_len, seq_len, data)?)
        };

        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let p = |suffix: &str| format!("layer{l}.{suffix}");
            let wq = tape.param(self.params.get(&p("attn.wq")));
            let wk = tape.param(self.params.get(&p("attn.wk")));
            let wv = tape.param(self.params.get(&p("attn.wv")));
            let wo = tape.param(self.params.get(&p("attn.wo")));
            let bq = tape.param(self.params.get(&p("attn.bq")));
            let bk = tape.param(self.params.get(&p("attn.bk")));
            let bv = tape.param(self.params.get(&p("attn.bv")));
            let bo = tape.param(self.params.get(&p("attn.bo")));

            let q = tape.matmul(x, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(x, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(x, wv)?;
            let v = tape.add_row(v, bv)?;

            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let qh = tape.narrow_cols(q, h * dk, dk)?;
                let kh = tape.narrow_cols(k, h * dk, dk)?;
                let vh = tape.narrow_cols(v, h * dk, dk)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let scores = tape.add(scores, mask_mat)?;
                let mut attn = tape.softmax_rows(scores);
                if let Some(r) = rng.as_deref_mut() {
                    attn = tape.dropout(attn, self.config.dropout, r)?;
                }
                heads.push(tape.matmul(attn, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let attn_out = tape.matmul(ctx, wo)?;
            let attn_out = tape.add_row(attn_out, bo)?;
            let res = tape.add(x, attn_out)?;
            let g1 = tape.param(self.params.get(&p("ln1.g")));
            let b1 = tape.param(self.params.get(&p("ln1.b")));
            x = tape.layer_norm(res, g1, b1, LN_EPS)?;

            let w1 = tape.param(self.params.get(&p("ffn.w1")));
            let fb1 = tape.param(self.params.get(&p("ffn.b1")));
            let w2 = tape.param(self.params.get(&p("ffn.w2")));
            let fb2 = tape.param(self.params.get(&p("ffn.b2")));
            let ff = tape.matmul(x, w1)?;
            let ff = tape.add_row(ff, fb1)?;
            let ff = tape.gelu(ff);
            let ff = tape.matmul(ff, w2)?;
            let ff = tape.add_row(ff, fb2)?;
            let res = tape.add(x, ff)?;
            let g2 = tape.param(self.params.get(&p("ln2.g")));
            let b2 = tape.param(self.params.get(&p("ln2.b")));
            x = tape.layer_norm(res, g2, b2, LN_EPS)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Vocabulary scores per position, tied to the token embedding table.
    pub fn mlm_logits_on_tape(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let (_, width) = tape.shape(hidden);
        if width != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "mlm_logits",
                lhs: vec![width],
                rhs: vec![self.config.d_model],
            });
        }
        let table = tape.param(self.params.get("embed.token"));
        let bias = tape.param(self.params.get("mlm.bias"));
        let logits = tape.matmul_nt(hidden, table)?;
        tape.add_row(logits, bias)
    }

    /// Eager encode for frozen/inference use: no gradients, no dropout.
    pub fn encode(
        &self,
        token_ids: &[usize],
        type_ids: &[u8],
        mask: &[bool],
    ) -> Result<LayerActivations> {
        let mut tape = Tape::inference();
        let outputs = self.forward_on_tape(&mut tape, token_ids, type_ids, mask, None)?;
        Ok(LayerActivations {
            per_layer: outputs.into_iter().map(|v| tape.value(v).clone()).collect(),
            attention_mask: mask.to_vec(),
        })
    }

    /// Eager embedding lookup (inference).
    pub fn embed(
        &self,
        token_ids: &[usize],
        type_ids: &[u8],
        positions: &[usize],
    ) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = self.embed_on_tape(&mut tape, token_ids, type_ids, positions)?;
        Ok(tape.value(v).clone())
    }

    /// Eager MLM head over a hidden matrix (inference).
    pub fn mlm_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let h = tape.constant(hidden.clone());
        let v = self.mlm_logits_on_tape(&mut tape, h)?;
        Ok(tape.value(v).clone())
    }
}


#[cfg(test)]
mod pair_embedding_tests {
    use super::*;
    use crate::clm_data::{build_pair_sequence, ConversationPair, Vocab};

    #[test]
    fn pair_segments_receive_their_type_embeddings() {
        // query tokens carry type 0, response tokens type 1; flipping the
        // response segment's types must change exactly those rows
        let pair = ConversationPair {
            query_tokens: vec!["play".into(), "it".into()],
            response_tokens: vec!["playing".into(), "it".into()],
            query_entities: vec![],
            response_entities: vec![],
        };
        let vocab = Vocab::from_tokens(["play", "it", "playing"]);
        let seq = build_pair_sequence(&pair, &vocab, 16).unwrap();
        let cfg = BackboneConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab.len(),
            max_positions: 16,
            n_type_ids: 2,
            dropout: 0.0,
        };
        let bb = Backbone::new(cfg, 11).unwrap();
        let positions: Vec<usize> = (0..seq.input_ids.len()).collect();
        let with_types = bb.embed(&seq.input_ids, &seq.type_ids, &positions).unwrap();
        let all_zero = bb
            .embed(&seq.input_ids, &vec![0; seq.input_ids.len()], &positions)
            .unwrap();
        for (i, &t) in seq.type_ids.iter().enumerate() {
            if t == 0 {
                assert_eq!(
                    with_types.row_slice(i),
                    all_zero.row_slice(i),
                    "query row {i} moved"
                );
            } else {
                assert_ne!(
                    with_types.row_slice(i),
                    all_zero.row_slice(i),
                    "response row {i} static"
                );
            }
        }
    }
}
