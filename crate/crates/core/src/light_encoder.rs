//! The per-domain light encoder: pooling over frozen-backbone layer
//! activations, a dense projection, an optional 2-layer BiLSTM, and joint
//! intent-softmax + slot-CRF heads. Only these weights train during domain
//! adaptation; the backbone is shared and frozen.

use crate::backbone::{Backbone, LayerActivations};
use crate::bio::{extract_spans, SlotSpan};
use crate::clm_data::{Vocab, CLS_ID, SEP_ID};
use crate::crf::{crf_nll, crf_viterbi};
use crate::datasim::LabeledUtterance;
use crate::error::{Error, Result};
use crate::metrics::{ic_metrics, sl_span_f1};
use crate::optim::{Adam, OptimizerConfig};
use crate::param::{ParamSet, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingStrategy {
    /// Concatenate every backbone layer per token (width n_layers × d_model).
    ConcatAll,
    /// Softmax-normalized learned mix of the layers, times a learned scale.
    LearnedLinear,
    /// The last backbone layer unchanged.
    LastLayer,
}

impl PoolingStrategy {
    pub fn pool_width(&self, n_layers: usize, d_model: usize) -> usize {
        match self {
            PoolingStrategy::ConcatAll => n_layers * d_model,
            PoolingStrategy::LearnedLinear | PoolingStrategy::LastLayer => d_model,
        }
    }
}

/// How the utterance-level representation for intent classification is read
/// off the token representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcRepr {
    /// Position 0 (the `[CLS]` slot).
    ClsToken,
    /// Mean over the real token rows.
    MeanPool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightEncoderConfig {
    pub pooling: PoolingStrategy,
    pub use_bilstm: bool,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub dense_out: usize,
    pub dropout: f64,
    pub ic_repr: IcRepr,
}

impl LightEncoderConfig {
    fn base(pooling: PoolingStrategy, use_bilstm: bool, hidden: usize) -> Self {
        LightEncoderConfig {
            pooling,
            use_bilstm,
            lstm_hidden: hidden,
            lstm_layers: 2,
            dense_out: hidden,
            dropout: 0.1,
            ic_repr: IcRepr::ClsToken,
        }
    }

    /// The four named variants. `hidden` is 256 at paper scale.
    pub fn concat_lstm(hidden: usize) -> Self {
        Self::base(PoolingStrategy::ConcatAll, true, hidden)
    }

    pub fn linear_lstm(hidden: usize) -> Self {
        Self::base(PoolingStrategy::LearnedLinear, true, hidden)
    }

    pub fn lastlayer_lstm(hidden: usize) -> Self {
        Self::base(PoolingStrategy::LastLayer, true, hidden)
    }

    pub fn concat(hidden: usize) -> Self {
        Self::base(PoolingStrategy::ConcatAll, false, hidden)
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.pooling, self.use_bilstm) {
            (PoolingStrategy::ConcatAll, true) => "Concat+LSTM",
            (PoolingStrategy::LearnedLinear, true) => "Linear+LSTM",
            (PoolingStrategy::LastLayer, true) => "LastLayer+LSTM",
            (PoolingStrategy::ConcatAll, false) => "Concat",
            (PoolingStrategy::LearnedLinear, false) => "Linear",
            (PoolingStrategy::LastLayer, false) => "LastLayer",
        }
    }

    pub fn by_variant(name: &str, hidden: usize) -> Result<Self> {
        match name {
            "concat-lstm" => Ok(Self::concat_lstm(hidden)),
            "linear-lstm" => Ok(Self::linear_lstm(hidden)),
            "lastlayer-lstm" => Ok(Self::lastlayer_lstm(hidden)),
            "concat" => Ok(Self::concat(hidden)),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (concat-lstm, linear-lstm, lastlayer-lstm, concat)"
            ))),
        }
    }

    /// Width of the per-token representation fed to the output heads.
    pub fn rep_width(&self) -> usize {
        if self.use_bilstm {
            2 * self.lstm_hidden
        } else {
            self.dense_out
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lstm_hidden == 0 || self.dense_out == 0 {
            return Err(Error::Config(
                "light encoder widths must be positive".into(),
            ));
        }
        if self.use_bilstm && self.lstm_layers == 0 {
            return Err(Error::Config(
                "lstm_layers must be >= 1 when the BiLSTM is enabled".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Intent labels and BIO slot labels for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSchema {
    pub domain_name: String,
    pub intents: Vec<String>,
    pub slot_labels: Vec<String>,
}

impl DomainSchema {
    pub fn from_grammar(grammar: &crate::datasim::Grammar) -> DomainSchema {
        let mut slot_labels = vec!["O".to_string()];
        for ty in grammar.slot_types() {
            slot_labels.push(format!("B-{ty}"));
            slot_labels.push(format!("I-{ty}"));
        }
        DomainSchema {
            domain_name: grammar.domain.clone(),
            intents: grammar.intents(),
            slot_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() {
            return Err(Error::Config("schema has no intents".into()));
        }
        let o_count = self
            .slot_labels
            .iter()
            .filter(|l| l.as_str() == "O")
            .count();
        if o_count != 1 {
            return Err(Error::Config(format!(
                "schema must contain O exactly once, found {o_count}"
            )));
        }
        for label in &self.slot_labels {
            if label == "O" {
                continue;
            }
            let (prefix, ty) = label
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad slot label {label:?}")))?;
            if prefix != "B" && prefix != "I" {
                return Err(Error::Config(format!("bad slot label {label:?}")));
            }
            let partner = if prefix == "B" {
                format!("I-{ty}")
            } else {
                format!("B-{ty}")
            };
            if !self.slot_labels.contains(&partner) {
                return Err(Error::Config(format!(
                    "slot label {label} lacks its partner {partner}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn n_slots(&self) -> usize {
        self.slot_labels.len()
    }

    pub fn intent_id(&self, name: &str) -> Result<usize> {
        self.intents
            .iter()
            .position(|i| i == name)
            .ok_or_else(|| Error::Data(format!("intent {name:?} not in schema")))
    }

    pub fn slot_id(&self, tag: &str) -> Result<usize> {
        self.slot_labels
            .iter()
            .position(|l| l == tag)
            .ok_or_else(|| Error::Data(format!("slot label {tag:?} not in schema")))
    }

    /// Line-oriented schema file with `[intents]` and `[slots]` sections.
    pub fn to_text(&self) -> String {
        let mut s = format!("# domain: {}\n[intents]\n", self.domain_name);
        for i in &self.intents {
            s.push_str(i);
            s.push('\n');
        }
        s.push_str("[slots]\n");
        for l in &self.slot_labels {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<DomainSchema> {
        let mut domain_name = "unknown".to_string();
        let mut intents = Vec::new();
        let mut slot_labels = Vec::new();
        let mut section = "";
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# domain:") {
                domain_name = rest.trim().to_string();
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            match line {
                "[intents]" => section = "intents",
                "[slots]" => section = "slots",
                label => match section {
                    "intents" => intents.push(label.to_string()),
                    "slots" => slot_labels.push(label.to_string()),
                    _ => {
                        return Err(Error::Data(format!(
                            "schema line {label:?} outside any section"
                        )))
                    }
                },
            }
        }
        let schema = DomainSchema {
            domain_name,
            intents,
            slot_labels,
        };
        schema.validate()?;
        Ok(schema)
    }
}

/// The trainable per-domain model.
#[derive(Debug)]
pub struct LightEncoder {
    pub config: LightEncoderConfig,
    pub schema: DomainSchema,
    pub params: ParamSet,
    pub n_backbone_layers: usize,
    pub d_model: usize,
}

impl LightEncoder {
    pub fn new(
        config: LightEncoderConfig,
        schema: DomainSchema,
        n_backbone_layers: usize,
        d_model: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let pool_width = config.pooling.pool_width(n_backbone_layers, d_model);
        let rep = config.rep_width();
        let h = config.lstm_hidden;
        let c = schema.n_intents();
        let k = schema.n_slots();

        if config.pooling == PoolingStrategy::LearnedLinear {
            params.insert(Parameter::trainable(
                "light.mixer.w",
                Tensor::zeros(1, n_backbone_layers),
            ))?;
            params.insert(Parameter::trainable(
                "light.mixer.scale",
                Tensor::scalar(1.0),
            ))?;
        }
        params.insert(Parameter::trainable(
            "light.dense.w",
            Tensor::glorot(pool_width, config.dense_out, &mut rng),
        ))?;
        params.insert(Parameter::trainable(
            "light.dense.b",
            Tensor::zeros(1, config.dense_out),
        ))?;
        if config.use_bilstm {
            for layer in 0..config.lstm_layers {
                let input = if layer == 0 { config.dense_out } else { 2 * h };
                for dir in ["fw", "bw"] {
                    let prefix = format!("light.lstm{layer}.{dir}");
                    params.insert(Parameter::trainable(
                        &format!("{prefix}.w"),
                        Tensor::glorot(input, 4 * h, &mut rng),
                    ))?;
                    params.insert(Parameter::trainable(
                        &format!("{prefix}.u"),
                        Tensor::glorot(h, 4 * h, &mut rng),
                    ))?;
                    // forget-gate bias +1 (gate layout: input, forget, cell, output)
                    let mut bias = Tensor::zeros(1, 4 * h);
                    for j in h..2 * h {
                        bias.data[j] = 1.0;
                    }
                    params.insert(Parameter::trainable(&format!("{prefix}.b"), bias))?;
                }
            }
        }
        params.insert(Parameter::trainable(
            "light.ic.w",
            Tensor::glorot(rep, c, &mut rng),
        ))?;
        params.insert(Parameter::trainable("light.ic.b", Tensor::zeros(1, c)))?;
        params.insert(Parameter::trainable(
            "light.crf.emit.w",
            Tensor::glorot(rep, k, &mut rng),
        ))?;
        params.insert(Parameter::trainable(
            "light.crf.emit.b",
            Tensor::zeros(1, k),
        ))?;
        params.insert(Parameter::trainable(
            "light.crf.trans",
            Tensor::uniform(k, k, 0.1, &mut rng),
        ))?;
        params.insert(Parameter::trainable(
            "light.crf.start",
            Tensor::uniform(1, k, 0.1, &mut rng),
        ))?;
        params.insert(Parameter::trainable(
            "light.crf.stop",
            Tensor::uniform(1, k, 0.1, &mut rng),
        ))?;

        Ok(LightEncoder {
            config,
            schema,
            params,
            n_backbone_layers,
            d_model,
        })
    }

    pub fn pool_width(&self) -> usize {
        self.config
            .pooling
            .pool_width(self.n_backbone_layers, self.d_model)
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    /// Names of the output-layer parameters excluded from MLM initialization.
    pub fn head_param_names() -> [&'static str; 7] {
        [
            "light.ic.w",
            "light.ic.b",
            "light.crf.emit.w",
            "light.crf.emit.b",
            "light.crf.trans",
            "light.crf.start",
            "light.crf.stop",
        ]
    }

    /// Combine per-layer activations into per-token pooled vectors.
    pub fn pool(&self, tape: &mut Tape, acts: &LayerActivations) -> Result<Var> {
        if acts.n_layers() != self.n_backbone_layers {
            return Err(Error::Data(format!(
                "pooling expects {} backbone layers, got {}",
                self.n_backbone_layers,
                acts.n_layers()
            )));
        }
        let layers: Vec<Var> = acts
            .per_layer
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        self.pool_vars(tape, &layers)
    }

    /// As [`LightEncoder::pool`], over layer outputs already on the tape (used when the
    /// backbone itself is training, e.g. the full fine-tuning baseline).
    pub fn pool_vars(&self, tape: &mut Tape, layers: &[Var]) -> Result<Var> {
        if layers.len() != self.n_backbone_layers {
            return Err(Error::Data(format!(
                "pooling expects {} backbone layers, got {}",
                self.n_backbone_layers,
                layers.len()
            )));
        }
        match self.config.pooling {
            PoolingStrategy::ConcatAll => tape.concat_cols(layers),
            PoolingStrategy::LastLayer => Ok(*layers.last().expect("n_layers >= 1")),
            PoolingStrategy::LearnedLinear => {
                let w = tape.param(self.params.get("light.mixer.w"));
                let scale = tape.param(self.params.get("light.mixer.scale"));
                let weights = tape.softmax_rows(w);
                let mut mixed: Option<Var> = None;
                for (k, &layer) in layers.iter().enumerate() {
                    let wk = tape.gather_elems(weights, &[k])?;
                    let term = tape.scale_by(layer, wk)?;
                    mixed = Some(match mixed {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                tape.scale_by(mixed.expect("n_layers >= 1"), scale)
            }
        }
    }

    /// Dense projection (GELU) and, when configured, the BiLSTM stack.
    pub fn encode_light(
        &self,
        tape: &mut Tape,
        pooled: Var,
        mut rng: Option<&mut StdRng>,
    ) -> Result<Var> {
        let (_, width) = tape.shape(pooled);
        if width != self.pool_width() {
            return Err(Error::ShapeMismatch {
                op: "encode_light",
                lhs: vec![width],
                rhs: vec![self.pool_width()],
            });
        }
        let w = tape.param(self.params.get("light.dense.w"));
        let b = tape.param(self.params.get("light.dense.b"));
        let dense = tape.matmul(pooled, w)?;
        let dense = tape.add_row(dense, b)?;
        let mut x = tape.gelu(dense);
        if let Some(r) = rng.take() {
            x = tape.dropout(x, self.config.dropout, r)?;
        }
        if !self.config.use_bilstm {
            return Ok(x);
        }
        for layer in 0..self.config.lstm_layers {
            let fw = self.lstm_direction(tape, x, layer, "fw", false)?;
            let bw = self.lstm_direction(tape, x, layer, "bw", true)?;
            x = tape.concat_cols(&[fw, bw])?;
        }
        Ok(x)
    }

    fn lstm_direction(
        &self,
        tape: &mut Tape,
        input: Var,
        layer: usize,
        dir: &str,
        reverse: bool,
    ) -> Result<Var> {
        let (t_len, _) = tape.shape(input);
        let h = self.config.lstm_hidden;
        let prefix = format!("light.lstm{layer}.{dir}");
        let w = tape.param(self.params.get(&format!("{prefix}.w")));
        let u = tape.param(self.params.get(&format!("{prefix}.u")));
        let b = tape.param(self.params.get(&format!("{prefix}.b")));

        let ordered: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        let x = tape.gather_rows(input, &ordered)?;
        let xproj = tape.matmul(x, w)?;
        let xproj = tape.add_row(xproj, b)?;

        let mut hidden = tape.constant(Tensor::zeros(1, h));
        let mut cell = tape.constant(Tensor::zeros(1, h));
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.gather_rows(xproj, &[t])?;
            let hu = tape.matmul(hidden, u)?;
            let gates = tape.add(xt, hu)?;
            let i_g = tape.narrow_cols(gates, 0, h)?;
            let f_g = tape.narrow_cols(gates, h, h)?;
            let g_g = tape.narrow_cols(gates, 2 * h, h)?;
            let o_g = tape.narrow_cols(gates, 3 * h, h)?;
            let i_g = tape.sigmoid(i_g);
            let f_g = tape.sigmoid(f_g);
            let g_g = tape.tanh(g_g);
            let o_g = tape.sigmoid(o_g);
            let fc = tape.mul(f_g, cell)?;
            let ig = tape.mul(i_g, g_g)?;
            cell = tape.add(fc, ig)?;
            let tc = tape.tanh(cell);
            hidden = tape.mul(o_g, tc)?;
            outputs.push(hidden);
        }
        if reverse {
            outputs.reverse();
        }
        tape.concat_rows(&outputs)
    }

    /// Utterance-level intent scores.
    pub fn ic_logits(&self, tape: &mut Tape, rep: Var) -> Result<Var> {
        let (t_len, _) = tape.shape(rep);
        let repr = match self.config.ic_repr {
            IcRepr::ClsToken => tape.gather_rows(rep, &[0])?,
            IcRepr::MeanPool => {
                // mean over the real token rows (skip [CLS] and trailing [SEP])
                let rows: Vec<usize> = (1..t_len.saturating_sub(1).max(1)).collect();
                let rows = if rows.is_empty() { vec![0] } else { rows };
                let tokens = tape.gather_rows(rep, &rows)?;
                let ones = tape.constant(Tensor::full(1, rows.len(), 1.0 / rows.len() as f64));
                tape.matmul(ones, tokens)?
            }
        };
        let w = tape.param(self.params.get("light.ic.w"));
        let b = tape.param(self.params.get("light.ic.b"));
        let logits = tape.matmul(repr, w)?;
        tape.add_row(logits, b)
    }

    /// Per-token slot emission scores over rows `1..=n_tokens` (skipping the
    /// `[CLS]` row and trailing `[SEP]`).
    pub fn slot_emissions(&self, tape: &mut Tape, rep: Var, n_tokens: usize) -> Result<Var> {
        let (t_len, _) = tape.shape(rep);
        if n_tokens + 2 != t_len {
            return Err(Error::Data(format!(
                "representation has {t_len} rows, expected {} for {n_tokens} tokens",
                n_tokens + 2
            )));
        }
        let rows: Vec<usize> = (1..=n_tokens).collect();
        let token_rep = tape.gather_rows(rep, &rows)?;
        let w = tape.param(self.params.get("light.crf.emit.w"));
        let b = tape.param(self.params.get("light.crf.emit.b"));
        let em = tape.matmul(token_rep, w)?;
        tape.add_row(em, b)
    }

    fn crf_params_on_tape(&self, tape: &mut Tape) -> (Var, Var, Var) {
        (
            tape.param(self.params.get("light.crf.trans")),
            tape.param(self.params.get("light.crf.start")),
            tape.param(self.params.get("light.crf.stop")),
        )
    }

    /// Joint loss: intent cross-entropy plus CRF negative log-likelihood,
    /// weighted 1:1.
    pub fn joint_loss(
        &self,
        tape: &mut Tape,
        ic_logits: Var,
        gold_intent: usize,
        emissions: Var,
        gold_slots: &[usize],
    ) -> Result<Var> {
        let (_, n_intents) = tape.shape(ic_logits);
        if gold_intent >= n_intents {
            return Err(Error::IndexOutOfRange {
                what: "gold intent",
                index: gold_intent,
                limit: n_intents,
            });
        }
        let (_, k) = tape.shape(emissions);
        if let Some(&bad) = gold_slots.iter().find(|&&y| y >= k) {
            return Err(Error::IndexOutOfRange {
                what: "gold slot label",
                index: bad,
                limit: k,
            });
        }
        let ic_loss = cross_entropy(tape, ic_logits, gold_intent)?;
        let (trans, start, stop) = self.crf_params_on_tape(tape);
        let sl_loss = crf_nll(tape, emissions, trans, start, stop, gold_slots)?;
        tape.add(ic_loss, sl_loss)
    }

    /// Full forward to the joint loss for one framed utterance.
    pub fn loss_from_activations(
        &self,
        tape: &mut Tape,
        acts: &LayerActivations,
        gold_intent: usize,
        gold_slots: &[usize],
        rng: Option<&mut StdRng>,
    ) -> Result<Var> {
        let pooled = self.pool(tape, acts)?;
        self.loss_from_pooled(tape, pooled, gold_intent, gold_slots, rng)
    }

    /// As [`LightEncoder::loss_from_activations`] but over backbone layer outputs already
    /// on the tape, so gradients can flow into a training backbone.
    pub fn loss_from_layer_vars(
        &self,
        tape: &mut Tape,
        layers: &[Var],
        gold_intent: usize,
        gold_slots: &[usize],
        rng: Option<&mut StdRng>,
    ) -> Result<Var> {
        let pooled = self.pool_vars(tape, layers)?;
        self.loss_from_pooled(tape, pooled, gold_intent, gold_slots, rng)
    }

    fn loss_from_pooled(
        &self,
        tape: &mut Tape,
        pooled: Var,
        gold_intent: usize,
        gold_slots: &[usize],
        rng: Option<&mut StdRng>,
    ) -> Result<Var> {
        let rep = self.encode_light(tape, pooled, rng)?;
        let ic = self.ic_logits(tape, rep)?;
        let em = self.slot_emissions(tape, rep, gold_slots.len())?;
        self.joint_loss(tape, ic, gold_intent, em, gold_slots)
    }

    /// Decode one utterance: argmax intent and Viterbi slot spans with BIO
    /// repair. Deterministic.
    pub fn predict(
        &self,
        backbone: &Backbone,
        vocab: &Vocab,
        tokens: &[String],
    ) -> Result<Prediction> {
        if tokens.is_empty() {
            return Err(Error::Data("predict: empty utterance".into()));
        }
        let (ids, types, mask) = frame_utterance(tokens, vocab);
        let acts = backbone.encode(&ids, &types, &mask)?;
        let mut tape = Tape::inference();
        let pooled = self.pool(&mut tape, &acts)?;
        let rep = self.encode_light(&mut tape, pooled, None)?;
        let ic = self.ic_logits(&mut tape, rep)?;
        let intent_id = argmax(tape.value(ic).row_slice(0));
        let em = self.slot_emissions(&mut tape, rep, tokens.len())?;
        let emissions = tape.value(em).clone();
        let (path, _) = crf_viterbi(
            &emissions,
            &self.params.get("light.crf.trans").tensor,
            &self.params.get("light.crf.start").tensor,
            &self.params.get("light.crf.stop").tensor,
        )?;
        let tags: Vec<String> = path
            .iter()
            .map(|&y| self.schema.slot_labels[y].clone())
            .collect();
        let spans = extract_spans(&tags)?;
        Ok(Prediction {
            intent: self.schema.intents[intent_id].clone(),
            intent_id,
            tags,
            spans,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub intent: String,
    pub intent_id: usize,
    /// Repaired, well-formed BIO tags.
    pub tags: Vec<String>,
    pub spans: Vec<SlotSpan>,
}

/// `-log softmax(logits)[target]` for a single-row logits matrix.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let lse = tape.lse_rows(logits);
    let logp = tape.sub_col(logits, lse)?;
    let picked = tape.gather_elems(logp, &[target])?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0))
}

/// `[CLS] tokens [SEP]` framing with all-zero type ids and an all-true mask.
pub fn frame_utterance(tokens: &[String], vocab: &Vocab) -> (Vec<usize>, Vec<u8>, Vec<bool>) {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(CLS_ID);
    for t in tokens {
        ids.push(vocab.id(t));
    }
    ids.push(SEP_ID);
    let n = ids.len();
    (ids, vec![0u8; n], vec![true; n])
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ── fine-tuning ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Evaluate on dev data every this many epochs (0 = final epoch only).
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-3),
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochEval {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_ic_accuracy: f64,
    pub dev_span_f1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneTrace {
    pub epochs: Vec<EpochEval>,
}

impl FinetuneTrace {
    pub fn final_eval(&self) -> Option<&EpochEval> {
        self.epochs.last()
    }
}

/// Train the light encoder on labeled utterances against a frozen backbone.
///
/// Backbone activations are computed once per utterance and reused across
/// epochs; gradients can only reach light-encoder parameters.
pub fn finetune(
    backbone: &Backbone,
    light: &mut LightEncoder,
    vocab: &Vocab,
    train: &[LabeledUtterance],
    dev: &[LabeledUtterance],
    cfg: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    if !backbone.is_frozen() {
        return Err(Error::Config(
            "finetune requires a frozen backbone (call backbone.freeze() first)".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Data("finetune: empty training set".into()));
    }
    let prepared: Vec<PreparedUtterance> = train
        .iter()
        .map(|u| PreparedUtterance::build(u, backbone, light, vocab))
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(cfg.optimizer);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut trace = FinetuneTrace::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut batch_loss: Option<Var> = None;
            for &idx in batch {
                let p = &prepared[idx];
                let loss = light.loss_from_activations(
                    &mut tape,
                    &p.acts,
                    p.intent,
                    &p.slots,
                    Some(&mut rng),
                )?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("nonempty batch");
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.value(mean).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {n_batches}"
                )));
            }
            epoch_loss += loss_value;
            n_batches += 1;
            let grads = tape.backward(mean)?;
            light.params.load_grads(&grads)?;
            opt.step(&mut light.params)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let do_eval = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        if do_eval && !dev.is_empty() {
            let (ic_acc, span_f1) = evaluate(backbone, light, vocab, dev)?;
            trace.epochs.push(EpochEval {
                epoch,
                train_loss: epoch_loss / n_batches.max(1) as f64,
                dev_ic_accuracy: ic_acc,
                dev_span_f1: span_f1,
            });
        } else {
            trace.epochs.push(EpochEval {
                epoch,
                train_loss: epoch_loss / n_batches.max(1) as f64,
                dev_ic_accuracy: f64::NAN,
                dev_span_f1: f64::NAN,
            });
        }
    }
    Ok(trace)
}

type FramedGold = (Vec<usize>, Vec<u8>, Vec<bool>, usize, Vec<usize>);

/// Whole-model fine-tuning baseline: backbone and light encoder both train.
/// Far heavier than [`finetune`] (the backbone runs on the tape each step);
/// exists to realize the full fine-tuning comparison row.
pub fn finetune_full(
    backbone: &mut Backbone,
    light: &mut LightEncoder,
    vocab: &Vocab,
    train: &[LabeledUtterance],
    dev: &[LabeledUtterance],
    cfg: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    if train.is_empty() {
        return Err(Error::Data("finetune_full: empty training set".into()));
    }
    backbone.unfreeze();
    // the MLM head takes no part in the downstream loss
    backbone
        .params
        .set_trainable_where(|n| n == "mlm.bias", false);
    let gold: Vec<FramedGold> = train
        .iter()
        .map(|u| {
            if u.tokens.is_empty() {
                return Err(Error::Data("finetune_full: empty utterance".into()));
            }
            let (ids, types, mask) = frame_utterance(&u.tokens, vocab);
            let intent = light.schema.intent_id(&u.intent)?;
            let slots = u
                .bio_tags
                .iter()
                .map(|t| light.schema.slot_id(t))
                .collect::<Result<Vec<_>>>()?;
            Ok((ids, types, mask, intent, slots))
        })
        .collect::<Result<_>>()?;

    let mut opt_backbone = Adam::new(cfg.optimizer);
    let mut opt_light = Adam::new(cfg.optimizer);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut trace = FinetuneTrace::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..gold.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut batch_loss: Option<Var> = None;
            for &idx in batch {
                let (ids, types, mask, intent, slots) = &gold[idx];
                let layers =
                    backbone.forward_on_tape(&mut tape, ids, types, mask, Some(&mut rng))?;
                let loss = light.loss_from_layer_vars(
                    &mut tape,
                    &layers,
                    *intent,
                    slots,
                    Some(&mut rng),
                )?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("nonempty batch");
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.value(mean).item();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {n_batches}"
                )));
            }
            epoch_loss += loss_value;
            n_batches += 1;
            let grads = tape.backward(mean)?;
            // gradients split across the two parameter sets by name prefix
            for (name, g) in grads.iter() {
                let target = if name.starts_with("light.") {
                    light.params.get_mut(name)
                } else {
                    backbone.params.get_mut(name)
                };
                target.tensor.grad = Some(g.data.clone());
            }
            opt_backbone.step(&mut backbone.params)?;
            opt_light.step(&mut light.params)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let do_eval = last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        let (ic, f1) = if do_eval && !dev.is_empty() {
            evaluate(backbone, light, vocab, dev)?
        } else {
            (f64::NAN, f64::NAN)
        };
        trace.epochs.push(EpochEval {
            epoch,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            dev_ic_accuracy: ic,
            dev_span_f1: f1,
        });
    }
    backbone
        .params
        .set_trainable_where(|n| n == "mlm.bias", true);
    Ok(trace)
}

/// IC accuracy and SL span F1 of the model on labeled data.
pub fn evaluate(
    backbone: &Backbone,
    light: &LightEncoder,
    vocab: &Vocab,
    data: &[LabeledUtterance],
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("evaluate: empty dataset".into()));
    }
    let mut pred_intents = Vec::with_capacity(data.len());
    let mut gold_intents = Vec::with_capacity(data.len());
    let mut pred_tags = Vec::with_capacity(data.len());
    let mut gold_tags = Vec::with_capacity(data.len());
    for u in data {
        let pred = light.predict(backbone, vocab, &u.tokens)?;
        pred_intents.push(pred.intent_id);
        gold_intents.push(light.schema.intent_id(&u.intent)?);
        pred_tags.push(pred.tags);
        gold_tags.push(u.bio_tags.clone());
    }
    let ic = ic_metrics(&pred_intents, &gold_intents)?;
    let sl = sl_span_f1(&pred_tags, &gold_tags)?;
    Ok((ic.accuracy, sl.f1))
}

struct PreparedUtterance {
    acts: LayerActivations,
    intent: usize,
    slots: Vec<usize>,
}

impl PreparedUtterance {
    fn build(
        u: &LabeledUtterance,
        backbone: &Backbone,
        light: &LightEncoder,
        vocab: &Vocab,
    ) -> Result<PreparedUtterance> {
        if u.tokens.is_empty() {
            return Err(Error::Data(
                "finetune: empty utterance in training data".into(),
            ));
        }
        let (ids, types, mask) = frame_utterance(&u.tokens, vocab);
        let acts = backbone.encode(&ids, &types, &mask)?;
        let intent = light.schema.intent_id(&u.intent)?;
        let slots = u
            .bio_tags
            .iter()
            .map(|t| light.schema.slot_id(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedUtterance {
            acts,
            intent,
            slots,
        })
    }
}
