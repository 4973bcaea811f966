//! Conversational masked-LM training examples: vocabulary, query-response
//! sequence layout with binary type ids, entity-focused masking, batching,
//! and the pair-corpus file format.

use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::Rng;
use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Closed, case-folded vocabulary with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from surface tokens; duplicates collapse, order is preserved.
    pub fn from_tokens<I, S>(tokens: I) -> Vocab
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, usize> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for tok in tokens {
            let folded = tok.as_ref().to_lowercase();
            if !token_to_id.contains_key(&folded) {
                token_to_id.insert(folded.clone(), id_to_token.len());
                id_to_token.push(folded);
            }
        }
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id; // reserved tokens match verbatim
        }
        let folded = token.to_lowercase();
        self.token_to_id.get(&folded).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn is_special(id: usize) -> bool {
        matches!(id, PAD_ID | CLS_ID | SEP_ID | MASK_ID)
    }

    /// First id eligible as a random-replacement draw (skips the reserved block).
    pub fn first_content_id(&self) -> usize {
        RESERVED.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Vocab> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(
                "vocab file must start with the reserved tokens".into(),
            ));
        }
        Ok(Vocab::from_tokens(lines[RESERVED.len()..].iter().copied()))
    }
}

/// A user query and system response with marked entity spans (token-level,
/// half-open). The response may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationPair {
    pub query_tokens: Vec<String>,
    pub response_tokens: Vec<String>,
    pub query_entities: Vec<(usize, usize)>,
    pub response_entities: Vec<(usize, usize)>,
}

impl ConversationPair {
    pub fn validate(&self) -> Result<()> {
        check_spans(&self.query_entities, self.query_tokens.len(), "query")?;
        check_spans(
            &self.response_entities,
            self.response_tokens.len(),
            "response",
        )
    }
}

fn check_spans(spans: &[(usize, usize)], len: usize, side: &str) -> Result<()> {
    let mut last_end = 0usize;
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    for &(s, e) in &sorted {
        if s >= e || e > len {
            return Err(Error::Data(format!(
                "{side} entity span ({s},{e}) invalid for length {len}"
            )));
        }
        if s < last_end {
            return Err(Error::Data(format!("{side} entity spans overlap at {s}")));
        }
        last_end = e;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Candidates are exactly the entity positions.
    EntitiesOnly,
    /// Every non-special position is a candidate.
    Standard,
    /// Entity spans are wholly masked with probability 0.5, otherwise
    /// per-token; non-entity positions sample at the standard rate.
    Mixed,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskingPolicy {
    pub mode: MaskMode,
    pub mask_rate: f64,
    /// (mask-token, random-token, keep-original); must sum to 1.
    pub replace_probs: (f64, f64, f64),
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "mask_rate {} outside (0,1]",
                self.mask_rate
            )));
        }
        let (a, b, c) = self.replace_probs;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "replace_probs {:?} must sum to 1",
                self.replace_probs
            )));
        }
        Ok(())
    }
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mode: MaskMode::Mixed,
            mask_rate: 0.15,
            replace_probs: (0.8, 0.1, 0.1),
        }
    }
}

/// One masked-LM training example. `mlm_labels` holds the original token id
/// at selected positions and `None` everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct CLMExample {
    pub input_ids: Vec<usize>,
    pub type_ids: Vec<u8>,
    pub attention_mask: Vec<bool>,
    pub mlm_labels: Vec<Option<usize>>,
}

impl CLMExample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.mlm_labels[i].is_some())
            .collect()
    }
}

/// Running counters for masking edge cases.
#[derive(Debug, Default, Clone, Copy)]
pub struct MaskingStats {
    pub zero_candidate_examples: u64,
}

/// `[CLS] q₁…qₙ [SEP] r₁…rₘ [SEP]` with type ids 0 through the first
/// `[SEP]` and 1 after, entity spans re-indexed into the combined layout.
#[derive(Debug, Clone)]
pub struct PairSequence {
    pub input_ids: Vec<usize>,
    pub type_ids: Vec<u8>,
    pub entity_spans: Vec<(usize, usize)>,
    /// Size of the vocabulary the ids were drawn from; bounds the
    /// random-replacement draw during masking.
    pub vocab_size: usize,
}

pub fn build_pair_sequence(
    pair: &ConversationPair,
    vocab: &Vocab,
    max_positions: usize,
) -> Result<PairSequence> {
    pair.validate()?;
    let total = pair.query_tokens.len() + pair.response_tokens.len() + 3;
    if total > max_positions {
        return Err(Error::Data(format!(
            "pair sequence length {total} exceeds max positions {max_positions}"
        )));
    }
    let mut input_ids = Vec::with_capacity(total);
    let mut type_ids = Vec::with_capacity(total);
    let mut entity_spans = Vec::new();

    input_ids.push(CLS_ID);
    type_ids.push(0);
    let q_offset = input_ids.len();
    for tok in &pair.query_tokens {
        input_ids.push(vocab.id(tok));
        type_ids.push(0);
    }
    input_ids.push(SEP_ID);
    type_ids.push(0);
    let r_offset = input_ids.len();
    for tok in &pair.response_tokens {
        input_ids.push(vocab.id(tok));
        type_ids.push(1);
    }
    input_ids.push(SEP_ID);
    type_ids.push(1);

    for &(s, e) in &pair.query_entities {
        entity_spans.push((s + q_offset, e + q_offset));
    }
    for &(s, e) in &pair.response_entities {
        entity_spans.push((s + r_offset, e + r_offset));
    }
    Ok(PairSequence {
        input_ids,
        type_ids,
        entity_spans,
        vocab_size: vocab.len(),
    })
}

/// Select and replace positions per the policy. Special tokens are never
/// candidates; selected positions record their original id as the label.
pub fn apply_masking(
    seq: &PairSequence,
    policy: &MaskingPolicy,
    rng: &mut StdRng,
    stats: &mut MaskingStats,
) -> Result<CLMExample> {
    policy.validate()?;
    let n = seq.input_ids.len();
    let in_entity: Vec<bool> = {
        let mut v = vec![false; n];
        for &(s, e) in &seq.entity_spans {
            for slot in v.iter_mut().take(e).skip(s) {
                *slot = true;
            }
        }
        v
    };

    // Whole-span coin flips for mixed mode, drawn in span order.
    let whole_span: Vec<bool> = match policy.mode {
        MaskMode::Mixed => seq
            .entity_spans
            .iter()
            .map(|_| rng.gen::<f64>() < 0.5)
            .collect(),
        _ => Vec::new(),
    };
    let span_of = |pos: usize| {
        seq.entity_spans
            .iter()
            .position(|&(s, e)| pos >= s && pos < e)
    };

    let mut selected = Vec::new();
    let mut any_candidate = false;
    for pos in 0..n {
        if Vocab::is_special(seq.input_ids[pos]) {
            continue;
        }
        let candidate = match policy.mode {
            MaskMode::EntitiesOnly => in_entity[pos],
            MaskMode::Standard | MaskMode::Mixed => true,
        };
        if !candidate {
            continue;
        }
        any_candidate = true;
        let take = match policy.mode {
            MaskMode::EntitiesOnly | MaskMode::Standard => rng.gen::<f64>() < policy.mask_rate,
            MaskMode::Mixed => {
                if in_entity[pos] && whole_span[span_of(pos).expect("position inside a span")] {
                    true
                } else {
                    rng.gen::<f64>() < policy.mask_rate
                }
            }
        };
        if take {
            selected.push(pos);
        }
    }
    if !any_candidate {
        stats.zero_candidate_examples += 1;
    }

    let mut input_ids = seq.input_ids.clone();
    let mut mlm_labels = vec![None; n];
    let (p_mask, p_random, _keep) = policy.replace_probs;
    let content_range = RESERVED.len()..seq.vocab_size;
    for &pos in &selected {
        mlm_labels[pos] = Some(seq.input_ids[pos]);
        let roll = rng.gen::<f64>();
        if roll < p_mask {
            input_ids[pos] = MASK_ID;
        } else if roll < p_mask + p_random && !content_range.is_empty() {
            input_ids[pos] = rng.gen_range(content_range.clone());
        }
        // else: keep the original token
    }
    Ok(CLMExample {
        input_ids,
        type_ids: seq.type_ids.clone(),
        attention_mask: vec![true; n],
        mlm_labels,
    })
}

/// `[CLS] q [SEP]` with all-zero type ids; masking as [`apply_masking`].
pub fn build_query_only_example(
    pair: &ConversationPair,
    vocab: &Vocab,
    policy: &MaskingPolicy,
    rng: &mut StdRng,
    stats: &mut MaskingStats,
    max_positions: usize,
) -> Result<CLMExample> {
    check_spans(&pair.query_entities, pair.query_tokens.len(), "query")?;
    let total = pair.query_tokens.len() + 2;
    if total > max_positions {
        return Err(Error::Data(format!(
            "query sequence length {total} exceeds max positions {max_positions}"
        )));
    }
    let mut input_ids = Vec::with_capacity(total);
    input_ids.push(CLS_ID);
    for tok in &pair.query_tokens {
        input_ids.push(vocab.id(tok));
    }
    input_ids.push(SEP_ID);
    let entity_spans = pair
        .query_entities
        .iter()
        .map(|&(s, e)| (s + 1, e + 1))
        .collect();
    let seq = PairSequence {
        input_ids,
        type_ids: vec![0; total],
        entity_spans,
        vocab_size: vocab.len(),
    };
    apply_masking(&seq, policy, rng, stats)
}

/// Right-pad examples into fixed-size batches; attention mask false and
/// labels `None` at padding.
pub fn batchify(
    examples: &[CLMExample],
    batch_size: usize,
    pad_to: Option<usize>,
) -> Result<Vec<Vec<CLMExample>>> {
    if examples.is_empty() {
        return Err(Error::Data("batchify: empty example list".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batchify: batch_size must be >= 1".into()));
    }
    let mut batches = Vec::new();
    for chunk in examples.chunks(batch_size) {
        let width = pad_to
            .unwrap_or(0)
            .max(chunk.iter().map(|e| e.len()).max().unwrap_or(0));
        let mut batch = Vec::with_capacity(chunk.len());
        for ex in chunk {
            let mut padded = ex.clone();
            while padded.input_ids.len() < width {
                padded.input_ids.push(PAD_ID);
                padded.type_ids.push(0);
                padded.attention_mask.push(false);
                padded.mlm_labels.push(None);
            }
            batch.push(padded);
        }
        batches.push(batch);
    }
    Ok(batches)
}

// ── pairs corpus format ─────────────────────────────────────────────────

fn spans_to_field(spans: &[(usize, usize)]) -> String {
    spans
        .iter()
        .map(|(s, e)| format!("{s}-{e}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn spans_from_field(field: &str, lineno: usize) -> Result<Vec<(usize, usize)>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|part| {
            let (s, e) = part.split_once('-').ok_or_else(|| {
                Error::Data(format!("pairs corpus line {lineno}: bad span {part:?}"))
            })?;
            let start = s.parse::<usize>().map_err(|_| {
                Error::Data(format!("pairs corpus line {lineno}: bad span start {s:?}"))
            })?;
            let end = e.parse::<usize>().map_err(|_| {
                Error::Data(format!("pairs corpus line {lineno}: bad span end {e:?}"))
            })?;
            Ok((start, end))
        })
        .collect()
}

/// One record per line: query, response, query spans, response spans.
pub fn write_pairs_corpus(pairs: &[ConversationPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.query_tokens.join(" "),
            p.response_tokens.join(" "),
            spans_to_field(&p.query_entities),
            spans_to_field(&p.response_entities),
        ));
    }
    out
}

pub fn read_pairs_corpus(text: &str) -> Result<Vec<ConversationPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "pairs corpus line {}: expected 4 tab-separated fields, got {}",
                i + 1,
                fields.len()
            )));
        }
        let pair = ConversationPair {
            query_tokens: fields[0].split_whitespace().map(str::to_string).collect(),
            response_tokens: fields[1].split_whitespace().map(str::to_string).collect(),
            query_entities: spans_from_field(fields[2], i + 1)?,
            response_entities: spans_from_field(fields[3], i + 1)?,
        };
        pair.validate()?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn music_pair() -> ConversationPair {
        // 4-token query, 8-token response; "shake it off" marked on both sides
        ConversationPair {
            query_tokens: toks("play shake it off"),
            response_tokens: toks("play shake it off by taylor swift tonight"),
            query_entities: vec![(1, 4)],
            response_entities: vec![(1, 4)],
        }
    }

    fn vocab_for(pair: &ConversationPair) -> Vocab {
        Vocab::from_tokens(pair.query_tokens.iter().chain(&pair.response_tokens))
    }

    #[test]
    fn pair_layout_and_reindexed_spans() {
        let pair = music_pair();
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 64).unwrap();
        assert_eq!(seq.input_ids.len(), 4 + 8 + 3);
        let mut expected_types = vec![0u8; 6];
        expected_types.extend(vec![1u8; 9]);
        assert_eq!(seq.type_ids, expected_types);
        assert_eq!(seq.entity_spans, vec![(2, 5), (7, 10)]);
        assert_eq!(seq.input_ids[0], CLS_ID);
        assert_eq!(seq.input_ids[5], SEP_ID);
        assert_eq!(seq.input_ids[14], SEP_ID);
        // same surface word maps to the same id across segments
        assert_eq!(seq.input_ids[1], seq.input_ids[6]);
    }

    #[test]
    fn empty_response_layout() {
        let pair = ConversationPair {
            query_tokens: toks("play music"),
            response_tokens: vec![],
            query_entities: vec![],
            response_entities: vec![],
        };
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 16).unwrap();
        assert_eq!(
            seq.input_ids,
            vec![CLS_ID, vocab.id("play"), vocab.id("music"), SEP_ID, SEP_ID]
        );
        assert_eq!(seq.type_ids, vec![0, 0, 0, 0, 1]);
        assert!(seq.entity_spans.is_empty());
    }

    #[test]
    fn overlong_pair_rejected_with_measured_length() {
        let pair = music_pair();
        let vocab = vocab_for(&pair);
        let err = build_pair_sequence(&pair, &vocab, 10).unwrap_err();
        assert!(err.to_string().contains("15"), "{err}");
    }

    #[test]
    fn entities_only_full_rate_masks_exactly_the_entity_positions() {
        let pair = music_pair();
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 64).unwrap();
        let policy = MaskingPolicy {
            mode: MaskMode::EntitiesOnly,
            mask_rate: 1.0,
            replace_probs: (1.0, 0.0, 0.0),
        };
        let mut rng = StdRng::seed_from_u64(0);
        let mut stats = MaskingStats::default();
        let ex = apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap();
        assert_eq!(ex.masked_positions(), vec![2, 3, 4, 7, 8, 9]);
        for pos in ex.masked_positions() {
            assert_eq!(ex.input_ids[pos], MASK_ID);
            assert_eq!(ex.mlm_labels[pos], Some(seq.input_ids[pos]));
        }
        assert_eq!(stats.zero_candidate_examples, 0);
    }

    #[test]
    fn zero_candidates_counted() {
        let pair = ConversationPair {
            query_tokens: toks("play music"),
            response_tokens: vec![],
            query_entities: vec![],
            response_entities: vec![],
        };
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 16).unwrap();
        let policy = MaskingPolicy {
            mode: MaskMode::EntitiesOnly,
            ..Default::default()
        };
        let mut rng = StdRng::seed_from_u64(0);
        let mut stats = MaskingStats::default();
        let ex = apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap();
        assert!(ex.masked_positions().is_empty());
        assert_eq!(stats.zero_candidate_examples, 1);
    }

    #[test]
    fn standard_rate_concentrates() {
        let pair = music_pair();
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 64).unwrap();
        let policy = MaskingPolicy {
            mode: MaskMode::Standard,
            mask_rate: 0.15,
            replace_probs: (0.8, 0.1, 0.1),
        };
        let mut rng = StdRng::seed_from_u64(13);
        let mut stats = MaskingStats::default();
        let mut candidates = 0usize;
        let mut masked = 0usize;
        while candidates < 100_000 {
            let ex = apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap();
            candidates += ex.len() - 3; // non-special positions
            masked += ex.masked_positions().len();
        }
        let rate = masked as f64 / candidates as f64;
        assert!((rate - 0.15).abs() < 0.01, "rate = {rate}");
    }

    #[test]
    fn replace_probs_realized() {
        // large vocab so a random draw colliding with the original is rare
        let wide: Vec<String> = (0..500).map(|i| format!("tok{i}")).collect();
        let vocab = Vocab::from_tokens(wide.iter());
        let pair = ConversationPair {
            query_tokens: wide[..10].to_vec(),
            response_tokens: wide[10..20].to_vec(),
            query_entities: vec![],
            response_entities: vec![],
        };
        let seq = build_pair_sequence(&pair, &vocab, 64).unwrap();
        let policy = MaskingPolicy {
            mode: MaskMode::Standard,
            mask_rate: 1.0,
            replace_probs: (0.8, 0.1, 0.1),
        };
        let mut rng = StdRng::seed_from_u64(29);
        let mut stats = MaskingStats::default();
        let mut n_mask = 0usize;
        let mut n_rand = 0usize;
        let mut n_keep = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let ex = apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap();
            for pos in ex.masked_positions() {
                total += 1;
                if ex.input_ids[pos] == MASK_ID {
                    n_mask += 1;
                } else if ex.input_ids[pos] == seq.input_ids[pos] {
                    n_keep += 1;
                } else {
                    n_rand += 1;
                }
            }
        }
        // a random draw reproducing the original counts as keep; with a
        // 500-token vocab that inflates keep by ~0.0002, inside tolerance
        let t = total as f64;
        assert!((n_mask as f64 / t - 0.8).abs() < 0.01);
        assert!((n_rand as f64 / t - 0.1).abs() < 0.01);
        assert!((n_keep as f64 / t - 0.1).abs() < 0.01);
    }

    #[test]
    fn query_only_excludes_response_and_zero_types() {
        let mut pair = music_pair();
        pair.response_tokens = toks("zebra unique responseword");
        pair.response_entities = vec![];
        let vocab = Vocab::from_tokens(pair.query_tokens.iter().chain(&pair.response_tokens));
        let zebra = vocab.id("zebra");
        let policy = MaskingPolicy {
            mode: MaskMode::Mixed,
            mask_rate: 0.5,
            replace_probs: (1.0, 0.0, 0.0), // no random draws: ids stay traceable
        };
        let mut rng = StdRng::seed_from_u64(7);
        let mut stats = MaskingStats::default();
        for _ in 0..50 {
            let ex =
                build_query_only_example(&pair, &vocab, &policy, &mut rng, &mut stats, 32).unwrap();
            assert!(ex.type_ids.iter().all(|&t| t == 0));
            assert!(!ex.input_ids.contains(&zebra));
            assert_eq!(ex.input_ids[0], CLS_ID);
            assert_eq!(*ex.input_ids.last().unwrap(), SEP_ID);
        }
    }

    #[test]
    fn segment_law_prefix_zeros_then_ones() {
        let pair = music_pair();
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 64).unwrap();
        let first_one = seq.type_ids.iter().position(|&t| t == 1).unwrap();
        assert!(seq.type_ids[..first_one].iter().all(|&t| t == 0));
        assert!(seq.type_ids[first_one..].iter().all(|&t| t == 1));
    }

    #[test]
    fn masking_is_seed_deterministic() {
        let pair = music_pair();
        let vocab = vocab_for(&pair);
        let seq = build_pair_sequence(&pair, &vocab, 64).unwrap();
        let policy = MaskingPolicy::default();
        let run = || {
            let mut rng = StdRng::seed_from_u64(99);
            let mut stats = MaskingStats::default();
            (0..20)
                .map(|_| apply_masking(&seq, &policy, &mut rng, &mut stats).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batchify_pads_to_longest() {
        let short = CLMExample {
            input_ids: vec![CLS_ID, 5, 6, 7, SEP_ID],
            type_ids: vec![0; 5],
            attention_mask: vec![true; 5],
            mlm_labels: vec![None, Some(5), None, None, None],
        };
        let long = CLMExample {
            input_ids: vec![CLS_ID, 5, 6, 7, 8, 9, SEP_ID],
            type_ids: vec![0; 7],
            attention_mask: vec![true; 7],
            mlm_labels: vec![None; 7],
        };
        let batches = batchify(&[short.clone(), long.clone()], 2, None).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0][0].len(), 7);
        assert_eq!(batches[0][0].input_ids[5..], [PAD_ID, PAD_ID]);
        assert_eq!(batches[0][0].attention_mask[5..], [false, false]);
        assert_eq!(batches[0][0].mlm_labels[5..], [None, None]);
        assert_eq!(batches[0][1], long);

        // batch of one roundtrips unchanged modulo padding
        let single = batchify(std::slice::from_ref(&short), 1, None).unwrap();
        assert_eq!(single[0][0], short);
    }

    #[test]
    fn vocab_reserved_ids_and_case_folding() {
        let vocab = Vocab::from_tokens(["Play", "SHAKE", "play"]);
        assert_eq!(vocab.id("[PAD]"), PAD_ID);
        assert_eq!(vocab.id("[CLS]"), CLS_ID);
        assert_eq!(vocab.id("play"), vocab.id("PLAY"));
        assert_eq!(vocab.id("never-seen-token"), UNK_ID);
        assert_eq!(vocab.len(), 7);
        let back = Vocab::from_text(&vocab.to_text()).unwrap();
        assert_eq!(back.id("shake"), vocab.id("shake"));
        assert_eq!(back.len(), vocab.len());
    }

    #[test]
    fn pairs_corpus_roundtrip() {
        let pairs = vec![
            music_pair(),
            ConversationPair {
                query_tokens: toks("hello there"),
                response_tokens: vec![],
                query_entities: vec![],
                response_entities: vec![],
            },
        ];
        let text = write_pairs_corpus(&pairs);
        let back = read_pairs_corpus(&text).unwrap();
        assert_eq!(back, pairs);
    }
}
