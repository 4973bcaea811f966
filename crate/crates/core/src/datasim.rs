//! Synthetic SLU data: grammar-based corpus generation, an ASR-style noise
//! channel with exact self-recorded alignments, word error rate, Levenshtein
//! alignment, and label projection from reference to hypothesis tokens.

use crate::bio::{repair_tags, tags_from_spans, SlotSpan};
use crate::clm_data::ConversationPair;
use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use std::collections::BTreeSet;
use std::fmt;

// ── grammar ─────────────────────────────────────────────────────────────

/// One utterance pattern: tokens with `<slot>` placeholders, a paired system
/// response pattern, and a sampling weight.
#[derive(Debug, Clone)]
pub struct Template {
    pub intent: String,
    pub pattern: Vec<String>,
    pub response: Vec<String>,
    pub weight: f64,
}

impl Template {
    pub fn new(intent: &str, pattern: &str, response: &str, weight: f64) -> Self {
        Template {
            intent: intent.to_string(),
            pattern: pattern.split_whitespace().map(str::to_string).collect(),
            response: response.split_whitespace().map(str::to_string).collect(),
            weight,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Grammar {
    pub domain: String,
    pub templates: Vec<Template>,
    pub lexicons: Vec<(String, Vec<String>)>,
}

fn placeholder(token: &str) -> Option<&str> {
    token.strip_prefix('<').and_then(|t| t.strip_suffix('>'))
}

impl Grammar {
    pub fn lexicon(&self, slot: &str) -> Option<&[String]> {
        self.lexicons
            .iter()
            .find(|(name, _)| name == slot)
            .map(|(_, entries)| entries.as_slice())
    }

    /// Intent labels in first-appearance order.
    pub fn intents(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for t in &self.templates {
            if !seen.contains(&t.intent) {
                seen.push(t.intent.clone());
            }
        }
        seen
    }

    pub fn slot_types(&self) -> Vec<String> {
        self.lexicons.iter().map(|(name, _)| name.clone()).collect()
    }

    /// Every surface token the grammar can emit, sorted and deduplicated.
    /// This is the closed vocabulary for the whole pipeline.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut tokens = BTreeSet::new();
        for t in &self.templates {
            for tok in t.pattern.iter().chain(&t.response) {
                if placeholder(tok).is_none() {
                    tokens.insert(tok.clone());
                }
            }
        }
        for (_, entries) in &self.lexicons {
            for entry in entries {
                for tok in entry.split_whitespace() {
                    tokens.insert(tok.to_string());
                }
            }
        }
        tokens.into_iter().collect()
    }

    fn validate(&self) -> Result<()> {
        for t in &self.templates {
            for tok in t.pattern.iter().chain(&t.response) {
                if let Some(slot) = placeholder(tok) {
                    match self.lexicon(slot) {
                        None => {
                            return Err(Error::Config(format!(
                                "template for {} references unknown lexicon <{slot}>",
                                t.intent
                            )))
                        }
                        Some([]) => {
                            return Err(Error::Config(format!("lexicon <{slot}> is empty")))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Music-domain grammar: 4 intents, 6 slot types. Sized so that the toy
    /// pipelines train in minutes while staying clearly separable.
    pub fn music() -> Grammar {
        let songs = [
            "shake it off",
            "bad blood",
            "blank space",
            "love story",
            "rolling in the deep",
            "someone like you",
            "hey jude",
            "let it be",
            "bohemian rhapsody",
            "hotel california",
            "viva la vida",
            "clocks",
            "counting stars",
            "radioactive",
            "take on me",
            "africa",
        ];
        let artists = [
            "taylor swift",
            "adele",
            "the beatles",
            "queen",
            "coldplay",
            "one republic",
            "imagine dragons",
            "toto",
            "a ha",
            "eagles",
            "drake",
            "rihanna",
        ];
        let playlists = [
            "workout",
            "road trip",
            "focus",
            "party",
            "chill vibes",
            "morning run",
            "study beats",
            "throwback",
        ];
        let albums = [
            "red",
            "twenty five",
            "abbey road",
            "a night at the opera",
            "parachutes",
            "native",
            "evolve",
            "the wall",
        ];
        let genres = [
            "pop",
            "rock",
            "jazz",
            "classical",
            "country",
            "hip hop",
            "electronic",
            "blues",
        ];
        let services = ["spotify", "apple music", "tidal", "deezer", "pandora"];

        let lex = |name: &str, entries: &[&str]| {
            (
                name.to_string(),
                entries.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            )
        };
        Grammar {
            domain: "music".to_string(),
            templates: vec![
                Template::new("PlayMusic", "play <song>", "now playing <song>", 2.0),
                Template::new(
                    "PlayMusic",
                    "play <song> by <artist>",
                    "now playing <song> by <artist>",
                    2.0,
                ),
                Template::new(
                    "PlayMusic",
                    "play some <genre> music",
                    "playing <genre> music for you",
                    1.0,
                ),
                Template::new(
                    "PlayMusic",
                    "play the album <album> on <service>",
                    "playing the album <album> on <service>",
                    1.0,
                ),
                Template::new(
                    "PlayMusic",
                    "put on <song> by <artist>",
                    "here is <song> by <artist>",
                    1.0,
                ),
                Template::new(
                    "AddToPlaylist",
                    "add <song> to my <playlist> playlist",
                    "added <song> to <playlist>",
                    1.5,
                ),
                Template::new(
                    "AddToPlaylist",
                    "add <song> by <artist> to <playlist>",
                    "adding <song> by <artist> to <playlist>",
                    1.0,
                ),
                Template::new(
                    "CreatePlaylist",
                    "create a playlist called <playlist>",
                    "created the playlist <playlist>",
                    1.5,
                ),
                Template::new(
                    "CreatePlaylist",
                    "make a new <genre> playlist named <playlist>",
                    "made the playlist <playlist> with <genre> songs",
                    1.0,
                ),
                Template::new("WhoSings", "who sings <song>", "<song> is by <artist>", 1.5),
                Template::new(
                    "WhoSings",
                    "which artist made the album <album>",
                    "the album <album> is by <artist>",
                    1.0,
                ),
            ],
            lexicons: vec![
                lex("song", &songs),
                lex("artist", &artists),
                lex("playlist", &playlists),
                lex("album", &albums),
                lex("genre", &genres),
                lex("service", &services),
            ],
        }
    }

    pub fn shopping() -> Grammar {
        let items = [
            "paper towels",
            "batteries",
            "dish soap",
            "coffee beans",
            "olive oil",
            "light bulbs",
            "trash bags",
            "toothpaste",
        ];
        let brands = ["acme", "northwind", "contoso", "globex"];
        let counts = ["two", "three", "four", "five", "a dozen"];
        let lex = |name: &str, entries: &[&str]| {
            (
                name.to_string(),
                entries.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            )
        };
        Grammar {
            domain: "shopping".to_string(),
            templates: vec![
                Template::new("OrderItem", "order <item>", "ordered <item> for you", 2.0),
                Template::new(
                    "OrderItem",
                    "buy <count> packs of <brand> <item>",
                    "added <count> packs of <brand> <item> to your order",
                    1.0,
                ),
                Template::new(
                    "TrackOrder",
                    "where is my <item> order",
                    "your <item> order arrives tomorrow",
                    1.0,
                ),
                Template::new(
                    "CancelOrder",
                    "cancel my order of <item>",
                    "canceled the <item> order",
                    1.0,
                ),
            ],
            lexicons: vec![
                lex("item", &items),
                lex("brand", &brands),
                lex("count", &counts),
            ],
        }
    }

    pub fn weather() -> Grammar {
        let cities = [
            "seattle", "boston", "denver", "austin", "portland", "chicago", "miami", "phoenix",
        ];
        let days = ["today", "tomorrow", "monday", "friday", "this weekend"];
        let lex = |name: &str, entries: &[&str]| {
            (
                name.to_string(),
                entries.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            )
        };
        Grammar {
            domain: "weather".to_string(),
            templates: vec![
                Template::new(
                    "GetWeather",
                    "what is the weather in <city>",
                    "the weather in <city> is sunny",
                    2.0,
                ),
                Template::new(
                    "GetForecast",
                    "forecast for <city> <day>",
                    "the forecast for <city> <day> is clear",
                    1.0,
                ),
                Template::new(
                    "GetForecast",
                    "will it rain in <city> <day>",
                    "no rain expected in <city> <day>",
                    1.0,
                ),
            ],
            lexicons: vec![lex("city", &cities), lex("day", &days)],
        }
    }

    pub fn by_name(name: &str) -> Result<Grammar> {
        match name {
            "music" => Ok(Grammar::music()),
            "shopping" => Ok(Grammar::shopping()),
            "weather" => Ok(Grammar::weather()),
            other => Err(Error::Config(format!(
                "unknown grammar {other:?} (available: music, shopping, weather)"
            ))),
        }
    }
}

// ── labeled utterances ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Reference,
    Hypothesis,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Reference => write!(f, "reference"),
            Provenance::Hypothesis => write!(f, "hypothesis"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub domain: String,
    pub tokens: Vec<String>,
    pub intent: String,
    pub bio_tags: Vec<String>,
    pub provenance: Provenance,
}

/// Expand `n` weighted template samples into labeled utterances and their
/// paired conversation examples. Deterministic for a fixed seed.
pub fn generate_corpus(
    grammar: &Grammar,
    n: usize,
    seed: u64,
) -> Result<(Vec<LabeledUtterance>, Vec<ConversationPair>)> {
    if n == 0 {
        return Err(Error::Config("generate_corpus: n must be >= 1".into()));
    }
    grammar.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let total_weight: f64 = grammar.templates.iter().map(|t| t.weight).sum();

    let mut utterances = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let template = pick_weighted(&grammar.templates, total_weight, &mut rng);
        // one value per slot type, shared between query and response
        let mut fills: Vec<(String, Vec<String>)> = Vec::new();
        let mut fill = |slot: &str, rng: &mut StdRng| -> Vec<String> {
            if let Some((_, v)) = fills.iter().find(|(s, _)| s == slot) {
                return v.clone();
            }
            let entries = grammar.lexicon(slot).expect("validated");
            let value: Vec<String> = entries[rng.gen_range(0..entries.len())]
                .split_whitespace()
                .map(str::to_string)
                .collect();
            fills.push((slot.to_string(), value.clone()));
            value
        };

        let (q_tokens, q_spans) = expand(&template.pattern, &mut fill, &mut rng);
        let (r_tokens, r_spans) = expand(&template.response, &mut fill, &mut rng);

        let bio = tags_from_spans(
            q_tokens.len(),
            &q_spans
                .iter()
                .map(|(slot, s, e)| SlotSpan {
                    label: slot.clone(),
                    start: *s,
                    end: *e,
                })
                .collect::<Vec<_>>(),
        );
        utterances.push(LabeledUtterance {
            domain: grammar.domain.clone(),
            tokens: q_tokens.clone(),
            intent: template.intent.clone(),
            bio_tags: bio,
            provenance: Provenance::Reference,
        });
        pairs.push(ConversationPair {
            query_tokens: q_tokens,
            response_tokens: r_tokens,
            query_entities: q_spans.iter().map(|(_, s, e)| (*s, *e)).collect(),
            response_entities: r_spans.iter().map(|(_, s, e)| (*s, *e)).collect(),
        });
    }
    Ok((utterances, pairs))
}

fn pick_weighted<'a>(templates: &'a [Template], total: f64, rng: &mut StdRng) -> &'a Template {
    let mut roll = rng.gen::<f64>() * total;
    for t in templates {
        roll -= t.weight;
        if roll < 0.0 {
            return t;
        }
    }
    templates.last().expect("nonempty template list")
}

type SpanTriple = (String, usize, usize);

fn expand(
    pattern: &[String],
    fill: &mut impl FnMut(&str, &mut StdRng) -> Vec<String>,
    rng: &mut StdRng,
) -> (Vec<String>, Vec<SpanTriple>) {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    for tok in pattern {
        match placeholder(tok) {
            Some(slot) => {
                let value = fill(slot, rng);
                let start = tokens.len();
                tokens.extend(value);
                spans.push((slot.to_string(), start, tokens.len()));
            }
            None => tokens.push(tok.clone()),
        }
    }
    (tokens, spans)
}

// ── noise channel ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfusionMode {
    UniformVocab,
    Edit1Neighbor,
}

#[derive(Debug, Clone)]
pub struct NoiseChannelConfig {
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub confusion_mode: ConfusionMode,
    pub seed: u64,
}

impl NoiseChannelConfig {
    /// Split a target word error rate into the default 60/20/20
    /// substitution/deletion/insertion mix.
    pub fn for_target_wer(wer: f64, seed: u64) -> Self {
        NoiseChannelConfig {
            p_sub: 0.6 * wer,
            p_del: 0.2 * wer,
            p_ins: 0.2 * wer,
            confusion_mode: ConfusionMode::UniformVocab,
            seed,
        }
    }
}

/// The channel: corruption probabilities plus the token pool that
/// substitutions and insertions draw from.
#[derive(Debug, Clone)]
pub struct NoiseChannel {
    pub config: NoiseChannelConfig,
    pub pool: Vec<String>,
}

impl NoiseChannel {
    pub fn new(config: NoiseChannelConfig, pool: Vec<String>) -> Result<Self> {
        for (name, p) in [
            ("p_sub", config.p_sub),
            ("p_del", config.p_del),
            ("p_ins", config.p_ins),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0,1]")));
            }
        }
        if config.p_sub + config.p_del > 1.0 {
            return Err(Error::Config(format!(
                "p_sub + p_del = {} exceeds 1",
                config.p_sub + config.p_del
            )));
        }
        if pool.len() < 2 {
            return Err(Error::Config(
                "noise channel pool needs at least 2 tokens".into(),
            ));
        }
        Ok(NoiseChannel { config, pool })
    }

    pub fn rng(&self) -> StdRng {
        StdRng::seed_from_u64(self.config.seed)
    }

    fn confuse(&self, original: &str, rng: &mut StdRng) -> String {
        match self.config.confusion_mode {
            ConfusionMode::UniformVocab => loop {
                let cand = &self.pool[rng.gen_range(0..self.pool.len())];
                if cand != original {
                    return cand.clone();
                }
            },
            ConfusionMode::Edit1Neighbor => {
                let chars: Vec<char> = original.chars().collect();
                for _ in 0..8 {
                    let mut out = chars.clone();
                    match rng.gen_range(0..3) {
                        0 => {
                            // substitute one character
                            let i = rng.gen_range(0..out.len());
                            out[i] = (b'a' + rng.gen_range(0..26u8)) as char;
                        }
                        1 if out.len() > 1 => {
                            out.remove(rng.gen_range(0..out.len()));
                        }
                        _ => {
                            let i = rng.gen_range(0..=out.len());
                            out.insert(i, (b'a' + rng.gen_range(0..26u8)) as char);
                        }
                    }
                    let cand: String = out.iter().collect();
                    if cand != original {
                        return cand;
                    }
                }
                format!("{original}s")
            }
        }
    }
}

// ── alignment ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { ref_idx: usize, hyp_idx: usize },
    Substitute { ref_idx: usize, hyp_idx: usize },
    Delete { ref_idx: usize },
    Insert { hyp_idx: usize },
}

/// A reference/hypothesis token alignment whose ops replay ref → hyp exactly.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub ref_tokens: Vec<String>,
    pub hyp_tokens: Vec<String>,
    pub ops: Vec<EditOp>,
}

impl AlignedPair {
    /// Apply the ops to `ref_tokens`; must reproduce `hyp_tokens`.
    pub fn replay(&self) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(self.hyp_tokens.len());
        let mut next_ref = 0usize;
        let mut next_hyp = 0usize;
        for op in &self.ops {
            match *op {
                EditOp::Match { ref_idx, hyp_idx } => {
                    self.check_order(ref_idx, next_ref, hyp_idx, next_hyp)?;
                    if self.ref_tokens[ref_idx] != self.hyp_tokens[hyp_idx] {
                        return Err(Error::Data(format!(
                            "match op over differing tokens {:?} vs {:?}",
                            self.ref_tokens[ref_idx], self.hyp_tokens[hyp_idx]
                        )));
                    }
                    out.push(self.ref_tokens[ref_idx].clone());
                    next_ref = ref_idx + 1;
                    next_hyp = hyp_idx + 1;
                }
                EditOp::Substitute { ref_idx, hyp_idx } => {
                    self.check_order(ref_idx, next_ref, hyp_idx, next_hyp)?;
                    out.push(self.hyp_tokens[hyp_idx].clone());
                    next_ref = ref_idx + 1;
                    next_hyp = hyp_idx + 1;
                }
                EditOp::Delete { ref_idx } => {
                    if ref_idx != next_ref {
                        return Err(Error::Data("delete op out of order".into()));
                    }
                    next_ref = ref_idx + 1;
                }
                EditOp::Insert { hyp_idx } => {
                    if hyp_idx != next_hyp {
                        return Err(Error::Data("insert op out of order".into()));
                    }
                    out.push(self.hyp_tokens[hyp_idx].clone());
                    next_hyp = hyp_idx + 1;
                }
            }
        }
        if next_ref != self.ref_tokens.len() || out != self.hyp_tokens {
            return Err(Error::Data("alignment ops do not replay ref to hyp".into()));
        }
        Ok(out)
    }

    fn check_order(
        &self,
        ref_idx: usize,
        next_ref: usize,
        hyp_idx: usize,
        next_hyp: usize,
    ) -> Result<()> {
        if ref_idx != next_ref || hyp_idx != next_hyp {
            return Err(Error::Data("alignment op indices out of order".into()));
        }
        Ok(())
    }
}

/// Corrupt a token sequence, recording the exact edit ops so the alignment
/// is ground truth rather than inferred.
pub fn corrupt(
    tokens: &[String],
    channel: &NoiseChannel,
    rng: &mut StdRng,
) -> (Vec<String>, AlignedPair) {
    let cfg = &channel.config;
    let mut hyp = Vec::with_capacity(tokens.len() + 2);
    let mut ops = Vec::with_capacity(tokens.len() + 2);
    for (i, tok) in tokens.iter().enumerate() {
        if rng.gen::<f64>() < cfg.p_ins {
            let inserted = channel.pool[rng.gen_range(0..channel.pool.len())].clone();
            ops.push(EditOp::Insert { hyp_idx: hyp.len() });
            hyp.push(inserted);
        }
        let roll = rng.gen::<f64>();
        if roll < cfg.p_del {
            ops.push(EditOp::Delete { ref_idx: i });
        } else if roll < cfg.p_del + cfg.p_sub {
            let confused = channel.confuse(tok, rng);
            ops.push(EditOp::Substitute {
                ref_idx: i,
                hyp_idx: hyp.len(),
            });
            hyp.push(confused);
        } else {
            ops.push(EditOp::Match {
                ref_idx: i,
                hyp_idx: hyp.len(),
            });
            hyp.push(tok.clone());
        }
    }
    if rng.gen::<f64>() < cfg.p_ins {
        let inserted = channel.pool[rng.gen_range(0..channel.pool.len())].clone();
        ops.push(EditOp::Insert { hyp_idx: hyp.len() });
        hyp.push(inserted);
    }
    let aligned = AlignedPair {
        ref_tokens: tokens.to_vec(),
        hyp_tokens: hyp.clone(),
        ops,
    };
    (hyp, aligned)
}

/// Minimum edit distance with unit costs.
pub fn edit_distance(reference: &[String], hypothesis: &[String]) -> usize {
    let m = reference.len();
    let n = hypothesis.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// `(S + D + I) / len(ref)`.
pub fn measure_wer(reference: &[String], hypothesis: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("measure_wer: empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level WER: total edits over total reference length.
pub fn corpus_wer(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    let mut edits = 0usize;
    let mut len = 0usize;
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::Data("corpus_wer: empty reference".into()));
        }
        edits += edit_distance(r, h);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::Data("corpus_wer: empty corpus".into()));
    }
    Ok(edits as f64 / len as f64)
}

/// Infer a minimum-cost alignment by dynamic programming, breaking ties by
/// preferring match > substitute > delete > insert.
pub fn align(reference: &[String], hypothesis: &[String]) -> AlignedPair {
    let m = reference.len();
    let n = hypothesis.len();
    let mut d = vec![0usize; (m + 1) * (n + 1)];
    let at = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        d[at(i, 0)] = i;
    }
    for j in 0..=n {
        d[at(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[at(i - 1, j - 1)] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[at(i, j)] = sub.min(d[at(i - 1, j)] + 1).min(d[at(i, j - 1)] + 1);
        }
    }
    let mut ops = Vec::new();
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let cost = d[at(i, j)];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && cost == d[at(i - 1, j - 1)] {
            ops.push(EditOp::Match {
                ref_idx: i - 1,
                hyp_idx: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && cost == d[at(i - 1, j - 1)] + 1 {
            ops.push(EditOp::Substitute {
                ref_idx: i - 1,
                hyp_idx: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && cost == d[at(i - 1, j)] + 1 {
            ops.push(EditOp::Delete { ref_idx: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { hyp_idx: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    AlignedPair {
        ref_tokens: reference.to_vec(),
        hyp_tokens: hypothesis.to_vec(),
        ops,
    }
}

// ── label projection ────────────────────────────────────────────────────

/// Project BIO tags across an alignment: matches and substitutions copy the
/// reference tag, deletions drop it, and insertions become I-X only when
/// strictly inside a projected span. The result is repaired to valid BIO.
pub fn project_labels(ref_tags: &[String], alignment: &AlignedPair) -> Result<Vec<String>> {
    if ref_tags.len() != alignment.ref_tokens.len() {
        return Err(Error::Data(format!(
            "project_labels: {} tags vs {} reference tokens",
            ref_tags.len(),
            alignment.ref_tokens.len()
        )));
    }
    let mut hyp_tags: Vec<Option<String>> = vec![None; alignment.hyp_tokens.len()];
    for op in &alignment.ops {
        match *op {
            EditOp::Match { ref_idx, hyp_idx } | EditOp::Substitute { ref_idx, hyp_idx } => {
                hyp_tags[hyp_idx] = Some(ref_tags[ref_idx].clone());
            }
            EditOp::Delete { .. } | EditOp::Insert { .. } => {}
        }
    }
    let resolved: Vec<String> = (0..hyp_tags.len())
        .map(|i| match &hyp_tags[i] {
            Some(tag) => tag.clone(),
            None => insertion_tag(&hyp_tags, i),
        })
        .collect();
    repair_tags(&resolved)
}

/// An inserted token is inside span X iff its nearest projected neighbors on
/// both sides continue the same span: left is B-X or I-X and right is I-X.
fn insertion_tag(hyp_tags: &[Option<String>], i: usize) -> String {
    let left = hyp_tags[..i].iter().rev().flatten().next();
    let right = hyp_tags[i + 1..].iter().flatten().next();
    if let (Some(l), Some(r)) = (left, right) {
        if let Some(x) = r.strip_prefix("I-") {
            if l == &format!("B-{x}") || l == &format!("I-{x}") {
                return format!("I-{x}");
            }
        }
    }
    "O".to_string()
}

// ── splits ──────────────────────────────────────────────────────────────

/// Seeded shuffle + cumulative-rounding partition: disjoint, exhaustive.
pub fn split_corpus<T: Clone>(corpus: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if fractions.is_empty() {
        return Err(Error::Config("split_corpus: no fractions given".into()));
    }
    if let Some(&bad) = fractions.iter().find(|&&f| f <= 0.0) {
        return Err(Error::Config(format!(
            "split_corpus: fraction {bad} must be > 0"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split_corpus: fractions sum to {total}, expected 1"
        )));
    }
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = StdRng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let n = corpus.len() as f64;
    let mut splits = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0usize;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            corpus.len()
        } else {
            (cum * n).round() as usize
        };
        splits.push(
            indices[start..end]
                .iter()
                .map(|&i| corpus[i].clone())
                .collect(),
        );
        start = end;
    }
    Ok(splits)
}

// ── corpus file format ──────────────────────────────────────────────────

/// One utterance per line: domain, intent, tokens, BIO tags, provenance.
pub fn write_labeled_corpus(utterances: &[LabeledUtterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            u.domain,
            u.intent,
            u.tokens.join(" "),
            u.bio_tags.join(" "),
            u.provenance
        ));
    }
    out
}

pub fn read_labeled_corpus(text: &str) -> Result<Vec<LabeledUtterance>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!(
                "labeled corpus line {}: expected 5 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let tokens: Vec<String> = fields[2].split_whitespace().map(str::to_string).collect();
        let tags: Vec<String> = fields[3].split_whitespace().map(str::to_string).collect();
        if tokens.len() != tags.len() {
            return Err(Error::Data(format!(
                "labeled corpus line {}: {} tokens vs {} tags",
                lineno + 1,
                tokens.len(),
                tags.len()
            )));
        }
        let provenance = match fields[4] {
            "reference" => Provenance::Reference,
            "hypothesis" => Provenance::Hypothesis,
            other => {
                return Err(Error::Data(format!(
                    "labeled corpus line {}: unknown provenance {other:?}",
                    lineno + 1
                )))
            }
        };
        out.push(LabeledUtterance {
            domain: fields[0].to_string(),
            intent: fields[1].to_string(),
            tokens,
            bio_tags: tags,
            provenance,
        });
    }
    Ok(out)
}


#[cfg(test)]
mod calibration_tests {
    use super::*;
    use crate::bio::is_well_formed;

    fn corpus(pool: &[String], total_tokens: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut count = 0;
        while count < total_tokens {
            let len = rng.gen_range(5..=11);
            out.push(
                (0..len)
                    .map(|_| pool[rng.gen_range(0..pool.len())].clone())
                    .collect(),
            );
            count += len;
        }
        out
    }

    #[test]
    fn measured_wer_tracks_configured_rate_across_the_range() {
        let pool: Vec<String> = (0..80).map(|i| format!("t{i}")).collect();
        let sentences = corpus(&pool, 100_000, 91);
        for (p_sub, p_del, p_ins) in [(0.03, 0.01, 0.01), (0.18, 0.06, 0.06), (0.10, 0.10, 0.10)] {
            let r = p_sub + p_del + p_ins;
            let channel = NoiseChannel::new(
                NoiseChannelConfig {
                    p_sub,
                    p_del,
                    p_ins,
                    confusion_mode: ConfusionMode::UniformVocab,
                    seed: 93,
                },
                pool.clone(),
            )
            .unwrap();
            let mut rng = channel.rng();
            let mut edits = 0usize;
            let mut len = 0usize;
            for s in &sentences {
                let (hyp, _) = corrupt(s, &channel, &mut rng);
                edits += edit_distance(s, &hyp);
                len += s.len();
            }
            let wer = edits as f64 / len as f64;
            assert!((wer - r).abs() <= 0.01, "rate {r}: measured {wer}");
        }
    }

    #[test]
    fn projected_spans_correspond_to_aligned_source_positions() {
        // per-position check against the recorded-op oracle: every projected
        // non-O hyp position is either aligned to a source position of the
        // same slot type, or an insertion strictly between two such positions
        let grammar = Grammar::music();
        let (utts, _) = generate_corpus(&grammar, 300, 95).unwrap();
        let channel = NoiseChannel::new(
            NoiseChannelConfig {
                p_sub: 0.15,
                p_del: 0.08,
                p_ins: 0.08,
                confusion_mode: ConfusionMode::UniformVocab,
                seed: 97,
            },
            grammar.vocabulary(),
        )
        .unwrap();
        let mut rng = channel.rng();
        let slot_type = |tag: &str| tag.split_once('-').map(|(_, x)| x.to_string());
        for u in &utts {
            let (hyp, aligned) = corrupt(&u.tokens, &channel, &mut rng);
            if hyp.is_empty() {
                continue;
            }
            let tags = project_labels(&u.bio_tags, &aligned).unwrap();
            assert!(is_well_formed(&tags));
            // hyp position -> source position for match/substitute ops
            let mut source: Vec<Option<usize>> = vec![None; hyp.len()];
            for op in &aligned.ops {
                match *op {
                    EditOp::Match { ref_idx, hyp_idx }
                    | EditOp::Substitute { ref_idx, hyp_idx } => {
                        source[hyp_idx] = Some(ref_idx);
                    }
                    _ => {}
                }
            }
            for (pos, tag) in tags.iter().enumerate() {
                let Some(ty) = slot_type(tag) else { continue };
                match source[pos] {
                    Some(ref_idx) => {
                        let src_ty = slot_type(&u.bio_tags[ref_idx]);
                        assert_eq!(
                            src_ty.as_deref(),
                            Some(ty.as_str()),
                            "aligned position {pos} got type {ty} from source tag {}",
                            u.bio_tags[ref_idx]
                        );
                    }
                    None => {
                        // insertion: both projected neighbors carry the type
                        let left = (0..pos).rev().find_map(|i| source[i].map(|r| (i, r)));
                        let right = (pos + 1..hyp.len()).find_map(|i| source[i].map(|r| (i, r)));
                        let (Some((_, lref)), Some((_, rref))) = (left, right) else {
                            panic!(
                                "inserted token at {pos} tagged {tag} without aligned neighbors"
                            );
                        };
                        assert_eq!(slot_type(&u.bio_tags[lref]).as_deref(), Some(ty.as_str()));
                        assert_eq!(slot_type(&u.bio_tags[rref]).as_deref(), Some(ty.as_str()));
                    }
                }
            }
        }
    }
}
