//! Token vocabulary and the interleaved word/timestamp sequence format.
//!
//! A target sequence for an utterance with words `w1 .. wk` ending at times
//! `e1 .. ek` is `w1 <|t(e1)|> w2 <|t(e2)|> ... wk <|t(ek)|>`: every word is
//! followed by exactly one timestamp token marking its end. The start of a
//! word is implied by the end of the one before it.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const DEFAULT_RESOLUTION_MS: u32 = 10;
pub const DEFAULT_TIMESTAMP_COUNT: usize = 600;

/// Reserved tokens. Their ids are their discriminants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Bos = 0,
    Eos = 1,
    /// Task indicator: transcript with timestamps.
    TaskSrwt = 2,
    /// Task indicator: transcript only.
    TaskTranscript = 3,
}

impl Special {
    pub const ALL: [Special; 4] = [
        Special::Bos,
        Special::Eos,
        Special::TaskSrwt,
        Special::TaskTranscript,
    ];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    fn symbol(self) -> &'static str {
        match self {
            Special::Bos => "<|bos|>",
            Special::Eos => "<|eos|>",
            Special::TaskSrwt => "<|srwt|>",
            Special::TaskTranscript => "<|transcript|>",
        }
    }
}

pub const SPECIAL_COUNT: usize = Special::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special(Special),
    Word(usize),
    Timestamp(TimestampToken),
}

/// Index of a timestamp token. Index `i` covers `[i * res, (i + 1) * res)` ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimestampToken(pub usize);

impl TimestampToken {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn interval_ms(self, resolution_ms: u32) -> (f64, f64) {
        let r = resolution_ms as f64;
        (self.0 as f64 * r, (self.0 + 1) as f64 * r)
    }

    pub fn midpoint_ms(self, resolution_ms: u32) -> f64 {
        (self.0 as f64 + 0.5) * resolution_ms as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    timestamp_count: usize,
    resolution_ms: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    words: Vec<String>,
    timestamp_count: usize,
    resolution_ms: u32,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.words, r.timestamp_count, r.resolution_ms)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            words: v.words,
            timestamp_count: v.timestamp_count,
            resolution_ms: v.resolution_ms,
        }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
            && self.timestamp_count == other.timestamp_count
            && self.resolution_ms == other.resolution_ms
    }
}

impl Vocabulary {
    /// Ids are laid out as specials, then words in the given order, then
    /// timestamps in increasing time order.
    pub fn new<S: Into<String>>(
        words: impl IntoIterator<Item = S>,
        timestamp_count: usize,
        resolution_ms: u32,
    ) -> Result<Self> {
        if timestamp_count == 0 {
            return Err(Error::Vocab("timestamp token count must be positive".into()));
        }
        if resolution_ms == 0 {
            return Err(Error::Vocab("timestamp resolution must be positive".into()));
        }
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut word_ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w.starts_with("<|") {
                return Err(Error::Vocab(format!("invalid word symbol {w:?}")));
            }
            if word_ids.insert(w.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate word symbol {w:?}")));
            }
        }
        Ok(Vocabulary {
            words,
            word_ids,
            timestamp_count,
            resolution_ms,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn timestamp_count(&self) -> usize {
        self.timestamp_count
    }

    pub fn resolution_ms(&self) -> u32 {
        self.resolution_ms
    }

    /// Longest representable utterance.
    pub fn max_duration_ms(&self) -> f64 {
        self.timestamp_count as f64 * self.resolution_ms as f64
    }

    pub fn len(&self) -> usize {
        SPECIAL_COUNT + self.words.len() + self.timestamp_count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first_word_id(&self) -> TokenId {
        SPECIAL_COUNT
    }

    pub fn first_timestamp_id(&self) -> TokenId {
        SPECIAL_COUNT + self.words.len()
    }

    pub fn word_id(&self, word: &str) -> Result<TokenId> {
        self.word_ids
            .get(word)
            .map(|&i| SPECIAL_COUNT + i)
            .ok_or_else(|| Error::Vocab(format!("unknown word {word:?}")))
    }

    pub fn timestamp_id(&self, ts: TimestampToken) -> Result<TokenId> {
        if ts.0 >= self.timestamp_count {
            return Err(Error::Range(format!(
                "timestamp index {} outside [0, {})",
                ts.0, self.timestamp_count
            )));
        }
        Ok(self.first_timestamp_id() + ts.0)
    }

    pub fn classify(&self, id: TokenId) -> Option<TokenClass> {
        if id < SPECIAL_COUNT {
            Some(TokenClass::Special(Special::ALL[id]))
        } else if id < self.first_timestamp_id() {
            Some(TokenClass::Word(id - SPECIAL_COUNT))
        } else if id < self.len() {
            Some(TokenClass::Timestamp(TimestampToken(id - self.first_timestamp_id())))
        } else {
            None
        }
    }

    pub fn timestamp_of(&self, id: TokenId) -> Option<TimestampToken> {
        match self.classify(id) {
            Some(TokenClass::Timestamp(ts)) => Some(ts),
            _ => None,
        }
    }

    pub fn is_timestamp(&self, id: TokenId) -> bool {
        self.timestamp_of(id).is_some()
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        matches!(self.classify(id), Some(TokenClass::Word(_)))
    }

    /// Timestamp token whose interval contains `ms`.
    pub fn quantize_ms(&self, ms: f64) -> Result<TimestampToken> {
        if !ms.is_finite() || ms < 0.0 || ms >= self.max_duration_ms() {
            return Err(Error::Range(format!(
                "time {ms} ms outside [0, {})",
                self.max_duration_ms()
            )));
        }
        let idx = (ms / self.resolution_ms as f64).floor() as usize;
        Ok(TimestampToken(idx.min(self.timestamp_count - 1)))
    }

    pub fn symbol(&self, id: TokenId) -> String {
        match self.classify(id) {
            Some(TokenClass::Special(s)) => s.symbol().to_string(),
            Some(TokenClass::Word(w)) => self.words[w].clone(),
            Some(TokenClass::Timestamp(ts)) => format!("<|t_{}|>", ts.0),
            None => format!("<|unk_{id}|>"),
        }
    }

    pub fn lookup_symbol(&self, sym: &str) -> Result<TokenId> {
        if let Some(rest) = sym.strip_prefix("<|t_").and_then(|s| s.strip_suffix("|>")) {
            let idx: usize = rest
                .parse()
                .map_err(|_| Error::Vocab(format!("bad timestamp symbol {sym:?}")))?;
            return self.timestamp_id(TimestampToken(idx));
        }
        if let Some(s) = Special::ALL.iter().find(|s| s.symbol() == sym) {
            return Ok(s.id());
        }
        self.word_id(sym)
    }
}

/// Raw token stream. May be malformed; see [`parse`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterleavedSequence {
    pub tokens: Vec<TokenId>,
}

impl InterleavedSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        InterleavedSequence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Word tokens only, in order. Timestamps and specials are dropped.
    pub fn word_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        self.tokens.iter().copied().filter(|&t| vocab.is_word(t)).collect()
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (i, &t) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", vocab.symbol(t));
        }
        out
    }

    pub fn parse_text(line: &str, vocab: &Vocabulary) -> Result<Self> {
        let tokens = line
            .split_whitespace()
            .map(|s| vocab.lookup_symbol(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(InterleavedSequence { tokens })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MalformedReason {
    /// Word and timestamp tokens do not alternate.
    CountMismatch,
    /// An id outside the vocabulary, or a special token inside the body.
    UnknownToken,
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    WellFormed {
        /// `(word token id, end timestamp)` per word.
        pairs: Vec<(TokenId, TimestampToken)>,
        /// Set when some timestamp is smaller than the one before it. This
        /// does not make the sequence malformed.
        order_violation: bool,
    },
    Malformed(MalformedReason),
}

impl ParseOutcome {
    pub fn is_well_formed(&self) -> bool {
        matches!(self, ParseOutcome::WellFormed { .. })
    }

    pub fn pairs(&self) -> Option<&[(TokenId, TimestampToken)]> {
        match self {
            ParseOutcome::WellFormed { pairs, .. } => Some(pairs),
            ParseOutcome::Malformed(_) => None,
        }
    }
}

pub fn encode(words: &[&str], end_times_ms: &[f64], vocab: &Vocabulary) -> Result<InterleavedSequence> {
    if words.len() != end_times_ms.len() {
        return Err(Error::Shape(format!(
            "{} words but {} end times",
            words.len(),
            end_times_ms.len()
        )));
    }
    let mut tokens = Vec::with_capacity(2 * words.len());
    let mut prev = f64::NEG_INFINITY;
    for (word, &t) in words.iter().zip(end_times_ms) {
        if !(t > 0.0) {
            return Err(Error::Range(format!("end time {t} ms must be positive")));
        }
        if t < prev {
            return Err(Error::Order(format!("end time {t} ms follows {prev} ms")));
        }
        prev = t;
        let ts = vocab.quantize_ms(t)?;
        tokens.push(vocab.word_id(word)?);
        tokens.push(vocab.timestamp_id(ts)?);
    }
    Ok(InterleavedSequence { tokens })
}

pub fn parse(seq: &InterleavedSequence, vocab: &Vocabulary) -> ParseOutcome {
    if seq.tokens.is_empty() {
        return ParseOutcome::Malformed(MalformedReason::Empty);
    }
    let mut classes = Vec::with_capacity(seq.tokens.len());
    for &t in &seq.tokens {
        match vocab.classify(t) {
            None | Some(TokenClass::Special(_)) => {
                return ParseOutcome::Malformed(MalformedReason::UnknownToken)
            }
            Some(c) => classes.push(c),
        }
    }
    if classes.len() % 2 != 0 {
        return ParseOutcome::Malformed(MalformedReason::CountMismatch);
    }
    let mut pairs = Vec::with_capacity(classes.len() / 2);
    let mut order_violation = false;
    for (i, chunk) in classes.chunks_exact(2).enumerate() {
        match (chunk[0], chunk[1]) {
            (TokenClass::Word(_), TokenClass::Timestamp(ts)) => {
                if let Some(&(_, last)) = pairs.last() {
                    order_violation |= ts < last;
                }
                pairs.push((seq.tokens[2 * i], ts));
            }
            _ => return ParseOutcome::Malformed(MalformedReason::CountMismatch),
        }
    }
    ParseOutcome::WellFormed {
        pairs,
        order_violation,
    }
}

/// Words and end times (interval midpoints, ms) of a well-formed parse.
pub fn decode(outcome: &ParseOutcome, vocab: &Vocabulary) -> Result<(Vec<String>, Vec<f64>)> {
    let pairs = outcome
        .pairs()
        .ok_or_else(|| Error::Contract("cannot decode a malformed sequence".into()))?;
    let words = pairs.iter().map(|&(w, _)| vocab.symbol(w)).collect();
    let times = pairs
        .iter()
        .map(|&(_, ts)| ts.midpoint_ms(vocab.resolution_ms()))
        .collect();
    Ok((words, times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "hello", "world"], 600, 10).unwrap()
    }

    #[test]
    fn ids_are_partitioned() {
        let v = vocab();
        assert_eq!(v.len(), 4 + 3 + 600);
        for id in 0..v.len() {
            let c = v.classify(id).unwrap();
            let n = [
                matches!(c, TokenClass::Special(_)),
                matches!(c, TokenClass::Word(_)),
                matches!(c, TokenClass::Timestamp(_)),
            ]
            .iter()
            .filter(|&&b| b)
            .count();
            assert_eq!(n, 1);
        }
        assert!(v.classify(v.len()).is_none());
        assert_eq!(v.max_duration_ms(), 6000.0);
    }

    #[test]
    fn encode_hello_world() {
        let v = vocab();
        let seq = encode(&["hello", "world"], &[480.0, 1020.0], &v).unwrap();
        let ts0 = v.first_timestamp_id();
        assert_eq!(
            seq.tokens,
            vec![v.word_id("hello").unwrap(), ts0 + 48, v.word_id("world").unwrap(), ts0 + 102]
        );
        // brute-force scan: the chosen interval is the only one containing the time
        for (ms, want) in [(480.0, 48usize), (1020.0, 102)] {
            let hits: Vec<usize> = (0..600)
                .filter(|&i| {
                    let (lo, hi) = TimestampToken(i).interval_ms(10);
                    lo <= ms && ms < hi
                })
                .collect();
            assert_eq!(hits, vec![want]);
        }
    }

    #[test]
    fn encode_single_word_first_interval() {
        let v = vocab();
        for ms in [0.5, 5.0, 9.99] {
            let seq = encode(&["a"], &[ms], &v).unwrap();
            assert_eq!(seq.tokens[1], v.first_timestamp_id());
        }
    }

    #[test]
    fn encode_errors() {
        let v = vocab();
        assert!(matches!(encode(&["a", "a"], &[500.0, 400.0], &v), Err(Error::Order(_))));
        assert!(matches!(encode(&["a"], &[6000.0], &v), Err(Error::Range(_))));
        assert!(matches!(encode(&["a"], &[0.0], &v), Err(Error::Range(_))));
        assert!(matches!(encode(&["zzz"], &[100.0], &v), Err(Error::Vocab(_))));
        assert!(matches!(encode(&["a"], &[100.0, 200.0], &v), Err(Error::Shape(_))));
        // equal end times are allowed
        assert!(encode(&["a", "a"], &[100.0, 100.0], &v).is_ok());
    }

    #[test]
    fn parse_examples() {
        let v = vocab();
        let w = v.word_id("a").unwrap();
        let t = v.first_timestamp_id() + 3;
        let ok = parse(&InterleavedSequence::new(vec![w, t, w, t]), &v);
        assert_eq!(ok.pairs().unwrap().len(), 2);
        assert_eq!(
            parse(&InterleavedSequence::new(vec![w, w, t]), &v),
            ParseOutcome::Malformed(MalformedReason::CountMismatch)
        );
        assert_eq!(
            parse(&InterleavedSequence::default(), &v),
            ParseOutcome::Malformed(MalformedReason::Empty)
        );
        assert_eq!(
            parse(&InterleavedSequence::new(vec![w, t, w]), &v),
            ParseOutcome::Malformed(MalformedReason::CountMismatch)
        );
        assert_eq!(
            parse(&InterleavedSequence::new(vec![w, t, Special::Eos.id(), t]), &v),
            ParseOutcome::Malformed(MalformedReason::UnknownToken)
        );
        assert_eq!(
            parse(&InterleavedSequence::new(vec![w, 10_000]), &v),
            ParseOutcome::Malformed(MalformedReason::UnknownToken)
        );
    }

    #[test]
    fn non_monotonic_is_flagged_not_malformed() {
        let v = vocab();
        let w = v.word_id("a").unwrap();
        let t0 = v.first_timestamp_id();
        match parse(&InterleavedSequence::new(vec![w, t0 + 50, w, t0 + 40]), &v) {
            ParseOutcome::WellFormed { order_violation, .. } => assert!(order_violation),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decode_midpoint() {
        let v = vocab();
        let outcome = ParseOutcome::WellFormed {
            pairs: vec![(v.word_id("hello").unwrap(), TimestampToken(48))],
            order_violation: false,
        };
        let (words, times) = decode(&outcome, &v).unwrap();
        assert_eq!(words, vec!["hello"]);
        assert_eq!(times, vec![485.0]);
        assert!(decode(&ParseOutcome::Malformed(MalformedReason::Empty), &v).is_err());
    }

    #[test]
    fn text_rendering_round_trips() {
        let v = vocab();
        let seq = encode(&["hello", "world"], &[480.0, 1020.0], &v).unwrap();
        let line = seq.render(&v);
        assert_eq!(line, "hello <|t_48|> world <|t_102|>");
        assert_eq!(InterleavedSequence::parse_text(&line, &v).unwrap(), seq);
    }

    #[test]
    fn vocabulary_rejects_bad_symbols() {
        assert!(Vocabulary::new(["a", "a"], 10, 10).is_err());
        assert!(Vocabulary::new(["a b"], 10, 10).is_err());
        assert!(Vocabulary::new(["<|t_1|>"], 10, 10).is_err());
        assert!(Vocabulary::new(["a"], 0, 10).is_err());
    }

    #[test]
    fn vocabulary_serde() {
        let v = vocab();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.word_id("world").unwrap(), v.word_id("world").unwrap());
    }

    proptest! {
        #[test]
        fn round_trip(steps in prop::collection::vec((0usize..3, 1u32..400), 1..20)) {
            let v = vocab();
            let names = ["a", "hello", "world"];
            let mut t = 0.0;
            let mut words = Vec::new();
            let mut times = Vec::new();
            for (w, dt) in steps {
                t += dt as f64 * 0.37;
                words.push(names[w]);
                times.push(t);
            }
            prop_assume!(t < 6000.0);
            let seq = encode(&words, &times, &v).unwrap();
            let outcome = parse(&seq, &v);
            prop_assert!(outcome.is_well_formed());
            let (w2, t2) = decode(&outcome, &v).unwrap();
            prop_assert_eq!(w2, words.iter().map(|s| s.to_string()).collect::<Vec<_>>());
            for (a, b) in times.iter().zip(&t2) {
                prop_assert!((a - b).abs() <= 5.0);
            }
        }
    }
}
