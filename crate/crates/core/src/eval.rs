//! Word error rate, accumulated averaging shift (AAS) and malformed-output
//! rate (MAL), plus the timestamp error-propagation probe.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{decode, parse, InterleavedSequence, ParseOutcome, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::TinyDecoderModel;
use crate::synth::Utterance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Match,
    Substitution,
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
}

/// Minimal unit-cost edit alignment. Among equal-cost alignments the
/// backtrace prefers match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, Vec<AlignmentOp>) {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = diag.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let c = cost[i][j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if same && cost[i - 1][j - 1] == c {
                ops.push(op(OpKind::Match, Some(i - 1), Some(j - 1)));
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && cost[i - 1][j - 1] + 1 == c {
                ops.push(op(OpKind::Substitution, Some(i - 1), Some(j - 1)));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i - 1][j] + 1 == c {
            ops.push(op(OpKind::Deletion, Some(i - 1), None));
            i -= 1;
        } else {
            ops.push(op(OpKind::Insertion, None, Some(j - 1)));
            j -= 1;
        }
    }
    ops.reverse();
    (cost[n][m], ops)
}

fn op(kind: OpKind, ref_index: Option<usize>, hyp_index: Option<usize>) -> AlignmentOp {
    AlignmentOp {
        kind,
        ref_index,
        hyp_index,
    }
}

/// `100 * (S + D + I) / |ref|`. May exceed 100.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<(f64, Vec<AlignmentOp>)> {
    if reference.is_empty() {
        return Err(Error::Domain("WER needs a non-empty reference".into()));
    }
    let (edits, ops) = align(reference, hypothesis);
    Ok((100.0 * edits as f64 / reference.len() as f64, ops))
}

/// Absolute end-time differences of exactly matching words, as
/// `(ref index, hyp index, |Δt| ms)`.
pub fn matched_shifts<W: PartialEq>(reference: &[(W, f64)], hypothesis: &[(W, f64)]) -> Vec<(usize, usize, f64)> {
    let rw: Vec<&W> = reference.iter().map(|(w, _)| w).collect();
    let hw: Vec<&W> = hypothesis.iter().map(|(w, _)| w).collect();
    let (_, ops) = align(&rw, &hw);
    ops.iter()
        .filter(|o| o.kind == OpKind::Match)
        .map(|o| {
            let (r, h) = (o.ref_index.unwrap(), o.hyp_index.unwrap());
            (r, h, (reference[r].1 - hypothesis[h].1).abs())
        })
        .collect()
}

/// Mean absolute end-time shift over matched words, `None` without matches.
pub fn aas<W: PartialEq>(reference: &[(W, f64)], hypothesis: &[(W, f64)]) -> Option<f64> {
    let shifts = matched_shifts(reference, hypothesis);
    if shifts.is_empty() {
        None
    } else {
        Some(shifts.iter().map(|s| s.2).sum::<f64>() / shifts.len() as f64)
    }
}

/// AAS between two token sequences; both must parse.
pub fn aas_sequences(
    reference: &InterleavedSequence,
    hypothesis: &InterleavedSequence,
    vocab: &Vocabulary,
) -> Result<Option<f64>> {
    let r = timed_words(&parse(reference, vocab), vocab)?;
    let h = timed_words(&parse(hypothesis, vocab), vocab)?;
    Ok(aas(&r, &h))
}

fn timed_words(outcome: &ParseOutcome, vocab: &Vocabulary) -> Result<Vec<(String, f64)>> {
    let (w, t) = decode(outcome, vocab)
        .map_err(|_| Error::Contract("AAS needs well-formed sequences".into()))?;
    Ok(w.into_iter().zip(t).collect())
}

/// Percentage of sequences that do not parse.
pub fn mal(decodes: &[InterleavedSequence], vocab: &Vocabulary) -> f64 {
    if decodes.is_empty() {
        return 0.0;
    }
    let bad = decodes.iter().filter(|s| !parse(s, vocab).is_well_formed()).count();
    100.0 * bad as f64 / decodes.len() as f64
}

/// Anything that maps an utterance's frames to a token sequence.
pub trait SequenceDecoder {
    fn decode_utterance(&self, utterance: &Utterance) -> Result<InterleavedSequence>;
}

impl SequenceDecoder for TinyDecoderModel {
    fn decode_utterance(&self, utterance: &Utterance) -> Result<InterleavedSequence> {
        self.greedy_decode(utterance.frames.view(), self.config.max_tokens - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub wer_pct: f64,
    /// Pooled over every matched word of every well-formed decode.
    pub aas_ms: f64,
    pub mal_pct: f64,
    pub samples: usize,
    pub malformed: usize,
    pub aligned_words: usize,
    pub ref_words: usize,
    pub word_edits: usize,
    /// Mean of per-sample AAS values, for comparison with the pooled figure.
    pub aas_per_sample_ms: f64,
}

pub fn evaluate(
    decoder: &impl SequenceDecoder,
    corpus: &[Utterance],
    vocab: &Vocabulary,
    name: &str,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Domain("evaluation corpus is empty".into()));
    }
    let mut malformed = 0;
    let mut ref_words = 0;
    let mut word_edits = 0;
    let mut shift_sum = 0.0;
    let mut aligned = 0;
    let mut per_sample = Vec::new();
    for utt in corpus {
        let hyp = decoder.decode_utterance(utt)?;
        let ref_ids: Vec<TokenId> = utt
            .words
            .iter()
            .map(|w| vocab.word_id(w))
            .collect::<Result<_>>()?;
        let (edits, _) = align(&ref_ids, &hyp.word_ids(vocab));
        ref_words += ref_ids.len();
        word_edits += edits;
        let outcome = parse(&hyp, vocab);
        let Some(pairs) = outcome.pairs() else {
            malformed += 1;
            continue;
        };
        let reference: Vec<(TokenId, f64)> = ref_ids.iter().copied().zip(utt.end_times_ms.iter().copied()).collect();
        let res = vocab.resolution_ms();
        let hypothesis: Vec<(TokenId, f64)> = pairs.iter().map(|&(w, ts)| (w, ts.midpoint_ms(res))).collect();
        let shifts = matched_shifts(&reference, &hypothesis);
        if !shifts.is_empty() {
            let s: f64 = shifts.iter().map(|x| x.2).sum();
            shift_sum += s;
            aligned += shifts.len();
            per_sample.push(s / shifts.len() as f64);
        }
    }
    let samples = corpus.len();
    Ok(EvalReport {
        corpus: name.to_string(),
        wer_pct: 100.0 * word_edits as f64 / ref_words as f64,
        aas_ms: if aligned > 0 { shift_sum / aligned as f64 } else { f64::NAN },
        mal_pct: 100.0 * malformed as f64 / samples as f64,
        samples,
        malformed,
        aligned_words: aligned,
        ref_words,
        word_edits,
        aas_per_sample_ms: if per_sample.is_empty() {
            f64::NAN
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub aas_clean: f64,
    pub aas_injected: f64,
    pub words_clean: usize,
    pub words_injected: usize,
}

impl ProbeResult {
    pub fn degradation(&self) -> f64 {
        self.aas_injected - self.aas_clean
    }
}

/// Decodes each utterance twice: once normally and once with the first
/// emitted timestamp moved `offset` tokens earlier (clamped at token 0).
/// AAS is pooled over matched words after the first reference word.
pub fn error_propagation_probe(model: &TinyDecoderModel, corpus: &[Utterance], offset: usize) -> Result<ProbeResult> {
    if offset == 0 {
        return Err(Error::Domain("injection offset must be at least 1".into()));
    }
    let vocab = model.vocab();
    let first_ts = vocab.first_timestamp_id();
    let max_len = model.config.max_tokens - 1;
    let mut clean = (0.0, 0usize);
    let mut injected = (0.0, 0usize);
    for utt in corpus {
        let reference: Vec<(TokenId, f64)> = utt
            .words
            .iter()
            .map(|w| vocab.word_id(w))
            .zip(utt.end_times_ms.iter().copied())
            .map(|(w, t)| w.map(|w| (w, t)))
            .collect::<Result<_>>()?;
        let plain = model.greedy_decode(utt.frames.view(), max_len)?;
        let mut done = false;
        let shifted = model.greedy_decode_with(
            utt.frames.view(),
            crate::codec::Special::TaskSrwt,
            max_len,
            |_, tok| match vocab.timestamp_of(tok) {
                Some(ts) if !done => {
                    done = true;
                    first_ts + ts.index().saturating_sub(offset)
                }
                _ => tok,
            },
        )?;
        for (seq, acc) in [(&plain, &mut clean), (&shifted, &mut injected)] {
            let outcome = parse(seq, vocab);
            let Some(pairs) = outcome.pairs() else { continue };
            let hyp: Vec<(TokenId, f64)> = pairs
                .iter()
                .map(|&(w, ts)| (w, ts.midpoint_ms(vocab.resolution_ms())))
                .collect();
            for (r, _, shift) in matched_shifts(&reference, &hyp) {
                if r >= 1 {
                    acc.0 += shift;
                    acc.1 += 1;
                }
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n > 0 { s / n as f64 } else { f64::NAN };
    Ok(ProbeResult {
        aas_clean: mean(clean),
        aas_injected: mean(injected),
        words_clean: clean.1,
        words_injected: injected.1,
    })
}

/// Fixed-width table with one row per corpus.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<20} {:>9} {:>10} {:>8}", "corpus", "WER(%)", "AAS(ms)", "MAL(%)");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<20} {:>9.2} {:>10.2} {:>8.2}",
            r.corpus, r.wer_pct, r.aas_ms, r.mal_pct
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode;

    fn edit_distance_oracle(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = edit_distance_oracle(ra, rb) + usize::from(x != y);
                let del = edit_distance_oracle(ra, b) + 1;
                let ins = edit_distance_oracle(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]).unwrap().0, 0.0);
        let (w, ops) = wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap();
        assert!((w - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(ops[1].kind, OpKind::Substitution);
        let (w, ops) = wer(&["a"], &["a", "b", "c"]).unwrap();
        assert_eq!(w, 200.0);
        assert_eq!(ops.iter().filter(|o| o.kind == OpKind::Insertion).count(), 2);
        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    #[test]
    fn ops_reconstruct_both_sides() {
        let r = [1, 2, 3, 4, 2];
        let h = [2, 3, 9, 4, 4, 2];
        let (cost, ops) = align(&r, &h);
        let rs: Vec<usize> = ops.iter().filter_map(|o| o.ref_index).collect();
        let hs: Vec<usize> = ops.iter().filter_map(|o| o.hyp_index).collect();
        assert_eq!(rs, (0..r.len()).collect::<Vec<_>>());
        assert_eq!(hs, (0..h.len()).collect::<Vec<_>>());
        let counted = ops.iter().filter(|o| o.kind != OpKind::Match).count();
        assert_eq!(cost, counted);
    }

    #[test]
    fn tie_break_prefers_substitution_then_deletion() {
        // ref [a, b] vs hyp [c]: sub+del and del+sub both cost 2
        let (_, ops) = align(&["a", "b"], &["c"]);
        assert_eq!(ops[0].kind, OpKind::Deletion);
        assert_eq!(ops[1].kind, OpKind::Substitution);
    }

    #[test]
    fn dp_matches_recursive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a: Vec<u8> = (0..rng.random_range(0..7)).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u8> = (0..rng.random_range(0..7)).map(|_| rng.random_range(0..3)).collect();
            assert_eq!(align(&a, &b).0, edit_distance_oracle(&a, &b));
        }
    }

    #[test]
    fn aas_examples() {
        let r = [("a", 300.0), ("b", 600.0)];
        assert_eq!(aas(&r, &r), Some(0.0));
        assert_eq!(aas(&r, &[("a", 310.0), ("b", 580.0)]), Some(15.0));
        // inserted word between the two matches is ignored
        assert_eq!(aas(&r, &[("a", 310.0), ("x", 450.0), ("b", 580.0)]), Some(15.0));
        assert_eq!(aas(&r, &[("x", 310.0)]), None);
    }

    #[test]
    fn aas_symmetric_for_same_words() {
        let r = [("a", 300.0), ("b", 600.0), ("c", 900.0)];
        let h = [("a", 330.0), ("b", 560.0), ("c", 1000.0)];
        assert_eq!(aas(&r, &h), aas(&h, &r));
    }

    #[test]
    fn aas_sequences_requires_parse() {
        let v = Vocabulary::new(["a", "b"], 600, 10).unwrap();
        let good = encode(&["a", "b"], &[300.0, 600.0], &v).unwrap();
        let bad = InterleavedSequence::new(vec![v.word_id("a").unwrap()]);
        assert_eq!(aas_sequences(&good, &good, &v).unwrap(), Some(0.0));
        assert!(matches!(aas_sequences(&good, &bad, &v), Err(Error::Contract(_))));
    }

    #[test]
    fn mal_arithmetic() {
        let v = Vocabulary::new(["a"], 600, 10).unwrap();
        let good = encode(&["a"], &[300.0], &v).unwrap();
        let bad = InterleavedSequence::new(vec![v.word_id("a").unwrap()]);
        let mut all = vec![good.clone(); 199];
        assert_eq!(mal(&all, &v), 0.0);
        all.push(bad);
        assert_eq!(mal(&all, &v), 0.5);
    }

    struct Oracle(Vocabulary);
    impl SequenceDecoder for Oracle {
        fn decode_utterance(&self, u: &Utterance) -> Result<InterleavedSequence> {
            encode(&u.word_refs(), &u.end_times_ms, &self.0)
        }
    }

    struct Silent;
    impl SequenceDecoder for Silent {
        fn decode_utterance(&self, _: &Utterance) -> Result<InterleavedSequence> {
            Ok(InterleavedSequence::default())
        }
    }

    #[test]
    fn evaluate_with_stub_decoders() {
        let cfg = crate::synth::GeneratorConfig::default();
        let vocab = cfg.vocabulary().unwrap();
        let corpus = crate::synth::generate(&cfg, 30).unwrap();
        let r = evaluate(&Oracle(vocab.clone()), &corpus, &vocab, "oracle").unwrap();
        assert_eq!(r.wer_pct, 0.0);
        assert_eq!(r.mal_pct, 0.0);
        assert!(r.aas_ms <= 5.0);
        let r = evaluate(&Silent, &corpus, &vocab, "silent").unwrap();
        assert_eq!(r.mal_pct, 100.0);
        assert_eq!(r.wer_pct, 100.0);
        assert_eq!(r.aligned_words, 0);
        assert!(render_table(&[r]).contains("silent"));
    }
}
