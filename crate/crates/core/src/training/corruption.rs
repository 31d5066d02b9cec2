//! Reduced teacher forcing: timestamp tokens in the decoder input are, with
//! probability `p`, replaced by an index drawn uniformly from
//! `[first timestamp, current timestamp]`. Targets are left untouched.

use rand::Rng;

use crate::codec::{parse, InterleavedSequence, TokenId, Vocabulary};
use crate::error::{Error, Result};

pub fn corrupt_timestamps<R: Rng + ?Sized>(
    target: &InterleavedSequence,
    vocab: &Vocabulary,
    p: f64,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("corruption probability {p} outside [0, 1]")));
    }
    if !parse(target, vocab).is_well_formed() {
        return Err(Error::Contract("corruption target must be well formed".into()));
    }
    let mut out = target.tokens.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let first_ts = vocab.first_timestamp_id();
    let mut first: Option<usize> = None;
    for tok in out.iter_mut() {
        let Some(ts) = vocab.timestamp_of(*tok) else {
            continue;
        };
        let current = ts.index();
        let lo = *first.get_or_insert(current);
        if rng.random::<f64>() < p {
            let replacement = rng.random_range(lo.min(current)..=current);
            *tok = first_ts + replacement;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "b", "c"], 600, 10).unwrap()
    }

    #[test]
    fn p_zero_is_identity() {
        let v = vocab();
        let seq = encode(&["a", "b", "c"], &[100.0, 400.0, 900.0], &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_timestamps(&seq, &v, 0.0, &mut rng).unwrap(), seq.tokens);
    }

    #[test]
    fn degenerate_range_is_fixed_point() {
        let v = vocab();
        let seq = encode(&["a", "b"], &[100.0, 105.0], &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(corrupt_timestamps(&seq, &v, 1.0, &mut rng).unwrap(), seq.tokens);
        }
    }

    #[test]
    fn uniform_replacement_mean() {
        let v = vocab();
        let seq = encode(&["a", "b"], &[100.0, 500.0], &v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let out = corrupt_timestamps(&seq, &v, 1.0, &mut rng).unwrap();
            sum += v.timestamp_of(out[3]).unwrap().index() as f64;
        }
        assert!((sum / n as f64 - 30.0).abs() < 0.5);
    }

    #[test]
    fn rejects_malformed_and_bad_p() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = InterleavedSequence::new(vec![v.word_id("a").unwrap()]);
        assert!(matches!(corrupt_timestamps(&bad, &v, 0.2, &mut rng), Err(Error::Contract(_))));
        let ok = encode(&["a"], &[100.0], &v).unwrap();
        assert!(matches!(corrupt_timestamps(&ok, &v, 1.5, &mut rng), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn never_increases_and_never_touches_words(
            gaps in prop::collection::vec(1u32..300, 1..12),
            seed in 0u64..10_000,
            p in 0.0f64..=1.0,
        ) {
            let v = vocab();
            let names = ["a", "b", "c"];
            let mut t = 0.0;
            let mut words = Vec::new();
            let mut times = Vec::new();
            for (i, g) in gaps.iter().enumerate() {
                t += *g as f64;
                words.push(names[i % 3]);
                times.push(t);
            }
            prop_assume!(t < 6000.0);
            let seq = encode(&words, &times, &v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = corrupt_timestamps(&seq, &v, p, &mut rng).unwrap();
            let first = v.timestamp_of(seq.tokens[1]).unwrap().index();
            for (a, b) in seq.tokens.iter().zip(&out) {
                match v.timestamp_of(*a) {
                    Some(ts) => {
                        let c = v.timestamp_of(*b).unwrap().index();
                        prop_assert!(c <= ts.index() && c >= first);
                    }
                    None => prop_assert_eq!(a, b),
                }
            }
        }
    }
}
