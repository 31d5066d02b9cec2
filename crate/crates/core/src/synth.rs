//! Synthetic utterances with exact word alignments, and length augmentation.
//!
//! Every word owns a contiguous span of 10 ms frames. A frame carries the
//! word's fixed prototype vector; the last frame of the span also carries a
//! unit boundary marker in the final feature dimension. Optional silent gap
//! frames precede each word. Gaussian noise is added to every frame.

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Vocabulary, DEFAULT_RESOLUTION_MS, DEFAULT_TIMESTAMP_COUNT};
use crate::error::{Error, Result};

/// Duration of one input frame.
pub const FRAME_MS: u32 = 10;

const WORD_LIST: [&str; 64] = [
    "the", "cat", "sat", "on", "mat", "dog", "ran", "far", "sun", "rose", "over", "hill", "blue",
    "sky", "green", "tree", "river", "flows", "past", "old", "mill", "quiet", "night", "falls",
    "bright", "stars", "shine", "above", "cold", "wind", "blows", "north", "small", "bird",
    "sings", "song", "morning", "light", "breaks", "through", "clouds", "rain", "drops",
    "softly", "against", "window", "glass", "house", "stands", "empty", "field", "grass",
    "grows", "tall", "summer", "heat", "rises", "slowly", "from", "stone", "road", "leads",
    "home", "again",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Number of distinct word symbols.
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_ms: u32,
    pub max_word_ms: u32,
    pub min_gap_ms: u32,
    pub max_gap_ms: u32,
    /// Feature dimension; the last dimension is the boundary marker.
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Drives word sequences, durations and noise.
    pub seed: u64,
    /// Drives the per-word prototype vectors. Corpora that must be
    /// acoustically compatible share this seed.
    pub acoustic_seed: u64,
    pub timestamp_count: usize,
    pub resolution_ms: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 64,
            min_words: 2,
            max_words: 6,
            min_word_ms: 100,
            max_word_ms: 300,
            min_gap_ms: 0,
            max_gap_ms: 50,
            feature_dim: 16,
            noise_std: 0.1,
            seed: 1,
            acoustic_seed: 7,
            timestamp_count: DEFAULT_TIMESTAMP_COUNT,
            resolution_ms: DEFAULT_RESOLUTION_MS,
        }
    }
}

impl GeneratorConfig {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let words = (0..self.vocab_size).map(|i| match WORD_LIST.get(i) {
            Some(w) => w.to_string(),
            None => format!("w{i}"),
        });
        Vocabulary::new(words, self.timestamp_count, self.resolution_ms)
    }

    /// Longest utterance the configuration can produce.
    pub fn max_duration_ms(&self) -> u64 {
        self.max_words as u64 * (self.max_word_ms as u64 + self.max_gap_ms as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Domain("vocab_size must be positive".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Domain(format!(
                "word count range [{}, {}] is empty or starts at zero",
                self.min_words, self.max_words
            )));
        }
        if self.min_words > self.vocab_size {
            return Err(Error::Domain(
                "words within an utterance are distinct, so min_words must not exceed vocab_size"
                    .into(),
            ));
        }
        if self.min_word_ms < FRAME_MS || self.min_word_ms > self.max_word_ms {
            return Err(Error::Domain(format!(
                "word duration range [{}, {}] ms must start at one frame or more",
                self.min_word_ms, self.max_word_ms
            )));
        }
        if self.min_gap_ms > self.max_gap_ms {
            return Err(Error::Domain("gap range is empty".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Domain("feature_dim must be at least 2".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Domain("noise_std must be finite and non-negative".into()));
        }
        let cap = self.timestamp_count as u64 * self.resolution_ms as u64;
        if self.max_duration_ms() >= cap {
            return Err(Error::Range(format!(
                "utterances up to {} ms do not fit the {} ms timestamp range",
                self.max_duration_ms(),
                cap
            )));
        }
        Ok(())
    }

    /// Unit-norm prototype per word, in the first `feature_dim - 1` dims.
    pub fn prototypes(&self) -> Array2<f64> {
        let dim = self.feature_dim - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.acoustic_seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut protos = Array2::<f64>::zeros((self.vocab_size, dim));
        for mut row in protos.rows_mut() {
            row.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            let norm = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / norm);
        }
        protos
    }
}

/// One utterance with ground-truth word end times.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub words: Vec<String>,
    pub end_times_ms: Vec<f64>,
    /// `T x F` features, one row per 10 ms frame.
    pub frames: Array2<f64>,
}

impl Utterance {
    pub fn new(words: Vec<String>, end_times_ms: Vec<f64>, frames: Array2<f64>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Domain("utterance has no words".into()));
        }
        if words.len() != end_times_ms.len() {
            return Err(Error::Shape(format!(
                "{} words but {} end times",
                words.len(),
                end_times_ms.len()
            )));
        }
        if !(end_times_ms[0] > 0.0) {
            return Err(Error::Range("end times must be positive".into()));
        }
        if end_times_ms.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Order("end times must be strictly increasing".into()));
        }
        let duration = frames.nrows() as f64 * FRAME_MS as f64;
        if end_times_ms[end_times_ms.len() - 1] > duration {
            return Err(Error::Range(format!(
                "last end time exceeds the {duration} ms of frames"
            )));
        }
        Ok(Utterance {
            words,
            end_times_ms,
            frames,
        })
    }

    pub fn duration_ms(&self) -> f64 {
        self.frames.nrows() as f64 * FRAME_MS as f64
    }

    pub fn word_refs(&self) -> Vec<&str> {
        self.words.iter().map(String::as_str).collect()
    }
}

pub fn generate(cfg: &GeneratorConfig, count: usize) -> Result<Vec<Utterance>> {
    if count == 0 {
        return Err(Error::Domain("utterance count must be positive".into()));
    }
    cfg.validate()?;
    let vocab = cfg.vocabulary()?;
    let protos = cfg.prototypes();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frame_range = |lo: u32, hi: u32| (lo / FRAME_MS) as usize..=(hi / FRAME_MS) as usize;
    let fdim = cfg.feature_dim;

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n_words = rng.random_range(cfg.min_words..=cfg.max_words.min(cfg.vocab_size));
        let word_ids = rand::seq::index::sample(&mut rng, cfg.vocab_size, n_words).into_vec();
        let mut spans = Vec::with_capacity(n_words);
        let mut total = 0usize;
        for _ in 0..n_words {
            let gap = rng.random_range(frame_range(cfg.min_gap_ms, cfg.max_gap_ms));
            let len = rng.random_range(frame_range(cfg.min_word_ms, cfg.max_word_ms)).max(1);
            spans.push((gap, len));
            total += gap + len;
        }
        let mut frames = Array2::<f64>::zeros((total, fdim));
        let mut cursor = 0usize;
        let mut end_times = Vec::with_capacity(n_words);
        for (&w, &(gap, len)) in word_ids.iter().zip(&spans) {
            cursor += gap;
            let proto = protos.row(w);
            for f in cursor..cursor + len {
                frames.slice_mut(s![f, ..fdim - 1]).assign(&proto);
            }
            frames[[cursor + len - 1, fdim - 1]] = 1.0;
            cursor += len;
            end_times.push((cursor as u32 * FRAME_MS) as f64);
        }
        if cfg.noise_std > 0.0 {
            frames.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        // keep frames representable in the on-disk f32 format
        frames.mapv_inplace(|x| x as f32 as f64);
        let words = word_ids.iter().map(|&w| vocab.words()[w].clone()).collect();
        out.push(Utterance::new(words, end_times, frames)?);
    }
    Ok(out)
}

/// Joins `b` after `a`; `b`'s end times shift by `a`'s duration.
pub fn concat_augment(a: &Utterance, b: &Utterance, max_duration_ms: f64) -> Result<Utterance> {
    if a.frames.ncols() != b.frames.ncols() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.frames.ncols(),
            b.frames.ncols()
        )));
    }
    let total = a.duration_ms() + b.duration_ms();
    if total >= max_duration_ms {
        return Err(Error::Range(format!(
            "combined duration {total} ms reaches the {max_duration_ms} ms limit"
        )));
    }
    let shift = a.duration_ms();
    let frames = concatenate(Axis(0), &[a.frames.view(), b.frames.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let words = a.words.iter().chain(&b.words).cloned().collect();
    let end_times = a
        .end_times_ms
        .iter()
        .copied()
        .chain(b.end_times_ms.iter().map(|t| t + shift))
        .collect();
    Utterance::new(words, end_times, frames)
}

/// Pairs utterance `2i` with `2i + 1`, skipping pairs that would overflow.
pub fn augment_corpus(corpus: &[Utterance], max_duration_ms: f64) -> Vec<Utterance> {
    corpus
        .chunks_exact(2)
        .filter_map(|pair| concat_augment(&pair[0], &pair[1], max_duration_ms).ok())
        .collect()
}

/// Occurrence counts of each timestamp token over a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimestampHistogram {
    pub counts: Vec<usize>,
}

impl TimestampHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn max_occupied(&self) -> Option<usize> {
        self.counts.iter().rposition(|&c| c > 0)
    }

    /// Count of tokens with index strictly above `index`.
    pub fn mass_above(&self, index: usize) -> usize {
        self.counts.iter().skip(index + 1).sum()
    }
}

pub fn histogram(corpus: &[Utterance], vocab: &Vocabulary) -> Result<TimestampHistogram> {
    if corpus.is_empty() {
        return Err(Error::Domain("histogram of an empty corpus".into()));
    }
    let mut counts = vec![0usize; vocab.timestamp_count()];
    for u in corpus {
        for &t in &u.end_times_ms {
            counts[vocab.quantize_ms(t)?.index()] += 1;
        }
    }
    Ok(TimestampHistogram { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, TokenClass};
    use proptest::prelude::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn single_word_exact_end() {
        let c = GeneratorConfig {
            min_words: 1,
            max_words: 1,
            min_word_ms: 300,
            max_word_ms: 300,
            max_gap_ms: 0,
            noise_std: 0.0,
            ..cfg()
        };
        let u = &generate(&c, 1).unwrap()[0];
        assert_eq!(u.end_times_ms, vec![300.0]);
        assert_eq!(u.frames.nrows(), 30);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&cfg(), 20).unwrap();
        let b = generate(&cfg(), 20).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 2, ..cfg() }, 20).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversize_words_rejected() {
        let c = GeneratorConfig {
            max_word_ms: 7000,
            ..cfg()
        };
        assert!(matches!(generate(&c, 1), Err(Error::Range(_))));
        assert!(matches!(generate(&cfg(), 0), Err(Error::Domain(_))));
    }

    #[test]
    fn boundary_marker_precedes_encoded_end() {
        let c = GeneratorConfig {
            noise_std: 0.0,
            ..cfg()
        };
        let vocab = c.vocabulary().unwrap();
        for u in generate(&c, 50).unwrap() {
            let seq = encode(&u.word_refs(), &u.end_times_ms, &vocab).unwrap();
            let marked: Vec<usize> = (0..u.frames.nrows())
                .filter(|&f| u.frames[[f, c.feature_dim - 1]] == 1.0)
                .collect();
            let ends: Vec<usize> = seq
                .tokens
                .iter()
                .filter_map(|&t| match vocab.classify(t) {
                    Some(TokenClass::Timestamp(ts)) => Some(ts.index() - 1),
                    _ => None,
                })
                .collect();
            assert_eq!(marked, ends);
        }
    }

    fn one_word(end: f64, frames: usize) -> Utterance {
        let mut m = Array2::zeros((frames, 4));
        m[[(end as usize / 10) - 1, 3]] = 1.0;
        Utterance::new(vec!["cat".into()], vec![end], m).unwrap()
    }

    #[test]
    fn concat_shifts_second() {
        let a = one_word(300.0, 40);
        let b = one_word(200.0, 25);
        let c = concat_augment(&a, &b, 6000.0).unwrap();
        assert_eq!(c.end_times_ms, vec![300.0, 600.0]);
        // boundary frames line up with the shifted end times
        let marked: Vec<usize> = (0..c.frames.nrows()).filter(|&f| c.frames[[f, 3]] == 1.0).collect();
        assert_eq!(marked, vec![29, 59]);
    }

    #[test]
    fn concat_overflow() {
        let a = one_word(3000.0, 300);
        let b = one_word(3500.0, 350);
        assert!(matches!(concat_augment(&a, &b, 6000.0), Err(Error::Range(_))));
    }

    #[test]
    fn histogram_single() {
        let vocab = cfg().vocabulary().unwrap();
        let h = histogram(&[one_word(300.0, 30)], &vocab).unwrap();
        assert_eq!(h.counts[30], 1);
        assert_eq!(h.total(), 1);
        assert!(histogram(&[], &vocab).is_err());
    }

    #[test]
    fn augmentation_extends_timestamp_tail() {
        let c = cfg();
        let vocab = c.vocabulary().unwrap();
        let corpus = generate(&c, 200).unwrap();
        let before = histogram(&corpus, &vocab).unwrap();
        let mut mixed = corpus.clone();
        mixed.extend(augment_corpus(&corpus, vocab.max_duration_ms()));
        let after = histogram(&mixed, &vocab).unwrap();
        let max_before = before.max_occupied().unwrap();
        assert!(after.max_occupied().unwrap() > max_before);
        assert!(after.mass_above(max_before) > before.mass_above(max_before));
    }

    #[test]
    fn augment_skips_overflowing_pairs() {
        let long = one_word(3500.0, 350);
        let short = one_word(100.0, 10);
        let out = augment_corpus(&[long.clone(), long, short.clone(), short], 6000.0);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].end_times_ms, vec![100.0, 200.0]);
    }

    proptest! {
        #[test]
        fn concat_preserves_counts(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let a = generate(&GeneratorConfig { seed: seed_a, ..cfg() }, 1).unwrap().remove(0);
            let b = generate(&GeneratorConfig { seed: seed_b, ..cfg() }, 1).unwrap().remove(0);
            let c = concat_augment(&a, &b, 6000.0).unwrap();
            prop_assert_eq!(c.words.len(), a.words.len() + b.words.len());
            prop_assert_eq!(c.frames.nrows(), a.frames.nrows() + b.frames.nrows());
            for (i, t) in b.end_times_ms.iter().enumerate() {
                prop_assert_eq!(c.end_times_ms[a.words.len() + i], t + a.duration_ms());
            }
        }
    }
}
