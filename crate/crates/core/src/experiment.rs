//! Reproducible experiments: data generation, training, evaluation,
//! embedding inspection and the four-row ablation matrix.
//!
//! Everything a run writes lives under `out_dir`:
//!
//! ```text
//! data/train.jsonl  data/test.jsonl  data/long.jsonl  [data/train_aug.jsonl]
//! model.ckpt  train_log.tsv
//! report.txt  report.json
//! embeddings/similarity.f64  embeddings/target.f64  embeddings/summary.json
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{error_propagation_probe, evaluate, render_table, EvalReport, ProbeResult};
use crate::manifest::{read_manifest, write_manifest, FrameStorage};
use crate::model::{load_checkpoint, ModelConfig, TinyDecoderModel};
use crate::synth::{augment_corpus, generate, histogram, GeneratorConfig, Utterance};
use crate::training::{cosine_similarity, gaussian_target, mean_offdiag_row_correlation, reg_loss, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub downsample: usize,
    pub max_tokens: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            downsample: 5,
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Master seed. Corpus seeds, the model initialisation and the training
    /// sampler are all derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_utterances: usize,
    pub test_utterances: usize,
    /// Size of the long-utterance split; zero skips it.
    pub long_test_utterances: usize,
    /// Long utterances last at least this multiple of the longest possible
    /// training utterance.
    pub long_factor: f64,
    /// Timestamp offset, in tokens, injected by the error-propagation probe.
    pub probe_offset: usize,
    /// Existing manifests to use instead of `out_dir/data/`.
    pub train_manifest: Option<PathBuf>,
    pub test_manifests: Vec<PathBuf>,
    pub generator: GeneratorConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            train_utterances: 5000,
            test_utterances: 200,
            long_test_utterances: 100,
            long_factor: 1.5,
            probe_offset: 20,
            train_manifest: None,
            test_manifests: Vec::new(),
            generator: GeneratorConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Seeds for one experiment, derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedSeeds {
    pub train_corpus: u64,
    pub test_corpus: u64,
    pub long_corpus: u64,
    pub init: u64,
    pub sampler: u64,
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.train_utterances == 0 || self.test_utterances == 0 {
            return Err(Error::Domain("train and test corpora must be non-empty".into()));
        }
        if !(self.long_factor >= 1.0) {
            return Err(Error::Domain(format!("long_factor {} must be at least 1", self.long_factor)));
        }
        if self.probe_offset == 0 {
            return Err(Error::Domain("probe_offset must be at least 1".into()));
        }
        self.model_config()?.validate()
    }

    pub fn seeds(&self) -> DerivedSeeds {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        DerivedSeeds {
            train_corpus: rng.random(),
            test_corpus: rng.random(),
            long_corpus: rng.random(),
            init: rng.random(),
            sampler: rng.random(),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.generator.vocabulary()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            ff_mult: m.ff_mult,
            downsample: m.downsample,
            max_tokens: m.max_tokens,
            init_seed: self.seeds().init,
            ..ModelConfig::new(self.vocabulary()?, self.generator.feature_dim)
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().sampler,
            ..self.train.clone()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.train_manifest
            .clone()
            .unwrap_or_else(|| self.data_dir().join("train.jsonl"))
    }

    /// Named evaluation corpora: the configured manifests, or the generated
    /// test and long splits.
    pub fn test_paths(&self) -> Vec<(String, PathBuf)> {
        if !self.test_manifests.is_empty() {
            return self
                .test_manifests
                .iter()
                .map(|p| {
                    let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (name, p.clone())
                })
                .collect();
        }
        let mut out = vec![("test".to_string(), self.data_dir().join("test.jsonl"))];
        if self.long_test_utterances > 0 {
            out.push(("long".to_string(), self.data_dir().join("long.jsonl")));
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.ckpt")
    }

    /// Shortest duration admitted to the long split.
    pub fn long_min_ms(&self) -> f64 {
        self.long_factor * self.generator.max_duration_ms() as f64
    }
}

/// Generates `count` utterances no shorter than `min_ms` by drawing from a
/// word-count range that reaches that length, and keeping qualifying draws.
pub fn generate_long(base: &GeneratorConfig, min_ms: f64, count: usize, seed: u64) -> Result<Vec<Utterance>> {
    let limit = base.timestamp_count as f64 * base.resolution_ms as f64;
    let per_word_max = (base.max_word_ms + base.max_gap_ms) as f64;
    let per_word_mean = (base.min_word_ms + base.max_word_ms + base.min_gap_ms + base.max_gap_ms) as f64 / 2.0;
    let max_words = (((limit - 1.0) / per_word_max).floor() as usize).min(base.vocab_size);
    let min_words = ((min_ms / per_word_mean).ceil() as usize).clamp(1, max_words.max(1));
    if max_words as f64 * per_word_max <= min_ms {
        return Err(Error::Range(format!(
            "no utterance of at least {min_ms} ms fits in {limit} ms of timestamps"
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut round = 0u64;
    while out.len() < count {
        if round == 1000 {
            return Err(Error::Range(format!("could not draw {count} utterances of at least {min_ms} ms")));
        }
        let cfg = GeneratorConfig {
            min_words,
            max_words,
            seed: seed.wrapping_add(round),
            ..base.clone()
        };
        let batch = generate(&cfg, count)?;
        out.extend(batch.into_iter().filter(|u| u.duration_ms() >= min_ms));
        round += 1;
    }
    out.truncate(count);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub corpus: String,
    pub utterances: usize,
    pub timestamps: usize,
    pub max_occupied: Option<usize>,
    /// Timestamps beyond the training corpus's largest index.
    pub tail_mass: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub histograms: Vec<HistogramSummary>,
}

impl DataSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>10} {:>12} {:>10}", "corpus", "utts", "stamps", "max index", "tail");
        for h in &self.histograms {
            let max = h.max_occupied.map_or("-".to_string(), |m| m.to_string());
            let _ = writeln!(
                out,
                "{:<12} {:>10} {:>10} {:>12} {:>10}",
                h.corpus, h.utterances, h.timestamps, max, h.tail_mass
            );
        }
        out
    }
}

fn summarize(name: &str, corpus: &[Utterance], vocab: &Vocabulary, reference_max: Option<usize>) -> Result<HistogramSummary> {
    let h = histogram(corpus, vocab)?;
    let max_occupied = h.max_occupied();
    let cut = reference_max.or(max_occupied).unwrap_or(0);
    Ok(HistogramSummary {
        corpus: name.to_string(),
        utterances: corpus.len(),
        timestamps: h.total(),
        max_occupied,
        tail_mass: h.mass_above(cut),
    })
}

/// Writes the train, test and long manifests (plus the augmented training
/// set when length augmentation is on) and summarizes their timestamp
/// histograms.
pub fn cmd_gen_data(spec: &ExperimentSpec) -> Result<DataSummary> {
    spec.validate()?;
    let seeds = spec.seeds();
    let vocab = spec.vocabulary()?;
    let dir = spec.data_dir();
    fs::create_dir_all(&dir)?;

    let train_cfg = GeneratorConfig {
        seed: seeds.train_corpus,
        ..spec.generator.clone()
    };
    let test_cfg = GeneratorConfig {
        seed: seeds.test_corpus,
        ..spec.generator.clone()
    };
    let train_set = generate(&train_cfg, spec.train_utterances)?;
    let test_set = generate(&test_cfg, spec.test_utterances)?;
    write_manifest(&dir.join("train.jsonl"), &train_set, FrameStorage::External)?;
    write_manifest(&dir.join("test.jsonl"), &test_set, FrameStorage::External)?;

    let base = summarize("train", &train_set, &vocab, None)?;
    let train_max = base.max_occupied;
    let mut histograms = vec![base, summarize("test", &test_set, &vocab, train_max)?];
    if spec.long_test_utterances > 0 {
        let long = generate_long(&spec.generator, spec.long_min_ms(), spec.long_test_utterances, seeds.long_corpus)?;
        write_manifest(&dir.join("long.jsonl"), &long, FrameStorage::External)?;
        histograms.push(summarize("long", &long, &vocab, train_max)?);
    }
    if spec.train.length_aug {
        let aug = augment_corpus(&train_set, vocab.max_duration_ms());
        if !aug.is_empty() {
            write_manifest(&dir.join("train_aug.jsonl"), &aug, FrameStorage::External)?;
            histograms.push(summarize("train_aug", &aug, &vocab, train_max)?);
        }
    }
    Ok(DataSummary { histograms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_ce: f64,
    pub final_reg: f64,
}

/// Trains on the spec's training manifest and writes `model.ckpt` and
/// `train_log.tsv`. Nothing is written if the corpus cannot be read.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let corpus = read_manifest(&spec.train_path())?;
    fs::create_dir_all(&spec.out_dir)?;
    let checkpoint = spec.checkpoint_path();
    let (_, log) = train(&corpus, spec.model_config()?, &spec.train_config(), Some(&checkpoint))?;
    let log_path = spec.out_dir.join("train_log.tsv");
    fs::write(&log_path, log.to_tsv())?;
    let last = log.rows.last().copied();
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        final_ce: last.map_or(f64::NAN, |r| r.ce),
        final_reg: last.map_or(f64::NAN, |r| r.reg),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub reports: Vec<EvalReport>,
    /// Probe on the first evaluation corpus.
    pub probe: Option<ProbeResult>,
    pub probe_offset: usize,
}

impl EvaluationOutcome {
    pub fn report(&self, corpus: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.corpus == corpus)
    }
}

pub fn load_model(path: &Path) -> Result<TinyDecoderModel> {
    Ok(load_checkpoint(path)?.0)
}

/// Evaluates a checkpoint on every configured test corpus and writes
/// `report.txt` and `report.json` to the output directory.
pub fn cmd_evaluate(spec: &ExperimentSpec, checkpoint: &Path) -> Result<EvaluationOutcome> {
    let model = load_model(checkpoint)?;
    let vocab = model.vocab().clone();
    let mut reports = Vec::new();
    let mut probe = None;
    for (name, path) in spec.test_paths() {
        let corpus = read_manifest(&path)?;
        reports.push(evaluate(&model, &corpus, &vocab, &name)?);
        if probe.is_none() {
            probe = Some(error_propagation_probe(&model, &corpus, spec.probe_offset)?);
        }
    }
    let outcome = EvaluationOutcome {
        reports,
        probe,
        probe_offset: spec.probe_offset,
    };
    fs::create_dir_all(&spec.out_dir)?;
    fs::write(spec.out_dir.join("report.txt"), render_evaluation(&outcome))?;
    fs::write(spec.out_dir.join("report.json"), serde_json::to_string_pretty(&outcome)? + "\n")?;
    Ok(outcome)
}

pub fn render_evaluation(outcome: &EvaluationOutcome) -> String {
    let mut out = render_table(&outcome.reports);
    if let Some(p) = &outcome.probe {
        let _ = writeln!(
            out,
            "probe (offset {}): clean AAS {:.2} ms, injected AAS {:.2} ms, degradation {:.2} ms",
            outcome.probe_offset,
            p.aas_clean,
            p.aas_injected,
            p.degradation()
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub n: usize,
    pub sigma: f64,
    /// `mean((S - G)²)`, the regularizer's value.
    pub mse: f64,
    pub mean_row_correlation: f64,
}

fn write_matrix(path: &Path, m: &ndarray::Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for x in m.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Similarity structure of a checkpoint's timestamp embeddings. When
/// `out_dir` is given, `S` and `G` are written there as little-endian `f64`
/// row-major matrices next to `summary.json`.
pub fn cmd_inspect_embeddings(checkpoint: &Path, out_dir: Option<&Path>) -> Result<EmbeddingSummary> {
    let (model, header) = load_checkpoint(checkpoint)?;
    let w = model.timestamp_embeddings();
    let target = gaussian_target(w.nrows(), header.sigma)?;
    let s = cosine_similarity(w)?;
    let summary = EmbeddingSummary {
        n: w.nrows(),
        sigma: header.sigma,
        mse: reg_loss(w, &target)?,
        mean_row_correlation: mean_offdiag_row_correlation(s.view(), target.g.view()),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_matrix(&dir.join("similarity.f64"), &s)?;
        write_matrix(&dir.join("target.f64"), &target.g)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(summary)
}

/// The ablation rows, each adding one strategy to the previous row.
pub const MATRIX_ROWS: [&str; 4] = ["baseline", "length_aug", "timestamp_reg", "reduced_tf"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub name: String,
    pub length_aug: bool,
    pub w_reg: f64,
    pub p: f64,
    pub evaluation: EvaluationOutcome,
    pub embeddings: EmbeddingSummary,
}

/// Spec for one ablation row. Rows share the data directory of `spec`; the
/// regularizer weight and corruption probability of the later rows come from
/// `spec.train`.
pub fn matrix_row_spec(spec: &ExperimentSpec, row: usize) -> ExperimentSpec {
    let (length_aug, w_reg, p) = match row {
        0 => (false, 0.0, 0.0),
        1 => (true, 0.0, 0.0),
        2 => (true, spec.train.w_reg, 0.0),
        _ => (true, spec.train.w_reg, spec.train.p),
    };
    ExperimentSpec {
        out_dir: spec.out_dir.join(MATRIX_ROWS[row]),
        train_manifest: Some(spec.train_path()),
        test_manifests: spec.test_paths().into_iter().map(|(_, p)| p).collect(),
        train: TrainConfig {
            length_aug,
            w_reg,
            p,
            ..spec.train.clone()
        },
        ..spec.clone()
    }
}

/// Trains, evaluates and inspects one ablation row. Expects the data of
/// `spec` to exist already.
pub fn run_matrix_row(spec: &ExperimentSpec, row: usize) -> Result<MatrixRow> {
    let row_spec = matrix_row_spec(spec, row);
    let trained = cmd_train(&row_spec)?;
    let evaluation = cmd_evaluate(&row_spec, &trained.checkpoint)?;
    let embeddings = cmd_inspect_embeddings(&trained.checkpoint, Some(&row_spec.out_dir.join("embeddings")))?;
    Ok(MatrixRow {
        name: MATRIX_ROWS[row].to_string(),
        length_aug: row_spec.train.length_aug,
        w_reg: row_spec.train.w_reg,
        p: row_spec.train.p,
        evaluation,
        embeddings,
    })
}

/// Generates data once, trains and evaluates the four ablation rows, and
/// writes `matrix.txt` and `matrix.json`. Rows run one after another unless
/// `parallel` is set.
pub fn run_matrix(spec: &ExperimentSpec, parallel: bool) -> Result<Vec<MatrixRow>> {
    cmd_gen_data(spec)?;
    let rows: Vec<MatrixRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..MATRIX_ROWS.len())
                .map(|i| scope.spawn(move || run_matrix_row(spec, i)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Usage("matrix worker panicked".into()))))
                .collect::<Result<_>>()
        })?
    } else {
        (0..MATRIX_ROWS.len()).map(|i| run_matrix_row(spec, i)).collect::<Result<_>>()?
    };
    fs::write(spec.out_dir.join("matrix.txt"), render_matrix(&rows))?;
    fs::write(spec.out_dir.join("matrix.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(rows)
}

pub fn render_matrix(rows: &[MatrixRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:<8} {:>8} {:>9} {:>8} {:>10} {:>8} {:>10} {:>10}",
        "row", "corpus", "WER(%)", "AAS(ms)", "MAL(%)", "MSE(S,G)", "corr", "probe(ms)", "aug/w/p"
    );
    for r in rows {
        let probe = r.evaluation.probe.map_or(f64::NAN, |p| p.degradation());
        for rep in &r.evaluation.reports {
            let _ = writeln!(
                out,
                "{:<14} {:<8} {:>8.2} {:>9.2} {:>8.2} {:>10.5} {:>8.4} {:>10.2} {:>10}",
                r.name,
                rep.corpus,
                rep.wer_pct,
                rep.aas_ms,
                rep.mal_pct,
                r.embeddings.mse,
                r.embeddings.mean_row_correlation,
                probe,
                format!("{}/{}/{}", if r.length_aug { "on" } else { "off" }, r.w_reg, r.p)
            );
        }
    }
    out
}
