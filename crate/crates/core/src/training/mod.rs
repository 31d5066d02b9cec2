//! Loss stack, reduced teacher forcing and the training loop.

mod corruption;
mod loss;
mod optim;
mod regularizer;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Special;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, CheckpointHeader, GradientTape, ModelConfig, TinyDecoderModel};
use crate::synth::{augment_corpus, Utterance};

pub use corruption::corrupt_timestamps;
pub use loss::{loss_and_gradients, token_cross_entropy, total_loss, Example, LossBreakdown};
pub use optim::{AdamW, LrSchedule};
pub use regularizer::{
    cosine_similarity, default_sigma, gaussian_target, mean_offdiag_row_correlation, reg_loss,
    reg_loss_with_grad, GaussianTarget,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the timestamp embedding regularizer.
    pub w_reg: f64,
    /// Probability of corrupting each input timestamp.
    pub p: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Mix concatenated utterance pairs into training.
    pub length_aug: bool,
    /// Probability that a batch item is drawn from the augmented pool.
    pub aug_mix: f64,
    /// Probability that a batch item uses the transcript-only task.
    pub transcript_fraction: f64,
    pub seed: u64,
    /// Gaussian target bandwidth; `None` means a quarter of the token count.
    pub sigma: Option<f64>,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; zero disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many steps; zero writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w_reg: 0.1,
            p: 0.2,
            learning_rate: 4e-3,
            steps: 8000,
            batch_size: 8,
            length_aug: true,
            aug_mix: 0.5,
            transcript_fraction: 0.0,
            seed: 0,
            sigma: None,
            warmup_frac: 0.01,
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Domain(format!("{name} = {v} outside [0, 1]")))
            }
        };
        prob("p", self.p)?;
        prob("aug_mix", self.aug_mix)?;
        prob("transcript_fraction", self.transcript_fraction)?;
        prob("warmup_frac", self.warmup_frac)?;
        if !(self.w_reg >= 0.0) {
            return Err(Error::Domain(format!("w_reg = {} must be non-negative", self.w_reg)));
        }
        if !(self.learning_rate > 0.0) || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Domain("learning_rate, steps and batch_size must be positive".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::Domain(format!("sigma = {s} must be positive")));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, n: usize) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(n))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.learning_rate,
            warmup: ((self.steps as f64 * self.warmup_frac).round() as u64).max(1),
            total: self.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub ce: f64,
    pub reg: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// One tab-separated line per step: step, ce, reg, grad_norm, lr.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tce\treg\tgrad_norm\tlr\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.8}", r.step, r.ce, r.reg, r.grad_norm, r.lr);
        }
        out
    }
}

/// Optimizer state and running loss components.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW,
    pub last: LossBreakdown,
}

pub fn checkpoint_header(model: &TinyDecoderModel, cfg: &TrainConfig, step: u64) -> CheckpointHeader {
    CheckpointHeader {
        model: model.config.clone(),
        sigma: cfg.sigma_for(model.vocab().timestamp_count()),
        w_reg: cfg.w_reg,
        p: cfg.p,
        step,
    }
}

/// Trains a fresh model. Parameters are kept at `f32` precision after every
/// update so that checkpoints reload bit-exactly. When `checkpoint` is set,
/// it is rewritten every `checkpoint_every` steps and at the end; if the loss
/// diverges the last good checkpoint is left in place.
pub fn train(
    corpus: &[Utterance],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(TinyDecoderModel, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Domain("training corpus is empty".into()));
    }
    let mut model = TinyDecoderModel::new(model_cfg)?;
    let vocab = model.vocab().clone();
    let target = gaussian_target(vocab.timestamp_count(), cfg.sigma_for(vocab.timestamp_count()))?;
    let augmented = if cfg.length_aug {
        augment_corpus(corpus, vocab.max_duration_ms())
    } else {
        Vec::new()
    };
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = GradientTape::zeros(&model.config);
    let mut state = TrainState {
        step: 0,
        optimizer: AdamW::new(&model.config, cfg.weight_decay),
        last: LossBreakdown::default(),
    };
    let mut log = TrainLog::default();

    while state.step < cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let utt = if !augmented.is_empty() && rng.random::<f64>() < cfg.aug_mix {
                &augmented[rng.random_range(0..augmented.len())]
            } else {
                &corpus[rng.random_range(0..corpus.len())]
            };
            let task = if rng.random::<f64>() < cfg.transcript_fraction {
                Special::TaskTranscript
            } else {
                Special::TaskSrwt
            };
            let mut ex = Example::from_utterance(utt, &vocab, task)?;
            ex.corrupt(&vocab, cfg.p, &mut rng)?;
            batch.push(ex);
        }

        tape.zero();
        let losses = loss_and_gradients(&model, &batch, &target, cfg.w_reg, &mut tape)?;
        let grad_norm = tape.norm();
        if !grad_norm.is_finite() {
            return Err(Error::Numerics(format!("non-finite gradient at step {}", state.step)));
        }
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            tape.grads.scale(cfg.grad_clip / grad_norm);
        }
        let lr = schedule.at(state.step);
        state.optimizer.step(&mut model.params, &tape, lr);
        model.params.round_to_f32();
        if !model.params.is_finite() {
            return Err(Error::Numerics(format!("parameters diverged at step {}", state.step)));
        }
        log.rows.push(LogRow {
            step: state.step,
            ce: losses.ce,
            reg: losses.reg,
            grad_norm,
            lr,
        });
        state.last = losses;
        state.step += 1;

        if let Some(path) = checkpoint {
            let due = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
            if due || state.step == cfg.steps {
                save_checkpoint(path, &model, &checkpoint_header(&model, cfg, state.step))?;
            }
        }
    }
    Ok((model, log))
}
