use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::corruption::corrupt_timestamps;
use super::regularizer::{reg_loss, reg_loss_with_grad, GaussianTarget};
use crate::codec::{encode, Special, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{GradientTape, TinyDecoderModel};
use crate::synth::Utterance;

/// One teacher-forced training sequence.
#[derive(Debug, Clone)]
pub struct Example {
    pub frames: Array2<f64>,
    pub task: Special,
    /// `<bos>` followed by the (possibly corrupted) target body.
    pub input: Vec<TokenId>,
    /// Next-token targets aligned with `input`; `None` positions are masked.
    pub targets: Vec<Option<TokenId>>,
}

impl Example {
    pub fn from_utterance(u: &Utterance, vocab: &Vocabulary, task: Special) -> Result<Self> {
        let body: Vec<TokenId> = match task {
            Special::TaskSrwt => encode(&u.word_refs(), &u.end_times_ms, vocab)?.tokens,
            Special::TaskTranscript => u
                .words
                .iter()
                .map(|w| vocab.word_id(w))
                .collect::<Result<_>>()?,
            other => return Err(Error::Usage(format!("{other:?} is not a task indicator"))),
        };
        let mut input = Vec::with_capacity(body.len() + 1);
        input.push(Special::Bos.id());
        input.extend_from_slice(&body);
        let targets = body
            .iter()
            .copied()
            .chain(std::iter::once(Special::Eos.id()))
            .map(Some)
            .collect();
        Ok(Example {
            frames: u.frames.clone(),
            task,
            input,
            targets,
        })
    }

    /// Applies timestamp corruption to the decoder input only.
    pub fn corrupt<R: Rng + ?Sized>(&mut self, vocab: &Vocabulary, p: f64, rng: &mut R) -> Result<()> {
        if self.task != Special::TaskSrwt || p == 0.0 {
            return Ok(());
        }
        let body = crate::codec::InterleavedSequence::new(self.input[1..].to_vec());
        let corrupted = corrupt_timestamps(&body, vocab, p, rng)?;
        self.input.truncate(1);
        self.input.extend(corrupted);
        Ok(())
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Summed cross-entropy over unmasked rows and the gradient of that sum.
pub fn token_cross_entropy(
    logits: ArrayView2<f64>,
    targets: &[Option<TokenId>],
) -> Result<(f64, usize, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let mut sum = 0.0;
    let mut count = 0;
    for ((row, target), mut g) in logits.rows().into_iter().zip(targets).zip(grad.rows_mut()) {
        let Some(t) = *target else { continue };
        if t >= row.len() {
            return Err(Error::Vocab(format!("target id {t} outside the vocabulary")));
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for (gv, &v) in g.iter_mut().zip(row.iter()) {
            *gv = (v - max).exp();
            z += *gv;
        }
        sum += z.ln() + max - row[t];
        g.mapv_inplace(|e| e / z);
        g[t] -= 1.0;
        count += 1;
    }
    if !sum.is_finite() {
        return Err(Error::Numerics("non-finite cross-entropy".into()));
    }
    Ok((sum, count, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean token cross-entropy over the batch.
    pub ce: f64,
    /// Unweighted regularization loss.
    pub reg: f64,
}

/// Mean token cross-entropy plus `w_reg` times the embedding regularizer.
pub fn total_loss(
    model: &TinyDecoderModel,
    batch: &[Example],
    target: &GaussianTarget,
    w_reg: f64,
) -> Result<LossBreakdown> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let logits = model.forward(ex.frames.view(), ex.task, &ex.input)?;
        let (s, c, _) = token_cross_entropy(logits.view(), &ex.targets)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::Domain("batch has no target tokens".into()));
    }
    let ce = sum / count as f64;
    let reg = reg_loss(model.timestamp_embeddings(), target)?;
    finish(ce, reg, w_reg)
}

/// Same value as [`total_loss`]; also accumulates its gradient into `tape`.
pub fn loss_and_gradients(
    model: &TinyDecoderModel,
    batch: &[Example],
    target: &GaussianTarget,
    w_reg: f64,
    tape: &mut GradientTape,
) -> Result<LossBreakdown> {
    let count: usize = batch.iter().map(Example::target_count).sum();
    if count == 0 {
        return Err(Error::Domain("batch has no target tokens".into()));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for ex in batch {
        let mut pass = model.forward_train(ex.frames.view(), ex.task, &ex.input)?;
        let (s, _, mut grad) = token_cross_entropy(pass.logits.view(), &ex.targets)?;
        sum += s;
        grad *= inv;
        model.backward(&mut pass, grad.view(), tape)?;
    }
    let ce = sum * inv;
    let reg = if w_reg > 0.0 {
        let (reg, dw) = reg_loss_with_grad(model.timestamp_embeddings(), target)?;
        let mut rows = tape.timestamp_rows_mut(model.vocab());
        rows.scaled_add(w_reg, &dw);
        reg
    } else {
        reg_loss(model.timestamp_embeddings(), target)?
    };
    finish(ce, reg, w_reg)
}

fn finish(ce: f64, reg: f64, w_reg: f64) -> Result<LossBreakdown> {
    let total = ce + w_reg * reg;
    if !total.is_finite() {
        return Err(Error::Numerics(format!("non-finite loss (ce {ce}, reg {reg})")));
    }
    Ok(LossBreakdown { total, ce, reg })
}
