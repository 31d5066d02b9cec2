//! A small decoder-only transformer over `[task | acoustic prefix | tokens]`.
//!
//! Frames are stacked in groups of `downsample` and projected to the model
//! width by a linear adapter. The task indicator and the adapted frames form
//! a bidirectional prefix; tokens attend causally to each other and to the
//! whole prefix. Input and output token embeddings share one table, so the
//! timestamp rows of that table are the embedding matrix that the
//! regularizer acts on.

mod checkpoint;
mod layers;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMut2, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{InterleavedSequence, Special, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::synth::FRAME_MS;
use layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, masked_softmax_rows, sinusoidal_positions,
    LayerNormCache,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

/// Initial token embedding scale and position code amplitude, chosen so that
/// neither signal swamps the other at the input.
const EMBEDDING_STD: f64 = 0.15;
const POSITION_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Frames stacked per adapter step.
    pub downsample: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(vocab: Vocabulary, feature_dim: usize) -> Self {
        let max_frames = (vocab.max_duration_ms() / FRAME_MS as f64) as usize;
        ModelConfig {
            vocab,
            feature_dim,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            downsample: 5,
            max_frames,
            max_tokens: 64,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.downsample == 0 || self.feature_dim == 0 || self.ff_mult == 0 {
            return Err(Error::Shape("downsample, feature_dim and ff_mult must be positive".into()));
        }
        Ok(())
    }

    fn max_groups(&self) -> usize {
        self.max_frames.div_ceil(self.downsample)
    }

    fn max_positions(&self) -> usize {
        1 + self.max_groups() + self.max_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Every trainable tensor. Also used, zero-initialised, as a gradient buffer
/// and as optimizer moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `|vocab| x d`, shared by the input lookup and the output projection.
    pub tok_emb: Array2<f64>,
    pub adapter_w: Array2<f64>,
    pub adapter_b: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub out_b: Array1<f64>,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.ff_mult * d;
        let v = cfg.vocab.len();
        let block = || BlockParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
        };
        Params {
            tok_emb: Array2::zeros((v, d)),
            adapter_w: Array2::zeros((cfg.downsample * cfg.feature_dim, d)),
            adapter_b: Array1::zeros(d),
            blocks: (0..cfg.layers).map(|_| block()).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            out_b: Array1::zeros(v),
        }
    }

    fn init(cfg: &ModelConfig) -> Self {
        let mut p = Params::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.layers as f64).sqrt();
        let mut fill = |a: &mut Array2<f64>, sd: f64| {
            let n = Normal::new(0.0, sd).unwrap();
            a.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        fill(&mut p.tok_emb, EMBEDDING_STD);
        let fan_in = p.adapter_w.nrows() as f64;
        fill(&mut p.adapter_w, 1.0 / fan_in.sqrt());
        for b in &mut p.blocks {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            fill(&mut b.wq, std);
            fill(&mut b.wk, std);
            fill(&mut b.wv, std);
            fill(&mut b.wo, resid_std);
            fill(&mut b.w1, std);
            fill(&mut b.w2, resid_std);
        }
        p.lnf_g.fill(1.0);
        p.round_to_f32();
        p
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("adapter_w".to_string(), self.adapter_w.view().into_dyn()),
            ("adapter_b".to_string(), self.adapter_b.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {
                    $(out.push((format!("blocks.{i}.{}", stringify!($f)), b.$f.view().into_dyn()));)*
                };
            }
            block_fields!(push);
        }
        out.push(("lnf_g".to_string(), self.lnf_g.view().into_dyn()));
        out.push(("lnf_b".to_string(), self.lnf_b.view().into_dyn()));
        out.push(("out_b".to_string(), self.out_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("adapter_w".to_string(), self.adapter_w.view_mut().into_dyn()),
            ("adapter_b".to_string(), self.adapter_b.view_mut().into_dyn()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {
                    $(out.push((format!("blocks.{i}.{}", stringify!($f)), b.$f.view_mut().into_dyn()));)*
                };
            }
            block_fields!(push);
        }
        out.push(("lnf_g".to_string(), self.lnf_g.view_mut().into_dyn()));
        out.push(("lnf_b".to_string(), self.lnf_b.view_mut().into_dyn()));
        out.push(("out_b".to_string(), self.out_b.view_mut().into_dyn()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn scale(&mut self, c: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Per-parameter gradient buffers, shaped like [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub grads: Params,
}

impl GradientTape {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        GradientTape {
            grads: Params::zeros(cfg),
        }
    }

    pub fn zero(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn norm(&self) -> f64 {
        self.grads.sum_of_squares().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.is_finite()
    }

    /// Rows of the timestamp block of the shared embedding gradient.
    pub fn timestamp_rows_mut(&mut self, vocab: &Vocabulary) -> ArrayViewMut2<'_, f64> {
        let first = vocab.first_timestamp_id();
        self.grads.tok_emb.slice_mut(s![first.., ..])
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    m: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    task: Special,
    tokens: Vec<TokenId>,
    stacked: Array2<f64>,
    groups: usize,
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    f: Array2<f64>,
}

/// Output of a training-mode forward pass. Holds the activations needed for
/// exactly one call to [`TinyDecoderModel::backward`].
pub struct ForwardPass {
    pub logits: Array2<f64>,
    cache: Option<ForwardCache>,
}

impl ForwardPass {
    pub fn is_consumed(&self) -> bool {
        self.cache.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDecoderModel {
    pub config: ModelConfig,
    pub params: Params,
    positions: Array2<f64>,
}

impl TinyDecoderModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = Params::zeros(&config);
        for ((name, want), (_, got)) in expected.tensors().iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        let positions = sinusoidal_positions(config.max_positions(), config.d_model) * POSITION_SCALE;
        Ok(TinyDecoderModel {
            config,
            params,
            positions,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    /// The `N x d` timestamp embedding block. Same storage as the rows the
    /// input lookup and output projection read.
    pub fn timestamp_embeddings(&self) -> ArrayView2<'_, f64> {
        let first = self.config.vocab.first_timestamp_id();
        self.params.tok_emb.slice(s![first.., ..])
    }

    pub fn timestamp_embeddings_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let first = self.config.vocab.first_timestamp_id();
        self.params.tok_emb.slice_mut(s![first.., ..])
    }

    fn check_inputs(&self, frames: ArrayView2<f64>, tokens: &[TokenId]) -> Result<()> {
        let cfg = &self.config;
        if frames.nrows() == 0 {
            return Err(Error::Shape("the acoustic prefix needs at least one frame".into()));
        }
        if frames.nrows() > cfg.max_frames {
            return Err(Error::Shape(format!(
                "{} frames exceed the maximum of {}",
                frames.nrows(),
                cfg.max_frames
            )));
        }
        if frames.ncols() != cfg.feature_dim {
            return Err(Error::Shape(format!(
                "frames have {} features, model expects {}",
                frames.ncols(),
                cfg.feature_dim
            )));
        }
        if tokens.is_empty() || tokens.len() > cfg.max_tokens {
            return Err(Error::Shape(format!(
                "token count {} outside [1, {}]",
                tokens.len(),
                cfg.max_tokens
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab.len()) {
            return Err(Error::Vocab(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn stack_frames(&self, frames: ArrayView2<f64>) -> Array2<f64> {
        let k = self.config.downsample;
        let f = self.config.feature_dim;
        let groups = frames.nrows().div_ceil(k);
        let mut stacked = Array2::zeros((groups, k * f));
        for (t, row) in frames.rows().into_iter().enumerate() {
            let (g, j) = (t / k, t % k);
            stacked.slice_mut(s![g, j * f..(j + 1) * f]).assign(&row);
        }
        stacked
    }

    /// Logits for every input token position, `len(tokens) x |vocab|`.
    /// Row `i` depends only on the frames, the task and `tokens[..=i]`.
    pub fn forward(&self, frames: ArrayView2<f64>, task: Special, tokens: &[TokenId]) -> Result<Array2<f64>> {
        Ok(self.forward_train(frames, task, tokens)?.logits)
    }

    pub fn forward_train(
        &self,
        frames: ArrayView2<f64>,
        task: Special,
        tokens: &[TokenId],
    ) -> Result<ForwardPass> {
        self.check_inputs(frames, tokens)?;
        let p = &self.params;
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let stacked = self.stack_frames(frames);
        let groups = stacked.nrows();
        let len = 1 + groups + tokens.len();
        let mut x = Array2::<f64>::zeros((len, d));
        x.row_mut(0).assign(&p.tok_emb.row(task.id()));
        let adapted = stacked.dot(&p.adapter_w) + &p.adapter_b;
        x.slice_mut(s![1..1 + groups, ..]).assign(&adapted);
        for (j, &t) in tokens.iter().enumerate() {
            x.row_mut(1 + groups + j).assign(&p.tok_emb.row(t));
        }
        x += &self.positions.slice(s![..len, ..]);

        // prefix rows 0..=groups see the whole prefix; token rows are causal
        let allowed = |r: usize| r.max(groups) + 1;
        let mut block_caches = Vec::with_capacity(cfg.layers);
        for b in &p.blocks {
            let (a, ln1) = layer_norm(x.view(), b.ln1_g.view(), b.ln1_b.view());
            let q = a.dot(&b.wq) + &b.bq;
            let k = a.dot(&b.wk) + &b.bk;
            let v = a.dot(&b.wv) + &b.bv;
            let mut o = Array2::<f64>::zeros((len, d));
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                masked_softmax_rows(&mut scores, allowed);
                o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            x = x + o.dot(&b.wo) + &b.bo;
            let (m, ln2) = layer_norm(x.view(), b.ln2_g.view(), b.ln2_b.view());
            let u = m.dot(&b.w1) + &b.b1;
            let g = u.mapv(gelu);
            x = x + g.dot(&b.w2) + &b.b2;
            block_caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                m,
                u,
                g,
            });
        }
        let tok_rows = x.slice(s![1 + groups.., ..]);
        let (f, lnf) = layer_norm(tok_rows, p.lnf_g.view(), p.lnf_b.view());
        let logits = f.dot(&p.tok_emb.t()) + &p.out_b;
        Ok(ForwardPass {
            logits,
            cache: Some(ForwardCache {
                task,
                tokens: tokens.to_vec(),
                stacked,
                groups,
                blocks: block_caches,
                lnf,
                f,
            }),
        })
    }

    /// Back-propagates `dlogits` (the gradient of a scalar loss with respect
    /// to `pass.logits`) and accumulates parameter gradients into `tape`.
    /// A pass can be back-propagated once.
    pub fn backward(&self, pass: &mut ForwardPass, dlogits: ArrayView2<f64>, tape: &mut GradientTape) -> Result<()> {
        let cache = pass
            .cache
            .take()
            .ok_or_else(|| Error::Usage("backward called twice on one forward pass".into()))?;
        if dlogits.dim() != pass.logits.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match logits {:?}",
                dlogits.dim(),
                pass.logits.dim()
            )));
        }
        if dlogits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerics("non-finite upstream gradient".into()));
        }
        let p = &self.params;
        let gr = &mut tape.grads;
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = cache.groups;
        let len = 1 + groups + cache.tokens.len();

        gr.out_b += &dlogits.sum_axis(Axis(0));
        gr.tok_emb += &dlogits.t().dot(&cache.f);
        let df = dlogits.dot(&p.tok_emb);
        let dtok = layer_norm_backward(
            df.view(),
            &cache.lnf,
            p.lnf_g.view(),
            gr.lnf_g.view_mut(),
            gr.lnf_b.view_mut(),
        );
        let mut dx = Array2::<f64>::zeros((len, d));
        dx.slice_mut(s![1 + groups.., ..]).assign(&dtok);

        for (b, (bc, gb)) in p
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(gr.blocks.iter_mut()))
            .rev()
        {
            // feed-forward
            gb.w2 += &bc.g.t().dot(&dx);
            gb.b2 += &dx.sum_axis(Axis(0));
            let mut du = dx.dot(&b.w2.t());
            du.zip_mut_with(&bc.u, |g, &u| *g *= gelu_grad(u));
            gb.w1 += &bc.m.t().dot(&du);
            gb.b1 += &du.sum_axis(Axis(0));
            let dm = du.dot(&b.w1.t());
            dx += &layer_norm_backward(
                dm.view(),
                &bc.ln2,
                b.ln2_g.view(),
                gb.ln2_g.view_mut(),
                gb.ln2_b.view_mut(),
            );

            // attention
            gb.wo += &bc.o.t().dot(&dx);
            gb.bo += &dx.sum_axis(Axis(0));
            let d_o = dx.dot(&b.wo.t());
            let mut dq = Array2::<f64>::zeros((len, d));
            let mut dk = Array2::<f64>::zeros((len, d));
            let mut dv = Array2::<f64>::zeros((len, d));
            for (h, probs) in bc.probs.iter().enumerate() {
                let cols = s![.., h * dh..(h + 1) * dh];
                let do_h = d_o.slice(cols);
                let mut ds = do_h.dot(&bc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&do_h));
                for (mut row, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
                    let inner = row.dot(&prow);
                    row.zip_mut_with(&prow, |g, &pr| *g = pr * (*g - inner) * scale);
                }
                dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
            }
            gb.wq += &bc.a.t().dot(&dq);
            gb.bq += &dq.sum_axis(Axis(0));
            gb.wk += &bc.a.t().dot(&dk);
            gb.bk += &dk.sum_axis(Axis(0));
            gb.wv += &bc.a.t().dot(&dv);
            gb.bv += &dv.sum_axis(Axis(0));
            let da = dq.dot(&b.wq.t()) + dk.dot(&b.wk.t()) + dv.dot(&b.wv.t());
            dx += &layer_norm_backward(
                da.view(),
                &bc.ln1,
                b.ln1_g.view(),
                gb.ln1_g.view_mut(),
                gb.ln1_b.view_mut(),
            );
        }

        {
            let mut row = gr.tok_emb.row_mut(cache.task.id());
            row += &dx.row(0);
        }
        let dadapted = dx.slice(s![1..1 + groups, ..]);
        gr.adapter_w += &cache.stacked.t().dot(&dadapted);
        gr.adapter_b += &dadapted.sum_axis(Axis(0));
        for (j, &t) in cache.tokens.iter().enumerate() {
            let mut row = gr.tok_emb.row_mut(t);
            row += &dx.row(1 + groups + j);
        }
        Ok(())
    }

    /// Argmax decoding from `<bos>` until `<eos>` or `max_len` tokens. The
    /// raw output is returned without repair.
    pub fn greedy_decode(&self, frames: ArrayView2<f64>, max_len: usize) -> Result<InterleavedSequence> {
        self.greedy_decode_with(frames, Special::TaskSrwt, max_len, |_, t| t)
    }

    /// Greedy decoding where `edit(step, token)` may replace each emitted
    /// token before it is appended and fed back.
    pub fn greedy_decode_with(
        &self,
        frames: ArrayView2<f64>,
        task: Special,
        max_len: usize,
        mut edit: impl FnMut(usize, TokenId) -> TokenId,
    ) -> Result<InterleavedSequence> {
        if max_len == 0 {
            return Err(Error::Domain("max_len must be at least 1".into()));
        }
        let max_len = max_len.min(self.config.max_tokens - 1);
        let mut input = vec![Special::Bos.id()];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.forward(frames, task, &input)?;
            let last = logits.row(logits.nrows() - 1);
            let next = argmax(last.iter().copied());
            if next == Special::Eos.id() {
                break;
            }
            let next = edit(out.len(), next);
            out.push(next);
            input.push(next);
        }
        Ok(InterleavedSequence::new(out))
    }
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests;
