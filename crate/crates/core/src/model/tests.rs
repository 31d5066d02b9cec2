use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codec::{parse, MalformedReason, ParseOutcome};
use crate::training::token_cross_entropy;

fn micro_config() -> ModelConfig {
    let vocab = Vocabulary::new(["a", "b", "c"], 8, 10).unwrap();
    ModelConfig {
        d_model: 16,
        layers: 2,
        heads: 4,
        max_tokens: 16,
        ..ModelConfig::new(vocab, 4)
    }
}

fn random_frames(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Model with every parameter drawn at unit-ish scale, so that gradients are
/// not dominated by the tiny default initialisation.
fn scrambled_model(seed: u64) -> TinyDecoderModel {
    let mut model = TinyDecoderModel::new(micro_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, mut t) in model.params.tensors_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    model
}

fn sample_inputs(model: &TinyDecoderModel) -> (Array2<f64>, Vec<TokenId>, Vec<Option<TokenId>>) {
    let v = model.vocab();
    let ts = v.first_timestamp_id();
    let a = v.word_id("a").unwrap();
    let b = v.word_id("b").unwrap();
    let frames = random_frames(7, 4, 1);
    let tokens = vec![Special::Bos.id(), a, ts + 2, b, ts + 5];
    let targets = vec![Some(a), Some(ts + 2), Some(b), Some(ts + 5), Some(Special::Eos.id())];
    (frames, tokens, targets)
}

fn ce(model: &TinyDecoderModel, frames: &Array2<f64>, tokens: &[TokenId], targets: &[Option<TokenId>]) -> f64 {
    let logits = model.forward(frames.view(), Special::TaskSrwt, tokens).unwrap();
    token_cross_entropy(logits.view(), targets).unwrap().0
}

#[test]
fn gradient_matches_central_differences() {
    let model = scrambled_model(3);
    let (frames, tokens, targets) = sample_inputs(&model);
    let mut pass = model.forward_train(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    let (_, _, dlogits) = token_cross_entropy(pass.logits.view(), &targets).unwrap();
    let mut tape = GradientTape::zeros(&model.config);
    model.backward(&mut pass, dlogits.view(), &mut tape).unwrap();

    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let analytic = tape.grads.tensors();
    let names: Vec<String> = analytic.iter().map(|(n, _)| n.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].1.len();
        for k in 0..len {
            let orig = probe.params.tensors()[ti].1.iter().nth(k).copied().unwrap();
            let set = |m: &mut TinyDecoderModel, v: f64| {
                *m.params.tensors_mut()[ti].1.iter_mut().nth(k).unwrap() = v;
            };
            set(&mut probe, orig + h);
            let up = ce(&probe, &frames, &tokens, &targets);
            set(&mut probe, orig - h);
            let down = ce(&probe, &frames, &tokens, &targets);
            set(&mut probe, orig);
            let fd = (up - down) / (2.0 * h);
            let an = *analytic[ti].1.iter().nth(k).unwrap();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            assert!(rel < 1e-4, "{name}[{k}]: fd {fd} analytic {an}");
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn logits_are_causal() {
    let model = scrambled_model(4);
    let (frames, tokens, _) = sample_inputs(&model);
    let base = model.forward(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    let mut permuted = tokens.clone();
    permuted.swap(3, 4);
    permuted[2] = model.vocab().word_id("c").unwrap();
    let other = model.forward(frames.view(), Special::TaskSrwt, &permuted).unwrap();
    for i in 0..2 {
        assert_eq!(base.row(i), other.row(i));
    }
    assert_ne!(base.row(2), other.row(2));
}

#[test]
fn prefix_is_attended_from_first_position() {
    let model = scrambled_model(5);
    let (mut frames, tokens, _) = sample_inputs(&model);
    let base = model.forward(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    frames.row_mut(3).mapv_inplace(|x| 2.0 * x);
    let changed = model.forward(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    assert_ne!(base.row(0), changed.row(0));
}

#[test]
fn shape_errors() {
    let model = scrambled_model(6);
    let (frames, tokens, _) = sample_inputs(&model);
    let empty = Array2::<f64>::zeros((0, 4));
    assert!(matches!(
        model.forward(empty.view(), Special::TaskSrwt, &tokens),
        Err(Error::Shape(_))
    ));
    let wide = Array2::<f64>::zeros((3, 5));
    assert!(matches!(
        model.forward(wide.view(), Special::TaskSrwt, &tokens),
        Err(Error::Shape(_))
    ));
    let long = Array2::<f64>::zeros((9, 4));
    assert!(matches!(
        model.forward(long.view(), Special::TaskSrwt, &tokens),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        model.forward(frames.view(), Special::TaskSrwt, &[999]),
        Err(Error::Vocab(_))
    ));
}

#[test]
fn backward_twice_is_usage_error() {
    let model = scrambled_model(7);
    let (frames, tokens, targets) = sample_inputs(&model);
    let mut pass = model.forward_train(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    let (_, _, d) = token_cross_entropy(pass.logits.view(), &targets).unwrap();
    let mut tape = GradientTape::zeros(&model.config);
    model.backward(&mut pass, d.view(), &mut tape).unwrap();
    assert!(pass.is_consumed());
    assert!(matches!(
        model.backward(&mut pass, d.view(), &mut tape),
        Err(Error::Usage(_))
    ));
}

#[test]
fn non_finite_upstream_gradient_is_rejected() {
    let model = scrambled_model(7);
    let (frames, tokens, _) = sample_inputs(&model);
    let mut pass = model.forward_train(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    let mut d = Array2::<f64>::zeros(pass.logits.dim());
    d[[0, 0]] = f64::NAN;
    let mut tape = GradientTape::zeros(&model.config);
    assert!(matches!(
        model.backward(&mut pass, d.view(), &mut tape),
        Err(Error::Numerics(_))
    ));
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let model = scrambled_model(8);
    let (mut frames, tokens, targets) = sample_inputs(&model);
    // feature 2 is silent everywhere, so its adapter rows see no signal
    frames.column_mut(2).fill(0.0);
    let mut pass = model.forward_train(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    let (_, _, d) = token_cross_entropy(pass.logits.view(), &targets).unwrap();
    let f_cache = {
        let c = pass.cache.as_ref().unwrap();
        c.f.clone()
    };
    let mut tape = GradientTape::zeros(&model.config);
    model.backward(&mut pass, d.view(), &mut tape).unwrap();
    let fdim = model.config.feature_dim;
    for slot in 0..model.config.downsample {
        assert!(tape.grads.adapter_w.row(slot * fdim + 2).iter().all(|&g| g == 0.0));
    }
    // word "c" never appears as an input: its embedding gradient is exactly
    // the output-projection term
    let c = model.vocab().word_id("c").unwrap();
    let close = |row: usize| {
        let want = d.column(row).dot(&f_cache);
        tape.grads
            .tok_emb
            .row(row)
            .iter()
            .zip(want.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-14)
    };
    assert!(close(c));
    // same for the unused task indicator
    assert!(close(Special::TaskTranscript.id()));
}

#[test]
fn always_eos_model_decodes_empty() {
    let mut model = scrambled_model(9);
    model.params.tok_emb.fill(0.0);
    model.params.out_b.fill(0.0);
    model.params.out_b[Special::Eos.id()] = 100.0;
    let frames = random_frames(6, 4, 2);
    let seq = model.greedy_decode(frames.view(), 10).unwrap();
    assert!(seq.is_empty());
    assert_eq!(
        parse(&seq, model.vocab()),
        ParseOutcome::Malformed(MalformedReason::Empty)
    );
    assert!(model.greedy_decode(frames.view(), 0).is_err());
}

#[test]
fn greedy_decode_is_deterministic() {
    let model = scrambled_model(10);
    let frames = random_frames(8, 4, 3);
    let a = model.greedy_decode(frames.view(), 12).unwrap();
    let b = model.greedy_decode(frames.view(), 12).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 12);
}

#[test]
fn timestamp_block_is_shared_storage() {
    let mut model = scrambled_model(11);
    let (frames, tokens, _) = sample_inputs(&model);
    let before = model.forward(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    let first = model.vocab().first_timestamp_id();
    model.timestamp_embeddings_mut().row_mut(2).fill(0.25);
    assert!(model.params.tok_emb.row(first + 2).iter().all(|&x| x == 0.25));
    assert!(model.timestamp_embeddings().row(2).iter().all(|&x| x == 0.25));
    let after = model.forward(frames.view(), Special::TaskSrwt, &tokens).unwrap();
    // output path: the logit column of that token changes at the first position
    assert_ne!(before[[0, first + 2]], after[[0, first + 2]]);
    // input path: positions after the token (index 2) change, earlier ones do not
    let other_cols = |r: usize| {
        (0..before.ncols())
            .filter(|&c| c != first + 2)
            .all(|c| before[[r, c]] == after[[r, c]])
    };
    assert!(other_cols(1));
    assert!(!other_cols(3));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = scrambled_model(12);
    model.params.round_to_f32();
    let header = CheckpointHeader {
        model: model.config.clone(),
        sigma: 2.0,
        w_reg: 0.1,
        p: 0.2,
        step: 7,
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &header).unwrap();
    let (loaded, h2) = load_checkpoint(&path).unwrap();
    assert_eq!(h2, header);
    assert_eq!(loaded.params, model.params);
    let path2 = dir.path().join("m2.ckpt");
    save_checkpoint(&path2, &loaded, &h2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_version_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let model = scrambled_model(13);
    let header = CheckpointHeader {
        model: model.config.clone(),
        sigma: 2.0,
        w_reg: 0.0,
        p: 0.0,
        step: 0,
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, &header).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Version { expected: 1, found: 99 })
    ));
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
}
