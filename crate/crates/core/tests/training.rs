mod common;

use std::fs;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttrnn::data::generate_synthetic;
use ttrnn::model::SequenceModel;
use ttrnn::rnn::{CellKind, RnnCell};
use ttrnn::train::checkpoint::{encode_checkpoint, read_checkpoint, write_checkpoint};
use ttrnn::train::optim::{adam_step, AdamConfig};
use ttrnn::train::{argmax, fit, split_indices, Classifier, Example, HeadMode, TrainConfig, TrainState};
use ttrnn::{DenseTensor, Error, TtShape};

fn small_model(kind: CellKind, seed: u64) -> SequenceModel {
    let shape = TtShape::new([2, 3, 4], [2, 2, 2], [1, 2, 2, 1]).unwrap();
    let cell = RnnCell::tt(kind, &shape, seed).unwrap();
    let head = Classifier::init(8, 3, HeadMode::Softmax, seed + 1).unwrap();
    SequenceModel::new(cell, head).unwrap()
}

fn toy_examples(rng: &mut ChaCha8Rng, count: usize) -> Vec<Example> {
    (0..count)
        .map(|i| {
            let t = 2 + i % 3;
            let class = i % 3;
            let mut frames = random_matrix(rng, t, 24, 0.5);
            // Make the class weakly visible in the last frame.
            frames.row_mut(t - 1)[class] += 1.0;
            let mut target = vec![0.0; 3];
            target[class] = 1.0;
            Example { frames, target }
        })
        .collect()
}

fn batch_refs(examples: &[Example]) -> (Vec<&DenseTensor>, Vec<&[f64]>) {
    (
        examples.iter().map(|e| &e.frames).collect(),
        examples.iter().map(|e| e.target.as_slice()).collect(),
    )
}

#[test]
fn small_step_does_not_increase_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let examples = toy_examples(&mut rng, 6);
    let (seqs, targets) = batch_refs(&examples);
    let seeds = vec![0; examples.len()];
    let cfg = AdamConfig {
        learning_rate: 1e-4,
        ..AdamConfig::default()
    };
    for init in 0..5 {
        let mut state = TrainState::new(small_model(CellKind::Gru, 10 * init), init);
        let (before, grads) = state.model.loss_and_grad(&seqs, &targets, &seeds, 0.0, 0.01, 1).unwrap();
        state.adam_update(&grads, &cfg).unwrap();
        let after = state.model.loss(&seqs, &targets, &seeds, 0.0, 0.01).unwrap();
        assert!(after <= before, "init {init}: {before} -> {after}");
    }
}

#[test]
fn large_ridge_shrinks_classifier_norm_every_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let examples = toy_examples(&mut rng, 12);
    let mut state = TrainState::new(small_model(CellKind::Lstm, 3), 4);
    let cfg = AdamConfig::default();
    let mut norms = vec![state.model.head.squared_norm()];
    for epoch in 0..15u64 {
        for (b, chunk) in examples.chunks(4).enumerate() {
            let (seqs, targets) = batch_refs(chunk);
            let seeds: Vec<u64> = (0..chunk.len() as u64).map(|i| epoch * 100 + b as u64 * 10 + i).collect();
            let (_, grads) = state.model.loss_and_grad(&seqs, &targets, &seeds, 0.25, 1e3, 1).unwrap();
            state.adam_update(&grads, &cfg).unwrap();
        }
        norms.push(state.model.head.squared_norm());
    }
    for pair in norms.windows(2) {
        assert!(pair[1] < pair[0], "{norms:?}");
    }
}

#[test]
fn threaded_gradients_match_single_threaded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples = toy_examples(&mut rng, 11);
    let (seqs, targets) = batch_refs(&examples);
    let seeds: Vec<u64> = (0..examples.len() as u64).collect();
    for kind in [CellKind::Srnn, CellKind::Gru, CellKind::Lstm] {
        let model = small_model(kind, 7);
        let (l1, g1) = model.loss_and_grad(&seqs, &targets, &seeds, 0.25, 0.01, 1).unwrap();
        for threads in [2, 3, 4, 16] {
            let (lt, gt) = model.loss_and_grad(&seqs, &targets, &seeds, 0.25, 0.01, threads).unwrap();
            assert!((lt - l1).abs() <= 1e-10 * l1.abs());
            assert!(max_rel_error(&gt.flat_params(), &g1.flat_params()) <= 1e-10);
        }
    }
}

fn split(examples: &[Example]) -> (Vec<Example>, Vec<Example>) {
    let (tr, va) = split_indices(examples.len(), 0.25, 0);
    (
        tr.iter().map(|&i| examples[i].clone()).collect(),
        va.iter().map(|&i| examples[i].clone()).collect(),
    )
}

#[test]
fn seeded_fit_is_bitwise_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (train, val) = split(&toy_examples(&mut rng, 24));
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = fit(small_model(CellKind::Gru, 1), &train, &val, &cfg, Some(&path)).unwrap();
        let log: Vec<String> = out.log.iter().map(|r| r.line()).collect();
        (log, fs::read(&path).unwrap(), out)
    };
    let (log_a, ckpt_a, out_a) = run("a.ttrn");
    let (log_b, ckpt_b, _) = run("b.ttrn");
    assert_eq!(log_a.len(), 4);
    assert_eq!(log_a, log_b);
    assert_eq!(ckpt_a, ckpt_b);
    // The checkpoint holds the best epoch, not the last one.
    assert_eq!(ckpt_a, encode_checkpoint(&out_a.best).unwrap());
    let restored = read_checkpoint(&dir.path().join("a.ttrn")).unwrap();
    assert_eq!(restored, out_a.best);
    let best = out_a.log.iter().map(|r| r.metric.value).fold(f64::MIN, f64::max);
    assert_eq!(out_a.best_metric, best);
}

#[test]
fn threaded_fit_stays_close_to_single_threaded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (train, val) = split(&toy_examples(&mut rng, 16));
    let base = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let single = fit(small_model(CellKind::Lstm, 2), &train, &val, &base, None).unwrap();
    let multi = fit(
        small_model(CellKind::Lstm, 2),
        &train,
        &val,
        &TrainConfig { threads: 4, ..base },
        None,
    )
    .unwrap();
    for (a, b) in single.log.iter().zip(&multi.log) {
        assert!((a.train_loss - b.train_loss).abs() <= 1e-10 * a.train_loss.abs());
    }
    assert!(max_rel_error(&multi.state.model.flat_params(), &single.state.model.flat_params()) <= 1e-10);
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (train, val) = split(&toy_examples(&mut rng, 12));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.ttrn");
    let good = TrainState::new(small_model(CellKind::Gru, 3), 0);
    write_checkpoint(&path, &good).unwrap();
    let before = fs::read(&path).unwrap();

    let mut poisoned = train.clone();
    poisoned[0].frames.data_mut().fill(f64::MAX);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let err = fit(small_model(CellKind::Gru, 3), &poisoned, &val, &cfg, Some(&path)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn adam_rejects_non_finite_gradients_without_mutating() {
    let model = small_model(CellKind::Srnn, 1);
    let mut state = TrainState::new(model.clone(), 0);
    let mut grads = model.zeros_like();
    grads.head.bias[1] = f64::NAN;
    let err = state.adam_update(&grads, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Numerics(_)));
    assert!(err.to_string().contains("head.bias"), "{err}");
    assert_eq!(state.model, model);
    assert_eq!(state.adam.step, 0);
}

/// Softmax regression on the last frame alone, trained with Adam.
fn single_frame_accuracy(train: &[Example], val: &[Example]) -> f64 {
    let last = |e: &Example| e.frames.row(e.frames.dims()[0] - 1).to_vec();
    let m = train[0].frames.dims()[1];
    let mut clf = Classifier::init(m, 4, HeadMode::Softmax, 1).unwrap();
    let cfg = AdamConfig::default();
    let (mut mw, mut vw) = (vec![0.0; m * 4], vec![0.0; m * 4]);
    let (mut mb, mut vb) = (vec![0.0; 4], vec![0.0; 4]);
    let mut step = 0;
    for _ in 0..30 {
        for chunk in train.chunks(16) {
            let mut gw = vec![0.0; m * 4];
            let mut gb = vec![0.0; 4];
            for e in chunk {
                let x = last(e);
                let p = clf.classify(&x).unwrap();
                for c in 0..4 {
                    let dz = (p[c] - e.target[c]) / chunk.len() as f64;
                    gb[c] += dz;
                    for i in 0..m {
                        gw[i * 4 + c] += x[i] * dz;
                    }
                }
            }
            for (g, w) in gw.iter_mut().zip(clf.weight.data()) {
                *g += 2.0 * 0.01 * w;
            }
            step += 1;
            adam_step(clf.weight.data_mut(), &gw, &mut mw, &mut vw, step, &cfg);
            adam_step(&mut clf.bias, &gb, &mut mb, &mut vb, step, &cfg);
        }
    }
    let hits = val
        .iter()
        .filter(|e| argmax(&clf.classify(&last(e)).unwrap()) == e.class())
        .count();
    hits as f64 / val.len() as f64
}

#[test]
fn single_frames_carry_no_class_signal() {
    let ds = generate_synthetic(125, (8, 16), 16, 16, 3, 0.05, 7).unwrap();
    let examples = ds.examples();
    let (tr, va) = split_indices(examples.len(), 0.2, 0);
    let train: Vec<Example> = tr.iter().map(|&i| examples[i].clone()).collect();
    let val: Vec<Example> = va.iter().map(|&i| examples[i].clone()).collect();
    assert_eq!((train.len(), val.len()), (400, 100));
    let acc = single_frame_accuracy(&train, &val);
    assert!(acc <= 0.35, "single-frame accuracy {acc}");
}

#[test]
fn fit_rejects_mismatched_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (train, mut val) = split(&toy_examples(&mut rng, 8));
    val[0].target.push(0.0);
    let cfg = TrainConfig::default();
    assert!(matches!(fit(small_model(CellKind::Gru, 1), &train, &val, &cfg, None), Err(Error::Shape(_))));
}
