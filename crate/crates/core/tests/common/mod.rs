//! Reference implementations used as test oracles. None of these call into
//! the code paths they check.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ttrnn::model::SequenceModel;
use ttrnn::{DenseTensor, Shape, TtShape};

pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> DenseTensor {
    DenseTensor::from_vec(Shape::new([rows, cols]).unwrap(), data).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseTensor {
    matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

/// Plain triple-loop `x W + b`.
pub fn dense_affine(x: &DenseTensor, w: &DenseTensor, bias: Option<&[f64]>) -> Vec<f64> {
    let (b, m) = (x.dims()[0], x.dims()[1]);
    let n = w.dims()[1];
    let mut out = vec![0.0; b * n];
    for i in 0..b {
        for j in 0..n {
            let mut acc = bias.map_or(0.0, |bv| bv[j]);
            for k in 0..m {
                acc += x.data()[i * m + k] * w.data()[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `max |a - b| / max |b|`: the error relative to the reference's scale.
pub fn max_rel_error(a: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(a.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `||a - b|| / max(||a||, ||b||, floor)` in the Euclidean norm.
pub fn norm_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied())
        .max(norm(&mut b.iter().copied()))
        .max(floor);
    diff / scale
}

/// A random valid TT shape with `d` cores, `prod m <= max_size`,
/// `prod n <= max_size` and interior ranks in `1..=max_rank`.
pub fn random_tt_shape(
    rng: &mut ChaCha8Rng,
    d: usize,
    max_size: usize,
    max_rank: usize,
) -> TtShape {
    let factors = |rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(d);
        let mut left = max_size;
        for k in 0..d {
            // Leave room for at least 1 in every remaining factor.
            let cap = if k + 1 == d {
                left
            } else {
                (left as f64).powf(1.0 / (d - k) as f64).ceil() as usize + 2
            };
            let f = rng.random_range(1..=cap.min(left).max(1));
            left /= f;
            out.push(f);
        }
        out.shuffle(rng);
        out
    };
    let m = factors(rng);
    let n = factors(rng);
    let mut ranks = vec![1; d + 1];
    for r in ranks.iter_mut().take(d).skip(1) {
        *r = rng.random_range(1..=max_rank);
    }
    TtShape::new(m, n, ranks).unwrap()
}

/// Central-difference gradient of `f` with respect to every entry of `params`.
pub fn numeric_grad(params: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let up = f(params);
        params[i] = orig - step;
        let down = f(params);
        params[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Number of parameter tensors and their names, in visiting order.
pub fn param_names(model: &SequenceModel) -> Vec<String> {
    let mut names = Vec::new();
    model.visit_params(&mut |name, _| names.push(name));
    names
}

/// Copies `flat` back into the model's parameters.
pub fn set_flat_params(model: &mut SequenceModel, flat: &[f64]) {
    let mut pos = 0;
    model.visit_params_mut(&mut |_, p| {
        p.copy_from_slice(&flat[pos..pos + p.len()]);
        pos += p.len();
    });
    assert_eq!(pos, flat.len());
}

/// Per-tensor slices of a flat parameter vector.
pub fn split_like(model: &SequenceModel, flat: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut pos = 0;
    model.visit_params(&mut |_, p| {
        out.push(flat[pos..pos + p.len()].to_vec());
        pos += p.len();
    });
    out
}

/// Average precision by explicit rank counting: item `i` is ranked after
/// every item with a higher score and every equal-scored item of smaller
/// index. Precisions are summed in rank order.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let rank = |i: usize| {
        1 + (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut positive_ranks: Vec<usize> =
        (0..scores.len()).filter(|&i| labels[i]).map(rank).collect();
    if positive_ranks.is_empty() {
        return None;
    }
    positive_ranks.sort_unstable();
    let mut sum = 0.0;
    for (k, &r) in positive_ranks.iter().enumerate() {
        let hits_so_far = (0..scores.len())
            .filter(|&j| labels[j] && rank(j) <= r)
            .count();
        assert_eq!(hits_so_far, k + 1);
        sum += hits_so_far as f64 / r as f64;
    }
    Some(sum / positive_ranks.len() as f64)
}

/// Mean of [`brute_force_ap`] over columns with a positive.
pub fn brute_force_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
    let classes = scores[0].len();
    let mut sum = 0.0;
    let mut count = 0;
    for j in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let lab: Vec<bool> = labels.iter().map(|r| r[j]).collect();
        if let Some(ap) = brute_force_ap(&col, &lab) {
            sum += ap;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Random score/label matrix with ties: scores are multiples of 0.1.
pub fn random_scores_labels(
    rng: &mut ChaCha8Rng,
    samples: usize,
    classes: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let scores = (0..samples)
        .map(|_| {
            (0..classes)
                .map(|_| rng.random_range(0..6) as f64 / 10.0)
                .collect()
        })
        .collect();
    let labels = (0..samples)
        .map(|_| (0..classes).map(|_| rng.random_bool(0.35)).collect())
        .collect();
    (scores, labels)
}
