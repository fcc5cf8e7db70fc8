use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rnn::{glorot, sigmoid};
use crate::tensor::DenseTensor;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// One label per sequence; probabilities sum to one.
    Softmax,
    /// Independent per-class probabilities for multi-label data.
    Logistic,
}

impl HeadMode {
    pub fn tag(self) -> u8 {
        match self {
            HeadMode::Softmax => 0,
            HeadMode::Logistic => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(HeadMode::Softmax),
            1 => Some(HeadMode::Logistic),
            _ => None,
        }
    }
}

/// Single-layer classifier on the last hidden state: `logits = h W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    /// `(N, J)`.
    pub weight: DenseTensor,
    pub bias: Vec<f64>,
    pub mode: HeadMode,
}

impl Classifier {
    pub fn new(weight: DenseTensor, bias: Vec<f64>, mode: HeadMode) -> Result<Self> {
        let [_, classes] = weight.dims() else {
            return Err(Error::Shape(format!("classifier weight must be 2-D, got {:?}", weight.dims())));
        };
        if bias.len() != *classes {
            return Err(Error::Shape(format!(
                "classifier bias has length {}, expected {classes}",
                bias.len()
            )));
        }
        let min = if mode == HeadMode::Softmax { 2 } else { 1 };
        if *classes < min {
            return Err(Error::Argument(format!("{mode:?} head needs at least {min} classes")));
        }
        Ok(Self { weight, bias, mode })
    }

    /// Glorot-normal weights, zero bias.
    pub fn init(hidden: usize, classes: usize, mode: HeadMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(glorot(hidden, classes, &mut rng)?, vec![0.0; classes], mode)
    }

    pub fn hidden_size(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let j = self.classes();
        let mut out = self.bias.clone();
        for (i, &hv) in h.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weight.data()[i * j..(i + 1) * j]) {
                *o += hv * w;
            }
        }
        out
    }

    /// Class probabilities for a final hidden state.
    pub fn classify(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.hidden_size() {
            return Err(Error::Shape(format!(
                "hidden state has length {}, classifier expects {}",
                h.len(),
                self.hidden_size()
            )));
        }
        if let Some(v) = h.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite hidden value {v}")));
        }
        Ok(self.probabilities(&self.logits(h)))
    }

    pub(crate) fn probabilities(&self, logits: &[f64]) -> Vec<f64> {
        match self.mode {
            HeadMode::Softmax => softmax(logits),
            HeadMode::Logistic => logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.weight.data().iter().map(|w| w * w).sum()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one prediction without the ridge term: categorical for
/// softmax, summed per-class binary for logistic.
pub fn data_loss(probs: &[f64], target: &[f64], mode: HeadMode) -> f64 {
    let ln = |p: f64| p.max(PROB_FLOOR).ln();
    match mode {
        HeadMode::Softmax => -probs.iter().zip(target).map(|(&p, &y)| if y == 0.0 { 0.0 } else { y * ln(p) }).sum::<f64>(),
        HeadMode::Logistic => -probs
            .iter()
            .zip(target)
            .map(|(&p, &y)| y * ln(p) + (1.0 - y) * ln(1.0 - p))
            .sum::<f64>(),
    }
}

/// Cross-entropy plus `lambda * ||W||_F^2` on the classifier weights.
pub fn loss(probs: &[f64], target: &[f64], mode: HeadMode, clf: &Classifier, lambda: f64) -> f64 {
    data_loss(probs, target, mode) + lambda * clf.squared_norm()
}

/// Gradient of [`data_loss`] with respect to the logits.
pub(crate) fn logit_grad(probs: &[f64], target: &[f64], mode: HeadMode) -> Vec<f64> {
    match mode {
        HeadMode::Softmax => {
            let mass: f64 = target.iter().sum();
            probs.iter().zip(target).map(|(p, y)| p * mass - y).collect()
        }
        HeadMode::Logistic => probs.iter().zip(target).map(|(p, y)| p - y).collect(),
    }
}
