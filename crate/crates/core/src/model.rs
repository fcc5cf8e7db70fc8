//! A recurrent cell followed by a classifier on its last hidden state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rnn::{add_into, RnnCell};
use crate::tensor::DenseTensor;
use crate::train::classifier::{data_loss, logit_grad, Classifier};

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub cell: RnnCell,
    pub head: Classifier,
}

impl SequenceModel {
    pub fn new(cell: RnnCell, head: Classifier) -> Result<Self> {
        if cell.hidden_size() != head.hidden_size() {
            return Err(Error::Shape(format!(
                "cell hidden size {} does not match classifier input {}",
                cell.hidden_size(),
                head.hidden_size()
            )));
        }
        Ok(Self { cell, head })
    }

    pub fn input_size(&self) -> usize {
        self.cell.input_size()
    }

    pub fn param_count(&self) -> usize {
        self.cell.param_count() + self.head.weight.len() + self.head.bias.len()
    }

    /// Visits every parameter buffer in checkpoint order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &[f64])) {
        self.cell.visit_params(f);
        f("head.weight".into(), self.head.weight.data());
        f("head.bias".into(), &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        self.cell.visit_params_mut(f);
        f("head.weight".into(), self.head.weight.data_mut());
        f("head.bias".into(), &mut self.head.bias);
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_params_mut(&mut |_, p| p.fill(0.0));
        out
    }

    /// Flat copy of every parameter, in visiting order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| out.extend_from_slice(p));
        out
    }

    /// Class probabilities for one `(T, M)` sequence, without dropout.
    pub fn predict(&self, frames: &DenseTensor) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = self.cell.run_sequence(frames, 0.0, &mut rng)?;
        self.head.classify(&h)
    }

    /// Mean data loss over the batch plus the ridge term, and its gradient.
    ///
    /// `seeds[b]` seeds the dropout masks of sequence `b`. With `threads > 1`
    /// the batch is split into contiguous chunks processed concurrently and
    /// reduced in chunk order.
    pub fn loss_and_grad(
        &self,
        seqs: &[&DenseTensor],
        targets: &[&[f64]],
        seeds: &[u64],
        dropout: f64,
        ridge: f64,
        threads: usize,
    ) -> Result<(f64, SequenceModel)> {
        let batch = seqs.len();
        if batch == 0 || targets.len() != batch || seeds.len() != batch {
            return Err(Error::Argument(format!(
                "batch of {batch} sequences with {} targets and {} seeds",
                targets.len(),
                seeds.len()
            )));
        }
        let scale = 1.0 / batch as f64;
        let threads = threads.clamp(1, batch);
        let chunk = batch.div_ceil(threads);
        let parts: Vec<Result<(f64, SequenceModel)>> = if threads == 1 {
            vec![self.chunk_grad(seqs, targets, seeds, dropout, scale)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..batch)
                    .step_by(chunk)
                    .map(|start| {
                        let end = (start + chunk).min(batch);
                        scope.spawn(move || {
                            self.chunk_grad(&seqs[start..end], &targets[start..end], &seeds[start..end], dropout, scale)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut total = 0.0;
        let mut grads: Option<SequenceModel> = None;
        for part in parts {
            let (loss_sum, g) = part?;
            total += loss_sum;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.accumulate(&g),
            }
        }
        let mut grads = grads.expect("at least one chunk");
        for (g, w) in grads.head.weight.data_mut().iter_mut().zip(self.head.weight.data()) {
            *g += 2.0 * ridge * w;
        }
        Ok((total * scale + ridge * self.head.squared_norm(), grads))
    }

    /// Loss only; same value as [`Self::loss_and_grad`].
    pub fn loss(&self, seqs: &[&DenseTensor], targets: &[&[f64]], seeds: &[u64], dropout: f64, ridge: f64) -> Result<f64> {
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let (h, _) = self.cell.forward_batch(seqs, dropout, &mut rngs)?;
        let mut total = 0.0;
        for (b, target) in targets.iter().enumerate() {
            let probs = self.head.probabilities(&self.head.logits(h.row(b)));
            total += data_loss(&probs, target, self.head.mode);
        }
        Ok(total / seqs.len() as f64 + ridge * self.head.squared_norm())
    }

    /// Sum of per-sequence data losses over a chunk, with gradients of the
    /// loss scaled by `scale`.
    fn chunk_grad(
        &self,
        seqs: &[&DenseTensor],
        targets: &[&[f64]],
        seeds: &[u64],
        dropout: f64,
        scale: f64,
    ) -> Result<(f64, SequenceModel)> {
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let (h, tape) = self.cell.forward_batch(seqs, dropout, &mut rngs)?;
        let (n, j) = (self.head.hidden_size(), self.head.classes());
        let mut grads = self.zeros_like();
        let mut dh = vec![0.0; seqs.len() * n];
        let mut loss_sum = 0.0;
        for (b, target) in targets.iter().enumerate() {
            if target.len() != j {
                return Err(Error::Shape(format!("target of length {} for {j} classes", target.len())));
            }
            let hb = h.row(b);
            let probs = self.head.probabilities(&self.head.logits(hb));
            loss_sum += data_loss(&probs, target, self.head.mode);
            let dz: Vec<f64> = logit_grad(&probs, target, self.head.mode).iter().map(|g| g * scale).collect();
            add_into(&mut grads.head.bias, &dz);
            let gw = grads.head.weight.data_mut();
            let w = self.head.weight.data();
            for i in 0..n {
                for c in 0..j {
                    gw[i * j + c] += hb[i] * dz[c];
                    dh[b * n + i] += w[i * j + c] * dz[c];
                }
            }
        }
        let dh = DenseTensor::raw_matrix(seqs.len(), n, dh);
        grads.cell = self.cell.backward_batch(&tape, &dh)?;
        Ok((loss_sum, grads))
    }

    fn accumulate(&mut self, other: &SequenceModel) {
        let mut flat = Vec::new();
        other.visit_params(&mut |_, p| flat.push(p.to_vec()));
        let mut it = flat.into_iter();
        self.visit_params_mut(&mut |_, p| add_into(p, &it.next().expect("same structure")));
    }
}
