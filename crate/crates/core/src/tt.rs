//! Tensor-Train layers.
//!
//! A TT layer stores the weight matrix `W` of shape `(M, N)` as a chain of
//! cores. Core `k` has shape `(m_k, n_k, r_{k-1}, r_k)` and the entry of `W`
//! at row multi-index `(i_1..i_d)` and column multi-index `(j_1..j_d)` is the
//! matrix product `G_1(i_1, j_1) G_2(i_2, j_2) ... G_d(i_d, j_d)`, a `1 x 1`
//! result because `r_0 = r_d = 1`.
//!
//! The forward pass contracts one core at a time and never materializes `W`.

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{flat_to_multi, split_index, DenseTensor, Shape};

/// Factorization plan of a TT layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TtShape {
    /// Input factors `m_k`; their product is the input size `M`.
    pub m: Vec<usize>,
    /// Output factors `n_k`; their product is the output size `N`.
    pub n: Vec<usize>,
    /// TT-ranks `r_0..r_d` with `r_0 = r_d = 1`.
    pub ranks: Vec<usize>,
}

impl TtShape {
    pub fn new(m: impl Into<Vec<usize>>, n: impl Into<Vec<usize>>, ranks: impl Into<Vec<usize>>) -> Result<Self> {
        let s = Self {
            m: m.into(),
            n: n.into(),
            ranks: ranks.into(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks every structural invariant of the plan.
    pub fn validate(&self) -> Result<()> {
        let d = self.m.len();
        if d == 0 {
            return Err(Error::Shape("a TT shape needs at least one core".into()));
        }
        if self.n.len() != d {
            return Err(Error::Shape(format!(
                "{} input factors but {} output factors",
                d,
                self.n.len()
            )));
        }
        if self.ranks.len() != d + 1 {
            return Err(Error::Shape(format!(
                "{d} cores need {} ranks, got {}",
                d + 1,
                self.ranks.len()
            )));
        }
        if self.m.iter().chain(&self.n).chain(&self.ranks).any(|&v| v == 0) {
            return Err(Error::Shape(format!("zero extent in {self:?}")));
        }
        if self.ranks[0] != 1 || self.ranks[d] != 1 {
            return Err(Error::Shape(format!(
                "boundary ranks must be 1, got r_0 = {} and r_d = {}",
                self.ranks[0], self.ranks[d]
            )));
        }
        let overflow = || Error::Shape(format!("sizes of {self:?} overflow"));
        let mm = checked_product(&self.m).ok_or_else(overflow)?;
        let nn = checked_product(&self.n).ok_or_else(overflow)?;
        mm.checked_mul(nn).ok_or_else(overflow)?;
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.m.len()
    }

    pub fn input_size(&self) -> usize {
        self.m.iter().product()
    }

    pub fn output_size(&self) -> usize {
        self.n.iter().product()
    }

    pub fn core_dims(&self, k: usize) -> [usize; 4] {
        [self.m[k], self.n[k], self.ranks[k], self.ranks[k + 1]]
    }

    /// The plan with `n_1` scaled by `gates`, so that a single layer produces
    /// all gate pre-activations side by side.
    pub fn fuse_gates(&self, gates: usize) -> TtShape {
        let mut out = self.clone();
        out.n[0] *= gates;
        out
    }
}

fn checked_product(v: &[usize]) -> Option<usize> {
    v.iter().try_fold(1usize, |acc, &x| acc.checked_mul(x))
}

/// Number of stored scalars for a layer with `gates` fused gate outputs:
/// `sum_k m_k n_k r_{k-1} r_k + (gates - 1) m_1 n_1 r_0 r_1`.
pub fn tt_param_count(s: &TtShape, gates: usize) -> u128 {
    let core = |k: usize| -> u128 {
        [s.m[k], s.n[k], s.ranks[k], s.ranks[k + 1]]
            .iter()
            .map(|&v| v as u128)
            .product()
    };
    let base: u128 = (0..s.d()).map(core).sum();
    base + (gates as u128 - 1) * core(0)
}

/// Parameter count of `gates` separate, unfused TT layers.
pub fn vanilla_param_count(s: &TtShape, gates: usize) -> u128 {
    gates as u128 * tt_param_count(s, 1)
}

/// Parameter count of the dense `(M, gates * N)` input map the TT layer replaces.
pub fn dense_param_count(input_size: usize, output_size: usize, gates: usize) -> u128 {
    input_size as u128 * output_size as u128 * gates as u128
}

/// Ratio of TT parameters to the dense `(M, gates * N)` matrix, exact.
pub fn compression_rate(s: &TtShape, gates: usize) -> Ratio<u128> {
    Ratio::new(
        tt_param_count(s, gates),
        dense_param_count(s.input_size(), s.output_size(), gates),
    )
}

/// Renders a positive rational in scientific notation with `sig` significant
/// digits, rounding half up. The digits are computed exactly.
pub fn format_scientific(r: &Ratio<u128>, sig: usize) -> String {
    let (p, q) = (*r.numer(), *r.denom());
    if p == 0 {
        return format!("{:.*}e0", sig.saturating_sub(1), 0.0);
    }
    let sig = sig.max(1) as i32;
    // Find e with 10^e <= p/q < 10^(e+1).
    let mut e: i32 = 0;
    while ge_pow10(p, q, e + 1) {
        e += 1;
    }
    while !ge_pow10(p, q, e) {
        e -= 1;
    }
    // Scale to `sig` integer digits: p/q * 10^(sig-1-e).
    let shift = sig - 1 - e;
    let (num, den) = if shift >= 0 {
        (p * 10u128.pow(shift as u32), q)
    } else {
        (p, q * 10u128.pow((-shift) as u32))
    };
    let mut digits = num / den;
    if 2 * (num % den) >= den {
        digits += 1;
    }
    if digits == 10u128.pow(sig as u32) {
        digits /= 10;
        e += 1;
    }
    let s = digits.to_string();
    let (head, tail) = s.split_at(1);
    if tail.is_empty() {
        format!("{head}e{e}")
    } else {
        format!("{head}.{tail}e{e}")
    }
}

fn ge_pow10(p: u128, q: u128, e: i32) -> bool {
    if e >= 0 {
        p >= q * 10u128.pow(e as u32)
    } else {
        p * 10u128.pow((-e) as u32) >= q
    }
}

/// The learnable cores of a TT layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TtCores {
    shape: TtShape,
    cores: Vec<DenseTensor>,
}

impl TtCores {
    pub fn zeros(shape: &TtShape) -> Result<Self> {
        shape.validate()?;
        let cores = (0..shape.d())
            .map(|k| Shape::new(shape.core_dims(k).to_vec()).map(DenseTensor::zeros))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape: shape.clone(),
            cores,
        })
    }

    pub fn from_cores(shape: &TtShape, cores: Vec<DenseTensor>) -> Result<Self> {
        shape.validate()?;
        if cores.len() != shape.d() {
            return Err(Error::Shape(format!(
                "expected {} cores, got {}",
                shape.d(),
                cores.len()
            )));
        }
        for (k, core) in cores.iter().enumerate() {
            if core.dims() != shape.core_dims(k) {
                return Err(Error::Shape(format!(
                    "core {k} has shape {:?}, expected {:?}",
                    core.dims(),
                    shape.core_dims(k)
                )));
            }
        }
        Ok(Self {
            shape: shape.clone(),
            cores,
        })
    }

    /// Gaussian initialization. Core `k` has standard deviation
    /// `(2 / (M + N))^(1 / 2d) / sqrt(r_k)`, which gives the reconstructed
    /// matrix an entry variance of `2 / (M + N)`.
    pub fn init(shape: &TtShape, seed: u64) -> Result<Self> {
        let mut out = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.d() as f64;
        let target = 2.0 / (shape.input_size() + shape.output_size()) as f64;
        for (k, core) in out.cores.iter_mut().enumerate() {
            let std = target.powf(1.0 / (2.0 * d)) / (shape.ranks[k + 1] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite positive std");
            for v in core.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(out)
    }

    pub fn shape(&self) -> &TtShape {
        &self.shape
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(DenseTensor::len).sum()
    }

    /// The `r_{k-1} x r_k` slice `G_k(i, j)` as a flat row-major buffer.
    fn slice(&self, k: usize, i: usize, j: usize) -> &[f64] {
        let [_, n, rp, r] = self.shape.core_dims(k);
        let start = (i * n + j) * rp * r;
        &self.cores[k].data()[start..start + rp * r]
    }

    /// One entry of the weight matrix as the chain product of core slices.
    pub fn reconstruct_entry(&self, i: &[usize], j: &[usize]) -> Result<f64> {
        let d = self.shape.d();
        if i.len() != d || j.len() != d {
            return Err(Error::Index(format!(
                "expected {d} row and column indices, got {} and {}",
                i.len(),
                j.len()
            )));
        }
        for k in 0..d {
            if i[k] >= self.shape.m[k] || j[k] >= self.shape.n[k] {
                return Err(Error::Index(format!(
                    "index pair ({}, {}) out of range for core {k} with extents ({}, {})",
                    i[k], j[k], self.shape.m[k], self.shape.n[k]
                )));
            }
        }
        let mut acc = vec![1.0];
        for k in 0..d {
            let r = self.shape.ranks[k + 1];
            let g = self.slice(k, i[k], j[k]);
            let mut next = vec![0.0; r];
            for (a, &va) in acc.iter().enumerate() {
                for (b, slot) in next.iter_mut().enumerate() {
                    *slot += va * g[a * r + b];
                }
            }
            acc = next;
        }
        Ok(acc[0])
    }

    /// Entry of the double-indexed tensor addressed by combined indices
    /// `l_k = i_k * n_k + j_k`.
    pub fn reconstruct_combined_entry(&self, l: &[usize]) -> Result<f64> {
        let mut i = Vec::with_capacity(l.len());
        let mut j = Vec::with_capacity(l.len());
        for (k, &lk) in l.iter().enumerate() {
            let nk = *self.shape.n.get(k).ok_or_else(|| {
                Error::Index(format!("{} combined indices for {} cores", l.len(), self.shape.d()))
            })?;
            let (ik, jk) = split_index(lk, nk)?;
            i.push(ik);
            j.push(jk);
        }
        self.reconstruct_entry(&i, &j)
    }

    /// The full `(M, N)` weight matrix.
    ///
    /// Built by extending partial chain products one core at a time: after
    /// `k` cores, every pair of partial row/column multi-indices carries an
    /// `r_k`-vector.
    pub fn reconstruct_matrix(&self) -> Result<DenseTensor> {
        let s = &self.shape;
        let (mm, nn) = (s.input_size(), s.output_size());
        mm.checked_mul(nn)
            .ok_or_else(|| Error::Shape(format!("{mm} x {nn} matrix overflows")))?;
        // partial[(row, col, rank)] with row over m_1..m_k, col over n_1..n_k.
        let mut partial = vec![1.0];
        let (mut rows, mut cols) = (1usize, 1usize);
        for k in 0..s.d() {
            let [mk, nk, rp, r] = s.core_dims(k);
            let (new_rows, new_cols) = (rows * mk, cols * nk);
            let mut next = vec![0.0; new_rows * new_cols * r];
            for row in 0..rows {
                for col in 0..cols {
                    let left = &partial[(row * cols + col) * rp..(row * cols + col + 1) * rp];
                    for i in 0..mk {
                        for j in 0..nk {
                            let g = self.slice(k, i, j);
                            let (nr, nc) = (row * mk + i, col * nk + j);
                            let out = &mut next[(nr * new_cols + nc) * r..(nr * new_cols + nc + 1) * r];
                            for (a, &va) in left.iter().enumerate() {
                                for (b, slot) in out.iter_mut().enumerate() {
                                    *slot += va * g[a * r + b];
                                }
                            }
                        }
                    }
                }
            }
            partial = next;
            rows = new_rows;
            cols = new_cols;
        }
        DenseTensor::matrix(mm, nn, partial)
    }

    /// Row and column multi-indices of a flat matrix position.
    pub fn matrix_indices(&self, row: usize, col: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let i = flat_to_multi(row, &Shape::new(self.shape.m.clone())?)?;
        let j = flat_to_multi(col, &Shape::new(self.shape.n.clone())?)?;
        Ok((i, j))
    }
}

/// A fully connected layer `y = x W + b` whose weight matrix is kept in TT format.
#[derive(Clone, Debug, PartialEq)]
pub struct TtLayer {
    pub cores: TtCores,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of a TT layer.
#[derive(Clone, Debug)]
pub struct TtGrads {
    pub cores: Vec<DenseTensor>,
    pub bias: Vec<f64>,
    pub input: Option<DenseTensor>,
}

/// Intermediate contraction results retained for the backward pass.
///
/// `stages[k]` is the input to core `k`, laid out as
/// `(B * n_1 .. n_{k-1}, r_{k-1}, m_k, m_{k+1} .. m_d)`.
#[derive(Clone, Debug)]
pub struct TtTape {
    batch: usize,
    stages: Vec<Vec<f64>>,
}

impl TtLayer {
    pub fn new(cores: TtCores, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            let n = cores.shape().output_size();
            if b.len() != n {
                return Err(Error::Shape(format!("bias has length {}, expected {n}", b.len())));
            }
        }
        Ok(Self { cores, bias })
    }

    pub fn shape(&self) -> &TtShape {
        self.cores.shape()
    }

    pub fn input_size(&self) -> usize {
        self.shape().input_size()
    }

    pub fn output_size(&self) -> usize {
        self.shape().output_size()
    }

    fn check_input(&self, x: &DenseTensor) -> Result<usize> {
        let m = self.input_size();
        match x.dims() {
            [b, w] if *w == m => Ok(*b),
            dims => Err(Error::Shape(format!(
                "TT layer expects input of shape (B, {m}), got {dims:?}"
            ))),
        }
    }

    /// `x W + b` for a batch `x` of shape `(B, M)`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.forward_taped(x).map(|(y, _)| y)
    }

    pub fn forward_taped(&self, x: &DenseTensor) -> Result<(DenseTensor, TtTape)> {
        let batch = self.check_input(x)?;
        let s = self.shape();
        let mut stages = Vec::with_capacity(s.d());
        let mut current = x.data().to_vec();
        let mut outer = batch;
        let mut inner = s.input_size();
        for k in 0..s.d() {
            let [mk, nk, rp, r] = s.core_dims(k);
            inner /= mk;
            let next = contract_core(&current, self.cores.cores()[k].data(), outer, inner, [mk, nk, rp, r]);
            stages.push(current);
            current = next;
            outer *= nk;
        }
        if let Some(b) = &self.bias {
            for row in current.chunks_mut(b.len()) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        let y = DenseTensor::raw_matrix(batch, s.output_size(), current);
        Ok((y, TtTape { batch, stages }))
    }

    /// Gradients of `sum(grad_y * forward(x))` with respect to the cores,
    /// the bias and the input.
    pub fn backward(&self, x: &DenseTensor, grad_y: &DenseTensor) -> Result<TtGrads> {
        let (_, tape) = self.forward_taped(x)?;
        self.backward_taped(&tape, grad_y, true)
    }

    pub fn backward_taped(&self, tape: &TtTape, grad_y: &DenseTensor, want_input: bool) -> Result<TtGrads> {
        let s = self.shape();
        let n = s.output_size();
        if grad_y.dims() != [tape.batch, n] {
            return Err(Error::Shape(format!(
                "output gradient has shape {:?}, expected ({}, {n})",
                grad_y.dims(),
                tape.batch
            )));
        }
        let mut bias = vec![0.0; n];
        for row in grad_y.data().chunks(n) {
            for (acc, g) in bias.iter_mut().zip(row) {
                *acc += g;
            }
        }
        let mut core_grads: Vec<DenseTensor> = self
            .cores
            .cores()
            .iter()
            .map(|c| DenseTensor::zeros(c.shape().clone()))
            .collect();
        let mut upstream = grad_y.data().to_vec();
        let mut outer: usize = tape.batch * s.n.iter().product::<usize>();
        let mut inner = 1usize;
        for k in (0..s.d()).rev() {
            let dims = s.core_dims(k);
            outer /= dims[1];
            let need_down = k > 0 || want_input;
            let down = contract_core_backward(
                &tape.stages[k],
                self.cores.cores()[k].data(),
                &upstream,
                core_grads[k].data_mut(),
                outer,
                inner,
                dims,
                need_down,
            );
            upstream = down;
            inner *= dims[0];
        }
        let input = if want_input {
            Some(DenseTensor::raw_matrix(tape.batch, s.input_size(), upstream))
        } else {
            None
        };
        Ok(TtGrads {
            cores: core_grads,
            bias,
            input,
        })
    }
}

/// One contraction step: input `(P, r_{k-1}, m_k, Q)` times core
/// `(m_k, n_k, r_{k-1}, r_k)` gives `(P, n_k, r_k, Q)`.
fn contract_core(input: &[f64], core: &[f64], outer: usize, inner: usize, dims: [usize; 4]) -> Vec<f64> {
    let [mk, nk, rp, r] = dims;
    let q = inner;
    let mut out = vec![0.0; outer * nk * r * q];
    for p in 0..outer {
        let in_block = &input[p * rp * mk * q..(p + 1) * rp * mk * q];
        let out_block = &mut out[p * nk * r * q..(p + 1) * nk * r * q];
        for a in 0..rp {
            for i in 0..mk {
                let src = &in_block[(a * mk + i) * q..(a * mk + i + 1) * q];
                for j in 0..nk {
                    let g = &core[((i * nk + j) * rp + a) * r..((i * nk + j) * rp + a + 1) * r];
                    for (b, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let dst = &mut out_block[(j * r + b) * q..(j * r + b + 1) * q];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += gv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reverse of [`contract_core`]. Accumulates the core gradient and returns the
/// gradient with respect to the step input (empty when not requested).
#[allow(clippy::too_many_arguments)]
fn contract_core_backward(
    input: &[f64],
    core: &[f64],
    upstream: &[f64],
    grad_core: &mut [f64],
    outer: usize,
    inner: usize,
    dims: [usize; 4],
    need_down: bool,
) -> Vec<f64> {
    let [mk, nk, rp, r] = dims;
    let q = inner;
    let mut down = if need_down { vec![0.0; outer * rp * mk * q] } else { Vec::new() };
    for p in 0..outer {
        let in_block = &input[p * rp * mk * q..(p + 1) * rp * mk * q];
        let up_block = &upstream[p * nk * r * q..(p + 1) * nk * r * q];
        for a in 0..rp {
            for i in 0..mk {
                let src = &in_block[(a * mk + i) * q..(a * mk + i + 1) * q];
                for j in 0..nk {
                    for b in 0..r {
                        let up = &up_block[(j * r + b) * q..(j * r + b + 1) * q];
                        let gi = ((i * nk + j) * rp + a) * r + b;
                        grad_core[gi] += src.iter().zip(up).map(|(x, y)| x * y).sum::<f64>();
                        if need_down {
                            let gv = core[gi];
                            if gv != 0.0 {
                                let off = p * rp * mk * q + (a * mk + i) * q;
                                for (d, u) in down[off..off + q].iter_mut().zip(up) {
                                    *d += gv * u;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    down
}
