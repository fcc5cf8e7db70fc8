//! Recurrent cells (SRNN, GRU, LSTM) with a dense or TT-factorized
//! input-to-hidden map, and backpropagation through time over padded batches.
//!
//! All gate pre-activations come out of a single input map of width
//! `gates * N`. The gate blocks are contiguous and ordered
//!
//! * SRNN: `h`
//! * GRU: `r, z, d`
//! * LSTM: `k, f, o, g`
//!
//! For a TT input map this is the fused layer whose first output factor is
//! scaled by the number of gates. Gate biases live outside the input map.
//! The GRU candidate `d` has no bias.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::tt::{TtCores, TtLayer, TtShape, TtTape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Srnn,
    Gru,
    Lstm,
}

impl CellKind {
    /// Number of gate blocks produced by the input map.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Srnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    /// Number of gate bias vectors.
    pub fn biases(self) -> usize {
        match self {
            CellKind::Srnn => 1,
            CellKind::Gru => 2,
            CellKind::Lstm => 4,
        }
    }

    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Srnn => &["h"],
            CellKind::Gru => &["r", "z", "d"],
            CellKind::Lstm => &["k", "f", "o", "g"],
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            CellKind::Srnn => 0,
            CellKind::Gru => 1,
            CellKind::Lstm => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CellKind::Srnn),
            1 => Some(CellKind::Gru),
            2 => Some(CellKind::Lstm),
            _ => None,
        }
    }
}

/// Splits a fused gate output into its `gates` contiguous blocks of length `hidden`.
pub fn gate_slices(fused: &[f64], gates: usize, hidden: usize) -> Result<Vec<&[f64]>> {
    if gates == 0 || hidden == 0 || fused.len() != gates * hidden {
        return Err(Error::Shape(format!(
            "fused output of length {} cannot hold {gates} gates of width {hidden}",
            fused.len()
        )));
    }
    Ok(fused.chunks(hidden).collect())
}

/// Map from the input frame to the concatenated gate pre-activations.
#[derive(Clone, Debug, PartialEq)]
pub enum InputMap {
    /// Weight matrix of shape `(M, gates * N)`.
    Dense(DenseTensor),
    /// Bias-free TT layer with `n_1` already scaled by the number of gates.
    Tt(TtLayer),
}

impl InputMap {
    pub fn input_size(&self) -> usize {
        match self {
            InputMap::Dense(w) => w.dims()[0],
            InputMap::Tt(layer) => layer.input_size(),
        }
    }

    pub fn output_size(&self) -> usize {
        match self {
            InputMap::Dense(w) => w.dims()[1],
            InputMap::Tt(layer) => layer.output_size(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            InputMap::Dense(w) => w.len(),
            InputMap::Tt(layer) => layer.cores.param_count(),
        }
    }

    fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, Option<TtTape>)> {
        match self {
            InputMap::Dense(w) => {
                let (b, m) = (x.dims()[0], x.dims()[1]);
                let n = w.dims()[1];
                if m != w.dims()[0] {
                    return Err(Error::Shape(format!(
                        "input width {m} does not match dense input map with {} rows",
                        w.dims()[0]
                    )));
                }
                let mut out = vec![0.0; b * n];
                for r in 0..b {
                    let dst = &mut out[r * n..(r + 1) * n];
                    for (i, &xv) in x.row(r).iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, wv) in dst.iter_mut().zip(&w.data()[i * n..(i + 1) * n]) {
                            *d += xv * wv;
                        }
                    }
                }
                Ok((DenseTensor::raw_matrix(b, n, out), None))
            }
            InputMap::Tt(layer) => {
                let (y, tape) = layer.forward_taped(x)?;
                Ok((y, Some(tape)))
            }
        }
    }

    /// The dense `(M, gates * N)` matrix this map applies.
    pub fn to_dense(&self) -> Result<DenseTensor> {
        match self {
            InputMap::Dense(w) => Ok(w.clone()),
            InputMap::Tt(layer) => layer.cores.reconstruct_matrix(),
        }
    }
}

/// Hidden state of a cell; `c` is the LSTM cell memory.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Option<Vec<f64>>,
}

impl HiddenState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: (kind == CellKind::Lstm).then(|| vec![0.0; hidden]),
        }
    }
}

/// A recurrent cell. `recurrent[g]` is the `N x N` matrix `U` of gate `g`,
/// applied as `U h`.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCell {
    kind: CellKind,
    hidden: usize,
    pub input_map: InputMap,
    pub recurrent: Vec<DenseTensor>,
    pub biases: Vec<Vec<f64>>,
}

impl RnnCell {
    pub fn new(
        kind: CellKind,
        hidden: usize,
        input_map: InputMap,
        recurrent: Vec<DenseTensor>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let gates = kind.gates();
        if hidden == 0 {
            return Err(Error::Shape("hidden size must be positive".into()));
        }
        if input_map.output_size() != gates * hidden {
            return Err(Error::Shape(format!(
                "{kind:?} with hidden size {hidden} needs an input map of width {}, got {}",
                gates * hidden,
                input_map.output_size()
            )));
        }
        if recurrent.len() != gates || recurrent.iter().any(|u| u.dims() != [hidden, hidden]) {
            return Err(Error::Shape(format!(
                "{kind:?} needs {gates} recurrent matrices of shape ({hidden}, {hidden})"
            )));
        }
        if biases.len() != kind.biases() || biases.iter().any(|b| b.len() != hidden) {
            return Err(Error::Shape(format!(
                "{kind:?} needs {} bias vectors of length {hidden}",
                kind.biases()
            )));
        }
        Ok(Self {
            kind,
            hidden,
            input_map,
            recurrent,
            biases,
        })
    }

    /// Cell with a dense input map, Glorot-normal weights and zero biases.
    pub fn dense(kind: CellKind, input_size: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = kind.gates() * hidden;
        let w = glorot(input_size, width, &mut rng)?;
        let recurrent = (0..kind.gates())
            .map(|_| glorot(hidden, hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            kind,
            hidden,
            InputMap::Dense(w),
            recurrent,
            vec![vec![0.0; hidden]; kind.biases()],
        )
    }

    /// Cell whose input map is a fused TT layer. `shape` maps the input to
    /// the hidden size; its first output factor is scaled by the gate count.
    pub fn tt(kind: CellKind, shape: &TtShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let hidden = shape.output_size();
        let fused = shape.fuse_gates(kind.gates());
        let cores = TtCores::init(&fused, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let recurrent = (0..kind.gates())
            .map(|_| glorot(hidden, hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            kind,
            hidden,
            InputMap::Tt(TtLayer::new(cores, None)?),
            recurrent,
            vec![vec![0.0; hidden]; kind.biases()],
        )
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.input_map.input_size()
    }

    pub fn gates(&self) -> usize {
        self.kind.gates()
    }

    pub fn param_count(&self) -> usize {
        self.input_map.param_count()
            + self.recurrent.iter().map(DenseTensor::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// The same cell with the TT input map replaced by its dense reconstruction.
    pub fn densified(&self) -> Result<Self> {
        let mut out = self.clone();
        out.input_map = InputMap::Dense(self.input_map.to_dense()?);
        Ok(out)
    }

    /// All-zero cell with the same structure, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_params_mut(&mut |_, p| p.fill(0.0));
        out
    }

    /// Visits every parameter buffer in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &[f64])) {
        match &self.input_map {
            InputMap::Dense(w) => f("cell.input.dense".into(), w.data()),
            InputMap::Tt(layer) => {
                for (k, core) in layer.cores.cores().iter().enumerate() {
                    f(format!("cell.input.core{k}"), core.data());
                }
            }
        }
        let names = self.kind.gate_names();
        for (g, u) in self.recurrent.iter().enumerate() {
            f(format!("cell.recurrent.{}", names[g]), u.data());
        }
        for (g, b) in self.biases.iter().enumerate() {
            f(format!("cell.bias.{}", names[g]), b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        match &mut self.input_map {
            InputMap::Dense(w) => f("cell.input.dense".into(), w.data_mut()),
            InputMap::Tt(layer) => {
                for (k, core) in layer.cores.cores_mut().iter_mut().enumerate() {
                    f(format!("cell.input.core{k}"), core.data_mut());
                }
            }
        }
        let names = self.kind.gate_names();
        for (g, u) in self.recurrent.iter_mut().enumerate() {
            f(format!("cell.recurrent.{}", names[g]), u.data_mut());
        }
        for (g, b) in self.biases.iter_mut().enumerate() {
            f(format!("cell.bias.{}", names[g]), b);
        }
    }

    fn check_state(&self, x: &[f64], state: &HiddenState) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::Shape(format!(
                "frame has length {}, cell expects {}",
                x.len(),
                self.input_size()
            )));
        }
        if state.h.len() != self.hidden {
            return Err(Error::Shape(format!(
                "hidden state has length {}, cell expects {}",
                state.h.len(),
                self.hidden
            )));
        }
        if self.kind == CellKind::Lstm && state.c.as_ref().map(Vec::len) != Some(self.hidden) {
            return Err(Error::Shape(format!("LSTM needs a cell memory of length {}", self.hidden)));
        }
        Ok(())
    }

    fn check_kind(&self, expected: CellKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::Argument(format!("{expected:?} step called on a {:?} cell", self.kind)));
        }
        Ok(())
    }

    /// One step without dropout.
    pub fn step(&self, x: &[f64], state: &HiddenState) -> Result<HiddenState> {
        self.check_state(x, state)?;
        self.step_masked(x, state, None, None)
    }

    /// `h = tanh(W x + U h_prev + b)`.
    pub fn srnn_step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        self.check_kind(CellKind::Srnn)?;
        Ok(self.step(x, &HiddenState { h: h_prev.to_vec(), c: None })?.h)
    }

    pub fn gru_step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        self.check_kind(CellKind::Gru)?;
        Ok(self.step(x, &HiddenState { h: h_prev.to_vec(), c: None })?.h)
    }

    pub fn lstm_step(&self, x: &[f64], state: &HiddenState) -> Result<HiddenState> {
        self.check_kind(CellKind::Lstm)?;
        self.step(x, state)
    }

    fn step_masked(
        &self,
        x: &[f64],
        state: &HiddenState,
        xmask: Option<&[f64]>,
        hmask: Option<&[f64]>,
    ) -> Result<HiddenState> {
        let n = self.hidden;
        let xd: Vec<f64> = match xmask {
            Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        };
        let hd: Vec<f64> = match hmask {
            Some(m) => state.h.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => state.h.clone(),
        };
        let (a, _) = self.input_map.forward(&DenseTensor::raw_matrix(1, xd.len(), xd))?;
        let mut gates = vec![0.0; self.gates() * n];
        let mut h = vec![0.0; n];
        let mut c = vec![0.0; if self.kind == CellKind::Lstm { n } else { 0 }];
        let c_prev = state.c.as_deref().unwrap_or(&[]);
        self.row_forward(a.data(), &hd, &state.h, c_prev, &mut gates, &mut h, &mut c);
        Ok(HiddenState {
            h,
            c: (self.kind == CellKind::Lstm).then_some(c),
        })
    }

    /// Runs the cell over a `(T, M)` sequence from a zero state and returns
    /// the final hidden vector. With `dropout > 0` fresh masks are drawn from
    /// `rng` at every step, first for the input then for the previous state.
    pub fn run_sequence(&self, frames: &DenseTensor, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let t = check_sequence(frames, self.input_size())?;
        let mut state = HiddenState::zeros(self.kind, self.hidden);
        for step in 0..t {
            let x = frames.row(step);
            let xmask = draw_mask(rng, x.len(), dropout);
            let hmask = draw_mask(rng, self.hidden, dropout);
            state = self.step_masked(x, &state, xmask.as_deref(), hmask.as_deref())?;
        }
        Ok(state.h)
    }

    #[allow(clippy::too_many_arguments)]
    fn row_forward(
        &self,
        a: &[f64],
        hd: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        gates: &mut [f64],
        h: &mut [f64],
        c: &mut [f64],
    ) {
        let n = self.hidden;
        let u = |g: usize| self.recurrent[g].data();
        match self.kind {
            CellKind::Srnn => {
                gates.copy_from_slice(a);
                matvec_add(u(0), n, hd, gates);
                for (v, b) in gates.iter_mut().zip(&self.biases[0]) {
                    *v = (*v + b).tanh();
                }
                h.copy_from_slice(gates);
            }
            CellKind::Gru => {
                gates.copy_from_slice(a);
                let (rz, d) = gates.split_at_mut(2 * n);
                let (r, z) = rz.split_at_mut(n);
                matvec_add(u(0), n, hd, r);
                matvec_add(u(1), n, hd, z);
                for (v, b) in r.iter_mut().zip(&self.biases[0]) {
                    *v = sigmoid(*v + b);
                }
                for (v, b) in z.iter_mut().zip(&self.biases[1]) {
                    *v = sigmoid(*v + b);
                }
                let rh: Vec<f64> = r.iter().zip(hd).map(|(a, b)| a * b).collect();
                matvec_add(u(2), n, &rh, d);
                for v in d.iter_mut() {
                    *v = v.tanh();
                }
                for i in 0..n {
                    h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * d[i];
                }
            }
            CellKind::Lstm => {
                gates.copy_from_slice(a);
                for (g, block) in gates.chunks_mut(n).enumerate() {
                    matvec_add(u(g), n, hd, block);
                    for (v, b) in block.iter_mut().zip(&self.biases[g]) {
                        *v = if g == 3 { (*v + b).tanh() } else { sigmoid(*v + b) };
                    }
                }
                let (k, rest) = gates.split_at(n);
                let (f, rest) = rest.split_at(n);
                let (o, g) = rest.split_at(n);
                for i in 0..n {
                    c[i] = f[i] * c_prev[i] + k[i] * g[i];
                    h[i] = o[i] * c[i].tanh();
                }
            }
        }
    }

    /// Reverse of [`Self::row_forward`]. Accumulates recurrent and bias
    /// gradients into `grads`, writes the gate pre-activation gradient to
    /// `da`, and returns the gradients for `h_prev` and `c_prev` in place of
    /// `dh` and `dc`.
    #[allow(clippy::too_many_arguments)]
    fn row_backward(
        &self,
        grads: &mut RnnCell,
        gates: &[f64],
        hd: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        c: &[f64],
        hmask: Option<&[f64]>,
        dh: &mut [f64],
        dc: &mut [f64],
        da: &mut [f64],
    ) {
        let n = self.hidden;
        let mut dhd = vec![0.0; n];
        match self.kind {
            CellKind::Srnn => {
                for i in 0..n {
                    da[i] = dh[i] * (1.0 - gates[i] * gates[i]);
                }
                outer_add(grads.recurrent[0].data_mut(), da, hd);
                add_into(&mut grads.biases[0], da);
                matvec_t_add(self.recurrent[0].data(), n, da, &mut dhd);
                dh.fill(0.0);
            }
            CellKind::Gru => {
                let (r, rest) = gates.split_at(n);
                let (z, d) = rest.split_at(n);
                let (da_r, rest) = da.split_at_mut(n);
                let (da_z, da_d) = rest.split_at_mut(n);
                let rh: Vec<f64> = r.iter().zip(hd).map(|(a, b)| a * b).collect();
                for i in 0..n {
                    da_d[i] = dh[i] * z[i] * (1.0 - d[i] * d[i]);
                    da_z[i] = dh[i] * (d[i] - h_prev[i]) * z[i] * (1.0 - z[i]);
                }
                outer_add(grads.recurrent[2].data_mut(), da_d, &rh);
                let mut drh = vec![0.0; n];
                matvec_t_add(self.recurrent[2].data(), n, da_d, &mut drh);
                for i in 0..n {
                    da_r[i] = drh[i] * hd[i] * r[i] * (1.0 - r[i]);
                    dhd[i] += drh[i] * r[i];
                }
                outer_add(grads.recurrent[0].data_mut(), da_r, hd);
                outer_add(grads.recurrent[1].data_mut(), da_z, hd);
                add_into(&mut grads.biases[0], da_r);
                add_into(&mut grads.biases[1], da_z);
                matvec_t_add(self.recurrent[0].data(), n, da_r, &mut dhd);
                matvec_t_add(self.recurrent[1].data(), n, da_z, &mut dhd);
                for i in 0..n {
                    dh[i] *= 1.0 - z[i];
                }
            }
            CellKind::Lstm => {
                let (k, rest) = gates.split_at(n);
                let (f, rest) = rest.split_at(n);
                let (o, g) = rest.split_at(n);
                for i in 0..n {
                    let tc = c[i].tanh();
                    let dct = dc[i] + dh[i] * o[i] * (1.0 - tc * tc);
                    da[i] = dct * g[i] * k[i] * (1.0 - k[i]);
                    da[n + i] = dct * c_prev[i] * f[i] * (1.0 - f[i]);
                    da[2 * n + i] = dh[i] * tc * o[i] * (1.0 - o[i]);
                    da[3 * n + i] = dct * k[i] * (1.0 - g[i] * g[i]);
                    dc[i] = dct * f[i];
                }
                for (gate, block) in da.chunks(n).enumerate() {
                    outer_add(grads.recurrent[gate].data_mut(), block, hd);
                    add_into(&mut grads.biases[gate], block);
                    matvec_t_add(self.recurrent[gate].data(), n, block, &mut dhd);
                }
                dh.fill(0.0);
            }
        }
        match hmask {
            Some(m) => {
                for i in 0..n {
                    dh[i] += dhd[i] * m[i];
                }
            }
            None => add_into(dh, &dhd),
        }
    }

    /// Runs a batch of `(T_b, M)` sequences of possibly different lengths.
    ///
    /// Sequences are right-padded to the longest one; a sequence whose steps
    /// are exhausted carries its state through unchanged. `rngs[b]` supplies
    /// the dropout masks of sequence `b`, drawn in the same order as
    /// [`Self::run_sequence`]. Returns the final hidden states `(B, N)`.
    pub fn forward_batch(
        &self,
        seqs: &[&DenseTensor],
        dropout: f64,
        rngs: &mut [ChaCha8Rng],
    ) -> Result<(DenseTensor, BatchTape)> {
        let batch = seqs.len();
        if batch == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        if rngs.len() != batch {
            return Err(Error::Argument(format!("{} RNGs for a batch of {batch}", rngs.len())));
        }
        let m = self.input_size();
        let lengths = seqs
            .iter()
            .map(|s| check_sequence(s, m))
            .collect::<Result<Vec<_>>>()?;
        let t_max = *lengths.iter().max().expect("non-empty batch");
        let (n, width) = (self.hidden, self.gates() * self.hidden);
        let lstm = self.kind == CellKind::Lstm;

        let mut h = vec![0.0; batch * n];
        let mut c = vec![0.0; if lstm { batch * n } else { 0 }];
        let mut steps = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let active: Vec<usize> = (0..batch).filter(|&b| t < lengths[b]).collect();
            let rows = active.len();
            let mut x = vec![0.0; rows * m];
            let mut hd = vec![0.0; rows * n];
            let mut h_prev = vec![0.0; rows * n];
            let mut c_prev = vec![0.0; if lstm { rows * n } else { 0 }];
            let mut hmasks = Vec::new();
            for (row, &b) in active.iter().enumerate() {
                let src = seqs[b].row(t);
                let dst = &mut x[row * m..(row + 1) * m];
                match draw_mask(&mut rngs[b], m, dropout) {
                    Some(mask) => {
                        for ((d, s), k) in dst.iter_mut().zip(src).zip(&mask) {
                            *d = s * k;
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
                let hp = &h[b * n..(b + 1) * n];
                h_prev[row * n..(row + 1) * n].copy_from_slice(hp);
                let hdst = &mut hd[row * n..(row + 1) * n];
                match draw_mask(&mut rngs[b], n, dropout) {
                    Some(mask) => {
                        for ((d, s), k) in hdst.iter_mut().zip(hp).zip(&mask) {
                            *d = s * k;
                        }
                        hmasks.extend_from_slice(&mask);
                    }
                    None => hdst.copy_from_slice(hp),
                }
                if lstm {
                    c_prev[row * n..(row + 1) * n].copy_from_slice(&c[b * n..(b + 1) * n]);
                }
            }
            let x = DenseTensor::raw_matrix(rows, m, x);
            let (a, tt_tape) = self.input_map.forward(&x)?;
            let mut gates = vec![0.0; rows * width];
            let mut c_new = vec![0.0; if lstm { rows * n } else { 0 }];
            for (row, &b) in active.iter().enumerate() {
                let span = row * n..(row + 1) * n;
                let (h_out, c_out) = (&mut h[b * n..(b + 1) * n], if lstm { &mut c_new[span.clone()] } else { &mut [][..] });
                self.row_forward(
                    a.row(row),
                    &hd[span.clone()],
                    &h_prev[span.clone()],
                    if lstm { &c_prev[span.clone()] } else { &[] },
                    &mut gates[row * width..(row + 1) * width],
                    h_out,
                    c_out,
                );
                if lstm {
                    c[b * n..(b + 1) * n].copy_from_slice(&c_new[span]);
                }
            }
            steps.push(StepTape {
                active,
                x,
                tt_tape,
                hd,
                h_prev,
                hmask: (!hmasks.is_empty()).then_some(hmasks),
                gates,
                c_prev,
                c: c_new,
            });
        }
        Ok((DenseTensor::raw_matrix(batch, n, h), BatchTape { batch, steps }))
    }

    /// Gradients of `sum(dh_final * h_final)` with respect to every cell
    /// parameter, returned as a cell-shaped buffer.
    pub fn backward_batch(&self, tape: &BatchTape, dh_final: &DenseTensor) -> Result<RnnCell> {
        let (batch, n) = (tape.batch, self.hidden);
        if dh_final.dims() != [batch, n] {
            return Err(Error::Shape(format!(
                "final-state gradient has shape {:?}, expected ({batch}, {n})",
                dh_final.dims()
            )));
        }
        let width = self.gates() * n;
        let lstm = self.kind == CellKind::Lstm;
        let mut grads = self.zeros_like();
        let mut dh = dh_final.data().to_vec();
        let mut dc = vec![0.0; batch * n];
        for step in tape.steps.iter().rev() {
            let rows = step.active.len();
            let mut da = vec![0.0; rows * width];
            for (row, &b) in step.active.iter().enumerate() {
                let span = row * n..(row + 1) * n;
                self.row_backward(
                    &mut grads,
                    &step.gates[row * width..(row + 1) * width],
                    &step.hd[span.clone()],
                    &step.h_prev[span.clone()],
                    if lstm { &step.c_prev[span.clone()] } else { &[] },
                    if lstm { &step.c[span.clone()] } else { &[] },
                    step.hmask.as_ref().map(|m| &m[span.clone()]),
                    &mut dh[b * n..(b + 1) * n],
                    &mut dc[b * n..(b + 1) * n],
                    &mut da[row * width..(row + 1) * width],
                );
            }
            let da = DenseTensor::raw_matrix(rows, width, da);
            match (&self.input_map, &mut grads.input_map) {
                (InputMap::Dense(_), InputMap::Dense(gw)) => {
                    let gw = gw.data_mut();
                    for row in 0..rows {
                        for (i, &xv) in step.x.row(row).iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (g, d) in gw[i * width..(i + 1) * width].iter_mut().zip(da.row(row)) {
                                *g += xv * d;
                            }
                        }
                    }
                }
                (InputMap::Tt(layer), InputMap::Tt(gl)) => {
                    let tt_tape = step.tt_tape.as_ref().expect("TT step keeps its tape");
                    let g = layer.backward_taped(tt_tape, &da, false)?;
                    for (acc, core) in gl.cores.cores_mut().iter_mut().zip(&g.cores) {
                        add_into(acc.data_mut(), core.data());
                    }
                }
                _ => unreachable!("gradient buffer mirrors the cell"),
            }
        }
        Ok(grads)
    }
}

/// Per-step record kept for backpropagation. Row `i` of every buffer belongs
/// to sequence `active[i]`.
#[derive(Clone, Debug)]
struct StepTape {
    active: Vec<usize>,
    x: DenseTensor,
    tt_tape: Option<TtTape>,
    hd: Vec<f64>,
    h_prev: Vec<f64>,
    hmask: Option<Vec<f64>>,
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchTape {
    batch: usize,
    steps: Vec<StepTape>,
}

fn check_sequence(frames: &DenseTensor, input_size: usize) -> Result<usize> {
    match frames.dims() {
        [t, m] if *m == input_size => {
            if *t == 0 {
                Err(Error::Argument("empty sequence".into()))
            } else {
                Ok(*t)
            }
        }
        dims => Err(Error::Shape(format!(
            "sequence must have shape (T, {input_size}), got {dims:?}"
        ))),
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. No draws happen when `rate` is zero.
pub fn draw_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<DenseTensor> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += U x` for a row-major `n x n` matrix.
fn matvec_add(u: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o += u[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += U^T g`.
fn matvec_t_add(u: &[f64], n: usize, g: &[f64], out: &mut [f64]) {
    for (i, &gi) in g.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(&u[i * n..(i + 1) * n]) {
            *o += gi * a;
        }
    }
}

/// `du += g x^T`.
fn outer_add(du: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (i, &gi) in g.iter().enumerate() {
        for (d, xv) in du[i * n..(i + 1) * n].iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

pub(crate) fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}
