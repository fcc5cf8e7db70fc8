//! Checkpoint file: magic `TTRN`, a u16 format version, then the cell,
//! classifier and optimizer segments. Integers and floats are little-endian.
//!
//! Cell segment: u8 kind tag, u32 gate count, u32 hidden size, u32 input
//! size, u8 input-map tag (0 dense, 1 TT), the input-map payload, the
//! recurrent matrices and the biases in gate order.
//!
//! TT layer payload: u32 d, d x u32 input factors, d x u32 output factors,
//! (d + 1) x u32 ranks, u8 bias flag, the cores in order, then the bias when
//! the flag is set.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::rnn::{CellKind, InputMap, RnnCell};
use crate::tensor::{DenseTensor, Shape};
use crate::train::classifier::{Classifier, HeadMode};
use crate::train::optim::Adam;
use crate::train::TrainState;
use crate::tt::{TtCores, TtLayer, TtShape};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TTRN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    encode_cell(&mut w, &state.model.cell)?;
    encode_head(&mut w, &state.model.head)?;
    encode_optimizer(&mut w, &state.adam, &state.rng)?;
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.error(format!("bad magic {magic:?}, expected \"TTRN\"")));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let cell = decode_cell(&mut r)?;
    let head = decode_head(&mut r)?;
    let model = SequenceModel::new(cell, head).map_err(|e| r.error(e.to_string()))?;
    let (adam, rng) = decode_optimizer(&mut r, &model)?;
    r.finish()?;
    Ok(TrainState { model, adam, rng })
}

fn encode_cell(w: &mut ByteWriter, cell: &RnnCell) -> Result<()> {
    w.u8(cell.kind().tag());
    w.dim(cell.gates())?;
    w.dim(cell.hidden_size())?;
    w.dim(cell.input_size())?;
    match &cell.input_map {
        InputMap::Dense(m) => {
            w.u8(0);
            w.f64s(m.data());
        }
        InputMap::Tt(layer) => {
            w.u8(1);
            encode_tt_layer(w, layer)?;
        }
    }
    for u in &cell.recurrent {
        w.f64s(u.data());
    }
    for b in &cell.biases {
        w.f64s(b);
    }
    Ok(())
}

pub(crate) fn encode_tt_layer(w: &mut ByteWriter, layer: &TtLayer) -> Result<()> {
    let s = layer.shape();
    w.dim(s.d())?;
    for &v in s.m.iter().chain(&s.n).chain(&s.ranks) {
        w.dim(v)?;
    }
    w.u8(layer.bias.is_some() as u8);
    for core in layer.cores.cores() {
        w.f64s(core.data());
    }
    if let Some(b) = &layer.bias {
        w.f64s(b);
    }
    Ok(())
}

fn tensor(r: &ByteReader, dims: Vec<usize>, data: Vec<f64>) -> Result<DenseTensor> {
    Shape::new(dims)
        .and_then(|s| DenseTensor::from_vec(s, data))
        .map_err(|e| r.error(e.to_string()))
}

pub(crate) fn decode_tt_layer(r: &mut ByteReader) -> Result<TtLayer> {
    let d = r.dim()?;
    if d == 0 || d > 64 {
        return Err(r.error(format!("implausible core count {d}")));
    }
    let m = r.dims(d)?;
    let n = r.dims(d)?;
    let ranks = r.dims(d + 1)?;
    let shape = TtShape::new(m, n, ranks).map_err(|e| r.error(e.to_string()))?;
    let has_bias = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.error(format!("bad bias flag {other}"))),
    };
    let mut cores = Vec::with_capacity(d);
    for k in 0..d {
        let dims = shape.core_dims(k).to_vec();
        let data = r.f64s(dims.iter().product())?;
        cores.push(tensor(r, dims, data)?);
    }
    let cores = TtCores::from_cores(&shape, cores).map_err(|e| r.error(e.to_string()))?;
    let bias = if has_bias {
        Some(r.f64s(shape.output_size())?)
    } else {
        None
    };
    TtLayer::new(cores, bias).map_err(|e| r.error(e.to_string()))
}

fn decode_cell(r: &mut ByteReader) -> Result<RnnCell> {
    let tag = r.u8()?;
    let kind = CellKind::from_tag(tag).ok_or_else(|| r.error(format!("unknown cell kind {tag}")))?;
    let gates = r.dim()?;
    if gates != kind.gates() {
        return Err(r.error(format!("{kind:?} has {} gates, header says {gates}", kind.gates())));
    }
    let hidden = r.dim()?;
    let input = r.dim()?;
    let width = gates
        .checked_mul(hidden)
        .ok_or_else(|| r.error("hidden size overflows"))?;
    let input_map = match r.u8()? {
        0 => {
            let len = input.checked_mul(width).ok_or_else(|| r.error("input map size overflows"))?;
            let data = r.f64s(len)?;
            InputMap::Dense(tensor(r, vec![input, width], data)?)
        }
        1 => InputMap::Tt(decode_tt_layer(r)?),
        other => return Err(r.error(format!("unknown input-map tag {other}"))),
    };
    if input_map.input_size() != input {
        return Err(r.error(format!(
            "input map takes {} inputs, header says {input}",
            input_map.input_size()
        )));
    }
    let mut recurrent = Vec::with_capacity(gates);
    for _ in 0..gates {
        let data = r.f64s(hidden * hidden)?;
        recurrent.push(tensor(r, vec![hidden, hidden], data)?);
    }
    let biases = (0..kind.biases())
        .map(|_| r.f64s(hidden))
        .collect::<Result<Vec<_>>>()?;
    RnnCell::new(kind, hidden, input_map, recurrent, biases).map_err(|e| r.error(e.to_string()))
}

fn encode_head(w: &mut ByteWriter, head: &Classifier) -> Result<()> {
    w.u8(head.mode.tag());
    w.dim(head.hidden_size())?;
    w.dim(head.classes())?;
    w.f64s(head.weight.data());
    w.f64s(&head.bias);
    Ok(())
}

fn decode_head(r: &mut ByteReader) -> Result<Classifier> {
    let tag = r.u8()?;
    let mode = HeadMode::from_tag(tag).ok_or_else(|| r.error(format!("unknown classifier mode {tag}")))?;
    let hidden = r.dim()?;
    let classes = r.dim()?;
    let weight = r.f64s(hidden * classes)?;
    let weight = tensor(r, vec![hidden, classes], weight)?;
    let bias = r.f64s(classes)?;
    Classifier::new(weight, bias, mode).map_err(|e| r.error(e.to_string()))
}

fn encode_optimizer(w: &mut ByteWriter, adam: &Adam, rng: &ChaCha8Rng) -> Result<()> {
    w.u64(adam.step);
    w.dim(adam.first.len())?;
    for (m, v) in adam.first.iter().zip(&adam.second) {
        w.u64(m.len() as u64);
        w.f64s(m);
        w.f64s(v);
    }
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
    Ok(())
}

fn decode_optimizer(r: &mut ByteReader, model: &SequenceModel) -> Result<(Adam, ChaCha8Rng)> {
    let step = r.u64()?;
    let count = r.dim()?;
    let mut expected = Vec::new();
    model.visit_params(&mut |_, p| expected.push(p.len()));
    if count != expected.len() {
        return Err(r.error(format!(
            "optimizer has {count} buffers, model has {} parameter tensors",
            expected.len()
        )));
    }
    let mut first = Vec::with_capacity(count);
    let mut second = Vec::with_capacity(count);
    for &len in &expected {
        let stored = r.u64()?;
        if stored != len as u64 {
            return Err(r.error(format!("optimizer buffer of length {stored}, expected {len}")));
        }
        first.push(r.f64s(len)?);
        second.push(r.f64s(len)?);
    }
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok((Adam { first, second, step }, rng))
}
