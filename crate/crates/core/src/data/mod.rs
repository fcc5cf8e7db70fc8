//! Frame sequences, their on-disk container, and a synthetic motion task.

mod container;
mod synthetic;

pub use container::{read_dataset, read_sequence_file, write_dataset, write_sequence_file, MANIFEST, SEQUENCE_MAGIC, SEQUENCE_VERSION};
pub use synthetic::{generate_synthetic, square_size, SYNTHETIC_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};
use crate::train::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Single,
    Multi,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Single => "single",
            LabelMode::Multi => "multi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Single(usize),
    /// Sorted, duplicate-free positive class indices.
    Multi(Vec<usize>),
}

impl Label {
    pub fn mode(&self) -> LabelMode {
        match self {
            Label::Single(_) => LabelMode::Single,
            Label::Multi(_) => LabelMode::Multi,
        }
    }

    /// One-hot or multi-hot 0/1 vector of length `classes`.
    pub fn target(&self, classes: usize) -> Vec<f64> {
        let mut out = vec![0.0; classes];
        match self {
            Label::Single(c) => out[*c] = 1.0,
            Label::Multi(cs) => cs.iter().for_each(|&c| out[c] = 1.0),
        }
        out
    }

    fn max_class(&self) -> Option<usize> {
        match self {
            Label::Single(c) => Some(*c),
            Label::Multi(cs) => cs.last().copied(),
        }
    }
}

/// One `(T, H, W, C)` sequence with values in `[0, 1]`.
///
/// Values are rounded to `f32` precision on construction so that the `f32`
/// container stores them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    frames: DenseTensor,
    pub label: Label,
}

impl SequenceRecord {
    pub fn new(frames: DenseTensor, label: Label) -> Result<Self> {
        if frames.dims().len() != 4 {
            return Err(Error::Shape(format!(
                "frames must have shape (T, H, W, C), got {:?}",
                frames.dims()
            )));
        }
        let mut frames = frames;
        for v in frames.data_mut() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Argument(format!("frame value {v} outside [0, 1]")));
            }
            *v = *v as f32 as f64;
        }
        let label = match label {
            Label::Multi(mut cs) => {
                cs.sort_unstable();
                cs.dedup();
                Label::Multi(cs)
            }
            single => single,
        };
        Ok(Self { frames, label })
    }

    pub fn frames(&self) -> &DenseTensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(H, W, C)`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let d = self.frames.dims();
        [d[1], d[2], d[3]]
    }

    pub fn frame_size(&self) -> usize {
        self.frame_shape().iter().product()
    }

    /// The frames as a `(T, H*W*C)` matrix.
    pub fn frame_matrix(&self) -> DenseTensor {
        let shape = Shape::new([self.len(), self.frame_size()]).expect("non-empty record");
        self.frames.clone().into_reshaped(shape).expect("same size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub records: Vec<SequenceRecord>,
    pub class_names: Vec<String>,
    pub label_mode: LabelMode,
}

impl SequenceDataset {
    /// Checks consistent frame shapes, label modes and label ranges.
    pub fn new(records: Vec<SequenceRecord>, class_names: Vec<String>, label_mode: LabelMode) -> Result<Self> {
        let classes = class_names.len();
        if classes == 0 {
            return Err(Error::Argument("a dataset needs at least one class".into()));
        }
        if let Some(name) = class_names
            .iter()
            .find(|n| n.is_empty() || n.contains([',', '\t', '\n', '\r', '=']))
        {
            return Err(Error::Argument(format!("invalid class name {name:?}")));
        }
        if let Some(first) = records.first() {
            let fs = first.frame_shape();
            if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.frame_shape() != fs) {
                return Err(Error::Shape(format!(
                    "record {i} has frame shape {:?}, record 0 has {fs:?}",
                    r.frame_shape()
                )));
            }
        }
        for (i, r) in records.iter().enumerate() {
            if r.label.mode() != label_mode {
                return Err(Error::Argument(format!(
                    "record {i} has a {} label in a {} dataset",
                    r.label.mode().as_str(),
                    label_mode.as_str()
                )));
            }
            if r.label.max_class().is_some_and(|c| c >= classes) {
                return Err(Error::Argument(format!(
                    "record {i} has label {:?} but only {classes} classes",
                    r.label
                )));
            }
        }
        Ok(Self {
            records,
            class_names,
            label_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn frame_shape(&self) -> Option<[usize; 3]> {
        self.records.first().map(SequenceRecord::frame_shape)
    }

    /// Flattened frames with one-hot or multi-hot targets.
    pub fn examples(&self) -> Vec<Example> {
        self.records
            .iter()
            .map(|r| Example {
                frames: r.frame_matrix(),
                target: r.label.target(self.classes()),
            })
            .collect()
    }
}

/// Raw 8-bit pixels to `[0, 1]`.
pub fn normalize_frames(shape: Shape, raw: &[u8]) -> Result<DenseTensor> {
    DenseTensor::from_vec(shape, raw.iter().map(|&v| v as f64 / 255.0).collect())
}

/// One row-major `H*W*C` vector per frame.
pub fn flatten_frames(rec: &SequenceRecord) -> Vec<Vec<f64>> {
    let m = rec.frame_matrix();
    (0..rec.len()).map(|t| m.row(t).to_vec()).collect()
}
