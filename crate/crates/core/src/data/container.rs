//! `TTSQ` sequence files plus a `manifest.tsv` index.
//!
//! Sequence file: magic `TTSQ`, u16 version, u32 T, H, W, C, then
//! `T*H*W*C` little-endian `f32` values in row-major order.
//!
//! Manifest: a header line `mode=<single|multi>\tclasses=<name,name,...>`,
//! then one `filename\tlabel` line per record. A single label is a class
//! index; a multi label is a comma-separated list of positive indices
//! (empty when no class is present).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{Label, LabelMode, SequenceDataset, SequenceRecord};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"TTSQ";
pub const SEQUENCE_VERSION: u16 = 1;
pub const MANIFEST: &str = "manifest.tsv";
const EXTENSION: &str = "ttsq";

pub fn encode_sequence(rec: &SequenceRecord) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(SEQUENCE_MAGIC);
    w.u16(SEQUENCE_VERSION);
    for &d in rec.frames().dims() {
        w.dim(d)?;
    }
    let values: Vec<f32> = rec.frames().data().iter().map(|&v| v as f32).collect();
    w.f32s(&values);
    Ok(w.buf)
}

/// Decodes the frames of one sequence file.
pub fn decode_sequence(bytes: &[u8], path: &Path) -> Result<DenseTensor> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.take(4)?;
    if magic != SEQUENCE_MAGIC {
        return Err(r.error(format!("bad magic {magic:?}, expected \"TTSQ\"")));
    }
    let version = r.u16()?;
    if version != SEQUENCE_VERSION {
        return Err(r.error(format!("unsupported sequence version {version}")));
    }
    let dims = r.dims(4)?;
    let shape = Shape::new(dims.clone()).map_err(|e| r.error(e.to_string()))?;
    let values = r.f32s(shape.size())?;
    r.finish()?;
    if let Some((pos, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(r.error(format!("value {v} at flat index {pos} is outside [0, 1]")));
    }
    Ok(DenseTensor::from_vec(shape, values.into_iter().map(f64::from).collect()).expect("checked values"))
}

pub fn write_sequence_file(path: &Path, rec: &SequenceRecord) -> Result<u64> {
    let bytes = encode_sequence(rec)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_sequence_file(path: &Path) -> Result<DenseTensor> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(path, "file not found"),
        _ => Error::io(path, e),
    })?;
    decode_sequence(&bytes, path)
}

fn file_name(i: usize) -> String {
    format!("seq_{i:06}.{EXTENSION}")
}

fn label_spec(label: &Label) -> String {
    match label {
        Label::Single(c) => c.to_string(),
        Label::Multi(cs) => cs.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
    }
}

/// Writes every record and the manifest into `dir`, creating it if needed.
/// Returns the total number of bytes written.
pub fn write_dataset(ds: &SequenceDataset, dir: &Path) -> Result<u64> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "mode={}\tclasses={}\n",
        ds.label_mode.as_str(),
        ds.class_names.join(",")
    );
    let mut total = 0u64;
    for (i, rec) in ds.records.iter().enumerate() {
        let name = file_name(i);
        total += write_sequence_file(&dir.join(&name), rec)?;
        manifest.push_str(&format!("{name}\t{}\n", label_spec(&rec.label)));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    Ok(total + manifest.len() as u64)
}

fn parse_header(line: &str, path: &Path) -> Result<(LabelMode, Vec<String>)> {
    let mut mode = None;
    let mut classes = None;
    for field in line.split('\t') {
        match field.split_once('=') {
            Some(("mode", "single")) => mode = Some(LabelMode::Single),
            Some(("mode", "multi")) => mode = Some(LabelMode::Multi),
            Some(("classes", names)) => classes = Some(names.split(',').map(str::to_string).collect()),
            _ => return Err(Error::format(path, format!("unrecognized header field {field:?}"))),
        }
    }
    match (mode, classes) {
        (Some(m), Some(c)) => Ok((m, c)),
        _ => Err(Error::format(path, "header must give mode= and classes=")),
    }
}

fn parse_label(spec: &str, mode: LabelMode, path: &Path, line: usize) -> Result<Label> {
    let bad = || Error::format(path, format!("line {line}: bad label {spec:?}"));
    match mode {
        LabelMode::Single => spec.parse().map(Label::Single).map_err(|_| bad()),
        LabelMode::Multi if spec.is_empty() => Ok(Label::Multi(Vec::new())),
        LabelMode::Multi => spec
            .split(',')
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<Vec<usize>>>()
            .map(Label::Multi),
    }
}

/// Reads a directory written by [`write_dataset`].
///
/// Every `.ttsq` file in the directory must be listed in the manifest and
/// every listed file must exist.
pub fn read_dataset(dir: &Path) -> Result<SequenceDataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&manifest_path, "manifest not found"),
        std::io::ErrorKind::InvalidData => Error::format(&manifest_path, "manifest is not UTF-8"),
        _ => Error::io(&manifest_path, e),
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(&manifest_path, "empty manifest"))?;
    let (mode, class_names) = parse_header(header, &manifest_path)?;
    let mut listed = BTreeSet::new();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let (name, spec) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&manifest_path, format!("line {line_no}: expected filename<TAB>label")))?;
        if name.is_empty() || name.contains(['/', '\\']) || name == MANIFEST {
            return Err(Error::format(&manifest_path, format!("line {line_no}: bad file name {name:?}")));
        }
        if !listed.insert(name.to_string()) {
            return Err(Error::format(&manifest_path, format!("line {line_no}: {name} listed twice")));
        }
        let label = parse_label(spec, mode, &manifest_path, line_no)?;
        let path = dir.join(name);
        let frames = read_sequence_file(&path)?;
        let record = SequenceRecord::new(frames, label).map_err(|e| Error::format(&path, e.to_string()))?;
        records.push(record);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if Path::new(&name).extension().is_some_and(|x| x == EXTENSION) && !listed.contains(&name) {
            return Err(Error::format(&manifest_path, format!("{name} is not listed in the manifest")));
        }
    }
    SequenceDataset::new(records, class_names, mode).map_err(|e| Error::format(&manifest_path, e.to_string()))
}
