//! Training configuration: `key = value` files with `#` comments, overridden
//! by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ttrnn::rnn::CellKind;
use ttrnn::train::TrainConfig;
use ttrnn::{Error, Result, TtShape};

/// Cell architecture selected by `--cell`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub tt: bool,
}

impl CellSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (tt, base) = match s.strip_prefix("tt-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let kind = match base {
            "srnn" => CellKind::Srnn,
            "gru" => CellKind::Gru,
            "lstm" => CellKind::Lstm,
            _ => {
                return Err(Error::Argument(format!(
                    "unknown cell {s:?}; expected one of srnn, gru, lstm, tt-srnn, tt-gru, tt-lstm"
                )))
            }
        };
        Ok(Self { kind, tt })
    }

    pub fn name(&self) -> String {
        let base = match self.kind {
            CellKind::Srnn => "srnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        };
        if self.tt {
            format!("tt-{base}")
        } else {
            base.to_string()
        }
    }
}

pub fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Argument(format!("{key}: {v:?} is not a non-negative integer")))
        })
        .collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Argument(format!("{key}: cannot parse {s:?}")))
}

/// Every setting `train` accepts. Keys in files use the flag names with or
/// without the leading dashes; `_` and `-` are interchangeable.
pub const KEYS: &[&str] = &[
    "data",
    "val-data",
    "out",
    "cell",
    "input-factors",
    "hidden-factors",
    "ranks",
    "hidden-size",
    "lr",
    "dropout",
    "ridge",
    "batch-size",
    "epochs",
    "seed",
    "val-fraction",
];

/// Raw key/value settings, later entries overriding earlier ones.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", path.display())))?;
        let mut out = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    i + 1
                ))
            })?;
            out.set(k, v.trim())?;
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Argument(format!("unknown setting {key:?}")));
        }
        self.values.insert(key, value.into());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Argument(format!("missing setting {key}")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|v| parse_value(key, v)).transpose()
    }
}

/// Validated `train` configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub out: PathBuf,
    pub cell: CellSpec,
    /// Present for TT cells.
    pub tt_shape: Option<TtShape>,
    pub hidden_size: usize,
    pub val_fraction: f64,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let cell = CellSpec::parse(s.get("cell").unwrap_or("tt-gru"))?;
        let hidden_factors = s
            .get("hidden-factors")
            .map(|v| parse_list("hidden-factors", v))
            .transpose()?;
        let tt_shape = if cell.tt {
            let m = parse_list("input-factors", s.require("input-factors")?)?;
            let n = hidden_factors
                .clone()
                .ok_or_else(|| Error::Argument("missing setting hidden-factors".into()))?;
            let ranks = parse_list("ranks", s.require("ranks")?)?;
            Some(TtShape::new(m, n, ranks)?)
        } else {
            None
        };
        let factor_hidden = hidden_factors.map(|f| f.iter().product::<usize>());
        let hidden_size = match (s.parsed::<usize>("hidden-size")?, factor_hidden) {
            (Some(h), Some(f)) if h != f => {
                return Err(Error::Argument(format!(
                    "hidden-size {h} does not match the hidden factors' product {f}"
                )))
            }
            (Some(h), _) | (None, Some(h)) => h,
            (None, None) => {
                return Err(Error::Argument("set hidden-size or hidden-factors".into()))
            }
        };
        if hidden_size == 0 {
            return Err(Error::Argument("hidden size must be positive".into()));
        }
        let mut train = TrainConfig::default();
        if let Some(v) = s.parsed("lr")? {
            train.adam.learning_rate = v;
        }
        if let Some(v) = s.parsed("dropout")? {
            train.dropout = v;
        }
        if let Some(v) = s.parsed("ridge")? {
            train.ridge = v;
        }
        if let Some(v) = s.parsed("batch-size")? {
            train.batch_size = v;
        }
        if let Some(v) = s.parsed("epochs")? {
            train.epochs = v;
        }
        if let Some(v) = s.parsed("seed")? {
            train.seed = v;
        }
        train.validate()?;
        let val_fraction = s.parsed("val-fraction")?.unwrap_or(0.2);
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "val-fraction must lie in (0, 1), got {val_fraction}"
            )));
        }
        Ok(Self {
            data: s.require("data")?.into(),
            val_data: s.get("val-data").map(PathBuf::from),
            out: s.require("out")?.into(),
            cell,
            tt_shape,
            hidden_size,
            val_fraction,
            train,
        })
    }
}
