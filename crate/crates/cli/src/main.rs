//! `ttrnn`: plan TT factorizations, generate synthetic data, train and evaluate.

mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttrnn::data::{generate_synthetic, read_dataset, write_dataset, LabelMode, SYNTHETIC_CLASSES};
use ttrnn::model::SequenceModel;
use ttrnn::rnn::RnnCell;
use ttrnn::train::checkpoint::read_checkpoint;
use ttrnn::train::{evaluate, fit_with, split_indices, Classifier, Example, HeadMode};
use ttrnn::tt::{
    compression_rate, dense_param_count, format_scientific, tt_param_count, vanilla_param_count,
};
use ttrnn::{Error, Result, TtShape};

use config::{parse_list, CellSpec, RunConfig, Settings};

pub const CHECKPOINT_FILE: &str = "checkpoint.ttrn";
pub const METRICS_FILE: &str = "metrics.tsv";
const THREADS_VAR: &str = "TTRNN_THREADS";

#[derive(Parser)]
#[command(
    name = "ttrnn",
    version,
    about = "Tensor-Train recurrent networks for frame-sequence classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dense and TT parameter counts and compression rates for a factorization.
    Plan(PlanArgs),
    /// Write a synthetic moving-square dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-epoch metrics log.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Input factors m_1,...,m_d.
    #[arg(long)]
    input_factors: String,
    /// Hidden factors n_1,...,n_d.
    #[arg(long)]
    hidden_factors: String,
    /// TT ranks r_0,...,r_d with r_0 = r_d = 1.
    #[arg(long)]
    ranks: String,
    /// ttl, tt-srnn, tt-gru or tt-lstm.
    #[arg(long, default_value = "tt-lstm")]
    cell: String,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of motion classes; only 4 is supported.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 125)]
    per_class: usize,
    /// Frame size as HxWxC.
    #[arg(long, default_value = "16x16x3")]
    frame_size: String,
    #[arg(long, default_value_t = 8)]
    t_min: usize,
    #[arg(long, default_value_t = 16)]
    t_max: usize,
    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allow writing into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    data: Option<String>,
    /// Optional validation dataset; otherwise a seeded split of --data is used.
    #[arg(long)]
    val_data: Option<String>,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    out: Option<String>,
    /// srnn, gru, lstm, tt-srnn, tt-gru or tt-lstm.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    input_factors: Option<String>,
    #[arg(long)]
    hidden_factors: Option<String>,
    #[arg(long)]
    ranks: Option<String>,
    /// Hidden size for plain cells (defaults to the hidden factors' product).
    #[arg(long)]
    hidden_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    ridge: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Fraction of --data held out for validation when --val-data is absent.
    #[arg(long)]
    val_fraction: Option<String>,
}

impl TrainArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        let flags = [
            ("data", &self.data),
            ("val-data", &self.val_data),
            ("out", &self.out),
            ("cell", &self.cell),
            ("input-factors", &self.input_factors),
            ("hidden-factors", &self.hidden_factors),
            ("ranks", &self.ranks),
            ("hidden-size", &self.hidden_size),
            ("lr", &self.lr),
            ("dropout", &self.dropout),
            ("ridge", &self.ridge),
            ("batch-size", &self.batch_size),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("val-fraction", &self.val_fraction),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                s.set(key, v.clone())?;
            }
        }
        Ok(s)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => plan(&a),
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn plan(a: &PlanArgs) -> Result<()> {
    let shape = TtShape::new(
        parse_list("input-factors", &a.input_factors)?,
        parse_list("hidden-factors", &a.hidden_factors)?,
        parse_list("ranks", &a.ranks)?,
    )?;
    let gates = if a.cell == "ttl" {
        1
    } else {
        let spec = CellSpec::parse(&a.cell)?;
        if !spec.tt {
            return Err(Error::Argument(format!(
                "plan needs a TT cell, got {:?}",
                a.cell
            )));
        }
        spec.kind.gates()
    };
    print!("{}", plan_report(&a.cell, &shape, gates));
    Ok(())
}

fn plan_report(cell: &str, shape: &TtShape, gates: usize) -> String {
    let (m, n) = (shape.input_size(), shape.output_size());
    let dense = dense_param_count(m, n, gates);
    let vanilla = vanilla_param_count(shape, gates);
    let fused = tt_param_count(shape, gates);
    let r = num_rational::Ratio::new(vanilla, dense);
    let r_star = compression_rate(shape, gates);
    let rate = |q: &num_rational::Ratio<u128>| {
        format!("{}/{} ({})", q.numer(), q.denom(), format_scientific(q, 2))
    };
    let rows = [
        ("cell", cell.to_string()),
        ("gates", gates.to_string()),
        ("M", m.to_string()),
        ("N", n.to_string()),
        ("dense_matrix", (m as u128 * n as u128).to_string()),
        ("dense", dense.to_string()),
        ("tt_vanilla", vanilla.to_string()),
        ("tt_fused", fused.to_string()),
        ("r", rate(&r)),
        ("r_star", rate(&r_star)),
    ];
    rows.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

fn parse_frame_size(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("frame size {s:?} must look like HxWxC")))?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        [h, w] => Ok((h, w, 1)),
        _ => Err(Error::Argument(format!(
            "frame size {s:?} must look like HxWxC"
        ))),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.classes != SYNTHETIC_CLASSES.len() {
        return Err(Error::Argument(format!(
            "the synthetic task has exactly {} classes, got --classes {}",
            SYNTHETIC_CLASSES.len(),
            a.classes
        )));
    }
    let (h, w, c) = parse_frame_size(&a.frame_size)?;
    if let Ok(mut entries) = fs::read_dir(&a.out) {
        if entries.next().is_some() && !a.force {
            return Err(Error::Argument(format!(
                "{} exists and is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    let ds = generate_synthetic(a.per_class, (a.t_min, a.t_max), h, w, c, a.noise, a.seed)?;
    let bytes = write_dataset(&ds, &a.out)?;
    println!("records\t{}", ds.len());
    println!("bytes\t{bytes}");
    Ok(())
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "{THREADS_VAR} must be a positive integer, got {v:?}"
                ))
            }),
    }
}

fn head_mode(mode: LabelMode) -> HeadMode {
    match mode {
        LabelMode::Single => HeadMode::Softmax,
        LabelMode::Multi => HeadMode::Logistic,
    }
}

fn build_model(
    cfg: &RunConfig,
    input_size: usize,
    classes: usize,
    mode: HeadMode,
) -> Result<SequenceModel> {
    let seed = cfg.train.seed;
    let cell = match &cfg.tt_shape {
        Some(shape) => RnnCell::tt(cfg.cell.kind, shape, seed)?,
        None => RnnCell::dense(cfg.cell.kind, input_size, cfg.hidden_size, seed)?,
    };
    let head = Classifier::init(cfg.hidden_size, classes, mode, seed.wrapping_add(1))?;
    SequenceModel::new(cell, head)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::from_settings(&a.settings()?)?;
    cfg.train.threads = threads()?;
    let data = read_dataset(&cfg.data)?;
    let val_data = cfg.val_data.as_deref().map(read_dataset).transpose()?;
    let [h, w, c] = data
        .frame_shape()
        .ok_or_else(|| Error::Argument(format!("dataset {} is empty", cfg.data.display())))?;
    let frame = h * w * c;
    if let Some(shape) = &cfg.tt_shape {
        if shape.input_size() != frame {
            return Err(Error::Argument(format!(
                "input factors {:?} multiply to {}, but frames are {h}x{w}x{c} = {frame}",
                shape.m,
                shape.input_size()
            )));
        }
    }
    if let Some(v) = &val_data {
        if v.frame_shape().is_some_and(|s| s != [h, w, c])
            || v.class_names != data.class_names
            || v.label_mode != data.label_mode
        {
            return Err(Error::Argument(
                "validation data differs from training data in frame shape, classes or label mode"
                    .into(),
            ));
        }
    }
    let examples = data.examples();
    let (train_set, val_set): (Vec<Example>, Vec<Example>) = match &val_data {
        Some(v) => (examples, v.examples()),
        None => {
            let (tr, va) = split_indices(examples.len(), cfg.val_fraction, cfg.train.seed);
            (
                tr.iter().map(|&i| examples[i].clone()).collect(),
                va.iter().map(|&i| examples[i].clone()).collect(),
            )
        }
    };
    let model = build_model(&cfg, frame, data.classes(), head_mode(data.label_mode))?;

    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    let log_path = cfg.out.join(METRICS_FILE);
    let mut log = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let header = format!(
        "# cell={}\tinput_map_params={}\ttotal_params={}\n",
        cfg.cell.name(),
        model.cell.input_map.param_count(),
        model.param_count()
    );
    log.write_all(header.as_bytes())
        .map_err(|e| io_error(&log_path, e))?;
    print!("{header}");

    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let mut write_err = None;
    let outcome = fit_with(
        model,
        &train_set,
        &val_set,
        &cfg.train,
        Some(&checkpoint),
        |record| {
            let line = record.line();
            println!("{line}");
            if write_err.is_none() {
                if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                    write_err = Some(io_error(&log_path, e));
                }
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    println!(
        "best\t{}\t{}",
        outcome.log[0].metric.name, outcome.best_metric
    );
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let state = read_checkpoint(&a.checkpoint)?;
    let model = state.model;
    let data = read_dataset(&a.data)?;
    let [h, w, c] = data
        .frame_shape()
        .ok_or_else(|| Error::Argument(format!("dataset {} is empty", a.data.display())))?;
    if h * w * c != model.input_size() {
        return Err(Error::Shape(format!(
            "checkpoint {} expects frames of {} values, dataset {} has {h}x{w}x{c} = {} values",
            a.checkpoint.display(),
            model.input_size(),
            a.data.display(),
            h * w * c
        )));
    }
    let mode = head_mode(data.label_mode);
    if mode != model.head.mode || data.classes() != model.head.classes() {
        return Err(Error::Shape(format!(
            "checkpoint {} has a {:?} head over {} classes, dataset {} is {}-label over {} classes",
            a.checkpoint.display(),
            model.head.mode,
            model.head.classes(),
            a.data.display(),
            data.label_mode.as_str(),
            data.classes()
        )));
    }
    let metric = evaluate(&model, &data.examples())?;
    println!("{}\t{:.4}", metric.name, metric.value);
    Ok(())
}
