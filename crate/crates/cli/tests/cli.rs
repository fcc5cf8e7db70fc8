use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ttrnn::data::{write_dataset, Label, LabelMode, SequenceDataset, SequenceRecord};
use ttrnn::{DenseTensor, Shape};

fn ttrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttrnn"))
        .args(args)
        .env_remove("TTRNN_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn field(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn plan_reports_counts() {
    let o = ttrnn(&[
        "plan",
        "--input-factors",
        "8,20,20,18",
        "--hidden-factors",
        "4,4,4,4",
        "--ranks",
        "1,4,4,4,1",
        "--cell",
        "tt-lstm",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(field(&out, "dense_matrix"), "14745600");
    assert_eq!(field(&out, "tt_vanilla"), "11904");
    assert_eq!(field(&out, "tt_fused"), "3360");

    let o = ttrnn(&[
        "plan",
        "--input-factors",
        "8,20,20,18",
        "--hidden-factors",
        "4,4,4,4",
        "--ranks",
        "1,4,4,4,1",
        "--cell",
        "tt-gru",
    ]);
    let out = stdout(&o);
    assert_eq!(field(&out, "tt_fused"), "3232");
    assert_eq!(field(&out, "tt_vanilla"), "8928");

    for (cell, count) in [("tt-gru", "2944"), ("tt-lstm", "3104")] {
        let o = ttrnn(&[
            "plan",
            "--input-factors",
            "10,18,13,30",
            "--hidden-factors",
            "4,4,4,4",
            "--ranks",
            "1,4,4,4,1",
            "--cell",
            cell,
        ]);
        assert_eq!(field(&stdout(&o), "tt_fused"), count);
    }
}

#[test]
fn plan_rejects_invalid_shapes() {
    for (m, n, r) in [
        ("8,20", "4,4", "1,4,4,1"),
        ("8,20", "4,4", "2,4,1"),
        ("8,0", "4,4", "1,4,1"),
    ] {
        let o = ttrnn(&[
            "plan",
            "--input-factors",
            m,
            "--hidden-factors",
            n,
            "--ranks",
            r,
        ]);
        assert_eq!(o.status.code(), Some(2), "{m} {n} {r}");
        assert!(stderr(&o).starts_with("error:"));
        assert!(stdout(&o).is_empty());
    }
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for dir in [&a, &b] {
        let o = ttrnn(&[
            "gen-data",
            "--out",
            p(dir),
            "--seed",
            "7",
            "--per-class",
            "10",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(field(&stdout(&o), "records"), "40");
        let bytes: u64 = field(&stdout(&o), "bytes").parse().unwrap();
        let on_disk: u64 = dir_contents(dir).iter().map(|(_, b)| b.len() as u64).sum();
        assert_eq!(bytes, on_disk);
    }
    assert_eq!(dir_contents(&a), dir_contents(&b));

    let o = ttrnn(&[
        "gen-data",
        "--out",
        p(&a),
        "--seed",
        "8",
        "--per-class",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let o = ttrnn(&[
        "gen-data",
        "--out",
        p(&a),
        "--seed",
        "8",
        "--per-class",
        "10",
        "--force",
    ]);
    assert!(o.status.success());
    assert_ne!(dir_contents(&a), dir_contents(&b));

    let o = ttrnn(&[
        "gen-data",
        "--out",
        p(&root.path().join("c")),
        "--classes",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_counts_and_lengths() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("d");
    let o = ttrnn(&[
        "gen-data",
        "--out",
        p(&dir),
        "--per-class",
        "100",
        "--t-min",
        "10",
        "--t-max",
        "10",
        "--frame-size",
        "8x8x1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "records"), "400");
    let ds = ttrnn::data::read_dataset(&dir).unwrap();
    assert_eq!(ds.len(), 400);
    assert!(ds.records.iter().all(|r| r.len() == 10));
}

struct Run {
    _root: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn synthetic_run(frame: &str) -> Run {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let o = ttrnn(&[
        "gen-data",
        "--out",
        p(&data),
        "--per-class",
        "3",
        "--t-min",
        "4",
        "--t-max",
        "6",
        "--frame-size",
        frame,
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = root.path().join("run");
    Run {
        _root: root,
        data,
        out,
    }
}

fn train_tt_gru(run: &Run, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        p(&run.data),
        "--out",
        p(out),
        "--cell",
        "tt-gru",
        "--input-factors",
        "4,4,16,3",
        "--hidden-factors",
        "4,4,2,2",
        "--ranks",
        "1,3,3,3,1",
        "--epochs",
        "2",
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    ttrnn(&args)
}

#[test]
fn train_writes_log_and_checkpoint_deterministically() {
    let run = synthetic_run("16x16x3");
    let o = train_tt_gru(&run, &run.out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.out.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(
        lines[0],
        "# cell=tt-gru\tinput_map_params=594\ttotal_params=13270"
    );
    for (e, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[0], (e + 1).to_string());
        assert!(cols[1].parse::<f64>().unwrap() > 0.0);
        assert_eq!(cols[2], "accuracy");
        assert!((0.0..=1.0).contains(&cols[3].parse::<f64>().unwrap()));
    }

    let again = run.out.with_file_name("again");
    assert!(train_tt_gru(&run, &again, &[]).status.success());
    assert_eq!(dir_contents(&run.out), dir_contents(&again));

    let o = ttrnn(&[
        "eval",
        "--checkpoint",
        p(&run.out.join("checkpoint.ttrn")),
        "--data",
        p(&run.data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let value = out.trim().strip_prefix("accuracy\t").unwrap();
    assert_eq!(value.split('.').nth(1).unwrap().len(), 4);
    assert!((0.0..=1.0).contains(&value.parse::<f64>().unwrap()));
}

#[test]
fn config_file_with_flag_overrides() {
    let run = synthetic_run("8x8x3");
    let cfg = run.out.with_file_name("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny run\ndata = {}\nout = {}\ncell = tt-lstm\ninput_factors = 4,4,4,3\nhidden_factors = 2,2,2,2\nranks = 1,2,2,2,1\nepochs = 5\n",
            p(&run.data),
            p(&run.out)
        ),
    )
    .unwrap();
    let o = ttrnn(&["train", "--config", p(&cfg), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.out.join("metrics.tsv")).unwrap();
    assert!(log.starts_with("# cell=tt-lstm\t"));
    assert_eq!(log.lines().count(), 2);

    fs::write(&cfg, "cell = tt-gru\nbogus = 1\n").unwrap();
    let o = ttrnn(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn factor_mismatch_fails_before_training() {
    let run = synthetic_run("16x16x3");
    let o = ttrnn(&[
        "train",
        "--data",
        p(&run.data),
        "--out",
        p(&run.out),
        "--cell",
        "tt-gru",
        "--input-factors",
        "4,4,4,3",
        "--hidden-factors",
        "4,4,2,2",
        "--ranks",
        "1,3,3,3,1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("192"), "{}", stderr(&o));
    assert!(!run.out.exists());
}

#[test]
fn plain_gru_header_dwarfs_tt_input_map() {
    let run = synthetic_run("16x16x3");
    let o = train_tt_gru(&run, &run.out, &["--epochs", "1"]);
    assert!(o.status.success());
    let plain = run.out.with_file_name("plain");
    let o = ttrnn(&[
        "train",
        "--data",
        p(&run.data),
        "--out",
        p(&plain),
        "--cell",
        "gru",
        "--hidden-size",
        "64",
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let header = |dir: &Path| -> (u64, u64) {
        let log = fs::read_to_string(dir.join("metrics.tsv")).unwrap();
        let first = log.lines().next().unwrap().to_string();
        let get = |key: &str| {
            first
                .split('\t')
                .find_map(|f| f.strip_prefix(&format!("{key}=")))
                .unwrap()
                .parse::<u64>()
                .unwrap()
        };
        (get("input_map_params"), get("total_params"))
    };
    let (tt_map, _) = header(&run.out);
    let (plain_map, _) = header(&plain);
    assert_eq!(plain_map, 768 * 3 * 64);
    assert!(plain_map >= 100 * tt_map);
}

#[test]
fn eval_rejects_mismatched_frames_naming_both_sides() {
    let run = synthetic_run("16x16x3");
    assert!(train_tt_gru(&run, &run.out, &["--epochs", "1"])
        .status
        .success());
    let other = synthetic_run("8x8x3");
    let o = ttrnn(&[
        "eval",
        "--checkpoint",
        p(&run.out.join("checkpoint.ttrn")),
        "--data",
        p(&other.data),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("768") && err.contains("192"), "{err}");
}

#[test]
fn corrupted_checkpoint_exits_with_format_code() {
    let run = synthetic_run("16x16x3");
    assert!(train_tt_gru(&run, &run.out, &["--epochs", "1"])
        .status
        .success());
    let ckpt = run.out.join("checkpoint.ttrn");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&ckpt, bytes).unwrap();
    let o = ttrnn(&["eval", "--checkpoint", p(&ckpt), "--data", p(&run.data)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn bad_thread_setting_is_a_config_error() {
    let run = synthetic_run("16x16x3");
    let o = Command::new(env!("CARGO_BIN_EXE_ttrnn"))
        .args([
            "train",
            "--data",
            p(&run.data),
            "--out",
            p(&run.out),
            "--cell",
            "gru",
            "--hidden-size",
            "4",
        ])
        .env("TTRNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn multi_label_dataset(dir: &Path) {
    let records = (0..12)
        .map(|i| {
            let data: Vec<f64> = (0..3 * 8 * 8)
                .map(|v| ((v * 7 + i * 13) % 17) as f64 / 17.0)
                .collect();
            let frames = DenseTensor::from_vec(Shape::new([3, 8, 8, 1]).unwrap(), data).unwrap();
            SequenceRecord::new(frames, Label::Multi(vec![i % 3, (i + 1) % 3])).unwrap()
        })
        .collect();
    let ds = SequenceDataset::new(
        records,
        vec!["a".into(), "b".into(), "c".into()],
        LabelMode::Multi,
    )
    .unwrap();
    write_dataset(&ds, dir).unwrap();
}

#[test]
fn multi_label_data_selects_map() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("multi");
    multi_label_dataset(&data);
    let out = root.path().join("run");
    let o = ttrnn(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--cell",
        "tt-gru",
        "--input-factors",
        "4,4,4",
        "--hidden-factors",
        "2,2,2",
        "--ranks",
        "1,2,2,1",
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert!(log.lines().nth(1).unwrap().contains("\tmap\t"));
    let o = ttrnn(&[
        "eval",
        "--checkpoint",
        p(&out.join("checkpoint.ttrn")),
        "--data",
        p(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("map\t"));

    let single = synthetic_run("8x8x1");
    let o = ttrnn(&[
        "eval",
        "--checkpoint",
        p(&out.join("checkpoint.ttrn")),
        "--data",
        p(&single.data),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
