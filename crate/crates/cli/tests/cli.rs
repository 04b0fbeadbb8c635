use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sepformer::data::{read_wav, write_wav, AudioSignal};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sepformer(args: &[&str]) -> Output {
    sepformer_env(args, None)
}

fn sepformer_env(args: &[&str], seed_var: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sepformer"));
    cmd.args(args).env_remove("SEPFORMER_SEED");
    if let Some(v) = seed_var {
        cmd.env("SEPFORMER_SEED", v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts a single-line `error[kind]: ...` report and returns it.
fn failure(out: Output, kind: &str) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with(&format!("error[{kind}]: ")), "{stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-data",
        "--out",
        s(dir),
        "--sources",
        "3",
        "--seconds",
        "0.25",
        "--seed",
        "4",
    ];
    args.extend_from_slice(extra);
    ok(sepformer(&args));
}

fn wav_files(dir: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            found.extend(wav_files(&path));
        } else if path.extension().is_some_and(|e| e == "wav") {
            found.push(path);
        }
    }
    found.sort();
    found
}

#[test]
fn gen_data_writes_one_wav_per_source() {
    let dir = tempfile::tempdir().unwrap();
    ok(sepformer(&[
        "gen-data",
        "--out",
        s(dir.path()),
        "--sources",
        "2",
        "--seconds",
        "2",
        "--seed",
        "1",
    ]));
    let wavs = wav_files(dir.path());
    assert_eq!(wavs.len(), 2);
    for w in wavs {
        let signal = read_wav(&w).unwrap();
        assert_eq!((signal.len(), signal.sample_rate), (16000, 8000));
    }
    assert_eq!(
        std::fs::read_to_string(dir.path().join("bank.tsv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn gen_data_is_deterministic_and_honours_seed_precedence() {
    let dirs: Vec<_> = (0..4).map(|_| tempfile::tempdir().unwrap()).collect();
    let run = |dir: &Path, seed: Option<&str>, env: Option<&str>| {
        let mut args = vec![
            "gen-data",
            "--out",
            s(dir),
            "--sources",
            "2",
            "--seconds",
            "0.1",
            "--mixtures",
            "2",
        ];
        if let Some(seed) = seed {
            args.extend(["--seed", seed]);
        }
        ok(sepformer_env(&args, env));
    };
    run(dirs[0].path(), Some("9"), None);
    run(dirs[1].path(), Some("9"), None);
    run(dirs[2].path(), None, Some("9"));
    run(dirs[3].path(), Some("9"), Some("5"));
    let bytes = |d: &Path| {
        wav_files(d)
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    let reference = bytes(dirs[0].path());
    assert_eq!(reference.len(), 2 + 2 * 3);
    for d in &dirs[1..] {
        assert_eq!(bytes(d.path()), reference);
    }
    let other = tempfile::tempdir().unwrap();
    run(other.path(), Some("10"), None);
    assert_ne!(bytes(other.path()), reference);
}

#[test]
fn gen_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    failure(
        sepformer(&[
            "gen-data",
            "--out",
            s(dir.path()),
            "--sources",
            "0",
            "--seconds",
            "1",
        ]),
        "usage",
    );
    failure(
        sepformer_env(
            &[
                "gen-data",
                "--out",
                s(dir.path()),
                "--sources",
                "1",
                "--seconds",
                "1",
            ],
            Some("x"),
        ),
        "usage",
    );
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    failure(
        sepformer(&[
            "gen-data",
            "--out",
            s(&blocker.join("sub")),
            "--sources",
            "1",
            "--seconds",
            "0.1",
        ]),
        "io",
    );
}

#[test]
fn train_reports_configuration_problems() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cfg");
    let err = failure(
        sepformer(&[
            "train",
            "--config",
            s(&missing),
            "--data",
            ".",
            "--out",
            "x",
        ]),
        "io",
    );
    assert!(err.contains("missing.cfg"));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "learning_rate = 1\n").unwrap();
    let err = failure(
        sepformer(&["train", "--config", s(&bad), "--data", ".", "--out", "x"]),
        "config",
    );
    assert!(err.contains("learning_rate"));
}

#[test]
fn tiny_training_separation_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &["--mixtures", "6", "--valid", "2"]);
    let tiny = configs().join("tiny.cfg");
    for (mode, extra) in [("fixed", None), ("dm", Some("--dm"))] {
        let out = dir.path().join(mode);
        let mut args = vec![
            "train",
            "--config",
            s(&tiny),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ];
        args.extend(extra);
        ok(sepformer(&args));
        assert!(out.join("best.ckpt").exists());
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
    }
    let model = dir.path().join("fixed/best.ckpt");
    let input = data.join("valid/valid0_mix.wav");
    let prefix = dir.path().join("est");
    let printed = ok(sepformer(&[
        "separate",
        "--model",
        s(&model),
        "--in",
        s(&input),
        "--out-prefix",
        s(&prefix),
    ]));
    assert_eq!(printed.lines().count(), 2);
    let first: Vec<Vec<u8>> = (1..=2)
        .map(|k| std::fs::read(dir.path().join(format!("est_{k}.wav"))).unwrap())
        .collect();
    let len = read_wav(&input).unwrap().len();
    for k in 1..=2 {
        assert_eq!(
            read_wav(&dir.path().join(format!("est_{k}.wav")))
                .unwrap()
                .len(),
            len
        );
    }
    assert!(!dir.path().join("est_3.wav").exists());
    ok(sepformer(&[
        "separate",
        "--model",
        s(&model),
        "--in",
        s(&input),
        "--out-prefix",
        s(&prefix),
    ]));
    let second: Vec<Vec<u8>> = (1..=2)
        .map(|k| std::fs::read(dir.path().join(format!("est_{k}.wav"))).unwrap())
        .collect();
    assert_eq!(first, second);

    let csv = ok(sepformer(&[
        "eval",
        "--model",
        s(&model),
        "--manifest",
        s(&data.join("valid.tsv")),
    ]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,si_snri_db");
    assert_eq!(lines.len(), 4);
    let values: Vec<f64> = lines[1..3]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean: f64 = lines[3].strip_prefix("mean,").unwrap().parse().unwrap();
    assert!((mean - (values[0] + values[1]) / 2.0).abs() < 1e-5);
}

#[test]
fn separate_and_eval_reject_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, &["--mixtures", "2", "--valid", "1"]);
    let out = dir.path().join("run");
    ok(sepformer(&[
        "train",
        "--config",
        s(&configs().join("tiny.cfg")),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]));
    let model = out.join("best.ckpt");
    let wide = dir.path().join("wide.wav");
    write_wav(&wide, &AudioSignal::new(vec![0.1; 4000], 16000)).unwrap();
    let err = failure(
        sepformer(&[
            "separate",
            "--model",
            s(&model),
            "--in",
            s(&wide),
            "--out-prefix",
            "x",
        ]),
        "data",
    );
    assert!(err.contains("16000"));
    let short = dir.path().join("short.wav");
    write_wav(&short, &AudioSignal::new(vec![0.1; 5], 8000)).unwrap();
    failure(
        sepformer(&[
            "separate",
            "--model",
            s(&model),
            "--in",
            s(&short),
            "--out-prefix",
            "x",
        ]),
        "input-too-short",
    );
    let three = dir.path().join("three.tsv");
    std::fs::write(
        &three,
        format!("m\t{0}\t{0}\t{0}\n", s(&data.join("sources/src0.wav"))),
    )
    .unwrap();
    failure(
        sepformer(&["eval", "--model", s(&model), "--manifest", s(&three)]),
        "data",
    );
    let text = dir.path().join("text.wav");
    std::fs::write(&text, "not audio").unwrap();
    failure(
        sepformer(&[
            "separate",
            "--model",
            s(&model),
            "--in",
            s(&text),
            "--out-prefix",
            "x",
        ]),
        "format",
    );
}

fn inspect_total(config_text: &str) -> (usize, usize) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cfg");
    std::fs::write(&path, config_text).unwrap();
    let text = ok(sepformer(&["inspect", "--config", s(&path)]));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("component,params"));
    let rows: Vec<(String, usize)> = lines
        .map(|l| {
            let (name, n) = l.split_once(',').unwrap();
            (name.to_string(), n.parse().unwrap())
        })
        .collect();
    let (last, parts) = rows.split_last().unwrap();
    assert_eq!(last.0, "total");
    (last.1, parts.iter().map(|(_, n)| n).sum())
}

#[test]
fn inspect_counts_parameters() {
    let full = std::fs::read_to_string(configs().join("full.cfg")).unwrap();
    let (total, parts) = inspect_total(&full);
    assert_eq!(total, parts);
    assert!((23_000_000..=29_000_000).contains(&total), "{total}");
    let (deeper, _) = inspect_total(&format!("{full}\nnum_blocks = 3\n"));
    assert!(deeper > total);
}

#[test]
fn bench_emits_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let tiny = configs().join("tiny.cfg");
    let printed = ok(sepformer(&[
        "bench",
        "--config",
        s(&tiny),
        "--strides",
        "4,8",
        "--seconds",
        "0.1,0.2",
        "--out",
        s(&csv),
    ]));
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), printed);
    let lines: Vec<&str> = printed.lines().collect();
    assert_eq!(lines[0], "seconds,stride,forward_ms,peak_bytes");
    assert_eq!(lines.len(), 1 + 4);
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 4);
        assert!(fields[2].parse::<f64>().unwrap() > 0.0);
        assert!(fields[3].parse::<usize>().unwrap() > 0);
    }
    failure(
        sepformer(&["bench", "--config", s(&tiny), "--repeats", "2"]),
        "usage",
    );
}
