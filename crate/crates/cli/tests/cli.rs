use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glimpse::evalviz::read_pgm;
use tempfile::TempDir;

fn glimpse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glimpse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, seed: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--seed", seed, "--count", "100", "--out", path(&out)];
    args.extend_from_slice(extra);
    let o = glimpse(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

/// Trains a very small model for `epochs` epochs; returns the output dir.
fn quick_train(dir: &Path, data: &Path, mode: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("run_{mode}"));
    let mut args = vec![
        "train",
        "--seed",
        "3",
        "--data",
        path(data),
        "--out-dir",
        path(&out),
        "--mode",
        mode,
        "--embed",
        "4",
        "--hidden",
        "6",
        "--attn",
        "4",
        "--batch-size",
        "16",
        "--limit",
        "32",
    ];
    args.extend_from_slice(extra);
    let o = glimpse(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gen_data_is_deterministic_and_tagged() {
    let dir = TempDir::new().unwrap();
    let a = gen(dir.path(), "a.bin", "5", &[]);
    let b = gen(dir.path(), "b.bin", "5", &[]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(&bytes[..8], b"ATTNDATA");
    assert!(dir.path().join("a.bin.vocab").exists());
}

#[test]
fn gen_data_reports_counts_and_lengths() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d.bin");
    let o = glimpse(&["gen-data", "--seed", "1", "--count", "100", "--out", path(&out)]);
    let text = stdout(&o);
    assert!(text.contains("100 records (80 train / 10 val / 10 test)"), "{text}");
    assert!(text.contains("histogram"));
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.bin");
    let o = glimpse(&["gen-data", "--seed", "1", "--grid-side", "0", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid scene spec"));
    assert!(!out.exists());
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.bin");
    let o = glimpse(&["gen-data", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"));
    assert_eq!(glimpse(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn unreadable_dataset_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let bogus = dir.path().join("bogus.bin");
    fs::write(&bogus, b"NOTADATASET").unwrap();
    let o = glimpse(&[
        "train",
        "--seed",
        "1",
        "--data",
        path(&bogus),
        "--out-dir",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn patience_zero_trains_one_epoch() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let run = quick_train(dir.path(), &data, "soft", &["--patience", "0", "--epochs", "10"]);
    assert!(run.join("checkpoint.ckpt").exists());
    let log = fs::read_to_string(run.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.starts_with("epoch=1 mode=soft"));
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("patience = 0"), "{config}");
}

#[test]
fn hard_training_logs_the_baseline() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let run = quick_train(dir.path(), &data, "hard", &["--epochs", "2", "--patience", "5"]);
    let log = fs::read_to_string(run.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        assert!(line.contains("mode=hard"));
        assert!(!line.contains("baseline=none"), "{line}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[train]\nmax_epochs = 4\npatience = 3\n\n[train.soft]\nlambda_penalty = 0.25\n",
    )
    .unwrap();
    let run = quick_train(dir.path(), &data, "soft", &["--config", path(&cfg), "--epochs", "1"]);
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("max_epochs = 1"), "{echoed}");
    assert!(echoed.contains("patience = 3"));
    assert!(echoed.contains("lambda_penalty = 0.25"));
    assert!(echoed.contains("seed = 3"));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nmax_epochs = \"many\"\n").unwrap();
    let o = glimpse(&["train", "--seed", "1", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let out = dir.path().join("boom");
    let o = glimpse(&[
        "train",
        "--seed",
        "1",
        "--data",
        path(&data),
        "--out-dir",
        path(&out),
        "--embed",
        "4",
        "--hidden",
        "6",
        "--attn",
        "4",
        "--limit",
        "32",
        "--epochs",
        "3",
        "--lr",
        "1e300",
        "--optimizer",
        "rmsprop",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("non-finite") && err.contains("parameter block"), "{err}");
}

#[test]
fn beam_of_one_matches_greedy() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let run = quick_train(dir.path(), &data, "soft", &["--epochs", "2"]);
    let ckpt = run.join("checkpoint.ckpt");
    let caption = |strategy: &[&str]| {
        let mut args = vec![
            "caption",
            "--seed",
            "1",
            "--checkpoint",
            path(&ckpt),
            "--data",
            path(&data),
        ];
        args.extend_from_slice(strategy);
        let o = glimpse(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let greedy = caption(&["--strategy", "greedy"]);
    assert_eq!(greedy.lines().count(), 10);
    assert_eq!(greedy, caption(&["--strategy", "beam", "--width", "1"]));
}

#[test]
fn sampled_hard_captions_reproduce_with_a_seed() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let run = quick_train(dir.path(), &data, "hard", &["--epochs", "1"]);
    let ckpt = run.join("checkpoint.ckpt");
    let caption = |seed: &str| {
        let o = glimpse(&[
            "caption",
            "--seed",
            seed,
            "--checkpoint",
            path(&ckpt),
            "--data",
            path(&data),
            "--mode",
            "hard",
            "--strategy",
            "sample",
            "--sample-attention",
            "--split",
            "all",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    assert_eq!(caption("4"), caption("4"));
}

#[test]
fn viz_writes_grid_sized_graymaps() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let run = quick_train(dir.path(), &data, "soft", &["--epochs", "1"]);
    let viz = dir.path().join("viz");
    let o = glimpse(&[
        "caption",
        "--seed",
        "1",
        "--checkpoint",
        path(&run.join("checkpoint.ckpt")),
        "--data",
        path(&data),
        "--limit",
        "2",
        "--viz",
        path(&viz),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifests: Vec<_> = fs::read_dir(&viz)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with("_manifest.tsv"))
        .collect();
    assert_eq!(manifests.len(), 2);
    for m in manifests {
        let text = fs::read_to_string(&m).unwrap();
        assert!(text.lines().count() >= 1);
        for row in text.lines() {
            let file = row.split('\t').nth(2).unwrap();
            let img = read_pgm(&viz.join(file)).unwrap();
            assert_eq!((img.width, img.height), (64, 64));
        }
    }
}

#[test]
fn mismatched_checkpoint_is_reported() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let other = gen(dir.path(), "o.bin", "2", &["--colors", "red,blue"]);
    let run = quick_train(dir.path(), &data, "soft", &["--epochs", "1"]);
    let o = glimpse(&[
        "evaluate",
        "--seed",
        "1",
        "--checkpoint",
        path(&run.join("checkpoint.ckpt")),
        "--data",
        path(&other),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint expects vocabulary"), "{}", stderr(&o));
}

#[test]
fn evaluate_reports_scores() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.bin", "2", &[]);
    let run = quick_train(dir.path(), &data, "soft", &["--epochs", "1"]);
    let o = glimpse(&[
        "evaluate",
        "--seed",
        "1",
        "--checkpoint",
        path(&run.join("checkpoint.ckpt")),
        "--data",
        path(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["records=10", "bleu1=", "bleu4=", "alignment="] {
        assert!(text.contains(key), "{text}");
    }
}

#[test]
fn verify_fast_passes() {
    let o = glimpse(&["verify", "--level", "fast"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("7 checks, 0 failed"));
}

#[test]
fn injected_fault_fails_verification() {
    let o = glimpse(&["verify", "--inject-fault", "gradient"]);
    assert_ne!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("FAIL  soft_gradient"), "{text}");
    assert!(stderr(&o).contains("soft_gradient"));
}
