//! End-to-end command behaviors: artifacts, exit codes, output formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_embercast"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

static DIR_SEQ: AtomicUsize = AtomicUsize::new(0);

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "embercast-test-{}-{tag}-{}",
        std::process::id(),
        DIR_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn toy_train_args(out_dir: &Path) -> Vec<String> {
    [
        "train",
        "--scheme",
        "T1+L1",
        "--data",
        fixture("posts.tsv").to_str().unwrap(),
        "--glove",
        fixture("glove.txt").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--hidden",
        "6",
        "--dense",
        "8",
        "--epochs",
        "3",
        "--seed",
        "5",
        "--max-len",
        "10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn train_writes_artifacts_and_summary() {
    let out_dir = scratch_dir("train");
    let output = bin().args(toy_train_args(&out_dir)).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let summary = stdout(&output);
    assert!(summary.starts_with("scheme=T1+L1 test_accuracy="), "summary: {summary}");
    for artifact in ["model.ckpt", "train_report.txt", "run_config.txt"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    // no stray temp files
    assert!(fs::read_dir(&out_dir)
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn meta_scheme_requires_all_sources() {
    let out_dir = scratch_dir("meta-missing");
    let output = bin()
        .args([
            "train",
            "--scheme",
            "M(T1+T2+T3)+L1",
            "--data",
            fixture("posts.tsv").to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--fasttext",
            fixture("fasttext.txt").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("crisis"), "stderr: {}", stderr(&output));
}

#[test]
fn bad_label_exits_2_with_line_number() {
    let dir = scratch_dir("badlabel");
    let data = dir.join("bad.tsv");
    fs::write(
        &data,
        "tweet_id\ttweet_text\tlabel\n1\tflood\tinformative\n2\thm\tdont_know\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let output = bin()
        .args([
            "train",
            "--scheme",
            "T1+L1",
            "--data",
            data.to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err = stderr(&output);
    assert!(err.contains("line 3") && err.contains("dont_know"), "stderr: {err}");
}

#[test]
fn unknown_scheme_exits_1() {
    let output = bin().args(["train", "--scheme", "T9+L1", "--data", "x.tsv"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn train_rejects_ensemble_scheme() {
    let output = bin()
        .args([
            "train",
            "--scheme",
            "E({T1+T2+T3}+L1)",
            "--data",
            fixture("posts.tsv").to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--fasttext",
            fixture("fasttext.txt").to_str().unwrap(),
            "--crisis",
            fixture("crisis.txt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("ensemble"));
}

#[test]
fn embeddings_info_reports_counts() {
    let output =
        bin().args(["embeddings", "info", fixture("glove.txt").to_str().unwrap()]).output().unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("name = glove"));
    assert!(text.contains("n = 45"));
    assert!(text.contains("dim = 8"));
    assert!(text.contains("duplicates = 0"));
}

#[test]
fn data_stats_reports_classes() {
    let output =
        bin().args(["data", "stats", fixture("posts.tsv").to_str().unwrap()]).output().unwrap();
    assert!(output.status.success());
    let text = stdout(&output);
    assert!(text.contains("informative = 100"), "got: {text}");
    assert!(text.contains("not_informative = 100"), "got: {text}");
}

#[test]
fn config_file_with_flag_override() {
    let dir = scratch_dir("config");
    let out_dir = dir.join("out");
    let config_path = dir.join("run.conf");
    fs::write(
        &config_path,
        format!(
            "# toy config\nscheme = T1+L1\ndata = {}\nglove = {}\nout = {}\nhidden = 6\ndense = 8\nepochs = 2\nseed = 1\nmax_len = 10\n",
            fixture("posts.tsv").display(),
            fixture("glove.txt").display(),
            out_dir.display(),
        ),
    )
    .unwrap();
    let output = bin()
        .args(["train", "--config", config_path.to_str().unwrap(), "--seed", "42"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let echo = fs::read_to_string(out_dir.join("run_config.txt")).unwrap();
    assert!(echo.contains("seed = 42"), "flag must beat config file: {echo}");
    assert!(echo.contains("hidden = 6"));
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = scratch_dir("badkey");
    let config_path = dir.join("run.conf");
    fs::write(&config_path, "schem = T1+L1\n").unwrap();
    let output =
        bin().args(["train", "--config", config_path.to_str().unwrap()]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("schem"));
}

#[test]
fn env_var_names_default_config() {
    let dir = scratch_dir("envconfig");
    let out_dir = dir.join("out");
    let config_path = dir.join("env.conf");
    fs::write(
        &config_path,
        format!(
            "scheme = T1+L2\ndata = {}\nglove = {}\nout = {}\nhidden = 5\ndense = 6\nepochs = 2\nmax_len = 8\n",
            fixture("posts.tsv").display(),
            fixture("glove.txt").display(),
            out_dir.display(),
        ),
    )
    .unwrap();
    let output = bin()
        .env("EMBERCAST_CONFIG", config_path.to_str().unwrap())
        .args(["train"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).starts_with("scheme=T1+L2"));
}

fn train_toy_checkpoint(tag: &str) -> PathBuf {
    let out_dir = scratch_dir(tag);
    let output = bin().args(toy_train_args(&out_dir)).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    out_dir
}

#[test]
fn predict_single_member_manifest_matches_checkpoint() {
    let out_dir = train_toy_checkpoint("predict-onehot");
    let ckpt = out_dir.join("model.ckpt");
    let manifest = out_dir.join("solo.manifest");
    fs::write(&manifest, "embercast ensemble v1\nmember glove model.ckpt 1.0\nend\n").unwrap();

    let input = out_dir.join("inputs.txt");
    fs::write(&input, "flood rescue underway\nlol great game tonight\nRT @x #storm damage\n").unwrap();

    let direct = bin()
        .args([
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(direct.status.success(), "stderr: {}", stderr(&direct));

    let via_manifest = bin()
        .args([
            "predict",
            "--manifest",
            manifest.to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(via_manifest.status.success(), "stderr: {}", stderr(&via_manifest));
    assert_eq!(stdout(&direct), stdout(&via_manifest));

    let lines: Vec<String> = stdout(&direct).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 3, "line: {line}");
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[1] == "informative" || fields[1] == "not_informative");
        let p: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn predict_empty_input_is_quiet_success() {
    let out_dir = train_toy_checkpoint("predict-empty");
    let input = out_dir.join("empty.txt");
    fs::write(&input, "").unwrap();
    let output = bin()
        .args([
            "predict",
            "--checkpoint",
            out_dir.join("model.ckpt").to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(stdout(&output).is_empty());
}

#[test]
fn predict_handles_fully_oov_posts() {
    let out_dir = train_toy_checkpoint("predict-oov");
    let output = bin()
        .args([
            "predict",
            "--checkpoint",
            out_dir.join("model.ckpt").to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--text",
            "zzz qqq xyzzy",
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let text = stdout(&output);
    let fields: Vec<&str> = text.trim_end().split('\t').collect();
    assert_eq!(fields[0], "text");
    let p: f64 = fields[2].parse().unwrap();
    assert!(p.is_finite());
}

#[test]
fn predict_reads_tsv_inputs() {
    let out_dir = train_toy_checkpoint("predict-tsv");
    let input = out_dir.join("in.tsv");
    fs::write(&input, "tweet_id\ttweet_text\tlabel\nid9\tflood water rising\tinformative\n").unwrap();
    let output = bin()
        .args([
            "predict",
            "--checkpoint",
            out_dir.join("model.ckpt").to_str().unwrap(),
            "--glove",
            fixture("glove.txt").to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    assert!(stdout(&output).starts_with("id9\t"));
}

#[test]
fn divergent_training_exits_3() {
    let dir = scratch_dir("diverge");
    // vectors near the f64 maximum overflow the first matmul
    let glove = dir.join("huge.txt");
    let mut text = String::new();
    for word in ["flood", "water", "fire", "storm", "game", "love", "time", "people"] {
        text.push_str(word);
        for _ in 0..8 {
            text.push_str(" 1e308");
        }
        text.push('\n');
    }
    fs::write(&glove, text).unwrap();
    let out_dir = dir.join("out");
    let output = bin()
        .args([
            "train",
            "--scheme",
            "T1+L1",
            "--data",
            fixture("posts.tsv").to_str().unwrap(),
            "--glove",
            glove.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--hidden",
            "6",
            "--dense",
            "8",
            "--epochs",
            "2",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "stderr: {}", stderr(&output));
    // failed runs leave no artifacts behind
    assert!(!out_dir.join("model.ckpt").exists());
}

fn toy_ensemble_args(out_dir: &Path, weights: &str) -> Vec<String> {
    [
        "ensemble",
        "--scheme",
        "E({T1+T2+T3}+L2)",
        "--data",
        fixture("posts.tsv").to_str().unwrap(),
        "--glove",
        fixture("glove.txt").to_str().unwrap(),
        "--fasttext",
        fixture("fasttext.txt").to_str().unwrap(),
        "--crisis",
        fixture("crisis.txt").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--hidden",
        "5",
        "--dense",
        "6",
        "--epochs",
        "2",
        "--seed",
        "3",
        "--max-len",
        "8",
        "--weights",
        weights,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn ensemble_manifest_carries_mode_weights() {
    let out_dir = scratch_dir("manifest-fixed");
    let output = bin().args(toy_ensemble_args(&out_dir, "paper_fixed")).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let manifest = fs::read_to_string(out_dir.join("ensemble.manifest")).unwrap();
    assert!(manifest.contains("member glove glove.ckpt 0.4"), "{manifest}");
    assert!(manifest.contains("member crisis crisis.ckpt 0.2"), "{manifest}");
    assert!(manifest.contains("member fasttext fasttext.ckpt 0.4"), "{manifest}");

    let out_dir = scratch_dir("manifest-uniform");
    let output = bin().args(toy_ensemble_args(&out_dir, "uniform")).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let manifest = fs::read_to_string(out_dir.join("ensemble.manifest")).unwrap();
    let third = format!("{:?}", 1.0 / 3.0);
    for label in ["glove", "crisis", "fasttext"] {
        assert!(manifest.contains(&format!("member {label} {label}.ckpt {third}")), "{manifest}");
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let out_dir = scratch_dir("echo-1");
    let output = bin().args(toy_train_args(&out_dir)).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr(&output));
    let first_summary = stdout(&output);

    // replay purely from the echoed config, only redirecting the output dir
    let out_dir2 = scratch_dir("echo-2");
    let echo = out_dir.join("run_config.txt");
    let replay = bin()
        .args([
            "train",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            out_dir2.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(replay.status.success(), "stderr: {}", stderr(&replay));
    assert_eq!(first_summary, stdout(&replay));
    assert_eq!(
        fs::read(out_dir.join("model.ckpt")).unwrap(),
        fs::read(out_dir2.join("model.ckpt")).unwrap()
    );
}

#[test]
fn selftest_passes() {
    let output = bin().args(["selftest"]).output().unwrap();
    assert!(output.status.success(), "stdout: {}", stdout(&output));
    assert!(stdout(&output).contains("all checks passed"));
}
