use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn cspc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cspc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_corpus(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("corpus");
    let mut args = vec!["gen-corpus", "--output", p(&out), "--items-per-cell", "2"];
    args.extend_from_slice(extra);
    let o = cspc(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = cspc(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn short_flags_are_not_accepted() {
    let o = cspc(&["gen-corpus", "-o", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_corpus_writes_echo_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), &[]);
    for f in [
        "manifest.tsv",
        "vocab.txt",
        "emotions.txt",
        "config.toml",
        "run_manifest.json",
    ] {
        assert!(corpus.join(f).exists(), "{f} missing");
    }
    let echo = fs::read_to_string(corpus.join("config.toml")).unwrap();
    assert!(echo.contains("command = \"gen-corpus\""));
    assert!(echo.contains("seed = 13"));
    assert!(echo.contains("items_per_cell = 2"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(corpus.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["details"]["items"], 2 * 7 + 2 * 7);
}

#[test]
fn output_is_not_clobbered_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), &[]);
    let before = fs::read(corpus.join("run_manifest.json")).unwrap();
    let o = cspc(&[
        "gen-corpus",
        "--output",
        p(&corpus),
        "--items-per-cell",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let line = stderr(&o);
    assert!(line.starts_with("error: output exists"), "{line}");
    assert_eq!(line.trim_end().lines().count(), 1);

    let o = cspc(&[
        "gen-corpus",
        "--output",
        p(&corpus),
        "--items-per-cell",
        "2",
        "--overwrite",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(corpus.join("run_manifest.json")).unwrap(), before);
}

#[test]
fn overwrite_refuses_foreign_directories() {
    let dir = tempfile::tempdir().unwrap();
    let foreign = dir.path().join("mine");
    fs::create_dir_all(&foreign).unwrap();
    fs::write(foreign.join("notes.txt"), "keep me").unwrap();
    let o = cspc(&["gen-corpus", "--output", p(&foreign), "--overwrite"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(foreign.join("notes.txt").exists());
}

#[test]
fn zero_step_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), &[]);
    let run = dir.path().join("run");
    let o = cspc(&[
        "train",
        "--corpus",
        p(&corpus),
        "--output",
        p(&run),
        "--max-steps",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("checkpoint.ckpt").exists());
    let log = fs::read_to_string(run.join("loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn synthesize_rejects_unknown_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), &[]);
    let run = dir.path().join("run");
    let o = cspc(&[
        "train",
        "--corpus",
        p(&corpus),
        "--output",
        p(&run),
        "--max-steps",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = run.join("checkpoint.ckpt");
    let reference = corpus.join("mels/s0_e1_0000.mel");
    let o = cspc(&[
        "synthesize",
        "--checkpoint",
        p(&ckpt),
        "--text",
        "p01 p02 p03",
        "--reference",
        p(&reference),
        "--speaker-id",
        "5",
        "--output",
        p(&dir.path().join("syn")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error: unknown speaker"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn missing_required_key_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = cspc(&["train", "--output", p(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing required key corpus"));
}

#[test]
fn config_file_keys_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "items_per_cel = 3\n").unwrap();
    let o = cspc(&[
        "gen-corpus",
        "--config",
        p(&cfg),
        "--output",
        p(&dir.path().join("c")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key items_per_cel"));

    fs::write(&cfg, "[nested]\nx = 1\n").unwrap();
    let o = cspc(&[
        "gen-corpus",
        "--config",
        p(&cfg),
        "--output",
        p(&dir.path().join("c")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_echo_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), &[]);
    let a = dir.path().join("a");
    let o = cspc(&[
        "train",
        "--corpus",
        p(&corpus),
        "--output",
        p(&a),
        "--max-steps",
        "2",
        "--batch-size",
        "4",
        "--seed",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = dir.path().join("b");
    let o = cspc(&[
        "train",
        "--config",
        p(&a.join("config.toml")),
        "--output",
        p(&b),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["loss_log.tsv", "checkpoint.ckpt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn extract_aif_matches_corpus_features() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), &[]);
    let out = dir.path().join("aif");
    let o = cspc(&[
        "extract-aif",
        "--provider",
        "stub",
        "--input",
        p(&corpus.join("mels")),
        "--output",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let id = "s0_e3_0001.aif";
    assert_eq!(
        fs::read(out.join(id)).unwrap(),
        fs::read(corpus.join("aif").join(id)).unwrap()
    );

    let o = cspc(&[
        "extract-aif",
        "--provider",
        "whisper",
        "--input",
        p(&corpus.join("mels")),
        "--output",
        p(&dir.path().join("other")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("aif unavailable"));
}

#[test]
fn full_pipeline_smoke() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train_corpus = dir.path().join("train_corpus");
    let o = cspc(&["gen-corpus", "--output", p(&train_corpus)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval_corpus = dir.path().join("eval_corpus");
    let o = cspc(&[
        "gen-corpus",
        "--output",
        p(&eval_corpus),
        "--seed",
        "1013",
        "--items-per-cell",
        "4",
        "--full-factorial",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let run = dir.path().join("run");
    let o = cspc(&[
        "train",
        "--corpus",
        p(&train_corpus),
        "--output",
        p(&run),
        "--max-steps",
        "100",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 101);

    let syn = dir.path().join("syn");
    let o = cspc(&[
        "synthesize",
        "--checkpoint",
        p(&run.join("checkpoint.ckpt")),
        "--text",
        "p01 p05 p09 p02",
        "--reference",
        p(&train_corpus.join("mels/s0_e2_0000.mel")),
        "--speaker-id",
        "1",
        "--max-frames",
        "60",
        "--wav",
        "--output",
        p(&syn),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(syn.join("synthesis.mel").exists());
    assert!(syn.join("synthesis.wav").exists());

    let report = dir.path().join("report");
    let o = cspc(&[
        "eval-probes",
        "--checkpoints",
        p(&run.join("checkpoint.ckpt")),
        "--corpus",
        p(&eval_corpus),
        "--output",
        p(&report),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "report.tsv",
        "predictions.tsv",
        "probes.svg",
        "mel_error.svg",
    ] {
        assert!(report.join(f).exists(), "{f} missing");
    }
    let table = fs::read_to_string(report.join("report.tsv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("full\t"));
    assert!(started.elapsed() < Duration::from_secs(600));
}
