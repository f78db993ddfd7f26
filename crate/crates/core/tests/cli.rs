use std::path::Path;
use std::process::Command;

use deltalogit::cli::run;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deltalogit"))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn ok(args: &[&str]) {
    let mut argv = vec!["deltalogit"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv), 0, "{args:?}");
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["train-value", "transfer", "map-vocab", "bench"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(bin().args(["train-value", "--help"]).output().unwrap().status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one_and_name_the_key() {
    let out = bin().args(["corpus-gen", "--kind", "plain", "--size", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("corpus_gen.grammar"), "{err}");
    assert_eq!(bin().arg("no-such-command").output().unwrap().status.code(), Some(1));
    assert_eq!(
        bin().args(["train-value", "--lambda", "abc"]).output().unwrap().status.code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let code = run([
        "deltalogit", "overlap", "--map", &p(dir.path(), "missing.bin"),
        "--base-tokenizer", "x", "--value-tokenizer", "y", "--corpus", "z",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn config_file_supplies_keys_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[corpus_gen]\nkind = \"plain\"\ngrammar = \"toy\"\nsize = 7\nout = {:?}\n",
            p(d, "a.txt")
        ),
    )
    .unwrap();
    ok(&["corpus-gen", "--config", &cfg]);
    ok(&["corpus-gen", "--config", &cfg, "--size", "3", "--out", &p(d, "b.txt")]);
    let a = deltalogit::corpus::Corpus::load(d.join("a.txt")).unwrap();
    let b = deltalogit::corpus::Corpus::load(d.join("b.txt")).unwrap();
    assert_eq!((a.len(), b.len()), (7, 3));
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (plain, demos, tok, tok_x) =
        (p(d, "plain.txt"), p(d, "demos.txt"), p(d, "tok.json"), p(d, "tok_x.json"));
    ok(&["corpus-gen", "--kind", "plain", "--grammar", "toy", "--size", "300", "--seed", "1", "--out", &plain]);
    ok(&["corpus-gen", "--kind", "demonstrations", "--grammar", "reverse", "--size", "200", "--seed", "2", "--out", &demos]);
    ok(&["tokenizer-train", "--corpus", &format!("{plain},{demos}"), "--vocab-size", "80", "--out", &tok]);
    ok(&["tokenizer-train", "--corpus", &plain, "--vocab-size", "70", "--seed", "3", "--out", &tok_x]);

    let cfg = p(d, "run.toml");
    std::fs::write(&cfg, "[training]\nbatch_size = 8\nlearning_rate = 0.003\n").unwrap();
    let (a, b) = (p(d, "a.ckpt"), p(d, "b.ckpt"));
    for (out, preset, seed) in [(&a, "base-s", "1"), (&b, "value-xs", "2")] {
        ok(&["pretrain", "--config", &cfg, "--tokenizer", &tok, "--corpus", &plain,
             "--preset", preset, "--seed", seed, "--steps", "4", "--out", out]);
    }

    let value = p(d, "value.ckpt");
    let log = p(d, "train.log");
    ok(&["train-value", "--config", &cfg, "--tokenizer", &tok, "--curriculum", &format!("{a},{b}"),
         "--data", &demos, "--scheme", "cascade+", "--lambda", "0.5", "--steps", "6",
         "--out", &value, "--log", &log]);
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 7);
    assert!(log_text.lines().nth(4).unwrap().contains("base=b"));

    let probe = p(d, "probe.ckpt");
    ok(&["train-value", "--config", &cfg, "--tokenizer", &tok, "--base", &a, "--data", &demos,
         "--scheme", "probe", "--steps", "3", "--out", &probe]);

    let report = p(d, "transfer.txt");
    ok(&["transfer", "--tokenizer", &tok, "--value", &value, "--scheme", "cascade+",
         "--bases", &format!("{a},{b}"), "--data", &demos, "--tasks", "4",
         "--max-new-tokens", "4", "--out", &report]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("deltalogit-report v1"));
    assert!(text.contains("# [transfer]"));

    ok(&["generate", "--tokenizer", &tok, "--base", &b, "--value", &value, "--scheme", "cascade+",
         "--prompt", "R: 1 2 3", "--max-new-tokens", "4"]);
    ok(&["eval", "--tokenizer", &tok, "--base", &a, "--value", &probe, "--scheme", "probe",
         "--data", &demos, "--tasks", "3", "--max-new-tokens", "3"]);

    let map = p(d, "map.bin");
    ok(&["map-vocab", "--base-tokenizer", &tok_x, "--value-tokenizer", &tok, "--corpus", &plain,
         "--top-k", "4", "--out", &map, "--text"]);
    assert!(d.join("map.txt").exists());
    ok(&["overlap", "--map", &map, "--base-tokenizer", &tok_x, "--value-tokenizer", &tok, "--corpus", &demos]);

    ok(&["bench", "--lengths", "4,8", "--runs", "1"]);
}
