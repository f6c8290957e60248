use std::ffi::OsStr;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "-s", "data.tokens=4000", "-s", "model.d_model=16", "-s", "model.n_heads=2", "-s", "model.d_ff=32", "-s",
    "model.n_layers=1", "-s", "train.batch_size=4",
];

fn card<S: AsRef<OsStr>>(dir: &Path, args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_card"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("card runs")
}

fn tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path, steps: &str) -> Output {
    let out = card(dir, &tiny(&["train", "-o", "run", "--steps", steps, "-s", "train.warmup_steps=0"]));
    assert!(out.status.success(), "{}", stderr(&out));
    out
}

#[test]
fn unknown_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["train", "-s", "model.widht=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model.widht"), "{}", stderr(&out));
}

#[test]
fn bad_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["train", "-s", "train.peak_lr=fast"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.peak_lr"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(card(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(card(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["train", "--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for (key, _) in card_core::config::KEYS {
        assert!(text.contains(key), "help is missing {key}");
    }
    let lr = text.lines().find(|l| l.trim_start().starts_with("train.peak_lr")).unwrap();
    assert!(lr.trim_end().ends_with(']'), "{lr}");
    let nested = card(dir.path(), &["analyze", "mi", "--help"]);
    assert!(stdout(&nested).contains("corruption.tail_factor"));
}

#[test]
fn missing_checkpoint_explains_how_to_make_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["generate", "--checkpoint", "nope.ck"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("card train"), "{}", stderr(&out));
}

#[test]
fn zero_step_training_writes_checkpoints_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "0");
    for f in ["config.txt", "metrics.csv", "final.ck", "best.ck"] {
        assert!(dir.path().join("run").join(f).exists(), "missing {f}");
    }
    let snapshot = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(snapshot.contains("model.d_model = 16"), "{snapshot}");
    assert!(snapshot.contains("train.steps = 0"), "{snapshot}");
}

#[test]
fn snapshot_reloads_as_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["inspect-mask", "-o", "a", "-s", "corruption.tail_factor=3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = card(dir.path(), &["inspect-mask", "-o", "b", "-c", "a/config.txt"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let a = std::fs::read_to_string(dir.path().join("a/config.txt")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/config.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn block_size_one_matches_autoregressive_decoding() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "20");
    let common = ["--checkpoint", "run/final.ck", "--prompt", "0120120", "-n", "20"];
    let mut k1 = vec!["generate", "-o", "g1", "--K", "1"];
    k1.extend_from_slice(&common);
    let mut arm = vec!["generate", "-o", "g2", "--arm"];
    arm.extend_from_slice(&common);
    let a = card(dir.path(), &k1);
    let b = card(dir.path(), &arm);
    assert!(a.status.success() && b.status.success(), "{}{}", stderr(&a), stderr(&b));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("0120120"));
}

#[test]
fn trace_has_one_line_per_block_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "5");
    let out = card(
        dir.path(),
        &["generate", "-o", "g", "--checkpoint", "run/final.ck", "--prompt", "01", "-n", "16", "--K", "4", "--trace", "t.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
}

#[test]
fn eval_ppl_writes_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny(dir.path(), "3");
    let out = card(dir.path(), &["eval-ppl", "-o", "e", "--checkpoint", "run/final.ck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap();
    assert!(csv.starts_with("split,sequences,tokens,measure,nll,ppl\n"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn inspect_mask_prints_window_and_bits() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["inspect-mask", "-o", "m", "--L", "8", "--t", "0.5", "--count", "3", "--scores"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("m/masks.txt")).unwrap();
    let heads: Vec<&str> = text.lines().filter(|l| l.starts_with("t=")).collect();
    assert_eq!(heads.len(), 3);
    for h in heads {
        assert!(h.starts_with("t=0.5 N=4 W=8 mask="), "{h}");
        let bits = h.rsplit('=').next().unwrap();
        assert_eq!(bits.len(), 8);
        assert_eq!(bits.chars().filter(|&c| c == '1').count(), 4);
    }
    assert!(text.contains("pos,mask,C,S,w"));
}

#[test]
fn complexity_check_agrees_with_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let out = card(dir.path(), &["analyze", "complexity", "-o", "c", "--L", "3,6", "--K", "3", "--check"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("c/complexity.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("3,3,3,7,"), "{csv}");
}
