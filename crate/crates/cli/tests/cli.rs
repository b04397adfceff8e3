use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rkm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rkm")).args(args).env("RUST_LOG", "warn").output().expect("spawn rkm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in:\n{out}"))
        .to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_flags() {
    let o = rkm(&["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in ["--variant", "--m", "--d", "--n", "--dilation", "--task", "--data", "--lr", "--epochs", "--batch", "--seed", "--checkpoint", "--out", "--config"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn unknown_variant_lists_the_choices() {
    let o = rkm(&["paramcount", "--variant", "qrnn", "--m", "3", "--d", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rkm-lstm") && err.contains("gated-cnn"), "{err}");
}

#[test]
fn bad_flag_exits_two() {
    assert_eq!(rkm(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(rkm(&["train", "--d", "many"]).status.code(), Some(2));
}

#[test]
fn paramcount_examples() {
    for (v, n, want) in [("rkm-lstm", "1", "720000"), ("lstm", "1", "720000"), ("rkm-cifg", "3", "1080000"), ("cnn", "3", "270000")] {
        let o = rkm(&["paramcount", "--variant", v, "--m", "300", "--d", "300", "--n", n]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).trim(), want, "{v} n={n}");
    }
}

#[test]
fn equiv_passes() {
    let o = rkm(&["equiv", "--seeds", "10"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

#[test]
fn gradcheck_passes() {
    let o = rkm(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    // 7 variants x 2 configs x 2 window lengths, plus 3 wavelet shapes
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("PASS")).count(), 31);
}

#[test]
fn impulse_ratio_is_one() {
    let o = rkm(&["impulse", "--sigma-i", "0.5", "--sigma-f", "0.5", "--lags", "10"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 11);
    for r in rows {
        let ratio: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!((ratio - 1.0).abs() < 1e-10, "{r}");
    }
    assert_eq!(rkm(&["impulse", "--variant", "rkm-lstm"]).status.code(), Some(1));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("recall.csv");
    let o = rkm(&["gen", "--task", "delayed-recall", "--lag", "2", "--length", "6", "--count", "200", "--out", path(&csv)]);
    assert!(o.status.success());
    assert!(csv.with_extension("csv.vocab").exists());

    let out = dir.path().join("run");
    let o = rkm(&["train", "--data", path(&csv), "--d", "8", "--m", "4", "--epochs", "2", "--batch", "16", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "task"), "tokens");
    assert_eq!(value(&text, "epochs"), "2");
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let ckpt = out.join("model.rkm");
    let a = rkm(&["eval", "--checkpoint", path(&ckpt), "--data", path(&csv)]);
    let b = rkm(&["eval", "--checkpoint", path(&ckpt), "--data", path(&csv), "--sequential"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(value(&stdout(&a), "examples"), "200");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nvariant=cnn\nn=3\nd=6\nm=4\nepochs=1\ncount=64\nval_count=32\nlength=8\nlag=3\n").unwrap();
    let o = rkm(&["train", "--config", path(&cfg), "--variant", "gated-cnn", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "variant"), "gated-cnn");
    // (nm)(2d) with n=3, m=4, d=6
    assert_eq!(value(&text, "params"), "144");

    fs::write(&cfg, "d 6\n").unwrap();
    assert_eq!(rkm(&["train", "--config", path(&cfg)]).status.code(), Some(2));
}

#[test]
fn language_model_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("tiny.txt");
    fs::write(&text, "the quick brown fox jumps over the lazy dog. ".repeat(40)).unwrap();
    let out = dir.path().join("lm");
    let o = rkm(&["train", "--data", path(&text), "--m", "8", "--d", "8", "--n", "2", "--epochs", "2", "--batch", "4", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = stdout(&o);
    assert_eq!(value(&t, "task"), "lm");
    let ppl: f64 = value(&t, "val_perplexity").parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    let e = rkm(&["eval", "--checkpoint", path(&out.join("model.rkm")), "--data", path(&text)]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let eval_ppl: f64 = value(&stdout(&e), "perplexity").parse().unwrap();
    assert!(eval_ppl.is_finite());

    fs::write(&text, "XYZ").unwrap();
    let bad = rkm(&["eval", "--checkpoint", path(&out.join("model.rkm")), "--data", path(&text)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.rkm");
    assert_eq!(rkm(&["eval", "--checkpoint", path(&missing)]).status.code(), Some(1));
    let junk = dir.path().join("junk.rkm");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(rkm(&["eval", "--checkpoint", path(&junk)]).status.code(), Some(1));
    assert_eq!(rkm(&["train", "--task", "tokens", "--out", path(dir.path())]).status.code(), Some(1));
    assert_eq!(rkm(&["train", "--epochs", "0", "--out", path(dir.path())]).status.code(), Some(1));
}
