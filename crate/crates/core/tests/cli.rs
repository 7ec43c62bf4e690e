use std::path::Path;
use std::process::{Command, Output};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkgauss-sca")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn profile_and_attack(dir: &Path, noise: &str) -> Output {
    ok(bin(dir, &["simulate", "--seed", "1", "--keys", "10", "--profiling", "--noise", noise, "--out", "prof"]));
    let p = ok(bin(dir, &["profile", "--traces", "prof.trc", "--labels", "prof.lbl", "--out", "tpl"]));
    assert!(p.contains("inner.poi=3\n"), "{p}");
    assert!(p.contains("neg.poi=213\n"), "{p}");
    ok(bin(dir, &["simulate", "--seed", "2", "--keys", "2", "--noise", noise, "--out", "atk"]));
    bin(dir, &["attack", "--traces", "atk.trc", "--templates", "tpl", "--labels", "atk.lbl", "--out", "atk.report"])
}

#[test]
fn pipeline_recovers_keys_at_high_separation() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(profile_and_attack(dir.path(), "0.002"));
    assert!(out.contains("2048/2048 coefficients correct"), "{out}");
    assert!(out.contains("2/2 keys fully recovered"), "{out}");

    let report = ok(bin(dir.path(), &["report", "--input", "atk.report"]));
    assert!(report.contains("kind=recovery_report"));
    assert!(report.contains("correct.coefficients=2048"));
    let traces = ok(bin(dir.path(), &["report", "--input", "atk.trc"]));
    assert!(traces.contains("n_traces=2048") && traces.contains("n_samples=432"), "{traces}");
    let labels = ok(bin(dir.path(), &["report", "--input", "atk.lbl"]));
    assert!(labels.contains("records=2048"));
    let tpl = ok(bin(dir.path(), &["report", "--input", "tpl.inner.tpl"]));
    assert!(tpl.contains("attack_point=inner"));
}

#[test]
fn incomplete_recovery_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = profile_and_attack(dir.path(), "0.004");
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("coefficients correct"));
    assert!(dir.path().join("atk.report").exists());
}

#[test]
fn unlabeled_attack_skips_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(bin(d, &["simulate", "--seed", "1", "--logn", "10", "--keys", "2", "--profiling", "--out", "prof"]));
    ok(bin(d, &["profile", "--traces", "prof.trc", "--labels", "prof.lbl", "--out", "tpl"]));
    ok(bin(d, &["simulate", "--seed", "2", "--logn", "10", "--out", "atk"]));
    let out = ok(bin(d, &["attack", "--traces", "atk.trc", "--templates", "tpl"]));
    assert!(!out.contains("coefficients correct"), "{out}");
    let text = std::fs::read_to_string(d.join("atk.report")).unwrap();
    assert!(!text.contains("correct."));
}

#[test]
fn analyze_prints_published_digits() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(bin(
        dir.path(),
        &[
            "analyze",
            "--p-inner",
            "0.99999999999",
            "--p-neg",
            "0.999999999999",
            "--inner",
            "26",
            "--outer",
            "2",
            "--n",
            "512",
        ],
    ));
    assert!(out.contains("(99.9999999478%)"), "{out}");
    assert!(out.contains("full_key_success.n512=0.99999946547214 (99.99994654"), "{out}");
    assert!(out.contains("full_key_success.n1024=0.99999893094457 (99.99989309"), "{out}");

    let pair = ok(bin(dir.path(), &["analyze", "--mu0", "0", "--var0", "1", "--mu1", "4", "--var1", "1"]));
    assert!(pair.contains("pair.overlap_area=4.55002638963584"), "{pair}");
}

#[test]
fn missing_table_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(dir.path(), &["simulate", "--table", "no/such/table.txt", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/table.txt"), "{}", stderr(&o));
}

#[test]
fn custom_table_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.txt"), "# two entries\n4611686018427387904\n2305843009213693952\n").unwrap();
    ok(bin(dir.path(), &["simulate", "--table", "t.txt", "--logn", "10", "--out", "x"]));
    let meta = ok(bin(dir.path(), &["report", "--input", "x.trc"]));
    assert!(meta.contains("meta.table_len=2"), "{meta}");
    assert!(meta.contains("n_samples=16"), "{meta}");
}

#[test]
fn layout_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(bin(d, &["simulate", "--seed", "1", "--logn", "10", "--keys", "2", "--profiling", "--out", "prof"]));
    ok(bin(d, &["profile", "--traces", "prof.trc", "--labels", "prof.lbl", "--out", "tpl"]));
    let o = bin(d, &["attack", "--traces", "prof.trc", "--templates", "tpl", "--samples-per-inner", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("layout mismatch"), "{}", stderr(&o));
    let o = bin(d, &["profile", "--traces", "prof.trc", "--labels", "prof.lbl", "--out", "t2", "--neg-offset", "4"]);
    assert_eq!(o.status.code(), Some(0), "offsets inside the block only move the search");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(dir.path(), &["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["simulate"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["analyze"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["simulate", "--logn", "11", "--out", "x"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["report", "--input", "missing"]).status.code(), Some(2));
    assert_eq!(bin(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_prepopulates_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# campaign\nseed=3\nlogn=10\nkeys=2\nprofiling=true\nout=cfg\n").unwrap();
    ok(bin(d, &["simulate", "--config", "run.cfg"]));
    let meta = ok(bin(d, &["report", "--input", "cfg.trc"]));
    assert!(meta.contains("meta.seed=3") && meta.contains("meta.n_keys=2"), "{meta}");
    assert!(meta.contains("meta.forcing=split:1:3"), "{meta}");

    ok(bin(d, &["simulate", "--config", "run.cfg", "--seed", "4", "--out", "explicit"]));
    let meta = ok(bin(d, &["report", "--input", "explicit.trc"]));
    assert!(meta.contains("meta.seed=4"), "{meta}");

    assert_eq!(bin(d, &["simulate", "--config", "absent.cfg"]).status.code(), Some(2));
}

#[test]
fn output_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(bin(d, &["simulate", "--seed", "9", "--keys", "3", "--threads", "1", "--out", "a"]));
    ok(bin(d, &["simulate", "--seed", "9", "--keys", "3", "--threads", "4", "--out", "b"]));
    for ext in ["trc", "lbl"] {
        let a = std::fs::read(d.join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(d.join(format!("b.{ext}"))).unwrap();
        assert!(a == b, "{ext} differs");
    }
    ok(bin(d, &["simulate", "--seed", "9", "--keys", "3", "--profiling", "--out", "p"]));
    ok(bin(d, &["profile", "--traces", "p.trc", "--labels", "p.lbl", "--threads", "1", "--out", "t1"]));
    ok(bin(d, &["profile", "--traces", "p.trc", "--labels", "p.lbl", "--threads", "3", "--out", "t3"]));
    for name in ["inner", "neg"] {
        let a = std::fs::read(d.join(format!("t1.{name}.tpl"))).unwrap();
        let b = std::fs::read(d.join(format!("t3.{name}.tpl"))).unwrap();
        assert_eq!(a, b);
    }
}
