use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepservo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn line_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key:?} line in {text}"))
        .trim()
}

fn gen(dir: &Path, count: &str, test: &str) -> Output {
    run(&["gen-data", "--out", dir.to_str().unwrap(), "--count", count, "--test", test, "--seed", "4"])
}

#[test]
fn gen_data_reports_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = gen(dir.path(), "400", "20");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("380 train / 20 test"), "{}", stdout(&o));
    for f in ["manifest.csv", "train.csv", "test.csv", "dataset.meta", "img_00399.pgm"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn oracle_eval_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gen(dir.path(), "30", "5").status.code(), Some(0));
    for split in ["test", "train", "all"] {
        let o = run(&["eval", "--data", dir.path().to_str().unwrap(), "--oracle", "--split", split]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).contains("MAE (0.000000, 0.000000, 0.000000, 0.000000)"), "{}", stdout(&o));
    }
}

#[test]
fn oracle_servo_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "servo-oracle",
        "--gains",
        "0.2",
        "--max-steps",
        "100",
        "--seed",
        "9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(line_value(&text, "status"), "Converged");
    assert_eq!(line_value(&text, "steps"), line_value(&text, "closed-form steps"));
    assert!(dir.path().join("trace.csv").exists());
    assert!(dir.path().join("error_rz.svg").exists());
}

#[test]
fn classic_servo_converges() {
    let o = run(&["servo-classic", "--initial", "-20,15,100,25", "--max-steps", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(line_value(&stdout(&o), "status"), "Converged");
}

#[test]
fn train_then_servo_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gen(dir.path(), "24", "4").status.code(), Some(0));
    let model = dir.path().join("m.vsnn");
    let (d, m) = (dir.path().to_str().unwrap(), model.to_str().unwrap());
    let o = run(&["train", "--data", d, "--model", m, "--epochs", "2", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   2"));
    assert!(dir.path().join("m.norm").exists());
    let o = run(&["eval", "--data", d, "--model", m]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("samples 4"));
    let o = run(&["servo", "--model", m, "--max-steps", "3", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("status "));
}

#[test]
fn usage_and_config_errors_exit_1() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["servo-oracle", "--gains", "0"]).status.code(), Some(1));
    assert_eq!(run(&["servo-oracle", "--gains", "1,2"]).status.code(), Some(1));
    assert_eq!(run(&["servo-oracle", "--initial", "900,0,0,0"]).status.code(), Some(1));
    assert_eq!(run(&["servo-oracle", "--max-steps", "0"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gen(dir.path(), "10", "10").status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.vsnn");
    let o = run(&["servo", "--model", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn check_suite_passes() {
    let o = run(&["check", "--seed", "1"]);
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.lines().count() >= 10);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
