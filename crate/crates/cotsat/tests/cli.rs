use std::path::Path;
use std::process::{Command, Output};

const EXAMPLE_DIMACS: &str = "p cnf 4 6\n-2 -4 -1 0\n3 4 -1 0\n-1 -3 -2 0\n1 -2 -4 0\n-4 2 1 0\n1 -2 4 0\n";
const EXAMPLE_PROMPT: &str = "[BOS] -2 -4 -1 0 3 4 -1 0 -1 -3 -2 0 1 -2 -4 0 -4 2 1 0 1 -2 4 0 [SEP]";

fn cotsat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotsat"))
        .args(args)
        .env("COTSAT_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn compile_solve_gen_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let cnf = dir.path().join("example.cnf");
    let data = dir.path().join("data.jsonl");
    let report = dir.path().join("report.json");
    std::fs::write(&cnf, EXAMPLE_DIMACS).unwrap();

    let o = cotsat(&["compile", "--p", "4", "--out", p(&model)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("layers=7 heads=5"));

    let o = cotsat(&["solve", "--weights", p(&model), "--dimacs", p(&cnf)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o), "D -2 D 1 D 3 SAT\nSat\n");

    let o = cotsat(&[
        "gen",
        "--distribution",
        "random",
        "--p",
        "4",
        "--count",
        "12",
        "--seed",
        "9",
        "--out",
        p(&data),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 12);

    let o = cotsat(&[
        "eval",
        "--weights",
        p(&model),
        "--dataset",
        p(&data),
        "--report",
        p(&report),
        "--require-perfect",
    ]);
    assert!(o.status.success(), "{o:?}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["overall"]["accuracy"], 1.0);
    assert_eq!(json["results"].as_array().unwrap().len(), 12);
}

#[test]
fn oracle_prints_label_and_reference_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cnf = dir.path().join("example.cnf");
    std::fs::write(&cnf, EXAMPLE_DIMACS).unwrap();
    let o = cotsat(&["oracle", "--dimacs", p(&cnf)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "SAT -1 -2 -3 -4\nD -2 D 1 D 3 SAT\n");
}

#[test]
fn check_trace_reports_the_violation() {
    let ok = cotsat(&[
        "check-trace",
        "--prompt",
        EXAMPLE_PROMPT,
        "--trace",
        "D 2 D 1 -4 3 [BT] D 2 -1 -4 [BT] -2 D 3 D 4 1 SAT",
    ]);
    assert_eq!(ok.status.code(), Some(0));
    let bad = cotsat(&[
        "check-trace",
        "--prompt",
        EXAMPLE_PROMPT,
        "--trace",
        "D 2 D 1 -4 3 [BT] D 2 D -1 -4 [BT] -2 D 3 D 4 -1 SAT",
    ]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).starts_with("invalid at token 9"), "{}", stdout(&bad));
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    assert_eq!(cotsat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cotsat(&["gen", "--p", "4", "--count", "3"]).status.code(), Some(2));
    assert_eq!(
        cotsat(&["oracle", "--dimacs", "/nonexistent.cnf"]).status.code(),
        Some(2)
    );
    assert_eq!(cotsat(&["--help"]).status.code(), Some(0));
}
