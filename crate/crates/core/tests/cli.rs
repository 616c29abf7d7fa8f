use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn abstain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abstain"))
        .args(args)
        .env_remove("ABSTAIN_TEST_TOKEN")
        .output()
        .expect("spawn abstain")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_tsv(path: &Path, n: usize) {
    let mut text = String::from("id\tquestion\tpossible_answers\to_pop\n");
    for i in 0..n {
        writeln!(
            text,
            "{i}\tWhat is item {i}?\t[\"thing {i}\", \"alias {i}\"]\t{}",
            10 + (i * 7919) % 5000
        )
        .unwrap();
    }
    std::fs::write(path, text).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("qs.tsv");
    let run = dir.path().join("run.jsonl");
    let scored = dir.path().join("scored.json");
    write_tsv(&tsv, 300);

    let ingest = abstain(&["ingest", s(&tsv), "--format", "popqa-tsv"]);
    assert_eq!(
        code(&ingest),
        0,
        "{}",
        String::from_utf8_lossy(&ingest.stderr)
    );
    assert_eq!(
        String::from_utf8(ingest.stdout).unwrap().lines().count(),
        300
    );

    let r = abstain(&[
        "run",
        "--dataset",
        s(&tsv),
        "--scheme",
        "b",
        "--abstain",
        "0.4",
        "--synthetic",
        "--seed",
        "3",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(run.with_file_name("run.jsonl.meta.json").exists());

    let sc = abstain(&[
        "score",
        "--run",
        s(&run),
        "--dataset",
        s(&tsv),
        "--out",
        s(&scored),
    ]);
    assert_eq!(code(&sc), 0, "{}", String::from_utf8_lossy(&sc.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&scored).unwrap()).unwrap();
    assert_eq!(json["counts"]["n_total"], 300);

    for (fmt, first) in [
        ("csv", "# abstain-report/v1"),
        ("table", "# abstain-report/v1"),
        ("json", "{"),
    ] {
        let rep = abstain(&["report", "--format", fmt, s(&scored)]);
        assert_eq!(code(&rep), 0);
        assert!(
            String::from_utf8(rep.stdout).unwrap().starts_with(first),
            "{fmt}"
        );
    }

    let cal = abstain(&[
        "calibrate",
        "--scored",
        s(&scored),
        "--target",
        "0.3",
        "--method",
        "multistart",
    ]);
    assert_eq!(code(&cal), 0, "{}", String::from_utf8_lossy(&cal.stderr));
    let cal: serde_json::Value = serde_json::from_slice(&cal.stdout).unwrap();
    assert_eq!(
        cal["n_calibration"].as_u64().unwrap() + cal["n_validation"].as_u64().unwrap(),
        300
    );
}

#[test]
fn rerun_resumes_without_new_records() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("qs.tsv");
    let run = dir.path().join("run.jsonl");
    write_tsv(&tsv, 50);
    let args = [
        "run",
        "--dataset",
        s(&tsv),
        "--scheme",
        "a",
        "--synthetic",
        "--out",
        s(&run),
    ];
    assert_eq!(code(&abstain(&args)), 0);
    let before = std::fs::read(&run).unwrap();
    assert_eq!(code(&abstain(&args)), 0);
    assert_eq!(std::fs::read(&run).unwrap(), before);
}

#[test]
fn simulate_and_mc_validity_emit_csv() {
    let sim = abstain(&["simulate", "--frontier", "--samples", "2000"]);
    assert_eq!(code(&sim), 0);
    let text = String::from_utf8(sim.stdout).unwrap();
    assert!(text.starts_with("tau,gamma,beta,coverage"));
    assert_eq!(text.lines().count(), 12);

    let mc = abstain(&["mc-validity", "--trials", "20", "--n", "200"]);
    assert_eq!(code(&mc), 0, "{}", String::from_utf8_lossy(&mc.stderr));
    assert!(String::from_utf8(mc.stdout).unwrap().lines().count() > 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("qs.tsv");
    write_tsv(&tsv, 5);
    let out = dir.path().join("out.jsonl");

    // scheme b without an abstention credit
    assert_eq!(
        code(&abstain(&[
            "run",
            "--dataset",
            s(&tsv),
            "--scheme",
            "b",
            "--synthetic",
            "--out",
            s(&out)
        ])),
        2
    );
    assert_eq!(
        code(&abstain(&[
            "simulate",
            "--frontier",
            "--belief",
            "gaussian"
        ])),
        2
    );
    assert_eq!(
        code(&abstain(&[
            "ingest",
            s(&dir.path().join("missing.tsv")),
            "--format",
            "popqa-tsv"
        ])),
        4
    );

    std::fs::write(
        dir.path().join("bad.tsv"),
        "id\tquestion\tpossible_answers\n1\tq?\t[\"unterminated\n",
    )
    .unwrap();
    assert_eq!(
        code(&abstain(&[
            "ingest",
            s(&dir.path().join("bad.tsv")),
            "--format",
            "popqa-tsv"
        ])),
        4
    );

    // token variable unset: configuration error, nothing sent
    let live = abstain(&[
        "run",
        "--dataset",
        s(&tsv),
        "--scheme",
        "a",
        "--model-url",
        "http://127.0.0.1:9",
        "--model",
        "m",
        "--auth-env",
        "ABSTAIN_TEST_TOKEN",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&live), 2, "{}", String::from_utf8_lossy(&live.stderr));
}

#[test]
fn unreachable_endpoint_is_transport_exhaustion() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("qs.tsv");
    write_tsv(&tsv, 2);
    let out = dir.path().join("out.jsonl");
    let live = Command::new(env!("CARGO_BIN_EXE_abstain"))
        .args([
            "run",
            "--dataset",
            s(&tsv),
            "--scheme",
            "a",
            "--model-url",
            "http://127.0.0.1:9",
            "--model",
            "m",
            "--auth-env",
            "ABSTAIN_CLI_TOKEN",
            "--max-attempts",
            "2",
            "--backoff-ms",
            "1",
            "--fail-fast",
            "--out",
            s(&out),
        ])
        .env("ABSTAIN_CLI_TOKEN", "sk-never-printed")
        .output()
        .unwrap();
    assert_eq!(code(&live), 3, "{}", String::from_utf8_lossy(&live.stderr));
    let meta = std::fs::read_to_string(dir.path().join("out.jsonl.meta.json")).unwrap_or_default();
    assert!(!meta.contains("sk-never-printed"));
    assert!(!String::from_utf8_lossy(&live.stderr).contains("sk-never-printed"));
}
