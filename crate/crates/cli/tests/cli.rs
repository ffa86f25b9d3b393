use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bcer(args: &[&str], workdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcer"))
        .args(args)
        .env("BCER_WORKDIR", workdir)
        .output()
        .expect("binary runs")
}

fn contracts() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/contracts")
}

fn contract(name: &str) -> String {
    contracts().join(name).to_string_lossy().into_owned()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn trace_line(o: &Output) -> String {
    stdout(o).lines().find_map(|l| l.strip_prefix("trace=")).expect("trace path printed").to_string()
}

#[test]
fn zero_fault_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcer(&["run", "--contract", &contract("denoise.toml"), "--controller", "bcer", "--seed", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("sr=1 tcr=1.00"));
    assert!(Path::new(&trace_line(&o)).starts_with(dir.path()));
}

#[test]
fn forced_hard_fault_fails_the_case() {
    let dir = tempfile::tempdir().unwrap();
    let faults = dir.path().join("hard.toml");
    fs::write(&faults, "[faults]\nhard_failure_nodes = [{ task = \"Denoise\", position = 2 }]\n").unwrap();
    let o = bcer(
        &[
            "run",
            "--contract",
            &contract("denoise.toml"),
            "--controller",
            "react",
            "--seed",
            "1",
            "--faults",
            faults.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("sr=0"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = bcer(&["run", "--contract", "absent.toml", "--controller", "bcer", "--seed", "1"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.toml"));

    let bad_kind = bcer(&["run", "--contract", &contract("denoise.toml"), "--controller", "oracle", "--seed", "1"], dir.path());
    assert_eq!(bad_kind.status.code(), Some(2));

    let bad_config = dir.path().join("bad.toml");
    fs::write(&bad_config, "[planner]\nomit_step_prob = 1.5\n").unwrap();
    let o = bcer(
        &["run", "--contract", &contract("denoise.toml"), "--controller", "bcer", "--seed", "1", "--faults", bad_config.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn records_format_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcer(
        &["--format", "records", "run", "--contract", &contract("segment.toml"), "--controller", "react-bind", "--seed", "3"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["score"]["sr"], 1);
    }
}

#[test]
fn bench_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let suite = contracts();
    let faults = configs().join("default_faults.toml");
    let run = |archive: &str| {
        let a = dir.path().join(archive);
        let o = bcer(
            &[
                "--format",
                "records",
                "bench",
                "--suite",
                suite.to_str().unwrap(),
                "--seeds",
                "4",
                "--faults",
                faults.to_str().unwrap(),
                "--archive",
                a.to_str().unwrap(),
                "--jobs",
                "2",
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        // Paths differ between archives; compare the aggregate records.
        stdout(&o).lines().filter(|l| !l.contains("\"case\"")).map(String::from).collect::<Vec<_>>()
    };
    let first = run("a");
    assert_eq!(first, run("b"));
    assert!(first.iter().any(|l| l.contains("\"total\"")));

    let trace = bcer_core::bench::archived_traces(&dir.path().join("a")).into_iter().next().unwrap();
    let o = bcer(&["trace", "replay", "--trace", trace.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("replay: match"));
}

#[test]
fn zero_fault_bench_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcer(&["bench", "--suite", contracts().to_str().unwrap(), "--seeds", "5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("Total")).unwrap();
    assert_eq!(total.matches("100/100").count(), 4, "{text}");
    assert!(dir.path().join("bench/results.jsonl").is_file());
}

#[test]
fn trace_inspect_lists_cardiac_events() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcer(&["run", "--contract", &contract("cardiacrpt.toml"), "--controller", "bcer", "--seed", "2"], dir.path());
    let trace = trace_line(&o);
    let o = bcer(&["trace", "inspect", "--trace", &trace], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.split_whitespace().nth(2) == Some("NodeSucceeded")).count(), 6);
    assert!(text.contains("evidence: label:step5.label"));

    let o = bcer(&["trace", "inspect", "--trace", &trace, "--node", "step3"], dir.path());
    assert!(stdout(&o).lines().all(|l| l.contains("step3")));
}

#[test]
fn malformed_and_tampered_traces() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcer(&["run", "--contract", &contract("recon.toml"), "--controller", "bcer", "--seed", "2"], dir.path());
    let trace = trace_line(&o);
    let text = fs::read_to_string(&trace).unwrap();

    let truncated = dir.path().join("truncated.log");
    fs::write(&truncated, &text[..text.len() - 40]).unwrap();
    let o = bcer(&["trace", "inspect", "--trace", truncated.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed trace"));

    fs::write(&trace, text.replace("\"Succeeded\"}", "\"Abandoned\"}")).unwrap();
    let o = bcer(&["trace", "replay", "--trace", &trace], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first divergence"));
}

#[test]
fn validate_and_tools() {
    let dir = tempfile::tempdir().unwrap();
    let faults = configs().join("default_faults.toml");
    let o = bcer(
        &["validate", "--suite", contracts().to_str().unwrap(), "--faults", faults.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok contract")).count(), 8);

    let broken = dir.path().join("broken.toml");
    let source = fs::read_to_string(contracts().join("denoise.toml")).unwrap();
    fs::write(&broken, source.replace("\"denoise_volume\"]", "\"denoise_volume\", \"teleport\"]")).unwrap();
    let o = bcer(&["validate", "--contract", broken.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = bcer(&["tools", "--task", "cardiacrpt", "--graph"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("->")).count(), 5);

    let o = bcer(&["tools"], dir.path());
    assert_eq!(stdout(&o).lines().count(), 20);
}
