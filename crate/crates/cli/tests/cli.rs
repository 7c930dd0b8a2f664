use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_luxloop"));
    c.env_remove("LUXLOOP_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn luxloop")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", text(&o));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_one_record_and_a_manifest() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "train",
        "--target",
        "L1",
        "--seed",
        "42",
        "--out",
        s(out.path()),
        "--run-id",
        "r",
    ]);
    let dir = out.path().join("r");
    assert_eq!(files_with_ext(&dir, "csv").len(), 1);
    let m = json(&dir.join("manifest.json"));
    assert_eq!(m["run_id"], "r");
    assert_eq!(m["config"]["trial"]["seed"], 42);
    let outputs: Vec<&str> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["L1_ep00.csv", "L1_ep00.json", "qtable.json"]);
    for f in outputs {
        assert!(dir.join(f).exists());
    }
}

#[test]
fn unknown_target_names_the_valid_labels() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["train", "--target", "L99", "--out", s(out.path())]);
    assert!(!o.status.success());
    let msg = text(&o);
    assert!(msg.contains("L1") && msg.contains("L13"), "{msg}");
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn carried_episodes_improve_on_average() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "train",
        "--target",
        "L6",
        "--episodes",
        "10",
        "--carry-qtable",
        "--out",
        s(out.path()),
        "--run-id",
        "c",
    ]);
    let dir = out.path().join("c");
    let metas: Vec<Value> = files_with_ext(&dir, "json")
        .iter()
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("L6_ep")
        })
        .map(|p| json(p))
        .collect();
    assert_eq!(metas.len(), 10);
    let steps: Vec<f64> = metas
        .iter()
        .map(|m| m["steps"].as_f64().unwrap_or(f64::INFINITY))
        .collect();
    let first = steps[..3].iter().sum::<f64>() / 3.0;
    let last = steps[7..].iter().sum::<f64>() / 3.0;
    assert!(
        last <= first,
        "first three average {first} steps, last three {last}"
    );
}

#[test]
fn small_sweep_is_reproducible() {
    let out = tempfile::tempdir().unwrap();
    for id in ["a", "b"] {
        ok(&[
            "sweep",
            "--targets",
            "L1",
            "--trials",
            "2",
            "--svg",
            "--out",
            s(out.path()),
            "--run-id",
            id,
        ]);
    }
    let a = out.path().join("a");
    assert_eq!(files_with_ext(&a.join("records"), "csv").len(), 2);
    assert_eq!(json(&a.join("summary.json"))["total_runs"], 2);
    for f in [
        "summary.json",
        "boxplot_steps.csv",
        "histogram_steps.csv",
        "steps_by_target.svg",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(out.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let out = tempfile::tempdir().unwrap();
    let o = bin()
        .args([
            "sweep",
            "--targets",
            "L13",
            "--trials",
            "1",
            "--run-id",
            "env",
        ])
        .env("LUXLOOP_OUT", out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(out.path().join("env/manifest.json").exists());
}

#[test]
fn flags_override_the_config_file() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("cfg.json");
    fs::write(&cfg, r#"{"targets": ["L2", "L3"], "trials": 1, "seed": 5}"#).unwrap();
    ok(&[
        "sweep",
        "--config",
        s(&cfg),
        "--seed",
        "6",
        "--out",
        s(out.path()),
        "--run-id",
        "x",
    ]);
    let m = json(&out.path().join("x/manifest.json"));
    assert_eq!(m["config"]["trial"]["seed"], 6);
    assert_eq!(m["config"]["targets"], serde_json::json!(["L2", "L3"]));

    fs::write(&cfg, r#"{"trails": 1}"#).unwrap();
    assert!(
        !run(&["sweep", "--config", s(&cfg), "--out", s(out.path())])
            .status
            .success()
    );
}

#[test]
fn open_loop_alone_gives_one_full_power_row() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "compare",
        "--controllers",
        "open",
        "--p-max",
        "6",
        "--out",
        s(out.path()),
        "--run-id",
        "o",
    ]);
    let report = json(&out.path().join("o/energy.json"));
    let entries = report["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["controller"], "open_loop");
    assert_eq!(entries[0]["consumed_watts"], 6.0);
    assert_eq!(entries[0]["saved_watts"], 0.0);
}

#[test]
fn rl_comparison_needs_a_table() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&["compare", "--out", s(out.path())]);
    assert!(!o.status.success());
    assert!(text(&o).contains("--qtable"));

    let missing = out.path().join("nope.json");
    assert!(
        !run(&["compare", "--qtable", s(&missing), "--out", s(out.path())])
            .status
            .success()
    );

    let bad = out.path().join("bad.json");
    let agent = serde_json::json!({
        "alpha": 0.1, "gamma": 0.9, "epsilon_initial": 0.5, "epsilon_decay": 0.999,
        "epsilon_min": 0.01, "action_deltas": [-8, 0, 8], "rng_seed": 0
    });
    let table = serde_json::json!({
        "num_states": 64, "num_actions": 3, "action_deltas": [-8, 0, 8],
        "values": vec![0.0; 192], "visit_counts": vec![0; 192], "config": agent
    });
    fs::write(&bad, table.to_string()).unwrap();
    let o = run(&["compare", "--qtable", s(&bad), "--out", s(out.path())]);
    assert!(!o.status.success());
    assert!(text(&o).contains("actions"), "{}", text(&o));
}

#[test]
fn trained_table_round_trips_into_compare() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "compare",
        "--target",
        "L4",
        "--train-first",
        "--train-steps",
        "5000",
        "--duration",
        "300",
        "--svg",
        "--out",
        s(out.path()),
        "--run-id",
        "t",
    ]);
    let table = out.path().join("t/qtable.json");
    let first = json(&out.path().join("t/energy.json"));
    assert_eq!(first["entries"].as_array().unwrap().len(), 3);
    assert!(
        fs::read_to_string(out.path().join("t/duty.svg"))
            .unwrap()
            .matches("class=\"series\"")
            .count()
            == 3
    );

    ok(&[
        "compare",
        "--target",
        "L4",
        "--qtable",
        s(&table),
        "--duration",
        "300",
        "--out",
        s(out.path()),
        "--run-id",
        "u",
    ]);
    assert_eq!(first, json(&out.path().join("u/energy.json")));
}

#[test]
fn ordering_check_needs_both_controllers() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&[
        "compare",
        "--controllers",
        "open",
        "--assert-ordering",
        "--out",
        s(out.path()),
    ]);
    assert!(!o.status.success());
}

fn spike_record(out: &Path) -> PathBuf {
    let scenario = out.join("spike.json");
    fs::write(
        &scenario,
        r#"{"baseline": 260, "events": [{"kind": "spike", "start_step": 100, "duration_steps": 50, "magnitude": 400}]}"#,
    )
    .unwrap();
    ok(&[
        "train",
        "--target",
        "L6",
        "--scenario",
        s(&scenario),
        "--max-steps",
        "400",
        "--hold",
        "400",
        "--out",
        s(out),
        "--run-id",
        "spike",
    ]);
    out.join("spike/L6_ep00.csv")
}

#[test]
fn replay_charts_four_series_and_shows_the_spike() {
    let out = tempfile::tempdir().unwrap();
    let record = spike_record(out.path());
    let o = ok(&[
        "replay",
        s(&record),
        "--svg",
        "--out",
        s(out.path()),
        "--run-id",
        "rp",
    ]);
    let dir = out.path().join("rp");
    let svg = fs::read_to_string(dir.join("replay.svg")).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 4);
    for name in ["raw", "smoothed", "pwm x4", "state x16"] {
        assert!(svg.contains(&format!("data-name=\"{name}\"")), "{name}");
    }
    let csv = fs::read_to_string(dir.join("replay.csv")).unwrap();
    let peak = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u32>().unwrap())
        .max()
        .unwrap();
    assert!(peak > 650, "peak {peak}");
    assert!(String::from_utf8_lossy(&o.stdout).contains(&format!("peak raw reading {peak}")));
}

#[test]
fn replay_rejects_empty_and_malformed_records() {
    let out = tempfile::tempdir().unwrap();
    let empty = out.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert!(!run(&["replay", s(&empty), "--out", s(out.path())])
        .status
        .success());

    let header_only = out.path().join("header.csv");
    fs::write(
        &header_only,
        "t,raw,smoothed,state,action,pwm,reward,epsilon\n",
    )
    .unwrap();
    assert!(!run(&["replay", s(&header_only), "--out", s(out.path())])
        .status
        .success());

    let bad = out.path().join("bad.csv");
    fs::write(
        &bad,
        "t,raw,smoothed,state,action,pwm,reward,epsilon\n0,10,10.0,0,2,0,-1,0.5\n1,10,oops,0,2,0,-1,0.5\n",
    )
    .unwrap();
    let o = run(&["replay", s(&bad), "--out", s(out.path())]);
    assert!(!o.status.success());
    assert!(text(&o).contains("row 2"), "{}", text(&o));
}

fn free_port() -> String {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string()
}

#[test]
fn unit_without_a_brain_warns_and_succeeds() {
    let out = tempfile::tempdir().unwrap();
    let o = ok(&[
        "fleet",
        "unit",
        "--connect",
        &free_port(),
        "--unit",
        "2",
        "--target",
        "L3",
        "--out",
        s(out.path()),
        "--run-id",
        "solo",
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
    assert!(out.path().join("solo/unit2.csv").exists());
    assert_eq!(
        json(&out.path().join("solo/unit_outcome.json"))["connects"],
        0
    );
}

#[test]
fn brain_refuses_a_taken_port() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let out = tempfile::tempdir().unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let o = run(&[
        "fleet",
        "brain",
        "--listen",
        &addr,
        "--timeout-secs",
        "1",
        "--out",
        s(out.path()),
    ]);
    assert!(!o.status.success());
}

/// Starts a brain on an ephemeral port and returns it with its address.
fn spawn_brain(out: &Path, extra: &[&str]) -> (std::process::Child, String) {
    let mut child = bin()
        .args([
            "fleet",
            "brain",
            "--listen",
            "127.0.0.1:0",
            "--timeout-secs",
            "60",
            "--out",
            s(out),
            "--run-id",
            "brain",
        ])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();
    (child, addr)
}

fn spawn_unit(out: &Path, addr: &str, unit: &str, extra: &[&str]) -> std::process::Child {
    bin()
        .args([
            "fleet",
            "unit",
            "--connect",
            addr,
            "--unit",
            unit,
            "--out",
            s(out),
            "--run-id",
        ])
        .arg(format!("unit{unit}"))
        .args(extra)
        .stdout(Stdio::null())
        .spawn()
        .unwrap()
}

fn log_kinds(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["kind"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect()
}

#[test]
fn two_units_fill_the_telemetry_log() {
    let out = tempfile::tempdir().unwrap();
    let (mut brain, addr) = spawn_brain(out.path(), &["--until-byes", "2"]);
    let units: Vec<_> = ["1", "2"]
        .iter()
        .map(|u| {
            spawn_unit(
                out.path(),
                &addr,
                u,
                &["--target", "L4", "--max-steps", "300", "--run-to-cap"],
            )
        })
        .collect();
    for mut u in units {
        assert!(u.wait().unwrap().success());
    }
    assert!(brain.wait().unwrap().success());

    let log = out.path().join("brain/fleet_log.ndjson");
    let kinds = log_kinds(&log);
    assert_eq!(kinds.iter().filter(|k| *k == "TELEMETRY").count(), 60);
    assert_eq!(kinds.iter().filter(|k| *k == "BYE").count(), 2);

    let replay = ok(&[
        "replay",
        s(&log),
        "--unit",
        "2",
        "--svg",
        "--out",
        s(out.path()),
        "--run-id",
        "rp",
    ]);
    assert!(String::from_utf8_lossy(&replay.stdout).contains("30 rows"));
}

#[test]
fn same_target_units_get_merged_tables() {
    let out = tempfile::tempdir().unwrap();
    let (mut brain, addr) = spawn_brain(out.path(), &["--until-byes", "2", "--merge-every", "500"]);
    let args = [
        "--target",
        "L5",
        "--max-steps",
        "2000",
        "--run-to-cap",
        "--step-delay-ms",
        "1",
    ];
    let units: Vec<_> = ["1", "2"]
        .iter()
        .map(|u| spawn_unit(out.path(), &addr, u, &args))
        .collect();
    for mut u in units {
        assert!(u.wait().unwrap().success());
    }
    assert!(brain.wait().unwrap().success());

    let kinds = log_kinds(&out.path().join("brain/fleet_log.ndjson"));
    assert!(kinds.iter().filter(|k| *k == "QSYNC_PUSH").count() >= 2);
    let stats = json(&out.path().join("brain/brain_stats.json"));
    assert!(stats["merges"].as_u64().unwrap() >= 1, "{stats}");
    let applied: u64 = ["unit1", "unit2"]
        .iter()
        .map(|u| {
            json(&out.path().join(u).join("unit_outcome.json"))["merges_applied"]
                .as_u64()
                .unwrap()
        })
        .sum();
    assert!(applied >= 1);
}
