use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use luxloop_core::energy::{compare_controllers, run_controller, CompareConfig, ControllerKind};
use luxloop_core::env::{target_band, PwmLevel};
use luxloop_core::fleet::{
    brain_serve, unit_run, BrainConfig, FleetMessage, Payload, UnitConfig, UnitId,
};
use luxloop_core::harness::{
    persist_sweep, read_episode_csv, record_stem, run_sweep, run_trial_with_table, train_for_steps,
    trial_seed, StepRow,
};
use luxloop_core::rl::{AgentConfig, QTable, QTableFile};
use serde_json::json;

use crate::run_dir::{output_root, RunDir};
use crate::settings::{Overrides, Settings};
use crate::svg::{line_chart, Series};
use crate::{BrainArgs, CompareArgs, ReplayArgs, SweepArgs, TrainArgs, UnitArgs};

fn check_shape(table: &QTable, agent: &AgentConfig, path: &Path) -> Result<()> {
    let want = QTable::for_config(agent)?;
    if !table.same_shape(&want) {
        bail!(
            "Q-table {} has {} states and actions {:?}; this run needs {} states and {:?}",
            path.display(),
            table.num_states(),
            table.action_deltas(),
            want.num_states(),
            want.action_deltas()
        );
    }
    Ok(())
}

fn load_table(path: &Path, agent: &AgentConfig) -> Result<QTable> {
    let (table, _) =
        QTableFile::load(path).with_context(|| format!("loading Q-table {}", path.display()))?;
    check_shape(&table, agent, path)?;
    Ok(table)
}

fn save_table(run: &mut RunDir, name: &str, table: &QTable, agent: &AgentConfig) -> Result<()> {
    let path = run.join(name);
    QTableFile::new(table, agent).save(&path)?;
    run.record(&path);
    Ok(())
}

fn write_text(run: &mut RunDir, name: &str, text: &str) -> Result<()> {
    let path = run.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    run.record(&path);
    Ok(())
}

fn steps_text(steps: Option<u64>) -> String {
    steps.map_or_else(
        || "not converged".to_string(),
        |s| format!("converged in {s} steps"),
    )
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let flags = Overrides {
        target: a.target,
        episodes: a.episodes,
        carry_qtable: a.carry_qtable,
        ..a.common.overrides()
    };
    let s = Settings::resolve(a.common.config.as_deref(), &flags)?;
    let mut table = match &a.qtable {
        Some(p) => Some(load_table(p, &s.trial.agent)?),
        None => None,
    };
    let mut run = RunDir::create(
        &output_root(a.common.out.as_deref()),
        a.common.run_id.as_deref(),
        s.trial.seed,
        &s,
    )?;
    let target = s.trial.target;
    let mut last = None;
    for i in 0..s.episodes {
        let cfg = s
            .trial
            .for_trial(target, trial_seed(s.trial.seed, target, i));
        let start = if i == 0 || s.carry_qtable {
            table.take()
        } else {
            None
        };
        let (record, t) = run_trial_with_table(&cfg, start, i)?;
        let stem = format!("{target}_ep{i:02}");
        let (csv, meta) = record.save(run.path(), &stem)?;
        run.record(&csv);
        run.record(&meta);
        println!(
            "{target} episode {i}: {} ({:.1} ms)",
            steps_text(record.steps_to_converge),
            record.wall_time_ms
        );
        if s.carry_qtable {
            table = Some(t.clone());
        }
        last = Some(t);
    }
    if let Some(t) = last {
        save_table(&mut run, "qtable.json", &t, &s.trial.agent)?;
    }
    let dir = run.finish()?;
    println!("run directory: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let flags = Overrides {
        targets: a.targets.clone(),
        trials: a.trials,
        workers: a.workers,
        ..a.common.overrides()
    };
    let s = Settings::resolve(a.common.config.as_deref(), &flags)?;
    let mut run = RunDir::create(
        &output_root(a.common.out.as_deref()),
        a.common.run_id.as_deref(),
        s.trial.seed,
        &s,
    )?;
    let outcome = run_sweep(&s.targets, s.trials, &s.trial, s.workers)?;
    let report = persist_sweep(run.path(), &outcome)?;
    for p in &report.written {
        run.record(p);
    }
    for (label, trial, err) in &report.failed {
        eprintln!("failed to write {}: {err}", record_stem(*label, *trial));
        run.record_failure(format!("{label} trial {trial}: {err}"));
    }

    let sum = &outcome.summary;
    println!("target  converged  median_steps");
    for t in &sum.per_target {
        let median = t
            .steps
            .as_ref()
            .map_or("-".to_string(), |b| format!("{}", b.median));
        println!(
            "{:<7} {:>4}/{:<4}  {median}",
            t.target.to_string(),
            t.converged_count,
            t.runs
        );
    }
    let overall = sum
        .steps
        .as_ref()
        .map_or("-".to_string(), |b| format!("{}", b.median));
    println!(
        "{} runs, convergence rate {:.3}, overall median {overall} steps",
        sum.total_runs, sum.convergence_rate
    );

    if a.svg {
        let pick = |f: fn(&luxloop_core::stats::BoxStats) -> f64| -> Vec<(f64, f64)> {
            sum.per_target
                .iter()
                .filter_map(|t| t.steps.as_ref().map(|b| (t.target.level() as f64, f(b))))
                .collect()
        };
        let series = [
            Series {
                name: "q1".into(),
                color: "#9ab",
                points: pick(|b| b.q1),
            },
            Series {
                name: "median".into(),
                color: "#c33",
                points: pick(|b| b.median),
            },
            Series {
                name: "q3".into(),
                color: "#36a",
                points: pick(|b| b.q3),
            },
        ];
        let chart = line_chart("Steps to convergence", "target level", "steps", &series);
        write_text(&mut run, "steps_by_target.svg", &chart)?;
    }

    let failed = !report.failed.is_empty();
    let dir = run.finish()?;
    println!("run directory: {}", dir.display());
    if failed {
        eprintln!("{} records could not be written", report.failed.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn compare(a: CompareArgs) -> Result<ExitCode> {
    let flags = Overrides {
        target: a.target,
        controllers: a.controllers.clone(),
        p_max: a.p_max,
        duration: a.duration,
        train_steps: a.train_steps,
        ..a.common.overrides()
    };
    let s = Settings::resolve(a.common.config.as_deref(), &flags)?;
    let wants_rl = s.controllers.contains(&ControllerKind::Rl);
    if wants_rl && a.qtable.is_none() && !a.train_first {
        bail!("the rl controller needs --qtable <file> or --train-first");
    }
    if a.assert_ordering && !(wants_rl && s.controllers.contains(&ControllerKind::open_loop())) {
        bail!("--assert-ordering needs both the rl and open controllers");
    }
    let loaded = match &a.qtable {
        Some(p) => Some(load_table(p, &s.trial.agent)?),
        None => None,
    };
    let mut run = RunDir::create(
        &output_root(a.common.out.as_deref()),
        a.common.run_id.as_deref(),
        s.trial.seed,
        &s,
    )?;
    let table = match loaded {
        Some(t) => Some(t),
        None if a.train_first && wants_rl => {
            let t = train_for_steps(
                &s.trial,
                s.train_steps,
                s.duration as u64,
                &[PwmLevel::OFF],
                None,
            )?;
            save_table(&mut run, "qtable.json", &t, &s.trial.agent)?;
            Some(t)
        }
        None => None,
    };

    let model = s.trial.seeded().env;
    let cfg = CompareConfig {
        p_max: s.p_max,
        controllers: s.controllers.clone(),
    };
    let target = s.trial.target;
    let report = compare_controllers(target, &model, s.duration, table.as_ref(), &cfg)?;
    for (name, f) in [("energy.json", true), ("energy.csv", false)] {
        let path = run.join(name);
        if f {
            report.save_json(&path)?;
        } else {
            report.save_csv(&path)?;
        }
        run.record(&path);
    }

    println!("controller    consumed_W  saved_W  mean_state_error");
    for e in &report.entries {
        println!(
            "{:<12} {:>10.4} {:>8.4} {:>17.3}",
            e.controller, e.consumed_watts, e.saved_watts, e.mean_abs_state_error
        );
    }

    if a.svg {
        let colors = ["#c33", "#36a", "#393"];
        let mut series = Vec::new();
        for (c, color) in s.controllers.iter().zip(colors.iter().cycle()) {
            let trace = run_controller(c, target_band(target), &model, s.duration, table.as_ref())?;
            series.push(Series {
                name: c.name().to_string(),
                color,
                points: trace
                    .pwm
                    .iter()
                    .enumerate()
                    .map(|(t, p)| (t as f64, p.duty() as f64))
                    .collect(),
            });
        }
        let chart = line_chart(&format!("Duty cycle at {target}"), "step", "duty", &series);
        write_text(&mut run, "duty.svg", &chart)?;
    }

    let dir = run.finish()?;
    println!("run directory: {}", dir.display());
    if a.assert_ordering {
        let rl = report
            .entry("rl")
            .ok_or_else(|| anyhow!("no rl row"))?
            .consumed_watts;
        let open = report
            .entry("open_loop")
            .ok_or_else(|| anyhow!("no open_loop row"))?
            .consumed_watts;
        if rl > open {
            eprintln!("ordering violated: rl consumed {rl:.4} W > open loop {open:.4} W");
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// One replay row; `raw` is absent for telemetry, which does not carry it.
struct ReplayRow {
    t: u64,
    raw: Option<u16>,
    smoothed: f64,
    pwm: u8,
    state: usize,
}

fn telemetry_rows(path: &Path, unit: u32) -> Result<Vec<ReplayRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let msg = FleetMessage::decode(line)
            .with_context(|| format!("{} line {}", path.display(), i + 1))?;
        if let Payload::Telemetry(snap) = msg.payload {
            if snap.unit == UnitId(unit) {
                rows.push(ReplayRow {
                    t: snap.t,
                    raw: None,
                    smoothed: snap.smoothed,
                    pwm: snap.pwm.duty(),
                    state: snap.state.get(),
                });
            }
        }
    }
    Ok(rows)
}

fn episode_rows(path: &Path) -> Result<Vec<ReplayRow>> {
    let rows: Vec<StepRow> = read_episode_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| ReplayRow {
            t: r.t,
            raw: Some(r.raw),
            smoothed: r.smoothed,
            pwm: r.pwm.duty(),
            state: r.state.get(),
        })
        .collect())
}

pub fn replay(a: ReplayArgs) -> Result<ExitCode> {
    let rows = match a.unit {
        Some(u) => telemetry_rows(&a.input, u)?,
        None => episode_rows(&a.input)?,
    };
    if rows.is_empty() {
        match a.unit {
            Some(u) => bail!("{} has no telemetry from unit {u}", a.input.display()),
            None => bail!("{} has no data rows", a.input.display()),
        }
    }
    let config = json!({ "input": a.input, "unit": a.unit });
    let mut run = RunDir::create(
        &output_root(a.out.as_deref()),
        a.run_id.as_deref(),
        0,
        &config,
    )?;

    let mut csv = String::from("t,raw,smoothed,pwm,state,pwm_x4,state_x16\n");
    for r in &rows {
        let raw = r.raw.map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!(
            "{},{raw},{},{},{},{},{}\n",
            r.t,
            r.smoothed,
            r.pwm,
            r.state,
            r.pwm as u32 * 4,
            r.state * 16
        ));
    }
    write_text(&mut run, "replay.csv", &csv)?;

    if a.svg {
        let pts = |f: &dyn Fn(&ReplayRow) -> Option<f64>| -> Vec<(f64, f64)> {
            rows.iter()
                .filter_map(|r| f(r).map(|y| (r.t as f64, y)))
                .collect()
        };
        let mut series = Vec::new();
        if a.unit.is_none() {
            series.push(Series {
                name: "raw".into(),
                color: "#bbb",
                points: pts(&|r| r.raw.map(f64::from)),
            });
        }
        series.push(Series {
            name: "smoothed".into(),
            color: "#36a",
            points: pts(&|r| Some(r.smoothed)),
        });
        series.push(Series {
            name: "pwm x4".into(),
            color: "#c33",
            points: pts(&|r| Some(r.pwm as f64 * 4.0)),
        });
        series.push(Series {
            name: "state x16".into(),
            color: "#393",
            points: pts(&|r| Some(r.state as f64 * 16.0)),
        });
        let chart = line_chart(
            &format!("Replay of {}", a.input.display()),
            "step",
            "ADC counts",
            &series,
        );
        write_text(&mut run, "replay.svg", &chart)?;
    }

    let peak = rows.iter().filter_map(|r| r.raw).max();
    let dir = run.finish()?;
    match peak {
        Some(p) => println!("{} rows, peak raw reading {p}", rows.len()),
        None => println!("{} rows", rows.len()),
    }
    println!("run directory: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn brain(a: BrainArgs) -> Result<ExitCode> {
    let mut cfg = BrainConfig {
        merge_every: a.merge_every,
        unit_targets: a.assign.iter().copied().collect(),
        ..BrainConfig::default()
    };
    if let Some(t) = a.target {
        cfg.default_target = t;
    }
    if a.merge_every == Some(0) {
        bail!("--merge-every must be at least 1");
    }
    let snapshot = json!({
        "listen": a.listen,
        "default_target": cfg.default_target,
        "unit_targets": cfg.unit_targets,
        "merge_every": cfg.merge_every,
        "until_byes": a.until_byes,
        "timeout_secs": a.timeout_secs,
    });
    let mut run = RunDir::create(
        &output_root(a.out.as_deref()),
        a.run_id.as_deref(),
        0,
        &snapshot,
    )?;
    let log_path = run.join("fleet_log.ndjson");
    cfg.log_path = Some(log_path.clone());
    let handle = brain_serve(a.listen.as_str(), cfg)
        .with_context(|| format!("listening on {}", a.listen))?;
    run.record(&log_path);
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;

    let deadline = a
        .timeout_secs
        .map(|s| Instant::now() + Duration::from_secs(s));
    let mut satisfied = a.until_byes.is_none();
    loop {
        if let Some(n) = a.until_byes {
            if handle.stats().byes >= n {
                satisfied = true;
                break;
            }
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }

    let st = handle.stats();
    let stats = json!({
        "connections": st.connections,
        "hellos": st.hellos,
        "telemetry": st.telemetry,
        "seq_regressions": st.seq_regressions,
        "malformed": st.malformed,
        "pushes": st.pushes,
        "merges": st.merges,
        "merge_failures": st.merge_failures,
        "byes": st.byes,
    });
    handle.shutdown();
    write_text(
        &mut run,
        "brain_stats.json",
        &(serde_json::to_string_pretty(&stats)? + "\n"),
    )?;
    println!(
        "{} telemetry messages from {} units, {} merges",
        st.telemetry, st.hellos, st.merges
    );
    let dir = run.finish()?;
    println!("run directory: {}", dir.display());
    if !satisfied {
        eprintln!(
            "timed out before {} units said BYE",
            a.until_byes.unwrap_or(0)
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn unit(a: UnitArgs) -> Result<ExitCode> {
    let flags = Overrides {
        target: a.target,
        telemetry_every: a.telemetry_every,
        ..a.common.overrides()
    };
    let s = Settings::resolve(a.common.config.as_deref(), &flags)?;
    let mut cfg = UnitConfig::new(UnitId(a.unit), s.trial.clone());
    cfg.telemetry_every = s.telemetry_every;
    cfg.step_delay = Duration::from_millis(a.step_delay_ms);
    cfg.stop_on_convergence = !a.run_to_cap;
    cfg.validate()?;
    let mut run = RunDir::create(
        &output_root(a.common.out.as_deref()),
        a.common.run_id.as_deref(),
        s.trial.seed,
        &s,
    )?;

    let out = unit_run(a.connect, &cfg)?;
    if let Some(addr) = a.connect {
        if out.connects == 0 {
            eprintln!("warning: brain at {addr} was unreachable; ran standalone");
        }
    }
    let (csv, meta) = out.record.save(run.path(), &format!("unit{}", a.unit))?;
    run.record(&csv);
    run.record(&meta);
    save_table(&mut run, "qtable.json", &out.table, &s.trial.agent)?;
    let summary = json!({
        "sent": out.sent,
        "dropped": out.dropped,
        "telemetry_queued": out.telemetry_queued,
        "pushes_queued": out.pushes_queued,
        "merges_applied": out.merges_applied,
        "merges_rejected": out.merges_rejected,
        "connects": out.connects,
        "targets": out.targets,
    });
    write_text(
        &mut run,
        "unit_outcome.json",
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    println!(
        "unit {} at {}: {}, {} messages sent, {} dropped",
        a.unit,
        out.record.config.target,
        steps_text(out.record.steps_to_converge),
        out.sent,
        out.dropped
    );
    let dir = run.finish()?;
    println!("run directory: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}
