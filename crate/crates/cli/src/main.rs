//! `luxloop`: train, sweep, compare, replay and fleet commands.

mod commands;
mod run_dir;
mod settings;
mod svg;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use luxloop_core::rl::TargetLabel;

use crate::settings::Overrides;

#[derive(Parser, Debug)]
#[command(
    name = "luxloop",
    version,
    about = "Q-learning LED dimming experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train at one target, one or more episodes.
    Train(TrainArgs),
    /// Independent trials across targets, with summary statistics.
    Sweep(SweepArgs),
    /// Energy use of the learned policy against the fixed baselines.
    Compare(CompareArgs),
    /// Turn a recorded episode or telemetry log into a plot-ready CSV and chart.
    Replay(ReplayArgs),
    /// Networked units and the aggregating brain.
    #[command(subcommand)]
    Fleet(FleetCommand),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default `$LUXLOOP_OUT`, else ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name (default: timestamp and seed).
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario JSON.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Consecutive on-target steps that count as convergence.
    #[arg(long)]
    hold: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            scenario: self.scenario.clone(),
            max_steps: self.max_steps,
            hold: self.hold,
            ..Overrides::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Target level, L1..L13.
    #[arg(long)]
    target: Option<TargetLabel>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Start each episode from the previous episode's Q-table.
    #[arg(long)]
    carry_qtable: bool,
    /// Initial Q-table JSON.
    #[arg(long)]
    qtable: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated target levels (default L1..L13).
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<TargetLabel>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    workers: Option<usize>,
    /// Also write SVG charts.
    #[arg(long)]
    svg: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    target: Option<TargetLabel>,
    /// Trained Q-table JSON for the rl controller.
    #[arg(long, conflicts_with = "train_first")]
    qtable: Option<PathBuf>,
    /// Train a Q-table on the scenario before comparing.
    #[arg(long)]
    train_first: bool,
    /// Control steps spent by --train-first.
    #[arg(long)]
    train_steps: Option<u64>,
    /// Comma-separated subset of rl, open, closed.
    #[arg(long, value_delimiter = ',')]
    controllers: Option<Vec<String>>,
    /// LED power at full duty, in watts.
    #[arg(long)]
    p_max: Option<f64>,
    /// Evaluation length in control steps.
    #[arg(long)]
    duration: Option<usize>,
    /// Exit nonzero if rl consumes more than open loop.
    #[arg(long)]
    assert_ordering: bool,
    #[arg(long)]
    svg: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Episode CSV, or a brain NDJSON log with --unit.
    input: PathBuf,
    /// Treat the input as a brain log and replay this unit's telemetry.
    #[arg(long)]
    unit: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand, Debug)]
enum FleetCommand {
    /// Accept units, log their telemetry and merge Q-tables.
    Brain(BrainArgs),
    /// Run one learning unit, reporting to a brain if one is reachable.
    Unit(UnitArgs),
}

#[derive(Args, Debug)]
pub struct BrainArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Default target sent to units on HELLO.
    #[arg(long)]
    target: Option<TargetLabel>,
    /// Per-unit targets, e.g. `3=L9`. Repeatable.
    #[arg(long = "assign", value_parser = parse_assignment)]
    assign: Vec<(u32, TargetLabel)>,
    /// Merge Q-tables every this many unit steps.
    #[arg(long)]
    merge_every: Option<u64>,
    /// Exit after this many units have said BYE.
    #[arg(long)]
    until_byes: Option<u64>,
    /// Exit after this many seconds.
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct UnitArgs {
    #[command(flatten)]
    common: Common,
    /// Brain address.
    #[arg(long)]
    connect: Option<SocketAddr>,
    #[arg(long, default_value_t = 1)]
    unit: u32,
    #[arg(long)]
    target: Option<TargetLabel>,
    #[arg(long)]
    telemetry_every: Option<u64>,
    /// Pause after every control step.
    #[arg(long, default_value_t = 0)]
    step_delay_ms: u64,
    /// Keep running to --max-steps after convergence.
    #[arg(long)]
    run_to_cap: bool,
}

fn parse_assignment(s: &str) -> Result<(u32, TargetLabel), String> {
    let (unit, label) = s.split_once('=').ok_or("expected UNIT=LABEL, e.g. 3=L9")?;
    let unit: u32 = unit
        .trim()
        .parse()
        .map_err(|e| format!("bad unit id {unit:?}: {e}"))?;
    let label: TargetLabel = label.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((unit, label))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Compare(a) => commands::compare(a),
        Command::Replay(a) => commands::replay(a),
        Command::Fleet(FleetCommand::Brain(a)) => commands::brain(a),
        Command::Fleet(FleetCommand::Unit(a)) => commands::unit(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
