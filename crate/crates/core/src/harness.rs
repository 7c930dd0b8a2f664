//! Trials, sweeps and their on-disk records.
//!
//! A trial runs the closed learning loop on one target until the agent has
//! sat on the target state for `convergence_hold` consecutive steps or the
//! step cap is hit. A sweep runs `trials_per_target` independently seeded
//! trials for every requested target, optionally on a worker pool, and
//! aggregates the outcome into box-plot statistics and histograms.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{discretize, target_band, AdcReading, EnvModel, Environment, PwmLevel};
use crate::error::{Error, Result};
use crate::rl::{
    reward_for, ActionIndex, AgentConfig, QAgent, QTable, StateIndex, TargetLabel, TargetLevel,
};
use crate::seed::{derive_seed, stream};
use crate::stats::{BoxStats, Histogram};

/// Histogram bin width for convergence times.
pub const TIME_BIN_MS: f64 = 5.0;

/// Histogram bin width for steps to convergence.
pub const STEPS_BIN: f64 = 500.0;

pub const EPISODE_CSV_HEADER: &str = "t,raw,smoothed,state,action,pwm,reward,epsilon";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub target: TargetLabel,
    pub max_steps: u64,
    pub convergence_hold: u64,
    pub env: EnvModel,
    pub agent: AgentConfig,
    pub seed: u64,
    pub initial_pwm: PwmLevel,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            target: TargetLabel::new(1).expect("L1 exists"),
            max_steps: 20_000,
            convergence_hold: 10,
            env: EnvModel::default(),
            agent: AgentConfig::default(),
            seed: 42,
            initial_pwm: PwmLevel::OFF,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.convergence_hold == 0 || self.max_steps < self.convergence_hold {
            return Err(Error::validation(format!(
                "need max_steps ({}) >= convergence_hold ({}) >= 1",
                self.max_steps, self.convergence_hold
            )));
        }
        self.env.validate()?;
        self.agent.validate()
    }

    /// Copy with the agent and environment streams split off the trial seed.
    pub fn seeded(&self) -> TrialConfig {
        let mut cfg = self.clone();
        cfg.agent.rng_seed = derive_seed(self.seed, &[stream::AGENT]);
        cfg.env.rng_seed = derive_seed(self.seed, &[stream::ENV]);
        cfg
    }

    /// The same trial with a different target and seed.
    pub fn for_trial(&self, target: TargetLabel, seed: u64) -> TrialConfig {
        TrialConfig {
            target,
            seed,
            ..self.clone()
        }
    }
}

/// Seed of trial `trial` at `target` within a sweep rooted at `base_seed`.
pub fn trial_seed(base_seed: u64, target: TargetLabel, trial: usize) -> u64 {
    derive_seed(base_seed, &[target.level() as u64, trial as u64])
}

/// One control step of a trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: u64,
    pub raw: u16,
    pub smoothed: f64,
    pub state: StateIndex,
    pub action: ActionIndex,
    pub pwm: PwmLevel,
    pub reward: i8,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub config: TrialConfig,
    pub trial: usize,
    pub rows: Vec<StepRow>,
    pub converged: bool,
    pub steps_to_converge: Option<u64>,
    /// Learning-loop wall time; up to convergence for converged trials.
    pub wall_time_ms: f64,
}

impl EpisodeRecord {
    pub fn states(&self) -> Vec<StateIndex> {
        self.rows.iter().map(|r| r.state).collect()
    }

    pub fn target(&self) -> TargetLevel {
        target_band(self.config.target)
    }
}

/// Stepwise driver of the learning loop, shared by standalone trials and fleet units.
#[derive(Debug)]
pub struct TrialRunner {
    cfg: TrialConfig,
    target: TargetLevel,
    agent: QAgent,
    env: Environment,
    pwm: PwmLevel,
    state: StateIndex,
    streak: u64,
    converged_at: Option<u64>,
    rows: Vec<StepRow>,
}

impl TrialRunner {
    /// Builds the runner and takes the initial sensor reading at the initial duty.
    pub fn new(cfg: &TrialConfig, table: Option<QTable>) -> Result<Self> {
        cfg.validate()?;
        let seeded = cfg.seeded();
        let agent = match table {
            Some(t) => QAgent::with_table(seeded.agent, t)?,
            None => QAgent::new(seeded.agent)?,
        };
        let mut env = Environment::new(seeded.env)?;
        let first = env.step(cfg.initial_pwm);
        Ok(TrialRunner {
            target: target_band(cfg.target),
            state: discretize(first.smoothed)?,
            pwm: cfg.initial_pwm,
            agent,
            env,
            streak: 0,
            converged_at: None,
            rows: Vec::with_capacity(cfg.max_steps.min(1 << 16) as usize),
            cfg: cfg.clone(),
        })
    }

    /// Runs one sense-act-learn iteration and returns its row.
    pub fn step(&mut self) -> Result<&StepRow> {
        let s = self.state;
        let epsilon = self.agent.epsilon();
        let action = self.agent.act(s)?;
        self.pwm = self.agent.apply(action, self.pwm)?;
        let AdcReading { raw, smoothed } = self.env.step(self.pwm);
        let s_next = discretize(smoothed)?;
        let reward = reward_for(s_next, self.target);
        self.agent.learn(s, action, reward, s_next)?;
        self.agent.decay();
        self.state = s_next;

        if s_next == self.target.target_state {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        let t = self.rows.len() as u64 + 1;
        if self.converged_at.is_none() && self.streak >= self.cfg.convergence_hold {
            self.converged_at = Some(t);
        }
        self.rows.push(StepRow {
            t,
            raw,
            smoothed,
            state: s_next,
            action,
            pwm: self.pwm,
            reward: reward.as_i8(),
            epsilon,
        });
        Ok(self.rows.last().expect("row just pushed"))
    }

    /// Switches the reward to a new target from the next step on.
    pub fn set_target(&mut self, label: TargetLabel) {
        self.target = target_band(label);
        self.cfg.target = label;
        self.streak = 0;
    }

    pub fn target(&self) -> TargetLevel {
        self.target
    }

    pub fn steps(&self) -> u64 {
        self.rows.len() as u64
    }

    pub fn state(&self) -> StateIndex {
        self.state
    }

    pub fn pwm(&self) -> PwmLevel {
        self.pwm
    }

    pub fn epsilon(&self) -> f64 {
        self.agent.epsilon()
    }

    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        self.agent.set_epsilon(epsilon)
    }

    /// Current run of consecutive steps on the current target.
    pub fn streak(&self) -> u64 {
        self.streak
    }

    pub fn holding_target(&self) -> bool {
        self.streak >= self.cfg.convergence_hold
    }

    pub fn first_convergence(&self) -> Option<u64> {
        self.converged_at
    }

    pub fn is_done(&self) -> bool {
        self.converged_at.is_some() || self.steps() >= self.cfg.max_steps
    }

    pub fn config(&self) -> &TrialConfig {
        &self.cfg
    }

    pub fn table(&self) -> &QTable {
        self.agent.table()
    }

    pub fn table_mut(&mut self) -> &mut QTable {
        self.agent.table_mut()
    }

    pub fn last_row(&self) -> Option<&StepRow> {
        self.rows.last()
    }

    pub fn finish(self, trial: usize, wall_time_ms: f64) -> (EpisodeRecord, QTable) {
        let record = EpisodeRecord {
            config: self.cfg,
            trial,
            rows: self.rows,
            converged: self.converged_at.is_some(),
            steps_to_converge: self.converged_at,
            wall_time_ms,
        };
        (record, self.agent.into_table())
    }
}

/// Runs one trial from a fresh all-zero table.
pub fn run_trial(cfg: &TrialConfig) -> Result<EpisodeRecord> {
    run_trial_with_table(cfg, None, 0).map(|(r, _)| r)
}

/// Runs one trial, optionally continuing from `table`, and hands back the final table.
pub fn run_trial_with_table(
    cfg: &TrialConfig,
    table: Option<QTable>,
    trial: usize,
) -> Result<(EpisodeRecord, QTable)> {
    let mut runner = TrialRunner::new(cfg, table)?;
    let start = Instant::now();
    while !runner.is_done() {
        runner.step()?;
    }
    let wall = start.elapsed().as_secs_f64() * 1e3;
    Ok(runner.finish(trial, wall))
}

/// Consecutive episodes at one target. With `carry_table` each episode starts
/// from the previous episode's final Q-table; otherwise every episode is fresh.
pub fn run_episodes(
    base: &TrialConfig,
    episodes: usize,
    carry_table: bool,
) -> Result<(Vec<EpisodeRecord>, QTable)> {
    let mut table = None;
    let mut records = Vec::with_capacity(episodes);
    let mut last = QTable::for_config(&base.agent)?;
    for i in 0..episodes {
        let cfg = base.for_trial(base.target, trial_seed(base.seed, base.target, i));
        let (record, t) =
            run_trial_with_table(&cfg, if carry_table { table.take() } else { None }, i)?;
        records.push(record);
        if carry_table {
            table = Some(t.clone());
        }
        last = t;
    }
    Ok((records, last))
}

/// Off-line training: fixed-length episodes from start duties drawn out of
/// `starts`, carrying the Q-table and the exploration rate from one episode
/// to the next until `total_steps` control steps have been spent.
pub fn train_for_steps(
    base: &TrialConfig,
    total_steps: u64,
    episode_steps: u64,
    starts: &[PwmLevel],
    table: Option<QTable>,
) -> Result<QTable> {
    if episode_steps == 0 || starts.is_empty() {
        return Err(Error::validation(
            "training needs episode_steps >= 1 and at least one start duty",
        ));
    }
    let mut picker = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, &[stream::INIT]));
    let mut table = table;
    let mut epsilon = base.agent.epsilon_initial;
    let mut spent = 0u64;
    let mut episode = 0u64;
    while spent < total_steps {
        let len = episode_steps.min(total_steps - spent);
        let mut cfg = base.clone();
        cfg.seed = derive_seed(base.seed, &[episode]);
        cfg.initial_pwm = starts[picker.random_range(0..starts.len())];
        cfg.max_steps = len.max(cfg.convergence_hold);
        let mut runner = TrialRunner::new(&cfg, table.take())?;
        runner.set_epsilon(epsilon)?;
        for _ in 0..len {
            runner.step()?;
        }
        epsilon = runner.epsilon();
        table = Some(runner.finish(0, 0.0).1);
        spent += len;
        episode += 1;
    }
    match table {
        Some(t) => Ok(t),
        None => QTable::for_config(&base.agent),
    }
}

/// First 0-based index `t` such that `trajectory[t + 1 - hold ..= t]` all equal the target state.
pub fn detect_convergence(
    trajectory: &[StateIndex],
    target: TargetLevel,
    hold: usize,
) -> Option<usize> {
    if hold == 0 {
        return None;
    }
    let mut streak = 0;
    for (t, &s) in trajectory.iter().enumerate() {
        if s == target.target_state {
            streak += 1;
            if streak >= hold {
                return Some(t);
            }
        } else {
            streak = 0;
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: TargetLabel,
    pub runs: usize,
    pub converged_count: usize,
    /// Steps to convergence over converged runs.
    pub steps: Option<BoxStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTiming {
    pub target: TargetLabel,
    pub time_ms: Option<BoxStats>,
}

/// Wall-clock side of a sweep summary. Kept apart from [`SweepSummary`]'s
/// serialized form because wall time differs between otherwise identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub time_ms: Option<BoxStats>,
    pub histogram: Histogram,
    pub per_target: Vec<TargetTiming>,
}

impl Default for TimingSummary {
    fn default() -> Self {
        TimingSummary {
            time_ms: None,
            histogram: Histogram {
                bin_width: TIME_BIN_MS,
                bins: Vec::new(),
            },
            per_target: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub total_runs: usize,
    pub converged_runs: usize,
    pub convergence_rate: f64,
    pub steps: Option<BoxStats>,
    pub steps_histogram: Histogram,
    pub per_target: Vec<TargetSummary>,
    #[serde(skip)]
    pub timing: TimingSummary,
}

impl SweepSummary {
    pub fn target(&self, label: TargetLabel) -> Option<&TargetSummary> {
        self.per_target.iter().find(|t| t.target == label)
    }
}

fn box_or_none(values: &[f64]) -> Result<Option<BoxStats>> {
    if values.is_empty() {
        Ok(None)
    } else {
        BoxStats::from_values(values).map(Some)
    }
}

/// Aggregates records into per-target and overall distributions.
pub fn summarize(records: &[EpisodeRecord]) -> Result<SweepSummary> {
    if records.is_empty() {
        return Err(Error::validation(
            "cannot summarise an empty set of records",
        ));
    }
    let mut labels: Vec<TargetLabel> = records.iter().map(|r| r.config.target).collect();
    labels.sort();
    labels.dedup();

    let converged: Vec<&EpisodeRecord> = records.iter().filter(|r| r.converged).collect();
    let steps_of = |rs: &[&EpisodeRecord]| -> Vec<f64> {
        rs.iter()
            .filter_map(|r| r.steps_to_converge)
            .map(|s| s as f64)
            .collect()
    };
    let times_of =
        |rs: &[&EpisodeRecord]| -> Vec<f64> { rs.iter().map(|r| r.wall_time_ms).collect() };

    let mut per_target = Vec::with_capacity(labels.len());
    let mut per_target_time = Vec::with_capacity(labels.len());
    for &label in &labels {
        let runs = records.iter().filter(|r| r.config.target == label).count();
        let conv: Vec<&EpisodeRecord> = converged
            .iter()
            .copied()
            .filter(|r| r.config.target == label)
            .collect();
        per_target.push(TargetSummary {
            target: label,
            runs,
            converged_count: conv.len(),
            steps: box_or_none(&steps_of(&conv))?,
        });
        per_target_time.push(TargetTiming {
            target: label,
            time_ms: box_or_none(&times_of(&conv))?,
        });
    }

    let all_steps = steps_of(&converged);
    let all_times = times_of(&converged);
    Ok(SweepSummary {
        total_runs: records.len(),
        converged_runs: converged.len(),
        convergence_rate: converged.len() as f64 / records.len() as f64,
        steps: box_or_none(&all_steps)?,
        steps_histogram: Histogram::new(&all_steps, STEPS_BIN)?,
        per_target,
        timing: TimingSummary {
            time_ms: box_or_none(&all_times)?,
            histogram: Histogram::new(&all_times, TIME_BIN_MS)?,
            per_target: per_target_time,
        },
    })
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<EpisodeRecord>,
    pub summary: SweepSummary,
}

/// Runs `trials_per_target` independent trials for each target on a pool of
/// `workers` threads (0 picks one per core). Output order is (target, trial)
/// regardless of scheduling.
pub fn run_sweep(
    targets: &[TargetLabel],
    trials_per_target: usize,
    base: &TrialConfig,
    workers: usize,
) -> Result<SweepOutcome> {
    if trials_per_target == 0 || targets.is_empty() {
        return Err(Error::validation(
            "a sweep needs at least one target and one trial",
        ));
    }
    base.validate()?;
    let jobs: Vec<(TargetLabel, usize)> = targets
        .iter()
        .flat_map(|&t| (0..trials_per_target).map(move |i| (t, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::validation(format!("worker pool: {e}")))?;
    let records: Result<Vec<EpisodeRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(label, i)| {
                let cfg = base.for_trial(label, trial_seed(base.seed, label, i));
                run_trial_with_table(&cfg, None, i).map(|(r, _)| r)
            })
            .collect()
    });
    let records = records?;
    let summary = summarize(&records)?;
    Ok(SweepOutcome { records, summary })
}

/// Sidecar metadata stored next to an episode CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub config: TrialConfig,
    pub trial: usize,
    pub seed: u64,
    pub converged: bool,
    pub steps: Option<u64>,
    pub wall_time_ms: f64,
}

pub fn write_episode_csv(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(EPISODE_CSV_HEADER.split(','))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an episode CSV, naming the first malformed data row (1-based) on failure.
pub fn read_episode_csv(path: &Path) -> Result<Vec<StepRow>> {
    let bad = |row: usize, reason: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header = rdr.headers().map_err(|e| bad(0, e.to_string()))?.clone();
    let header: Vec<&str> = header.iter().collect();
    if header != EPISODE_CSV_HEADER.split(',').collect::<Vec<_>>() {
        return Err(bad(
            0,
            format!(
                "expected header {EPISODE_CSV_HEADER:?}, got {:?}",
                header.join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<StepRow>().enumerate() {
        let row = rec.map_err(|e| bad(i + 1, e.to_string()))?;
        if !row.smoothed.is_finite() || !(row.reward == 1 || row.reward == -1) {
            return Err(bad(
                i + 1,
                "smoothed must be finite and reward must be +1 or -1".into(),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

impl EpisodeRecord {
    pub fn meta(&self) -> EpisodeMeta {
        EpisodeMeta {
            config: self.config.clone(),
            trial: self.trial,
            seed: self.config.seed,
            converged: self.converged,
            steps: self.steps_to_converge,
            wall_time_ms: self.wall_time_ms,
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        write_episode_csv(&csv_path, &self.rows)?;
        write_json(&json_path, &self.meta())?;
        Ok((csv_path, json_path))
    }

    pub fn load(csv_path: &Path, json_path: &Path) -> Result<Self> {
        let rows = read_episode_csv(csv_path)?;
        let meta: EpisodeMeta = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        Ok(EpisodeRecord {
            config: meta.config,
            trial: meta.trial,
            rows,
            converged: meta.converged,
            steps_to_converge: meta.steps,
            wall_time_ms: meta.wall_time_ms,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// File stem of a sweep record, e.g. `L4_trial03`.
pub fn record_stem(target: TargetLabel, trial: usize) -> String {
    format!("{target}_trial{trial:02}")
}

fn write_box_csv<'a>(
    path: &Path,
    rows: impl Iterator<Item = (TargetLabel, Option<&'a BoxStats>, usize)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "target",
        "min",
        "q1",
        "median",
        "q3",
        "max",
        "converged_count",
    ])?;
    for (label, stats, converged) in rows {
        let cells: Vec<String> = match stats {
            Some(b) => [b.min, b.q1, b.median, b.q3, b.max]
                .iter()
                .map(|v| v.to_string())
                .collect(),
            None => vec![String::new(); 5],
        };
        let mut rec = vec![label.to_string()];
        rec.extend(cells);
        rec.push(converged.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_histogram_csv(path: &Path, h: &Histogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lo", "hi", "count"])?;
    for b in &h.bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Output of [`persist_sweep`]: the record stems that failed to write, if any.
#[derive(Debug, Default)]
pub struct PersistReport {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(TargetLabel, usize, String)>,
}

/// Persists every record plus the summary files under `dir`:
/// `records/`, `summary.json`, `timing.json`, `boxplot_steps.csv`,
/// `boxplot_time.csv`, `histogram_steps.csv`, `histogram_time.csv`.
pub fn persist_sweep(dir: &Path, outcome: &SweepOutcome) -> Result<PersistReport> {
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir)?;
    let mut report = PersistReport::default();
    for r in &outcome.records {
        match r.save(&records_dir, &record_stem(r.config.target, r.trial)) {
            Ok((a, b)) => report.written.extend([a, b]),
            Err(e) => report
                .failed
                .push((r.config.target, r.trial, e.to_string())),
        }
    }
    let s = &outcome.summary;
    let files = [
        "summary.json",
        "timing.json",
        "boxplot_steps.csv",
        "boxplot_time.csv",
        "histogram_steps.csv",
        "histogram_time.csv",
    ];
    write_json(&dir.join(files[0]), s)?;
    write_json(&dir.join(files[1]), &s.timing)?;
    write_box_csv(
        &dir.join(files[2]),
        s.per_target
            .iter()
            .map(|t| (t.target, t.steps.as_ref(), t.converged_count)),
    )?;
    write_box_csv(
        &dir.join(files[3]),
        s.per_target
            .iter()
            .zip(&s.timing.per_target)
            .map(|(t, tt)| (t.target, tt.time_ms.as_ref(), t.converged_count)),
    )?;
    write_histogram_csv(&dir.join(files[4]), &s.steps_histogram)?;
    write_histogram_csv(&dir.join(files[5]), &s.timing.histogram)?;
    report.written.extend(files.iter().map(|f| dir.join(f)));
    Ok(report)
}

/// Reloads every record persisted by [`persist_sweep`], in (target, trial) order.
pub fn load_sweep_records(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let records_dir = dir.join("records");
    let mut stems: Vec<String> = fs::read_dir(&records_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension()? != "csv" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    stems.sort();
    let mut records = stems
        .iter()
        .map(|stem| {
            EpisodeRecord::load(
                &records_dir.join(format!("{stem}.csv")),
                &records_dir.join(format!("{stem}.json")),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| (r.config.target, r.trial));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Scenario;

    fn st(v: &[usize]) -> Vec<StateIndex> {
        v.iter().map(|&i| StateIndex::new(i).unwrap()).collect()
    }

    fn target_state(state: usize) -> TargetLevel {
        TargetLevel {
            label: TargetLabel::new(1).unwrap(),
            target_state: StateIndex::new(state).unwrap(),
        }
    }

    #[test]
    fn detect_examples() {
        assert_eq!(
            detect_convergence(&st(&[3, 3, 3]), target_state(3), 3),
            Some(2)
        );
        assert_eq!(
            detect_convergence(&st(&[3, 4, 3]), target_state(3), 2),
            None
        );
        assert_eq!(
            detect_convergence(&st(&[1, 3, 3, 4]), target_state(3), 2),
            Some(2)
        );
        assert_eq!(detect_convergence(&st(&[]), target_state(3), 1), None);
    }

    #[test]
    fn already_at_target_converges_on_first_step() {
        // Ambient alone puts the sensor in state 3 and the LED does nothing.
        let cfg = TrialConfig {
            target: TargetLabel::new(1).unwrap(),
            convergence_hold: 1,
            max_steps: 100,
            env: EnvModel {
                scenario: Scenario::constant(56.0),
                led_gain: 0.0,
                sensor_noise_sigma: 0.0,
                ..EnvModel::default()
            },
            ..TrialConfig::default()
        };
        let r = run_trial(&cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.steps_to_converge, Some(1));
        assert_eq!(r.rows.len(), 1);
    }

    #[test]
    fn unreachable_target_hits_the_cap() {
        let cfg = TrialConfig {
            target: TargetLabel::new(7).unwrap(),
            max_steps: 10,
            convergence_hold: 10,
            env: EnvModel {
                scenario: Scenario::constant(20.0),
                led_gain: 0.0,
                ..EnvModel::default()
            },
            ..TrialConfig::default()
        };
        let r = run_trial(&cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.steps_to_converge, None);
        assert_eq!(r.rows.len(), 10);
    }

    #[test]
    fn invalid_trial_config_rejected() {
        let cfg = TrialConfig {
            max_steps: 5,
            convergence_hold: 10,
            ..TrialConfig::default()
        };
        assert!(run_trial(&cfg).is_err());
    }

    #[test]
    fn recorded_convergence_matches_detector() {
        let cfg = TrialConfig {
            target: TargetLabel::new(3).unwrap(),
            ..TrialConfig::default()
        };
        let r = run_trial(&cfg).unwrap();
        assert!(r.converged);
        let idx =
            detect_convergence(&r.states(), r.target(), cfg.convergence_hold as usize).unwrap();
        // Steps are counted from 1, trajectory indices from 0.
        assert_eq!(r.steps_to_converge, Some(idx as u64 + 1));
        assert_eq!(r.rows.len() as u64, r.steps_to_converge.unwrap());
    }

    #[test]
    fn rows_are_consistent() {
        let r = run_trial(&TrialConfig::default()).unwrap();
        for (i, row) in r.rows.iter().enumerate() {
            assert_eq!(row.t, i as u64 + 1);
            assert_eq!(row.state, discretize(row.smoothed).unwrap());
            let expected = if row.state == r.target().target_state {
                1
            } else {
                -1
            };
            assert_eq!(row.reward, expected);
        }
    }

    #[test]
    fn summarize_single_and_empty() {
        let r = run_trial(&TrialConfig::default()).unwrap();
        let s = summarize(std::slice::from_ref(&r)).unwrap();
        assert_eq!(s.total_runs, 1);
        assert_eq!(
            s.steps.as_ref().unwrap().median,
            r.steps_to_converge.unwrap() as f64
        );
        assert_eq!(s.timing.time_ms.as_ref().unwrap().median, r.wall_time_ms);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn one_by_one_sweep() {
        let base = TrialConfig::default();
        let out = run_sweep(&[TargetLabel::new(1).unwrap()], 1, &base, 1).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(
            out.summary.steps.as_ref().unwrap().median,
            out.records[0].steps_to_converge.unwrap() as f64
        );
    }

    #[test]
    fn csv_round_trip_and_bad_row() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_trial(&TrialConfig::default()).unwrap();
        let (csv_path, json_path) = r.save(dir.path(), "ep").unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with(EPISODE_CSV_HEADER));
        let back = EpisodeRecord::load(&csv_path, &json_path).unwrap();
        assert_eq!(back, r);

        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "2,abc,1.0,0,0,0,-1,0.5";
        let broken = dir.path().join("broken.csv");
        fs::write(&broken, lines.join("\n")).unwrap();
        match read_episode_csv(&broken) {
            Err(Error::MalformedRecord { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
