//! Layered experiment settings: built-in defaults, then an optional JSON
//! config file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use luxloop_core::energy::ControllerKind;
use luxloop_core::env::{EnvModel, Scenario};
use luxloop_core::harness::TrialConfig;
use luxloop_core::rl::{AgentConfig, TargetLabel};
use serde::{Deserialize, Serialize};

/// Everything a config file may set. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub target: Option<TargetLabel>,
    pub targets: Option<Vec<TargetLabel>>,
    pub trials: Option<usize>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub hold: Option<u64>,
    pub carry_qtable: Option<bool>,
    pub workers: Option<usize>,
    pub scenario: Option<PathBuf>,
    pub env: Option<EnvModel>,
    pub agent: Option<AgentConfig>,
    pub p_max: Option<f64>,
    pub controllers: Option<Vec<String>>,
    pub duration: Option<usize>,
    pub train_steps: Option<u64>,
    pub merge_every: Option<u64>,
    pub telemetry_every: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Resolved settings, snapshotted into every run manifest.
#[derive(Clone, Debug, Serialize)]
pub struct Settings {
    pub trial: TrialConfig,
    pub targets: Vec<TargetLabel>,
    pub trials: usize,
    pub episodes: usize,
    pub carry_qtable: bool,
    pub workers: usize,
    pub p_max: f64,
    pub controllers: Vec<ControllerKind>,
    pub duration: usize,
    pub train_steps: u64,
    pub merge_every: Option<u64>,
    pub telemetry_every: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            trial: TrialConfig::default(),
            targets: TargetLabel::all().collect(),
            trials: 10,
            episodes: 1,
            carry_qtable: false,
            workers: 0,
            p_max: 6.0,
            controllers: vec![
                ControllerKind::Rl,
                ControllerKind::open_loop(),
                ControllerKind::closed_loop(),
            ],
            duration: 1000,
            train_steps: 50_000,
            merge_every: None,
            telemetry_every: 10,
        }
    }
}

/// Flags shared by every experiment command; `None` leaves the lower layer alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub target: Option<TargetLabel>,
    pub targets: Option<Vec<TargetLabel>>,
    pub trials: Option<usize>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub hold: Option<u64>,
    pub carry_qtable: bool,
    pub workers: Option<usize>,
    pub scenario: Option<PathBuf>,
    pub p_max: Option<f64>,
    pub controllers: Option<Vec<String>>,
    pub duration: Option<usize>,
    pub train_steps: Option<u64>,
    pub merge_every: Option<u64>,
    pub telemetry_every: Option<u64>,
}

pub fn parse_controller(name: &str) -> Result<ControllerKind> {
    Ok(match name.trim() {
        "rl" => ControllerKind::Rl,
        "open" | "open_loop" => ControllerKind::open_loop(),
        "closed" | "closed_loop" => ControllerKind::closed_loop(),
        other => bail!("unknown controller {other:?}; expected rl, open or closed"),
    })
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))
}

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: &Overrides) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            s.apply_file(
                FileConfig::load(path)?,
                path.parent().unwrap_or(Path::new(".")),
            )?;
        }
        s.apply_flags(flags)?;
        s.validate()?;
        Ok(s)
    }

    fn apply_file(&mut self, f: FileConfig, base_dir: &Path) -> Result<()> {
        if let Some(env) = f.env {
            self.trial.env = env;
        }
        if let Some(agent) = f.agent {
            self.trial.agent = agent;
        }
        if let Some(p) = f.scenario {
            let p = if p.is_relative() { base_dir.join(p) } else { p };
            self.trial.env.scenario = load_scenario(&p)?;
        }
        if let Some(v) = f.target {
            self.trial.target = v;
        }
        if let Some(v) = f.targets {
            self.targets = v;
        }
        if let Some(v) = f.seed {
            self.trial.seed = v;
        }
        if let Some(v) = f.max_steps {
            self.trial.max_steps = v;
        }
        if let Some(v) = f.hold {
            self.trial.convergence_hold = v;
        }
        if let Some(names) = f.controllers {
            self.controllers = names
                .iter()
                .map(|n| parse_controller(n))
                .collect::<Result<_>>()?;
        }
        self.trials = f.trials.unwrap_or(self.trials);
        self.episodes = f.episodes.unwrap_or(self.episodes);
        self.carry_qtable = f.carry_qtable.unwrap_or(self.carry_qtable);
        self.workers = f.workers.unwrap_or(self.workers);
        self.p_max = f.p_max.unwrap_or(self.p_max);
        self.duration = f.duration.unwrap_or(self.duration);
        self.train_steps = f.train_steps.unwrap_or(self.train_steps);
        self.merge_every = f.merge_every.or(self.merge_every);
        self.telemetry_every = f.telemetry_every.unwrap_or(self.telemetry_every);
        Ok(())
    }

    fn apply_flags(&mut self, o: &Overrides) -> Result<()> {
        if let Some(p) = &o.scenario {
            self.trial.env.scenario = load_scenario(p)?;
        }
        if let Some(v) = o.target {
            self.trial.target = v;
        }
        if let Some(v) = &o.targets {
            self.targets = v.clone();
        }
        if let Some(v) = o.seed {
            self.trial.seed = v;
        }
        if let Some(v) = o.max_steps {
            self.trial.max_steps = v;
        }
        if let Some(v) = o.hold {
            self.trial.convergence_hold = v;
        }
        if let Some(names) = &o.controllers {
            self.controllers = names
                .iter()
                .map(|n| parse_controller(n))
                .collect::<Result<_>>()?;
        }
        self.carry_qtable |= o.carry_qtable;
        self.trials = o.trials.unwrap_or(self.trials);
        self.episodes = o.episodes.unwrap_or(self.episodes);
        self.workers = o.workers.unwrap_or(self.workers);
        self.p_max = o.p_max.unwrap_or(self.p_max);
        self.duration = o.duration.unwrap_or(self.duration);
        self.train_steps = o.train_steps.unwrap_or(self.train_steps);
        self.merge_every = o.merge_every.or(self.merge_every);
        self.telemetry_every = o.telemetry_every.unwrap_or(self.telemetry_every);
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.trial.validate()?;
        if self.targets.is_empty() {
            bail!("--targets needs at least one label");
        }
        if self.trials == 0 || self.episodes == 0 || self.duration == 0 || self.telemetry_every == 0
        {
            bail!("trials, episodes, duration and telemetry interval must be at least 1");
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            bail!("--p-max must be a positive number of watts");
        }
        if self.controllers.is_empty() {
            bail!("--controllers needs at least one of rl, open, closed");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"seed": 7, "trials": 3, "max_steps": 900, "env": {"led_gain": 1000.0}}"#,
        )
        .unwrap();
        let flags = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        let s = Settings::resolve(Some(&path), &flags).unwrap();
        assert_eq!(s.trial.seed, 9);
        assert_eq!(s.trials, 3);
        assert_eq!(s.trial.max_steps, 900);
        assert_eq!(s.trial.env.led_gain, 1000.0);
        assert_eq!(s.trial.convergence_hold, 10);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seeds": 7}"#).unwrap();
        assert!(Settings::resolve(Some(&path), &Overrides::default()).is_err());
    }

    #[test]
    fn controller_names() {
        assert_eq!(
            parse_controller("open").unwrap(),
            ControllerKind::open_loop()
        );
        assert!(parse_controller("pid").is_err());
    }
}
