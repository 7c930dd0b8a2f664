//! Reference controllers and LED power accounting.
//!
//! Power is modelled as proportional to duty: `P = p_max * duty / 255`.
//! Savings are measured against the full-brightness open-loop reference,
//! so the open-loop controller at duty 255 always saves exactly nothing.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::target_band;
use crate::env::{bin_center, discretize, EnvModel, Environment, PwmLevel, PWM_MAX};
use crate::error::{Error, Result};
use crate::harness::write_json;
use crate::rl::{apply_action, QTable, TargetLabel, TargetLevel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerKind {
    /// Greedy policy of a trained Q-table (no exploration, no learning).
    Rl,
    /// Constant duty, no feedback.
    OpenLoop { duty: u8 },
    /// Bang-bang style nudging around the target bin centre.
    ClosedLoop { band: f64, step: u8 },
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Rl => "rl",
            ControllerKind::OpenLoop { .. } => "open_loop",
            ControllerKind::ClosedLoop { .. } => "closed_loop",
        }
    }

    pub fn open_loop() -> Self {
        ControllerKind::OpenLoop { duty: PWM_MAX }
    }

    pub fn closed_loop() -> Self {
        ControllerKind::ClosedLoop { band: 8.0, step: 8 }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn open_loop_controller(_t: u64, duty: PwmLevel) -> PwmLevel {
    duty
}

/// Steps the duty up (down) by `step` when the smoothed reading sits below
/// (above) the target bin centre by more than `band` counts.
pub fn closed_loop_controller(
    smoothed: f64,
    target: TargetLevel,
    band: f64,
    step: u8,
    current: PwmLevel,
) -> PwmLevel {
    let center = bin_center(target.target_state);
    if smoothed < center - band {
        current.offset(step as i32)
    } else if smoothed > center + band {
        current.offset(-(step as i32))
    } else {
        current
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerUse {
    pub consumed_watts: f64,
    pub saved_watts: f64,
    pub duration_steps: usize,
}

/// Mean electrical power of a duty trace and the saving against `p_max`.
pub fn energy_account(pwm_trace: &[PwmLevel], p_max: f64) -> Result<PowerUse> {
    if pwm_trace.is_empty() {
        return Err(Error::validation(
            "energy accounting needs a non-empty trace",
        ));
    }
    if !(p_max > 0.0 && p_max.is_finite()) {
        return Err(Error::validation("p_max must be positive"));
    }
    let duty_sum: u64 = pwm_trace.iter().map(|p| p.duty() as u64).sum();
    let full = PWM_MAX as u64 * pwm_trace.len() as u64;
    let consumed = p_max * duty_sum as f64 / full as f64;
    Ok(PowerUse {
        consumed_watts: consumed,
        saved_watts: p_max - consumed,
        duration_steps: pwm_trace.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEntry {
    pub controller: String,
    pub consumed_watts: f64,
    pub saved_watts: f64,
    pub duration_steps: usize,
    /// Mean of `|state - target_state|` over the run, in states.
    pub mean_abs_state_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub target: TargetLabel,
    pub p_max: f64,
    pub entries: Vec<EnergyEntry>,
}

impl EnergyReport {
    pub fn entry(&self, controller: &str) -> Option<&EnergyEntry> {
        self.entries.iter().find(|e| e.controller == controller)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "controller",
            "consumed_watts",
            "saved_watts",
            "mean_abs_state_error",
        ])?;
        for e in &self.entries {
            w.write_record([
                e.controller.clone(),
                e.consumed_watts.to_string(),
                e.saved_watts.to_string(),
                e.mean_abs_state_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub p_max: f64,
    pub controllers: Vec<ControllerKind>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            p_max: 6.0,
            controllers: vec![
                ControllerKind::Rl,
                ControllerKind::open_loop(),
                ControllerKind::closed_loop(),
            ],
        }
    }
}

/// Traces of one controller run.
#[derive(Clone, Debug, Default)]
pub struct ControllerRun {
    pub pwm: Vec<PwmLevel>,
    pub smoothed: Vec<f64>,
    pub states: Vec<usize>,
}

/// Runs `controller` for `duration_steps` steps on a fresh instance of `model`.
/// The environment seed comes from the model, so every controller sees the same noise.
pub fn run_controller(
    controller: &ControllerKind,
    target: TargetLevel,
    model: &EnvModel,
    duration_steps: usize,
    policy: Option<&QTable>,
) -> Result<ControllerRun> {
    let mut env = Environment::new(model.clone())?;
    let mut pwm = PwmLevel::OFF;
    let mut reading = env.step(pwm);
    let mut run = ControllerRun::default();
    for t in 0..duration_steps as u64 {
        let state = discretize(reading.smoothed)?;
        pwm = match controller {
            ControllerKind::OpenLoop { duty } => open_loop_controller(t, PwmLevel::new(*duty)),
            ControllerKind::ClosedLoop { band, step } => {
                if *step == 0 || *band < 0.0 {
                    return Err(Error::validation(
                        "closed loop needs step >= 1 and band >= 0",
                    ));
                }
                closed_loop_controller(reading.smoothed, target, *band, *step, pwm)
            }
            ControllerKind::Rl => {
                let table = policy.ok_or_else(|| {
                    Error::validation("the rl controller needs a trained Q-table")
                })?;
                let action = table.greedy_action(state)?;
                apply_action(table.action_deltas(), action, pwm)?
            }
        };
        reading = env.step(pwm);
        run.pwm.push(pwm);
        run.smoothed.push(reading.smoothed);
        run.states.push(discretize(reading.smoothed)?.get());
    }
    Ok(run)
}

/// Runs every configured controller on the same scenario and seed.
pub fn compare_controllers(
    target: TargetLabel,
    model: &EnvModel,
    duration_steps: usize,
    trained_policy: Option<&QTable>,
    cfg: &CompareConfig,
) -> Result<EnergyReport> {
    if duration_steps == 0 {
        return Err(Error::validation("comparison needs at least one step"));
    }
    let level = target_band(target);
    let mut entries = Vec::with_capacity(cfg.controllers.len());
    for c in &cfg.controllers {
        let run = run_controller(c, level, model, duration_steps, trained_policy)?;
        let power = energy_account(&run.pwm, cfg.p_max)?;
        let err: f64 = run
            .states
            .iter()
            .map(|&s| s.abs_diff(level.target_state.get()) as f64)
            .sum::<f64>()
            / run.states.len() as f64;
        entries.push(EnergyEntry {
            controller: c.name().to_string(),
            consumed_watts: power.consumed_watts,
            saved_watts: power.saved_watts,
            duration_steps: power.duration_steps,
            mean_abs_state_error: err,
        });
    }
    Ok(EnergyReport {
        target,
        p_max: cfg.p_max,
        entries,
    })
}
