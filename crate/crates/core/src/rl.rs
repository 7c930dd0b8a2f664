//! Tabular Q-learning: states, actions, the sparse reward, the value table
//! and the epsilon-greedy agent that owns one.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::PwmLevel;
use crate::error::{Error, Result};

/// Number of discrete light states produced by the sensor chain.
pub const NUM_STATES: usize = 64;

/// Number of target levels, `L1` through `L13`.
pub const NUM_TARGETS: usize = 13;

/// Discrete light state in `0..64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct StateIndex(u8);

impl StateIndex {
    pub const MAX: StateIndex = StateIndex((NUM_STATES - 1) as u8);

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_STATES {
            Ok(StateIndex(index as u8))
        } else {
            Err(Error::Index {
                what: "state",
                index,
                limit: NUM_STATES,
            })
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    pub fn distance(self, other: StateIndex) -> usize {
        self.get().abs_diff(other.get())
    }
}

impl TryFrom<u8> for StateIndex {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        StateIndex::new(v as usize)
    }
}

impl From<StateIndex> for u8 {
    fn from(s: StateIndex) -> u8 {
        s.0
    }
}

impl fmt::Display for StateIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into an agent's ordered action set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionIndex(usize);

impl ActionIndex {
    pub fn new(index: usize) -> Self {
        ActionIndex(index)
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl fmt::Display for ActionIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Applies the duty change for `action` to `pwm`, clamping to the PWM range.
pub fn apply_action(deltas: &[i32], action: ActionIndex, pwm: PwmLevel) -> Result<PwmLevel> {
    let delta = deltas.get(action.get()).ok_or(Error::Index {
        what: "action",
        index: action.get(),
        limit: deltas.len(),
    })?;
    Ok(pwm.offset(*delta))
}

/// Sparse binary reward: +1 on the target state, -1 anywhere else.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reward {
    Hit,
    Miss,
}

impl Reward {
    pub fn value(self) -> f64 {
        match self {
            Reward::Hit => 1.0,
            Reward::Miss => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Reward::Hit => 1,
            Reward::Miss => -1,
        }
    }
}

pub fn reward_for(s: StateIndex, target: TargetLevel) -> Reward {
    if s == target.target_state {
        Reward::Hit
    } else {
        Reward::Miss
    }
}

/// One of the thirteen set-point labels, `L1` ..= `L13`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TargetLabel(u8);

impl TargetLabel {
    pub fn new(level: usize) -> Result<Self> {
        if (1..=NUM_TARGETS).contains(&level) {
            Ok(TargetLabel(level as u8))
        } else {
            Err(Error::validation(format!(
                "unknown target level L{level}; valid labels are {}",
                valid_labels()
            )))
        }
    }

    /// 1-based level number.
    pub fn level(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = TargetLabel> {
        (1..=NUM_TARGETS).map(|i| TargetLabel(i as u8))
    }
}

fn valid_labels() -> String {
    format!("L1..L{NUM_TARGETS}")
}

impl FromStr for TargetLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        let digits = trimmed
            .strip_prefix('L')
            .or_else(|| trimmed.strip_prefix('l'))
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown target level {s:?}; valid labels are {}",
                    valid_labels()
                ))
            })?;
        let level: usize = digits.parse().map_err(|_| {
            Error::validation(format!(
                "unknown target level {s:?}; valid labels are {}",
                valid_labels()
            ))
        })?;
        TargetLabel::new(level)
    }
}

impl TryFrom<String> for TargetLabel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TargetLabel> for String {
    fn from(l: TargetLabel) -> String {
        l.to_string()
    }
}

impl fmt::Display for TargetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// A set point: its label and the single discrete state it stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetLevel {
    pub label: TargetLabel,
    pub target_state: StateIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_initial: f64,
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub action_deltas: Vec<i32>,
    pub rng_seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.9,
            epsilon_initial: 0.5,
            epsilon_decay: 0.999,
            epsilon_min: 0.01,
            action_deltas: vec![-32, -8, 0, 8, 32],
            rng_seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::validation(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::validation(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(Error::validation(format!(
                "epsilon_decay must be in (0, 1], got {}",
                self.epsilon_decay
            )));
        }
        let eps_ok = (0.0..=1.0).contains(&self.epsilon_min)
            && (0.0..=1.0).contains(&self.epsilon_initial)
            && self.epsilon_min <= self.epsilon_initial;
        if !eps_ok {
            return Err(Error::validation(format!(
                "need 0 <= epsilon_min ({}) <= epsilon_initial ({}) <= 1",
                self.epsilon_min, self.epsilon_initial
            )));
        }
        if self.action_deltas.is_empty() {
            return Err(Error::validation("action set is empty"));
        }
        Ok(())
    }
}

/// Dense `num_states x num_actions` action-value table with visit counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQTable")]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    action_deltas: Vec<i32>,
    values: Vec<f64>,
    visit_counts: Vec<u64>,
}

#[derive(Deserialize)]
struct RawQTable {
    num_states: usize,
    num_actions: usize,
    action_deltas: Vec<i32>,
    values: Vec<f64>,
    visit_counts: Vec<u64>,
}

impl TryFrom<RawQTable> for QTable {
    type Error = Error;

    fn try_from(raw: RawQTable) -> Result<Self> {
        QTable::from_parts(
            raw.num_states,
            raw.action_deltas,
            raw.values,
            raw.visit_counts,
        )
        .and_then(|t| {
            if t.num_actions != raw.num_actions {
                Err(Error::ShapeMismatch(format!(
                    "num_actions {} but {} action deltas",
                    raw.num_actions, t.num_actions
                )))
            } else {
                Ok(t)
            }
        })
    }
}

impl QTable {
    /// All-zero table over `num_states` states and the given action set.
    pub fn new(num_states: usize, action_deltas: Vec<i32>) -> Result<Self> {
        if num_states == 0 || action_deltas.is_empty() {
            return Err(Error::ShapeMismatch(
                "Q-table needs at least one state and one action".into(),
            ));
        }
        let n = num_states * action_deltas.len();
        Ok(QTable {
            num_states,
            num_actions: action_deltas.len(),
            action_deltas,
            values: vec![0.0; n],
            visit_counts: vec![0; n],
        })
    }

    pub fn for_config(cfg: &AgentConfig) -> Result<Self> {
        QTable::new(NUM_STATES, cfg.action_deltas.clone())
    }

    pub fn from_parts(
        num_states: usize,
        action_deltas: Vec<i32>,
        values: Vec<f64>,
        visit_counts: Vec<u64>,
    ) -> Result<Self> {
        let mut t = QTable::new(num_states, action_deltas)?;
        let n = t.values.len();
        if values.len() != n || visit_counts.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} entries, got {} values and {} visit counts",
                values.len(),
                visit_counts.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite Q-value at flat index {i}"
            )));
        }
        t.values = values;
        t.visit_counts = visit_counts;
        Ok(t)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn action_deltas(&self) -> &[i32] {
        &self.action_deltas
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn visit_counts(&self) -> &[u64] {
        &self.visit_counts
    }

    /// Same state count and the same ordered action set.
    pub fn same_shape(&self, other: &QTable) -> bool {
        self.num_states == other.num_states && self.action_deltas == other.action_deltas
    }

    fn flat(&self, s: usize, a: usize) -> Result<usize> {
        if s >= self.num_states {
            return Err(Error::Index {
                what: "state",
                index: s,
                limit: self.num_states,
            });
        }
        if a >= self.num_actions {
            return Err(Error::Index {
                what: "action",
                index: a,
                limit: self.num_actions,
            });
        }
        Ok(s * self.num_actions + a)
    }

    pub fn get(&self, s: StateIndex, a: ActionIndex) -> Result<f64> {
        Ok(self.values[self.flat(s.get(), a.get())?])
    }

    pub fn visits(&self, s: StateIndex, a: ActionIndex) -> Result<u64> {
        Ok(self.visit_counts[self.flat(s.get(), a.get())?])
    }

    /// Overwrites one value; the visit count is left alone.
    pub fn set(&mut self, s: StateIndex, a: ActionIndex, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::validation("Q-values must be finite"));
        }
        let i = self.flat(s.get(), a.get())?;
        self.values[i] = value;
        Ok(())
    }

    pub fn row(&self, s: StateIndex) -> Result<&[f64]> {
        let start = self.flat(s.get(), 0)?;
        Ok(&self.values[start..start + self.num_actions])
    }

    pub fn max_value(&self, s: StateIndex) -> Result<f64> {
        Ok(self
            .row(s)?
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Argmax over `Q(s, .)` with the lowest-index tie-break.
    pub fn greedy_action(&self, s: StateIndex) -> Result<ActionIndex> {
        let row = self.row(s)?;
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        Ok(ActionIndex(best))
    }

    /// Replaces values and visit counts with those of `other`, which must have the same shape.
    pub fn replace_with(&mut self, other: &QTable) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "table {}x{:?} vs {}x{:?}",
                self.num_states, self.action_deltas, other.num_states, other.action_deltas
            )));
        }
        self.values.copy_from_slice(&other.values);
        self.visit_counts.copy_from_slice(&other.visit_counts);
        Ok(())
    }
}

/// One Bellman backup of entry `(s, a)` toward `r + gamma * max_a' Q(s_next, a')`.
///
/// Returns the new value. No other entry is touched.
pub fn q_update(
    table: &mut QTable,
    s: StateIndex,
    a: ActionIndex,
    r: Reward,
    s_next: StateIndex,
    cfg: &AgentConfig,
) -> Result<f64> {
    if !cfg.alpha.is_finite() || !cfg.gamma.is_finite() {
        return Err(Error::validation("alpha and gamma must be finite"));
    }
    let i = table.flat(s.get(), a.get())?;
    let best_next = table.max_value(s_next)?;
    let old = table.values[i];
    let new = old + cfg.alpha * (r.value() + cfg.gamma * best_next - old);
    if !new.is_finite() {
        return Err(Error::validation(format!(
            "update of ({s}, {a}) produced a non-finite value"
        )));
    }
    table.values[i] = new;
    table.visit_counts[i] += 1;
    Ok(new)
}

/// Epsilon-greedy choice; greedy ties are broken uniformly at random.
pub fn select_action<R: Rng + ?Sized>(
    table: &QTable,
    s: StateIndex,
    epsilon: f64,
    rng: &mut R,
) -> Result<ActionIndex> {
    let n = table.num_actions();
    if rng.random::<f64>() < epsilon {
        return Ok(ActionIndex(rng.random_range(0..n)));
    }
    let row = table.row(s)?;
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..n).filter(|&i| row[i] == best).collect();
    let pick = if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    };
    Ok(ActionIndex(pick))
}

pub fn decay_epsilon(epsilon: f64, cfg: &AgentConfig) -> f64 {
    (epsilon * cfg.epsilon_decay).max(cfg.epsilon_min)
}

/// Deterministic per-state policy (lowest-index tie-break).
pub fn greedy_policy(table: &QTable) -> Vec<ActionIndex> {
    (0..table.num_states())
        .map(|s| {
            let start = s * table.num_actions;
            let row = &table.values[start..start + table.num_actions];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            ActionIndex(best)
        })
        .collect()
}

/// A learning agent: table, exploration rate and its own random stream.
#[derive(Clone, Debug)]
pub struct QAgent {
    config: AgentConfig,
    table: QTable,
    epsilon: f64,
    rng: ChaCha8Rng,
}

impl QAgent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let table = QTable::for_config(&config)?;
        Ok(Self::assemble(config, table))
    }

    /// Agent that continues learning on an existing table.
    pub fn with_table(config: AgentConfig, table: QTable) -> Result<Self> {
        config.validate()?;
        if table.action_deltas() != config.action_deltas.as_slice()
            || table.num_states() != NUM_STATES
        {
            return Err(Error::ShapeMismatch(format!(
                "table has {} states and actions {:?}, config expects {} states and {:?}",
                table.num_states(),
                table.action_deltas(),
                NUM_STATES,
                config.action_deltas
            )));
        }
        Ok(Self::assemble(config, table))
    }

    fn assemble(config: AgentConfig, table: QTable) -> Self {
        QAgent {
            epsilon: config.epsilon_initial,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            table,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn table(&self) -> &QTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut QTable {
        &mut self.table
    }

    pub fn into_table(self) -> QTable {
        self.table
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Resumes an exploration schedule, e.g. across training episodes.
    pub fn set_epsilon(&mut self, epsilon: f64) -> Result<()> {
        if !(self.config.epsilon_min..=1.0).contains(&epsilon) {
            return Err(Error::validation(format!(
                "epsilon {epsilon} outside [{}, 1]",
                self.config.epsilon_min
            )));
        }
        self.epsilon = epsilon;
        Ok(())
    }

    pub fn act(&mut self, s: StateIndex) -> Result<ActionIndex> {
        select_action(&self.table, s, self.epsilon, &mut self.rng)
    }

    pub fn learn(
        &mut self,
        s: StateIndex,
        a: ActionIndex,
        r: Reward,
        s_next: StateIndex,
    ) -> Result<f64> {
        q_update(&mut self.table, s, a, r, s_next, &self.config)
    }

    pub fn decay(&mut self) {
        self.epsilon = decay_epsilon(self.epsilon, &self.config);
    }

    pub fn apply(&self, a: ActionIndex, pwm: PwmLevel) -> Result<PwmLevel> {
        apply_action(&self.config.action_deltas, a, pwm)
    }
}

/// On-disk form of a trained table together with the config that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QTableFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub action_deltas: Vec<i32>,
    pub values: Vec<f64>,
    pub visit_counts: Vec<u64>,
    pub config: AgentConfig,
}

impl QTableFile {
    pub fn new(table: &QTable, config: &AgentConfig) -> Self {
        QTableFile {
            num_states: table.num_states,
            num_actions: table.num_actions,
            action_deltas: table.action_deltas.clone(),
            values: table.values.clone(),
            visit_counts: table.visit_counts.clone(),
            config: config.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(QTable, AgentConfig)> {
        let table = QTable::try_from(RawQTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            action_deltas: self.action_deltas,
            values: self.values,
            visit_counts: self.visit_counts,
        })?;
        self.config.validate()?;
        if table.action_deltas() != self.config.action_deltas.as_slice() {
            return Err(Error::ShapeMismatch(
                "table action set differs from its config".into(),
            ));
        }
        Ok((table, self.config))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(QTable, AgentConfig)> {
        let text = fs::read_to_string(path)?;
        let file: QTableFile = serde_json::from_str(&text)?;
        file.into_parts()
    }
}
