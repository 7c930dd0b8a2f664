//! Value-iteration oracle over the noise-free rig.
//!
//! With no noise, no actuator lag and no smoothing the light reading is a
//! pure function of ambient and duty, so the rig is a deterministic MDP
//! whose Markov state is the duty itself. Each node carries the light state
//! the agent would observe; the agent only sees that light state, which is
//! why agreement is measured by projecting through it.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{discretize, EnvModel, Environment, PwmLevel, PWM_MAX};
use crate::error::{Error, Result};
use crate::harness::write_json;
use crate::rl::{reward_for, ActionIndex, QTable, StateIndex, TargetLevel, NUM_STATES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeskNode {
    pub duty: PwmLevel,
    pub light: StateIndex,
}

#[derive(Clone, Debug)]
pub struct DeskMdp {
    nodes: Vec<DeskNode>,
    action_deltas: Vec<i32>,
    successors: Vec<usize>,
    rewards: Vec<f64>,
    gamma: f64,
    target: TargetLevel,
}

/// Enumerates every (duty, action) pair of a deterministic model.
///
/// Fails if the model has sensor noise, actuator lag, smoothing, or a
/// time-varying ambient profile.
pub fn build_desk_mdp(
    model: &EnvModel,
    target: TargetLevel,
    action_deltas: &[i32],
    gamma: f64,
) -> Result<DeskMdp> {
    model.validate()?;
    if !model.is_deterministic() {
        return Err(Error::validation(
            "the desk MDP needs sensor_noise_sigma = 0, response_lag_steps = 0 and smoothing_alpha = 1",
        ));
    }
    if !model.scenario.events.is_empty() {
        return Err(Error::validation(
            "the desk MDP needs a constant ambient profile",
        ));
    }
    if action_deltas.is_empty() {
        return Err(Error::validation("empty action set"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation("gamma must be in [0, 1]"));
    }

    let nodes = (0..=PWM_MAX)
        .map(|d| {
            let duty = PwmLevel::new(d);
            let reading = Environment::new(model.clone())?.step(duty);
            Ok(DeskNode {
                duty,
                light: discretize(reading.smoothed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut successors = Vec::with_capacity(nodes.len() * action_deltas.len());
    let mut rewards = Vec::with_capacity(successors.capacity());
    for node in &nodes {
        for &delta in action_deltas {
            let next = node.duty.offset(delta).duty() as usize;
            successors.push(next);
            rewards.push(reward_for(nodes[next].light, target).value());
        }
    }
    Ok(DeskMdp {
        nodes,
        action_deltas: action_deltas.to_vec(),
        successors,
        rewards,
        gamma,
        target,
    })
}

impl DeskMdp {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_deltas.len()
    }

    pub fn action_deltas(&self) -> &[i32] {
        &self.action_deltas
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn target(&self) -> TargetLevel {
        self.target
    }

    pub fn node(&self, n: usize) -> DeskNode {
        self.nodes[n]
    }

    pub fn node_for_duty(&self, duty: PwmLevel) -> usize {
        duty.duty() as usize
    }

    pub fn successor(&self, n: usize, a: ActionIndex) -> usize {
        self.successors[n * self.num_actions() + a.get()]
    }

    pub fn reward(&self, n: usize, a: ActionIndex) -> f64 {
        self.rewards[n * self.num_actions() + a.get()]
    }

    /// Same MDP with every reward mapped through `r -> scale * r + shift`.
    pub fn with_affine_reward(&self, scale: f64, shift: f64) -> Result<DeskMdp> {
        if scale.is_nan() || scale <= 0.0 || !shift.is_finite() {
            return Err(Error::validation("affine reward transform needs scale > 0"));
        }
        let mut out = self.clone();
        out.rewards.iter_mut().for_each(|r| *r = scale * *r + shift);
        Ok(out)
    }

    pub fn with_gamma(&self, gamma: f64) -> DeskMdp {
        DeskMdp {
            gamma,
            ..self.clone()
        }
    }

    /// Nodes reachable from `start` under any sequence of actions, ascending.
    pub fn reachable_from(&self, start: PwmLevel) -> Vec<usize> {
        let mut seen = vec![false; self.num_nodes()];
        let mut queue = VecDeque::from([self.node_for_duty(start)]);
        seen[self.node_for_duty(start)] = true;
        while let Some(n) = queue.pop_front() {
            for a in 0..self.num_actions() {
                let m = self.successor(n, ActionIndex::new(a));
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        (0..self.num_nodes()).filter(|&n| seen[n]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub values: Vec<f64>,
    /// `Q*(n, a) = r(n, a) + gamma * V*(successor)`, row-major.
    pub q_values: Vec<f64>,
    /// Lowest-index greedy action per node.
    pub policy: Vec<ActionIndex>,
    /// Max-norm change of each sweep.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl OracleSolution {
    pub fn q(&self, n: usize, a: ActionIndex) -> f64 {
        let num_actions = self.q_values.len() / self.values.len();
        self.q_values[n * num_actions + a.get()]
    }

    /// Actions whose value is within `tol` of the best at node `n`.
    pub fn greedy_set(&self, n: usize, tol: f64) -> Vec<ActionIndex> {
        let num_actions = self.q_values.len() / self.values.len();
        let row = &self.q_values[n * num_actions..(n + 1) * num_actions];
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0..num_actions)
            .filter(|&a| row[a] >= best - tol)
            .map(ActionIndex::new)
            .collect()
    }
}

/// Synchronous value iteration from `V = 0` until the max-norm change drops below `tolerance`.
pub fn value_iteration(mdp: &DeskMdp, tolerance: f64, max_iters: usize) -> Result<OracleSolution> {
    if !(0.0..1.0).contains(&mdp.gamma) {
        return Err(Error::validation(format!(
            "value iteration needs 0 <= gamma < 1, got {}",
            mdp.gamma
        )));
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::validation("tolerance must be positive"));
    }
    let n_nodes = mdp.num_nodes();
    let n_actions = mdp.num_actions();
    let backup = |values: &[f64], n: usize, a: usize| {
        let i = n * n_actions + a;
        mdp.rewards[i] + mdp.gamma * values[mdp.successors[i]]
    };

    let mut values = vec![0.0; n_nodes];
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let next: Vec<f64> = (0..n_nodes)
            .map(|n| {
                (0..n_actions)
                    .map(|a| backup(&values, n, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let resid = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        residuals.push(resid);
        if resid < tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: residuals.len(),
            residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        });
    }

    let q_values: Vec<f64> = (0..n_nodes)
        .flat_map(|n| (0..n_actions).map(move |a| (n, a)))
        .map(|(n, a)| backup(&values, n, a))
        .collect();
    let policy = (0..n_nodes)
        .map(|n| {
            let row = &q_values[n * n_actions..(n + 1) * n_actions];
            let mut best = 0;
            for (a, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = a;
                }
            }
            ActionIndex::new(best)
        })
        .collect();
    Ok(OracleSolution {
        values,
        q_values,
        policy,
        iterations: residuals.len(),
        residuals,
    })
}

/// Fraction of `reachable` nodes where the learned greedy action, chosen from
/// the node's observable light state, is worth as much under `Q*` as the
/// oracle's own action.
pub fn policy_agreement(
    learned: &QTable,
    mdp: &DeskMdp,
    solution: &OracleSolution,
    reachable: &[usize],
) -> Result<f64> {
    if learned.num_states() != NUM_STATES || learned.action_deltas() != mdp.action_deltas() {
        return Err(Error::ShapeMismatch(format!(
            "learned table is {}x{:?}, oracle uses {}x{:?}",
            learned.num_states(),
            learned.action_deltas(),
            NUM_STATES,
            mdp.action_deltas()
        )));
    }
    if solution.values.len() != mdp.num_nodes() {
        return Err(Error::ShapeMismatch(
            "solution does not belong to this MDP".into(),
        ));
    }
    if reachable.is_empty() {
        return Err(Error::validation("no reachable states to compare"));
    }
    let mut agree = 0usize;
    for &n in reachable {
        let learned_action = learned.greedy_action(mdp.node(n).light)?;
        let oracle_value = solution.q(n, solution.policy[n]);
        let learned_value = solution.q(n, learned_action);
        if (oracle_value - learned_value).abs() <= 1e-9 * oracle_value.abs().max(1.0) {
            agree += 1;
        }
    }
    Ok(agree as f64 / reachable.len() as f64)
}

/// Projects oracle action-values onto the agent's 64 light states, taking for
/// each state the lowest-duty node in `nodes` that shows it. States with no
/// such node stay at zero.
pub fn project_to_table(
    mdp: &DeskMdp,
    solution: &OracleSolution,
    nodes: &[usize],
) -> Result<QTable> {
    let mut table = QTable::new(NUM_STATES, mdp.action_deltas().to_vec())?;
    let mut filled = [false; NUM_STATES];
    let mut sorted = nodes.to_vec();
    sorted.sort_by_key(|&n| mdp.node(n).duty);
    for n in sorted {
        let s = mdp.node(n).light;
        if filled[s.get()] {
            continue;
        }
        filled[s.get()] = true;
        for a in 0..mdp.num_actions() {
            let a = ActionIndex::new(a);
            table.set(s, a, solution.q(n, a))?;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleNodeExport {
    pub duty: u8,
    pub light_state: StateIndex,
    pub value: f64,
    pub action: ActionIndex,
    pub action_delta: i32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleExport {
    pub target_state: StateIndex,
    pub gamma: f64,
    pub action_deltas: Vec<i32>,
    pub iterations: usize,
    pub nodes: Vec<OracleNodeExport>,
}

impl OracleExport {
    pub fn new(mdp: &DeskMdp, solution: &OracleSolution) -> Self {
        OracleExport {
            target_state: mdp.target().target_state,
            gamma: mdp.gamma(),
            action_deltas: mdp.action_deltas().to_vec(),
            iterations: solution.iterations,
            nodes: (0..mdp.num_nodes())
                .map(|n| OracleNodeExport {
                    duty: mdp.node(n).duty.duty(),
                    light_state: mdp.node(n).light,
                    value: solution.values[n],
                    action: solution.policy[n],
                    action_delta: mdp.action_deltas()[solution.policy[n].get()],
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
