//! Finite MDPs, reward tables, stochastic policies and trajectories.
//!
//! Every table is stored flat in row-major order. The JSON documents produced
//! here use nested arrays:
//!
//! ```text
//! {"n_states":…, "n_actions":…, "gamma":…, "transition":[[[…]]], "terminal":[…], "initial":[…]}
//! {"reward":[[…]]}
//! {"policy":[[…]]}
//! ```
//!
//! Floats are written with the shortest representation that round-trips, so
//! a document read back yields bit-identical tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for row-stochasticity checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// A finite Markov decision process.
///
/// Terminal states self-loop with probability one and yield no reward; an
/// episode ends on arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDoc", into = "MdpDoc")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    gamma: f64,
    terminal: Vec<bool>,
    initial: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from a flat `(state, action, next_state)` transition table.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        gamma: f64,
        terminal_states: &[usize],
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("state and action counts must be positive".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::ShapeMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if initial.len() != n_states {
            return Err(Error::ShapeMismatch(format!(
                "initial distribution has {} entries, expected {n_states}",
                initial.len()
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside [0, 1]")));
        }
        let mut terminal = vec![false; n_states];
        for &t in terminal_states {
            if t >= n_states {
                return Err(Error::InvalidMdp(format!("terminal state {t} out of range")));
            }
            terminal[t] = true;
        }
        let mdp = Self { n_states, n_actions, transition, gamma, terminal, initial };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.next_distribution(s, a);
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s}, {a}) has negative or non-finite entries"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s}, {a}) sums to {sum}"
                    )));
                }
                if self.terminal[s] && row[s] != 1.0 {
                    return Err(Error::InvalidMdp(format!(
                        "terminal state {s} must self-loop with probability 1"
                    )));
                }
            }
        }
        if self.initial.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidMdp("initial distribution has negative entries".into()));
        }
        let sum: f64 = self.initial.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidMdp(format!("initial distribution sums to {sum}")));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| self.terminal[s]).collect()
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    /// `P(· | s, a)`.
    pub fn next_distribution(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Returns a copy with a different start distribution.
    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.gamma,
            &self.terminal_states(),
            initial,
        )
    }

    pub(crate) fn transition_table(&self) -> &[f64] {
        &self.transition
    }

    /// True when every policy reaches a terminal state almost surely from
    /// every state.
    ///
    /// Repeatedly strips non-terminal states that have no action keeping the
    /// process inside the remaining set; a non-empty remainder is a trap some
    /// policy can stay in forever.
    pub fn all_policies_terminate(&self) -> bool {
        let mut inside: Vec<bool> = self.terminal.iter().map(|t| !t).collect();
        loop {
            let mut changed = false;
            for s in 0..self.n_states {
                if !inside[s] {
                    continue;
                }
                let can_stay = (0..self.n_actions).any(|a| {
                    self.next_distribution(s, a)
                        .iter()
                        .enumerate()
                        .all(|(next, &p)| p == 0.0 || inside[next])
                });
                if !can_stay {
                    inside[s] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        !inside.iter().any(|&x| x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MdpDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    terminal: Vec<usize>,
    initial: Vec<f64>,
}

impl From<TabularMdp> for MdpDoc {
    fn from(mdp: TabularMdp) -> Self {
        Self::from(&mdp)
    }
}

impl From<&TabularMdp> for MdpDoc {
    fn from(mdp: &TabularMdp) -> Self {
        let transition = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.next_distribution(s, a).to_vec()).collect())
            .collect();
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            gamma: mdp.gamma,
            transition,
            terminal: mdp.terminal_states(),
            initial: mdp.initial.clone(),
        }
    }
}

impl TryFrom<MdpDoc> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDoc) -> Result<Self> {
        if doc.transition.len() != doc.n_states
            || doc.transition.iter().any(|rows| {
                rows.len() != doc.n_actions || rows.iter().any(|r| r.len() != doc.n_states)
            })
        {
            return Err(Error::ShapeMismatch("transition array does not match n_states/n_actions".into()));
        }
        let flat = doc.transition.into_iter().flatten().flatten().collect();
        TabularMdp::new(doc.n_states, doc.n_actions, flat, doc.gamma, &doc.terminal, doc.initial)
    }
}

impl From<RewardTable> for Vec<Vec<f64>> {
    fn from(reward: RewardTable) -> Self {
        nested(&reward.values, reward.n_actions)
    }
}

impl TryFrom<Vec<Vec<f64>>> for RewardTable {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<StochasticPolicy> for Vec<Vec<f64>> {
    fn from(policy: StochasticPolicy) -> Self {
        nested(&policy.probs, policy.n_actions)
    }
}

impl TryFrom<Vec<Vec<f64>>> for StochasticPolicy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

fn nested(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn flatten_rect(rows: Vec<Vec<f64>>) -> Result<(usize, usize, Vec<f64>)> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::ShapeMismatch("table must be a non-empty rectangle".into()));
    }
    Ok((n_rows, n_cols, rows.into_iter().flatten().collect()))
}

/// Reward indexed by `(state, action)`. Serializes as nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct RewardTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "reward has {} entries, expected {}",
                values.len(),
                n_states * n_actions
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidReward("entries must be finite".into()));
        }
        Ok(Self { n_states, n_actions, values })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let (n_states, n_actions, values) = flatten_rect(rows)?;
        Self::new(n_states, n_actions, values)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.values[s * self.n_actions + a] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "reward tables {}x{} and {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }

    pub fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::ShapeMismatch(format!(
                "reward {}x{} does not fit MDP {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    /// `weight_self * self + weight_other * other`, elementwise.
    pub fn combine(&self, weight_self: f64, other: &Self, weight_other: f64) -> Result<Self> {
        self.same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| weight_self * x + weight_other * y)
            .collect();
        Self::new(self.n_states, self.n_actions, values)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&RewardDoc { reward: nested(&self.values, self.n_actions) })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RewardDoc = serde_json::from_str(text)?;
        Self::from_rows(doc.reward)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardDoc {
    reward: Vec<Vec<f64>>,
}

/// Per-state action distribution. Serializes as nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct StochasticPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        let policy = Self { n_states, n_actions, probs };
        for s in 0..n_states {
            let row = policy.row(s);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidPolicy(format!("row {s} has negative or non-finite entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(policy)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let (n_states, n_actions, probs) = flatten_rect(rows)?;
        Self::new(n_states, n_actions, probs)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// One-hot policy selecting `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    /// Normalizes each row of non-negative weights. Used by solvers whose
    /// output is a distribution by construction.
    pub(crate) fn from_weights(n_states: usize, n_actions: usize, mut weights: Vec<f64>) -> Self {
        for row in weights.chunks_mut(n_actions) {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= sum);
        }
        Self { n_states, n_actions, probs: weights }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most likely action, lowest index on ties.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policies {}x{} and {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }

    pub fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::ShapeMismatch(format!(
                "policy {}x{} does not fit MDP {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    /// Per-step control mixture `beta * learner + (1 - beta) * self`.
    pub fn mix_with(&self, learner: &Self, beta: f64) -> Result<Self> {
        self.same_shape(learner)?;
        let probs = self
            .probs
            .iter()
            .zip(&learner.probs)
            .map(|(d, l)| beta * l + (1.0 - beta) * d)
            .collect();
        Ok(Self::from_weights(self.n_states, self.n_actions, probs))
    }

    /// Largest per-state total-variation distance to `other`.
    pub fn max_total_variation(&self, other: &Self) -> f64 {
        (0..self.n_states)
            .map(|s| {
                0.5 * self.row(s).iter().zip(other.row(s)).map(|(p, q)| (p - q).abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PolicyDoc { policy: nested(&self.probs, self.n_actions) })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDoc = serde_json::from_str(text)?;
        Self::from_rows(doc.policy)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    policy: Vec<Vec<f64>>,
}

/// Which party chose the action at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Demonstrator,
    Learner,
}

/// One `(state, action, reward, controller)` step. Serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64, Controller)", into = "(usize, usize, f64, Controller)")]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub controller: Controller,
}

impl From<(usize, usize, f64, Controller)> for Step {
    fn from((state, action, reward, controller): (usize, usize, f64, Controller)) -> Self {
        Self { state, action, reward, controller }
    }
}

impl From<Step> for (usize, usize, f64, Controller) {
    fn from(step: Step) -> Self {
        (step.state, step.action, step.reward, step.controller)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub horizon: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for step in &self.steps {
            total += discount * step.reward;
            discount *= gamma;
        }
        total
    }
}

/// State and action values produced by the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub state_values: Vec<f64>,
    action_values: Vec<f64>,
    n_actions: usize,
}

impl ValueTable {
    pub(crate) fn new(state_values: Vec<f64>, action_values: Vec<f64>, n_actions: usize) -> Self {
        Self { state_values, action_values, n_actions }
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.action_values[s * self.n_actions + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.action_values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn action_values(&self) -> &[f64] {
        &self.action_values
    }
}
