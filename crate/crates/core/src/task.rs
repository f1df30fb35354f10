//! Tasks and the continuum between a start task and the target task.
//!
//! `beta` measures progress: 0 is the start task, 1 the target task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{RewardTable, StochasticPolicy};
use crate::sampling::keyed_uniform;
use crate::temporal::ControlProtocol;

/// Who acts during an episode of a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlMode {
    LearnerFull,
    /// Shared control; the learner acts with progress `beta` under `protocol`.
    Temporal { protocol: ControlProtocol, beta: f64 },
}

impl ControlMode {
    /// Probability-of-learner-control view: full control is `temporal(1)`.
    pub fn learner_share(&self) -> f64 {
        match self {
            Self::LearnerFull => 1.0,
            Self::Temporal { beta, .. } => *beta,
        }
    }
}

/// When a switching reward flips its coin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerEpisode,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskReward {
    Fixed { reward: RewardTable },
    /// `shaped` with probability `1 - beta`, otherwise `target`, drawn at rollout time.
    Switching { shaped: RewardTable, target: RewardTable, beta: f64, granularity: Granularity },
}

impl TaskReward {
    /// The reward in expectation over the switching coin.
    pub fn expected(&self) -> RewardTable {
        match self {
            Self::Fixed { reward } => reward.clone(),
            Self::Switching { shaped, target, beta, .. } => con(*beta, target, shaped),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub reward: TaskReward,
    pub control: ControlMode,
    pub label: String,
}

impl Task {
    pub fn fixed(reward: RewardTable, control: ControlMode, label: impl Into<String>) -> Result<Self> {
        if let ControlMode::Temporal { beta, .. } = control {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::BetaOutOfRange(beta));
            }
        }
        Ok(Self { reward: TaskReward::Fixed { reward }, control, label: label.into() })
    }

    pub fn expected_reward(&self) -> RewardTable {
        self.reward.expected()
    }

    fn dims(&self) -> (usize, usize) {
        match &self.reward {
            TaskReward::Fixed { reward } => (reward.n_states(), reward.n_actions()),
            TaskReward::Switching { target, .. } => (target.n_states(), target.n_actions()),
        }
    }

    /// Same expected reward and same learner share of control.
    pub fn equivalent(&self, other: &Self) -> bool {
        self.expected_reward() == other.expected_reward()
            && self.control.learner_share() == other.control.learner_share()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuumMode {
    Temporal,
    RewardV1,
    RewardV2,
}

impl ContinuumMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Temporal => "temporal",
            Self::RewardV1 => "reward_v1",
            Self::RewardV2 => "reward_v2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuumSpec {
    pub mode: ContinuumMode,
    pub start: Task,
    pub target: Task,
    #[serde(default)]
    pub granularity: Granularity,
}

/// `weight * first + (1 - weight) * second`, exact at weights 0 and 1.
pub fn con(weight: f64, first: &RewardTable, second: &RewardTable) -> RewardTable {
    if weight == 1.0 {
        return first.clone();
    }
    if weight == 0.0 {
        return second.clone();
    }
    first.combine(weight, second, 1.0 - weight).expect("continuum endpoints share a shape")
}

/// Learner has no control yet; the demonstrator acts on every step.
pub fn make_initial_temporal_task(demo_policy: &StochasticPolicy, target_reward: &RewardTable) -> Result<Task> {
    make_initial_temporal_task_with(demo_policy, target_reward, ControlProtocol::random_step(0))
}

pub fn make_initial_temporal_task_with(
    demo_policy: &StochasticPolicy,
    target_reward: &RewardTable,
    protocol: ControlProtocol,
) -> Result<Task> {
    if demo_policy.n_states() != target_reward.n_states() || demo_policy.n_actions() != target_reward.n_actions() {
        return Err(Error::ShapeMismatch("demonstrator and reward disagree on dimensions".into()));
    }
    Task::fixed(target_reward.clone(), ControlMode::Temporal { protocol, beta: 0.0 }, "temporal start")
}

/// Start task of reward phasing: `R^s = R^d + R^f` with full learner control.
pub fn make_initial_reward_task(dense_reward: &RewardTable, target_reward: &RewardTable) -> Result<Task> {
    let shaped = dense_reward.combine(1.0, target_reward, 1.0)?;
    Task::fixed(shaped, ControlMode::LearnerFull, "reward start")
}

impl ContinuumSpec {
    pub fn new(mode: ContinuumMode, start: Task, target: Task, granularity: Granularity) -> Result<Self> {
        if start.dims() != target.dims() {
            return Err(Error::ShapeMismatch(format!(
                "start task is {:?}, target task is {:?}",
                start.dims(),
                target.dims()
            )));
        }
        let fixed = |task: &Task| matches!(task.reward, TaskReward::Fixed { .. });
        if !fixed(&start) || !fixed(&target) {
            return Err(Error::InvalidArgument("continuum endpoints must have fixed rewards".into()));
        }
        if target.control != ControlMode::LearnerFull {
            return Err(Error::InvalidArgument("target task must give the learner full control".into()));
        }
        match mode {
            ContinuumMode::Temporal => {
                if !matches!(start.control, ControlMode::Temporal { beta, .. } if beta == 0.0) {
                    return Err(Error::InvalidArgument("temporal start task must be temporal at beta 0".into()));
                }
                if start.expected_reward() != target.expected_reward() {
                    return Err(Error::InvalidArgument("temporal phasing keeps the target reward throughout".into()));
                }
            }
            ContinuumMode::RewardV1 | ContinuumMode::RewardV2 => {
                if start.control != ControlMode::LearnerFull {
                    return Err(Error::InvalidArgument("reward phasing gives the learner full control".into()));
                }
            }
        }
        Ok(Self { mode, start, target, granularity })
    }

    /// Temporal continuum from the demonstrator-only task to the target.
    pub fn temporal(demo_policy: &StochasticPolicy, target_reward: &RewardTable, protocol: ControlProtocol) -> Result<Self> {
        let start = make_initial_temporal_task_with(demo_policy, target_reward, protocol)?;
        let target = Task::fixed(target_reward.clone(), ControlMode::LearnerFull, "target")?;
        Self::new(ContinuumMode::Temporal, start, target, Granularity::PerEpisode)
    }

    /// Reward continuum from `R^d + R^f` to `R^f`.
    pub fn reward(
        mode: ContinuumMode,
        dense_reward: &RewardTable,
        target_reward: &RewardTable,
        granularity: Granularity,
    ) -> Result<Self> {
        if mode == ContinuumMode::Temporal {
            return Err(Error::WrongMode(mode.name().into()));
        }
        let start = make_initial_reward_task(dense_reward, target_reward)?;
        let target = Task::fixed(target_reward.clone(), ControlMode::LearnerFull, "target")?;
        Self::new(mode, start, target, granularity)
    }

    pub fn start_reward(&self) -> RewardTable {
        self.start.expected_reward()
    }

    pub fn target_reward(&self) -> RewardTable {
        self.target.expected_reward()
    }

    /// The protocol of the temporal start task, if any.
    pub fn protocol(&self) -> Option<ControlProtocol> {
        match self.start.control {
            ControlMode::Temporal { protocol, .. } => Some(protocol),
            ControlMode::LearnerFull => None,
        }
    }
}

/// The task at progress `beta`.
pub fn interpolate(spec: &ContinuumSpec, beta: f64) -> Result<Task> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange(beta));
    }
    if beta == 0.0 {
        return Ok(spec.start.clone());
    }
    if beta == 1.0 {
        return Ok(spec.target.clone());
    }
    let label = format!("{} beta={beta}", spec.mode.name());
    let start = spec.start_reward();
    let target = spec.target_reward();
    let (reward, control) = match spec.mode {
        ContinuumMode::Temporal => {
            let protocol = spec.protocol().expect("validated temporal start");
            (TaskReward::Fixed { reward: target }, ControlMode::Temporal { protocol, beta })
        }
        ContinuumMode::RewardV1 => (TaskReward::Fixed { reward: con(beta, &target, &start) }, ControlMode::LearnerFull),
        ContinuumMode::RewardV2 => (
            TaskReward::Switching { shaped: start, target, beta, granularity: spec.granularity },
            ControlMode::LearnerFull,
        ),
    };
    Ok(Task { reward, control, label })
}

/// Stream used for the reward-switching coin.
pub(crate) const SWITCH_STREAM: u64 = 0x5eed_0002;

/// Resolves a switching reward for one episode. Entries of the returned
/// table are either all shaped or all target for per-episode granularity;
/// per-step granularity draws one coin per `(state, action)` entry.
pub fn resolve_reward(reward: &TaskReward, episode_seed: u64) -> RewardTable {
    match reward {
        TaskReward::Fixed { reward } => reward.clone(),
        TaskReward::Switching { shaped, target, beta, granularity } => match granularity {
            Granularity::PerEpisode => {
                if keyed_uniform(episode_seed, SWITCH_STREAM, 0) > *beta {
                    shaped.clone()
                } else {
                    target.clone()
                }
            }
            Granularity::PerStep => {
                let mut table = target.clone();
                let m = target.n_actions();
                for s in 0..target.n_states() {
                    for a in 0..m {
                        if keyed_uniform(episode_seed, SWITCH_STREAM, (s * m + a) as u64) > *beta {
                            table.set(s, a, shaped.get(s, a));
                        }
                    }
                }
                table
            }
        },
    }
}
