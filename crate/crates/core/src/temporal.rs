//! Temporal phasing: who controls each step, mixture rollouts, importance
//! weights for demonstrator-controlled samples, and the step-size scheduler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Controller, RewardTable, StochasticPolicy, TabularMdp, Trajectory};
use crate::sampling::{keyed_uniform, rollout, sample_index, stream_rng};

/// Default clip applied to importance weights.
pub const DEFAULT_IMPORTANCE_CLIP: f64 = 10.0;

/// How control is handed between learner and demonstrator inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolVariant {
    /// One Bernoulli(beta) draw per step.
    RandomStep,
    /// One Bernoulli(beta) draw per aligned block of `m` steps.
    RandomBlock { m: usize },
    /// Demonstrator at evenly spaced steps.
    ///
    /// By default the demonstrator acts when `t mod p == 0` with
    /// `p = max(1, round(1 / (1 - beta)))`, so the learner's share of steps
    /// tracks `beta`. With `literal` set, the demonstrator acts when
    /// `t mod round(beta * episode_len) == 0` instead (and on every step
    /// when that period rounds to zero); in that form the learner share
    /// does not track `beta`.
    FixedSteps {
        episode_len: usize,
        #[serde(default)]
        literal: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProtocol")]
pub struct ControlProtocol {
    #[serde(flatten)]
    pub variant: ProtocolVariant,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ControlProtocol {
    pub fn new(variant: ProtocolVariant, rng_seed: u64) -> Result<Self> {
        match variant {
            ProtocolVariant::RandomBlock { m: 0 } => {
                Err(Error::InvalidArgument("block length m must be at least 1".into()))
            }
            ProtocolVariant::FixedSteps { episode_len: 0, .. } => {
                Err(Error::InvalidArgument("episode length T must be at least 1".into()))
            }
            _ => Ok(Self { variant, rng_seed }),
        }
    }

    pub fn random_step(rng_seed: u64) -> Self {
        Self { variant: ProtocolVariant::RandomStep, rng_seed }
    }

    pub fn with_seed(self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self }
    }
}

/// Flat form of [`ControlProtocol`]; serde's `flatten` cannot reject unknown keys.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProtocol {
    variant: String,
    m: Option<usize>,
    episode_len: Option<usize>,
    literal: Option<bool>,
    #[serde(default)]
    rng_seed: u64,
}

fn reject_extra(variant: &str, fields: &[(&str, bool)]) -> std::result::Result<(), String> {
    match fields.iter().find(|(_, present)| *present) {
        Some((name, _)) => Err(format!("`{name}` does not apply to {variant}")),
        None => Ok(()),
    }
}

impl TryFrom<RawProtocol> for ControlProtocol {
    type Error = String;

    fn try_from(raw: RawProtocol) -> std::result::Result<Self, String> {
        let variant = match raw.variant.as_str() {
            "random_step" => {
                reject_extra("random_step", &[
                    ("m", raw.m.is_some()),
                    ("episode_len", raw.episode_len.is_some()),
                    ("literal", raw.literal.is_some()),
                ])?;
                ProtocolVariant::RandomStep
            }
            "random_block" => {
                reject_extra("random_block", &[
                    ("episode_len", raw.episode_len.is_some()),
                    ("literal", raw.literal.is_some()),
                ])?;
                ProtocolVariant::RandomBlock { m: raw.m.ok_or("random_block needs `m`")? }
            }
            "fixed_steps" => {
                reject_extra("fixed_steps", &[("m", raw.m.is_some())])?;
                ProtocolVariant::FixedSteps {
                    episode_len: raw.episode_len.ok_or("fixed_steps needs `episode_len`")?,
                    literal: raw.literal.unwrap_or(false),
                }
            }
            other => return Err(format!("unknown protocol variant `{other}`")),
        };
        Ok(Self { variant, rng_seed: raw.rng_seed })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange(beta));
    }
    Ok(())
}

/// Controller of step `t` in episode `episode`. Deterministic in
/// `(protocol.rng_seed, episode, t)`.
pub fn assign_controller(protocol: &ControlProtocol, beta: f64, episode: u64, t: usize) -> Result<Controller> {
    check_beta(beta)?;
    let learner = match protocol.variant {
        ProtocolVariant::RandomStep => keyed_uniform(protocol.rng_seed, episode, t as u64) < beta,
        ProtocolVariant::RandomBlock { m } => {
            if m == 0 {
                return Err(Error::InvalidArgument("block length m must be at least 1".into()));
            }
            keyed_uniform(protocol.rng_seed, episode, (t / m) as u64) < beta
        }
        ProtocolVariant::FixedSteps { episode_len, literal: false } => {
            if episode_len == 0 {
                return Err(Error::InvalidArgument("episode length T must be at least 1".into()));
            }
            if beta >= 1.0 {
                true
            } else {
                let period = ((1.0 / (1.0 - beta)).round() as usize).max(1);
                !t.is_multiple_of(period)
            }
        }
        ProtocolVariant::FixedSteps { episode_len, literal: true } => {
            let period = (beta * episode_len as f64).round() as usize;
            period != 0 && !t.is_multiple_of(period)
        }
    };
    Ok(if learner { Controller::Learner } else { Controller::Demonstrator })
}

/// One episode in which each step's action comes from whichever policy
/// [`assign_controller`] selects. `rng_seed` also keys the controller draws
/// (as the episode index).
#[allow(clippy::too_many_arguments)]
pub fn rollout_mixture(
    mdp: &TabularMdp,
    reward: &RewardTable,
    rl_policy: &StochasticPolicy,
    demo_policy: &StochasticPolicy,
    protocol: &ControlProtocol,
    beta: f64,
    horizon: usize,
    rng_seed: u64,
) -> Result<Trajectory> {
    check_beta(beta)?;
    rl_policy.check_against(mdp)?;
    demo_policy.check_against(mdp)?;
    let mut rng = stream_rng(rng_seed, u64::MAX);
    let mut failure = None;
    let trajectory = rollout(mdp, reward, horizon, &mut rng, |t, s, rng| {
        let controller = match assign_controller(protocol, beta, rng_seed, t) {
            Ok(c) => c,
            Err(e) => {
                failure.get_or_insert(e);
                Controller::Demonstrator
            }
        };
        let policy = match controller {
            Controller::Learner => rl_policy,
            Controller::Demonstrator => demo_policy,
        };
        (sample_index(policy.row(s), rng.random()), controller)
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(trajectory),
    }
}

/// `min(rl(a|s) / demo(a|s), clip)` for off-policy use of a
/// demonstrator-controlled sample.
pub fn importance_weight(
    rl_policy: &StochasticPolicy,
    demo_policy: &StochasticPolicy,
    state: usize,
    action: usize,
    clip: f64,
) -> Result<f64> {
    rl_policy.same_shape(demo_policy)?;
    if !(clip >= 1.0) {
        return Err(Error::InvalidArgument(format!("clip must be at least 1, got {clip}")));
    }
    let demo = demo_policy.prob(state, action);
    if demo <= 0.0 {
        return Err(Error::UnsupportedAction { state, action });
    }
    let rl = rl_policy.prob(state, action);
    if rl == demo {
        return Ok(1.0);
    }
    Ok((rl / demo).min(clip))
}

/// When the scheduler advances `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleMode {
    /// Advance after every phase of `episodes_per_phase` episodes.
    FixedInterval { episodes_per_phase: usize },
    /// Advance only when the mean of the last `window` scores reaches `threshold`.
    Threshold { window: usize, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScheduler")]
pub struct AlphaScheduler {
    pub alpha: f64,
    #[serde(flatten)]
    pub mode: ScheduleMode,
}

/// Flat form of [`AlphaScheduler`].
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheduler {
    alpha: f64,
    mode: String,
    episodes_per_phase: Option<usize>,
    window: Option<usize>,
    threshold: Option<f64>,
}

impl TryFrom<RawScheduler> for AlphaScheduler {
    type Error = String;

    fn try_from(raw: RawScheduler) -> std::result::Result<Self, String> {
        let mode = match raw.mode.as_str() {
            "fixed_interval" => {
                reject_extra("fixed_interval", &[("window", raw.window.is_some()), ("threshold", raw.threshold.is_some())])?;
                ScheduleMode::FixedInterval {
                    episodes_per_phase: raw.episodes_per_phase.ok_or("fixed_interval needs `episodes_per_phase`")?,
                }
            }
            "threshold" => {
                reject_extra("threshold", &[("episodes_per_phase", raw.episodes_per_phase.is_some())])?;
                ScheduleMode::Threshold {
                    window: raw.window.ok_or("threshold needs `window`")?,
                    threshold: raw.threshold.ok_or("threshold needs `threshold`")?,
                }
            }
            other => return Err(format!("unknown schedule mode `{other}`")),
        };
        Ok(Self { alpha: raw.alpha, mode })
    }
}

/// `beta` values within this distance of 1 snap to 1, so accumulated
/// increments such as ten steps of 0.1 terminate on schedule.
pub const BETA_SNAP: f64 = 1e-9;

impl AlphaScheduler {
    pub fn new(alpha: f64, mode: ScheduleMode) -> Result<Self> {
        let scheduler = Self { alpha, mode };
        scheduler.validate()?;
        Ok(scheduler)
    }

    pub fn fixed_interval(alpha: f64, episodes_per_phase: usize) -> Result<Self> {
        Self::new(alpha, ScheduleMode::FixedInterval { episodes_per_phase })
    }

    pub fn threshold(alpha: f64, window: usize, threshold: f64) -> Result<Self> {
        Self::new(alpha, ScheduleMode::Threshold { window, threshold })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if let ScheduleMode::Threshold { window: 0, .. } = self.mode {
            return Err(Error::InvalidArgument("threshold window must be at least 1".into()));
        }
        Ok(())
    }

    /// Upper bound on phases (initial training included) under fixed-interval scheduling.
    pub fn phase_bound(&self) -> usize {
        (1.0 / self.alpha - BETA_SNAP).ceil() as usize + 1
    }
}

fn advance(beta: f64, alpha: f64) -> f64 {
    let next = beta + alpha;
    if next >= 1.0 - BETA_SNAP {
        1.0
    } else {
        next
    }
}

/// Next `beta`. Never decreases and never exceeds 1.
pub fn update_beta(scheduler: &AlphaScheduler, beta: f64, recent_scores: &[f64]) -> Result<f64> {
    check_beta(beta)?;
    match scheduler.mode {
        ScheduleMode::FixedInterval { .. } => Ok(advance(beta, scheduler.alpha)),
        ScheduleMode::Threshold { window, threshold } => {
            if recent_scores.len() < window {
                return Err(Error::InsufficientHistory { needed: window, got: recent_scores.len() });
            }
            let tail = &recent_scores[recent_scores.len() - window..];
            let mean = tail.iter().sum::<f64>() / window as f64;
            Ok(if mean >= threshold { advance(beta, scheduler.alpha) } else { beta })
        }
    }
}
