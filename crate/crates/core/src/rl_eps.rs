//! KL-budgeted policy improvement and the phasing driver.
//!
//! The learner repeats exponentiated-advantage steps
//! `log pi' = (1 - eta * tau) log pi + eta * Q_pi - log Z` (for `tau = 0`
//! this is `pi * exp(eta * A_pi)`), choosing each `eta` by bisection so the
//! expected KL from the start policy, weighted by the candidate's own
//! occupancy, stays within the budget. Every step is a policy improvement,
//! so the objective never decreases. Zero entries stay zero; positive ones
//! are held above `exp(-700)` times their row's largest entry so the KL to
//! the start never becomes infinite through underflow.

use serde::{Deserialize, Serialize};

use crate::divergence::expected_kl;
use crate::error::{Error, Result};
use crate::mdp::{RewardTable, StochasticPolicy, TabularMdp};
use crate::reward_phasing::{apply_anneal, sampled_phase_reward, AnnealSchedule, LearnerHyperparams};
use crate::solve::{backup, discounted_occupancy, evaluate_policy, mixture_mdp, soft_policy_values};
use crate::task::{interpolate, ContinuumMode, ContinuumSpec};
use crate::temporal::{rollout_mixture, update_beta, AlphaScheduler, ControlProtocol, ScheduleMode};

/// Supported log-probabilities stay within this of their row's maximum, so
/// they never underflow to zero and the KL to the start stays finite.
const LOG_PROB_FLOOR: f64 = 700.0;
/// Largest change of any log-probability within one inner step.
const LOGIT_CAP: f64 = LOG_PROB_FLOOR;
/// Logit change allowed on the first inner step; it doubles after every
/// step the budget does not cut short, up to `LOGIT_CAP`. Runs with
/// different budgets then follow one path until the smaller budget binds.
const FIRST_LOGIT_STEP: f64 = 1.0;
const BISECTION_STEPS: usize = 60;
const LINE_SEARCH_HALVINGS: usize = 30;

fn default_inner_tol() -> f64 {
    1e-9
}

fn default_max_inner_iters() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlEpsConfig {
    /// KL budget in nats.
    pub epsilon: f64,
    /// Entropy temperature; 0 optimizes the plain return.
    #[serde(default)]
    pub entropy_coef: f64,
    /// Slack allowed on the budget and on the return; also sets the
    /// smallest per-step gain worth continuing for (`inner_tol * 1e-3`).
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_max_inner_iters")]
    pub max_inner_iters: usize,
}

impl RlEpsConfig {
    pub fn new(epsilon: f64, entropy_coef: f64) -> Result<Self> {
        let config = Self {
            epsilon,
            entropy_coef,
            inner_tol: default_inner_tol(),
            max_inner_iters: default_max_inner_iters(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.epsilon.is_nan() {
            return Err(Error::InvalidArgument(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "entropy_coef must be non-negative, got {}",
                self.entropy_coef
            )));
        }
        if !(self.inner_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("inner_tol must be positive, got {}", self.inner_tol)));
        }
        Ok(())
    }
}

/// Best policy found within `epsilon` expected KL of `start_policy`.
///
/// The returned `pi'` satisfies `E_{s ~ d_pi'}[KL(start(s) || pi'(s))] <= epsilon`
/// and does not lower the (entropy-augmented when `entropy_coef > 0`) return.
pub fn kl_constrained_improve(
    mdp: &TabularMdp,
    reward: &RewardTable,
    start_policy: &StochasticPolicy,
    config: &RlEpsConfig,
) -> Result<StochasticPolicy> {
    config.validate()?;
    start_policy.check_against(mdp)?;
    for s in 0..start_policy.n_states() {
        if let Some(action) = start_policy.row(s).iter().position(|&p| p <= 0.0) {
            return Err(Error::DegeneratePolicy { state: s, action });
        }
    }
    improve(mdp, reward, start_policy, config)
}

/// Soft return from the initial distribution.
fn objective(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy, tau: f64) -> Result<f64> {
    let values = soft_policy_values(mdp, reward, policy, tau)?;
    Ok(mdp.initial_distribution().iter().zip(&values).map(|(p, v)| p * v).sum())
}

/// Accepts start policies with zero entries; they stay zero.
pub(crate) fn improve(
    mdp: &TabularMdp,
    reward: &RewardTable,
    start: &StochasticPolicy,
    config: &RlEpsConfig,
) -> Result<StochasticPolicy> {
    reward.check_against(mdp)?;
    if config.epsilon == 0.0 {
        return Ok(start.clone());
    }
    let tau = config.entropy_coef;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let within_budget = |candidate: &StochasticPolicy| -> bool {
        match discounted_occupancy(mdp, candidate) {
            Ok(weights) => expected_kl(start, candidate, &weights).is_ok_and(|kl| kl <= config.epsilon),
            Err(_) => false,
        }
    };
    let mut current = start.clone();
    let mut value = objective(mdp, reward, &current, tau)?;
    let mut q = vec![0.0; n * m];
    let mut logit_step = FIRST_LOGIT_STEP;
    for _ in 0..config.max_inner_iters {
        let values = soft_policy_values(mdp, reward, &current, tau)?;
        backup(mdp, reward, &values, &mut q);
        // ascent direction g = Q - tau * log pi on the support
        let mut direction = vec![0.0; n * m];
        let mut lead: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
            let mut mean = 0.0;
            for a in 0..m {
                let p = current.prob(s, a);
                if p > 0.0 {
                    let g = q[s * m + a] - tau * p.ln();
                    direction[s * m + a] = g;
                    mean += p * g;
                    scale = scale.max(g.abs());
                }
            }
            for a in (0..m).filter(|&a| current.prob(s, a) > 0.0) {
                lead = lead.max(direction[s * m + a] - mean);
            }
        }
        if lead <= 1e-13 * (1.0 + scale) {
            break;
        }
        // no log-probability rises by more than `eta * lead`
        let mut eta_max = logit_step / lead;
        if tau > 0.0 {
            eta_max = eta_max.min(1.0 / tau);
        }
        let step = |eta: f64| step_policy(mdp, &current, &direction, eta);
        // the return along the ray is not monotone in eta: back off while it improves
        let mut eta_best = eta_max;
        let mut best = objective(mdp, reward, &step(eta_max), tau)?;
        for _ in 0..LINE_SEARCH_HALVINGS {
            let shorter = objective(mdp, reward, &step(0.5 * eta_best), tau)?;
            if shorter <= best {
                break;
            }
            eta_best *= 0.5;
            best = shorter;
        }
        let eta = if within_budget(&step(eta_best)) {
            eta_best
        } else {
            let (mut lo, mut hi) = (0.0, eta_best);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if within_budget(&step(mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        if eta == 0.0 {
            break;
        }
        let next = step(eta);
        let next_value = objective(mdp, reward, &next, tau)?;
        if next_value < value {
            // rounding at a fixed point
            break;
        }
        let gain = next_value - value;
        current = next;
        value = next_value;
        if eta < eta_best {
            if gain <= 1e-3 * config.inner_tol * (1.0 + value.abs()) {
                // the budget is spent
                break;
            }
        } else if eta == eta_max {
            logit_step = (2.0 * logit_step).min(LOGIT_CAP);
        }
    }
    Ok(current)
}

/// `pi(a|s) * exp(eta * g(s, a))`, renormalized per non-terminal state.
fn step_policy(mdp: &TabularMdp, policy: &StochasticPolicy, direction: &[f64], eta: f64) -> StochasticPolicy {
    let n = policy.n_states();
    let m = policy.n_actions();
    let mut probs = policy.probs().to_vec();
    for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
        let row = &mut probs[s * m..(s + 1) * m];
        let logits: Vec<f64> = row
            .iter()
            .zip(&direction[s * m..(s + 1) * m])
            .map(|(&p, &g)| if p > 0.0 { p.ln() + eta * g } else { f64::NEG_INFINITY })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits
            .iter()
            .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - top).max(-LOG_PROB_FLOOR).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        for (p, w) in row.iter_mut().zip(weights) {
            *p = w / total;
        }
    }
    StochasticPolicy::new(n, m, probs).expect("normalized rows")
}

/// Options of [`run_task_phasing_with`] beyond the learner and scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasingSetup {
    /// Episode length for threshold-mode evaluation rollouts.
    pub horizon: usize,
    /// Threshold mode gives up once this many evaluation episodes are used
    /// without reaching `beta = 1`.
    pub episode_cap: usize,
    /// Keys every evaluation rollout and reward draw.
    pub rng_seed: u64,
    /// When set, the threshold is this factor times the demonstrator's
    /// target return instead of the scheduler's absolute value.
    pub relative_threshold: Option<f64>,
    /// Reward draws averaged into each switching-reward training table.
    pub reward_draws: usize,
    /// Carried into annealing; the exact learner has no learning rate.
    pub learning_rate: f64,
    /// Chance that a learner-controlled step of an evaluation rollout takes
    /// a uniformly random action instead.
    pub exploration_noise: f64,
}

impl Default for PhasingSetup {
    fn default() -> Self {
        Self {
            horizon: 100,
            episode_cap: 10_000,
            rng_seed: 0,
            relative_threshold: None,
            reward_draws: 200,
            learning_rate: 3e-4,
            exploration_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Threshold scheduling used up its episode cap before reaching `beta = 1`.
    Stalled,
}

/// Record of one phasing run; index `i` of every list describes phase `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasingRun {
    pub betas: Vec<f64>,
    pub policies: Vec<StochasticPolicy>,
    /// Return of the learner alone on the target task.
    pub returns_f: Vec<f64>,
    /// Return of the phase task (for temporal phasing, of the mixture).
    pub returns_phase: Vec<f64>,
    /// Expected KL from the previous phase's policy, under the new policy's occupancy.
    pub kl_steps: Vec<f64>,
    /// Evaluation episodes used so far, at the end of each phase.
    pub episodes_consumed: Vec<usize>,
    pub iterations: usize,
    pub status: RunStatus,
}

impl PhasingRun {
    pub fn final_beta(&self) -> f64 {
        self.betas.last().copied().unwrap_or(0.0)
    }

    pub fn final_policy(&self) -> &StochasticPolicy {
        self.policies.last().expect("a run has at least one phase")
    }

    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

/// Runs the phasing curriculum with default [`PhasingSetup`].
#[allow(clippy::too_many_arguments)]
pub fn run_task_phasing(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo_policy: &StochasticPolicy,
    initial_policy: &StochasticPolicy,
    scheduler: &AlphaScheduler,
    config: &RlEpsConfig,
    anneal: Option<&AnnealSchedule>,
) -> Result<PhasingRun> {
    run_task_phasing_with(mdp, spec, demo_policy, initial_policy, scheduler, config, anneal, &PhasingSetup::default())
}

/// Train on the start task, then alternate `beta` updates with one learner
/// call on the task at the current `beta` until `beta = 1` has been trained.
///
/// Temporal phasing trains on the MDP induced by sharing control with the
/// demonstrator; reward phasing trains on the phased reward (for V2, the
/// mean of `reward_draws` per-episode draws). Threshold scheduling scores
/// `window` evaluation episodes per phase by their discounted target return
/// and retrains at the same `beta` when the scores fall short.
#[allow(clippy::too_many_arguments)]
pub fn run_task_phasing_with(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo_policy: &StochasticPolicy,
    initial_policy: &StochasticPolicy,
    scheduler: &AlphaScheduler,
    config: &RlEpsConfig,
    anneal: Option<&AnnealSchedule>,
    setup: &PhasingSetup,
) -> Result<PhasingRun> {
    scheduler.validate()?;
    config.validate()?;
    if let Some(schedule) = anneal {
        schedule.validate()?;
    }
    let target = spec.target_reward();
    target.check_against(mdp)?;
    demo_policy.check_against(mdp)?;
    initial_policy.check_against(mdp)?;
    if setup.reward_draws == 0 {
        return Err(Error::InvalidArgument("reward_draws must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&setup.exploration_noise) {
        return Err(Error::InvalidArgument(format!(
            "exploration_noise must lie in [0, 1], got {}",
            setup.exploration_noise
        )));
    }
    let uniform = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let threshold = match (scheduler.mode, setup.relative_threshold) {
        (ScheduleMode::Threshold { .. }, Some(factor)) => {
            if setup.horizon == 0 {
                return Err(Error::InvalidArgument("horizon must be at least 1".into()));
            }
            Some(factor * evaluate_policy(mdp, &target, demo_policy, 1e-9)?)
        }
        (ScheduleMode::Threshold { threshold, .. }, None) => Some(threshold),
        (ScheduleMode::FixedInterval { .. }, _) => None,
    };
    let protocol = spec.protocol().unwrap_or_else(|| ControlProtocol::random_step(setup.rng_seed));
    let base = LearnerHyperparams {
        entropy_coef: config.entropy_coef,
        learning_rate: setup.learning_rate,
        alpha: scheduler.alpha,
    };

    let mut run = PhasingRun {
        betas: Vec::new(),
        policies: Vec::new(),
        returns_f: Vec::new(),
        returns_phase: Vec::new(),
        kl_steps: Vec::new(),
        episodes_consumed: Vec::new(),
        iterations: 0,
        status: RunStatus::Completed,
    };
    let mut beta: f64 = 0.0;
    let mut policy = initial_policy.clone();
    let mut scores: Vec<f64> = Vec::new();
    let mut episodes = 0usize;
    loop {
        let hyper = anneal.map_or(base, |schedule| apply_anneal(schedule, beta, base));
        let learner = RlEpsConfig { entropy_coef: hyper.entropy_coef, ..*config };
        let phase = run.betas.len() as u64;
        let (train_mdp, train_reward, phase_reward) = match spec.mode {
            ContinuumMode::Temporal => {
                let (induced, reward) = mixture_mdp(mdp, &target, demo_policy, beta)?;
                (induced, reward.clone(), reward)
            }
            ContinuumMode::RewardV1 | ContinuumMode::RewardV2 => {
                let seed = setup.rng_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(phase << 20);
                let sampled = sampled_phase_reward(spec, beta, seed, setup.reward_draws)?;
                (mdp.clone(), sampled, interpolate(spec, beta)?.expected_reward())
            }
        };
        let next = improve(&train_mdp, &train_reward, &policy, &learner)?;
        let kl_step = if run.betas.is_empty() {
            0.0
        } else {
            expected_kl(&policy, &next, &discounted_occupancy(mdp, &next)?)?
        };
        policy = next;

        if beta < 1.0 {
            if let (ScheduleMode::Threshold { window, .. }, Some(threshold)) = (scheduler.mode, threshold) {
                let share = if spec.mode == ContinuumMode::Temporal { beta } else { 1.0 };
                let behavior = policy.mix_with(&uniform, setup.exploration_noise)?;
                for _ in 0..window {
                    let seed = episode_seed(setup.rng_seed, episodes as u64);
                    let trajectory =
                        rollout_mixture(mdp, &target, &behavior, demo_policy, &protocol, share, setup.horizon, seed)?;
                    scores.push(trajectory.discounted_return(mdp.gamma()));
                    episodes += 1;
                }
                let rule = AlphaScheduler { alpha: hyper.alpha, mode: ScheduleMode::Threshold { window, threshold } };
                let updated = update_beta(&rule, beta, &scores)?;
                record(&mut run, mdp, &target, &train_mdp, &phase_reward, beta, &policy, kl_step, episodes)?;
                beta = updated;
                if beta < 1.0 && episodes >= setup.episode_cap {
                    run.status = RunStatus::Stalled;
                    return Ok(run);
                }
                continue;
            }
            if let ScheduleMode::FixedInterval { episodes_per_phase } = scheduler.mode {
                episodes += episodes_per_phase;
            }
        }
        record(&mut run, mdp, &target, &train_mdp, &phase_reward, beta, &policy, kl_step, episodes)?;
        if beta >= 1.0 {
            return Ok(run);
        }
        let rule = AlphaScheduler { alpha: hyper.alpha, mode: scheduler.mode };
        beta = update_beta(&rule, beta, &scores)?;
    }
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    // splitmix64 finalizer of (seed, episode)
    let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ episode.wrapping_add(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[allow(clippy::too_many_arguments)]
fn record(
    run: &mut PhasingRun,
    mdp: &TabularMdp,
    target: &RewardTable,
    phase_mdp: &TabularMdp,
    phase_reward: &RewardTable,
    beta: f64,
    policy: &StochasticPolicy,
    kl_step: f64,
    episodes: usize,
) -> Result<()> {
    run.returns_f.push(evaluate_policy(mdp, target, policy, 1e-6)?);
    run.returns_phase.push(evaluate_policy(phase_mdp, phase_reward, policy, 1e-6)?);
    run.betas.push(beta);
    run.policies.push(policy.clone());
    run.kl_steps.push(kl_step);
    run.episodes_consumed.push(episodes);
    run.iterations = run.betas.len();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::kl;
    use crate::solve::evaluate_soft;
    use crate::task::Granularity;

    fn bandit() -> (TabularMdp, RewardTable) {
        let mdp = TabularMdp::new(2, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 1.0, &[1], vec![1.0, 0.0]).unwrap();
        (mdp, RewardTable::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap())
    }

    #[test]
    fn zero_budget_is_identity() {
        let (mdp, reward) = bandit();
        let start = StochasticPolicy::uniform(2, 2);
        let out = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn degenerate_start_is_rejected() {
        let (mdp, reward) = bandit();
        let start = StochasticPolicy::deterministic(2, &[0, 0]).unwrap();
        let err = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(0.1, 0.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegeneratePolicy { state: 0, action: 1 }));
    }

    #[test]
    fn bandit_saturates_budget() {
        // one continuing state, so all occupancy sits on it
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], 0.9, &[], vec![1.0]).unwrap();
        let reward = RewardTable::new(1, 2, vec![1.0, 0.0]).unwrap();
        let start = StochasticPolicy::uniform(1, 2);
        let config = RlEpsConfig::new(0.05, 0.0).unwrap();
        let out = kl_constrained_improve(&mdp, &reward, &start, &config).unwrap();
        let spent = kl(start.row(0), out.row(0));
        assert!((0.05 - 1e-4..=0.05).contains(&spent), "spent {spent}");
        assert!(out.prob(0, 0) > 0.5);
    }

    #[test]
    fn soft_bandit_reaches_boltzmann() {
        let (mdp, reward) = bandit();
        let start = StochasticPolicy::uniform(2, 2);
        let out = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(1e6, 1.0).unwrap()).unwrap();
        let expected = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((out.prob(0, 0) - expected).abs() < 1e-9);
        let j0 = evaluate_soft(&mdp, &reward, &start, 1.0, 1e-9).unwrap();
        assert!(evaluate_soft(&mdp, &reward, &out, 1.0, 1e-9).unwrap() >= j0);
    }

    fn counterexample_spec() -> (TabularMdp, ContinuumSpec, StochasticPolicy) {
        let (mdp, target, dense, demo) = crate::envs::build_counterexample();
        let spec = ContinuumSpec::reward(ContinuumMode::RewardV1, &dense, &target, Granularity::PerEpisode).unwrap();
        (mdp, spec, demo)
    }

    #[test]
    fn alpha_one_runs_two_phases() {
        let (mdp, spec, demo) = counterexample_spec();
        let run = run_task_phasing(
            &mdp,
            &spec,
            &demo,
            &StochasticPolicy::uniform(3, 2),
            &AlphaScheduler::fixed_interval(1.0, 10).unwrap(),
            &RlEpsConfig::new(0.5, 1.0).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(run.betas, vec![0.0, 1.0]);
        assert_eq!(run.iterations, 2);
        assert_eq!(run.kl_steps[0], 0.0);
        assert_eq!(run.episodes_consumed, vec![10, 10]);
        assert!(run.completed());
    }

    #[test]
    fn fixed_interval_bound() {
        let (mdp, spec, demo) = counterexample_spec();
        for alpha in [0.3, 0.25, 0.1] {
            let scheduler = AlphaScheduler::fixed_interval(alpha, 1).unwrap();
            let run = run_task_phasing(
                &mdp,
                &spec,
                &demo,
                &StochasticPolicy::uniform(3, 2),
                &scheduler,
                &RlEpsConfig::new(0.1, 0.5).unwrap(),
                None,
            )
            .unwrap();
            assert_eq!(run.iterations, scheduler.phase_bound());
            assert_eq!(run.final_beta(), 1.0);
            assert!(run.betas.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn episode_seeds_differ() {
        assert_ne!(episode_seed(0, 0), episode_seed(0, 1));
        assert_ne!(episode_seed(0, 1), episode_seed(1, 0));
    }
}
