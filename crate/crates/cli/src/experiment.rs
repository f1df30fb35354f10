//! Per-seed preparation and phasing runs.

use serde::{Deserialize, Serialize};
use taskphase_core::demos::{behavior_clone, collect_demos, maxent_irl_fit, rescale_reward, DemoDataset};
use taskphase_core::envs::Environment;
use taskphase_core::rl_eps::{run_task_phasing_with, PhasingRun, RunStatus};
use taskphase_core::solve::{evaluate_policy, reach_probability, value_iteration};
use taskphase_core::task::{ContinuumMode, ContinuumSpec};
use taskphase_core::temporal::ControlProtocol;
use taskphase_core::{RewardTable, StochasticPolicy};

use crate::config::ExperimentConfig;

/// How the dense reward of a seed was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlSummary {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Everything a seed's run needs besides the config.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub env: Environment,
    /// The demonstrator the learner phases away from.
    pub demo: StochasticPolicy,
    pub dense: Option<RewardTable>,
    pub irl: Option<IrlSummary>,
    pub dataset: Option<DemoDataset>,
}

impl SeedContext {
    /// Builds the environment, collects demonstrations when configured, and
    /// derives `R^d` by IRL when `need_dense` and the environment has none.
    pub fn prepare(config: &ExperimentConfig, seed: u64, need_dense: bool) -> taskphase_core::Result<Self> {
        let env = config.environment.build(seed)?;
        let (n, m) = (env.mdp.n_states(), env.mdp.n_actions());
        let dataset = match &config.demos {
            Some(d) => Some(collect_demos(&env.mdp, &env.target_reward, &env.demo, d.episodes, d.horizon, seed)?),
            None => None,
        };
        let demo = match (&config.demos, &dataset) {
            (Some(d), Some(data)) if d.behavior_clone => behavior_clone(data, n, m, d.smoothing)?,
            _ => env.demo.clone(),
        };
        let (dense, irl) = match (&env.dense_reward, need_dense, &config.demos, &dataset) {
            (Some(dense), _, _, _) => (Some(dense.clone()), None),
            (None, true, Some(d), Some(data)) => {
                let fit = maxent_irl_fit(&env.mdp, data, d.irl.temperature, d.irl.learning_rate, d.irl.max_iters, d.irl.tol)?;
                let summary = IrlSummary { iterations: fit.iterations, residual: fit.residual, converged: fit.converged };
                (Some(rescale_reward(&fit.reward, d.irl.scale)?), Some(summary))
            }
            (None, true, _, _) => {
                return Err(taskphase_core::Error::InvalidArgument(
                    "a dense reward is needed but no demonstrations are configured".into(),
                ))
            }
            _ => (None, None),
        };
        Ok(Self { seed, env, demo, dense, irl, dataset })
    }

    pub fn spec(&self, config: &ExperimentConfig) -> taskphase_core::Result<ContinuumSpec> {
        match config.mode {
            ContinuumMode::Temporal => {
                let protocol = config.protocol.unwrap_or(ControlProtocol::random_step(0)).with_seed(self.seed);
                ContinuumSpec::temporal(&self.demo, &self.env.target_reward, protocol)
            }
            mode => {
                let dense = self.dense.as_ref().ok_or_else(|| {
                    taskphase_core::Error::InvalidArgument("reward phasing needs a dense reward".into())
                })?;
                ContinuumSpec::reward(mode, dense, &self.env.target_reward, config.granularity)
            }
        }
    }
}

pub fn needs_dense(config: &ExperimentConfig) -> bool {
    config.mode != ContinuumMode::Temporal
}

/// One learning-curve row; the column order is the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub phase_index: usize,
    pub beta: f64,
    pub return_f: f64,
    pub return_phase: f64,
    pub kl_step: f64,
    pub episodes_consumed: usize,
}

pub const CURVE_COLUMNS: [&str; 7] =
    ["seed", "phase_index", "beta", "return_f", "return_phase", "kl_step", "episodes_consumed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// `None` when the run failed; see `error`.
    pub status: Option<RunStatus>,
    pub final_beta: f64,
    pub phases: usize,
    pub episodes_consumed: usize,
    pub final_return_f: f64,
    pub demo_return_f: f64,
    pub optimal_return_f: f64,
    /// Chance the final policy, acting alone, reaches a goal state within
    /// the evaluation horizon.
    pub success_probability: f64,
    pub irl: Option<IrlSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub summary: SeedSummary,
    pub rows: Vec<CurveRow>,
}

impl SeedOutcome {
    fn failed(seed: u64, error: String) -> Self {
        Self {
            summary: SeedSummary {
                seed,
                status: None,
                final_beta: f64::NAN,
                phases: 0,
                episodes_consumed: 0,
                final_return_f: f64::NAN,
                demo_return_f: f64::NAN,
                optimal_return_f: f64::NAN,
                success_probability: f64::NAN,
                irl: None,
                error: Some(error),
            },
            rows: Vec::new(),
        }
    }
}

fn rows(seed: u64, run: &PhasingRun) -> Vec<CurveRow> {
    (0..run.betas.len())
        .map(|i| CurveRow {
            seed,
            phase_index: i,
            beta: run.betas[i],
            return_f: run.returns_f[i],
            return_phase: run.returns_phase[i],
            kl_step: run.kl_steps[i],
            episodes_consumed: run.episodes_consumed[i],
        })
        .collect()
}

fn try_run(config: &ExperimentConfig, seed: u64) -> taskphase_core::Result<SeedOutcome> {
    let ctx = SeedContext::prepare(config, seed, needs_dense(config))?;
    let spec = ctx.spec(config)?;
    let mdp = &ctx.env.mdp;
    let target = &ctx.env.target_reward;
    let initial = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let run = run_task_phasing_with(
        mdp,
        &spec,
        &ctx.demo,
        &initial,
        &config.scheduler,
        &config.learner,
        config.anneal.as_ref(),
        &config.setup.with_seed(seed),
    )?;
    let optimal = value_iteration(mdp, target, 1e-12)?.1;
    let summary = SeedSummary {
        seed,
        status: Some(run.status),
        final_beta: run.final_beta(),
        phases: run.iterations,
        episodes_consumed: run.episodes_consumed.last().copied().unwrap_or(0),
        final_return_f: evaluate_policy(mdp, target, run.final_policy(), 1e-9)?,
        demo_return_f: evaluate_policy(mdp, target, &ctx.demo, 1e-9)?,
        optimal_return_f: evaluate_policy(mdp, target, &optimal, 1e-9)?,
        success_probability: reach_probability(mdp, run.final_policy(), &ctx.env.goal_states, config.setup.horizon)?,
        irl: ctx.irl.clone(),
        error: None,
    };
    Ok(SeedOutcome { summary, rows: rows(seed, &run) })
}

/// Runs one seed; failures are recorded in the summary rather than dropped.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> SeedOutcome {
    try_run(config, seed).unwrap_or_else(|e| SeedOutcome::failed(seed, e.to_string()))
}
