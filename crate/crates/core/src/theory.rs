//! Exact checks of the phasing method's formal properties: the optimal
//! policy curve over `beta`, monotonicity of its target return, the
//! counterexample's switch points, smoothing by entropy, and convergence of
//! the KL-budgeted curriculum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::expected_kl;
use crate::envs::{build_counterexample, A_LEFT, A_RIGHT, S0};
use crate::error::{Error, Result};
use crate::mdp::{RewardTable, StochasticPolicy, TabularMdp};
use crate::sampling::stream_rng;
use crate::solve::{
    discounted_occupancy, evaluate_mixture, evaluate_policy, evaluate_soft, mixture_mdp, soft_value_iteration,
    value_iteration,
};
use crate::task::{interpolate, resolve_reward, ContinuumMode, ContinuumSpec, Granularity};
use crate::rl_eps::{run_task_phasing_with, PhasingSetup, RlEpsConfig};
use crate::temporal::{AlphaScheduler, ControlProtocol};

const SOLVE_TOL: f64 = 1e-12;

/// Exact optimal policies of the phased tasks over a grid of `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCurve {
    pub mode: ContinuumMode,
    pub temperature: f64,
    pub betas: Vec<f64>,
    pub policies: Vec<StochasticPolicy>,
    /// Target return (of the mixture, for temporal curves).
    pub returns_f: Vec<f64>,
    /// Return under `R^d = R^s - R^f`; zero for temporal curves.
    pub returns_d: Vec<f64>,
    /// Expected KL from the previous grid point's policy under the new
    /// policy's occupancy; 0 at the first point, infinite across a jump.
    pub max_step_kl: Vec<f64>,
}

impl PolicyCurve {
    /// Rows `beta,return_f,return_d,max_step_kl`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta,return_f,return_d,max_step_kl\n");
        for i in 0..self.betas.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.betas[i], self.returns_f[i], self.returns_d[i], self.max_step_kl[i]
            ));
        }
        out
    }

    pub fn largest_step_kl(&self) -> f64 {
        self.max_step_kl.iter().copied().fold(0.0, f64::max)
    }
}

/// `0, step, 2 step, ..., 1` with the last point exactly 1.
pub fn uniform_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!("grid step must lie in (0, 1], got {step}")));
    }
    let count = (1.0 / step).round() as usize;
    if ((count as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("grid step {step} does not divide 1")));
    }
    Ok((0..=count).map(|i| if i == count { 1.0 } else { i as f64 / count as f64 }).collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) {
        return Err(Error::InvalidArgument("grid must start at 0 and end at 1".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// The problem whose optimum is `pi*_beta`, and the reward it is solved under.
fn phase_problem(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo: &StochasticPolicy,
    beta: f64,
) -> Result<(TabularMdp, RewardTable)> {
    match spec.mode {
        ContinuumMode::Temporal => mixture_mdp(mdp, &spec.target_reward(), demo, beta),
        ContinuumMode::RewardV1 | ContinuumMode::RewardV2 => {
            Ok((mdp.clone(), interpolate(spec, beta)?.expected_reward()))
        }
    }
}

fn solve(mdp: &TabularMdp, reward: &RewardTable, temperature: f64) -> Result<StochasticPolicy> {
    Ok(if temperature > 0.0 {
        soft_value_iteration(mdp, reward, temperature, SOLVE_TOL)?.1
    } else {
        value_iteration(mdp, reward, SOLVE_TOL)?.1
    })
}

/// Solves every grid point exactly. Temporal curves hold the learner's best
/// response to sharing control with `demo_policy`.
pub fn compute_policy_curve(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo_policy: &StochasticPolicy,
    grid: &[f64],
    temperature: f64,
) -> Result<PolicyCurve> {
    check_grid(grid)?;
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be non-negative, got {temperature}")));
    }
    let target = spec.target_reward();
    let dense = spec.start_reward().combine(1.0, &target, -1.0)?;
    let mut curve = PolicyCurve {
        mode: spec.mode,
        temperature,
        betas: grid.to_vec(),
        policies: Vec::with_capacity(grid.len()),
        returns_f: Vec::with_capacity(grid.len()),
        returns_d: Vec::with_capacity(grid.len()),
        max_step_kl: Vec::with_capacity(grid.len()),
    };
    for &beta in grid {
        let (problem, reward) = phase_problem(mdp, spec, demo_policy, beta)?;
        let policy = solve(&problem, &reward, temperature)?;
        let (ret_f, ret_d) = match spec.mode {
            ContinuumMode::Temporal => (evaluate_mixture(mdp, &target, &policy, demo_policy, beta)?, 0.0),
            _ => (evaluate_policy(mdp, &target, &policy, 1e-9)?, evaluate_policy(mdp, &dense, &policy, 1e-9)?),
        };
        let step = match curve.policies.last() {
            None => 0.0,
            Some(previous) => expected_kl(previous, &policy, &discounted_occupancy(&problem, &policy)?)?,
        };
        curve.policies.push(policy);
        curve.returns_f.push(ret_f);
        curve.returns_d.push(ret_d);
        curve.max_step_kl.push(step);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub holds: bool,
    /// Largest drop `returns_f[i] - returns_f[i + 1]`, 0 when there is none.
    pub worst_violation: f64,
    /// The `beta` pair of the largest drop.
    pub location: Option<(f64, f64)>,
}

/// Whether the target return never drops by more than `tol` along the curve.
pub fn check_monotonicity(curve: &PolicyCurve, tol: f64) -> Result<MonotonicityReport> {
    if curve.mode == ContinuumMode::Temporal {
        return Err(Error::WrongCurveKind("temporal curves are not covered".into()));
    }
    let mut report = MonotonicityReport { holds: true, worst_violation: 0.0, location: None };
    for i in 1..curve.returns_f.len() {
        let drop = curve.returns_f[i - 1] - curve.returns_f[i];
        if drop > tol {
            report.holds = false;
        }
        if drop > report.worst_violation {
            report.worst_violation = drop;
            report.location = Some((curve.betas[i - 1], curve.betas[i]));
        }
    }
    Ok(report)
}

/// Random MDP with dense transition rows drawn from a flat Dirichlet and a
/// uniform initial state.
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> Result<TabularMdp> {
    let mut rng = stream_rng(seed, 1);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let raw: Vec<f64> = (0..n_states).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        transition.extend(raw.iter().map(|x| x / total));
    }
    TabularMdp::new(n_states, n_actions, transition, gamma, &[], vec![1.0 / n_states as f64; n_states])
}

/// Rewards uniform in `[-scale, scale]`.
pub fn random_reward(seed: u64, n_states: usize, n_actions: usize, scale: f64) -> RewardTable {
    let mut rng = stream_rng(seed, 2);
    let values = (0..n_states * n_actions).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
    RewardTable::new(n_states, n_actions, values).expect("finite rewards")
}

/// Strictly positive random policy.
pub fn random_policy(seed: u64, n_states: usize, n_actions: usize) -> StochasticPolicy {
    let mut rng = stream_rng(seed, 3);
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        let raw: Vec<f64> = (0..n_actions).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|x| x / total));
    }
    StochasticPolicy::new(n_states, n_actions, probs).expect("normalized rows")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub instances: usize,
    pub violations: usize,
    pub worst_violation: f64,
}

/// Monotonicity of exact reward-phasing curves on random instances with
/// 2 to 6 states, 2 or 3 actions and `gamma = 0.9`.
pub fn monotonicity_sweep(instances: usize, grid_step: f64, seed: u64, tol: f64) -> Result<SweepReport> {
    let grid = uniform_grid(grid_step)?;
    let mut report = SweepReport { instances, violations: 0, worst_violation: 0.0 };
    for i in 0..instances as u64 {
        let key = seed.wrapping_mul(1_000_003).wrapping_add(i);
        let mut rng = stream_rng(key, 0);
        let n = rng.random_range(2..=6);
        let m = rng.random_range(2..=3);
        let mdp = random_mdp(key, n, m, 0.9)?;
        let dense = random_reward(key, n, m, 1.0);
        let target = random_reward(key ^ 0x5555, n, m, 1.0);
        let spec = ContinuumSpec::reward(ContinuumMode::RewardV1, &dense, &target, Granularity::PerEpisode)?;
        let curve = compute_policy_curve(&mdp, &spec, &StochasticPolicy::uniform(n, m), &grid, 0.0)?;
        let check = check_monotonicity(&curve, tol)?;
        if !check.holds {
            report.violations += 1;
        }
        report.worst_violation = report.worst_violation.max(check.worst_violation);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub reached_optimal: bool,
    pub iterations: usize,
    /// `ceil(1 / alpha) + 1`.
    pub iteration_bound: usize,
    /// Optimal minus achieved target return (soft when `temperature > 0`).
    pub final_gap: f64,
    pub final_return: f64,
    pub optimal_return: f64,
    pub tolerance: f64,
}

/// Default tolerance on the final gap.
pub const CONVERGENCE_TOL: f64 = 0.02;

/// Inner iterations per phase used by the convergence check.
pub const CONVERGENCE_INNER_ITERS: usize = 5_000;

pub fn check_convergence(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo: &StochasticPolicy,
    epsilon: f64,
    alpha: f64,
    temperature: f64,
) -> Result<ConvergenceReport> {
    check_convergence_with(mdp, spec, demo, epsilon, alpha, temperature, CONVERGENCE_TOL)
}

/// Runs the curriculum from the uniform policy with fixed-interval steps of
/// `alpha` and compares the final policy with a direct solve of the target.
pub fn check_convergence_with(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo: &StochasticPolicy,
    epsilon: f64,
    alpha: f64,
    temperature: f64,
    tolerance: f64,
) -> Result<ConvergenceReport> {
    let scheduler = AlphaScheduler::fixed_interval(alpha, 1)?;
    let config = RlEpsConfig {
        epsilon,
        entropy_coef: temperature,
        inner_tol: 1e-9,
        max_inner_iters: CONVERGENCE_INNER_ITERS,
    };
    config.validate()?;
    let initial = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let run = run_task_phasing_with(mdp, spec, demo, &initial, &scheduler, &config, None, &PhasingSetup::default())?;
    let target = spec.target_reward();
    let optimal = solve(mdp, &target, temperature)?;
    let optimal_return = evaluate_soft(mdp, &target, &optimal, temperature, 1e-9)?;
    let final_return = evaluate_soft(mdp, &target, run.final_policy(), temperature, 1e-9)?;
    let final_gap = optimal_return - final_return;
    let iteration_bound = scheduler.phase_bound();
    Ok(ConvergenceReport {
        reached_optimal: final_gap <= tolerance && run.iterations <= iteration_bound,
        iterations: run.iterations,
        iteration_bound,
        final_gap,
        final_return,
        optimal_return,
        tolerance,
    })
}

/// Step sizes tried by [`largest_converging_alpha`], largest first.
pub const ALPHA_LADDER: [f64; 5] = [0.5, 0.2, 0.1, 0.05, 0.02];

/// One rung of the ladder: the step size and its convergence report.
pub type AlphaTrial = (f64, ConvergenceReport);

/// First `alpha` of the ladder whose run converges, with every report.
pub fn largest_converging_alpha(
    mdp: &TabularMdp,
    spec: &ContinuumSpec,
    demo: &StochasticPolicy,
    epsilon: f64,
    temperature: f64,
    ladder: &[f64],
) -> Result<(Option<f64>, Vec<AlphaTrial>)> {
    let mut reports = Vec::with_capacity(ladder.len());
    for &alpha in ladder {
        let report = check_convergence(mdp, spec, demo, epsilon, alpha, temperature)?;
        let reached = report.reached_optimal;
        reports.push((alpha, report));
        if reached {
            return Ok((Some(alpha), reports));
        }
    }
    Ok((None, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchCheck {
    pub action_below: usize,
    pub action_above: usize,
    /// `|Q(s0, a_l) - Q(s0, a_r)|` of the solved problem at each side.
    pub margin_below: f64,
    pub margin_above: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub reward_phasing: SwitchCheck,
    pub temporal_phasing: SwitchCheck,
    pub demo_return: f64,
    pub holds: bool,
}

/// Solves the counterexample just below and above `beta = 0.5` for both
/// phasing kinds; the optimal first action must switch from `a_r` to `a_l`
/// with a value margin above `margin`.
pub fn check_counterexample(below: f64, above: f64, margin: f64) -> Result<CounterexampleReport> {
    let (mdp, target, dense, demo) = build_counterexample();
    let reward_spec = ContinuumSpec::reward(ContinuumMode::RewardV1, &dense, &target, Granularity::PerEpisode)?;
    let temporal_spec = ContinuumSpec::temporal(&demo, &target, ControlProtocol::random_step(0))?;
    let side = |spec: &ContinuumSpec, beta: f64| -> Result<(usize, f64)> {
        let (problem, reward) = phase_problem(&mdp, spec, &demo, beta)?;
        let (values, policy) = value_iteration(&problem, &reward, SOLVE_TOL)?;
        Ok((policy.greedy_action(S0), (values.q(S0, A_LEFT) - values.q(S0, A_RIGHT)).abs()))
    };
    let check = |spec: &ContinuumSpec| -> Result<SwitchCheck> {
        let (action_below, margin_below) = side(spec, below)?;
        let (action_above, margin_above) = side(spec, above)?;
        Ok(SwitchCheck {
            action_below,
            action_above,
            margin_below,
            margin_above,
            holds: action_below == A_RIGHT && action_above == A_LEFT && margin_below > margin && margin_above > margin,
        })
    };
    let reward_phasing = check(&reward_spec)?;
    let temporal_phasing = check(&temporal_spec)?;
    let demo_return = evaluate_policy(&mdp, &target, &demo, 1e-12)?;
    let holds = reward_phasing.holds && temporal_phasing.holds;
    Ok(CounterexampleReport { reward_phasing, temporal_phasing, demo_return, holds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2EquivalenceReport {
    pub draws: usize,
    /// Largest `|mean - V1| / standard_error` over entries with spread.
    pub worst_z: f64,
    /// Largest `|mean - V1|` over entries whose draws never vary.
    pub worst_constant_error: f64,
    pub tables_agree: bool,
    /// Same greedy action in every state at every grid point.
    pub curves_agree: bool,
}

/// Compares `draws` per-episode switching rewards with the affine table at
/// each grid point, and the exact hard-optimal curves of the two variants.
pub fn check_v2_equivalence(
    mdp: &TabularMdp,
    dense: &RewardTable,
    target: &RewardTable,
    grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<V2EquivalenceReport> {
    if draws < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let v1 = ContinuumSpec::reward(ContinuumMode::RewardV1, dense, target, Granularity::PerEpisode)?;
    let v2 = ContinuumSpec::reward(ContinuumMode::RewardV2, dense, target, Granularity::PerEpisode)?;
    let mut worst_z: f64 = 0.0;
    let mut worst_constant_error: f64 = 0.0;
    let mut tables_agree = true;
    for &beta in grid {
        let affine = interpolate(&v1, beta)?.expected_reward();
        let switching = interpolate(&v2, beta)?.reward;
        let k = affine.values().len();
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        for d in 0..draws as u64 {
            let table = resolve_reward(&switching, seed.wrapping_add(d));
            for (i, v) in table.values().iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        let n = draws as f64;
        for i in 0..k {
            let mean = sum[i] / n;
            let variance = ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
            let error = (mean - affine.values()[i]).abs();
            let se = (variance / n).sqrt();
            let scale = 1e-12 * (1.0 + affine.values()[i].abs());
            if se > scale {
                worst_z = worst_z.max(error / se);
                tables_agree &= error <= 3.0 * se;
            } else {
                worst_constant_error = worst_constant_error.max(error);
                tables_agree &= error <= scale;
            }
        }
    }
    let uniform = StochasticPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let curve_v1 = compute_policy_curve(mdp, &v1, &uniform, grid, 0.0)?;
    let curve_v2 = compute_policy_curve(mdp, &v2, &uniform, grid, 0.0)?;
    let curves_agree = curve_v1.policies.iter().zip(&curve_v2.policies).all(|(a, b)| {
        (0..a.n_states()).all(|s| a.greedy_action(s) == b.greedy_action(s))
    });
    Ok(V2EquivalenceReport { draws, worst_z, worst_constant_error, tables_agree, curves_agree })
}
