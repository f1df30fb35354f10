//! Exact and entropy-regularized solvers, policy evaluation and occupancy.
//!
//! Terminal states carry zero value; rewards listed for them are never
//! collected. With `gamma == 1` the solvers require an episodic MDP (see
//! [`TabularMdp::all_policies_terminate`]) and report
//! [`Error::NonConvergent`] otherwise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{RewardTable, StochasticPolicy, TabularMdp, ValueTable};

/// Default cap on value-iteration sweeps.
pub const DEFAULT_MAX_SWEEPS: usize = 1_000_000;

const MAX_POLICY_ITERATIONS: usize = 1_000;

fn check_inputs(mdp: &TabularMdp, reward: &RewardTable, tol: f64) -> Result<()> {
    reward.check_against(mdp)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    if mdp.gamma() >= 1.0 && !mdp.all_policies_terminate() {
        return Err(Error::NonConvergent { iterations: 0, residual: f64::INFINITY });
    }
    Ok(())
}

/// `Q(s, a) = R(s, a) + gamma * E[V(s')]`, zero in terminal states.
pub(crate) fn backup(mdp: &TabularMdp, reward: &RewardTable, values: &[f64], q: &mut [f64]) {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let gamma = mdp.gamma();
    let table = mdp.transition_table();
    for s in 0..n {
        for a in 0..m {
            let idx = s * m + a;
            if mdp.is_terminal(s) {
                q[idx] = 0.0;
                continue;
            }
            let row = &table[idx * n..(idx + 1) * n];
            let future: f64 = row.iter().zip(values).map(|(p, v)| p * v).sum();
            q[idx] = reward.get(s, a) + gamma * future;
        }
    }
}

/// Lowest action index whose value is within a relative `1e-12` of the row maximum.
fn greedy_row(q: &[f64]) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eps = 1e-12 * (1.0 + best.abs());
    q.iter().position(|&v| v >= best - eps).unwrap_or(0)
}

fn greedy_actions(q: &[f64], m: usize) -> Vec<usize> {
    q.chunks(m).map(greedy_row).collect()
}

/// Optimal state/action values and a deterministic greedy policy.
///
/// Value iteration runs until the Bellman residual drops below `tol`, then
/// the greedy policy is refined by exact policy iteration so that the
/// returned policy is optimal rather than merely `tol`-optimal. Ties go to
/// the lowest action index.
pub fn value_iteration(
    mdp: &TabularMdp,
    reward: &RewardTable,
    tol: f64,
) -> Result<(ValueTable, StochasticPolicy)> {
    value_iteration_capped(mdp, reward, tol, DEFAULT_MAX_SWEEPS)
}

pub fn value_iteration_capped(
    mdp: &TabularMdp,
    reward: &RewardTable,
    tol: f64,
    max_sweeps: usize,
) -> Result<(ValueTable, StochasticPolicy)> {
    check_inputs(mdp, reward, tol)?;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut values = vec![0.0; n];
    let mut q = vec![0.0; n * m];
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        backup(mdp, reward, &values, &mut q);
        residual = 0.0;
        for s in 0..n {
            let v = q[s * m..(s + 1) * m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = f64::max(residual, (v - values[s]).abs());
            values[s] = v;
        }
        sweeps += 1;
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NonConvergent { iterations: sweeps, residual });
    }
    backup(mdp, reward, &values, &mut q);
    let actions = improve_until_stable(mdp, reward, greedy_actions(&q, m))?;
    finish_hard(mdp, reward, &actions, tol)
}

/// Exact policy iteration from the all-zeros deterministic policy.
pub fn policy_iteration(mdp: &TabularMdp, reward: &RewardTable) -> Result<(ValueTable, StochasticPolicy)> {
    check_inputs(mdp, reward, 1.0)?;
    let actions = improve_until_stable(mdp, reward, vec![0; mdp.n_states()])?;
    finish_hard(mdp, reward, &actions, f64::INFINITY)
}

fn improve_until_stable(mdp: &TabularMdp, reward: &RewardTable, mut actions: Vec<usize>) -> Result<Vec<usize>> {
    let m = mdp.n_actions();
    let mut q = vec![0.0; mdp.n_states() * m];
    for _ in 0..MAX_POLICY_ITERATIONS {
        let policy = StochasticPolicy::deterministic(m, &actions)?;
        let values = policy_values(mdp, reward, &policy)?;
        backup(mdp, reward, &values, &mut q);
        let next = greedy_actions(&q, m);
        if next == actions {
            return Ok(actions);
        }
        actions = next;
    }
    Ok(actions)
}

fn finish_hard(
    mdp: &TabularMdp,
    reward: &RewardTable,
    actions: &[usize],
    tol: f64,
) -> Result<(ValueTable, StochasticPolicy)> {
    let m = mdp.n_actions();
    let policy = StochasticPolicy::deterministic(m, actions)?;
    let values = policy_values(mdp, reward, &policy)?;
    let mut q = vec![0.0; mdp.n_states() * m];
    backup(mdp, reward, &values, &mut q);
    let residual = q
        .chunks(m)
        .zip(&values)
        .map(|(row, v)| (row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v).abs())
        .fold(0.0, f64::max);
    if residual > tol {
        return Err(Error::NonConvergent { iterations: MAX_POLICY_ITERATIONS, residual });
    }
    Ok((ValueTable::new(values, q, m), policy))
}

/// `temperature * log(sum(exp(x / temperature)))`, shifted by the maximum.
pub(crate) fn soft_max(row: &[f64], temperature: f64) -> f64 {
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| ((x - top) / temperature).exp()).sum();
    top + temperature * sum.ln()
}

pub(crate) fn boltzmann(q: &[f64], m: usize, temperature: f64) -> StochasticPolicy {
    let mut weights = Vec::with_capacity(q.len());
    for row in q.chunks(m) {
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        weights.extend(row.iter().map(|x| ((x - top) / temperature).exp()));
    }
    StochasticPolicy::from_weights(q.len() / m, m, weights)
}

/// Maximum-entropy value iteration.
///
/// Optimizes `E[sum_t gamma^t (r_t + temperature * H(pi(.|s_t)))]`; the
/// returned policy is the Boltzmann policy `pi(a|s) ∝ exp(Q(s,a) / temperature)`.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    reward: &RewardTable,
    temperature: f64,
    tol: f64,
) -> Result<(ValueTable, StochasticPolicy)> {
    soft_value_iteration_capped(mdp, reward, temperature, tol, DEFAULT_MAX_SWEEPS)
}

pub fn soft_value_iteration_capped(
    mdp: &TabularMdp,
    reward: &RewardTable,
    temperature: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<(ValueTable, StochasticPolicy)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    check_inputs(mdp, reward, tol)?;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut values = vec![0.0; n];
    let mut q = vec![0.0; n * m];
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        backup(mdp, reward, &values, &mut q);
        residual = 0.0;
        for s in 0..n {
            let v = if mdp.is_terminal(s) { 0.0 } else { soft_max(&q[s * m..(s + 1) * m], temperature) };
            residual = f64::max(residual, (v - values[s]).abs());
            values[s] = v;
        }
        sweeps += 1;
        if residual <= tol {
            break;
        }
    }
    if residual > tol || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergent { iterations: sweeps, residual });
    }
    backup(mdp, reward, &values, &mut q);
    let policy = boltzmann(&q, m, temperature);
    Ok((ValueTable::new(values, q, m), policy))
}

/// True when the policy reaches a terminal state almost surely from every
/// state (trivially true for `gamma < 1`).
fn policy_is_proper(mdp: &TabularMdp, policy: &StochasticPolicy) -> bool {
    if mdp.gamma() < 1.0 {
        return true;
    }
    let n = mdp.n_states();
    // backward reachability from terminals along the policy's support
    let mut reaches: Vec<bool> = (0..n).map(|s| mdp.is_terminal(s)).collect();
    loop {
        let mut changed = false;
        for s in 0..n {
            if reaches[s] {
                continue;
            }
            let hit = (0..mdp.n_actions()).any(|a| {
                policy.prob(s, a) > 0.0
                    && mdp.next_distribution(s, a).iter().enumerate().any(|(t, &p)| p > 0.0 && reaches[t])
            });
            if hit {
                reaches[s] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    reaches.into_iter().all(|r| r)
}

fn non_terminal_index(mdp: &TabularMdp) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut order = Vec::new();
    let mut index = vec![None; mdp.n_states()];
    for (s, slot) in index.iter_mut().enumerate() {
        if !mdp.is_terminal(s) {
            *slot = Some(order.len());
            order.push(s);
        }
    }
    (order, index)
}

/// Transition matrix under `policy`, restricted to non-terminal states.
fn restricted_matrix(mdp: &TabularMdp, policy: &StochasticPolicy, order: &[usize], index: &[Option<usize>]) -> DMatrix<f64> {
    let k = order.len();
    let mut p = DMatrix::zeros(k, k);
    for (i, &s) in order.iter().enumerate() {
        for a in 0..mdp.n_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (t, &pt) in mdp.next_distribution(s, a).iter().enumerate() {
                if let Some(j) = index[t] {
                    p[(i, j)] += pa * pt;
                }
            }
        }
    }
    p
}

/// Solves `(I - gamma P_pi) V = r` over non-terminal states for an arbitrary
/// per-state reward vector.
pub(crate) fn solve_values(mdp: &TabularMdp, policy: &StochasticPolicy, state_reward: &[f64]) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    if !policy_is_proper(mdp, policy) {
        return Err(Error::NonConvergent { iterations: 0, residual: f64::INFINITY });
    }
    let (order, index) = non_terminal_index(mdp);
    let mut values = vec![0.0; mdp.n_states()];
    if order.is_empty() {
        return Ok(values);
    }
    let k = order.len();
    let p = restricted_matrix(mdp, policy, &order, &index);
    let system = DMatrix::identity(k, k) - p * mdp.gamma();
    let rhs = DVector::from_iterator(k, order.iter().map(|&s| state_reward[s]));
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::NonConvergent { iterations: 0, residual: f64::INFINITY })?;
    for (i, &s) in order.iter().enumerate() {
        values[s] = solution[i];
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergent { iterations: 0, residual: f64::INFINITY });
    }
    Ok(values)
}

fn expected_reward(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                policy.row(s).iter().zip(reward.row(s)).map(|(p, r)| p * r).sum()
            }
        })
        .collect()
}

/// Exact state values `V^pi`.
pub fn policy_values(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy) -> Result<Vec<f64>> {
    reward.check_against(mdp)?;
    solve_values(mdp, policy, &expected_reward(mdp, reward, policy))
}

/// Exact action values `Q^pi`.
pub fn policy_action_values(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy) -> Result<ValueTable> {
    let values = policy_values(mdp, reward, policy)?;
    let mut q = vec![0.0; mdp.n_states() * mdp.n_actions()];
    backup(mdp, reward, &values, &mut q);
    Ok(ValueTable::new(values, q, mdp.n_actions()))
}

fn start_value(mdp: &TabularMdp, values: &[f64]) -> f64 {
    mdp.initial_distribution().iter().zip(values).map(|(p, v)| p * v).sum()
}

fn check_residual(mdp: &TabularMdp, policy: &StochasticPolicy, state_reward: &[f64], values: &[f64], tol: f64) -> Result<()> {
    let n = mdp.n_states();
    let mut residual: f64 = 0.0;
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        let mut rhs = state_reward[s];
        for a in 0..mdp.n_actions() {
            let pa = policy.prob(s, a);
            if pa > 0.0 {
                let next: f64 = mdp.next_distribution(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
                rhs += mdp.gamma() * pa * next;
            }
        }
        residual = residual.max((rhs - values[s]).abs());
    }
    if residual > tol {
        return Err(Error::NonConvergent { iterations: 1, residual });
    }
    Ok(())
}

/// Expected discounted return `J = E[sum_t gamma^t R(s_t, a_t)]` from the
/// initial distribution, via a direct linear solve whose residual must be
/// within `tol`.
pub fn evaluate_policy(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy, tol: f64) -> Result<f64> {
    reward.check_against(mdp)?;
    let state_reward = expected_reward(mdp, reward, policy);
    let values = solve_values(mdp, policy, &state_reward)?;
    check_residual(mdp, policy, &state_reward, &values, tol)?;
    Ok(start_value(mdp, &values))
}

fn entropy_reward(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy, temperature: f64) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                return 0.0;
            }
            policy
                .row(s)
                .iter()
                .zip(reward.row(s))
                .map(|(&p, &r)| if p > 0.0 { p * (r - temperature * p.ln()) } else { 0.0 })
                .sum()
        })
        .collect()
}

/// Entropy-augmented state values: `V(s) = E[sum_t gamma^t (r_t + temperature * H(pi(.|s_t)))]`.
pub fn soft_policy_values(
    mdp: &TabularMdp,
    reward: &RewardTable,
    policy: &StochasticPolicy,
    temperature: f64,
) -> Result<Vec<f64>> {
    reward.check_against(mdp)?;
    solve_values(mdp, policy, &entropy_reward(mdp, reward, policy, temperature))
}

/// Entropy-augmented return from the initial distribution. Equals
/// [`evaluate_policy`] at `temperature == 0`.
pub fn evaluate_soft(
    mdp: &TabularMdp,
    reward: &RewardTable,
    policy: &StochasticPolicy,
    temperature: f64,
    tol: f64,
) -> Result<f64> {
    reward.check_against(mdp)?;
    let state_reward = entropy_reward(mdp, reward, policy, temperature);
    let values = solve_values(mdp, policy, &state_reward)?;
    check_residual(mdp, policy, &state_reward, &values, tol)?;
    Ok(start_value(mdp, &values))
}

/// Exact return of the per-step control mixture
/// `beta * rl_policy + (1 - beta) * demo_policy`.
pub fn evaluate_mixture(
    mdp: &TabularMdp,
    reward: &RewardTable,
    rl_policy: &StochasticPolicy,
    demo_policy: &StochasticPolicy,
    beta: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange(beta));
    }
    let mixture = demo_policy.mix_with(rl_policy, beta)?;
    evaluate_policy(mdp, reward, &mixture, 1e-9)
}

/// The MDP a learner faces when, at every step, its chosen action is applied
/// with probability `beta` and the demonstrator's action otherwise.
///
/// Any learner policy evaluated on the returned MDP/reward pair earns exactly
/// its mixture return on the original problem.
pub fn mixture_mdp(
    mdp: &TabularMdp,
    reward: &RewardTable,
    demo_policy: &StochasticPolicy,
    beta: f64,
) -> Result<(TabularMdp, RewardTable)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange(beta));
    }
    reward.check_against(mdp)?;
    demo_policy.check_against(mdp)?;
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut transition = vec![0.0; n * m * n];
    let mut induced = RewardTable::zeros(n, m);
    for s in 0..n {
        let mut demo_next = vec![0.0; n];
        let mut demo_reward = 0.0;
        for b in 0..m {
            let pb = demo_policy.prob(s, b);
            if pb == 0.0 {
                continue;
            }
            demo_reward += pb * reward.get(s, b);
            for (t, &pt) in mdp.next_distribution(s, b).iter().enumerate() {
                demo_next[t] += pb * pt;
            }
        }
        for a in 0..m {
            let base = (s * m + a) * n;
            if mdp.is_terminal(s) {
                transition[base + s] = 1.0;
            } else {
                for (t, &pt) in mdp.next_distribution(s, a).iter().enumerate() {
                    transition[base + t] = beta * pt + (1.0 - beta) * demo_next[t];
                }
            }
            induced.set(s, a, beta * reward.get(s, a) + (1.0 - beta) * demo_reward);
        }
    }
    let induced_mdp = TabularMdp::new(n, m, transition, mdp.gamma(), &mdp.terminal_states(), mdp.initial_distribution().to_vec())?;
    Ok((induced_mdp, induced))
}

/// Normalized discounted state-visitation distribution.
///
/// Each visit at time `t` to a non-terminal state has weight `gamma^t`; the
/// arrival at a terminal state counts once, also with weight `gamma^t`. The
/// weights are normalized by their total, which is `1 / (1 - gamma)` for
/// continuing problems and the expected episode length at `gamma == 1`.
pub fn discounted_occupancy(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<Vec<f64>> {
    let counts = visit_weights(mdp, policy, mdp.initial_distribution())?;
    let total: f64 = counts.iter().sum();
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Unnormalized discounted visit weights from an arbitrary start mass.
pub(crate) fn visit_weights(mdp: &TabularMdp, policy: &StochasticPolicy, start: &[f64]) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    if !policy_is_proper(mdp, policy) {
        return Err(Error::NonConvergent { iterations: 0, residual: f64::INFINITY });
    }
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let (order, index) = non_terminal_index(mdp);
    let mut weights = vec![0.0; n];
    if !order.is_empty() {
        let k = order.len();
        let p = restricted_matrix(mdp, policy, &order, &index);
        let system = DMatrix::identity(k, k) - p.transpose() * gamma;
        let rhs = DVector::from_iterator(k, order.iter().map(|&s| start[s]));
        let x = system
            .lu()
            .solve(&rhs)
            .ok_or(Error::NonConvergent { iterations: 0, residual: f64::INFINITY })?;
        for (i, &s) in order.iter().enumerate() {
            weights[s] = x[i].max(0.0);
        }
    }
    let non_terminal = weights.clone();
    for t in 0..n {
        if !mdp.is_terminal(t) {
            continue;
        }
        let mut arrivals = start[t];
        for &s in &order {
            let mut flow = 0.0;
            for a in 0..mdp.n_actions() {
                flow += policy.prob(s, a) * mdp.transition_prob(s, a, t);
            }
            arrivals += gamma * non_terminal[s] * flow;
        }
        weights[t] = arrivals;
    }
    Ok(weights)
}

/// Probability of entering any of `targets` within `horizon` steps.
pub fn reach_probability(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    targets: &[usize],
    horizon: usize,
) -> Result<f64> {
    policy.check_against(mdp)?;
    let n = mdp.n_states();
    let mut is_target = vec![false; n];
    for &t in targets {
        if t >= n {
            return Err(Error::InvalidArgument(format!("target state {t} out of range")));
        }
        is_target[t] = true;
    }
    let mut reach: Vec<f64> = is_target.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if is_target[s] {
                next[s] = 1.0;
                continue;
            }
            if mdp.is_terminal(s) {
                continue;
            }
            let mut total = 0.0;
            for a in 0..mdp.n_actions() {
                let pa = policy.prob(s, a);
                if pa > 0.0 {
                    total += pa * mdp.next_distribution(s, a).iter().zip(&reach).map(|(p, r)| p * r).sum::<f64>();
                }
            }
            next[s] = total;
        }
        reach = next;
    }
    Ok(start_value(mdp, &reach))
}
