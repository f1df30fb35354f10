//! Demonstration datasets, behavior cloning and tabular maximum-entropy IRL.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Controller, RewardTable, StochasticPolicy, TabularMdp, Trajectory};
use crate::sampling::{rollout, sample_index, stream_rng};
use crate::solve::{soft_value_iteration, visit_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub trajectories: Vec<Trajectory>,
    pub source_label: String,
}

impl DemoDataset {
    pub fn n_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Visit counts indexed `s * n_actions + a`.
    pub fn counts(&self, n_states: usize, n_actions: usize) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; n_states * n_actions];
        for step in self.trajectories.iter().flat_map(|t| &t.steps) {
            if step.state >= n_states || step.action >= n_actions {
                return Err(Error::ShapeMismatch(format!(
                    "step ({}, {}) outside a {n_states}x{n_actions} environment",
                    step.state, step.action
                )));
            }
            counts[step.state * n_actions + step.action] += 1.0;
        }
        Ok(counts)
    }

    /// One trajectory per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for trajectory in &self.trajectories {
            out.push_str(&serde_json::to_string(trajectory)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str, source_label: impl Into<String>) -> Result<Self> {
        let trajectories = text
            .lines()
            .filter(|line| !line.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<Trajectory>, _>>()?;
        Ok(Self { trajectories, source_label: source_label.into() })
    }
}

/// `n_episodes` demonstrator episodes; episode `i` uses RNG stream `i` of `rng_seed`.
pub fn collect_demos(
    mdp: &TabularMdp,
    reward: &RewardTable,
    demo_policy: &StochasticPolicy,
    n_episodes: usize,
    horizon: usize,
    rng_seed: u64,
) -> Result<DemoDataset> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    demo_policy.check_against(mdp)?;
    let trajectories = (0..n_episodes as u64)
        .map(|episode| {
            let mut rng = stream_rng(rng_seed, episode);
            rollout(mdp, reward, horizon, &mut rng, |_, s, rng| {
                (sample_index(demo_policy.row(s), rng.random()), Controller::Demonstrator)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DemoDataset { trajectories, source_label: format!("demonstrator seed={rng_seed}") })
}

/// Default additive smoothing for [`behavior_clone`].
pub const DEFAULT_SMOOTHING: f64 = 1e-3;

/// Smoothed empirical action frequencies; unvisited states come out uniform.
pub fn behavior_clone(data: &DemoDataset, n_states: usize, n_actions: usize, smoothing: f64) -> Result<StochasticPolicy> {
    if data.n_steps() == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!("smoothing must be positive, got {smoothing}")));
    }
    let counts = data.counts(n_states, n_actions)?;
    let mut probs = Vec::with_capacity(counts.len());
    for row in counts.chunks(n_actions) {
        let total: f64 = row.iter().sum::<f64>() + smoothing * n_actions as f64;
        probs.extend(row.iter().map(|c| (c + smoothing) / total));
    }
    StochasticPolicy::new(n_states, n_actions, probs)
}

/// Outcome of [`maxent_irl_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrlFit {
    pub reward: RewardTable,
    pub iterations: usize,
    /// Max-norm of the final likelihood gradient.
    pub residual: f64,
    pub converged: bool,
}

/// Tabular maximum-entropy IRL; [`Error::NonConvergent`] when the gradient
/// stays above `tol`. Use [`maxent_irl_fit`] to keep the best iterate.
pub fn maxent_irl(
    mdp: &TabularMdp,
    data: &DemoDataset,
    temperature: f64,
    learning_rate: f64,
    max_iters: usize,
    tol: f64,
) -> Result<RewardTable> {
    let fit = maxent_irl_fit(mdp, data, temperature, learning_rate, max_iters, tol)?;
    if fit.converged {
        Ok(fit.reward)
    } else {
        Err(Error::NonConvergent { iterations: fit.iterations, residual: fit.residual })
    }
}

/// Gradient ascent on the per-step log-likelihood of the demonstrations under
/// the soft-optimal policy of a tabular reward `theta(s, a)`.
///
/// With `Q` the soft action values, `d log pi(a|s) / d theta` is
/// `(e_{sa} + gamma * sum_s' P(s'|s,a) D_{s'} - D_s) / temperature`, where
/// `D_x` is the model's discounted state-action visitation from `x`. Summed
/// over the data this needs two visitation solves per iteration: one from
/// the data's state counts and one from the discounted successor mass.
pub fn maxent_irl_fit(
    mdp: &TabularMdp,
    data: &DemoDataset,
    temperature: f64,
    learning_rate: f64,
    max_iters: usize,
    tol: f64,
) -> Result<IrlFit> {
    let n_steps = data.n_steps();
    if n_steps == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(temperature > 0.0) || !(learning_rate > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidArgument("temperature, learning_rate and tol must be positive".into()));
    }
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let counts = data.counts(n, m)?;
    let scale = 1.0 / n_steps as f64;
    let mut visits = vec![0.0; n];
    let mut successors = vec![0.0; n];
    for s in 0..n {
        for a in 0..m {
            let c = counts[s * m + a] * scale;
            if c == 0.0 {
                continue;
            }
            visits[s] += c;
            for (t, p) in mdp.next_distribution(s, a).iter().enumerate() {
                successors[t] += mdp.gamma() * c * p;
            }
        }
    }
    let mut theta = RewardTable::zeros(n, m);
    let mut best = (f64::INFINITY, theta.clone());
    let mut iterations = 0;
    loop {
        let (_, policy) = soft_value_iteration(mdp, &theta, temperature, 1e-12)?;
        let from_visits = visit_weights(mdp, &policy, &visits)?;
        let from_successors = visit_weights(mdp, &policy, &successors)?;
        let mut gradient = vec![0.0; n * m];
        for s in 0..n {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..m {
                let idx = s * m + a;
                let model = (from_visits[s] - from_successors[s]) * policy.prob(s, a);
                gradient[idx] = (counts[idx] * scale - model) / temperature;
            }
        }
        let residual = gradient.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if residual < best.0 {
            best = (residual, theta.clone());
        }
        if residual <= tol || iterations >= max_iters {
            let converged = best.0 <= tol;
            return Ok(IrlFit { reward: best.1, iterations, residual: best.0, converged });
        }
        let values: Vec<f64> = theta.values().iter().zip(&gradient).map(|(t, g)| t + learning_rate * g).collect();
        theta = RewardTable::new(n, m, values)?;
        iterations += 1;
    }
}

/// Rescales so the largest absolute entry equals `target_scale` exactly.
pub fn rescale_reward(reward: &RewardTable, target_scale: f64) -> Result<RewardTable> {
    if !(target_scale > 0.0 && target_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("target_scale must be positive, got {target_scale}")));
    }
    let top = reward.max_abs();
    if top == 0.0 {
        return Err(Error::ZeroReward);
    }
    let factor = target_scale / top;
    let values = reward
        .values()
        .iter()
        .map(|&v| if v.abs() == top { target_scale.copysign(v) } else { v * factor })
        .collect();
    RewardTable::new(reward.n_states(), reward.n_actions(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Step;

    fn line_mdp() -> TabularMdp {
        // 0 -> 1 (terminal) under either action
        TabularMdp::new(2, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 1.0, &[1], vec![1.0, 0.0]).unwrap()
    }

    fn dataset(steps: Vec<(usize, usize)>) -> DemoDataset {
        let steps = steps
            .into_iter()
            .map(|(state, action)| Step { state, action, reward: 0.0, controller: Controller::Demonstrator })
            .collect();
        DemoDataset { trajectories: vec![Trajectory { horizon: 1000, steps }], source_label: "test".into() }
    }

    #[test]
    fn single_deterministic_episode() {
        let mdp = line_mdp();
        let policy = StochasticPolicy::deterministic(2, &[1, 0]).unwrap();
        let reward = RewardTable::zeros(2, 2);
        let a = collect_demos(&mdp, &reward, &policy, 1, 5, 1).unwrap();
        let b = collect_demos(&mdp, &reward, &policy, 1, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectories[0].steps.len(), 1);
        assert_eq!(a.trajectories[0].steps[0].action, 1);
        assert!(collect_demos(&mdp, &reward, &policy, 0, 5, 1).is_err());
    }

    #[test]
    fn cloning_counting_formula() {
        let data = dataset(vec![(0, 1); 100]);
        let policy = behavior_clone(&data, 2, 2, 1e-3).unwrap();
        assert!((policy.prob(0, 1) - 100.001 / 100.002).abs() < 1e-15);
        assert_eq!(policy.row(1), &[0.5, 0.5]);
        let empty = DemoDataset { trajectories: vec![], source_label: String::new() };
        assert!(matches!(behavior_clone(&empty, 2, 2, 1e-3), Err(Error::EmptyDataset)));
        assert!(behavior_clone(&dataset(vec![(5, 0)]), 2, 2, 1e-3).is_err());
    }

    #[test]
    fn json_lines_round_trip() {
        let data = dataset(vec![(0, 1), (1, 0)]);
        let text = data.to_json_lines().unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("[0,1,0.0,\"demonstrator\"]"));
        assert_eq!(DemoDataset::from_json_lines(&text, "test").unwrap(), data);
    }

    #[test]
    fn irl_on_balanced_data_is_action_symmetric() {
        let mdp = line_mdp();
        let data = dataset(vec![(0, 0), (0, 1), (0, 0), (0, 1)]);
        let reward = maxent_irl(&mdp, &data, 1.0, 1.0, 500, 1e-8).unwrap();
        assert!((reward.get(0, 0) - reward.get(0, 1)).abs() <= 1e-8);
        assert!(matches!(maxent_irl(&mdp, &dataset(vec![]), 1.0, 1.0, 10, 1e-8), Err(Error::EmptyDataset)));
    }

    #[test]
    fn irl_matches_bandit_frequencies() {
        let mdp = line_mdp();
        let data = dataset(vec![(0, 0), (0, 0), (0, 0), (0, 1)]);
        let reward = maxent_irl(&mdp, &data, 1.0, 2.0, 10_000, 1e-9).unwrap();
        let (_, policy) = soft_value_iteration(&mdp, &reward, 1.0, 1e-12).unwrap();
        assert!((policy.prob(0, 0) - 0.75).abs() < 1e-8);
    }

    #[test]
    fn rescaling() {
        let reward = RewardTable::new(1, 3, vec![-4.0, 2.0, 1.0]).unwrap();
        assert_eq!(rescale_reward(&reward, 1.0).unwrap().values(), &[-1.0, 0.5, 0.25]);
        assert_eq!(rescale_reward(&reward, 4.0).unwrap(), reward);
        let odd = RewardTable::new(1, 2, vec![0.3, 0.1]).unwrap();
        assert_eq!(rescale_reward(&odd, 0.7).unwrap().max_abs(), 0.7);
        assert!(matches!(rescale_reward(&RewardTable::zeros(1, 2), 1.0), Err(Error::ZeroReward)));
    }
}
