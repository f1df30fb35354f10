//! Independent oracles shared by the integration tests. Nothing here calls
//! the library's solvers.

#![allow(clippy::needless_range_loop)]

#![allow(dead_code)]

use rand::Rng;
use taskphase_core::sampling::stream_rng;
use taskphase_core::{RewardTable, StochasticPolicy, TabularMdp};

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// State values of `policy` from `V = r_pi + gamma P_pi V`, with terminal values pinned to 0.
pub fn policy_values(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy) -> Vec<f64> {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s][s] = 1.0;
        if mdp.is_terminal(s) {
            continue;
        }
        for act in 0..m {
            let p = policy.prob(s, act);
            b[s] += p * reward.get(s, act);
            for next in 0..n {
                if !mdp.is_terminal(next) {
                    a[s][next] -= mdp.gamma() * p * mdp.transition_prob(s, act, next);
                }
            }
        }
    }
    solve_linear(a, b)
}

pub fn start_value(mdp: &TabularMdp, values: &[f64]) -> f64 {
    mdp.initial_distribution().iter().zip(values).map(|(p, v)| p * v).sum()
}

pub fn policy_return(mdp: &TabularMdp, reward: &RewardTable, policy: &StochasticPolicy) -> f64 {
    start_value(mdp, &policy_values(mdp, reward, policy))
}

/// Every deterministic policy, as action lists.
pub fn all_deterministic(n_states: usize, n_actions: usize) -> Vec<Vec<usize>> {
    let total = n_actions.pow(n_states as u32);
    (0..total)
        .map(|mut code| {
            (0..n_states)
                .map(|_| {
                    let a = code % n_actions;
                    code /= n_actions;
                    a
                })
                .collect()
        })
        .collect()
}

/// Best deterministic policy by exhaustive search of the start-state value.
pub fn best_by_enumeration(mdp: &TabularMdp, reward: &RewardTable) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for actions in all_deterministic(mdp.n_states(), mdp.n_actions()) {
        let policy = StochasticPolicy::deterministic(mdp.n_actions(), &actions).unwrap();
        let value = policy_return(mdp, reward, &policy);
        if value > best.1 + 1e-12 {
            best = (actions, value);
        }
    }
    best
}

/// Episodic MDP: the last state is terminal and every other row puts at
/// least 0.2 on it. The start state is 0.
pub fn episodic_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut rng = stream_rng(seed, 77);
    let terminal = n_states - 1;
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = &mut transition[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
            if s == terminal {
                row[terminal] = 1.0;
                continue;
            }
            let raw: Vec<f64> = (0..terminal).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let stop = 0.2 + 0.3 * rng.random::<f64>();
            for (next, r) in raw.iter().enumerate() {
                row[next] = (1.0 - stop) * r / total;
            }
            row[terminal] = stop;
        }
    }
    let mut initial = vec![0.0; n_states];
    initial[0] = 1.0;
    TabularMdp::new(n_states, n_actions, transition, gamma, &[terminal], initial).unwrap()
}

/// Random table with zero rows on terminal states.
pub fn reward_for(mdp: &TabularMdp, seed: u64) -> RewardTable {
    let mut rng = stream_rng(seed, 78);
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let mut table = RewardTable::zeros(n, m);
    for s in (0..n).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..m {
            table.set(s, a, 2.0 * rng.random::<f64>() - 1.0);
        }
    }
    table
}

/// `(n_states, n_actions)` drawn from 2..=6 and 2..=3.
pub fn random_shape(seed: u64) -> (usize, usize) {
    let mut rng = stream_rng(seed, 79);
    (rng.random_range(2..=6), rng.random_range(2..=3))
}

/// Draws from a categorical distribution.
pub fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap()
}

/// Mean and standard error.
pub fn mean_se(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
