//! Seeded trajectory sampling.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, stream)`, so any
//! episode can be regenerated independently of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mdp::{Controller, RewardTable, Step, StochasticPolicy, TabularMdp, Trajectory};

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `index`-th uniform draw in `[0, 1)` of stream `(seed, stream)`,
/// computed by random access.
pub fn keyed_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = stream_rng(seed, stream);
    // each f64 consumes two 32-bit words
    rng.set_word_pos(u128::from(index) * 2);
    rng.random::<f64>()
}

/// Inverse-CDF draw from a probability row.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return i;
            }
        }
    }
    last_positive
}

/// Runs one episode, asking `choose(t, state, rng)` for each action.
pub(crate) fn rollout<R, F>(
    mdp: &TabularMdp,
    reward: &RewardTable,
    horizon: usize,
    rng: &mut R,
    mut choose: F,
) -> Result<Trajectory>
where
    R: Rng,
    F: FnMut(usize, usize, &mut R) -> (usize, Controller),
{
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    reward.check_against(mdp)?;
    let mut state = sample_index(mdp.initial_distribution(), rng.random());
    let mut steps = Vec::with_capacity(horizon.min(1024));
    for t in 0..horizon {
        if mdp.is_terminal(state) {
            break;
        }
        let (action, controller) = choose(t, state, rng);
        steps.push(Step { state, action, reward: reward.get(state, action), controller });
        state = sample_index(mdp.next_distribution(state, action), rng.random());
    }
    Ok(Trajectory { horizon, steps })
}

/// Samples one episode of at most `horizon` steps; stops early at a terminal state.
pub fn sample_trajectory(
    mdp: &TabularMdp,
    reward: &RewardTable,
    policy: &StochasticPolicy,
    horizon: usize,
    rng_seed: u64,
) -> Result<Trajectory> {
    policy.check_against(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rollout(mdp, reward, horizon, &mut rng, |_, s, rng| {
        (sample_index(policy.row(s), rng.random()), Controller::Learner)
    })
}
