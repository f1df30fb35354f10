//! Phased rewards and late-phase annealing of learner hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::RewardTable;
use crate::task::{interpolate, resolve_reward, ContinuumMode, ContinuumSpec};

/// Reward of the phased task at `beta` for one episode.
///
/// V1 is deterministic: `(1 - beta) R^d + R^f`. V2 returns `R^d + R^f` when
/// the episode's coin `U[0,1)` exceeds `beta`, otherwise `R^f`.
pub fn phased_reward(spec: &ContinuumSpec, beta: f64, episode_rng_seed: u64) -> Result<RewardTable> {
    if spec.mode == ContinuumMode::Temporal {
        return Err(Error::WrongMode(spec.mode.name().into()));
    }
    let task = interpolate(spec, beta)?;
    Ok(resolve_reward(&task.reward, episode_rng_seed))
}

/// Mean of `draws` episode rewards with seeds `base_seed, base_seed + 1, ...`.
/// Equals [`phased_reward`] for V1.
pub fn sampled_phase_reward(spec: &ContinuumSpec, beta: f64, base_seed: u64, draws: usize) -> Result<RewardTable> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    if spec.mode == ContinuumMode::RewardV1 {
        return phased_reward(spec, beta, base_seed);
    }
    let first = phased_reward(spec, beta, base_seed)?;
    let mut sum = first.values().to_vec();
    for k in 1..draws {
        let table = phased_reward(spec, beta, base_seed.wrapping_add(k as u64))?;
        for (acc, v) in sum.iter_mut().zip(table.values()) {
            *acc += v;
        }
    }
    let n = draws as f64;
    RewardTable::new(first.n_states(), first.n_actions(), sum.into_iter().map(|v| v / n).collect())
}

/// Hyperparameters that annealing may override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerHyperparams {
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub breakpoint_fraction: f64,
    pub late_entropy_coef: f64,
    pub late_learning_rate: f64,
    pub late_alpha: f64,
}

impl AnnealSchedule {
    pub fn new(breakpoint_fraction: f64, late_entropy_coef: f64, late_learning_rate: f64, late_alpha: f64) -> Result<Self> {
        let schedule = Self { breakpoint_fraction, late_entropy_coef, late_learning_rate, late_alpha };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.breakpoint_fraction > 0.0 && self.breakpoint_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "breakpoint_fraction must lie in (0, 1], got {}",
                self.breakpoint_fraction
            )));
        }
        for (name, value) in [
            ("late_entropy_coef", self.late_entropy_coef),
            ("late_learning_rate", self.late_learning_rate),
            ("late_alpha", self.late_alpha),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {value}")));
            }
        }
        Ok(())
    }
}

/// Substitutes the late values once `beta` reaches the breakpoint.
pub fn apply_anneal(schedule: &AnnealSchedule, beta: f64, base: LearnerHyperparams) -> LearnerHyperparams {
    if beta >= schedule.breakpoint_fraction {
        LearnerHyperparams {
            entropy_coef: schedule.late_entropy_coef,
            learning_rate: schedule.late_learning_rate,
            alpha: schedule.late_alpha,
        }
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Granularity;

    fn spec(mode: ContinuumMode) -> ContinuumSpec {
        let dense = RewardTable::from_rows(vec![vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let target = RewardTable::from_rows(vec![vec![0.0, 0.0], vec![-1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        ContinuumSpec::reward(mode, &dense, &target, Granularity::PerEpisode).unwrap()
    }

    #[test]
    fn endpoints() {
        for mode in [ContinuumMode::RewardV1, ContinuumMode::RewardV2] {
            let spec = spec(mode);
            for seed in 0..50 {
                assert_eq!(phased_reward(&spec, 1.0, seed).unwrap(), spec.target_reward());
            }
            assert_eq!(phased_reward(&spec, 0.0, 3).unwrap(), spec.start_reward());
        }
        assert_eq!(phased_reward(&spec(ContinuumMode::RewardV1), 0.5, 0).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn temporal_spec_is_rejected() {
        let target = RewardTable::zeros(1, 2);
        let demo = crate::mdp::StochasticPolicy::uniform(1, 2);
        let temporal =
            ContinuumSpec::temporal(&demo, &target, crate::temporal::ControlProtocol::random_step(0)).unwrap();
        assert!(matches!(phased_reward(&temporal, 0.5, 0), Err(Error::WrongMode(_))));
    }

    #[test]
    fn v1_entries_move_against_the_dense_sign() {
        let spec = spec(ContinuumMode::RewardV1);
        let dense = RewardTable::from_rows(vec![vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let tables: Vec<RewardTable> =
            (0..=10).map(|i| phased_reward(&spec, i as f64 / 10.0, 0).unwrap()).collect();
        for pair in tables.windows(2) {
            for (i, d) in dense.values().iter().enumerate() {
                let (a, b) = (pair[0].values()[i], pair[1].values()[i]);
                if *d >= 0.0 {
                    assert!(b <= a);
                } else {
                    assert!(b >= a);
                }
            }
        }
    }

    #[test]
    fn anneal_rule() {
        let schedule = AnnealSchedule::new(0.75, 0.001, 0.00007, 0.001).unwrap();
        let base = LearnerHyperparams { entropy_coef: 0.01, learning_rate: 3e-4, alpha: 0.1 };
        let late = apply_anneal(&schedule, 0.8, base);
        assert_eq!(late, LearnerHyperparams { entropy_coef: 0.001, learning_rate: 0.00007, alpha: 0.001 });
        assert_eq!(apply_anneal(&schedule, 0.5, base), base);
        assert_eq!(apply_anneal(&schedule, 0.8, late), late);
        let at_end = AnnealSchedule::new(1.0, 0.001, 0.00007, 0.001).unwrap();
        assert_eq!(apply_anneal(&at_end, 0.999, base), base);
        assert_eq!(apply_anneal(&at_end, 1.0, base), late);
        assert!(AnnealSchedule::new(0.0, 0.001, 0.00007, 0.001).is_err());
    }
}
