//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskphase_core::envs::{Environment, GridWorldSpec};
use taskphase_core::reward_phasing::AnnealSchedule;
use taskphase_core::rl_eps::{PhasingSetup, RlEpsConfig};
use taskphase_core::task::{ContinuumMode, Granularity};
use taskphase_core::temporal::{AlphaScheduler, ControlProtocol};
use taskphase_core::theory::uniform_grid;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Counterexample {},
    FlagGrid {
        #[serde(default = "GridWorldSpec::default_flag_grid")]
        grid: GridWorldSpec,
    },
    CliffSlide {
        #[serde(default = "GridWorldSpec::default_cliff_slide")]
        grid: GridWorldSpec,
    },
}

impl EnvironmentConfig {
    /// Builds the environment; grid builders break move ties with `seed`.
    pub fn build(&self, seed: u64) -> taskphase_core::Result<Environment> {
        match self {
            Self::Counterexample {} => Ok(Environment::counterexample()),
            Self::FlagGrid { grid } => Environment::flag_grid(grid, seed),
            Self::CliffSlide { grid } => Environment::cliff_slide(grid, seed),
        }
    }

    pub fn has_dense_reward(&self) -> bool {
        matches!(self, Self::Counterexample {})
    }
}

fn default_smoothing() -> f64 {
    taskphase_core::demos::DEFAULT_SMOOTHING
}

/// Maximum-entropy IRL settings for deriving `R^d` from demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrlConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Largest absolute entry of the rescaled reward.
    pub scale: f64,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self { temperature: 1.0, learning_rate: 1.0, max_iters: 2_000, tol: 1e-6, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub episodes: usize,
    pub horizon: usize,
    /// Replace the scripted demonstrator with its behavior clone.
    #[serde(default)]
    pub behavior_clone: bool,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub irl: IrlConfig,
}

/// [`PhasingSetup`] without its seed, which each run takes from `seeds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SetupConfig {
    pub horizon: usize,
    pub episode_cap: usize,
    pub relative_threshold: Option<f64>,
    pub reward_draws: usize,
    pub learning_rate: f64,
    pub exploration_noise: f64,
}

impl Default for SetupConfig {
    fn default() -> Self {
        let base = PhasingSetup::default();
        Self {
            horizon: base.horizon,
            episode_cap: base.episode_cap,
            relative_threshold: base.relative_threshold,
            reward_draws: base.reward_draws,
            learning_rate: base.learning_rate,
            exploration_noise: base.exploration_noise,
        }
    }
}

impl SetupConfig {
    pub fn with_seed(&self, rng_seed: u64) -> PhasingSetup {
        PhasingSetup {
            horizon: self.horizon,
            episode_cap: self.episode_cap,
            rng_seed,
            relative_threshold: self.relative_threshold,
            reward_draws: self.reward_draws,
            learning_rate: self.learning_rate,
            exploration_noise: self.exploration_noise,
        }
    }
}

/// Parameters of the `verify` checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Explicit `beta` grid; `grid_step` is used when absent.
    pub grid: Option<Vec<f64>>,
    pub grid_step: f64,
    /// Random instances in the monotonicity sweep.
    pub instances: usize,
    pub tol: f64,
    /// Reward draws per grid point in the V2 check.
    pub draws: usize,
    /// Counterexample probes on either side of the switch.
    pub below: f64,
    pub above: f64,
    pub margin: f64,
    /// Largest final gap that counts as converged.
    pub convergence_tol: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            grid: None,
            grid_step: 0.02,
            instances: 50,
            tol: 1e-9,
            draws: 100_000,
            below: 0.49,
            above: 0.51,
            margin: 1e-9,
            convergence_tol: taskphase_core::theory::CONVERGENCE_TOL,
        }
    }
}

impl TheoryConfig {
    pub fn beta_grid(&self) -> taskphase_core::Result<Vec<f64>> {
        match &self.grid {
            Some(grid) => Ok(grid.clone()),
            None => uniform_grid(self.grid_step),
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub mode: ContinuumMode,
    #[serde(default)]
    pub granularity: Granularity,
    /// Control protocol of temporal phasing; its `rng_seed` is replaced by
    /// the run seed. Defaults to one draw per step.
    #[serde(default)]
    pub protocol: Option<ControlProtocol>,
    pub scheduler: AlphaScheduler,
    pub learner: RlEpsConfig,
    #[serde(default)]
    pub anneal: Option<AnnealSchedule>,
    #[serde(default)]
    pub setup: SetupConfig,
    /// Needed for reward phasing on environments without a hand-specified
    /// dense reward, for behavior cloning, and by `demo-collect`.
    #[serde(default)]
    pub demos: Option<DemoConfig>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub theory: TheoryConfig,
}

fn positive(errors: &mut Vec<String>, field: &str, value: f64) {
    if !(value > 0.0 && value.is_finite()) {
        errors.push(format!("{field}: must be positive, got {value}"));
    }
}

fn at_least_one(errors: &mut Vec<String>, field: &str, value: usize) {
    if value == 0 {
        errors.push(format!("{field}: must be at least 1"));
    }
}

fn check_core(errors: &mut Vec<String>, field: &str, result: taskphase_core::Result<()>) {
    if let Err(e) = result {
        errors.push(format!("{field}: {e}"));
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().to_string();
            CliError::ConfigInvalid(vec![if path == "." { message } else { format!("{path}: {message}") }])
        })?;
        de.end().map_err(|e| CliError::ConfigInvalid(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ConfigInvalid(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every violation, so one edit can fix them all.
    pub fn violations(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.seeds.is_empty() {
            errors.push("seeds: must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            errors.push("seeds: must not repeat".into());
        }
        if let Err(e) = self.environment.build(0) {
            errors.push(format!("environment: {e}"));
        }
        check_core(&mut errors, "scheduler", self.scheduler.validate());
        check_core(&mut errors, "learner", self.learner.validate());
        if let Some(anneal) = &self.anneal {
            check_core(&mut errors, "anneal", anneal.validate());
        }
        match (&self.protocol, self.mode) {
            (Some(protocol), ContinuumMode::Temporal) => {
                check_core(&mut errors, "protocol", ControlProtocol::new(protocol.variant, 0).map(|_| ()));
            }
            (Some(_), _) => errors.push(format!("protocol: only applies to temporal mode, not {}", self.mode.name())),
            (None, _) => {}
        }
        let setup = &self.setup;
        at_least_one(&mut errors, "setup.horizon", setup.horizon);
        at_least_one(&mut errors, "setup.reward_draws", setup.reward_draws);
        if !(0.0..=1.0).contains(&setup.exploration_noise) {
            errors.push(format!("setup.exploration_noise: must lie in [0, 1], got {}", setup.exploration_noise));
        }
        if let Some(factor) = setup.relative_threshold {
            if !factor.is_finite() {
                errors.push(format!("setup.relative_threshold: must be finite, got {factor}"));
            }
        }
        positive(&mut errors, "setup.learning_rate", setup.learning_rate);
        if let Some(demos) = &self.demos {
            at_least_one(&mut errors, "demos.episodes", demos.episodes);
            at_least_one(&mut errors, "demos.horizon", demos.horizon);
            positive(&mut errors, "demos.smoothing", demos.smoothing);
            positive(&mut errors, "demos.irl.temperature", demos.irl.temperature);
            positive(&mut errors, "demos.irl.learning_rate", demos.irl.learning_rate);
            positive(&mut errors, "demos.irl.tol", demos.irl.tol);
            positive(&mut errors, "demos.irl.scale", demos.irl.scale);
        } else if self.mode != ContinuumMode::Temporal && !self.environment.has_dense_reward() {
            errors.push("demos: required to derive a dense reward for reward phasing on this environment".into());
        }
        let theory = &self.theory;
        if let Err(e) = theory.beta_grid().and_then(|grid| {
            if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) || grid.windows(2).any(|w| !(w[1] > w[0])) {
                Err(taskphase_core::Error::InvalidArgument("must rise strictly from 0 to 1".into()))
            } else {
                Ok(())
            }
        }) {
            errors.push(format!("theory.grid: {e}"));
        }
        at_least_one(&mut errors, "theory.instances", theory.instances);
        if theory.draws < 2 {
            errors.push("theory.draws: must be at least 2".into());
        }
        if !(theory.tol >= 0.0 && theory.tol.is_finite()) {
            errors.push(format!("theory.tol: must be non-negative, got {}", theory.tol));
        }
        if !(0.0 <= theory.below && theory.below < theory.above && theory.above <= 1.0) {
            errors.push(format!(
                "theory.below/above: need 0 <= below < above <= 1, got {} and {}",
                theory.below, theory.above
            ));
        }
        positive(&mut errors, "theory.convergence_tol", theory.convergence_tol);
        errors
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let errors = self.violations();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::ConfigInvalid(errors))
        }
    }
}
