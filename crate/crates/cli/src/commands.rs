//! The four subcommands. Each writes into the config's output directory and
//! returns what happened; exit codes are decided by the caller.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use taskphase_core::solve::evaluate_policy;
use taskphase_core::task::ContinuumMode;
use taskphase_core::theory::{
    check_convergence_with, check_counterexample, check_monotonicity, check_v2_equivalence, compute_policy_curve,
    monotonicity_sweep, PolicyCurve,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::{needs_dense, run_seed, CurveRow, SeedContext, SeedOutcome, SeedSummary, CURVE_COLUMNS};
use crate::output::{csv_bytes, OutputDir};
use crate::plot::{band_plot, Series};

/// How a command ended, short of an error that stopped it outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
    /// Some seeds failed; their errors are in the manifest.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Success => 0,
            Self::CheckFailed => 1,
            Self::Partial => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Check {
    Monotonicity,
    Continuity,
    Convergence,
    Counterexample,
    #[value(name = "v2_equivalence", alias = "v2-equivalence")]
    V2Equivalence,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Self::Monotonicity => "monotonicity",
            Self::Continuity => "continuity",
            Self::Convergence => "convergence",
            Self::Counterexample => "counterexample",
            Self::V2Equivalence => "v2_equivalence",
        }
    }
}

#[derive(Serialize)]
struct RunBody<'a> {
    partial: bool,
    runs: Vec<&'a SeedSummary>,
}

fn curve_plot(title: &str, outcomes: &[SeedOutcome]) -> Series {
    let runs: Vec<Vec<f64>> = outcomes.iter().map(|o| o.rows.iter().map(|r| r.return_f).collect()).collect();
    Series::from_runs(title, &runs)
}

/// One phasing run per seed: `curves.csv`, `curves.svg` and the manifest.
pub fn cmd_run(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let outcomes: Vec<SeedOutcome> = config.seeds.par_iter().map(|&seed| run_seed(config, seed)).collect();
    let mut out = OutputDir::open(&config.output_dir)?;
    let rows: Vec<&CurveRow> = outcomes.iter().flat_map(|o| &o.rows).collect();
    out.write_csv("curves.csv", "learning curve, one row per seed and phase", &CURVE_COLUMNS, &csv_bytes(&rows, &CURVE_COLUMNS)?)?;
    let label = format!("{} ({} seeds)", config.mode.name(), outcomes.len());
    let svg = band_plot("Target return per phase", "phase", "J^f (mean ± 1σ)", &[curve_plot(&label, &outcomes)]);
    out.write("curves.svg", "svg", "mean target return across seeds with a ±1σ band", svg.as_bytes())?;
    out.write_timing(started.elapsed().as_secs_f64())?;
    let partial = outcomes.iter().any(|o| o.summary.error.is_some());
    let body = RunBody { partial, runs: outcomes.iter().map(|o| &o.summary).collect() };
    out.finish("run", config, &body)?;
    Ok(if partial { Outcome::Partial } else { Outcome::Success })
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub check: &'static str,
    pub holds: bool,
    /// Why a failed check failed, in words.
    pub explanation: Option<String>,
    pub details: Value,
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("reports serialize")
}

/// The `beta` pairs across which the curve's step KL is infinite.
fn jumps(curve: &PolicyCurve) -> Vec<(f64, f64)> {
    (1..curve.betas.len())
        .filter(|&i| curve.max_step_kl[i].is_infinite())
        .map(|i| (curve.betas[i - 1], curve.betas[i]))
        .collect()
}

fn first_context(config: &ExperimentConfig, need_dense: bool) -> Result<SeedContext, CliError> {
    Ok(SeedContext::prepare(config, config.seeds[0], need_dense)?)
}

fn verify_report(config: &ExperimentConfig, check: Check) -> Result<(VerifyReport, Option<PolicyCurve>), CliError> {
    let theory = &config.theory;
    let grid = theory.beta_grid()?;
    let temperature = config.learner.entropy_coef;
    Ok(match check {
        Check::Counterexample => {
            let report = check_counterexample(theory.below, theory.above, theory.margin)?;
            let explanation = (!report.holds).then(|| "the optimal first action does not switch as expected".to_string());
            (VerifyReport { check: check.name(), holds: report.holds, explanation, details: to_value(&report) }, None)
        }
        Check::Monotonicity => {
            let sweep = monotonicity_sweep(theory.instances, theory.grid_step, config.seeds[0], theory.tol)?;
            let mut holds = sweep.violations == 0;
            let mut details = serde_json::json!({ "sweep": sweep });
            let mut curve = None;
            if config.mode == ContinuumMode::Temporal {
                details["environment"] = Value::String("skipped: temporal curves are not covered".into());
            } else {
                let ctx = first_context(config, true)?;
                let c = compute_policy_curve(&ctx.env.mdp, &ctx.spec(config)?, &ctx.demo, &grid, 0.0)?;
                let report = check_monotonicity(&c, theory.tol)?;
                holds &= report.holds;
                details["environment"] = to_value(&report);
                curve = Some(c);
            }
            let explanation = (!holds).then(|| "the exact target return drops somewhere along a curve".to_string());
            (VerifyReport { check: check.name(), holds, explanation, details }, curve)
        }
        Check::Continuity => {
            let ctx = first_context(config, needs_dense(config))?;
            let curve = compute_policy_curve(&ctx.env.mdp, &ctx.spec(config)?, &ctx.demo, &grid, temperature)?;
            let largest = curve.largest_step_kl();
            let holds = largest <= config.learner.epsilon;
            let explanation = (!holds).then(|| match jumps(&curve).first() {
                Some((a, b)) => format!("the optimal policy jumps between beta {a} and {b}; no finite KL budget spans it"),
                None => format!("the largest step KL {largest} exceeds the budget {}", config.learner.epsilon),
            });
            let details = serde_json::json!({
                "temperature": temperature,
                "epsilon": config.learner.epsilon,
                "largest_step_kl": largest,
                "jumps": jumps(&curve),
            });
            (VerifyReport { check: check.name(), holds, explanation, details }, Some(curve))
        }
        Check::Convergence => {
            let ctx = first_context(config, needs_dense(config))?;
            let spec = ctx.spec(config)?;
            let report = check_convergence_with(
                &ctx.env.mdp,
                &spec,
                &ctx.demo,
                config.learner.epsilon,
                config.scheduler.alpha,
                temperature,
                theory.convergence_tol,
            )?;
            let curve = compute_policy_curve(&ctx.env.mdp, &spec, &ctx.demo, &grid, temperature)?;
            let explanation = (!report.reached_optimal).then(|| {
                let mut text = format!(
                    "final gap {} exceeds {} or {} phases exceed the bound {}",
                    report.final_gap, report.tolerance, report.iterations, report.iteration_bound
                );
                if let Some((a, b)) = jumps(&curve).first() {
                    text.push_str(&format!(
                        "; the optimal policy curve jumps between beta {a} and {b}, beyond any KL-bounded step"
                    ));
                }
                text
            });
            let details = serde_json::json!({ "convergence": report, "curve_jumps": jumps(&curve) });
            (VerifyReport { check: check.name(), holds: report.reached_optimal, explanation, details }, Some(curve))
        }
        Check::V2Equivalence => {
            let ctx = first_context(config, true)?;
            let dense = ctx.dense.as_ref().expect("prepared with a dense reward");
            let report =
                check_v2_equivalence(&ctx.env.mdp, dense, &ctx.env.target_reward, &grid, theory.draws, config.seeds[0])?;
            let holds = report.tables_agree && report.curves_agree;
            let explanation = (!holds).then(|| "switching rewards disagree with the affine table".to_string());
            (VerifyReport { check: check.name(), holds, explanation, details: to_value(&report) }, None)
        }
    })
}

/// Runs one theory check and writes its report.
pub fn cmd_verify(config: &ExperimentConfig, check: Check) -> Result<(Outcome, VerifyReport), CliError> {
    if matches!(check, Check::V2Equivalence) && config.demos.is_none() && !config.environment.has_dense_reward() {
        return Err(CliError::ConfigInvalid(vec!["demos: required by v2_equivalence on this environment".into()]));
    }
    let started = Instant::now();
    let (report, curve) = verify_report(config, check)?;
    let mut out = OutputDir::open(&config.output_dir)?;
    let name = format!("verify_{}.json", check.name());
    out.write_json(&name, "check report", &report)?;
    if let Some(curve) = &curve {
        out.write_csv(
            "policy_curve.csv",
            "exact optimal policy curve over beta",
            &["beta", "return_f", "return_d", "max_step_kl"],
            curve.to_csv().as_bytes(),
        )?;
    }
    out.write_timing(started.elapsed().as_secs_f64())?;
    out.finish("verify", config, &serde_json::json!({ "check": check.name(), "holds": report.holds }))?;
    Ok((if report.holds { Outcome::Success } else { Outcome::CheckFailed }, report))
}

/// Splits on commas outside brackets, braces and quotes, so JSON values
/// can be listed directly.
pub fn split_values(text: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let (mut depth, mut quoted, mut escaped) = (0i32, false, false);
    let mut current = String::new();
    for c in text.chars() {
        match c {
            _ if escaped => escaped = false,
            '\\' if quoted => escaped = true,
            '"' => quoted = !quoted,
            '[' | '{' if !quoted => depth += 1,
            ']' | '}' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                parts.push(current.trim().to_string());
                current.clear();
                continue;
            }
            _ => {}
        }
        current.push(c);
    }
    if !current.trim().is_empty() || !parts.is_empty() {
        parts.push(current.trim().to_string());
    }
    parts
}

/// `config` with the dotted field `param` set to `value` (JSON, or a bare string).
pub fn set_parameter(config: &ExperimentConfig, param: &str, value: &str) -> Result<ExperimentConfig, CliError> {
    let unknown = || CliError::UnknownParameter(param.to_string());
    if param.is_empty() || param == "seeds" || param == "output_dir" {
        return Err(unknown());
    }
    let mut tree = serde_json::to_value(config).expect("config serializes");
    let mut slot = &mut tree;
    for key in param.split('.') {
        slot = slot.as_object_mut().and_then(|object| object.get_mut(key)).ok_or_else(unknown)?;
    }
    *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let updated: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::ConfigInvalid(vec![format!("{param} = {value}: {e}")]))?;
    updated
        .validate()
        .map_err(|e| match e {
            CliError::ConfigInvalid(errors) => {
                CliError::ConfigInvalid(errors.into_iter().map(|m| format!("{param} = {value}: {m}")).collect())
            }
            other => other,
        })?;
    Ok(updated)
}

#[derive(Serialize)]
struct SweepCell<'a> {
    value: &'a str,
    #[serde(flatten)]
    summary: &'a SeedSummary,
}

#[derive(Serialize)]
struct SweepBody<'a> {
    parameter: &'a str,
    values: &'a [String],
    partial: bool,
    cells: Vec<SweepCell<'a>>,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    value: &'a str,
    seed: u64,
    phase_index: usize,
    beta: f64,
    return_f: f64,
    return_phase: f64,
    kl_step: f64,
    episodes_consumed: usize,
}

const SWEEP_COLUMNS: [&str; 8] =
    ["value", "seed", "phase_index", "beta", "return_f", "return_phase", "kl_step", "episodes_consumed"];

/// Runs every value of `param` against every seed.
pub fn cmd_sweep(config: &ExperimentConfig, param: &str, values: &[String]) -> Result<Outcome, CliError> {
    if values.is_empty() {
        return Err(CliError::UnknownParameter(format!("{param}: empty value list")));
    }
    let configs = values.iter().map(|v| set_parameter(config, param, v)).collect::<Result<Vec<_>, _>>()?;
    let started = Instant::now();
    let cells: Vec<(usize, u64)> =
        (0..values.len()).flat_map(|i| config.seeds.iter().map(move |&seed| (i, seed))).collect();
    let outcomes: Vec<SeedOutcome> = cells.par_iter().map(|&(i, seed)| run_seed(&configs[i], seed)).collect();
    let mut out = OutputDir::open(&config.output_dir)?;
    let rows: Vec<SweepRow> = cells
        .iter()
        .zip(&outcomes)
        .flat_map(|(&(i, _), o)| {
            o.rows.iter().map(move |r| SweepRow {
                value: &values[i],
                seed: r.seed,
                phase_index: r.phase_index,
                beta: r.beta,
                return_f: r.return_f,
                return_phase: r.return_phase,
                kl_step: r.kl_step,
                episodes_consumed: r.episodes_consumed,
            })
        })
        .collect();
    out.write_csv("sweep.csv", "learning curves keyed by parameter value", &SWEEP_COLUMNS, &csv_bytes(&rows, &SWEEP_COLUMNS)?)?;
    let seeds = config.seeds.len();
    let series: Vec<Series> = values
        .iter()
        .enumerate()
        .map(|(i, v)| curve_plot(&format!("{param}={v}"), &outcomes[i * seeds..(i + 1) * seeds]))
        .collect();
    let svg = band_plot(&format!("Target return per phase by {param}"), "phase", "J^f (mean ± 1σ)", &series);
    out.write("sweep.svg", "svg", "one mean ±1σ curve per parameter value", svg.as_bytes())?;
    out.write_timing(started.elapsed().as_secs_f64())?;
    let partial = outcomes.iter().any(|o| o.summary.error.is_some());
    let body = SweepBody {
        parameter: param,
        values,
        partial,
        cells: cells.iter().zip(&outcomes).map(|(&(i, _), o)| SweepCell { value: &values[i], summary: &o.summary }).collect(),
    };
    out.finish("sweep", config, &body)?;
    Ok(if partial { Outcome::Partial } else { Outcome::Success })
}

#[derive(Serialize)]
struct DemoSummary {
    seed: u64,
    episodes: usize,
    steps: usize,
    mean_total_reward: f64,
    demo_return_f: f64,
    files: Vec<String>,
}

/// Demonstrations per seed as JSON lines, plus the behavior clone and the
/// IRL reward when the config would use them.
pub fn cmd_demo_collect(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    if config.demos.is_none() {
        return Err(CliError::ConfigInvalid(vec!["demos: required by demo-collect".into()]));
    }
    let started = Instant::now();
    let contexts = config
        .seeds
        .par_iter()
        .map(|&seed| SeedContext::prepare(config, seed, needs_dense(config)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = OutputDir::open(&config.output_dir)?;
    let mut summaries = Vec::new();
    for ctx in &contexts {
        let data = ctx.dataset.as_ref().expect("demos configured");
        let mut files = Vec::new();
        let name = format!("demos_seed{}.jsonl", ctx.seed);
        out.write(&name, "jsonl", "demonstrator trajectories, one per line", data.to_json_lines()?.as_bytes())?;
        files.push(name);
        if config.demos.is_some_and(|d| d.behavior_clone) {
            let name = format!("bc_policy_seed{}.json", ctx.seed);
            out.write_json(&name, "behavior-cloned demonstrator", &ctx.demo)?;
            files.push(name);
        }
        if let Some(irl) = &ctx.irl {
            let name = format!("irl_reward_seed{}.json", ctx.seed);
            let value = serde_json::json!({ "reward": ctx.dense, "fit": irl });
            out.write_json(&name, "dense reward recovered by IRL", &value)?;
            files.push(name);
        }
        let episodes = data.trajectories.len();
        summaries.push(DemoSummary {
            seed: ctx.seed,
            episodes,
            steps: data.n_steps(),
            mean_total_reward: data.trajectories.iter().map(|t| t.total_reward()).sum::<f64>() / episodes as f64,
            demo_return_f: evaluate_policy(&ctx.env.mdp, &ctx.env.target_reward, &ctx.demo, 1e-9)?,
            files,
        });
    }
    out.write_timing(started.elapsed().as_secs_f64())?;
    out.finish("demo-collect", config, &serde_json::json!({ "demos": summaries }))?;
    Ok(Outcome::Success)
}
