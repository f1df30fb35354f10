mod common;

use common::{episodic_mdp, policy_return, random_shape, reward_for};
use rand::Rng;
use taskphase_core::divergence::{expected_kl, is_infinite_kl, kl};
use taskphase_core::envs::{build_counterexample, A_LEFT, S0};
use taskphase_core::rl_eps::{kl_constrained_improve, run_task_phasing, run_task_phasing_with, PhasingSetup, RlEpsConfig, RunStatus};
use taskphase_core::sampling::stream_rng;
use taskphase_core::solve::{discounted_occupancy, evaluate_soft, soft_value_iteration, value_iteration};
use taskphase_core::task::{ContinuumMode, ContinuumSpec, Granularity};
use taskphase_core::temporal::{AlphaScheduler, ControlProtocol};
use taskphase_core::theory::{compute_policy_curve, random_mdp, random_policy, random_reward, uniform_grid};
use taskphase_core::{Error, RewardTable, StochasticPolicy, TabularMdp};

/// Continuing (gamma 0.9) for even `i`, episodic with gamma 1 for odd `i`.
fn triple(i: u64) -> (TabularMdp, RewardTable, StochasticPolicy, f64) {
    let (n, m) = random_shape(i);
    let (mdp, reward) = if i.is_multiple_of(2) {
        (random_mdp(i, n, m, 0.9).unwrap(), random_reward(i, n, m, 1.0))
    } else {
        let mdp = episodic_mdp(i, n + 1, m, 1.0);
        let reward = reward_for(&mdp, i);
        (mdp, reward)
    };
    let start = random_policy(i, mdp.n_states(), m);
    let epsilon = 10f64.powf(stream_rng(i, 9).random_range(-3.0..0.0));
    (mdp, reward, start, epsilon)
}

fn budget_used(mdp: &TabularMdp, start: &StochasticPolicy, out: &StochasticPolicy) -> f64 {
    expected_kl(start, out, &discounted_occupancy(mdp, out).unwrap()).unwrap()
}

#[test]
fn improvement_respects_budget_and_never_degrades() {
    for i in 0..200 {
        let (mdp, reward, start, epsilon) = triple(i);
        let config = RlEpsConfig::new(epsilon, 0.0).unwrap();
        let out = kl_constrained_improve(&mdp, &reward, &start, &config).unwrap();
        let used = budget_used(&mdp, &start, &out);
        assert!(used <= epsilon + 1e-4, "triple {i}: kl {used} > {epsilon}");
        let before = policy_return(&mdp, &reward, &start);
        let after = policy_return(&mdp, &reward, &out);
        assert!(after >= before - 1e-4, "triple {i}: {after} < {before}");
    }
}

#[test]
fn soft_improvement_respects_budget_and_never_degrades() {
    for i in 0..60 {
        let (mdp, reward, start, epsilon) = triple(i);
        let config = RlEpsConfig::new(epsilon, 0.5).unwrap();
        let out = kl_constrained_improve(&mdp, &reward, &start, &config).unwrap();
        assert!(budget_used(&mdp, &start, &out) <= epsilon + 1e-4, "triple {i}");
        let before = evaluate_soft(&mdp, &reward, &start, 0.5, 1e-12).unwrap();
        let after = evaluate_soft(&mdp, &reward, &out, 0.5, 1e-12).unwrap();
        assert!(after >= before - 1e-4, "triple {i}: {after} < {before}");
    }
}

#[test]
fn unbounded_budget_reaches_the_optimum() {
    for i in 0..60 {
        let (mdp, reward, start, _) = triple(i);
        let out = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(1e6, 0.0).unwrap()).unwrap();
        let (_, best) = value_iteration(&mdp, &reward, 1e-12).unwrap();
        let gap = policy_return(&mdp, &reward, &best) - policy_return(&mdp, &reward, &out);
        assert!(gap.abs() <= 1e-6, "triple {i}: gap {gap}");
        let soft = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(1e6, 0.7).unwrap()).unwrap();
        let (_, soft_best) = soft_value_iteration(&mdp, &reward, 0.7, 1e-12).unwrap();
        let soft_gap = evaluate_soft(&mdp, &reward, &soft_best, 0.7, 1e-12).unwrap()
            - evaluate_soft(&mdp, &reward, &soft, 0.7, 1e-12).unwrap();
        assert!(soft_gap.abs() <= 1e-6, "triple {i}: soft gap {soft_gap}");
    }
}

#[test]
fn zero_budget_returns_the_start() {
    let (mdp, reward, start, _) = triple(3);
    let out = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(0.0, 0.0).unwrap()).unwrap();
    assert_eq!(out, start);
}

#[test]
fn larger_budgets_never_do_worse() {
    for i in 0..200 {
        let (mdp, reward, start, _) = triple(i);
        let mut previous = f64::NEG_INFINITY;
        for epsilon in [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 2.0, 5.0, 20.0] {
            let out = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(epsilon, 0.0).unwrap()).unwrap();
            let j = policy_return(&mdp, &reward, &out);
            assert!(j >= previous - 1e-4, "triple {i}, epsilon {epsilon}: {j} < {previous}");
            previous = j;
        }
    }
}

/// One state, two arms paying 1 and 0. The best policy on the KL ball
/// around uniform is found by scanning 10^4 values of `pi(a_1)`.
#[test]
fn bandit_matches_a_scan_of_the_kl_ball() {
    let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], 0.9, &[], vec![1.0]).unwrap();
    let reward = RewardTable::new(1, 2, vec![1.0, 0.0]).unwrap();
    let start = StochasticPolicy::uniform(1, 2);
    let epsilon = 0.05;
    let out = kl_constrained_improve(&mdp, &reward, &start, &RlEpsConfig::new(epsilon, 0.0).unwrap()).unwrap();
    let used = kl(start.row(0), out.row(0));
    assert!(used >= epsilon - 1e-4 && used <= epsilon + 1e-9, "kl {used}");
    let best = (1..10_000)
        .map(|k| k as f64 / 10_000.0)
        .filter(|&p| kl(&[0.5, 0.5], &[p, 1.0 - p]) <= epsilon)
        .fold(0.0f64, f64::max);
    let j = |p: f64| p / (1.0 - 0.9);
    assert!(j(out.prob(0, 0)) >= j(best) - 1e-4, "{} vs {best}", out.prob(0, 0));
}

#[test]
fn zero_entries_are_rejected() {
    let (mdp, reward, _, _) = triple(2);
    let hard = StochasticPolicy::deterministic(mdp.n_actions(), &vec![0; mdp.n_states()]).unwrap();
    let config = RlEpsConfig::new(0.1, 0.0).unwrap();
    assert!(matches!(kl_constrained_improve(&mdp, &reward, &hard, &config), Err(Error::DegeneratePolicy { .. })));
    assert!(RlEpsConfig::new(-1.0, 0.0).is_err());
    assert!(RlEpsConfig::new(0.1, -1.0).is_err());
}

fn figure_spec(mode: ContinuumMode) -> (TabularMdp, ContinuumSpec, StochasticPolicy) {
    let (mdp, target, dense, demo) = build_counterexample();
    let spec = match mode {
        ContinuumMode::Temporal => ContinuumSpec::temporal(&demo, &target, ControlProtocol::random_step(0)).unwrap(),
        _ => ContinuumSpec::reward(mode, &dense, &target, Granularity::PerEpisode).unwrap(),
    };
    (mdp, spec, demo)
}

#[test]
fn fixed_interval_runs_use_exactly_the_phase_bound() {
    let (mdp, spec, demo) = figure_spec(ContinuumMode::RewardV1);
    let uniform = StochasticPolicy::uniform(3, 2);
    let config = RlEpsConfig::new(0.5, 1.0).unwrap();
    for alpha in [1.0, 0.5, 0.3, 0.1, 0.05] {
        let scheduler = AlphaScheduler::fixed_interval(alpha, 1).unwrap();
        let run = run_task_phasing(&mdp, &spec, &demo, &uniform, &scheduler, &config, None).unwrap();
        assert_eq!(run.iterations, (1.0f64 / alpha).ceil() as usize + 1, "alpha {alpha}");
        assert_eq!(run.iterations, scheduler.phase_bound());
        assert_eq!(run.betas.len(), run.iterations);
        assert_eq!(run.policies.len(), run.iterations);
        assert_eq!(run.returns_f.len(), run.iterations);
        assert_eq!(run.kl_steps.len(), run.iterations);
        assert_eq!(run.final_beta(), 1.0);
        assert_eq!(run.status, RunStatus::Completed);
        assert!(run.betas.windows(2).all(|w| w[1] >= w[0]));
    }
    let one = AlphaScheduler::fixed_interval(1.0, 1).unwrap();
    let run = run_task_phasing(&mdp, &spec, &demo, &uniform, &one, &config, None).unwrap();
    assert_eq!(run.betas, vec![0.0, 1.0]);
}

#[test]
fn smoothed_counterexample_run_reaches_the_soft_optimum() {
    for mode in [ContinuumMode::RewardV1, ContinuumMode::Temporal] {
        let (mdp, spec, demo) = figure_spec(mode);
        let target = spec.target_reward();
        let uniform = StochasticPolicy::uniform(3, 2);
        let scheduler = AlphaScheduler::fixed_interval(0.05, 1).unwrap();
        let config = RlEpsConfig { max_inner_iters: 5_000, ..RlEpsConfig::new(0.5, 1.0).unwrap() };
        let run = run_task_phasing(&mdp, &spec, &demo, &uniform, &scheduler, &config, None).unwrap();
        assert!(run.iterations <= 21);
        assert_eq!(run.final_beta(), 1.0);
        let (_, best) = soft_value_iteration(&mdp, &target, 1.0, 1e-12).unwrap();
        let optimum = evaluate_soft(&mdp, &target, &best, 1.0, 1e-12).unwrap();
        let reached = evaluate_soft(&mdp, &target, run.final_policy(), 1.0, 1e-12).unwrap();
        assert!((optimum - reached).abs() <= 0.02, "{mode:?}: {reached} vs {optimum}");
    }
}

/// The exact hard-optimal curve jumps at one half: a single infinite KL
/// step between the grid points either side of the switch.
#[test]
fn hard_curve_has_one_infinite_step_at_the_switch() {
    let (mdp, spec, demo) = figure_spec(ContinuumMode::RewardV1);
    let curve = compute_policy_curve(&mdp, &spec, &demo, &uniform_grid(0.01).unwrap(), 0.0).unwrap();
    let spikes: Vec<usize> = (0..curve.max_step_kl.len()).filter(|&i| is_infinite_kl(curve.max_step_kl[i])).collect();
    assert_eq!(spikes.len(), 1);
    let i = spikes[0];
    assert!(curve.betas[i - 1] <= 0.5 && curve.betas[i] > 0.5);
    assert_eq!(curve.policies[i - 1].greedy_action(S0), 0);
    assert_eq!(curve.policies[i].greedy_action(S0), A_LEFT);
}

/// Every phase starts from the previous phase's policy, and each recorded
/// KL step is that policy's budget use under the new policy's occupancy.
#[test]
fn recorded_kl_steps_match_the_policies() {
    let (mdp, spec, demo) = figure_spec(ContinuumMode::RewardV1);
    let uniform = StochasticPolicy::uniform(3, 2);
    let scheduler = AlphaScheduler::fixed_interval(0.25, 1).unwrap();
    let run = run_task_phasing(&mdp, &spec, &demo, &uniform, &scheduler, &RlEpsConfig::new(0.3, 0.5).unwrap(), None)
        .unwrap();
    assert!(budget_used(&mdp, &uniform, &run.policies[0]) <= 0.3 + 1e-6);
    for i in 1..run.iterations {
        let step = budget_used(&mdp, &run.policies[i - 1], &run.policies[i]);
        assert!((step - run.kl_steps[i]).abs() < 1e-9);
        assert!(step <= 0.3 + 1e-6);
    }
}

#[test]
fn runs_are_reproducible() {
    let (mdp, spec, demo) = figure_spec(ContinuumMode::RewardV2);
    let uniform = StochasticPolicy::uniform(3, 2);
    let scheduler = AlphaScheduler::fixed_interval(0.2, 1).unwrap();
    let config = RlEpsConfig::new(0.5, 1.0).unwrap();
    let setup = PhasingSetup { rng_seed: 4, ..PhasingSetup::default() };
    let a = run_task_phasing_with(&mdp, &spec, &demo, &uniform, &scheduler, &config, None, &setup).unwrap();
    let b = run_task_phasing_with(&mdp, &spec, &demo, &uniform, &scheduler, &config, None, &setup).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn threshold_run_stalls_when_the_bar_is_out_of_reach() {
    let (mdp, spec, demo) = figure_spec(ContinuumMode::Temporal);
    let uniform = StochasticPolicy::uniform(3, 2);
    // the target return never exceeds 1, so a bar of 5 is never met
    let scheduler = AlphaScheduler::threshold(0.1, 10, 5.0).unwrap();
    let setup = PhasingSetup { episode_cap: 200, ..PhasingSetup::default() };
    let run = run_task_phasing_with(&mdp, &spec, &demo, &uniform, &scheduler, &RlEpsConfig::new(0.5, 0.0).unwrap(), None, &setup)
        .unwrap();
    assert_eq!(run.status, RunStatus::Stalled);
    assert!(!run.completed());
    assert_eq!(run.final_beta(), 0.0);
    assert!(*run.episodes_consumed.last().unwrap() >= 200);
    assert!(run.episodes_consumed.windows(2).all(|w| w[1] >= w[0]));
}
