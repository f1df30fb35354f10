use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use taskphase::commands::{set_parameter, split_values};
use taskphase::{CliError, ExperimentConfig};
use taskphase_core::demos::DemoDataset;

fn smoothed() -> Value {
    json!({
        "environment": { "name": "counterexample" },
        "mode": "reward_v1",
        "scheduler": { "alpha": 0.05, "mode": "fixed_interval", "episodes_per_phase": 1 },
        "learner": { "epsilon": 0.5, "entropy_coef": 1.0, "inner_tol": 1e-9, "max_inner_iters": 5000 },
        "seeds": [0, 1, 2]
    })
}

fn temporal(env: &str) -> Value {
    json!({
        "environment": { "name": env },
        "mode": "temporal",
        "scheduler": { "alpha": 0.1, "mode": "threshold", "window": 50, "threshold": 0.0 },
        "learner": { "epsilon": 0.5 },
        "setup": { "relative_threshold": 0.9, "exploration_noise": 0.2, "episode_cap": 3000 },
        "seeds": [0]
    })
}

fn write_config(dir: &Path, name: &str, config: &Value) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn taskphase(args: &[&str]) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_taskphase")).args(args).output().unwrap();
    (output.status.code().unwrap(), String::from_utf8_lossy(&output.stderr).into_owned())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Files on disk and files listed, manifest excluded.
fn listed_and_present(dir: &Path) -> (BTreeSet<String>, BTreeSet<String>) {
    let listed = manifest(dir)["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap().to_string()).collect();
    let present = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|name| name != "manifest.json")
        .collect();
    (listed, present)
}

fn parse(config: &Value) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::from_json(&config.to_string())
}

#[test]
fn zero_alpha_names_the_scheduler() {
    let mut config = smoothed();
    config["scheduler"]["alpha"] = json!(0.0);
    match parse(&config) {
        Err(CliError::ConfigInvalid(errors)) => {
            assert_eq!(errors.len(), 1);
            assert!(errors[0].starts_with("scheduler"), "{errors:?}");
            assert!(errors[0].contains("alpha"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_violation_is_reported_at_once() {
    let config = json!({
        "environment": { "name": "flag_grid" },
        "mode": "reward_v1",
        "scheduler": { "alpha": 0.0, "mode": "fixed_interval", "episodes_per_phase": 1 },
        "learner": { "epsilon": -1.0 },
        "setup": { "exploration_noise": 2.0, "reward_draws": 0 },
        "theory": { "grid": [0.0, 0.7, 0.5, 1.0] },
        "seeds": []
    });
    let Err(CliError::ConfigInvalid(errors)) = parse(&config) else { panic!("accepted") };
    for field in ["seeds", "scheduler", "learner", "setup.exploration_noise", "setup.reward_draws", "demos", "theory.grid"] {
        assert!(errors.iter().any(|e| e.starts_with(field)), "{field} missing from {errors:?}");
    }
}

#[test]
fn unknown_and_misplaced_keys_are_rejected() {
    for (pointer, key) in [("", "seedz"), ("/environment", "bogus"), ("/learner", "eps"), ("/scheduler", "window")] {
        let mut config = smoothed();
        config.pointer_mut(pointer).unwrap().as_object_mut().unwrap().insert(key.into(), json!(1));
        assert!(matches!(parse(&config), Err(CliError::ConfigInvalid(_))), "{pointer}/{key}");
    }
    let mut config = smoothed();
    config["protocol"] = json!({ "variant": "random_step" });
    let Err(CliError::ConfigInvalid(errors)) = parse(&config) else { panic!("protocol accepted for reward mode") };
    assert!(errors[0].starts_with("protocol"));
    assert!(parse(&smoothed()).is_ok());
}

#[test]
fn config_round_trips_through_json() {
    let config = parse(&temporal("flag_grid")).unwrap();
    assert_eq!(ExperimentConfig::from_json(&config.to_json()).unwrap(), config);
}

#[test]
fn run_writes_a_complete_listing() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &smoothed());
    let out = dir.path().join("out");
    let (code, stderr) = taskphase(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let m = manifest(&out);
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["command"], "run");
    assert_eq!(m["partial"], false);
    let runs = m["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for run in runs {
        assert_eq!(run["final_beta"], 1.0);
        assert_eq!(run["status"], "completed");
        assert_eq!(run["phases"], 21);
    }
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seed,phase_index,beta,return_f,return_phase,kl_step,episodes_consumed"));
    assert_eq!(lines.count(), 63);
    let svg = fs::read_to_string(out.join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polygon"));
    let (listed, present) = listed_and_present(&out);
    assert_eq!(listed, present);
    assert!(listed.contains("timing.txt"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = temporal("flag_grid");
    config["seeds"] = json!([0, 1, 2]);
    let path = write_config(dir.path(), "c.json", &config);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(taskphase(&["run", path.to_str().unwrap(), "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(taskphase(&["--jobs", "1", "run", path.to_str().unwrap(), "--out", b.to_str().unwrap()]).0, 0);
    for entry in manifest(&a)["files"].as_array().unwrap() {
        let name = entry["path"].as_str().unwrap();
        if entry["deterministic"] == true {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn seed_override_and_stale_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &smoothed());
    let out = dir.path().join("out");
    let p = path.to_str().unwrap();
    let o = out.to_str().unwrap();
    assert_eq!(taskphase(&["run", p, "--out", o, "--seed", "7"]).0, 0);
    assert_eq!(manifest(&out)["runs"][0]["seed"], 7);
    assert_eq!(manifest(&out)["runs"].as_array().unwrap().len(), 1);
    fs::write(out.join("notes.txt"), "kept").unwrap();
    assert_eq!(taskphase(&["verify", p, "--check", "counterexample", "--out", o]).0, 0);
    let (listed, present) = listed_and_present(&out);
    assert!(!present.contains("curves.csv"));
    assert_eq!(present.difference(&listed).cloned().collect::<Vec<_>>(), vec!["notes.txt".to_string()]);
}

#[test]
fn verify_exit_codes_follow_the_checks() {
    let dir = tempfile::tempdir().unwrap();
    let soft = write_config(dir.path(), "soft.json", &smoothed());
    let mut hard = smoothed();
    hard["learner"] = json!({ "epsilon": 0.05, "entropy_coef": 0.0, "inner_tol": 1e-9, "max_inner_iters": 5000 });
    let hard = write_config(dir.path(), "hard.json", &hard);
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    for (config, check, code) in [
        (&soft, "counterexample", 0),
        (&soft, "monotonicity", 0),
        (&soft, "continuity", 0),
        (&soft, "convergence", 0),
        (&soft, "v2_equivalence", 0),
        (&hard, "continuity", 1),
    ] {
        let (got, stderr) = taskphase(&["verify", config.to_str().unwrap(), "--check", check, "--out", o]);
        assert_eq!(got, code, "{check}: {stderr}");
        let report: Value =
            serde_json::from_str(&fs::read_to_string(out.join(format!("verify_{check}.json"))).unwrap()).unwrap();
        assert_eq!(report["holds"], code == 0);
        assert_eq!(report["explanation"].is_null(), code == 0);
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("verify_continuity.json")).unwrap()).unwrap();
    assert!(report["explanation"].as_str().unwrap().contains("beta 0.5"));
    let curve = fs::read_to_string(out.join("policy_curve.csv")).unwrap();
    assert!(curve.starts_with("beta,return_f,return_d,max_step_kl\n"));
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = smoothed();
    bad["scheduler"]["alpha"] = json!(0.0);
    let bad = write_config(dir.path(), "bad.json", &bad);
    let good = write_config(dir.path(), "good.json", &smoothed());
    let o = dir.path().join("out");
    let o = o.to_str().unwrap();
    let (code, stderr) = taskphase(&["run", bad.to_str().unwrap(), "--out", o]);
    assert_eq!(code, 2);
    assert!(stderr.contains("scheduler"));
    assert_eq!(taskphase(&["run", "/nonexistent/config.json"]).0, 2);
    let g = good.to_str().unwrap();
    assert_eq!(taskphase(&["sweep", g, "--param", "learner.nope", "--values", "1", "--out", o]).0, 2);
    assert_eq!(taskphase(&["sweep", g, "--param", "learner.epsilon", "--values", "", "--out", o]).0, 2);
    assert_eq!(taskphase(&["sweep", g, "--param", "scheduler.alpha", "--values", "0.5,0", "--out", o]).0, 2);
    assert_eq!(taskphase(&["demo-collect", g, "--out", o]).0, 2);
    assert_eq!(taskphase(&["--jobs", "0", "run", g, "--out", o]).0, 2);
}

#[test]
fn protocol_sweep_labels_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &temporal("flag_grid"));
    let out = dir.path().join("out");
    let values = r#"{"variant":"random_step"},{"variant":"random_block","m":4},{"variant":"fixed_steps","episode_len":100}"#;
    let (code, stderr) =
        taskphase(&["sweep", path.to_str().unwrap(), "--param", "protocol", "--values", values, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let m = manifest(&out);
    assert_eq!(m["values"].as_array().unwrap().len(), 3);
    for cell in m["cells"].as_array().unwrap() {
        assert_eq!(cell["final_beta"], 1.0, "{cell}");
        assert!(cell["final_return_f"].as_f64().unwrap() >= cell["demo_return_f"].as_f64().unwrap());
    }
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("value,seed,phase_index,"));
    let svg = fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    let (listed, present) = listed_and_present(&out);
    assert_eq!(listed, present);
}

#[test]
fn frozen_random_learner_on_the_cliff_loses_success_as_beta_grows() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = temporal("cliff_slide");
    config["learner"] = json!({ "epsilon": 0.0 });
    config["scheduler"] = json!({ "alpha": 0.1, "mode": "fixed_interval", "episodes_per_phase": 1 });
    config["setup"] = json!({});
    let path = write_config(dir.path(), "c.json", &config);
    let out = dir.path().join("out");
    let values = r#"{"variant":"random_step"},{"variant":"random_block","m":3}"#;
    let (code, stderr) =
        taskphase(&["sweep", path.to_str().unwrap(), "--param", "protocol", "--values", values, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut previous: Option<(String, f64)> = None;
    let mut rows = 0;
    let mut ends = Vec::new();
    for line in csv.lines().skip(1) {
        // the JSON label is quoted and contains commas; the numbers are the tail
        let tail: Vec<&str> = line.rsplitn(7, ',').collect();
        let value = tail[6].to_string();
        let return_phase: f64 = tail[2].parse().unwrap();
        match &previous {
            Some((last_value, last)) if *last_value == value => assert!(return_phase <= last + 1e-12, "{line}"),
            _ => ends.push(return_phase),
        }
        previous = Some((value, return_phase));
        rows += 1;
    }
    assert_eq!(rows, 22);
    // the demonstrator alone succeeds often, the random learner alone almost never
    assert_eq!(ends.len(), 2);
    assert!(ends.iter().all(|&start| start > 0.5));
    assert!(previous.unwrap().1 < 0.01);
}

#[test]
fn demo_collect_writes_loadable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = temporal("flag_grid");
    config["seeds"] = json!([3, 4]);
    config["demos"] = json!({ "episodes": 20, "horizon": 60, "behavior_clone": true });
    let path = write_config(dir.path(), "c.json", &config);
    let out = dir.path().join("out");
    let (code, stderr) = taskphase(&["demo-collect", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stderr}");
    for seed in [3, 4] {
        let text = fs::read_to_string(out.join(format!("demos_seed{seed}.jsonl"))).unwrap();
        let data = DemoDataset::from_json_lines(&text, "file").unwrap();
        assert_eq!(data.trajectories.len(), 20);
        assert!(out.join(format!("bc_policy_seed{seed}.json")).is_file());
    }
    let (listed, present) = listed_and_present(&out);
    assert_eq!(listed, present);
    assert_eq!(manifest(&out)["demos"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_values_and_parameters() {
    assert_eq!(split_values("0.1, 0.2,0.3"), vec!["0.1", "0.2", "0.3"]);
    assert_eq!(split_values(r#"{"a":[1,2]},"x,y",3"#), vec![r#"{"a":[1,2]}"#, r#""x,y""#, "3"]);
    assert!(split_values("").is_empty());
    let base = parse(&smoothed()).unwrap();
    assert_eq!(set_parameter(&base, "learner.epsilon", "2").unwrap().learner.epsilon, 2.0);
    let temporal_mode = set_parameter(&base, "mode", "temporal").unwrap();
    assert_eq!(temporal_mode.mode, taskphase_core::task::ContinuumMode::Temporal);
    for bad in ["", "seeds", "output_dir", "learner.epsilon.x", "anneal.late_alpha", "nope"] {
        assert!(matches!(set_parameter(&base, bad, "1"), Err(CliError::UnknownParameter(_))), "{bad}");
    }
    assert!(matches!(set_parameter(&base, "learner.epsilon", "-1"), Err(CliError::ConfigInvalid(_))));
}
