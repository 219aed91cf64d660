//! End-to-end tests of the `politex` binary.

use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_politex"))
}

#[test]
fn gen_mdp_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let status = bin()
            .args(["gen-mdp", "--n-states", "5", "--n-actions", "3", "--seed", "7"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn solve_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let mdp_path = dir.path().join("mdp.json");
    let status = bin()
        .args(["gen-mdp", "--n-states", "4", "--n-actions", "2", "--seed", "3"])
        .arg("--out")
        .arg(&mdp_path)
        .status()
        .unwrap();
    assert!(status.success());

    let out = bin().arg("solve").arg("--mdp").arg(&mdp_path).output().unwrap();
    assert!(out.status.success());
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let j_cli = value["policy_solution"]["gain"].as_f64().unwrap();

    let mdp = politex_core::mdp::TabularMdp::from_json(&fs::read_to_string(&mdp_path).unwrap()).unwrap();
    let uniform = politex_core::mdp::Policy::uniform(4, 2);
    let j_lib = politex_core::mdp::solve_values(&mdp, &uniform).unwrap().gain;
    assert!((j_cli - j_lib).abs() < 1e-12);

    let j_star_cli = value["optimal"]["gain"].as_f64().unwrap();
    let (_, j_star) = politex_core::mdp::find_optimal_policy(&mdp).unwrap();
    assert!((j_star_cli - j_star).abs() < 1e-12);
}

#[test]
fn run_writes_trace_with_k_records() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir(&out_dir).unwrap();
    let config = serde_json::json!({
        "environment": {"type": "random-mdp", "n_states": 3, "n_actions": 2,
                         "mixing_floor": 0.05, "seed": 1},
        "politex": {"tau": 80, "phases": 4, "eta": "auto", "q_max": 2.0,
                    "b": 4, "m": null, "alpha": null,
                    "backend": {"type": "replay-full"}, "seed": 5},
        "features": {"type": "one-hot"},
        "output_dir": out_dir,
        "repeat": 1
    });
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let status = bin()
        .arg("run")
        .arg("--config")
        .arg(&config_path)
        .status()
        .unwrap();
    assert!(status.success());
    let trace = fs::read_to_string(out_dir.join("trace_run000.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(out_dir.join("summary.csv").is_file());

    // Backend override through the CLI surface.
    let out_dir2 = dir.path().join("out2");
    fs::create_dir(&out_dir2).unwrap();
    let status = bin()
        .arg("run")
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(&out_dir2)
        .args(["--backend", "weight-averaging", "--strict-invariants"])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn unknown_backend_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, "{}").unwrap();
    let out = bin()
        .arg("run")
        .arg("--config")
        .arg(&config_path)
        .args(["--backend", "nonsense"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn unknown_flag_shows_usage() {
    let out = bin().args(["gen-mdp", "--does-not-exist"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"));
}

#[test]
fn trace_to_csv_converts() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.jsonl");
    fs::write(
        &trace_path,
        "{\"k\":1,\"mean_reward\":0.5,\"j_pi\":null,\"cum_regret\":null,\
         \"policy_step_l1\":0.1,\"eta_bound\":0.2,\"est_error\":null}\n",
    )
    .unwrap();
    let csv_path = dir.path().join("trace.csv");
    let status = bin()
        .arg("trace-to-csv")
        .arg("--input")
        .arg(&trace_path)
        .arg("--out")
        .arg(&csv_path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.contains("1,0.5,,,0.1,0.2,"));
}
