use hirl_core::experiments::{
    metrics_csv, mean_lower_bound, mean_stderr, run_spec, summarize, write_outputs, ConditionName, ExperimentError,
    ExperimentSpec,
};
use hirl_core::{AgentKind, EnvName};

fn write_spec(dir: &std::path::Path, json: &str) -> std::path::PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn spec_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_spec(
        dir.path(),
        r#"{
            "env": "exploit-runner",
            "agent": "softmax-pg",
            "conditions": ["hirl", "no-oversight"],
            "penalty": -3.0,
            "seeds": [4, 5],
            "total_steps": 2000
        }"#,
    );
    let spec = ExperimentSpec::load(&path).unwrap();
    assert_eq!(spec.env, EnvName::ExploitRunner);
    assert_eq!(spec.agent, AgentKind::SoftmaxPg);
    assert_eq!(spec.conditions, [ConditionName::Hirl, ConditionName::NoOversight]);
    assert_eq!(spec.penalty, Some(-3.0));
    let json = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentSpec>(&json).unwrap(), spec);
    // Run seeds map to distinct agent seeds.
    assert_ne!(spec.agent_config(4).seed, spec.agent_config(5).seed);
}

#[test]
fn bad_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for json in [
        r#"{"env":"zone-corridor","seeds":[],"total_steps":10}"#,
        r#"{"env":"zone-corridor","seeds":[1],"total_steps":10,"conditions":[]}"#,
        r#"{"env":"zone-corridor","seeds":[1],"total_steps":10,"typo":1}"#,
        r#"{"env":"zone-corridor","seeds":[1]}"#,
    ] {
        let path = write_spec(dir.path(), json);
        assert!(matches!(ExperimentSpec::load(&path), Err(ExperimentError::Spec(_))), "{json}");
    }
    assert!(matches!(
        ExperimentSpec::load(&dir.path().join("missing.json")),
        Err(ExperimentError::Io(_))
    ));
}

#[test]
fn env_config_is_applied() {
    let mut spec = ExperimentSpec::new(EnvName::ZoneCorridor, vec![1], 500);
    spec.env_config = Some(serde_json::json!({ "width": 0 }));
    assert!(run_spec(&spec).is_err());
    spec.env_config = Some(serde_json::json!({ "zone_bonus": 1.0 }));
    assert!(run_spec(&spec).is_ok());
}

#[test]
fn small_comparison_is_reproducible() {
    let mut spec = ExperimentSpec::new(EnvName::ZoneCorridor, vec![1, 2, 3], 20_000);
    spec.penalty = Some(-50.0);
    let a = run_spec(&spec).unwrap();
    let b = run_spec(&spec).unwrap();
    assert_eq!(a.len(), 9);
    for c in ConditionName::ALL {
        let csv = metrics_csv(&a, c);
        assert_eq!(csv, metrics_csv(&b, c));
        assert!(csv.lines().count() > 3);
    }
    let hirl: u64 = a.iter().filter(|r| r.condition == ConditionName::Hirl).map(|r| r.realized()).sum();
    assert_eq!(hirl, 0);
    let free: u64 = a.iter().filter(|r| r.condition == ConditionName::NoOversight).map(|r| r.realized()).sum();
    assert!(free > 0);

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let files = write_outputs(d1.path(), &a).unwrap();
    write_outputs(d2.path(), &b).unwrap();
    assert_eq!(files.len(), 4);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(d2.path().join(name)).unwrap());
    }
    let summary = summarize(&a);
    assert_eq!(summary.len(), 3);
}

#[test]
fn seed_statistics() {
    let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    // All-equal samples have zero spread, so the bound is the mean.
    assert_eq!(mean_lower_bound(&[0.0; 5], 0.95), 0.0);
    assert!(mean_lower_bound(&[0.01, 0.0, 0.02, 0.01, 0.015], 0.95) > 0.0);
    assert!(mean_lower_bound(&[0.01, 0.0, 0.0, 0.0, 0.0], 0.95) < 0.0);
}
