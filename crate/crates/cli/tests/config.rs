use taskcomm::validation::{LINEAR_ENERGY_GRID, NEURAL_ENERGY_GRID};
use taskcomm::{Dims, SweepMethod, WeightMode};
use taskcomm_cli::config::{self, parse_str, resolve};
use taskcomm_cli::{load_config, CliError, ExperimentConfig, Kind, Overrides, RunArgs};

fn resolved(text: &str) -> ExperimentConfig {
    resolve(parse_str(text).unwrap(), &Overrides::default(), None).unwrap()
}

#[test]
fn minimal_config_gets_defaults() {
    let cfg = resolved(r#"{"kind": "linear-sweep"}"#);
    assert_eq!(cfg.dims, Dims::STANDARD);
    assert_eq!(cfg.subspace_dim, Some(8));
    assert_eq!(cfg.seed, Some(0));
    assert_eq!(cfg.channel_seed, Some(0));
    assert_eq!(cfg.energy_grid(), LINEAR_ENERGY_GRID);
    assert_eq!(cfg.methods(), SweepMethod::LINEAR);
    assert_eq!(cfg.weight_mode, WeightMode::Blended);
    assert_eq!(cfg.mc_trials, 0);

    let basis = resolved(r#"{"kind": "basis-compare"}"#);
    assert_eq!(basis.methods(), SweepMethod::BASES);
    let nonlinear = resolved(r#"{"kind": "nonlinear-sweep"}"#);
    assert_eq!(nonlinear.energy_grid(), NEURAL_ENERGY_GRID);
    assert_eq!(nonlinear.neural.epochs, 2000);
}

#[test]
fn flags_override_file_values() {
    let file =
        parse_str(r#"{"kind": "linear-sweep", "seed": 4, "energy_grid": [1, 2], "mc_trials": 10}"#)
            .unwrap();
    let flags = Overrides {
        energy_grid: Some(vec![0.5, 5.0]),
        seed: Some(9),
        trials: Some(77),
        ..Overrides::default()
    };
    let cfg = resolve(file.clone(), &flags, Some("123")).unwrap();
    assert_eq!(cfg.seed, Some(9));
    assert_eq!(cfg.energy_grid(), [0.5, 5.0]);
    assert_eq!(cfg.mc_trials, 77);
    let kept = resolve(file, &Overrides::default(), Some("123")).unwrap();
    assert_eq!(kept.seed, Some(4));
    assert_eq!(kept.energy_grid(), [1.0, 2.0]);
}

#[test]
fn seed_falls_back_to_environment() {
    let cfg = resolve(
        ExperimentConfig::new(Kind::Validate),
        &Overrides::default(),
        Some("42"),
    )
    .unwrap();
    assert_eq!(cfg.seed, Some(42));
    assert_eq!(cfg.channel_seed, Some(42));
    let err = resolve(
        ExperimentConfig::new(Kind::Validate),
        &Overrides::default(),
        Some("x"),
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Config(ref m) if m.contains(config::SEED_ENV)));
}

#[test]
fn trials_flag_targets_the_kind() {
    let flags = Overrides {
        trials: Some(3),
        ..Overrides::default()
    };
    let cfg = resolve(ExperimentConfig::new(Kind::NonlinearSweep), &flags, None).unwrap();
    assert_eq!(cfg.neural.trials, 3);
    assert_eq!(cfg.mc_trials, 0);
}

#[test]
fn canonical_form_round_trips() {
    let cfg = resolved(r#"{"kind": "basis-compare", "seed": 5, "neural": {"epochs": 3}}"#);
    let again = resolved(&cfg.to_json());
    assert_eq!(cfg, again);
    assert_eq!(cfg.to_json(), again.to_json());
}

#[test]
fn unknown_key_is_reported_with_location() {
    let err = parse_str("{\n  \"kind\": \"linear-sweep\",\n  \"energy\": [1]\n}").unwrap_err();
    let CliError::Config(msg) = err else {
        panic!("expected config error")
    };
    assert!(msg.contains("energy"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");
    assert_eq!(CliError::Config(String::new()).exit_code(), 2);
}

#[test]
fn type_mismatch_and_unknown_method_rejected() {
    assert!(parse_str(r#"{"kind": "linear-sweep", "seed": "one"}"#).is_err());
    assert!(parse_str(r#"{"kind": "linear-sweep", "methods": ["proposed", "magic"]}"#).is_err());
    assert!(parse_str(r#"{"kind": "sweep"}"#).is_err());
    assert!(parse_str(r#"{"seed": 1}"#).is_err());
}

#[test]
fn invariants_enforced() {
    let bad = |text: &str| resolve(parse_str(text).unwrap(), &Overrides::default(), None).is_err();
    assert!(bad(r#"{"kind": "linear-sweep", "energy_grid": [1, 1]}"#));
    assert!(bad(r#"{"kind": "linear-sweep", "energy_grid": [2, 1]}"#));
    assert!(bad(r#"{"kind": "linear-sweep", "energy_grid": [-1, 1]}"#));
    assert!(bad(r#"{"kind": "linear-sweep", "energy_grid": []}"#));
    assert!(bad(r#"{"kind": "basis-compare", "methods": ["proposed"]}"#));
    assert!(bad(r#"{"kind": "linear-sweep", "instances": 0}"#));
    assert!(!bad(r#"{"kind": "linear-sweep", "energy_grid": [0, 1]}"#));
}

#[test]
fn subcommand_must_match_file_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"kind": "basis-compare"}"#).unwrap();
    let args = RunArgs {
        config: Some(path),
        ..RunArgs::default()
    };
    assert!(load_config(Kind::BasisCompare, &args, None).is_ok());
    assert!(matches!(
        load_config(Kind::LinearSweep, &args, None),
        Err(CliError::Config(_))
    ));
}
