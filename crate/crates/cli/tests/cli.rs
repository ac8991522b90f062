use std::fs;
use std::path::Path;
use std::process::{Command as Process, Output};

use spde_reflect_cli::config::ExperimentConfig;
use spde_reflect_cli::{execute, replay, CliError, Command, Manifest, FORMAT_TAG, MANIFEST_FILE};

fn bin(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Process::new(env!("CARGO_BIN_EXE_spde-reflect"));
    cmd.args(args).env_remove("SPDE_REFLECT_OUT");
    if let Some(dir) = out_env {
        cmd.env("SPDE_REFLECT_OUT", dir);
    }
    cmd.output().unwrap()
}

fn quiet_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        r#"
        n_x = 16
        dt = 1e-2
        t_end = 0.5
        replicas = 3
        record_stride = 5
        drift = { kind = "zero" }
        diffusion = { kind = "zero" }
        "#,
    )
    .unwrap()
}

#[test]
fn simulate_without_forcing_stays_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = execute(Command::Simulate, &quiet_config(), dir.path()).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let mut r = csv::Reader::from_path(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["t", "node", "u", "eta_mass", "xi_mass"]);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        for col in 2..5 {
            assert_eq!(rec[col].parse::<f64>().unwrap(), 0.0);
        }
        rows += 1;
    }
    // t = 0, 0.05, ..., 0.5 at 16 nodes
    assert_eq!(rows, 11 * 16);
}

#[test]
fn manifest_records_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quiet_config();
    let outcome = execute(Command::Simulate, &cfg, dir.path()).unwrap();
    let m = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.format, FORMAT_TAG);
    assert_eq!(m.command, Command::Simulate);
    assert_eq!(m.config, cfg);
    assert_eq!(m.seeds.master_seed, cfg.master_seed);
    assert_eq!(m, outcome.manifest);
    for f in &m.outputs {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn replay_reproduces_tables_and_honours_seed_override() {
    let cfg = ExperimentConfig::from_toml_str("n_x = 16\ndt = 1e-2\nt_end = 0.3\nreplicas = 4\n").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    execute(Command::Simulate, &cfg, a.path()).unwrap();
    let manifest = a.path().join(MANIFEST_FILE);
    replay(&manifest, b.path(), None).unwrap();
    let other = replay(&manifest, c.path(), Some(cfg.master_seed + 1)).unwrap();
    assert_eq!(other.manifest.config.master_seed, cfg.master_seed + 1);
    let read = |d: &Path| fs::read(d.join("trajectory.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn unknown_and_invalid_fields_are_rejected() {
    assert!(matches!(
        ExperimentConfig::from_toml_str("n_x = 16\nbogus = 1\n"),
        Err(CliError::Config { .. })
    ));
    for (text, field) in [
        ("dt = -1e-3", "dt"),
        ("n_x = 2", "n_x"),
        ("t_end = 0.0105", "t_end"),
        ("[ergodic]\nburn_in = 10.0\nhorizon = 15.0", "ergodic"),
    ] {
        match ExperimentConfig::from_toml_str(text).and_then(|c| c.validate().map(|_| c)) {
            Err(CliError::Config { field: f, .. }) => assert!(f.contains(field), "{text}: {f}"),
            other => panic!("{text}: expected a config error, got {other:?}"),
        }
    }
}

#[test]
fn validation_error_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "dt = -1.0\n").unwrap();
    let out = dir.path().join("out");
    let o = bin(&["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "simulate"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join(MANIFEST_FILE).exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt"));
}

#[test]
fn kernel_check_passes_and_uses_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["kernel-check"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let m = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(m.checks.iter().all(|c| c.passed));
    assert_eq!(m.exit_code, 0);
}

#[test]
fn only_check_subcommands_enforce_thresholds() {
    let enforcing: Vec<_> = [
        Command::KernelCheck,
        Command::Simulate,
        Command::SweepPenalization,
        Command::ObstacleCheck,
        Command::Couple,
        Command::Ergodic,
        Command::StrongFeller,
    ]
    .into_iter()
    .filter(|c| c.enforces_thresholds())
    .collect();
    assert_eq!(enforcing, vec![Command::KernelCheck, Command::ObstacleCheck]);
}

#[test]
fn numerical_failure_is_recorded_with_exit_two() {
    // the drift multiplies the state by about 1e4 per step, far faster than the penalty pulls back
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        n_x = 8
        dt = 1e-2
        t_end = 1.0
        replicas = 1
        scheme = "penalized"
        initial = { kind = "cosine", amplitude = 0.5 }
        drift = { kind = "linear", intercept = 0.0, slope = 1e6 }
        diffusion = { kind = "zero" }
        "#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = execute(Command::Simulate, &cfg, dir.path()).unwrap();
    assert_eq!(outcome.exit_code(), 2, "{:?}", outcome.manifest);
    let m = Manifest::load(&outcome.manifest_path).unwrap();
    assert!(m.error.is_some() || !m.failed_replicas.is_empty());
}

#[test]
fn manifest_with_wrong_format_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = execute(Command::KernelCheck, &quiet_config(), dir.path()).unwrap();
    let text = fs::read_to_string(&outcome.manifest_path)
        .unwrap()
        .replace(FORMAT_TAG, "something-else/9");
    fs::write(&outcome.manifest_path, text).unwrap();
    assert!(matches!(Manifest::load(&outcome.manifest_path), Err(CliError::Manifest(_))));
}
