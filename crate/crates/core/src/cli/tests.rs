use super::*;
use std::fs;

fn code(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("atomlaser").chain(args.iter().copied()))
}

#[test]
fn exit_codes_follow_error_kinds() {
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::Check("x".into())), EXIT_CHECK);
    assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
    assert_eq!(exit_code(&Error::Precondition("x".into())), EXIT_OTHER);
}

#[test]
fn bad_arguments_are_config_errors() {
    assert_eq!(code(&["frobnicate"]), EXIT_CONFIG);
    assert_eq!(code(&["check", "--preset", "nope"]), EXIT_CONFIG);
    assert_eq!(code(&["scan"]), EXIT_CONFIG);
    assert_eq!(code(&["scan", "--preset", "nope"]), EXIT_CONFIG);
    assert_eq!(code(&["check", "--config", "/nonexistent/run.toml"]), EXIT_OTHER);
    assert_eq!(code(&["--threads", "0", "check"]), EXIT_CONFIG);
}

#[test]
fn presets_and_flags_compose() {
    let a = RunArgs {
        preset: Some("model-fine".into()),
        sudden_release: true,
        ..Default::default()
    };
    let c = load_run_config(&a).unwrap();
    assert!(c.sudden_release);
    assert_eq!(c.grid, Some(GridChoice::Preset(GridPreset::Fine)));
    for n in ["model", "sudden-release", "model-fine", "model-3d"] {
        run_preset(n).unwrap().resolve().unwrap();
    }
    let both = RunArgs {
        preset: Some("model".into()),
        config: Some("x.toml".into()),
        ..Default::default()
    };
    assert!(matches!(load_run_config(&both), Err(Error::Config(_))));
}

#[test]
fn check_reports_failures_through_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["check"]), EXIT_OK);
    let p = dir.path().join("strong.toml");
    fs::write(&p, "rabi_hz = 400.0\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&["check", "--config", p.to_str().unwrap(), "--output", out.to_str().unwrap()]), EXIT_CHECK);
    assert!(out.join("check.json").exists());
    fs::write(&p, "rabi_hz = [\n").unwrap();
    assert_eq!(code(&["check", "--config", p.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn dry_run_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&["run", "--dry-run", "--output", out.to_str().unwrap()]), EXIT_OK);
    for f in [run::MANIFEST_FILE, run::SPECIES_FILE, run::SEQUENCE_FILE, "check.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("report.json").exists());
    // The manifest reproduces the run on its own.
    let back = RunConfig::load(&out.join(run::MANIFEST_FILE)).unwrap();
    assert_eq!(back.resolve().unwrap().grid, RunConfig::default().resolve().unwrap().grid);
}

#[test]
fn export_sequence_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("seq.toml");
    assert_eq!(code(&["export-sequence", "--output", p.to_str().unwrap()]), EXIT_OK);
    let s = fieldmodel::load_sequence(&p, SpeciesConstants::rb87()).unwrap();
    let r = RunConfig::default().resolve().unwrap();
    for t in [0.0, 0.05, 0.1, 0.13] {
        assert_eq!(s.state(t), r.schedule.state(t));
    }
}

#[test]
fn scan_dry_run_lists_pending_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scan");
    assert_eq!(
        code(&["scan", "--preset", "fig6-desk", "--dry-run", "--output", out.to_str().unwrap()]),
        EXIT_OK
    );
    assert!(out.join("scan.toml").exists());
    assert!(!out.join("results.jsonl").exists());
}

#[test]
fn analyze_needs_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["analyze", dir.path().to_str().unwrap(), "--n-initial", "1e5"]), EXIT_OTHER);
}

#[test]
fn run_then_analyze_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let seq = "t_max_ms = 2.0\ndetuning_phase = \"product\"\n[trap]\nomega_hz = [30.0, 30.0, 15.0]\nb_bot_g = 4.0\n\
        [[phase]]\nname = \"rf\"\nt_start_ms = 0.0\nt_end_ms = 2.0\nb_bot_g = [4.0, 4.0]\ntrap_scale = [1.0, 1.0]\ndetuning_hz = [319.0, 316.0]\nrabi_hz = [90.0, 90.0]\n";
    fs::write(dir.path().join("seq.toml"), seq).unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "sequence = \"seq.toml\"\nn_atoms = 1e4\n[grid.lattice]\ncounts = [32, 64]\nextents_um = [30.0, 60.0]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&["run", "--config", cfg_s, "--output", out_s, "--force"]), EXIT_OK);
    let report = read_report(&out).unwrap();
    // Snapshots are stored in single precision.
    let again = dir.path().join("again");
    assert_eq!(code(&["analyze", out_s, "--output", again.to_str().unwrap()]), EXIT_OK);
    let text = fs::read_to_string(again.join("analysis.json")).unwrap();
    let a: analysis::AnalysisReport = serde_json::from_str(&text).unwrap();
    assert_eq!(a.component, report.analysis.component);
    assert!(
        (a.outcoupled_fraction - report.analysis.outcoupled_fraction).abs() < 1e-6,
        "{} vs {}",
        a.outcoupled_fraction,
        report.analysis.outcoupled_fraction
    );
    assert_eq!(a.n_initial, 1e4);
}
