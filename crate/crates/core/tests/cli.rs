use std::fs;
use std::path::Path;
use std::process::Command;

fn atomlaser(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_atomlaser"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let seq = "t_max_ms = 2.0\ndetuning_phase = \"product\"\n[trap]\nomega_hz = [30.0, 30.0, 15.0]\nb_bot_g = 4.0\n\
        [[phase]]\nname = \"rf\"\nt_start_ms = 0.0\nt_end_ms = 2.0\nb_bot_g = [4.0, 4.0]\ntrap_scale = [1.0, 1.0]\ndetuning_hz = [319.0, 316.0]\nrabi_hz = [400.0, 400.0]\n";
    fs::write(dir.join("seq.toml"), seq).unwrap();
    let run = "sequence = \"seq.toml\"\nn_atoms = 1e4\n[grid.lattice]\ncounts = [32, 64]\nextents_um = [30.0, 60.0]\n";
    let p = dir.join("run.toml");
    fs::write(&p, run).unwrap();
    p
}

#[test]
fn run_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let cfg_s = cfg.to_str().unwrap();
    let out_s = out.to_str().unwrap();

    // The strong drive fails preflight and is refused without --force.
    let refused = atomlaser(&["run", "--config", cfg_s, "--output", out_s]);
    assert_eq!(refused.status.code(), Some(3), "{}", String::from_utf8_lossy(&refused.stderr));
    assert!(!out.join("report.json").exists());

    let ok = atomlaser(&["--threads", "1", "run", "--config", cfg_s, "--output", out_s, "--force"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let fraction = report["analysis"]["outcoupled_fraction"].as_f64().unwrap();
    assert!(fraction > 0.0);

    let again = dir.path().join("again");
    let an = atomlaser(&["analyze", out_s, "--output", again.to_str().unwrap()]);
    assert_eq!(an.status.code(), Some(0), "{}", String::from_utf8_lossy(&an.stderr));
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(again.join("analysis.json")).unwrap()).unwrap();
    assert!((a["outcoupled_fraction"].as_f64().unwrap() - fraction).abs() < 1e-9);
    assert_eq!(a["n_initial"].as_f64(), Some(1e4));

    let other = atomlaser(&["analyze", out_s, "--component", "-1", "--output", again.to_str().unwrap()]);
    assert_eq!(other.status.code(), Some(0));
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(again.join("analysis.json")).unwrap()).unwrap();
    assert_ne!(a["component"], b["component"]);
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_eq!(atomlaser(&["--help"]).status.code(), Some(0));
    assert_eq!(atomlaser(&["--version"]).status.code(), Some(0));
    assert_eq!(atomlaser(&["run", "--bogus"]).status.code(), Some(2));
}
