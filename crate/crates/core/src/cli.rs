//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, FidelityForm};
use crate::error::{Error, Result};
use crate::fieldmodel;
use crate::grid::snapshot::{self, Precision};
use crate::grid::{Grid, GridSpec};
use crate::run::{self, GridChoice, GridPreset, RunConfig};
use crate::scanner::{self, Metric, ScanSpec};
use crate::units;
use crate::zeeman::{HyperfineLevel, SpeciesConstants};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECK: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Check(_) => EXIT_CHECK,
        Error::Numerical(_) | Error::NotConverged { .. } => EXIT_NUMERICAL,
        Error::Precondition(_) | Error::Io { .. } => EXIT_OTHER,
    }
}

#[derive(Parser, Debug)]
#[command(name = "atomlaser", version, about = "rf outcoupling of a trapped spinor condensate in microgravity")]
pub struct Cli {
    /// Worker threads for the numerical kernels.
    #[arg(long, global = true, env = "ATOMLASER_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Preflight checks of a run configuration.
    Check(RunArgs),
    /// Solve for the initial condensate only.
    GroundState(RunArgs),
    /// Ground state, propagation and analysis with all artifacts.
    Run(RunArgs),
    /// Analyse snapshots of a finished run.
    Analyze(AnalyzeArgs),
    /// Parameter sweep from a spec file or a preset.
    Scan(ScanArgs),
    /// Write the field sequence of a configuration as a sequence file.
    ExportSequence(RunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration: model, sudden-release, model-fine, model-3d.
    #[arg(long)]
    pub preset: Option<String>,
    /// Release from the trap without rf instead of the sequence.
    #[arg(long)]
    pub sudden_release: bool,
    /// Grid preset overriding the configuration.
    #[arg(long, value_enum)]
    pub grid: Option<GridPreset>,
    /// Write the manifest and preflight report only.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue although the preflight checks fail.
    #[arg(long)]
    pub force: bool,
    /// Output directory (a file for export-sequence).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    /// Run directory or snapshot directory.
    pub path: PathBuf,
    /// Snapshot time in ms; defaults to the final snapshots.
    #[arg(long)]
    pub time_ms: Option<f64>,
    /// m_F of the analysed component; defaults to the run's choice or 0.
    #[arg(long, allow_negative_numbers = true)]
    pub component: Option<i32>,
    /// Initial atom number; defaults to the run's n_atoms.
    #[arg(long)]
    pub n_initial: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub fidelity_form: Option<FidelityFormArg>,
    /// Directory for analysis.json; defaults to the analysed run directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
pub enum FidelityFormArg {
    Amplitude,
    Density,
}

#[derive(Args, Debug, Clone)]
pub struct ScanArgs {
    /// Scan spec file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in scan, e.g. fig6-desk, fig7-desk, stripe-desk, fig9-desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Simultaneous propagations.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Start over instead of skipping finished runs.
    #[arg(long)]
    pub no_resume: bool,
    /// List the runs without executing them.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run_preset(name: &str) -> Option<RunConfig> {
    let mut c = RunConfig::default();
    match name {
        "model" => {}
        "sudden-release" => c.sudden_release = true,
        "model-fine" => c.grid = Some(GridChoice::Preset(GridPreset::Fine)),
        "model-3d" => c.grid = Some(GridChoice::Preset(GridPreset::Full3d)),
        _ => return None,
    }
    Some(c)
}

/// Configuration from --config or --preset with the flag overrides.
pub fn load_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut c = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("--config and --preset are mutually exclusive".into())),
        (Some(p), None) => RunConfig::load(p)?,
        (None, Some(n)) => run_preset(n).ok_or_else(|| Error::Config(format!("unknown run preset '{n}'")))?,
        (None, None) => RunConfig::default(),
    };
    if a.sudden_release {
        c.sudden_release = true;
    }
    if let Some(g) = a.grid {
        c.grid = Some(GridChoice::Preset(g));
    }
    c.validate()?;
    Ok(c)
}

fn output_or_default(o: &Option<PathBuf>, prefix: &str) -> PathBuf {
    o.clone().unwrap_or_else(|| run::default_output_dir(prefix))
}

fn cmd_check(a: &RunArgs) -> Result<()> {
    let c = load_run_config(a)?;
    let r = c.resolve()?;
    let report = r.check()?;
    print!("{}", report.summary());
    if let Some(dir) = &a.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        run::write_json(&dir.join("check.json"), &report)?;
    }
    if report.passed() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Error::Check(report.failures.join("; ")))
    }
}

fn cmd_ground_state(a: &RunArgs) -> Result<()> {
    let c = load_run_config(a)?;
    let r = c.resolve()?;
    let dir = output_or_default(&a.output, "ground-state");
    run::write_manifest(&dir, &c, &r)?;
    if a.dry_run {
        println!("manifest written to {}", dir.display());
        return Ok(());
    }
    let gs = r.solve_ground_state()?;
    let summary = run::GroundStateSummary::from(&gs);
    let grid = Grid::new(r.grid.clone())?;
    snapshot::write_snapshot(
        &dir.join("ground_state.bin"),
        &grid,
        0.0,
        HyperfineLevel::Trapped.label(),
        Precision::Complex128,
        &gs.psi,
    )?;
    run::write_json(&dir.join("ground_state.json"), &summary)?;
    let tf = crate::groundstate::thomas_fermi_mu(r.n_atoms, &r.trap_schedule.trap, &r.species);
    println!(
        "mu/h = {:.3} Hz (Thomas-Fermi {:.3} Hz), residual/h = {:.3e} Hz, virial residual {:.2e}, {} steps",
        summary.mu_hz,
        units::hz_from_joule(tf),
        summary.residual_hz,
        summary.virial_residual,
        summary.iterations
    );
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let c = load_run_config(a)?;
    let dir = output_or_default(&a.output, "run");
    if a.dry_run {
        let r = c.resolve()?;
        run::write_manifest(&dir, &c, &r)?;
        let check = r.check()?;
        run::write_json(&dir.join("check.json"), &check)?;
        print!("{}", check.summary());
        println!("dry run: manifest written to {}", dir.display());
        return Ok(());
    }
    let (report, _) = run::execute(&c, &dir, a.force)?;
    let an = &report.analysis;
    let um = |v: Option<f64>| v.map(|x| format!("{:.1}", units::um_per_s_from_mps(x))).unwrap_or_else(|| "-".into());
    println!("artifacts in {}", dir.display());
    println!("ground state: mu/h = {:.3} Hz", report.ground_state.mu_hz);
    println!(
        "component m_F = {}: N_mp/N = {:.4} (N_mp = {:.1})",
        an.component, an.outcoupled_fraction, an.n_mp
    );
    println!(
        "mean speed {} um/s, sigma_v = ({}, {}) um/s",
        um(an.mean_speed),
        um(an.sigma_v[0]),
        um(an.sigma_v[1])
    );
    let pk = |t: Option<f64>| t.map(|x| format!("{:.1}", x * 1e12)).unwrap_or_else(|| "-".into());
    println!(
        "T_eff = ({}, {}) pK, fidelity {}",
        pk(an.t_eff[0]),
        pk(an.t_eff[1]),
        an.fidelity.map(|f| format!("{f:.4}")).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn snapshot_name(time_ms: Option<f64>, level: HyperfineLevel) -> String {
    match time_ms {
        None => format!("final_{}.bin", level.label()),
        Some(t) => format!("t{:09.3}ms_{}.bin", t, level.label()),
    }
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let run_dir = a.path.clone();
    let snap_dir = if run_dir.join("snapshots").is_dir() {
        run_dir.join("snapshots")
    } else {
        run_dir.clone()
    };
    let manifest = run_dir.join(run::MANIFEST_FILE);
    let config = if manifest.exists() { Some(RunConfig::load(&manifest)?) } else { None };
    let species = match &config {
        Some(c) => c.load_species()?,
        None => SpeciesConstants::rb87(),
    };
    let mut grid_spec: Option<GridSpec> = None;
    let mut fields: [Option<Vec<crate::grid::C64>>; 3] = [None, None, None];
    for level in HyperfineLevel::ALL {
        let p = snap_dir.join(snapshot_name(a.time_ms, level));
        if !p.exists() {
            continue;
        }
        let (h, f) = snapshot::read_snapshot(&p)?;
        if grid_spec.as_ref().is_some_and(|g| *g != h.grid) {
            return Err(Error::Precondition("snapshots were written on different lattices".into()));
        }
        grid_spec = Some(h.grid);
        fields[level.index()] = Some(f);
    }
    let spec = grid_spec.ok_or_else(|| Error::Precondition(format!("no snapshots found in {}", snap_dir.display())))?;
    let grid = Grid::new(spec)?;
    let fields = fields.map(|f| f.unwrap_or_else(|| grid.zeros()));
    let m = a
        .component
        .or(config.as_ref().and_then(|c| c.analysis_component))
        .unwrap_or(if config.as_ref().is_some_and(|c| c.sudden_release) { -1 } else { 0 });
    let level = HyperfineLevel::from_m_f(m).ok_or_else(|| Error::Config(format!("component {m} is not -1, 0 or 1")))?;
    let mut options = config.as_ref().map(|c| c.analysis.clone()).unwrap_or_default();
    if let Some(t) = a.threshold {
        options.threshold = t;
    }
    if let Some(f) = a.fidelity_form {
        options.fidelity_form = match f {
            FidelityFormArg::Amplitude => FidelityForm::Amplitude,
            FidelityFormArg::Density => FidelityForm::Density,
        };
    }
    let n = a
        .n_initial
        .or(config.as_ref().map(|c| c.n_atoms))
        .ok_or_else(|| Error::Config("--n-initial is required without a run manifest".into()))?;
    let report = analysis::metrics(&grid, &fields, level.index(), n, &species, &options)?;
    let out = a.output.clone().unwrap_or(run_dir);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    run::write_json(&out.join("analysis.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn load_scan_spec(a: &ScanArgs) -> Result<ScanSpec> {
    let mut s = match (&a.config, &a.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("--config and --preset are mutually exclusive".into())),
        (Some(p), None) => ScanSpec::load(p)?,
        (None, Some(n)) => {
            scanner::preset(n).ok_or_else(|| Error::Config(format!("unknown scan preset '{n}'; known: {}", scanner::PRESET_NAMES.join(", "))))?
        }
        (None, None) => return Err(Error::Config("scan needs --config or --preset".into())),
    };
    if let Some(p) = a.parallelism {
        s.parallelism = p;
    }
    if a.no_resume {
        s.resume = false;
    }
    if let Some(o) = &a.output {
        s.output = Some(o.clone());
    }
    s.validate()?;
    Ok(s)
}

fn cmd_scan(a: &ScanArgs) -> Result<()> {
    let spec = load_scan_spec(a)?;
    if a.dry_run {
        let (dir, pending) = scanner::prepare(&spec)?;
        println!("{} runs, {} pending, output {}", spec.run_count(), pending.len(), dir.display());
        for t in &pending {
            println!("  {}", spec.key(t));
        }
        return Ok(());
    }
    let table = scanner::run_scan(&spec)?;
    println!(
        "scan {}: {} runs, {} failed, results in {}",
        spec.name,
        table.rows.len(),
        table.failures(),
        spec.output_dir().display()
    );
    for line in scan_summary(&spec, &table) {
        println!("{line}");
    }
    Ok(())
}

/// Signature lines for the known presets.
pub fn scan_summary(spec: &ScanSpec, table: &scanner::ScanResultTable) -> Vec<String> {
    let mut out = vec![];
    let f = |v: &[f64]| table.value(v, Metric::Fidelity);
    match spec.name.as_str() {
        "fig6-desk" => {
            if let (Some(f40), Some(f90), Some(f150)) = (f(&[40.0, 1.0]), f(&[90.0, 1.0]), f(&[150.0, 1.0])) {
                out.push(format!(
                    "F(40) = {f40:.4}, F(90) = {f90:.4}, F(150) = {f150:.4}; F(90) is largest: {}",
                    f90 > f40 && f90 > f150
                ));
            }
            for om in [40.0, 90.0, 150.0] {
                if let (Some(on), Some(off)) = (f(&[om, 1.0]), f(&[om, 0.0])) {
                    out.push(format!("Omega {om}: F without m_F=0 potential {off:.4} >= with {on:.4}: {}", off >= on));
                }
            }
        }
        "stripe-desk" => {
            let (om, y): (Vec<f64>, Vec<f64>) = table.rows.iter().filter_map(|r| Some((r.values[0].number()?, r.outcoupled_fraction?))).unzip();
            if let Some(p) = scanner::stripe_period(&om, &y) {
                out.push(format!("stripe period {p:.2} Hz (one extra Rabi cycle in 90 ms: {:.2} Hz)", 1.0 / 0.09));
            } else {
                out.push("no stripe period found".into());
            }
        }
        "fig9-desk" => {
            for db in [-1.0, 1.0] {
                if let Some(fr) = table.value(&[db], Metric::OutcoupledFraction) {
                    out.push(format!("fraction at {db:+} mG: {fr:.4}"));
                }
            }
        }
        _ => {}
    }
    out
}

fn cmd_export_sequence(a: &RunArgs) -> Result<()> {
    let c = load_run_config(a)?;
    let r = c.resolve()?;
    let text = fieldmodel::sequence_to_toml(&r.schedule);
    match &a.output {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    match &cli.command {
        Command::Check(a) => cmd_check(a),
        Command::GroundState(a) => cmd_ground_state(a),
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Scan(a) => cmd_scan(a),
        Command::ExportSequence(a) => cmd_export_sequence(a),
    }
}

/// Parses the arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Reads a run directory's report, for tools that post-process runs.
pub fn read_report(dir: &Path) -> Result<run::RunReport> {
    let p = dir.join("report.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&p, e))
}

#[cfg(test)]
mod tests;
