//! Parameter sweeps: every tuple of the Cartesian product of the axes runs
//! the baseline with the tuple's overrides, and the analysis reports are
//! collected into one table.
//!
//! A scan directory holds `scan.toml` (the expanded spec), `results.jsonl`
//! (one line per finished run, appended as runs complete), `results.csv`,
//! heat-map matrices for two-axis scans, and `runs/<key>/` per run.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::snapshot::write_matrix_csv;
use crate::groundstate::GroundStateResult;
use crate::run::{self, GridChoice, GridPreset, RunConfig, RunReport};
use crate::units;

/// Overridable run parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanParameter {
    NAtoms,
    RabiHz,
    DeltaBMg,
    /// 1 keeps the m_F = 0 potential, 0 removes it.
    UntrappedPotential,
    /// Grid preset name.
    Grid,
    MaxPhase,
    Rtol,
}

impl ScanParameter {
    pub fn name(self) -> &'static str {
        match self {
            ScanParameter::NAtoms => "n_atoms",
            ScanParameter::RabiHz => "rabi_hz",
            ScanParameter::DeltaBMg => "delta_b_mg",
            ScanParameter::UntrappedPotential => "untrapped_potential",
            ScanParameter::Grid => "grid",
            ScanParameter::MaxPhase => "max_phase",
            ScanParameter::Rtol => "rtol",
        }
    }

    fn check(self, v: &AxisValue) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("axis {}: {m}", self.name())));
        match (self, v) {
            (ScanParameter::Grid, AxisValue::Name(n)) if GridPreset::from_name(n).is_some() => Ok(()),
            (ScanParameter::Grid, _) => bad("values must be grid preset names"),
            (_, AxisValue::Name(_)) => bad("values must be numbers"),
            (_, AxisValue::Number(x)) if !x.is_finite() => bad("values must be finite"),
            (ScanParameter::UntrappedPotential, AxisValue::Number(x)) if *x != 0.0 && *x != 1.0 => bad("values must be 0 or 1"),
            (ScanParameter::NAtoms | ScanParameter::MaxPhase | ScanParameter::Rtol, AxisValue::Number(x)) if *x <= 0.0 => bad("values must be positive"),
            (ScanParameter::RabiHz, AxisValue::Number(x)) if *x < 0.0 => bad("values must be non-negative"),
            _ => Ok(()),
        }
    }

    /// Writes the value into a run configuration.
    pub fn apply(self, config: &mut RunConfig, v: &AxisValue) -> Result<()> {
        self.check(v)?;
        match (self, v) {
            (ScanParameter::Grid, AxisValue::Name(n)) => config.grid = Some(GridChoice::Preset(GridPreset::from_name(n).expect("checked"))),
            (ScanParameter::NAtoms, AxisValue::Number(x)) => config.n_atoms = *x,
            (ScanParameter::RabiHz, AxisValue::Number(x)) => config.rabi_hz = Some(*x),
            (ScanParameter::DeltaBMg, AxisValue::Number(x)) => config.delta_b_mg = *x,
            (ScanParameter::UntrappedPotential, AxisValue::Number(x)) => config.untrapped_potential = *x == 1.0,
            (ScanParameter::MaxPhase, AxisValue::Number(x)) => config.propagator.max_phase = *x,
            (ScanParameter::Rtol, AxisValue::Number(x)) => config.propagator.rtol = *x,
            _ => unreachable!("checked"),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Number(f64),
    Name(String),
}

impl AxisValue {
    pub fn number(&self) -> Option<f64> {
        match self {
            AxisValue::Number(x) => Some(*x),
            AxisValue::Name(_) => None,
        }
    }
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Number(x) => write!(f, "{x}"),
            AxisValue::Name(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub parameter: ScanParameter,
    pub values: Vec<AxisValue>,
}

impl Axis {
    pub fn numbers(parameter: ScanParameter, values: impl IntoIterator<Item = f64>) -> Self {
        Axis {
            parameter,
            values: values.into_iter().map(AxisValue::Number).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub name: String,
    #[serde(rename = "axis")]
    pub axes: Vec<Axis>,
    #[serde(default)]
    pub baseline: RunConfig,
    /// Defaults to scans/<name>.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Largest number of simultaneous propagations.
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Skip tuples that already have a successful row.
    #[serde(default = "yes")]
    pub resume: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ScanSpec {
    pub fn new(name: &str, axes: Vec<Axis>, baseline: RunConfig) -> Self {
        ScanSpec {
            name: name.into(),
            axes,
            baseline,
            output: None,
            parallelism: 1,
            resume: true,
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("scans").join(&self.name))
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("a scan needs at least one axis".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("scan name must be a plain non-empty file name".into()));
        }
        let mut seen = vec![];
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(Error::Config(format!("axis {} has no values", a.parameter.name())));
            }
            if seen.contains(&a.parameter) {
                return Err(Error::Config(format!("axis {} appears twice", a.parameter.name())));
            }
            seen.push(a.parameter);
            for (i, v) in a.values.iter().enumerate() {
                a.parameter.check(v)?;
                if a.values[..i].contains(v) {
                    return Err(Error::Config(format!("axis {} repeats the value {v}", a.parameter.name())));
                }
            }
        }
        self.baseline.validate()
    }

    pub fn parameters(&self) -> Vec<ScanParameter> {
        self.axes.iter().map(|a| a.parameter).collect()
    }

    /// Cartesian product in row-major order (last axis fastest).
    pub fn tuples(&self) -> Vec<Vec<AxisValue>> {
        let mut out = vec![vec![]];
        for a in &self.axes {
            out = out
                .into_iter()
                .flat_map(|t| a.values.iter().map(move |v| [t.clone(), vec![v.clone()]].concat()))
                .collect();
        }
        out
    }

    pub fn run_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Baseline with the overrides of one tuple.
    pub fn config_for(&self, tuple: &[AxisValue]) -> Result<RunConfig> {
        let mut c = self.baseline.clone();
        for (a, v) in self.axes.iter().zip(tuple) {
            a.parameter.apply(&mut c, v)?;
        }
        Ok(c)
    }

    pub fn key(&self, tuple: &[AxisValue]) -> String {
        self.axes
            .iter()
            .zip(tuple)
            .map(|(a, v)| format!("{}={v}", a.parameter.name()))
            .collect::<Vec<_>>()
            .join("_")
    }
}

/// One run of a scan; failed runs keep their error and have no metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub key: String,
    pub values: Vec<AxisValue>,
    pub ok: bool,
    pub error: Option<String>,
    pub check_passed: bool,
    pub ground_state_converged: bool,
    pub fit_failed: bool,
    pub outcoupled_fraction: Option<f64>,
    pub mean_speed_um_s: Option<f64>,
    pub fidelity: Option<f64>,
    pub sigma_um_s: [Option<f64>; 2],
    /// N_m(t_max) per component including absorbed atoms.
    pub final_numbers: Option<[f64; 3]>,
    pub wall_seconds: f64,
}

impl ScanRow {
    fn failed(key: String, values: Vec<AxisValue>, error: String, wall: f64) -> Self {
        ScanRow {
            key,
            values,
            ok: false,
            error: Some(error),
            check_passed: false,
            ground_state_converged: false,
            fit_failed: true,
            outcoupled_fraction: None,
            mean_speed_um_s: None,
            fidelity: None,
            sigma_um_s: [None; 2],
            final_numbers: None,
            wall_seconds: wall,
        }
    }

    fn from_report(key: String, values: Vec<AxisValue>, r: &RunReport, totals: [f64; 3]) -> Self {
        let a = &r.analysis;
        ScanRow {
            key,
            values,
            ok: true,
            error: None,
            check_passed: r.check.passed(),
            ground_state_converged: r.ground_state.converged,
            fit_failed: a.fit_failed,
            outcoupled_fraction: Some(a.outcoupled_fraction),
            mean_speed_um_s: a.mean_speed.map(units::um_per_s_from_mps),
            fidelity: a.fidelity,
            sigma_um_s: a.sigma_v.map(|s| s.map(units::um_per_s_from_mps)),
            final_numbers: Some(totals),
            wall_seconds: r.wall_seconds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    OutcoupledFraction,
    MeanSpeed,
    Fidelity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::OutcoupledFraction, Metric::MeanSpeed, Metric::Fidelity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::OutcoupledFraction => "outcoupled_fraction",
            Metric::MeanSpeed => "mean_speed_um_s",
            Metric::Fidelity => "fidelity",
        }
    }

    pub fn of(self, row: &ScanRow) -> Option<f64> {
        match self {
            Metric::OutcoupledFraction => row.outcoupled_fraction,
            Metric::MeanSpeed => row.mean_speed_um_s,
            Metric::Fidelity => row.fidelity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResultTable {
    pub name: String,
    pub parameters: Vec<ScanParameter>,
    pub rows: Vec<ScanRow>,
}

impl ScanResultTable {
    pub fn find(&self, values: &[AxisValue]) -> Option<&ScanRow> {
        self.rows.iter().find(|r| r.values == values)
    }

    /// Metric value at a tuple of numbers, if that run succeeded.
    pub fn value(&self, values: &[f64], metric: Metric) -> Option<f64> {
        let v: Vec<AxisValue> = values.iter().copied().map(AxisValue::Number).collect();
        self.find(&v).and_then(|r| metric.of(r))
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        let names: Vec<&str> = self.parameters.iter().map(|p| p.name()).collect();
        writeln!(
            w,
            "{},ok,check_passed,gs_converged,fit_failed,outcoupled_fraction,mean_speed_um_s,fidelity,sigma_vx_um_s,sigma_vz_um_s,N_m1,N_0,N_p1,wall_s,error",
            names.join(",")
        )
        .map_err(io)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
            let n = r.final_numbers.map(|n| n.map(|x| format!("{x:.3}"))).unwrap_or_default();
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.1},{}",
                vals.join(","),
                r.ok,
                r.check_passed,
                r.ground_state_converged,
                r.fit_failed,
                opt(r.outcoupled_fraction),
                opt(r.mean_speed_um_s),
                opt(r.fidelity),
                opt(r.sigma_um_s[0]),
                opt(r.sigma_um_s[1]),
                n.first().cloned().unwrap_or_default(),
                n.get(1).cloned().unwrap_or_default(),
                n.get(2).cloned().unwrap_or_default(),
                r.wall_seconds,
                err
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// For two numeric axes, one matrix per metric (rows: first axis,
    /// columns: second axis, NaN where a run failed).
    pub fn write_heatmaps(&self, spec: &ScanSpec, dir: &Path) -> Result<Vec<PathBuf>> {
        if spec.axes.len() != 2 {
            return Ok(vec![]);
        }
        let nums = |a: &Axis| a.values.iter().map(AxisValue::number).collect::<Option<Vec<f64>>>();
        let (Some(rows), Some(cols)) = (nums(&spec.axes[0]), nums(&spec.axes[1])) else {
            return Ok(vec![]);
        };
        let mut out = vec![];
        for m in Metric::ALL {
            let values: Vec<f64> = rows
                .iter()
                .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
                .map(|(r, c)| self.value(&[r, c], m).unwrap_or(f64::NAN))
                .collect();
            let p = dir.join(format!("heatmap_{}.csv", m.name()));
            write_matrix_csv(&p, &rows, &cols, &values)?;
            out.push(p);
        }
        Ok(out)
    }
}

type GroundStateSlot = Arc<OnceLock<std::result::Result<Arc<GroundStateResult>, String>>>;

/// Ground states keyed by everything that determines them.
#[derive(Default)]
struct GroundStateCache {
    slots: Mutex<HashMap<String, GroundStateSlot>>,
}

impl GroundStateCache {
    fn key(c: &RunConfig) -> String {
        let grid = c.grid_config().lattice;
        serde_json::to_string(&(&c.species, &c.sequence, c.sudden_release, c.n_atoms, c.delta_b_mg, grid, &c.ground_state)).expect("key serializes")
    }

    fn get(&self, c: &RunConfig, run: &run::ResolvedRun) -> std::result::Result<Arc<GroundStateResult>, String> {
        let slot = self.slots.lock().expect("cache lock").entry(Self::key(c)).or_default().clone();
        slot.get_or_init(|| run.solve_ground_state().map(Arc::new).map_err(|e| e.to_string())).clone()
    }
}

fn read_rows(path: &Path) -> Result<Vec<ScanRow>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = vec![];
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScanRow>(&line) {
            Ok(r) => rows.push(r),
            // A truncated last line from an interrupted scan is ignored.
            Err(e) => log::warn!("{}: skipping unreadable row: {e}", path.display()),
        }
    }
    Ok(rows)
}

fn run_one(spec: &ScanSpec, tuple: &[AxisValue], dir: &Path, cache: &GroundStateCache) -> Result<(RunReport, [f64; 3])> {
    let clock = Instant::now();
    let config = spec.config_for(tuple)?;
    let resolved = config.resolve()?;
    run::write_manifest(dir, &config, &resolved)?;
    let check = resolved.check()?;
    run::write_json(&dir.join("check.json"), &check)?;
    let gs = cache.get(&config, &resolved).map_err(Error::Numerical)?;
    let outcome = resolved.propagate(&gs, Some(&dir.join("snapshots")))?;
    run::write_artifacts(dir, &resolved, &outcome)?;
    let fs = &outcome.final_state;
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").into(),
        check,
        ground_state: outcome.ground_state.clone(),
        stats: outcome.stats.clone(),
        absorbed: fs.absorbed,
        discarded: fs.discarded,
        analysis: outcome.report.clone(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    run::write_json(&dir.join("report.json"), &report)?;
    Ok((report, fs.totals()))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Writes scan.toml and returns the tuples that still need to run.
pub fn prepare(spec: &ScanSpec) -> Result<(PathBuf, Vec<Vec<AxisValue>>)> {
    spec.validate()?;
    let dir = spec.output_dir();
    fs::create_dir_all(dir.join("runs")).map_err(|e| Error::io(&dir, e))?;
    let mut expanded = spec.clone();
    expanded.baseline.grid = Some(GridChoice::Custom(spec.baseline.grid_config()));
    let text = toml::to_string(&expanded).map_err(|e| Error::Config(format!("scan spec does not serialize: {e}")))?;
    let p = dir.join("scan.toml");
    fs::write(&p, text).map_err(|e| Error::io(p, e))?;
    let done: Vec<String> = if spec.resume {
        read_rows(&dir.join("results.jsonl"))?.into_iter().filter(|r| r.ok).map(|r| r.key).collect()
    } else {
        vec![]
    };
    let pending = spec.tuples().into_iter().filter(|t| !done.contains(&spec.key(t))).collect();
    Ok((dir, pending))
}

/// Executes all pending tuples with at most `spec.parallelism` concurrent
/// propagations. Single-run failures become flagged rows.
pub fn run_scan(spec: &ScanSpec) -> Result<ScanResultTable> {
    let (dir, pending) = prepare(spec)?;
    let baseline = spec.baseline.resolve()?;
    let check = baseline.check()?;
    log::info!("scan {}: baseline preflight\n{}", spec.name, check.summary());
    log::info!("scan {}: {} of {} runs pending", spec.name, pending.len(), spec.run_count());
    let results = dir.join("results.jsonl");
    if !spec.resume && results.exists() {
        fs::remove_file(&results).map_err(|e| Error::io(&results, e))?;
    }
    let sink = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&results)
            .map_err(|e| Error::io(&results, e))?,
    );
    let cache = GroundStateCache::default();
    let next = AtomicUsize::new(0);
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = spec.parallelism.min(pending.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(tuple) = pending.get(i) else { break };
                let key = spec.key(tuple);
                let run_dir = dir.join("runs").join(&key);
                let clock = Instant::now();
                let row = match catch_unwind(AssertUnwindSafe(|| run_one(spec, tuple, &run_dir, &cache))) {
                    Ok(Ok((report, totals))) => ScanRow::from_report(key, tuple.clone(), &report, totals),
                    Ok(Err(e)) => ScanRow::failed(key, tuple.clone(), e.to_string(), clock.elapsed().as_secs_f64()),
                    Err(p) => ScanRow::failed(key, tuple.clone(), format!("panic: {}", panic_message(p)), clock.elapsed().as_secs_f64()),
                };
                match &row.error {
                    None => log::info!(
                        "{}: fraction {:.4}, mean speed {:?} um/s, F {:?} ({:.0} s)",
                        row.key,
                        row.outcoupled_fraction.unwrap_or(0.0),
                        row.mean_speed_um_s,
                        row.fidelity,
                        row.wall_seconds
                    ),
                    Some(e) => log::warn!("{}: failed: {e}", row.key),
                }
                let line = serde_json::to_string(&row).expect("row serializes");
                let mut f = sink.lock().expect("results lock");
                if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                    io_error.lock().expect("error lock").get_or_insert(Error::io(&results, e));
                }
            });
        }
    });
    if let Some(e) = io_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let table = collect(spec, &dir)?;
    table.write_csv(&dir.join("results.csv"))?;
    table.write_heatmaps(spec, &dir)?;
    Ok(table)
}

/// Table from results.jsonl: one row per tuple in product order, the
/// latest line winning. Tuples without any row are reported as failed.
pub fn collect(spec: &ScanSpec, dir: &Path) -> Result<ScanResultTable> {
    let mut latest: BTreeMap<String, ScanRow> = BTreeMap::new();
    for r in read_rows(&dir.join("results.jsonl"))? {
        // A successful row is never replaced by a later failure.
        if latest.get(&r.key).is_some_and(|old| old.ok && !r.ok) {
            continue;
        }
        latest.insert(r.key.clone(), r);
    }
    let rows = spec
        .tuples()
        .into_iter()
        .map(|t| {
            let key = spec.key(&t);
            latest.remove(&key).unwrap_or_else(|| ScanRow::failed(key, t, "not run".into(), 0.0))
        })
        .collect();
    Ok(ScanResultTable {
        name: spec.name.clone(),
        parameters: spec.parameters(),
        rows,
    })
}

/// Ω/2π periodicity of the final populations expected when one additional
/// full Rabi cycle fits into a drive of duration `t_rf` (s).
pub fn expected_oscillation_period(t_rf: f64) -> Result<f64> {
    if !(t_rf > 0.0 && t_rf.is_finite()) {
        return Err(Error::Precondition("drive duration must be positive".into()));
    }
    Ok(1.0 / t_rf)
}

/// Period of a series sampled on a uniform axis, from the first maximum of
/// its autocorrelation after the first negative lobe. The series is
/// detrended by a least-squares line first.
pub fn stripe_period(axis: &[f64], values: &[f64]) -> Option<f64> {
    let n = axis.len();
    if n != values.len() || n < 6 {
        return None;
    }
    let step = (axis[n - 1] - axis[0]) / (n - 1) as f64;
    if !(step > 0.0) || axis.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step) {
        return None;
    }
    let mx = axis.iter().sum::<f64>() / n as f64;
    let my = values.iter().sum::<f64>() / n as f64;
    let sxx: f64 = axis.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = axis.iter().zip(values).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let r: Vec<f64> = axis.iter().zip(values).map(|(x, y)| y - my - slope * (x - mx)).collect();
    let r0: f64 = r.iter().map(|v| v * v).sum();
    if !(r0 > 0.0) {
        return None;
    }
    let ac: Vec<f64> = (0..n).map(|k| r[..n - k].iter().zip(&r[k..]).map(|(a, b)| a * b).sum::<f64>() / r0).collect();
    let first_negative = ac.iter().position(|&c| c < 0.0)?;
    // Only lags with at least a third of the samples overlapping are trusted.
    let max_lag = n - n / 3;
    let k = (first_negative.max(1)..max_lag.min(n - 1)).find(|&k| ac[k] > 0.0 && ac[k] >= ac[k - 1] && ac[k] >= ac[k + 1])?;
    let (a, b, c) = (ac[k - 1], ac[k], ac[k + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Some((k as f64 + shift.clamp(-0.5, 0.5)) * step)
}

fn grid_steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// ΔB values ±{0.01, 0.03, 0.1, 0.3, 1} mG and zero.
pub fn delta_b_desk_values() -> Vec<f64> {
    let m = [0.01, 0.03, 0.1, 0.3, 1.0];
    m.iter().rev().map(|x| -x).chain(std::iter::once(0.0)).chain(m.iter().copied()).collect()
}

fn delta_b_full_values() -> Vec<f64> {
    let m = [0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];
    m.iter().rev().map(|x| -x).chain(std::iter::once(0.0)).chain(m.iter().copied()).collect()
}

/// Baseline for scans: the reference run without final snapshots.
pub fn scan_baseline() -> RunConfig {
    let mut c = RunConfig::default();
    c.snapshots.write_final = false;
    c
}

pub const PRESET_NAMES: [&str; 10] = [
    "fig6-desk",
    "fig7-desk",
    "fig7-full",
    "stripe-desk",
    "shutdown-desk",
    "fig8",
    "fig9-desk",
    "fig9-full",
    "fig9n-full",
    "baseline",
];

/// Named scan presets; the desk variants use coarser steps than the full ones.
pub fn preset(name: &str) -> Option<ScanSpec> {
    use ScanParameter::*;
    let b = scan_baseline();
    let n_desk = [0.5e5, 0.75e5, 1e5, 1.25e5, 1.5e5];
    let spec = match name {
        "baseline" => ScanSpec::new(name, vec![Axis::numbers(NAtoms, [1e5]), Axis::numbers(RabiHz, [90.0])], b),
        "fig6-desk" => ScanSpec::new(
            name,
            vec![Axis::numbers(RabiHz, [40.0, 90.0, 150.0]), Axis::numbers(UntrappedPotential, [1.0, 0.0])],
            b,
        ),
        "fig7-desk" => ScanSpec::new(
            name,
            vec![Axis::numbers(NAtoms, n_desk), Axis::numbers(RabiHz, grid_steps(0.0, 300.0, 10.0))],
            b,
        ),
        "fig7-full" => ScanSpec::new(
            name,
            vec![
                Axis::numbers(NAtoms, grid_steps(0.5e5, 1.5e5, 0.1e5)),
                Axis::numbers(RabiHz, grid_steps(0.0, 300.0, 2.5)),
            ],
            b,
        ),
        "stripe-desk" => ScanSpec::new(name, vec![Axis::numbers(RabiHz, grid_steps(200.0, 250.0, 2.5))], b),
        "shutdown-desk" => ScanSpec::new(name, vec![Axis::numbers(RabiHz, [0.0, 5.0, 10.0, 20.0, 40.0])], b),
        "fig8" => ScanSpec::new(name, vec![Axis::numbers(RabiHz, [40.0, 90.0, 150.0, 250.0, 255.0])], b),
        "fig9-desk" => ScanSpec::new(name, vec![Axis::numbers(DeltaBMg, delta_b_desk_values())], b),
        "fig9-full" => ScanSpec::new(
            name,
            vec![Axis::numbers(RabiHz, [40.0, 90.0, 150.0]), Axis::numbers(DeltaBMg, delta_b_full_values())],
            b,
        ),
        "fig9n-full" => ScanSpec::new(name, vec![Axis::numbers(NAtoms, n_desk), Axis::numbers(DeltaBMg, delta_b_full_values())], b),
        _ => return None,
    };
    Some(spec)
}

pub fn preset_scans() -> Vec<ScanSpec> {
    PRESET_NAMES.iter().map(|n| preset(n).expect("listed preset exists")).collect()
}
