//! Run configuration in laboratory units and the end-to-end pipeline
//! (preflight checks, ground state, propagation, analysis, artifacts).
//!
//! Configuration files use Hz for ω/2π, G for fields, ms for times and μm
//! for lengths; everything is converted to SI on resolution.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisOptions, AnalysisReport};
use crate::dynamics::{self, GridStage, Method, NormSample, PropagatorConfig, SpinorState, StepStats};
use crate::error::{Error, Result};
use crate::fieldmodel::{self, DetuningPhase, FieldSchedule};
use crate::grid::snapshot::{self, Precision};
use crate::grid::{check_nyquist, AbsorbingLayer, Grid, GridSpec};
use crate::groundstate::{self, GroundStateConfig, GroundStateResult};
use crate::units;
use crate::zeeman::{self, FeasibilityCheck, HyperfineLevel, SpeciesConstants};

/// Named lattice layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridPreset {
    /// Reduced (ρ, z) lattice with 0.47 μm spacing, enlarged at trap switch-off.
    Desk,
    /// Desk layout at half the spacing.
    Fine,
    /// Cartesian 128 × 128 × 256 lattice without enlargement.
    Full3d,
    /// Expanding lattices at 0.625 μm spacing for a release without absorbers.
    Release,
}

impl GridPreset {
    pub const ALL: [GridPreset; 4] = [GridPreset::Desk, GridPreset::Fine, GridPreset::Full3d, GridPreset::Release];

    pub fn name(self) -> &'static str {
        match self {
            GridPreset::Desk => "desk",
            GridPreset::Fine => "fine",
            GridPreset::Full3d => "full3d",
            GridPreset::Release => "release",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Point counts and extents of one lattice: `[n_ρ, n_z]` with `[ρ_max, z
/// extent]`, or three counts with three extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub counts: Vec<usize>,
    pub extents_um: Vec<f64>,
}

impl LatticeConfig {
    fn cyl(n_rho: usize, rho_max: f64, n_z: usize, z_extent: f64) -> Self {
        LatticeConfig {
            counts: vec![n_rho, n_z],
            extents_um: vec![rho_max, z_extent],
        }
    }

    pub fn spec(&self) -> Result<GridSpec> {
        let um = units::meters_from_um;
        let s = match (self.counts.as_slice(), self.extents_um.as_slice()) {
            (&[nr, nz], &[r, z]) => GridSpec::cylindrical(nr, um(r), nz, um(z)),
            (&[nx, ny, nz], &[x, y, z]) => GridSpec::cartesian([nx, ny, nz], [um(x), um(y), um(z)]),
            _ => {
                return Err(Error::Config(
                    "a lattice needs 2 (cylindrical) or 3 (cartesian) counts and as many extents".into(),
                ))
            }
        };
        s.validate()?;
        Ok(s)
    }
}

/// Lattice that replaces the current one at `t_ms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub t_ms: f64,
    pub counts: Vec<usize>,
    pub extents_um: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsorberConfig {
    pub enabled: bool,
    /// Layers start at this fraction of each half-extent.
    pub onset_fraction: f64,
    pub strength_hz: f64,
    pub exponent: f64,
    /// Radial and axial distance (μm) from the center where the m_F = +1
    /// layer starts on the initial lattice. Atoms in m_F = +1 are expelled
    /// quickly and alias on the lattice unless removed close to the cloud.
    pub plus_onset_um: Option<[f64; 2]>,
    pub plus_exponent: f64,
}

impl Default for AbsorberConfig {
    fn default() -> Self {
        AbsorberConfig {
            enabled: true,
            onset_fraction: 0.15,
            strength_hz: dynamics::DEFAULT_ABSORBER_STRENGTH_HZ,
            exponent: 4.0,
            plus_onset_um: None,
            plus_exponent: 2.0,
        }
    }
}

impl AbsorberConfig {
    fn far(&self) -> AbsorbingLayer {
        AbsorbingLayer {
            onset_fraction: [self.onset_fraction; 3],
            strength: units::joule_from_hz(self.strength_hz),
            exponent: self.exponent,
        }
    }

    fn layers(&self, lattice: &GridSpec, initial: bool) -> Result<[Option<AbsorbingLayer>; 3]> {
        if !self.enabled {
            return Ok([None, None, None]);
        }
        let far = self.far();
        let plus = match (self.plus_onset_um, initial) {
            (Some([r, z]), true) => {
                let half = match *lattice {
                    GridSpec::Cylindrical { rho_max, z_extent, .. } => [rho_max, 0.0, z_extent / 2.0],
                    GridSpec::Cartesian { extents, .. } => extents.map(|e| e / 2.0),
                };
                let dist = if lattice.is_cylindrical() { [r, 0.0, z] } else { [r, r, z] };
                let mut onset = [0.0; 3];
                for a in 0..3 {
                    if half[a] > 0.0 {
                        onset[a] = 1.0 - units::meters_from_um(dist[a]) / half[a];
                    }
                }
                let layer = AbsorbingLayer {
                    onset_fraction: onset.map(|f| f.clamp(0.0, 1.0)),
                    strength: far.strength,
                    exponent: self.plus_exponent,
                };
                layer.validate()?;
                layer
            }
            _ => far.clone(),
        };
        Ok([Some(far.clone()), Some(far), Some(plus)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub absorbers: AbsorberConfig,
}

impl GridConfig {
    pub fn preset(p: GridPreset) -> Self {
        let desk_abs = AbsorberConfig {
            plus_onset_um: Some([28.0, 56.0]),
            ..Default::default()
        };
        let stage = |t_ms: f64, l: LatticeConfig| StageConfig {
            t_ms,
            counts: l.counts,
            extents_um: l.extents_um,
        };
        match p {
            GridPreset::Desk => GridConfig {
                lattice: LatticeConfig::cyl(128, 60.0, 512, 240.0),
                stages: vec![stage(95.0, LatticeConfig::cyl(256, 120.0, 1024, 320.0))],
                absorbers: desk_abs,
            },
            GridPreset::Fine => GridConfig {
                lattice: LatticeConfig::cyl(256, 60.0, 1024, 240.0),
                stages: vec![stage(95.0, LatticeConfig::cyl(512, 120.0, 2048, 320.0))],
                absorbers: desk_abs,
            },
            GridPreset::Full3d => GridConfig {
                lattice: LatticeConfig {
                    counts: vec![128, 128, 256],
                    extents_um: vec![60.0, 60.0, 120.0],
                },
                stages: vec![],
                absorbers: AbsorberConfig {
                    plus_onset_um: Some([20.0, 40.0]),
                    ..Default::default()
                },
            },
            GridPreset::Release => GridConfig {
                lattice: LatticeConfig::cyl(64, 40.0, 256, 160.0),
                stages: vec![
                    stage(5.0, LatticeConfig::cyl(128, 80.0, 256, 160.0)),
                    stage(20.0, LatticeConfig::cyl(256, 160.0, 512, 320.0)),
                    stage(50.0, LatticeConfig::cyl(512, 320.0, 1024, 640.0)),
                ],
                absorbers: AbsorberConfig {
                    enabled: false,
                    ..Default::default()
                },
            },
        }
    }
}

/// A preset name or an explicit layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridChoice {
    Preset(GridPreset),
    Custom(GridConfig),
}

impl GridChoice {
    pub fn expand(&self) -> GridConfig {
        match self {
            GridChoice::Preset(p) => GridConfig::preset(*p),
            GridChoice::Custom(c) => c.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagatorSettings {
    pub method: Method,
    pub max_phase: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_step_ms: f64,
    pub min_step_ms: f64,
    pub sample_interval_ms: f64,
    /// Largest expected speed for the resolution check, μm/s.
    pub nyquist_velocity_um_s: Option<f64>,
    pub nyquist_factor: f64,
}

impl Default for PropagatorSettings {
    fn default() -> Self {
        let d = PropagatorConfig::default();
        PropagatorSettings {
            method: d.method,
            max_phase: 0.1,
            rtol: d.rtol,
            atol: d.atol,
            max_step_ms: units::ms_from_seconds(d.max_step),
            min_step_ms: units::ms_from_seconds(d.min_step),
            sample_interval_ms: units::ms_from_seconds(d.sample_interval),
            nyquist_velocity_um_s: None,
            nyquist_factor: d.nyquist_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapshotSettings {
    pub interval_ms: Option<f64>,
    /// Write the final state of every component.
    pub write_final: bool,
    pub precision: Precision,
}

impl Default for SnapshotSettings {
    fn default() -> Self {
        SnapshotSettings {
            interval_ms: None,
            write_final: true,
            precision: Precision::Complex64,
        }
    }
}

/// Everything needed to execute one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// "rb87" or a path to a species file.
    pub species: String,
    /// "model" or a path to a sequence file.
    pub sequence: String,
    /// Replace the sequence by a release from its trap without rf.
    pub sudden_release: bool,
    pub release_ms: f64,
    pub n_atoms: f64,
    /// Replaces the Rabi frequency wherever the drive is on.
    pub rabi_hz: Option<f64>,
    /// Constant offset of the trap-bottom field, mG.
    pub delta_b_mg: f64,
    /// Keep the second-order Zeeman potential of m_F = 0.
    pub untrapped_potential: bool,
    pub detuning_phase: Option<DetuningPhase>,
    /// Defaults to the desk layout, or the release layout for releases.
    pub grid: Option<GridChoice>,
    pub propagator: PropagatorSettings,
    pub ground_state: GroundStateConfig,
    pub analysis: AnalysisOptions,
    /// m_F of the analysed component; defaults to 0, or −1 for releases.
    pub analysis_component: Option<i32>,
    pub snapshots: SnapshotSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            species: "rb87".into(),
            sequence: "model".into(),
            sudden_release: false,
            release_ms: 140.0,
            n_atoms: 1e5,
            rabi_hz: None,
            delta_b_mg: 0.0,
            untrapped_potential: true,
            detuning_phase: None,
            grid: None,
            propagator: PropagatorSettings::default(),
            ground_state: GroundStateConfig::default(),
            analysis: AnalysisOptions::default(),
            analysis_component: None,
            snapshots: SnapshotSettings::default(),
        }
    }
}

/// A run in SI units, ready to execute.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub species: SpeciesConstants,
    /// Sequence as loaded, before any override.
    pub base_schedule: FieldSchedule,
    /// Schedule the state is propagated with.
    pub schedule: FieldSchedule,
    /// Schedule whose t = 0 potential defines the initial ground state.
    pub trap_schedule: FieldSchedule,
    pub n_atoms: f64,
    pub grid: GridSpec,
    pub propagator: PropagatorConfig,
    pub ground_state: GroundStateConfig,
    pub analysis: AnalysisOptions,
    pub component: HyperfineLevel,
    pub snapshots: SnapshotSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml_str(&text, path)?;
        // Relative file references are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut c.species, &mut c.sequence] {
            if f != "rb87" && f != "model" && Path::new(f.as_str()).is_relative() {
                *f = base.join(&*f).to_string_lossy().into_owned();
            }
        }
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn grid_config(&self) -> GridConfig {
        match &self.grid {
            Some(g) => g.expand(),
            None if self.sudden_release => GridConfig::preset(GridPreset::Release),
            None => GridConfig::preset(GridPreset::Desk),
        }
    }

    pub fn load_species(&self) -> Result<SpeciesConstants> {
        match self.species.as_str() {
            "rb87" => Ok(SpeciesConstants::rb87()),
            p => SpeciesConstants::load(Path::new(p)),
        }
    }

    pub fn load_sequence(&self, species: SpeciesConstants) -> Result<FieldSchedule> {
        match self.sequence.as_str() {
            "model" => Ok(fieldmodel::model_sequence_preset(species)),
            p => fieldmodel::load_sequence(Path::new(p), species),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.n_atoms.is_finite() && self.n_atoms > 0.0) {
            return bad(format!("n_atoms = {} must be positive", self.n_atoms));
        }
        if self.rabi_hz.is_some_and(|r| !(r.is_finite() && r >= 0.0)) {
            return bad("rabi_hz must be non-negative".into());
        }
        if !self.delta_b_mg.is_finite() {
            return bad("delta_b_mg must be finite".into());
        }
        if !(self.release_ms.is_finite() && self.release_ms > 0.0) {
            return bad("release_ms must be positive".into());
        }
        if self.analysis_component.is_some_and(|m| HyperfineLevel::from_m_f(m).is_none()) {
            return bad("analysis_component must be -1, 0 or 1".into());
        }
        if !(self.analysis.threshold > 0.0 && self.analysis.threshold < 1.0) {
            return bad("analysis threshold must lie in (0, 1)".into());
        }
        if self.snapshots.interval_ms.is_some_and(|d| !(d > 0.0)) {
            return bad("snapshot interval must be positive".into());
        }
        Ok(())
    }

    /// Converts to SI and applies all overrides.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.validate()?;
        let species = self.load_species()?;
        let base = self.load_sequence(species.clone())?;
        let mut s = base
            .clone()
            .with_delta_b(units::tesla_from_milligauss(self.delta_b_mg))
            .with_untrapped_potential(self.untrapped_potential);
        if let Some(r) = self.rabi_hz {
            s = s.with_rabi(units::angular_from_hz(r));
        }
        if let Some(p) = self.detuning_phase {
            s.detuning_phase = p;
        }
        let lowest = s
            .breakpoints()
            .into_iter()
            .chain([0.0, s.t_max()])
            .map(|t| s.state(t).b_bot)
            .fold(f64::INFINITY, f64::min);
        if !(lowest + s.delta_b > 0.0) {
            return Err(Error::Config(format!(
                "offset field {:.4} G plus delta_b must stay positive",
                units::gauss_from_tesla(lowest)
            )));
        }
        let trap_schedule = if s.state(0.0).trap_scale > 0.0 {
            s.clone()
        } else {
            fieldmodel::static_trap(species.clone(), s.trap.clone(), 1e-3)?.with_delta_b(s.delta_b)
        };
        let schedule = if self.sudden_release {
            fieldmodel::sudden_release_preset(species.clone(), s.trap.clone(), units::seconds_from_ms(self.release_ms))?
                .with_delta_b(s.delta_b)
                .with_untrapped_potential(self.untrapped_potential)
        } else {
            s
        };
        let gc = self.grid_config();
        let grid = gc.lattice.spec()?;
        let mut stages = Vec::with_capacity(gc.stages.len());
        for st in &gc.stages {
            let spec = LatticeConfig {
                counts: st.counts.clone(),
                extents_um: st.extents_um.clone(),
            }
            .spec()?;
            if spec.is_cylindrical() != grid.is_cylindrical() {
                return Err(Error::Config("grid stages must keep the geometry of the initial lattice".into()));
            }
            let absorbers = Some(gc.absorbers.layers(&spec, false)?);
            stages.push(GridStage {
                t_start: units::seconds_from_ms(st.t_ms),
                grid: spec,
                absorbers,
            });
        }
        if grid.is_cylindrical() && !schedule.is_axially_symmetric() {
            return Err(Error::Config("the reduced (ρ, z) lattice needs an axially symmetric trap".into()));
        }
        let p = &self.propagator;
        let ms = units::seconds_from_ms;
        let propagator = PropagatorConfig {
            method: p.method,
            rtol: p.rtol,
            atol: p.atol,
            max_step: ms(p.max_step_ms),
            min_step: ms(p.min_step_ms),
            max_phase: p.max_phase,
            sample_interval: ms(p.sample_interval_ms),
            snapshot_interval: self.snapshots.interval_ms.map(ms),
            snapshot_precision: self.snapshots.precision,
            absorbers: gc.absorbers.layers(&grid, true)?,
            stages,
            nyquist_velocity: p.nyquist_velocity_um_s.map(units::mps_from_um_per_s),
            nyquist_factor: p.nyquist_factor,
        };
        propagator.validate()?;
        let component = match self.analysis_component {
            Some(m) => HyperfineLevel::from_m_f(m).expect("validated"),
            None if self.sudden_release => HyperfineLevel::Trapped,
            None => HyperfineLevel::Untrapped,
        };
        Ok(ResolvedRun {
            species,
            base_schedule: base,
            schedule,
            trap_schedule,
            n_atoms: self.n_atoms,
            grid,
            propagator,
            ground_state: self.ground_state.clone(),
            analysis: self.analysis.clone(),
            component,
            snapshots: self.snapshots.clone(),
        })
    }

    /// Self-contained copy for a run directory: presets expanded and
    /// external files replaced by the copies written next to it.
    pub fn manifest(&self) -> RunConfig {
        let mut m = self.clone();
        m.grid = Some(GridChoice::Custom(self.grid_config()));
        m.species = SPECIES_FILE.into();
        m.sequence = SEQUENCE_FILE.into();
        m
    }
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SPECIES_FILE: &str = "species.toml";
pub const SEQUENCE_FILE: &str = "sequence.toml";

/// Factor by which the lattice must resolve the release momentum √(2Mμ).
pub const CHECK_NYQUIST_FACTOR: f64 = 2.0;
/// Smallest acceptable ratio of the rf frequency to the largest detuning.
pub const MIN_RF_TO_DETUNING: f64 = 1e3;

/// Preflight report computed without solving anything.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    /// Thomas–Fermi estimate, Hz.
    pub mu_tf_hz: f64,
    pub sharp_resonance: FeasibilityCheck,
    pub state_selectivity: FeasibilityCheck,
    pub anti_trap_ratio: f64,
    /// ω_0 over the largest |Δ| while the drive is on.
    pub rf_to_detuning: f64,
    /// Thomas–Fermi radii (ρ or x, y, z), μm.
    pub tf_radii_um: [f64; 3],
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let mark = |p: bool| if p { "ok" } else { "FAIL" };
        let mut s = format!(
            "mu_TF/h = {:.1} Hz\nsharp resonance: {:.3e} vs {:.3e} (ratio {:.2}) {}\nstate selectivity: {:.3} G^2 vs {:.3} G^2 (ratio {:.2}) {}\nanti-trap ratio: {:.3e}\nomega_0/|Delta|max: {:.3e}\nTF radii: ({:.1}, {:.1}, {:.1}) um\n",
            self.mu_tf_hz,
            self.sharp_resonance.lhs,
            self.sharp_resonance.rhs,
            self.sharp_resonance.ratio,
            mark(self.sharp_resonance.pass),
            self.state_selectivity.lhs,
            self.state_selectivity.rhs,
            self.state_selectivity.ratio,
            mark(self.state_selectivity.pass),
            self.anti_trap_ratio,
            self.rf_to_detuning,
            self.tf_radii_um[0],
            self.tf_radii_um[1],
            self.tf_radii_um[2],
        );
        for f in &self.failures {
            s.push_str(&format!("FAIL: {f}\n"));
        }
        s
    }
}

impl ResolvedRun {
    pub fn check(&self) -> Result<CheckReport> {
        let sp = &self.species;
        let trap = &self.trap_schedule.trap;
        let mu = groundstate::thomas_fermi_mu(self.n_atoms, trap, sp);
        let b_bot = trap.b_bot + self.trap_schedule.delta_b;
        let rf = self.schedule.rf_drive();
        let sharp = zeeman::sharp_resonance_check(sp, mu, rf.rabi.max_value().max(0.0), zeeman::SHARP_RESONANCE_THRESHOLD);
        let select = zeeman::state_selectivity_check(sp, b_bot, mu, zeeman::STATE_SELECTIVITY_THRESHOLD);
        let anti = zeeman::anti_trap_ratio(sp, b_bot)?;
        let max_det = self.schedule.max_detuning_during_drive();
        let rf_to_detuning = if max_det > 0.0 { rf.omega0 / max_det } else { f64::INFINITY };
        let radii = trap.omega.map(|w| if w > 0.0 { (2.0 * mu / (sp.mass * w * w)).sqrt() } else { f64::INFINITY });
        let mut failures = vec![];
        if rf.window.is_some() {
            if !sharp.pass {
                failures.push(format!("sharp-resonance ratio {:.2} below {}", sharp.ratio, sharp.threshold));
            }
            if !select.pass {
                failures.push(format!("state-selectivity ratio {:.2} below {}", select.ratio, select.threshold));
            }
            if rf_to_detuning < MIN_RF_TO_DETUNING {
                failures.push(format!("rf frequency only {rf_to_detuning:.1} times the detuning"));
            }
        }
        let grid = Grid::new(self.grid.clone())?;
        let v = dynamics::release_velocity(mu, sp.mass);
        if let Err(e) = check_nyquist(&grid, v, sp.mass, sp.hbar, CHECK_NYQUIST_FACTOR) {
            failures.push(e.to_string());
        }
        let half = grid.half_extents();
        let shape = grid.shape();
        let cloud = if grid.is_cylindrical() {
            [radii[0].max(radii[1]), 0.0, radii[2]]
        } else {
            radii
        };
        for a in 0..3 {
            if shape[a] > 1 && !(cloud[a] < half[a]) {
                failures.push(format!(
                    "axis {a}: Thomas-Fermi radius {:.1} um exceeds the lattice half-extent {:.1} um",
                    cloud[a] * 1e6,
                    half[a] * 1e6
                ));
            }
        }
        Ok(CheckReport {
            mu_tf_hz: units::hz_from_joule(mu),
            sharp_resonance: sharp,
            state_selectivity: select,
            anti_trap_ratio: anti,
            rf_to_detuning,
            tf_radii_um: radii.map(units::um_from_meters),
            failures,
        })
    }

    pub fn solve_ground_state(&self) -> Result<GroundStateResult> {
        let grid = Grid::new(self.grid.clone())?;
        groundstate::solve_ground_state(&self.trap_schedule, self.n_atoms, &grid, &self.ground_state)
    }

    /// Propagates the ground state and analyses the final state.
    pub fn propagate(&self, gs: &GroundStateResult, snapshot_dir: Option<&Path>) -> Result<RunOutcome> {
        let grid = Arc::new(Grid::new(self.grid.clone())?);
        if gs.psi.len() != grid.len() {
            return Err(Error::Precondition("ground state does not match the lattice".into()));
        }
        let state = SpinorState::single(grid, HyperfineLevel::Trapped, gs.psi.clone())?;
        let dir = if self.propagator.snapshot_interval.is_some() { snapshot_dir } else { None };
        let traj = dynamics::propagate(state, &self.schedule, &self.propagator, dir)?;
        let fs = &traj.final_state;
        let report = analysis::metrics(&fs.grid, &fs.fields, self.component.index(), self.n_atoms, &self.species, &self.analysis)?;
        report.check_consistency(&self.species)?;
        Ok(RunOutcome {
            ground_state: GroundStateSummary::from(gs),
            samples: traj.samples,
            stats: traj.stats,
            report,
            final_state: traj.final_state,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundStateSummary {
    pub mu_hz: f64,
    pub residual_hz: f64,
    pub iterations: usize,
    pub converged: bool,
    pub virial_residual: f64,
}

impl From<&GroundStateResult> for GroundStateSummary {
    fn from(g: &GroundStateResult) -> Self {
        GroundStateSummary {
            mu_hz: units::hz_from_joule(g.mu),
            residual_hz: units::hz_from_joule(g.residual),
            iterations: g.iterations,
            converged: g.converged,
            virial_residual: g.energy.virial_residual(),
        }
    }
}

pub struct RunOutcome {
    pub ground_state: GroundStateSummary,
    pub samples: Vec<NormSample>,
    pub stats: StepStats,
    pub report: AnalysisReport,
    pub final_state: SpinorState,
}

/// Contents of report.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub check: CheckReport,
    pub ground_state: GroundStateSummary,
    pub stats: StepStats,
    /// Removed by absorbers and lost at regrids, per component.
    pub absorbed: [f64; 3],
    pub discarded: [f64; 3],
    pub analysis: AnalysisReport,
    pub wall_seconds: f64,
}

/// Writes manifest.toml plus the species and sequence it refers to.
pub fn write_manifest(dir: &Path, config: &RunConfig, run: &ResolvedRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    let header = format!("# atomlaser {} run manifest\n", env!("CARGO_PKG_VERSION"));
    write(MANIFEST_FILE, header + &config.manifest().to_toml_string())?;
    write(SPECIES_FILE, run.species.to_toml_string())?;
    write(SEQUENCE_FILE, fieldmodel::sequence_to_toml(&run.base_schedule))
}

/// Full pipeline with artifacts under `dir`.
pub fn execute(config: &RunConfig, dir: &Path, force: bool) -> Result<(RunReport, RunOutcome)> {
    let clock = Instant::now();
    let run = config.resolve()?;
    write_manifest(dir, config, &run)?;
    let check = run.check()?;
    write_json(&dir.join("check.json"), &check)?;
    log::info!("preflight:\n{}", check.summary());
    if !check.passed() {
        if force {
            log::warn!("preflight failed; continuing because of --force");
        } else {
            return Err(Error::Check(check.failures.join("; ")));
        }
    }
    let gs = run.solve_ground_state()?;
    log::info!("ground state: mu/h = {:.3} Hz after {} steps", units::hz_from_joule(gs.mu), gs.iterations);
    let snap_dir = dir.join("snapshots");
    let outcome = run.propagate(&gs, Some(&snap_dir))?;
    write_artifacts(dir, &run, &outcome)?;
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
    write_json(&dir.join("report.json"), &report)?;
    Ok((report, outcome))
}

/// Particle numbers, final snapshots and the v_y = 0 velocity plane.
pub fn write_artifacts(dir: &Path, run: &ResolvedRun, outcome: &RunOutcome) -> Result<()> {
    dynamics::write_particle_csv(&dir.join("particle_numbers.csv"), &outcome.samples)?;
    let fs = &outcome.final_state;
    if run.snapshots.write_final {
        let snap = dir.join("snapshots");
        fs::create_dir_all(&snap).map_err(|e| Error::io(&snap, e))?;
        for level in HyperfineLevel::ALL {
            let p = snap.join(format!("final_{}.bin", level.label()));
            snapshot::write_snapshot(&p, &fs.grid, fs.time, level.label(), run.snapshots.precision, &fs.fields[level.index()])?;
        }
    }
    let field = &fs.fields[run.component.index()];
    if fs.grid.norm(field) > 0.0 {
        let dist = analysis::restricted_momentum_density(&fs.grid, field, &outcome.report.region, &run.species)?;
        if let Ok((u, plane)) = analysis::fidelity_plane(&fs.grid, &dist) {
            let um: Vec<f64> = u.iter().map(|v| units::um_per_s_from_mps(*v)).collect();
            let density: Vec<f64> = plane.iter().map(|a| a * a).collect();
            snapshot::write_matrix_csv(&dir.join("velocity_plane.csv"), &um, &um, &density)?;
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Default output directory of a run started at `now`.
pub fn default_output_dir(prefix: &str) -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from(format!("runs/{prefix}-{secs}"))
}
