//! Real-time propagation of the three coupled components in the rotating
//! frame, with absorbing layers, grid stages and norm bookkeeping.
//!
//! Fields are stored in the frame of the rotating-wave equations, where the
//! ladder couplings carry the phase e^{∓iφ(t)} with φ = ∫Δ_rf dt. The
//! split-step integrator works internally in the frame χ_m = e^{−imφ}ψ̃_m,
//! in which the couplings are static and the detuning moves to the diagonal.

pub mod local;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldmodel::{self, FieldSchedule};
use crate::grid::regrid::{unresolved_fraction, Regridder};
use crate::grid::snapshot::{write_snapshot, Precision};
use crate::grid::{absorber_potential, check_nyquist, AbsorbingLayer, Grid, GridSpec, C64};
use crate::units::PLANCK;
use crate::zeeman::HyperfineLevel;

/// Peak absorber strength W₀/h used when a run does not set one.
pub const DEFAULT_ABSORBER_STRENGTH_HZ: f64 = 2000.0;

const CHUNK: usize = 4096;
const TIME_EPS: f64 = 1e-12;

pub type Fields = [Vec<C64>; 3];

/// Three component fields, ordered (m_F = −1, 0, +1).
#[derive(Clone, Debug)]
pub struct SpinorState {
    pub grid: Arc<Grid>,
    pub fields: Fields,
    /// Simulation time in s.
    pub time: f64,
    /// Accumulated detuning phase φ(t) in rad.
    pub phase: f64,
    /// Norm removed by the absorbing layers, per component.
    pub absorbed: [f64; 3],
    /// Norm lost when moving to a smaller or coarser lattice.
    pub discarded: [f64; 3],
}

impl SpinorState {
    pub fn new(grid: Arc<Grid>, fields: Fields) -> Result<Self> {
        if fields.iter().any(|f| f.len() != grid.len()) {
            return Err(Error::Precondition("component fields do not match the grid".into()));
        }
        Ok(SpinorState {
            grid,
            fields,
            time: 0.0,
            phase: 0.0,
            absorbed: [0.0; 3],
            discarded: [0.0; 3],
        })
    }

    /// All atoms in one sublevel.
    pub fn single(grid: Arc<Grid>, level: HyperfineLevel, psi: Vec<C64>) -> Result<Self> {
        let mut fields: Fields = [grid.zeros(), grid.zeros(), grid.zeros()];
        fields[level.index()] = psi;
        Self::new(grid, fields)
    }

    /// Norm on the lattice per component.
    pub fn norms(&self) -> [f64; 3] {
        [0, 1, 2].map(|m| self.grid.norm(&self.fields[m]))
    }

    /// Norm on the lattice plus everything removed, per component.
    pub fn totals(&self) -> [f64; 3] {
        let n = self.norms();
        [0, 1, 2].map(|m| n[m] + self.absorbed[m] + self.discarded[m])
    }

    pub fn total_norm(&self) -> f64 {
        self.norms().iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SplitStep,
    DormandPrince,
}

/// Switch to a new lattice at `t_start`, optionally with new absorbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridStage {
    pub t_start: f64,
    pub grid: GridSpec,
    #[serde(default)]
    pub absorbers: Option<[Option<AbsorbingLayer>; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatorConfig {
    pub method: Method,
    /// Error tolerances of the embedded Runge–Kutta mode; the absolute one is
    /// relative to √N of the initial state.
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub min_step: f64,
    /// Split-step phase budget per step, in rad, against the fastest local rate.
    pub max_phase: f64,
    /// Particle numbers are recorded at this interval (s).
    pub sample_interval: f64,
    pub snapshot_interval: Option<f64>,
    pub snapshot_precision: Precision,
    /// Per-component layers, (m_F = −1, 0, +1).
    pub absorbers: [Option<AbsorbingLayer>; 3],
    pub stages: Vec<GridStage>,
    /// Expected largest atomic speed (m/s) for the resolution check.
    pub nyquist_velocity: Option<f64>,
    pub nyquist_factor: f64,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        let layer = AbsorbingLayer::uniform(0.15, PLANCK * DEFAULT_ABSORBER_STRENGTH_HZ);
        PropagatorConfig {
            method: Method::SplitStep,
            rtol: 1e-7,
            atol: 1e-9,
            max_step: 1e-4,
            min_step: 1e-10,
            max_phase: 0.05,
            sample_interval: 1e-3,
            snapshot_interval: None,
            snapshot_precision: Precision::Complex64,
            absorbers: [Some(layer.clone()), Some(layer.clone()), Some(layer)],
            stages: vec![],
            nyquist_velocity: None,
            nyquist_factor: 4.0,
        }
    }
}

impl PropagatorConfig {
    pub fn without_absorbers(mut self) -> Self {
        self.absorbers = [None, None, None];
        for s in &mut self.stages {
            s.absorbers = Some([None, None, None]);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("propagator: {m}")));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.min_step > 0.0 && self.max_step >= self.min_step) {
            return bad("step bounds must satisfy 0 < min_step <= max_step");
        }
        if !(self.max_phase > 0.0) {
            return bad("max_phase must be positive");
        }
        if !(self.sample_interval > 0.0 && self.sample_interval <= 1e-3 + TIME_EPS) {
            return bad("sample_interval must lie in (0, 1 ms]");
        }
        if self.snapshot_interval.is_some_and(|s| !(s > 0.0)) {
            return bad("snapshot_interval must be positive");
        }
        for layer in self.absorbers.iter().flatten() {
            layer.validate()?;
        }
        for s in &self.stages {
            s.grid.validate()?;
            for layer in s.absorbers.iter().flatten().flatten() {
                layer.validate()?;
            }
        }
        if self.stages.windows(2).any(|w| w[1].t_start <= w[0].t_start) {
            return bad("grid stages must be in increasing time order");
        }
        Ok(())
    }
}

/// Component particle numbers at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    pub t: f64,
    pub on_grid: [f64; 3],
    /// Absorbed plus discarded norm.
    pub removed: [f64; 3],
}

impl NormSample {
    pub fn totals(&self) -> [f64; 3] {
        [0, 1, 2].map(|m| self.on_grid[m] + self.removed[m])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub min_step: f64,
    pub max_step: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct Trajectory {
    pub samples: Vec<NormSample>,
    pub snapshots: Vec<PathBuf>,
    pub stats: StepStats,
    pub final_state: SpinorState,
}

/// Grid-bound buffers reused across steps.
struct Workspace {
    grid: Arc<Grid>,
    /// W/ħ per component (1/s).
    absorb: [Option<Vec<f64>>; 3],
    pot_key: Option<[f64; 7]>,
    /// V_trap/ħ per component (rad/s).
    pot: [Vec<f64>; 3],
    kin_step: f64,
    kin: Vec<C64>,
    /// ħk²/2M/ħ (rad/s).
    kin_rate: Vec<f64>,
    /// g/ħ (rad/s·m³).
    g: [[f64; 3]; 3],
}

impl Workspace {
    fn new(grid: Arc<Grid>, schedule: &FieldSchedule, layers: &[Option<AbsorbingLayer>; 3]) -> Self {
        let s = &schedule.species;
        let absorb = [0, 1, 2].map(|m| {
            layers[m]
                .as_ref()
                .filter(|l| l.strength > 0.0)
                .map(|l| absorber_potential(l, &grid).into_iter().map(|w| w / s.hbar).collect())
        });
        let kin_rate = grid.kinetic_energies(s.mass, s.hbar).into_iter().map(|e| e / s.hbar).collect();
        let g = s.couplings().map(|row| row.map(|x| x / s.hbar));
        let n = grid.len();
        Workspace {
            grid,
            absorb,
            pot_key: None,
            pot: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            kin_step: f64::NAN,
            kin: vec![],
            kin_rate,
            g,
        }
    }

    fn update_potential(&mut self, schedule: &FieldSchedule, t: f64) {
        let st = schedule.state(t);
        let flag = if schedule.untrapped_potential { 1.0 } else { 0.0 };
        let key = [st.b_bot, st.curvature[0], st.curvature[1], st.curvature[2], st.gradient, schedule.delta_b, flag];
        if self.pot_key == Some(key) {
            return;
        }
        let hbar = schedule.species.hbar;
        for level in HyperfineLevel::ALL {
            let out = &mut self.pot[level.index()];
            fieldmodel::fill_potential(schedule, level, &self.grid, t, out);
            out.iter_mut().for_each(|v| *v /= hbar);
        }
        self.pot_key = Some(key);
    }

    fn kinetic(&mut self, schedule: &FieldSchedule, h: f64) {
        if self.kin_step != h {
            let s = &schedule.species;
            self.kin = self.grid.kinetic_propagator(s.mass, s.hbar, h, false);
            self.kin_step = h;
        }
    }
}

fn chunks3(f: &mut Fields) -> impl IndexedParallelIterator<Item = (usize, (&mut [C64], &mut [C64], &mut [C64]))> {
    let [a, b, c] = f;
    a.par_chunks_mut(CHUNK)
        .zip(b.par_chunks_mut(CHUNK))
        .zip(c.par_chunks_mut(CHUNK))
        .map(|((a, b), c)| (a, b, c))
        .enumerate()
}

/// Diagonal sub-flow over τ: interactions (frozen density, exact), absorbers,
/// optional potential + frame offsets, and constant per-component phases.
/// Returns the absorbed norm per component.
#[allow(clippy::too_many_arguments)]
fn diagonal_pass(ws: &Workspace, fields: &mut Fields, tau: f64, with_potential: bool, offsets: [f64; 3], pre: [C64; 3]) -> [f64; 3] {
    let dv = ws.grid.volume_elements();
    let g = ws.g;
    let pot = &ws.pot;
    let absorb = &ws.absorb;
    chunks3(fields)
        .map(|(ci, (a, b, c))| {
            let base = ci * CHUNK;
            let mut lost = [0.0; 3];
            for j in 0..a.len() {
                let i = base + j;
                let n = [a[j].norm_sqr(), b[j].norm_sqr(), c[j].norm_sqr()];
                let comps: [&mut C64; 3] = [&mut a[j], &mut b[j], &mut c[j]];
                for (m, z) in comps.into_iter().enumerate() {
                    let mut rate = g[m][0] * n[0] + g[m][1] * n[1] + g[m][2] * n[2];
                    if with_potential {
                        rate += pot[m][i] + offsets[m];
                    }
                    let mut f = C64::from_polar(1.0, -rate * tau) * pre[m];
                    if let Some(w) = &absorb[m] {
                        let d = (-w[i] * tau).exp();
                        lost[m] += n[m] * (1.0 - d * d) * dv[i];
                        f *= d;
                    }
                    *z *= f;
                }
            }
            lost
        })
        .reduce(|| [0.0; 3], |x, y| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
}

/// Potential plus coupling sub-flow over τ, exact per node.
fn coupling_pass(ws: &Workspace, fields: &mut Fields, tau: f64, offsets: [f64; 3], c: f64) {
    let pot = &ws.pot;
    chunks3(fields).for_each(|(ci, (a, b, cc))| {
        let base = ci * CHUNK;
        for j in 0..a.len() {
            let i = base + j;
            let d = [pot[0][i] + offsets[0], pot[1][i] + offsets[1], pot[2][i] + offsets[2]];
            let mut v = [a[j], b[j], cc[j]];
            local::apply(d, c, tau, &mut v);
            a[j] = v[0];
            b[j] = v[1];
            cc[j] = v[2];
        }
    });
}

fn add3(acc: &mut [f64; 3], x: [f64; 3]) {
    for m in 0..3 {
        acc[m] += x[m];
    }
}

/// One Strang step of length h from state.time.
fn split_step(ws: &mut Workspace, state: &mut SpinorState, schedule: &FieldSchedule, h: f64) {
    let t0 = state.time;
    let tm = t0 + 0.5 * h;
    let t1 = t0 + h;
    ws.update_potential(schedule, tm);
    let st = schedule.state(tm);
    let hbar = schedule.species.hbar;
    let bottom = schedule.bottom_energies(tm).map(|e| e / hbar);
    let offsets = [bottom[0] - st.detuning, bottom[1], bottom[2] + st.detuning];
    let phi0 = state.phase;
    let phi1 = fieldmodel::accumulated_detuning_phase(schedule, t1);
    let one = C64::new(1.0, 0.0);
    // χ_m = e^{−imφ}ψ̃_m on entry, inverse on exit.
    let enter = [C64::from_polar(1.0, phi0), one, C64::from_polar(1.0, -phi0)];
    let leave = [C64::from_polar(1.0, -phi1), one, C64::from_polar(1.0, phi1)];
    let mut lost = [0.0; 3];
    ws.kinetic(schedule, h);
    let kinetic = |ws: &Workspace, fields: &mut Fields| {
        fields.par_iter_mut().for_each(|f| ws.grid.apply_spectral(f, &ws.kin));
    };
    if st.rabi == 0.0 {
        add3(&mut lost, diagonal_pass(ws, &mut state.fields, 0.5 * h, true, offsets, enter));
        kinetic(ws, &mut state.fields);
        add3(&mut lost, diagonal_pass(ws, &mut state.fields, 0.5 * h, true, offsets, leave));
    } else {
        let c = 0.5 * st.rabi;
        add3(&mut lost, diagonal_pass(ws, &mut state.fields, 0.25 * h, false, offsets, enter));
        coupling_pass(ws, &mut state.fields, 0.5 * h, offsets, c);
        add3(&mut lost, diagonal_pass(ws, &mut state.fields, 0.25 * h, false, offsets, [one; 3]));
        kinetic(ws, &mut state.fields);
        add3(&mut lost, diagonal_pass(ws, &mut state.fields, 0.25 * h, false, offsets, [one; 3]));
        coupling_pass(ws, &mut state.fields, 0.5 * h, offsets, c);
        add3(&mut lost, diagonal_pass(ws, &mut state.fields, 0.25 * h, false, offsets, leave));
    }
    add3(&mut state.absorbed, lost);
    state.time = t1;
    state.phase = phi1;
}

/// Fastest local rate the split step must resolve (rad/s).
fn split_rate(ws: &Workspace, state: &SpinorState, schedule: &FieldSchedule, t: f64) -> f64 {
    let st = schedule.state(t);
    let peak = state
        .fields
        .par_iter()
        .map(|f| f.iter().fold(0.0f64, |a, c| a.max(c.norm_sqr())))
        .collect::<Vec<_>>();
    let interaction = (0..3).map(|m| (0..3).map(|k| ws.g[m][k] * peak[k]).sum::<f64>()).fold(0.0, f64::max);
    let trap = schedule.trap.omega.iter().fold(0.0f64, |a, w| a.max(w * st.trap_scale));
    let mut rate = interaction.max(trap);
    if st.rabi > 0.0 {
        rate = rate.max(st.rabi).max(st.detuning.abs());
    }
    rate
}

/// Time derivative of all components in the rotating frame at time t.
fn rhs_into(ws: &mut Workspace, fields: &Fields, schedule: &FieldSchedule, t: f64, out: &mut Fields) -> [f64; 3] {
    ws.update_potential(schedule, t);
    let hbar = schedule.species.hbar;
    let bottom = schedule.bottom_energies(t).map(|e| e / hbar);
    let half = 0.5 * schedule.rabi(t);
    let phi = fieldmodel::accumulated_detuning_phase(schedule, t);
    let down = C64::from_polar(half, -phi);
    let up = C64::from_polar(half, phi);
    for m in 0..3 {
        out[m].copy_from_slice(&fields[m]);
        ws.grid.apply_spectral_real(&mut out[m], &ws.kin_rate);
    }
    let dv = ws.grid.volume_elements();
    let g = ws.g;
    let pot = &ws.pot;
    let absorb = &ws.absorb;
    let [f0, f1, f2] = fields;
    let mi = C64::new(0.0, -1.0);
    // Returns 2∫(W/ħ)|ψ_m|² dV, the absorption rate per component.
    chunks3(out)
        .map(|(ci, (o0, o1, o2))| {
            let base = ci * CHUNK;
            let mut rate = [0.0; 3];
            for j in 0..o0.len() {
                let i = base + j;
                let p = [f0[i], f1[i], f2[i]];
                let n = [p[0].norm_sqr(), p[1].norm_sqr(), p[2].norm_sqr()];
                let coup = [down * p[1], up * p[0] + down * p[2], up * p[1]];
                let outs: [&mut C64; 3] = [&mut o0[j], &mut o1[j], &mut o2[j]];
                for (m, o) in outs.into_iter().enumerate() {
                    let diag = pot[m][i] + bottom[m] + g[m][0] * n[0] + g[m][1] * n[1] + g[m][2] * n[2];
                    let mut d = mi * (*o + p[m] * diag + coup[m]);
                    if let Some(w) = &absorb[m] {
                        d -= p[m] * w[i];
                        rate[m] += 2.0 * w[i] * n[m] * dv[i];
                    }
                    *o = d;
                }
            }
            rate
        })
        .reduce(|| [0.0; 3], |x, y| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
}

/// Time derivative of the rotating-frame equations for a state at time t,
/// including the absorbing layers in `config`.
pub fn rhs(state: &SpinorState, schedule: &FieldSchedule, config: &PropagatorConfig, t: f64) -> Fields {
    let mut ws = Workspace::new(state.grid.clone(), schedule, &config.absorbers);
    let n = state.grid.len();
    let mut out: Fields = [vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n]];
    rhs_into(&mut ws, &state.fields, schedule, t, &mut out);
    out
}

const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

struct Dopri {
    k: Vec<Fields>,
    tmp: Fields,
    /// Absorption rate at the start of the step (FSAL companion).
    rate0: [f64; 3],
    fresh: bool,
    h: f64,
    scale: f64,
}

impl Dopri {
    fn new(n: usize, h: f64, scale: f64) -> Self {
        let z = || -> Fields { [vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n], vec![C64::new(0.0, 0.0); n]] };
        Dopri {
            k: (0..7).map(|_| z()).collect(),
            tmp: z(),
            rate0: [0.0; 3],
            fresh: true,
            h,
            scale,
        }
    }

    fn combine(out: &mut Fields, y: &Fields, h: f64, coef: &[f64], k: &[Fields]) {
        for m in 0..3 {
            out[m].par_chunks_mut(CHUNK).enumerate().for_each(|(ci, o)| {
                let base = ci * CHUNK;
                for (j, v) in o.iter_mut().enumerate() {
                    let i = base + j;
                    let mut s = y[m][i];
                    for (c, kk) in coef.iter().zip(k) {
                        if *c != 0.0 {
                            s += kk[m][i] * (h * c);
                        }
                    }
                    *v = s;
                }
            });
        }
    }

    /// Attempts one step of length h; on success updates the state and
    /// returns true.
    fn attempt(&mut self, ws: &mut Workspace, state: &mut SpinorState, schedule: &FieldSchedule, h: f64, rtol: f64) -> bool {
        let t = state.time;
        if self.fresh {
            let mut k0 = std::mem::take(&mut self.k[0]);
            self.rate0 = rhs_into(ws, &state.fields, schedule, t, &mut k0);
            self.k[0] = k0;
            self.fresh = false;
        }
        for s in 0..6 {
            let mut tmp = std::mem::take(&mut self.tmp);
            Self::combine(&mut tmp, &state.fields, h, &DP_A[s][..=s], &self.k[..=s]);
            let mut ks = std::mem::take(&mut self.k[s + 1]);
            let r = rhs_into(ws, &tmp, schedule, t + DP_C[s] * h, &mut ks);
            self.k[s + 1] = ks;
            self.tmp = tmp;
            if s == 5 {
                // tmp now holds the 5th-order solution and k[6] its derivative.
                let mut err = [0.0f64; 3];
                let mut nrm = [0.0f64; 3];
                let dv = ws.grid.volume_elements();
                for m in 0..3 {
                    let (e, y) = (0..dv.len())
                        .into_par_iter()
                        .map(|i| {
                            let mut d = C64::new(0.0, 0.0);
                            for (c, kk) in DP_E.iter().zip(&self.k) {
                                if *c != 0.0 {
                                    d += kk[m][i] * *c;
                                }
                            }
                            ((d * h).norm_sqr() * dv[i], self.tmp[m][i].norm_sqr() * dv[i])
                        })
                        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
                    err[m] = e;
                    nrm[m] = y;
                }
                let e = err.iter().sum::<f64>().sqrt();
                let y = nrm.iter().sum::<f64>().sqrt();
                let ratio = e / (self.scale + rtol * y);
                let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
                if !(ratio <= 1.0) {
                    self.h = h * factor.min(0.9);
                    return false;
                }
                for m in 0..3 {
                    state.absorbed[m] += 0.5 * h * (self.rate0[m] + r[m]);
                }
                std::mem::swap(&mut state.fields, &mut self.tmp);
                self.k.swap(0, 6);
                self.rate0 = r;
                state.time = t + h;
                state.phase = fieldmodel::accumulated_detuning_phase(schedule, state.time);
                self.h = h * factor;
                return true;
            }
        }
        unreachable!()
    }
}

/// Sorted event times in (t, t_max]: schedule breakpoints and stage starts.
fn hard_events(schedule: &FieldSchedule, config: &PropagatorConfig, t: f64, t_max: f64) -> Vec<f64> {
    let mut ev: Vec<f64> = schedule
        .breakpoints()
        .into_iter()
        .chain(config.stages.iter().map(|s| s.t_start))
        .filter(|e| *e > t + TIME_EPS && *e < t_max - TIME_EPS)
        .collect();
    ev.push(t_max);
    ev.sort_by(f64::total_cmp);
    ev.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
    ev
}

fn next_multiple(t: f64, dt: f64) -> f64 {
    let k = ((t + TIME_EPS) / dt).floor() + 1.0;
    k * dt
}

fn sample(state: &SpinorState) -> NormSample {
    let removed = [0, 1, 2].map(|m| state.absorbed[m] + state.discarded[m]);
    NormSample {
        t: state.time,
        on_grid: state.norms(),
        removed,
    }
}

fn apply_stage(state: &mut SpinorState, stage: &GridStage) -> Result<()> {
    let new = Arc::new(Grid::new(stage.grid.clone())?);
    let op = Regridder::new(&state.grid, &new)?;
    for m in 0..3 {
        let before = state.grid.norm(&state.fields[m]);
        if before == 0.0 {
            state.fields[m] = new.zeros();
            continue;
        }
        let lost = unresolved_fraction(&state.grid, &state.fields[m], &new);
        if lost > 1e-6 {
            log::warn!(
                "regrid at t = {:.3} ms: {:.2e} of component {} is beyond the new Nyquist limit",
                state.time * 1e3,
                lost,
                HyperfineLevel::ALL[m]
            );
        }
        let moved = op.apply(&state.fields[m]);
        let after = new.norm(&moved);
        state.discarded[m] += before - after;
        state.fields[m] = moved;
    }
    log::info!("t = {:.3} ms: moved to {}", state.time * 1e3, stage.grid);
    state.grid = new;
    Ok(())
}

fn snapshot_name(t: f64, level: HyperfineLevel) -> String {
    format!("t{:09.3}ms_{}.bin", t * 1e3, level.label())
}

/// Integrates the state through the schedule up to its end time.
pub fn propagate(mut state: SpinorState, schedule: &FieldSchedule, config: &PropagatorConfig, snapshot_dir: Option<&Path>) -> Result<Trajectory> {
    config.validate()?;
    let t_max = schedule.t_max();
    if state.time > t_max + TIME_EPS {
        return Err(Error::Precondition("state time lies beyond the end of the schedule".into()));
    }
    let s = &schedule.species;
    let clock = Instant::now();
    let mut stages: Vec<&GridStage> = config.stages.iter().filter(|st| st.t_start > state.time - TIME_EPS).collect();
    let mut layers = config.absorbers.clone();
    // Stages at or before the current time apply immediately.
    while stages.first().is_some_and(|st| st.t_start <= state.time + TIME_EPS) {
        let st = stages.remove(0);
        apply_stage(&mut state, st)?;
        if let Some(l) = &st.absorbers {
            layers = l.clone();
        }
    }
    if let Some(v) = config.nyquist_velocity {
        check_nyquist(&state.grid, v, s.mass, s.hbar, config.nyquist_factor)?;
    }
    state.phase = fieldmodel::accumulated_detuning_phase(schedule, state.time);
    let mut ws = Workspace::new(state.grid.clone(), schedule, &layers);
    let n0 = state.total_norm();
    if !(n0 > 0.0 && n0.is_finite()) {
        return Err(Error::Precondition("initial state has zero or invalid norm".into()));
    }
    let events = hard_events(schedule, config, state.time, t_max);
    let mut ev_idx = 0;
    let mut next_sample = next_multiple(state.time, config.sample_interval);
    let mut next_snap = config
        .snapshot_interval
        .map(|d| if state.time.abs() < TIME_EPS { 0.0 } else { next_multiple(state.time, d) });
    let mut samples = vec![sample(&state)];
    let mut snapshots = vec![];
    let mut stats = StepStats {
        min_step: f64::INFINITY,
        ..Default::default()
    };
    let mut dopri = Dopri::new(state.grid.len(), config.max_step.min(1e-5), config.atol * n0.sqrt());

    let write_snaps = |state: &SpinorState, snapshots: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = snapshot_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for level in HyperfineLevel::ALL {
                let p = dir.join(snapshot_name(state.time, level));
                write_snapshot(
                    &p,
                    &state.grid,
                    state.time,
                    level.label(),
                    config.snapshot_precision,
                    &state.fields[level.index()],
                )?;
                snapshots.push(p);
            }
        }
        Ok(())
    };
    if next_snap == Some(0.0) {
        write_snaps(&state, &mut snapshots)?;
        next_snap = config.snapshot_interval.map(|d| next_multiple(state.time, d));
    }

    while state.time < t_max - TIME_EPS {
        while ev_idx < events.len() && events[ev_idx] <= state.time + TIME_EPS {
            ev_idx += 1;
        }
        if stages.first().is_some_and(|st| st.t_start <= state.time + TIME_EPS) {
            let st = stages.remove(0);
            apply_stage(&mut state, st)?;
            if let Some(l) = &st.absorbers {
                layers = l.clone();
            }
            ws = Workspace::new(state.grid.clone(), schedule, &layers);
            dopri = Dopri::new(state.grid.len(), dopri.h, dopri.scale);
        }
        let mut target = events[ev_idx.min(events.len() - 1)];
        target = target.min(next_sample);
        if let Some(ns) = next_snap {
            target = target.min(ns);
        }
        let proposed = match config.method {
            Method::SplitStep => (config.max_phase / split_rate(&ws, &state, schedule, state.time)).clamp(config.min_step, config.max_step),
            Method::DormandPrince => dopri.h.clamp(config.min_step, config.max_step),
        };
        let remaining = target - state.time;
        let h = if proposed >= remaining * (1.0 - 1e-9) {
            remaining
        } else if proposed > 0.5 * remaining {
            0.5 * remaining
        } else {
            proposed
        };
        match config.method {
            Method::SplitStep => {
                split_step(&mut ws, &mut state, schedule, h);
                stats.accepted += 1;
            }
            Method::DormandPrince => {
                if dopri.attempt(&mut ws, &mut state, schedule, h, config.rtol) {
                    stats.accepted += 1;
                } else {
                    stats.rejected += 1;
                    if dopri.h < config.min_step {
                        return Err(Error::Numerical(format!(
                            "step size underflow at t = {:.6} ms (h = {:.3e} s)",
                            state.time * 1e3,
                            dopri.h
                        )));
                    }
                    continue;
                }
            }
        }
        if (target - state.time).abs() < TIME_EPS {
            state.time = target;
        }
        stats.min_step = stats.min_step.min(h);
        stats.max_step = stats.max_step.max(h);
        if state.time >= next_sample - TIME_EPS || state.time >= t_max - TIME_EPS {
            let smp = sample(&state);
            if smp.on_grid.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite norm at t = {:.6} ms", state.time * 1e3)));
            }
            log::debug!("t = {:8.3} ms  N = {:?}", state.time * 1e3, smp.totals());
            samples.push(smp);
            next_sample = next_multiple(state.time, config.sample_interval);
        }
        if let Some(ns) = next_snap {
            if state.time >= ns - TIME_EPS {
                write_snaps(&state, &mut snapshots)?;
                next_snap = config.snapshot_interval.map(|d| next_multiple(state.time, d));
            }
        }
    }
    stats.wall_seconds = clock.elapsed().as_secs_f64();
    if stats.accepted == 0 {
        stats.min_step = 0.0;
    }
    Ok(Trajectory {
        samples,
        snapshots,
        stats,
        final_state: state,
    })
}

/// Release of a trapped state without rf: the schedule must have the trap
/// off from t = 0 and no drive.
pub fn sudden_release_run(state: SpinorState, schedule: &FieldSchedule, config: &PropagatorConfig, snapshot_dir: Option<&Path>) -> Result<Trajectory> {
    if schedule.rf_drive().window.is_some() {
        return Err(Error::Precondition("sudden release requires a schedule without rf".into()));
    }
    if schedule.state(0.0).trap_scale != 0.0 {
        return Err(Error::Precondition("sudden release requires the trap to be off from t = 0".into()));
    }
    propagate(state, schedule, config, snapshot_dir)
}

/// Writes t_ms, total N per component (lattice plus removed), then the
/// on-lattice parts.
pub fn write_particle_csv(path: &Path, samples: &[NormSample]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "t_ms,N_m1,N_0,N_p1,grid_m1,grid_0,grid_p1").map_err(io)?;
    for s in samples {
        let t = s.totals();
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.t * 1e3,
            t[0],
            t[1],
            t[2],
            s.on_grid[0],
            s.on_grid[1],
            s.on_grid[2]
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Characteristic release speed √(2μ/M) of a condensate with chemical potential μ.
pub fn release_velocity(mu: f64, mass: f64) -> f64 {
    (2.0 * mu.max(0.0) / mass).sqrt()
}
