//! Magnetic trap, rf drive and the piecewise outcoupling sequence.
//!
//! Every scheduled quantity is linear in time inside a phase. Values not
//! set by a phase carry over from the previous phase, except the Rabi
//! frequency and the gradient, which are zero unless stated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::units;
use crate::zeeman::{self, HyperfineLevel, SpeciesConstants};

/// Static trap geometry: ω_i in rad/s and the offset field in T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicTrapSpec {
    pub omega: [f64; 3],
    pub b_bot: f64,
}

/// One block of the sequence. Ramps are (start, end) values; times in s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Offset field in T.
    pub b_bot: Option<[f64; 2]>,
    /// Multiplier of the base trap frequencies; 0 switches the trap off.
    pub trap_scale: Option<[f64; 2]>,
    /// Detuning from ω_0 in rad/s.
    pub detuning: Option<[f64; 2]>,
    /// Rabi frequency in rad/s.
    pub rabi: Option<[f64; 2]>,
    /// Field gradient along z in T/m.
    pub gradient: Option<f64>,
}

impl Phase {
    pub fn new(name: &str, t_start: f64, t_end: f64) -> Self {
        Phase {
            name: name.into(),
            t_start,
            t_end,
            b_bot: None,
            trap_scale: None,
            detuning: None,
            rabi: None,
            gradient: None,
        }
    }
}

/// Ordered, contiguous phases starting at t = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTimeline {
    pub phases: Vec<Phase>,
    pub t_max: f64,
}

/// A time series defined by knots; repeated times encode jumps and the
/// value right of a jump is used at the jump itself.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
    /// ∫ from 0 to each knot.
    cumulative: Vec<f64>,
}

impl PiecewiseLinear {
    fn new(knots: Vec<(f64, f64)>) -> Self {
        let mut cumulative = Vec::with_capacity(knots.len());
        let mut acc = 0.0;
        for i in 0..knots.len() {
            if i > 0 {
                let (t0, v0) = knots[i - 1];
                let (t1, v1) = knots[i];
                acc += 0.5 * (v0 + v1) * (t1 - t0);
            }
            cumulative.push(acc);
        }
        PiecewiseLinear { knots, cumulative }
    }

    /// Index of the segment [k_i, k_{i+1}) containing t, or None past the end.
    fn segment(&self, t: f64) -> Option<usize> {
        let n = self.knots.len();
        if n < 2 || t < self.knots[0].0 {
            return None;
        }
        let pos = self.knots.partition_point(|k| k.0 <= t);
        if pos >= n {
            return None;
        }
        Some(pos - 1)
    }

    pub fn value(&self, t: f64) -> f64 {
        let Some(&(t_first, v_first)) = self.knots.first() else {
            return 0.0;
        };
        if t < t_first {
            return v_first;
        }
        match self.segment(t) {
            Some(i) => {
                let (t0, v0) = self.knots[i];
                let (t1, v1) = self.knots[i + 1];
                if t1 > t0 {
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                } else {
                    v1
                }
            }
            None => self.knots.last().unwrap().1,
        }
    }

    /// Right derivative at t; zero outside the knots.
    pub fn slope(&self, t: f64) -> f64 {
        match self.segment(t) {
            Some(i) => {
                let (t0, v0) = self.knots[i];
                let (t1, v1) = self.knots[i + 1];
                if t1 > t0 {
                    (v1 - v0) / (t1 - t0)
                } else {
                    0.0
                }
            }
            None => 0.0,
        }
    }

    /// ∫₀ᵗ of the series, holding the last value past the final knot.
    pub fn integral(&self, t: f64) -> f64 {
        let Some(&(t_first, v_first)) = self.knots.first() else {
            return 0.0;
        };
        if t <= t_first {
            return v_first * (t - t_first);
        }
        match self.segment(t) {
            Some(i) => {
                let (t0, v0) = self.knots[i];
                self.cumulative[i] + 0.5 * (v0 + self.value(t)) * (t - t0)
            }
            None => {
                let (tl, vl) = *self.knots.last().unwrap();
                self.cumulative.last().unwrap() + vl * (t - tl)
            }
        }
    }

    /// Times at which the slope changes or the value jumps.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.knots.iter().map(|k| k.0).collect()
    }

    /// Largest value attained, which for a piecewise-linear series sits at a knot.
    pub fn max_value(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// How the programmed detuning Δ(t) enters the coupling phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetuningPhase {
    /// φ(t) = ∫₀ᵗ Δ dt′, so the instantaneous rf offset equals Δ(t).
    #[default]
    Integrated,
    /// φ(t) = Δ(t)·t taken literally; the instantaneous offset is Δ + tΔ′.
    Product,
}

/// rf drive derived from the timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct RfDriveSpec {
    /// Frame frequency ω_0 in rad/s (bottom transition frequency at t = 0).
    pub omega0: f64,
    pub rabi: PiecewiseLinear,
    pub detuning: PiecewiseLinear,
    /// First and last instants with nonzero Rabi frequency.
    pub window: Option<(f64, f64)>,
}

/// Instantaneous values of all scheduled quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldState {
    /// Nominal trap bottom (without the ΔB shift), T.
    pub b_bot: f64,
    pub trap_scale: f64,
    /// ∂²|B|/∂x_i² in T/m².
    pub curvature: [f64; 3],
    pub gradient: f64,
    pub rabi: f64,
    pub detuning: f64,
}

/// Complete field model of a run.
#[derive(Clone, Debug)]
pub struct FieldSchedule {
    pub species: SpeciesConstants,
    pub trap: HarmonicTrapSpec,
    pub timeline: SequenceTimeline,
    /// Constant offset ΔB added to the field magnitude (T); ω_0 is unaffected.
    pub delta_b: f64,
    /// Shift ε of the rotating-frame frequency relative to the bottom
    /// transition frequency (rad/s). Physical densities do not depend on it
    /// once the detuning is compensated.
    pub frame_offset: f64,
    /// When false, V_trap for m_F = 0 is set to zero.
    pub untrapped_potential: bool,
    pub detuning_phase: DetuningPhase,
    b_bot: PiecewiseLinear,
    trap_scale: PiecewiseLinear,
    detuning: PiecewiseLinear,
    rabi: PiecewiseLinear,
    gradient: PiecewiseLinear,
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite")))
    }
}

impl FieldSchedule {
    pub fn new(species: SpeciesConstants, trap: HarmonicTrapSpec, timeline: SequenceTimeline) -> Result<Self> {
        species.validate()?;
        if trap.omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("trap frequencies must be non-negative".into()));
        }
        if !(trap.b_bot.is_finite() && trap.b_bot > 0.0) {
            return Err(Error::Config("trap offset field must be positive".into()));
        }
        let phases = &timeline.phases;
        if phases.is_empty() {
            return Err(Error::Config("sequence has no phases".into()));
        }
        if phases[0].t_start != 0.0 {
            return Err(Error::Config("first phase must start at t = 0".into()));
        }
        for (i, p) in phases.iter().enumerate() {
            if !(p.t_end > p.t_start) {
                return Err(Error::Config(format!("phase '{}' has non-positive duration", p.name)));
            }
            if i > 0 && (p.t_start - phases[i - 1].t_end).abs() > 1e-12 {
                return Err(Error::Config(format!("phase '{}' does not start where '{}' ends", p.name, phases[i - 1].name)));
            }
            for v in [p.b_bot, p.trap_scale, p.detuning, p.rabi].into_iter().flatten().flatten() {
                check_finite(&p.name, v)?;
            }
            if let Some(g) = p.gradient {
                check_finite(&p.name, g)?;
            }
            if p.b_bot.is_some_and(|b| b.iter().any(|x| *x < 0.0)) {
                return Err(Error::Config(format!("phase '{}': offset field must be non-negative", p.name)));
            }
            if p.trap_scale.is_some_and(|b| b.iter().any(|x| *x < 0.0)) {
                return Err(Error::Config(format!("phase '{}': trap scale must be non-negative", p.name)));
            }
            if p.rabi.is_some_and(|b| b.iter().any(|x| *x < 0.0)) {
                return Err(Error::Config(format!("phase '{}': Rabi frequency must be non-negative", p.name)));
            }
        }
        let t_last = phases.last().unwrap().t_end;
        if timeline.t_max < t_last - 1e-12 {
            return Err(Error::Config("t_max precedes the end of the last phase".into()));
        }

        let mut b_bot = vec![];
        let mut scale = vec![];
        let mut det = vec![];
        let mut rabi = vec![];
        let mut grad = vec![];
        let (mut b_prev, mut s_prev, mut d_prev) = (trap.b_bot, 1.0, 0.0);
        for p in phases {
            let b = p.b_bot.unwrap_or([b_prev; 2]);
            let s = p.trap_scale.unwrap_or([s_prev; 2]);
            let d = p.detuning.unwrap_or([d_prev; 2]);
            let r = p.rabi.unwrap_or([0.0; 2]);
            let g = p.gradient.unwrap_or(0.0);
            for (series, v) in [(&mut b_bot, b), (&mut scale, s), (&mut det, d), (&mut rabi, r), (&mut grad, [g, g])] {
                series.push((p.t_start, v[0]));
                series.push((p.t_end, v[1]));
            }
            (b_prev, s_prev, d_prev) = (b[1], s[1], d[1]);
        }
        if t_last < timeline.t_max {
            let tail = [
                (&mut b_bot, b_prev),
                (&mut scale, s_prev),
                (&mut det, d_prev),
                (&mut rabi, 0.0),
                (&mut grad, 0.0),
            ];
            for (series, v) in tail {
                series.push((t_last, v));
                series.push((timeline.t_max, v));
            }
        }
        let b_series = PiecewiseLinear::new(b_bot);
        let scale_series = PiecewiseLinear::new(scale);
        for &(t, v) in &b_series.knots {
            if scale_series.value(t) > 0.0 && v <= 0.0 {
                return Err(Error::Config(format!("offset field must be positive while the trap is on (t = {t})")));
            }
        }
        Ok(FieldSchedule {
            species,
            trap,
            timeline,
            delta_b: 0.0,
            frame_offset: 0.0,
            untrapped_potential: true,
            detuning_phase: DetuningPhase::Integrated,
            b_bot: b_series,
            trap_scale: scale_series,
            detuning: PiecewiseLinear::new(det),
            rabi: PiecewiseLinear::new(rabi),
            gradient: PiecewiseLinear::new(grad),
        })
    }

    pub fn t_max(&self) -> f64 {
        self.timeline.t_max
    }

    /// Evaluates all scheduled quantities at time t.
    pub fn state(&self, t: f64) -> FieldState {
        let s = self.trap_scale.value(t);
        let b_bot = self.b_bot.value(t);
        // Local m_F = −1 slope at the bottom, so ω are the actual trap frequencies.
        let slope = zeeman::breit_rabi_slope(&self.species, -1.0, b_bot);
        let k = self.species.mass / slope.max(1e-3 * self.species.mu_b);
        FieldState {
            b_bot,
            trap_scale: s,
            curvature: self.trap.omega.map(|w| k * (w * s).powi(2)),
            gradient: self.gradient.value(t),
            rabi: self.rabi.value(t),
            detuning: self.detuning(t),
        }
    }

    pub fn rabi(&self, t: f64) -> f64 {
        self.rabi.value(t)
    }

    /// Instantaneous rf offset dφ/dt in rad/s.
    pub fn detuning(&self, t: f64) -> f64 {
        match self.detuning_phase {
            DetuningPhase::Integrated => self.detuning.value(t),
            DetuningPhase::Product => self.detuning.value(t) + t * self.detuning.slope(t),
        }
    }

    /// Bottom transition frequency ω_0 at the initial offset field, rad/s.
    pub fn omega0(&self) -> f64 {
        zeeman::transition_frequencies(&self.species, self.trap.b_bot).map(|w| w.0).unwrap_or(0.0)
    }

    pub fn rf_drive(&self) -> RfDriveSpec {
        let on: Vec<f64> = self.rabi.knots.iter().filter(|k| k.1 > 0.0).map(|k| k.0).collect();
        RfDriveSpec {
            omega0: self.omega0() + self.frame_offset,
            rabi: self.rabi.clone(),
            detuning: self.detuning.clone(),
            window: on.first().map(|a| (*a, *on.last().unwrap())),
        }
    }

    /// Times where any scheduled quantity changes slope or jumps, sorted.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut t: Vec<f64> = [&self.b_bot, &self.trap_scale, &self.detuning, &self.rabi, &self.gradient]
            .iter()
            .flat_map(|s| s.breakpoints())
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        t
    }

    /// True when ω_x = ω_y, which the cylindrical reduction requires.
    pub fn is_axially_symmetric(&self) -> bool {
        (self.trap.omega[0] - self.trap.omega[1]).abs() <= 1e-12 * self.trap.omega[0].max(1.0)
    }

    /// Largest |Δ_rf| while the drive is on, rad/s.
    pub fn max_detuning_during_drive(&self) -> f64 {
        let knots = &self.rabi.knots;
        let mut m = 0.0f64;
        for w in knots.windows(2) {
            if w[0].1 > 0.0 || w[1].1 > 0.0 {
                for t in [w[0].0, w[1].0] {
                    m = m.max(self.detuning(t).abs());
                }
            }
        }
        m
    }

    /// Returns a copy with the offset ΔB applied.
    pub fn with_delta_b(mut self, delta_b: f64) -> Self {
        self.delta_b = delta_b;
        self
    }

    pub fn with_untrapped_potential(mut self, on: bool) -> Self {
        self.untrapped_potential = on;
        self
    }

    /// Rotating-frame offset ε with the detuning compensated by −ε.
    pub fn with_frame_offset(mut self, eps: f64) -> Self {
        self.frame_offset += eps;
        self.detuning = PiecewiseLinear::new(self.detuning.knots.iter().map(|&(t, v)| (t, v - eps)).collect());
        self
    }

    /// Replaces the Rabi frequency wherever it is nonzero.
    pub fn with_rabi(mut self, rabi: f64) -> Self {
        self.rabi = PiecewiseLinear::new(self.rabi.knots.iter().map(|&(t, v)| (t, if v > 0.0 { rabi } else { 0.0 })).collect());
        for p in &mut self.timeline.phases {
            if let Some(r) = &mut p.rabi {
                *r = r.map(|v| if v > 0.0 { rabi } else { 0.0 });
            }
        }
        self
    }

    /// Diagonal energies of the rotating-frame Hamiltonian at the trap
    /// bottom: (−ħε, 0, V_BR + ħε), with V_BR from the nominal offset field.
    pub fn bottom_energies(&self, t: f64) -> [f64; 3] {
        let b = self.b_bot.value(t);
        let vbr = zeeman::breit_rabi_asymmetry(&self.species, b).unwrap_or(0.0);
        let e = self.species.hbar * self.frame_offset;
        [-e, 0.0, vbr + e]
    }
}

/// |B| at position x (m) and time t; negative values are clamped to zero.
pub fn field_magnitude(schedule: &FieldSchedule, x: [f64; 3], t: f64) -> f64 {
    let s = schedule.state(t);
    field_at(&s, schedule.delta_b, x)
}

#[inline]
fn field_at(s: &FieldState, delta_b: f64, x: [f64; 3]) -> f64 {
    let b = s.b_bot + delta_b + 0.5 * (s.curvature[0] * x[0] * x[0] + s.curvature[1] * x[1] * x[1] + s.curvature[2] * x[2] * x[2]) + s.gradient * x[2];
    b.max(0.0)
}

/// V_trap for one sublevel on every lattice node, referenced to the nominal
/// instantaneous trap bottom. Cylindrical nodes use ρ for both transverse axes.
pub fn potential_on_grid(schedule: &FieldSchedule, level: HyperfineLevel, grid: &Grid, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    fill_potential(schedule, level, grid, t, &mut out);
    out
}

pub fn fill_potential(schedule: &FieldSchedule, level: HyperfineLevel, grid: &Grid, t: f64, out: &mut [f64]) {
    if level == HyperfineLevel::Untrapped && !schedule.untrapped_potential {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let s = schedule.state(t);
    let m = level.m_f() as f64;
    let mut clamped = 0usize;
    for (i, v) in out.iter_mut().enumerate() {
        let p = grid.point(i);
        let raw =
            s.b_bot + schedule.delta_b + 0.5 * (s.curvature[0] * p[0] * p[0] + s.curvature[1] * p[1] * p[1] + s.curvature[2] * p[2] * p[2]) + s.gradient * p[2];
        if raw < 0.0 {
            clamped += 1;
        }
        *v = zeeman::breit_rabi_difference(&schedule.species, m, raw.max(0.0), s.b_bot);
    }
    if clamped > 0 {
        log::debug!("field magnitude clamped at {clamped} nodes at t = {t:.6} s");
    }
}

/// φ(t) = ∫₀ᵗ Δ_rf dt′ in rad.
pub fn accumulated_detuning_phase(schedule: &FieldSchedule, t: f64) -> f64 {
    match schedule.detuning_phase {
        DetuningPhase::Integrated => schedule.detuning.integral(t),
        DetuningPhase::Product => schedule.detuning.value(t) * t,
    }
}

/// The sequence of the reference scenario: 90 ms detuning ramp at
/// Ω = 2π·90 Hz, 5 ms trap ramp-down, release at 0.2 G, a 2 ms gradient
/// pulse of 1 G/mm at 110 ms, and free flight to 140 ms. The coupling phase
/// is Δ(t)·t, which is the form the reference results correspond to.
pub fn model_sequence_preset(species: SpeciesConstants) -> FieldSchedule {
    let hz = units::angular_from_hz;
    let ms = units::seconds_from_ms;
    let gauss = units::tesla_from_gauss;
    let trap = HarmonicTrapSpec {
        omega: [hz(30.0), hz(30.0), hz(15.0)],
        b_bot: gauss(4.0),
    };
    let mut rf = Phase::new("rf-outcoupling", 0.0, ms(90.0));
    rf.b_bot = Some([gauss(4.0); 2]);
    rf.trap_scale = Some([1.0; 2]);
    rf.detuning = Some([hz(319.0), hz(319.0 - 1.6 * 90.0)]);
    rf.rabi = Some([hz(90.0); 2]);
    let mut ramp = Phase::new("trap-ramp-down", ms(90.0), ms(95.0));
    ramp.b_bot = Some([gauss(4.0), gauss(1.0)]);
    ramp.trap_scale = Some([1.0, 0.1]);
    let mut off = Phase::new("trap-off", ms(95.0), ms(110.0));
    off.b_bot = Some([gauss(0.2); 2]);
    off.trap_scale = Some([0.0; 2]);
    let mut grad = Phase::new("gradient-pulse", ms(110.0), ms(112.0));
    grad.gradient = Some(units::tesla_per_m_from_gauss_per_mm(1.0));
    let free = Phase::new("free-flight", ms(112.0), ms(140.0));
    let timeline = SequenceTimeline {
        phases: vec![rf, ramp, off, grad, free],
        t_max: ms(140.0),
    };
    let mut s = FieldSchedule::new(species, trap, timeline).expect("preset is valid");
    s.detuning_phase = DetuningPhase::Product;
    s
}

/// Trap held at its initial values with no drive, then switched off at t = 0
/// for a release experiment lasting `t_max`.
pub fn sudden_release_preset(species: SpeciesConstants, trap: HarmonicTrapSpec, t_max: f64) -> Result<FieldSchedule> {
    let mut off = Phase::new("released", 0.0, t_max);
    off.b_bot = Some([trap.b_bot; 2]);
    off.trap_scale = Some([0.0; 2]);
    FieldSchedule::new(species, trap, SequenceTimeline { phases: vec![off], t_max })
}

/// Trap held static with no drive, used for ground states and checks.
pub fn static_trap(species: SpeciesConstants, trap: HarmonicTrapSpec, t_max: f64) -> Result<FieldSchedule> {
    let mut hold = Phase::new("hold", 0.0, t_max);
    hold.b_bot = Some([trap.b_bot; 2]);
    hold.trap_scale = Some([1.0; 2]);
    FieldSchedule::new(species, trap, SequenceTimeline { phases: vec![hold], t_max })
}

// ----- sequence files -----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrapFile {
    omega_hz: [f64; 3],
    b_bot_g: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhaseFile {
    name: String,
    t_start_ms: f64,
    t_end_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b_bot_g: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trap_scale: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detuning_hz: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rabi_hz: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gradient_g_per_mm: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    t_max_ms: f64,
    #[serde(default)]
    detuning_phase: DetuningPhase,
    trap: TrapFile,
    #[serde(rename = "phase")]
    phases: Vec<PhaseFile>,
}

/// Sequence description in configuration units, as read from TOML.
pub fn sequence_from_toml(text: &str, origin: &Path, species: SpeciesConstants) -> Result<FieldSchedule> {
    let f: SequenceFile = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
    let hz = units::angular_from_hz;
    let ms = units::seconds_from_ms;
    let gauss = units::tesla_from_gauss;
    let trap = HarmonicTrapSpec {
        omega: f.trap.omega_hz.map(hz),
        b_bot: gauss(f.trap.b_bot_g),
    };
    let phases = f
        .phases
        .into_iter()
        .map(|p| Phase {
            name: p.name,
            t_start: ms(p.t_start_ms),
            t_end: ms(p.t_end_ms),
            b_bot: p.b_bot_g.map(|v| v.map(gauss)),
            trap_scale: p.trap_scale,
            detuning: p.detuning_hz.map(|v| v.map(hz)),
            rabi: p.rabi_hz.map(|v| v.map(hz)),
            gradient: p.gradient_g_per_mm.map(units::tesla_per_m_from_gauss_per_mm),
        })
        .collect();
    let mut s = FieldSchedule::new(species, trap, SequenceTimeline { phases, t_max: ms(f.t_max_ms) })?;
    s.detuning_phase = f.detuning_phase;
    Ok(s)
}

pub fn load_sequence(path: &Path, species: SpeciesConstants) -> Result<FieldSchedule> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    sequence_from_toml(&text, path, species)
}

pub fn sequence_to_toml(schedule: &FieldSchedule) -> String {
    let hz = units::hz_from_angular;
    let ms = units::ms_from_seconds;
    let gauss = units::gauss_from_tesla;
    let f = SequenceFile {
        t_max_ms: ms(schedule.timeline.t_max),
        detuning_phase: schedule.detuning_phase,
        trap: TrapFile {
            omega_hz: schedule.trap.omega.map(hz),
            b_bot_g: gauss(schedule.trap.b_bot),
        },
        phases: schedule
            .timeline
            .phases
            .iter()
            .map(|p| PhaseFile {
                name: p.name.clone(),
                t_start_ms: ms(p.t_start),
                t_end_ms: ms(p.t_end),
                b_bot_g: p.b_bot.map(|v| v.map(gauss)),
                trap_scale: p.trap_scale,
                detuning_hz: p.detuning.map(|v| v.map(hz)),
                rabi_hz: p.rabi.map(|v| v.map(hz)),
                gradient_g_per_mm: p.gradient.map(units::gauss_per_mm_from_tesla_per_m),
            })
            .collect(),
    };
    toml::to_string(&f).expect("sequence serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn preset() -> FieldSchedule {
        model_sequence_preset(SpeciesConstants::rb87())
    }

    fn ms(t: f64) -> f64 {
        t * 1e-3
    }

    #[test]
    fn field_examples() {
        let s = preset();
        assert_relative_eq!(field_magnitude(&s, [0.0; 3], 0.0), 4e-4, max_relative = 1e-15);
        assert_relative_eq!(field_magnitude(&s, [0.0, 0.0, 1e-3], ms(111.0)), 1.2e-4, max_relative = 1e-12);
        assert_relative_eq!(field_magnitude(&s, [5e-3, 1e-3, 0.0], ms(100.0)), 0.2e-4, max_relative = 1e-15);
        let flat = static_trap(SpeciesConstants::rb87(), HarmonicTrapSpec { omega: [0.0; 3], b_bot: 3e-4 }, 1e-3).unwrap();
        for x in [[1e-4, 0.0, 0.0], [0.0, -2e-4, 3e-4]] {
            assert_eq!(field_magnitude(&flat, x, 5e-4), 3e-4);
        }
    }

    #[test]
    fn preset_drive() {
        let s = preset();
        assert_relative_eq!(s.detuning(0.0), 2.0 * PI * 319.0, max_relative = 1e-15);
        assert_relative_eq!(s.detuning(ms(90.0) - 1e-12), 2.0 * PI * (175.0 - 90.0 * 1.6), max_relative = 1e-9);
        let mut i = s.clone();
        i.detuning_phase = DetuningPhase::Integrated;
        assert_relative_eq!(i.detuning(ms(90.0) - 1e-12), 2.0 * PI * 175.0, max_relative = 1e-9);
        assert_eq!(s.rabi(ms(100.0)), 0.0);
        assert_relative_eq!(s.rabi(ms(45.0)), 2.0 * PI * 90.0);
        let rf = s.rf_drive();
        assert_eq!(rf.window, Some((0.0, ms(90.0))));
        assert_relative_eq!(rf.omega0 / (2.0 * PI), 2.799e6, max_relative = 1e-3);
        assert!(rf.omega0 / s.max_detuning_during_drive() > 1e3);
    }

    #[test]
    fn ramp_and_switch_off() {
        let s = preset();
        let mid = s.state(ms(92.5));
        assert_relative_eq!(mid.b_bot, 2.5e-4, max_relative = 1e-12);
        assert_relative_eq!(mid.trap_scale, 0.55, max_relative = 1e-12);
        let off = s.state(ms(95.0));
        assert_eq!(off.trap_scale, 0.0);
        assert_relative_eq!(off.b_bot, 0.2e-4);
        assert_eq!(s.state(ms(109.0)).gradient, 0.0);
        assert_relative_eq!(s.state(ms(110.0)).gradient, 0.1);
        assert_eq!(s.state(ms(112.0)).gradient, 0.0);
        assert_eq!(s.state(ms(140.0)).trap_scale, 0.0);
    }

    #[test]
    fn detuning_phase_examples() {
        let mut s = preset();
        assert_relative_eq!(accumulated_detuning_phase(&s, ms(90.0)), 2.0 * PI * 175.0 * 0.09, max_relative = 1e-12);
        s.detuning_phase = DetuningPhase::Integrated;
        assert_relative_eq!(accumulated_detuning_phase(&s, ms(90.0)), 2.0 * PI * 22.23, max_relative = 1e-12);
        assert_eq!(accumulated_detuning_phase(&s, 0.0), 0.0);
        let species = SpeciesConstants::rb87();
        let trap = HarmonicTrapSpec { omega: [1.0; 3], b_bot: 1e-4 };
        let mut p = Phase::new("c", 0.0, 1.0);
        p.detuning = Some([7.0, 7.0]);
        let c = FieldSchedule::new(species.clone(), trap.clone(), SequenceTimeline { phases: vec![p], t_max: 2.0 }).unwrap();
        assert_relative_eq!(accumulated_detuning_phase(&c, 0.3), 2.1, max_relative = 1e-14);
        assert_relative_eq!(accumulated_detuning_phase(&c, 1.5), 10.5, max_relative = 1e-14);
        let z = static_trap(species, trap, 1.0).unwrap();
        assert_eq!(accumulated_detuning_phase(&z, 0.7), 0.0);
    }

    #[test]
    fn trapped_potential_curvature() {
        let s = preset();
        let species = &s.species;
        let g = Grid::new(GridSpec::cartesian([8, 8, 8], [1.6e-6, 1.6e-6, 1.6e-6])).unwrap();
        let v = potential_on_grid(&s, HyperfineLevel::Trapped, &g, 0.0);
        let c = g.flat_index([4, 4, 4]);
        assert!(v[c].abs() < 1e-40);
        let h = g.axis(0)[5];
        for (a, idx) in [(0, [[5, 4, 4], [3, 4, 4]]), (1, [[4, 5, 4], [4, 3, 4]]), (2, [[4, 4, 5], [4, 4, 3]])] {
            let second = (v[g.flat_index(idx[0])] + v[g.flat_index(idx[1])] - 2.0 * v[c]) / (h * h);
            assert_relative_eq!(second, species.mass * s.trap.omega[a].powi(2), max_relative = 1e-5);
        }
    }

    #[test]
    fn harmonic_within_thomas_fermi_radius() {
        let s = preset();
        let g = Grid::new(GridSpec::cylindrical(32, 10e-6, 64, 40e-6)).unwrap();
        let v = potential_on_grid(&s, HyperfineLevel::Trapped, &g, 0.0);
        let m = s.species.mass;
        for (i, val) in v.iter().enumerate() {
            let p = g.point(i);
            let r = (p[0] / 9.1e-6).powi(2) + (p[2] / 18.2e-6).powi(2);
            if r <= 1.0 && r > 1e-3 {
                let h = 0.5 * m * (s.trap.omega[0].powi(2) * p[0] * p[0] + s.trap.omega[2].powi(2) * p[2] * p[2]);
                assert!(((val - h) / h).abs() < 0.01);
            }
        }
    }

    #[test]
    fn anti_trapping_ratio_on_grid() {
        let s = preset();
        let g = Grid::new(GridSpec::cylindrical(16, 10e-6, 32, 40e-6)).unwrap();
        let vm = potential_on_grid(&s, HyperfineLevel::Trapped, &g, 0.0);
        let v0 = potential_on_grid(&s, HyperfineLevel::Untrapped, &g, 0.0);
        let r = zeeman::anti_trap_ratio(&s.species, 4e-4).unwrap();
        for (a, b) in vm.iter().zip(&v0) {
            assert!(((b / a) + r).abs() < 0.05 * r);
        }
        let off = preset().with_untrapped_potential(false);
        assert!(potential_on_grid(&off, HyperfineLevel::Untrapped, &g, 0.0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_frequencies_give_zero_potential() {
        let s = static_trap(SpeciesConstants::rb87(), HarmonicTrapSpec { omega: [0.0; 3], b_bot: 4e-4 }, 1e-3).unwrap();
        let g = Grid::new(GridSpec::cylindrical(8, 10e-6, 16, 40e-6)).unwrap();
        for level in HyperfineLevel::ALL {
            assert!(potential_on_grid(&s, level, &g, 0.0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn continuity_except_allowed_jumps() {
        let s = preset();
        let x = [3e-6, -2e-6, 5e-6];
        let allowed = [ms(95.0), ms(110.0), ms(112.0)];
        for t in s.breakpoints() {
            if t <= 0.0 || t >= s.t_max() {
                continue;
            }
            let a = field_magnitude(&s, x, t - 1e-12);
            let b = field_magnitude(&s, x, t + 1e-12);
            let jump = (a - b).abs() > 1e-6 * a.max(b);
            assert_eq!(jump, allowed.iter().any(|u| (u - t).abs() < 1e-12), "t = {t}");
        }
    }

    #[test]
    fn validation_rejects_bad_timelines() {
        let species = SpeciesConstants::rb87();
        let trap = HarmonicTrapSpec { omega: [1.0; 3], b_bot: 1e-4 };
        let a = Phase::new("a", 0.0, 1.0);
        let b = Phase::new("b", 1.5, 2.0);
        assert!(FieldSchedule::new(
            species.clone(),
            trap.clone(),
            SequenceTimeline {
                phases: vec![a.clone(), b],
                t_max: 2.0
            }
        )
        .is_err());
        assert!(FieldSchedule::new(
            species.clone(),
            trap.clone(),
            SequenceTimeline {
                phases: vec![a.clone()],
                t_max: 0.5
            }
        )
        .is_err());
        let mut neg = a.clone();
        neg.rabi = Some([-1.0, 1.0]);
        assert!(FieldSchedule::new(species.clone(), trap.clone(), SequenceTimeline { phases: vec![neg], t_max: 1.0 }).is_err());
        let mut zero_b = a;
        zero_b.b_bot = Some([0.0, 0.0]);
        assert!(FieldSchedule::new(
            species,
            trap,
            SequenceTimeline {
                phases: vec![zero_b],
                t_max: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn sequence_file_round_trip() {
        let s = preset();
        let text = sequence_to_toml(&s);
        let back = sequence_from_toml(&text, Path::new("mem"), SpeciesConstants::rb87()).unwrap();
        for t in [0.0, ms(45.0), ms(92.0), ms(111.0), ms(139.0)] {
            let (a, b) = (s.state(t), back.state(t));
            assert_relative_eq!(a.b_bot, b.b_bot, max_relative = 1e-12);
            assert_relative_eq!(a.detuning, b.detuning, max_relative = 1e-12);
            assert_relative_eq!(a.rabi, b.rabi, max_relative = 1e-12);
            assert_relative_eq!(a.gradient, b.gradient, max_relative = 1e-12);
        }
        assert!(sequence_from_toml("t_max_ms = 1\n[trap]\n", Path::new("mem"), SpeciesConstants::rb87()).is_err());
    }

    #[test]
    fn frame_offset_compensates_detuning() {
        let s = preset().with_frame_offset(123.0);
        assert_relative_eq!(s.detuning(0.0), 2.0 * PI * 319.0 - 123.0, max_relative = 1e-14);
        let e = s.bottom_energies(0.0);
        assert_relative_eq!(e[0], -s.species.hbar * 123.0);
    }

    proptest! {
        #[test]
        fn phase_derivative_is_detuning(t in 1e-4f64..0.1399) {
            let s = preset();
            let h = 1e-7;
            let fd = (accumulated_detuning_phase(&s, t + h) - accumulated_detuning_phase(&s, t - h)) / (2.0 * h);
            let near_break = s.breakpoints().iter().any(|b| (b - t).abs() < 2.0 * h);
            if !near_break {
                prop_assert!((fd - s.detuning(t)).abs() < 1e-6 * s.detuning(t).abs().max(1.0));
            }
        }

        #[test]
        fn potentials_finite(x in -1e-4f64..1e-4, z in -1e-4f64..1e-4, t in 0.0f64..0.14) {
            let s = preset();
            prop_assert!(field_magnitude(&s, [x, 0.0, z], t) >= 0.0);
        }
    }
}
