//! Output-state metrics: main-peak isolation, the velocity distribution of
//! the main peak, shell widths and the momentum overlap fidelity.

use std::fmt::Write as _;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DVector, Dyn, OMatrix, Vector3, U3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldmodel::FieldSchedule;
use crate::grid::{Grid, C64};
use crate::zeeman::SpeciesConstants;

/// Default density threshold that delimits the main peak.
pub const MAIN_PEAK_THRESHOLD: f64 = 1e-3;

/// Axis-aligned ellipsoid enclosing the main peak. Inert axes carry a zero
/// semi-axis and do not constrain membership. On a cylindrical lattice
/// axes 0 and 1 are the transverse directions and share a semi-axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainPeakRegion {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub threshold: f64,
    /// True when some axis never dropped below the threshold.
    pub clipped: bool,
}

impl MainPeakRegion {
    /// Region covering the whole lattice.
    pub fn full(grid: &Grid) -> Self {
        let h = grid.half_extents();
        let mut semi = h.map(|x| if x > 0.0 { 2.0 * x } else { 0.0 });
        if grid.is_cylindrical() {
            semi[1] = semi[0];
        }
        MainPeakRegion {
            center: [0.0; 3],
            semi_axes: semi,
            threshold: 0.0,
            clipped: false,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        for a in active_axes(grid) {
            if !(self.semi_axes[a].is_finite() && self.semi_axes[a] > 0.0) {
                return Err(Error::Precondition(format!("main-peak semi-axis {a} must be positive")));
            }
        }
        Ok(())
    }

    /// Membership of a lattice point given as stored coordinates.
    pub fn contains(&self, grid: &Grid, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in active_axes(grid) {
            let d = (p[a] - self.center[a]) / self.semi_axes[a];
            s += d * d;
        }
        s <= 1.0
    }

    pub fn mask(&self, grid: &Grid) -> Vec<bool> {
        (0..grid.len()).map(|i| self.contains(grid, grid.point(i))).collect()
    }
}

fn active_axes(grid: &Grid) -> Vec<usize> {
    let shape = grid.shape();
    (0..3).filter(|&a| shape[a] > 1).collect()
}

/// Coordinate where a decaying profile crosses `level` between nodes i0
/// (above) and i1 (below), interpolated in log density.
fn crossing(x: &[f64], n: &[f64], i0: usize, i1: usize, level: f64) -> f64 {
    let (a, b) = (n[i0], n[i1]);
    let f = if b > 0.0 && a > b {
        (a / level).ln() / (a / b).ln()
    } else if a > b {
        (a - level) / (a - b)
    } else {
        1.0
    };
    x[i0] + f.clamp(0.0, 1.0) * (x[i1] - x[i0])
}

/// Outward scan along one cut starting at `start`; returns the crossing
/// coordinate and whether the edge was hit first.
fn scan(x: &[f64], n: &[f64], start: usize, step: isize, level: f64) -> (f64, bool) {
    let mut i = start;
    loop {
        let next = i as isize + step;
        if next < 0 || next as usize >= n.len() {
            return (x[i], true);
        }
        let j = next as usize;
        if n[j] < level {
            return (crossing(x, n, i, j, level), false);
        }
        i = j;
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
        .0
}

/// Locates the main peak: along each axis through the cloud center the
/// cut maximum on either side is followed outward to the first node below
/// `threshold` times the cut maximum.
pub fn find_main_peak(grid: &Grid, density: &[f64], threshold: f64) -> Result<MainPeakRegion> {
    if density.len() != grid.len() {
        return Err(Error::Precondition("density does not match the grid".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Precondition("threshold must lie in (0, 1)".into()));
    }
    if density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::Precondition("density must be finite and non-negative".into()));
    }
    let total = grid.integrate(density);
    if !(total > 0.0) {
        return Err(Error::Precondition("density is identically zero".into()));
    }
    let shape = grid.shape();
    let mut center = [0.0; 3];
    let mut semi = [0.0; 3];
    let mut clipped = false;
    let mut side = |x: &[f64], cut: &[f64], split: usize| -> (f64, f64) {
        let level = threshold * cut.iter().fold(0.0f64, |a, &b| a.max(b));
        let lo = argmax(&cut[..=split]);
        let hi = split + argmax(&cut[split..]);
        let (a, ca) = scan(x, cut, lo, -1, level);
        let (b, cb) = scan(x, cut, hi, 1, level);
        clipped |= ca || cb;
        (a, b)
    };
    if grid.is_cylindrical() {
        let z = grid.axis(2);
        let zc = centroid(grid, density, 2);
        let cut_z: Vec<f64> = (0..shape[2]).map(|k| density[grid.flat_index([0, 0, k])]).collect();
        let (a, b) = side(z, &cut_z, nearest(z, zc));
        center[2] = 0.5 * (a + b);
        semi[2] = 0.5 * (b - a);
        let kc = nearest(z, center[2]);
        let rho = grid.axis(0);
        let cut_r: Vec<f64> = (0..shape[0]).map(|r| density[grid.flat_index([r, 0, kc])]).collect();
        let level = threshold * cut_r.iter().fold(0.0f64, |a, &b| a.max(b));
        let (r, c) = scan(rho, &cut_r, argmax(&cut_r), 1, level);
        clipped |= c;
        semi[0] = r;
        semi[1] = r;
    } else {
        let c = [0, 1, 2].map(|a| if shape[a] > 1 { nearest(grid.axis(a), centroid(grid, density, a)) } else { 0 });
        for a in active_axes(grid) {
            let x = grid.axis(a);
            let cut: Vec<f64> = (0..shape[a])
                .map(|j| {
                    let mut i = c;
                    i[a] = j;
                    density[grid.flat_index(i)]
                })
                .collect();
            let (lo, hi) = side(x, &cut, c[a]);
            center[a] = 0.5 * (lo + hi);
            semi[a] = 0.5 * (hi - lo);
        }
    }
    if clipped {
        log::warn!("main-peak threshold not reached before the grid edge; region clipped");
    }
    let region = MainPeakRegion {
        center,
        semi_axes: semi,
        threshold,
        clipped,
    };
    region.validate(grid)?;
    Ok(region)
}

fn centroid(grid: &Grid, density: &[f64], axis: usize) -> f64 {
    let dv = grid.volume_elements();
    let (mut s, mut w) = (0.0, 0.0);
    for i in 0..grid.len() {
        let m = density[i] * dv[i];
        s += m * grid.point(i)[axis];
        w += m;
    }
    s / w
}

fn nearest(x: &[f64], v: f64) -> usize {
    x.iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (i, &xi)| if (xi - v).abs() < acc.1 { (i, (xi - v).abs()) } else { acc },
        )
        .0
}

/// Velocity-space amplitude ψ̃(v) = (M/ħ)^{d/2} ψ̃(k = Mv/ħ) on the
/// spectral lattice of the grid.
#[derive(Clone, Debug)]
pub struct VelocityDistribution {
    pub amplitude: Vec<C64>,
    /// ħ/M, converting wavenumber to velocity.
    pub velocity_per_k: f64,
    dims: i32,
}

impl VelocityDistribution {
    pub fn density(&self) -> Vec<f64> {
        self.amplitude.iter().map(|c| c.norm_sqr()).collect()
    }

    /// Velocity-space volume element at each spectral node.
    pub fn weights(&self, grid: &Grid) -> Vec<f64> {
        let s = self.velocity_per_k.powi(self.dims);
        grid.momentum_volume_elements().iter().map(|w| w * s).collect()
    }

    pub fn speed(&self, grid: &Grid, idx: usize) -> f64 {
        self.velocity_per_k * grid.k_squared()[idx].sqrt()
    }
}

fn dimensions(grid: &Grid) -> i32 {
    if grid.is_cylindrical() {
        3
    } else {
        active_axes(grid).len() as i32
    }
}

/// Transform of the field restricted to the region (hard mask).
pub fn restricted_momentum_density(grid: &Grid, field: &[C64], region: &MainPeakRegion, species: &SpeciesConstants) -> Result<VelocityDistribution> {
    if field.len() != grid.len() {
        return Err(Error::Precondition("field does not match the grid".into()));
    }
    region.validate(grid)?;
    let mut masked: Vec<C64> = field
        .iter()
        .enumerate()
        .map(|(i, c)| if region.contains(grid, grid.point(i)) { *c } else { C64::new(0.0, 0.0) })
        .collect();
    grid.to_momentum_in_place(&mut masked);
    let dims = dimensions(grid);
    let velocity_per_k = species.hbar / species.mass;
    let s = velocity_per_k.powf(-0.5 * dims as f64);
    for c in &mut masked {
        *c *= s;
    }
    Ok(VelocityDistribution {
        amplitude: masked,
        velocity_per_k,
        dims,
    })
}

/// Mean speed ∫|v||ψ̃|² / ∫|ψ̃|².
pub fn mean_speed(grid: &Grid, dist: &VelocityDistribution) -> Option<f64> {
    let w = grid.momentum_volume_elements();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, c) in dist.amplitude.iter().enumerate() {
        let p = c.norm_sqr() * w[i];
        num += p * dist.speed(grid, i);
        den += p;
    }
    (den > 0.0).then(|| num / den)
}

/// Offset-free Gaussian A·exp(−(v − v₀)²/2σ²) fitted by least squares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
}

struct GaussProblem {
    x: Vec<f64>,
    y: Vec<f64>,
    p: Vector3<f64>,
}

impl LeastSquaresProblem<f64, Dyn, U3> for GaussProblem {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U3>;
    type ParameterStorage = Owned<f64, U3>;

    fn set_params(&mut self, p: &Vector3<f64>) {
        self.p = *p;
    }

    fn params(&self) -> Vector3<f64> {
        self.p
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let (a, c, s) = (self.p[0], self.p[1], self.p[2]);
        Some(DVector::from_iterator(
            self.x.len(),
            self.x.iter().zip(&self.y).map(|(x, y)| a * (-(x - c).powi(2) / (2.0 * s * s)).exp() - y),
        ))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U3>> {
        let (a, c, s) = (self.p[0], self.p[1], self.p[2]);
        let mut j = OMatrix::<f64, Dyn, U3>::zeros(self.x.len());
        for (r, x) in self.x.iter().enumerate() {
            let d = x - c;
            let e = (-d * d / (2.0 * s * s)).exp();
            j[(r, 0)] = e;
            j[(r, 1)] = a * e * d / (s * s);
            j[(r, 2)] = a * e * d * d / (s * s * s);
        }
        Some(j)
    }
}

/// Fits a Gaussian to samples (x ascending). None for flat, empty or
/// non-converging data.
pub fn fit_gaussian(x: &[f64], y: &[f64]) -> Option<GaussianFit> {
    if x.len() != y.len() || x.len() < 4 {
        return None;
    }
    let i = argmax(y);
    let peak = y[i];
    if !(peak > 0.0) || y.iter().filter(|v| **v > 0.01 * peak).count() < 4 {
        return None;
    }
    // Half-maximum half-width as the starting width.
    let half = 0.5 * peak;
    let right = (i..y.len()).find(|&j| y[j] < half).unwrap_or(y.len() - 1);
    let left = (0..=i).rev().find(|&j| y[j] < half).unwrap_or(0);
    let span = (x[right] - x[left]).abs().max((x[1] - x[0]).abs());
    let xs = x[x.len() - 1].abs().max(span);
    let problem = GaussProblem {
        x: x.iter().map(|v| v / xs).collect(),
        y: y.iter().map(|v| v / peak).collect(),
        p: Vector3::new(1.0, x[i] / xs, span / (2.0 * (2.0 * 2f64.ln()).sqrt()) / xs),
    };
    let (fitted, report) = LevenbergMarquardt::new().minimize(problem);
    if !report.termination.was_successful() {
        return None;
    }
    let p = fitted.p;
    let fit = GaussianFit {
        amplitude: p[0] * peak,
        center: p[1] * xs,
        sigma: p[2].abs() * xs,
    };
    (fit.sigma.is_finite() && fit.sigma > 0.0 && fit.amplitude > 0.0).then_some(fit)
}

/// Non-negative half of the velocity cut along axis 0 (v_x) or 2 (v_z)
/// through v = 0, as (speed, density) pairs sorted by speed.
pub fn velocity_cut(grid: &Grid, dist: &VelocityDistribution, axis: usize) -> (Vec<f64>, Vec<f64>) {
    let shape = grid.shape();
    let mut pairs: Vec<(f64, f64)> = (0..shape[axis])
        .filter_map(|j| {
            let mut i = [0; 3];
            for a in 0..3 {
                if a != axis && shape[a] > 1 {
                    i[a] = zero_index(grid, a);
                }
            }
            i[axis] = j;
            let k = grid.wavenumber_axis(axis)[j];
            (k >= 0.0).then(|| (k * dist.velocity_per_k, dist.amplitude[grid.flat_index(i)].norm_sqr()))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Index of the smallest-magnitude wavenumber on an axis.
fn zero_index(grid: &Grid, axis: usize) -> usize {
    nearest(grid.wavenumber_axis(axis), 0.0)
}

/// Form of the isotropy overlap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityForm {
    /// ∫|ψ̃||ψ̃_rot| / ∫|ψ̃|².
    #[default]
    Amplitude,
    /// ∫|ψ̃|²|ψ̃_rot|² / ∫|ψ̃|⁴.
    Density,
}

/// Sorted axis with values, extended by even reflection when `mirror`.
fn sorted_axis(k: &[f64], mirror: bool) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = k.iter().copied().enumerate().map(|(i, x)| (x, i)).collect();
    if mirror {
        v.extend(k.iter().copied().enumerate().map(|(i, x)| (-x, i)));
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Linear interpolation weights on a sorted axis; constant outside.
fn locate(axis: &[(f64, usize)], x: f64) -> [(usize, f64); 2] {
    let n = axis.len();
    if x <= axis[0].0 {
        return [(axis[0].1, 1.0), (axis[0].1, 0.0)];
    }
    if x >= axis[n - 1].0 {
        return [(axis[n - 1].1, 1.0), (axis[n - 1].1, 0.0)];
    }
    let j = axis.partition_point(|p| p.0 <= x) - 1;
    let f = (x - axis[j].0) / (axis[j + 1].0 - axis[j].0);
    [(axis[j].1, 1.0 - f), (axis[j + 1].1, f)]
}

/// |ψ̃| on the v_y = 0 plane resampled to a square lattice symmetric about
/// zero, indexed [v_x][v_z].
pub fn fidelity_plane(grid: &Grid, dist: &VelocityDistribution) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = grid.shape();
    let (ax, az) = (0, 2);
    if shape[ax] < 2 || shape[az] < 2 {
        return Err(Error::Precondition("fidelity needs active x and z axes".into()));
    }
    let cyl = grid.is_cylindrical();
    let kx = sorted_axis(grid.wavenumber_axis(ax), cyl);
    let kz = sorted_axis(grid.wavenumber_axis(az), false);
    let step = |a: &[(f64, usize)]| a.windows(2).map(|w| w[1].0 - w[0].0).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    let du = step(&kx).min(step(&kz));
    let reach = |a: &[(f64, usize)]| a[0].0.abs().min(a[a.len() - 1].0.abs());
    let kmax = reach(&kx).min(reach(&kz));
    let half = (kmax / du).floor() as usize;
    let u: Vec<f64> = (0..=2 * half).map(|i| (i as f64 - half as f64) * du).collect();
    let iy = if shape[1] > 1 { zero_index(grid, 1) } else { 0 };
    let modulus: Vec<f64> = dist.amplitude.iter().map(|c| c.norm()).collect();
    let mut plane = vec![0.0; u.len() * u.len()];
    for (i, &vx) in u.iter().enumerate() {
        let wx = locate(&kx, vx);
        for (j, &vz) in u.iter().enumerate() {
            let wz = locate(&kz, vz);
            let mut s = 0.0;
            for (ix, fx) in wx {
                for (iz, fz) in wz {
                    if fx * fz != 0.0 {
                        s += fx * fz * modulus[grid.flat_index([ix, iy, iz])];
                    }
                }
            }
            plane[i * u.len() + j] = s;
        }
    }
    Ok((u.iter().map(|k| k * dist.velocity_per_k).collect(), plane))
}

/// Overlap between the v_y = 0 plane and its 90° rotation.
pub fn momentum_overlap_fidelity(grid: &Grid, dist: &VelocityDistribution, form: FidelityForm) -> Result<f64> {
    let (u, plane) = fidelity_plane(grid, dist)?;
    Ok(plane_fidelity(&plane, u.len(), form)?)
}

/// Fidelity of a square n×n plane indexed [v_x][v_z] on a lattice
/// symmetric about zero.
pub fn plane_fidelity(plane: &[f64], n: usize, form: FidelityForm) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let a = plane[i * n + j];
            let b = plane[j * n + i];
            match form {
                FidelityForm::Amplitude => {
                    num += a * b;
                    den += a * a;
                }
                FidelityForm::Density => {
                    num += a * a * b * b;
                    den += a.powi(4);
                }
            }
        }
    }
    if !(den > 0.0) {
        return Err(Error::Numerical("fidelity undefined for a zero-norm slice".into()));
    }
    Ok(num / den)
}

/// Options of the output analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub threshold: f64,
    pub fidelity_form: FidelityForm,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            threshold: MAIN_PEAK_THRESHOLD,
            fidelity_form: FidelityForm::Amplitude,
        }
    }
}

/// Metrics of one output component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub component: String,
    /// Initial atom number the fraction refers to.
    pub n_initial: f64,
    pub n_mp: f64,
    pub outcoupled_fraction: f64,
    /// m/s.
    pub mean_speed: Option<f64>,
    /// Shell widths along v_x and v_z, m/s; None when the fit failed.
    pub sigma_v: [Option<f64>; 2],
    /// Fitted shell radius along v_x and v_z, m/s.
    pub shell_center: [Option<f64>; 2],
    /// M σ²/k_B in K.
    pub t_eff: [Option<f64>; 2],
    pub fit_failed: bool,
    pub fidelity: Option<f64>,
    pub fidelity_form: FidelityForm,
    pub region: MainPeakRegion,
    /// Norms of all components at the analysis time.
    pub final_norms: [f64; 3],
}

pub fn effective_temperature(species: &SpeciesConstants, sigma_v: f64) -> f64 {
    species.mass * sigma_v * sigma_v / species.k_b
}

impl AnalysisReport {
    /// Recomputes T_eff from σ; returns an error on any mismatch.
    pub fn check_consistency(&self, species: &SpeciesConstants) -> Result<()> {
        for (s, t) in self.sigma_v.iter().zip(&self.t_eff) {
            match (s, t) {
                (Some(s), Some(t)) if effective_temperature(species, *s) == *t => {}
                (None, None) => {}
                _ => return Err(Error::Numerical("effective temperature does not match the fitted width".into())),
            }
        }
        if !(self.n_mp >= 0.0 && self.n_mp <= self.n_initial * (1.0 + 1e-9)) {
            return Err(Error::Numerical(format!("main-peak number {} outside [0, N]", self.n_mp)));
        }
        if self.fidelity.is_some_and(|f| f > 1.0 + 1e-12) {
            return Err(Error::Numerical("fidelity exceeds one".into()));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "component,n_initial,n_mp,outcoupled_fraction,mean_speed_um_s,sigma_vx_um_s,sigma_vz_um_s,t_eff_x_pk,t_eff_z_pk,fidelity,n_m1,n_0,n_p1"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>, s: f64| v.map(|x| format!("{}", x * s)).unwrap_or_default();
        let mut row = String::new();
        let _ = write!(
            row,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.component,
            self.n_initial,
            self.n_mp,
            self.outcoupled_fraction,
            opt(self.mean_speed, 1e6),
            opt(self.sigma_v[0], 1e6),
            opt(self.sigma_v[1], 1e6),
            opt(self.t_eff[0], 1e12),
            opt(self.t_eff[1], 1e12),
            opt(self.fidelity, 1.0),
            self.final_norms[0],
            self.final_norms[1],
            self.final_norms[2]
        );
        row
    }
}

/// Full analysis of one component field.
pub fn metrics(
    grid: &Grid,
    fields: &[Vec<C64>; 3],
    component: usize,
    n_initial: f64,
    species: &SpeciesConstants,
    options: &AnalysisOptions,
) -> Result<AnalysisReport> {
    let field = &fields[component];
    if field.iter().all(|c| c.norm_sqr() == 0.0) {
        // Nothing was outcoupled: report zero instead of failing the region search.
        return Ok(AnalysisReport {
            component: crate::zeeman::HyperfineLevel::ALL[component].label().into(),
            n_initial,
            n_mp: 0.0,
            outcoupled_fraction: 0.0,
            mean_speed: None,
            sigma_v: [None; 2],
            shell_center: [None; 2],
            t_eff: [None; 2],
            fit_failed: true,
            fidelity: None,
            fidelity_form: options.fidelity_form,
            region: MainPeakRegion::full(grid),
            final_norms: [0, 1, 2].map(|m| grid.norm(&fields[m])),
        });
    }
    let density = grid.density(field);
    let region = find_main_peak(grid, &density, options.threshold)?;
    metrics_in_region(grid, fields, component, n_initial, species, options, region)
}

/// As `metrics` with a given region.
pub fn metrics_in_region(
    grid: &Grid,
    fields: &[Vec<C64>; 3],
    component: usize,
    n_initial: f64,
    species: &SpeciesConstants,
    options: &AnalysisOptions,
    region: MainPeakRegion,
) -> Result<AnalysisReport> {
    let field = &fields[component];
    let dv = grid.volume_elements();
    let n_mp: f64 = field
        .iter()
        .enumerate()
        .filter(|(i, _)| region.contains(grid, grid.point(*i)))
        .map(|(i, c)| c.norm_sqr() * dv[i])
        .sum();
    let dist = restricted_momentum_density(grid, field, &region, species)?;
    let mean = mean_speed(grid, &dist);
    let mut sigma = [None; 2];
    let mut centers = [None; 2];
    for (slot, axis) in [0, 2].into_iter().enumerate() {
        if grid.shape()[axis] < 2 {
            continue;
        }
        let (v, d) = velocity_cut(grid, &dist, axis);
        if let Some(fit) = fit_gaussian(&v, &d) {
            sigma[slot] = Some(fit.sigma);
            centers[slot] = Some(fit.center);
        }
    }
    let fit_failed = sigma.iter().any(|s| s.is_none());
    if fit_failed {
        log::warn!("Gaussian fit of the velocity shell failed on at least one axis");
    }
    let fidelity = match momentum_overlap_fidelity(grid, &dist, options.fidelity_form) {
        Ok(f) => Some(f),
        Err(e) => {
            log::warn!("fidelity not computed: {e}");
            None
        }
    };
    let report = AnalysisReport {
        component: crate::zeeman::HyperfineLevel::ALL[component].label().into(),
        n_initial,
        n_mp,
        outcoupled_fraction: n_mp / n_initial,
        mean_speed: mean,
        sigma_v: sigma,
        shell_center: centers,
        t_eff: sigma.map(|s| s.map(|s| effective_temperature(species, s))),
        fit_failed,
        fidelity,
        fidelity_form: options.fidelity_form,
        region,
        final_norms: [0, 1, 2].map(|m| grid.norm(&fields[m])),
    };
    report.check_consistency(species)?;
    Ok(report)
}

/// Expected release energy of atoms outcoupled at time t: μ minus the
/// trapped-state potential on the resonance surface.
pub fn predicted_release_energy(schedule: &FieldSchedule, mu: f64, t: f64) -> f64 {
    let s = &schedule.species;
    let b_bot = schedule.state(t).b_bot + schedule.delta_b;
    let correction = (s.g_j - s.g_i).powi(2) * s.mu_b * b_bot / (4.0 * s.g_f.abs() * s.a_hfs);
    mu - s.hbar * schedule.detuning(t) / (1.0 + correction)
}

#[cfg(test)]
mod tests;
