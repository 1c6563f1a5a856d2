//! Spatial lattices and their spectral transforms.
//!
//! Two geometries are supported: a Cartesian lattice with up to three
//! periodic axes, and an axially symmetric (ρ, z) lattice whose radial
//! direction uses an orthogonalized quasi-discrete Hankel transform on the
//! zeros of J0. Fields are stored as physical values ψ(x) in row-major order
//! (axis 2 fastest). Momentum amplitudes follow the unitary continuous
//! convention ψ̃(k) = (2π)^{-d/2} ∫ e^{-ik·x} ψ(x) d^dx.

pub mod absorber;
pub mod bessel;
pub mod regrid;
pub mod snapshot;

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldmodel::FieldSchedule;

pub use absorber::{absorber_potential, AbsorbingLayer};

pub type C64 = Complex64;

/// Lattice description. Lengths are full extents in metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// Axes with count 1 are inert, which gives 1D and 2D lattices.
    Cartesian { counts: [usize; 3], extents: [f64; 3] },
    /// Radial nodes on (0, rho_max), periodic z on [−z_extent/2, z_extent/2).
    Cylindrical { n_rho: usize, rho_max: f64, n_z: usize, z_extent: f64 },
}

impl GridSpec {
    pub fn cartesian(counts: [usize; 3], extents: [f64; 3]) -> Self {
        GridSpec::Cartesian { counts, extents }
    }

    pub fn cylindrical(n_rho: usize, rho_max: f64, n_z: usize, z_extent: f64) -> Self {
        GridSpec::Cylindrical { n_rho, rho_max, n_z, z_extent }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("grid: {msg}")));
        match *self {
            GridSpec::Cartesian { counts, extents } => {
                for (n, l) in counts.iter().zip(extents) {
                    if *n == 0 || (*n > 1 && !n.is_power_of_two()) {
                        return bad(format!("axis count {n} must be 1 or a power of two"));
                    }
                    if *n > 1 && !(l.is_finite() && l > 0.0) {
                        return bad(format!("axis extent {l} must be positive"));
                    }
                }
            }
            GridSpec::Cylindrical { n_rho, rho_max, n_z, z_extent } => {
                if n_rho < 2 {
                    return bad(format!("n_rho = {n_rho} is too small"));
                }
                if n_z < 2 || !n_z.is_power_of_two() {
                    return bad(format!("n_z = {n_z} must be a power of two"));
                }
                if !(rho_max.is_finite() && rho_max > 0.0 && z_extent.is_finite() && z_extent > 0.0) {
                    return bad("extents must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        match *self {
            GridSpec::Cartesian { counts, .. } => counts,
            GridSpec::Cylindrical { n_rho, n_z, .. } => [n_rho, 1, n_z],
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_cylindrical(&self) -> bool {
        matches!(self, GridSpec::Cylindrical { .. })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Cartesian { counts, extents } => write!(
                f,
                "cartesian {}x{}x{} over ({:.1}, {:.1}, {:.1}) um",
                counts[0],
                counts[1],
                counts[2],
                extents[0] * 1e6,
                extents[1] * 1e6,
                extents[2] * 1e6
            ),
            GridSpec::Cylindrical { n_rho, rho_max, n_z, z_extent } => {
                write!(
                    f,
                    "cylindrical {n_rho}x{n_z} over rho < {:.1} um, |z| < {:.1} um",
                    rho_max * 1e6,
                    z_extent * 0.5e6
                )
            }
        }
    }
}

enum Transform {
    Cartesian {
        fwd: [Option<Arc<dyn Fft<f64>>>; 3],
        inv: [Option<Arc<dyn Fft<f64>>>; 3],
    },
    Cylindrical {
        /// Symmetric orthogonal involution, row-major n_rho × n_rho.
        hankel: Vec<f64>,
        /// sqrt(2π·w_n·dz) per radial node.
        radial_scale: Vec<f64>,
        fwd: Arc<dyn Fft<f64>>,
        inv: Arc<dyn Fft<f64>>,
    },
}

/// A realized lattice with precomputed weights and transforms.
pub struct Grid {
    spec: GridSpec,
    shape: [usize; 3],
    coords: [Vec<f64>; 3],
    wavenumbers: [Vec<f64>; 3],
    dv: Vec<f64>,
    dvk: Vec<f64>,
    k2: Vec<f64>,
    momentum_scale: Vec<f64>,
    transform: Transform,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("spec", &self.spec).finish()
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<C64>> = const { RefCell::new(Vec::new()) };
}

fn fft_axis_coords(n: usize, extent: f64) -> (Vec<f64>, Vec<f64>, f64) {
    if n == 1 {
        return (vec![0.0], vec![0.0], 1.0);
    }
    let d = extent / n as f64;
    let x = (0..n).map(|j| (j as f64 - (n / 2) as f64) * d).collect();
    let dk = 2.0 * PI / extent;
    let k = (0..n).map(|j| if j < n / 2 { j as f64 * dk } else { (j as f64 - n as f64) * dk }).collect();
    (x, k, d)
}

fn parity_sign(j: usize) -> f64 {
    if j % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Orthogonalized Hankel matrix and the radial/spectral weights.
fn hankel_matrix(n: usize, rho_max: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let zeros = bessel::j0_zeros(n + 1);
    let s = zeros[n];
    let j1abs: Vec<f64> = zeros[..n].iter().map(|&z| bessel::j1(z).abs()).collect();
    let mut c = nalgebra::DMatrix::<f64>::zeros(n, n);
    for m in 0..n {
        for k in 0..n {
            c[(m, k)] = 2.0 * bessel::j0(zeros[m] * zeros[k] / s) / (s * j1abs[m] * j1abs[k]);
        }
    }
    // Löwdin: C (C²)^{-1/2} is the nearest orthogonal matrix and stays symmetric.
    let c2 = &c * &c;
    let eig = nalgebra::SymmetricEigen::new(c2);
    let inv_sqrt = nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let correction = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let orth = &c * correction;
    let mut hankel = vec![0.0; n * n];
    for m in 0..n {
        for k in 0..n {
            hankel[m * n + k] = 0.5 * (orth[(m, k)] + orth[(k, m)]);
        }
    }
    let rho: Vec<f64> = zeros[..n].iter().map(|z| z * rho_max / s).collect();
    let kr: Vec<f64> = zeros[..n].iter().map(|z| z / rho_max).collect();
    let kmax = s / rho_max;
    let w: Vec<f64> = j1abs.iter().map(|j| 2.0 * rho_max * rho_max / (s * s * j * j)).collect();
    let wk: Vec<f64> = j1abs.iter().map(|j| 2.0 * kmax * kmax / (s * s * j * j)).collect();
    (hankel, rho, kr, w, wk)
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let shape = spec.shape();
        let len = spec.len();
        let mut planner = FftPlanner::new();
        match spec {
            GridSpec::Cartesian { counts, extents } => {
                let mut coords: [Vec<f64>; 3] = Default::default();
                let mut ks: [Vec<f64>; 3] = Default::default();
                let mut dv = 1.0;
                let mut dims = 0;
                let mut fwd: [Option<Arc<dyn Fft<f64>>>; 3] = [None, None, None];
                let mut inv: [Option<Arc<dyn Fft<f64>>>; 3] = [None, None, None];
                for a in 0..3 {
                    let (x, k, d) = fft_axis_coords(counts[a], extents[a]);
                    coords[a] = x;
                    ks[a] = k;
                    if counts[a] > 1 {
                        dv *= d;
                        dims += 1;
                        fwd[a] = Some(planner.plan_fft_forward(counts[a]));
                        inv[a] = Some(planner.plan_fft_inverse(counts[a]));
                    }
                }
                let dvk_val = (2.0 * PI).powi(dims) / (len as f64 * dv);
                let norm = dv / (2.0 * PI).powf(dims as f64 / 2.0);
                let mut k2 = Vec::with_capacity(len);
                let mut momentum_scale = Vec::with_capacity(len);
                for i0 in 0..shape[0] {
                    for i1 in 0..shape[1] {
                        for i2 in 0..shape[2] {
                            k2.push(ks[0][i0].powi(2) + ks[1][i1].powi(2) + ks[2][i2].powi(2));
                            momentum_scale.push(norm * parity_sign(i0 + i1 + i2));
                        }
                    }
                }
                Ok(Grid {
                    spec,
                    shape,
                    coords,
                    wavenumbers: ks,
                    dv: vec![dv; len],
                    dvk: vec![dvk_val; len],
                    k2,
                    momentum_scale,
                    transform: Transform::Cartesian { fwd, inv },
                })
            }
            GridSpec::Cylindrical { n_rho, rho_max, n_z, z_extent } => {
                let (hankel, rho, kr, w, wk) = hankel_matrix(n_rho, rho_max);
                let (z, kz, dz) = fft_axis_coords(n_z, z_extent);
                let dkz = 2.0 * PI / z_extent;
                let mut dv = Vec::with_capacity(len);
                let mut dvk = Vec::with_capacity(len);
                let mut k2 = Vec::with_capacity(len);
                let mut momentum_scale = Vec::with_capacity(len);
                for r in 0..n_rho {
                    for (iz, kzv) in kz.iter().enumerate() {
                        dv.push(2.0 * PI * w[r] * dz);
                        let dvk_v = 2.0 * PI * wk[r] * dkz;
                        dvk.push(dvk_v);
                        k2.push(kr[r] * kr[r] + kzv * kzv);
                        momentum_scale.push(parity_sign(iz) / (n_z as f64 * dvk_v).sqrt());
                    }
                }
                let radial_scale = w.iter().map(|wr| (2.0 * PI * wr * dz).sqrt()).collect();
                Ok(Grid {
                    spec,
                    shape,
                    coords: [rho, vec![0.0], z],
                    wavenumbers: [kr, vec![0.0], kz],
                    dv,
                    dvk,
                    k2,
                    momentum_scale,
                    transform: Transform::Cylindrical {
                        hankel,
                        radial_scale,
                        fwd: planner.plan_fft_forward(n_z),
                        inv: planner.plan_fft_inverse(n_z),
                    },
                })
            }
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.dv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dv.is_empty()
    }

    pub fn is_cylindrical(&self) -> bool {
        self.spec.is_cylindrical()
    }

    /// Node coordinates per axis; for the cylindrical lattice these are (ρ, —, z).
    pub fn axis(&self, a: usize) -> &[f64] {
        &self.coords[a]
    }

    /// Wavenumbers per axis in storage order.
    pub fn wavenumber_axis(&self, a: usize) -> &[f64] {
        &self.wavenumbers[a]
    }

    pub fn flat_index(&self, i: [usize; 3]) -> usize {
        (i[0] * self.shape[1] + i[1]) * self.shape[2] + i[2]
    }

    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let i2 = idx % self.shape[2];
        let rest = idx / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], i2]
    }

    /// Position of a node. Cylindrical nodes report (ρ, 0, z).
    pub fn point(&self, idx: usize) -> [f64; 3] {
        let i = self.unflatten(idx);
        [self.coords[0][i[0]], self.coords[1][i[1]], self.coords[2][i[2]]]
    }

    /// Wave vector of a spectral node. Cylindrical nodes report (k_ρ, 0, k_z).
    pub fn wavevector(&self, idx: usize) -> [f64; 3] {
        let i = self.unflatten(idx);
        [self.wavenumbers[0][i[0]], self.wavenumbers[1][i[1]], self.wavenumbers[2][i[2]]]
    }

    pub fn volume_elements(&self) -> &[f64] {
        &self.dv
    }

    pub fn momentum_volume_elements(&self) -> &[f64] {
        &self.dvk
    }

    pub fn k_squared(&self) -> &[f64] {
        &self.k2
    }

    /// Half-extent of each axis (ρ_max for the radial axis); zero for inert axes.
    pub fn half_extents(&self) -> [f64; 3] {
        match self.spec {
            GridSpec::Cartesian { counts, extents } => [0, 1, 2].map(|a| if counts[a] > 1 { extents[a] / 2.0 } else { 0.0 }),
            GridSpec::Cylindrical { rho_max, z_extent, .. } => [rho_max, 0.0, z_extent / 2.0],
        }
    }

    /// Largest representable wavenumber per axis.
    pub fn nyquist(&self) -> [f64; 3] {
        let m = |a: usize| self.wavenumbers[a].iter().fold(0.0f64, |acc, k| acc.max(k.abs()));
        [m(0), m(1), m(2)]
    }

    /// Largest node spacing per axis, zero for inert axes.
    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let c = &self.coords[a];
            c.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
        })
    }

    pub fn zeros(&self) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); self.len()]
    }

    pub fn from_fn(&self, mut f: impl FnMut([f64; 3]) -> C64) -> Vec<C64> {
        (0..self.len()).map(|i| f(self.point(i))).collect()
    }

    pub fn density(&self, field: &[C64]) -> Vec<f64> {
        field.iter().map(|c| c.norm_sqr()).collect()
    }

    /// ∫|ψ|² dV.
    pub fn norm(&self, field: &[C64]) -> f64 {
        field.iter().zip(&self.dv).map(|(c, w)| c.norm_sqr() * w).sum()
    }

    /// ∫ f dV for a scalar field.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.dv).map(|(v, w)| v * w).sum()
    }

    /// ∫|ψ̃|² dV_k for a momentum-space field.
    pub fn momentum_norm(&self, field: &[C64]) -> f64 {
        field.iter().zip(&self.dvk).map(|(c, w)| c.norm_sqr() * w).sum()
    }

    pub fn to_momentum(&self, field: &[C64]) -> Vec<C64> {
        let mut out = field.to_vec();
        self.to_momentum_in_place(&mut out);
        out
    }

    pub fn from_momentum(&self, field: &[C64]) -> Vec<C64> {
        let mut out = field.to_vec();
        self.from_momentum_in_place(&mut out);
        out
    }

    pub fn to_momentum_in_place(&self, field: &mut [C64]) {
        self.forward_raw(field);
        for (c, s) in field.iter_mut().zip(&self.momentum_scale) {
            *c *= *s;
        }
    }

    pub fn from_momentum_in_place(&self, field: &mut [C64]) {
        for (c, s) in field.iter_mut().zip(&self.momentum_scale) {
            *c /= *s;
        }
        self.inverse_raw(field);
    }

    /// Applies a diagonal operator in the spectral basis: ψ ← F⁻¹ diag(m) F ψ.
    pub fn apply_spectral(&self, field: &mut [C64], multiplier: &[C64]) {
        assert_eq!(multiplier.len(), self.len());
        self.forward_raw(field);
        for (c, m) in field.iter_mut().zip(multiplier) {
            *c *= *m;
        }
        self.inverse_raw(field);
    }

    /// Same as `apply_spectral` for a real multiplier.
    pub fn apply_spectral_real(&self, field: &mut [C64], multiplier: &[f64]) {
        assert_eq!(multiplier.len(), self.len());
        self.forward_raw(field);
        for (c, m) in field.iter_mut().zip(multiplier) {
            *c *= *m;
        }
        self.inverse_raw(field);
    }

    /// ħ²k²/2M at every spectral node.
    pub fn kinetic_energies(&self, mass: f64, hbar: f64) -> Vec<f64> {
        self.k2.iter().map(|k2| hbar * hbar * k2 / (2.0 * mass)).collect()
    }

    /// exp(−i·T·dt/ħ) in the spectral basis, or exp(−T·dτ/ħ) when `imaginary`.
    pub fn kinetic_propagator(&self, mass: f64, hbar: f64, dt: f64, imaginary: bool) -> Vec<C64> {
        self.k2
            .iter()
            .map(|k2| {
                let x = hbar * k2 / (2.0 * mass) * dt;
                if imaginary {
                    C64::new((-x).exp(), 0.0)
                } else {
                    C64::from_polar(1.0, -x)
                }
            })
            .collect()
    }

    /// Free evolution over `dt` (exact in the spectral basis).
    pub fn apply_kinetic_phase(&self, field: &mut [C64], mass: f64, hbar: f64, dt: f64) {
        if dt == 0.0 {
            return;
        }
        let p = self.kinetic_propagator(mass, hbar, dt, false);
        self.apply_spectral(field, &p);
    }

    /// Tψ computed spectrally.
    pub fn apply_kinetic_operator(&self, field: &[C64], mass: f64, hbar: f64) -> Vec<C64> {
        let mut out = field.to_vec();
        let t = self.kinetic_energies(mass, hbar);
        self.apply_spectral_real(&mut out, &t);
        out
    }

    /// Unnormalized forward transform into the internal spectral basis.
    fn forward_raw(&self, field: &mut [C64]) {
        assert_eq!(field.len(), self.len(), "field does not match grid");
        match &self.transform {
            Transform::Cartesian { fwd, .. } => {
                for a in (0..3).rev() {
                    if let Some(f) = &fwd[a] {
                        self.fft_axis(field, a, f.as_ref());
                    }
                }
            }
            Transform::Cylindrical { hankel, radial_scale, fwd, .. } => {
                let nz = self.shape[2];
                for (row, s) in field.chunks_exact_mut(nz).zip(radial_scale) {
                    for c in row.iter_mut() {
                        *c *= *s;
                    }
                }
                fwd.process(field);
                self.radial_multiply(hankel, field);
            }
        }
    }

    /// Inverse of `forward_raw`, including normalization.
    fn inverse_raw(&self, field: &mut [C64]) {
        assert_eq!(field.len(), self.len(), "field does not match grid");
        match &self.transform {
            Transform::Cartesian { inv, .. } => {
                for a in 0..3 {
                    if let Some(f) = &inv[a] {
                        self.fft_axis(field, a, f.as_ref());
                    }
                }
                let n = 1.0 / self.len() as f64;
                for c in field.iter_mut() {
                    *c *= n;
                }
            }
            Transform::Cylindrical { hankel, radial_scale, inv, .. } => {
                let nz = self.shape[2];
                self.radial_multiply(hankel, field);
                inv.process(field);
                for (row, s) in field.chunks_exact_mut(nz).zip(radial_scale) {
                    let f = 1.0 / (s * nz as f64);
                    for c in row.iter_mut() {
                        *c *= f;
                    }
                }
            }
        }
    }

    fn fft_axis(&self, field: &mut [C64], axis: usize, fft: &dyn Fft<f64>) {
        let [n0, n1, n2] = self.shape;
        if axis == 2 {
            fft.process(field);
            return;
        }
        let (n, stride, outer, inner) = if axis == 1 { (n1, n2, n0, n2) } else { (n0, n1 * n2, 1, n1 * n2) };
        let mut line = vec![C64::new(0.0, 0.0); n];
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for o in 0..outer {
            let base = o * n * stride;
            for i in 0..inner {
                for (j, l) in line.iter_mut().enumerate() {
                    *l = field[base + j * stride + i];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (j, l) in line.iter().enumerate() {
                    field[base + j * stride + i] = *l;
                }
            }
        }
    }

    /// field ← H · field with H acting on the radial index.
    fn radial_multiply(&self, hankel: &[f64], field: &mut [C64]) {
        let nr = self.shape[0];
        let cols = 2 * self.shape[2];
        SCRATCH.with(|cell| {
            let mut out = cell.borrow_mut();
            out.resize(field.len(), C64::new(0.0, 0.0));
            {
                let b: &[f64] = bytemuck::cast_slice(field);
                let c: &mut [f64] = bytemuck::cast_slice_mut(&mut out[..]);
                // SAFETY: dimensions match the slice lengths: hankel is nr×nr,
                // b and c are nr×cols, all row-major and non-overlapping.
                unsafe {
                    matrixmultiply::dgemm(
                        nr,
                        nr,
                        cols,
                        1.0,
                        hankel.as_ptr(),
                        nr as isize,
                        1,
                        b.as_ptr(),
                        cols as isize,
                        1,
                        0.0,
                        c.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
            }
            field.copy_from_slice(&out[..field.len()]);
        });
    }
}

/// Axially symmetric (ρ, z) lattice equivalent to a Cartesian one: the
/// radial axis spans half of the x extent with half as many nodes.
pub fn reduce_cylindrical(spec3d: &GridSpec, schedule: &FieldSchedule) -> Result<GridSpec> {
    let GridSpec::Cartesian { counts, extents } = *spec3d else {
        return Err(Error::Precondition("reduce_cylindrical expects a Cartesian grid".into()));
    };
    if counts[0] != counts[1] || (extents[0] - extents[1]).abs() > 1e-12 * extents[0] || counts[0] < 4 {
        return Err(Error::Precondition("transverse axes must be identical for the cylindrical reduction".into()));
    }
    if !schedule.is_axially_symmetric() {
        return Err(Error::Precondition("schedule is not axially symmetric about z (ω_x ≠ ω_y)".into()));
    }
    let spec = GridSpec::Cylindrical {
        n_rho: counts[0] / 2,
        rho_max: extents[0] / 2.0,
        n_z: counts[2],
        z_extent: extents[2],
    };
    spec.validate()?;
    Ok(spec)
}

/// Verifies that the lattice resolves a given velocity with a safety factor.
pub fn check_nyquist(grid: &Grid, velocity: f64, mass: f64, hbar: f64, factor: f64) -> Result<()> {
    let k_needed = factor * mass * velocity / hbar;
    let ny = grid.nyquist();
    let shape = grid.shape();
    for a in 0..3 {
        if shape[a] > 1 && ny[a] < k_needed {
            return Err(Error::Check(format!(
                "axis {a}: Nyquist wavenumber {:.3e} 1/m is below {factor}× the expected momentum {:.3e} 1/m",
                ny[a],
                mass * velocity / hbar
            )));
        }
    }
    Ok(())
}
