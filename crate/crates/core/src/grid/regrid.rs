//! Spectral interpolation of fields between lattices of the same geometry.
//!
//! The old field is expanded in its own basis (Fourier modes along periodic
//! axes, J0(k_m ρ) radially) and the series is evaluated on the new nodes.
//! Nodes outside the old domain receive zero.

use super::{bessel, Grid, GridSpec, C64};
use crate::error::{Error, Result};

/// Fraction of the momentum-space norm the new lattice cannot represent.
pub fn unresolved_fraction(old: &Grid, field: &[C64], new: &Grid) -> f64 {
    let ny = new.nyquist();
    let shape = new.shape();
    let spec = old.to_momentum(field);
    let total = old.momentum_norm(&spec);
    if total == 0.0 {
        return 0.0;
    }
    let dvk = old.momentum_volume_elements();
    let lost: f64 = spec
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let k = old.wavevector(*i);
            (0..3).any(|a| shape[a] > 1 && k[a].abs() > ny[a] * (1.0 + 1e-12))
        })
        .map(|(i, c)| c.norm_sqr() * dvk[i])
        .sum();
    lost / total
}

/// Interpolates one field onto `new`.
pub fn regrid(old: &Grid, field: &[C64], new: &Grid) -> Result<Vec<C64>> {
    Ok(Regridder::new(old, new)?.apply(field))
}

/// Precomputed interpolation operators, reusable for several components.
pub struct Regridder {
    old_shape: [usize; 3],
    new_shape: [usize; 3],
    /// Row-major (new × old) real matrices per axis; `None` for inert axes.
    axes: [Option<Vec<f64>>; 3],
}

/// Trigonometric interpolation kernel of an n-point periodic axis, with the
/// Nyquist mode split symmetrically so that real data stay real.
fn fourier_matrix(old_x: &[f64], extent: f64, new_x: &[f64]) -> Vec<f64> {
    let n = old_x.len();
    let half = extent / 2.0;
    let dk = 2.0 * std::f64::consts::PI / extent;
    let mut m = vec![0.0; new_x.len() * n];
    for (i, &x) in new_x.iter().enumerate() {
        if x < -half - 1e-12 * extent || x >= half - 1e-12 * extent {
            continue;
        }
        for (j, &xj) in old_x.iter().enumerate() {
            let d = x - xj;
            let mut s = 1.0;
            for k in 1..n / 2 {
                s += 2.0 * (k as f64 * dk * d).cos();
            }
            s += ((n / 2) as f64 * dk * d).cos();
            m[i * n + j] = s / n as f64;
        }
    }
    m
}

fn bessel_matrix(old_rho: &[f64], rho_max: f64, new_rho: &[f64]) -> Result<Vec<f64>> {
    let n = old_rho.len();
    let zeros = bessel::j0_zeros(n);
    let k: Vec<f64> = zeros.iter().map(|z| z / rho_max).collect();
    let basis = nalgebra::DMatrix::from_fn(n, n, |r, m| bessel::j0(k[m] * old_rho[r]));
    let inv = basis
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular radial interpolation basis".into()))?;
    let eval = nalgebra::DMatrix::from_fn(new_rho.len(), n, |i, m| if new_rho[i] < rho_max { bessel::j0(k[m] * new_rho[i]) } else { 0.0 });
    let op = eval * inv;
    let mut out = vec![0.0; new_rho.len() * n];
    for i in 0..new_rho.len() {
        for j in 0..n {
            out[i * n + j] = op[(i, j)];
        }
    }
    Ok(out)
}

impl Regridder {
    pub fn new(old: &Grid, new: &Grid) -> Result<Self> {
        let mut axes: [Option<Vec<f64>>; 3] = [None, None, None];
        match (old.spec(), new.spec()) {
            (GridSpec::Cartesian { counts: c0, extents: e0 }, GridSpec::Cartesian { counts: c1, .. }) => {
                for a in 0..3 {
                    if (c0[a] == 1) != (c1[a] == 1) {
                        return Err(Error::Precondition("regrid cannot add or remove an axis".into()));
                    }
                    if c0[a] > 1 {
                        axes[a] = Some(fourier_matrix(old.axis(a), e0[a], new.axis(a)));
                    }
                }
            }
            (GridSpec::Cylindrical { rho_max, z_extent, .. }, GridSpec::Cylindrical { .. }) => {
                axes[0] = Some(bessel_matrix(old.axis(0), *rho_max, new.axis(0))?);
                axes[2] = Some(fourier_matrix(old.axis(2), *z_extent, new.axis(2)));
            }
            _ => return Err(Error::Precondition("regrid requires matching geometries".into())),
        }
        Ok(Regridder {
            old_shape: old.shape(),
            new_shape: new.shape(),
            axes,
        })
    }

    pub fn apply(&self, field: &[C64]) -> Vec<C64> {
        assert_eq!(field.len(), self.old_shape.iter().product::<usize>());
        let mut data = field.to_vec();
        let mut shape = self.old_shape;
        for a in (0..3).rev() {
            if let Some(m) = &self.axes[a] {
                let n_new = self.new_shape[a];
                data = apply_along_axis(&data, shape, a, m, n_new);
                shape[a] = n_new;
            }
        }
        data
    }
}

fn apply_along_axis(data: &[C64], shape: [usize; 3], axis: usize, m: &[f64], n_new: usize) -> Vec<C64> {
    let n_old = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![C64::new(0.0, 0.0); outer * n_new * inner];
    // Each outer block is an (n_old × inner) complex matrix; multiply from the left.
    for o in 0..outer {
        let src: &[f64] = bytemuck::cast_slice(&data[o * n_old * inner..(o + 1) * n_old * inner]);
        let dst: &mut [f64] = bytemuck::cast_slice_mut(&mut out[o * n_new * inner..(o + 1) * n_new * inner]);
        let cols = 2 * inner;
        // SAFETY: m is n_new×n_old, src is n_old×cols, dst is n_new×cols, all row-major.
        unsafe {
            matrixmultiply::dgemm(
                n_new,
                n_old,
                cols,
                1.0,
                m.as_ptr(),
                n_old as isize,
                1,
                src.as_ptr(),
                cols as isize,
                1,
                0.0,
                dst.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(g: &Grid, s: f64, kz: f64) -> Vec<C64> {
        g.from_fn(|p| C64::from_polar((-(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / (2.0 * s * s)).exp(), kz * p[2]))
    }

    #[test]
    fn cylindrical_expansion_preserves_field() {
        let old = Grid::new(GridSpec::cylindrical(48, 24e-6, 64, 48e-6)).unwrap();
        let new = Grid::new(GridSpec::cylindrical(80, 40e-6, 128, 80e-6)).unwrap();
        let f = gaussian(&old, 3e-6, 5e5);
        let moved = regrid(&old, &f, &new).unwrap();
        let exact = gaussian(&new, 3e-6, 5e5);
        let err = moved.iter().zip(&exact).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-8, "max error {err}");
        assert!((new.norm(&moved) / old.norm(&f) - 1.0).abs() < 1e-8);
        assert!(unresolved_fraction(&old, &f, &new) < 1e-12);
    }

    #[test]
    fn cartesian_refinement_and_coarsening() {
        let old = Grid::new(GridSpec::cartesian([32, 1, 64], [20e-6, 1.0, 40e-6])).unwrap();
        let new = Grid::new(GridSpec::cartesian([64, 1, 32], [32e-6, 1.0, 60e-6])).unwrap();
        let f = gaussian(&old, 1.5e-6, 0.0);
        let moved = regrid(&old, &f, &new).unwrap();
        let exact = gaussian(&new, 1.5e-6, 0.0);
        let err = moved.iter().zip(&exact).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
        let fast = gaussian(&old, 1.5e-6, 2.5e6);
        assert!(unresolved_fraction(&old, &fast, &new) > 0.1);
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let a = Grid::new(GridSpec::cylindrical(8, 5e-6, 16, 10e-6)).unwrap();
        let b = Grid::new(GridSpec::cartesian([16, 16, 16], [1e-5; 3])).unwrap();
        assert!(Regridder::new(&a, &b).is_err());
    }
}
