use super::*;
use crate::fieldmodel::{self, HarmonicTrapSpec};
use crate::grid::GridSpec;
use crate::units::{angular_from_hz, tesla_from_gauss, PLANCK};
use approx::assert_relative_eq;
use proptest::prelude::*;
use std::f64::consts::PI;

fn species() -> SpeciesConstants {
    SpeciesConstants::rb87()
}

fn gaussian(grid: &Grid, sigma: [f64; 3], center: [f64; 3]) -> Vec<C64> {
    grid.from_fn(|p| {
        let mut e = 0.0;
        for a in 0..3 {
            if sigma[a] > 0.0 {
                e += (p[a] - center[a]).powi(2) / (4.0 * sigma[a] * sigma[a]);
            }
        }
        C64::new((-e).exp(), 0.0)
    })
}

fn all3(f: Vec<C64>, grid: &Grid) -> [Vec<C64>; 3] {
    [grid.zeros(), f, grid.zeros()]
}

#[test]
fn isotropic_gaussian_semi_axes() {
    // Density σ, threshold crossing at σ·sqrt(2 ln 1000).
    let sigma = 2e-6;
    let expected = sigma * (2.0 * 1000f64.ln()).sqrt();
    let cart = Grid::new(GridSpec::cartesian([64, 64, 64], [40e-6; 3])).unwrap();
    let f = gaussian(&cart, [sigma; 3], [0.0; 3]);
    let r = find_main_peak(&cart, &cart.density(&f), 1e-3).unwrap();
    for a in 0..3 {
        assert_relative_eq!(r.semi_axes[a], expected, max_relative = 5e-3);
        assert!(r.center[a].abs() < 1e-3 * sigma);
    }
    assert!(!r.clipped);
    let cyl = Grid::new(GridSpec::cylindrical(64, 20e-6, 128, 40e-6)).unwrap();
    let f = gaussian(&cyl, [sigma, 0.0, sigma], [0.0, 0.0, 3e-6]);
    let r = find_main_peak(&cyl, &cyl.density(&f), 1e-3).unwrap();
    assert_relative_eq!(r.semi_axes[0], expected, max_relative = 5e-3);
    assert_relative_eq!(r.semi_axes[1], expected, max_relative = 5e-3);
    assert_relative_eq!(r.semi_axes[2], expected, max_relative = 5e-3);
    assert!((r.center[2] - 3e-6).abs() < 1e-3 * sigma);
}

#[test]
fn anisotropic_gaussian_axes_scale_with_width() {
    let grid = Grid::new(GridSpec::cylindrical(64, 24e-6, 128, 60e-6)).unwrap();
    let f = gaussian(&grid, [1.5e-6, 0.0, 3.5e-6], [0.0; 3]);
    let r = find_main_peak(&grid, &grid.density(&f), 1e-3).unwrap();
    assert_relative_eq!(r.semi_axes[2] / r.semi_axes[0], 3.5 / 1.5, max_relative = 1e-2);
}

#[test]
fn shell_is_enclosed_and_clipping_flagged() {
    let grid = Grid::new(GridSpec::cylindrical(64, 30e-6, 128, 60e-6)).unwrap();
    let f = grid.from_fn(|p| {
        let r = (p[0] * p[0] + p[2] * p[2]).sqrt();
        C64::new((-(r - 10e-6).powi(2) / (2.0 * 1e-12)).exp(), 0.0)
    });
    let r = find_main_peak(&grid, &grid.density(&f), 1e-3).unwrap();
    let inside = metrics_in_region(&grid, &all3(f.clone(), &grid), 1, 1.0, &species(), &AnalysisOptions::default(), r.clone()).unwrap();
    assert!(inside.n_mp / grid.norm(&f) > 0.999);
    assert!(r.semi_axes[0] > 10e-6 && r.semi_axes[0] < 15e-6);

    let wide = gaussian(&grid, [20e-6, 0.0, 20e-6], [0.0; 3]);
    let r = find_main_peak(&grid, &grid.density(&wide), 1e-3).unwrap();
    assert!(r.clipped);
}

#[test]
fn rejects_bad_density() {
    let grid = Grid::new(GridSpec::cylindrical(8, 10e-6, 16, 20e-6)).unwrap();
    assert!(find_main_peak(&grid, &vec![0.0; grid.len()], 1e-3).is_err());
    let mut d = vec![1.0; grid.len()];
    d[3] = -1.0;
    assert!(find_main_peak(&grid, &d, 1e-3).is_err());
}

#[test]
fn empty_component_reports_zero() {
    let grid = Grid::new(GridSpec::cylindrical(8, 10e-6, 16, 20e-6)).unwrap();
    let fields = [gaussian(&grid, [2e-6, 0.0, 2e-6], [0.0; 3]), grid.zeros(), grid.zeros()];
    let r = metrics(&grid, &fields, 1, 1e5, &SpeciesConstants::rb87(), &AnalysisOptions::default()).unwrap();
    assert_eq!(r.n_mp, 0.0);
    assert_eq!(r.outcoupled_fraction, 0.0);
    assert!(r.mean_speed.is_none() && r.fidelity.is_none());
    assert!(r.final_norms[0] > 0.0);
}

#[test]
fn mask_partitions_the_norm() {
    let grid = Grid::new(GridSpec::cylindrical(48, 20e-6, 128, 40e-6)).unwrap();
    let f = gaussian(&grid, [3e-6, 0.0, 5e-6], [0.0, 0.0, 2e-6]);
    let region = MainPeakRegion {
        center: [0.0, 0.0, 1e-6],
        semi_axes: [4e-6, 4e-6, 6e-6],
        threshold: 0.0,
        clipped: false,
    };
    let mask = region.mask(&grid);
    let dv = grid.volume_elements();
    let outside: f64 = f.iter().zip(&mask).zip(dv).filter(|((_, m), _)| !**m).map(|((c, _), w)| c.norm_sqr() * w).sum();
    let rep = metrics_in_region(&grid, &all3(f.clone(), &grid), 1, 1.0, &species(), &AnalysisOptions::default(), region).unwrap();
    let norm = grid.norm(&f);
    assert!((rep.n_mp + outside - norm).abs() < 1e-10 * norm);
}

#[test]
fn full_region_is_ordinary_transform() {
    let s = species();
    let grid = Grid::new(GridSpec::cylindrical(32, 15e-6, 64, 30e-6)).unwrap();
    let f = gaussian(&grid, [2e-6, 0.0, 3e-6], [0.0; 3]);
    let d = restricted_momentum_density(&grid, &f, &MainPeakRegion::full(&grid), &s).unwrap();
    let k = grid.to_momentum(&f);
    let scale = (s.hbar / s.mass).powf(-1.5);
    for (a, b) in d.amplitude.iter().zip(&k) {
        assert!((a - b * scale).norm() <= 1e-12 * scale * k.iter().fold(0.0f64, |m, c| m.max(c.norm())));
    }
    let w = d.weights(&grid);
    let nv: f64 = d.density().iter().zip(&w).map(|(p, w)| p * w).sum();
    assert_relative_eq!(nv, grid.norm(&f), max_relative = 1e-10);
}

#[test]
fn masked_plane_wave_peaks_at_its_velocity() {
    let s = species();
    let grid = Grid::new(GridSpec::cartesian([64, 1, 64], [40e-6, 1.0, 40e-6])).unwrap();
    let kx = 2.0 * PI / 40e-6 * 6.0;
    let f = grid.from_fn(|p| C64::from_polar(1.0, kx * p[0]));
    let region = MainPeakRegion {
        center: [0.0; 3],
        semi_axes: [8e-6, 0.0, 8e-6],
        threshold: 0.0,
        clipped: false,
    };
    let d = restricted_momentum_density(&grid, &f, &region, &s).unwrap();
    let dens = d.density();
    let i = dens.iter().enumerate().fold((0, 0.0), |a, (i, &x)| if x > a.1 { (i, x) } else { a }).0;
    let v = grid.wavevector(i).map(|k| k * d.velocity_per_k);
    assert_relative_eq!(v[0], s.hbar * kx / s.mass, max_relative = 1e-12);
    assert!(v[2].abs() < 1e-15);
}

/// Field whose velocity density is a thin isotropic shell of radius v0.
fn shell_state(grid: &Grid, s: &SpeciesConstants, v0: f64, width: f64) -> Vec<C64> {
    let n = grid.len();
    let mut amp: Vec<C64> = (0..n)
        .map(|i| {
            let v = grid.k_squared()[i].sqrt() * s.hbar / s.mass;
            C64::new((-(v - v0).powi(2) / (4.0 * width * width)).exp(), 0.0)
        })
        .collect();
    grid.from_momentum_in_place(&mut amp);
    amp
}

#[test]
fn thin_shell_mean_speed_and_isotropy() {
    let s = species();
    let grid = Grid::new(GridSpec::cylindrical(96, 40e-6, 256, 80e-6)).unwrap();
    let (v0, w) = (600e-6, 80e-6);
    let f = shell_state(&grid, &s, v0, w);
    let d = restricted_momentum_density(&grid, &f, &MainPeakRegion::full(&grid), &s).unwrap();
    let v = mean_speed(&grid, &d).unwrap();
    // ⟨v⟩ for a v²-weighted Gaussian shell of density width w.
    let e = (w / v0).powi(2);
    assert_relative_eq!(v, v0 * (1.0 + 3.0 * e) / (1.0 + e), max_relative = 1e-3);
    let fid = momentum_overlap_fidelity(&grid, &d, FidelityForm::Amplitude).unwrap();
    assert!(fid > 0.999 && fid <= 1.0 + 1e-12, "F = {fid}");
    let (vc, dc) = velocity_cut(&grid, &d, 0);
    let fit = fit_gaussian(&vc, &dc).unwrap();
    assert_relative_eq!(fit.center, v0, max_relative = 1e-2);
    assert_relative_eq!(fit.sigma, w, max_relative = 2e-2);
}

#[test]
fn anisotropic_distribution_lowers_fidelity() {
    let s = species();
    let grid = Grid::new(GridSpec::cylindrical(48, 20e-6, 128, 40e-6)).unwrap();
    let f = gaussian(&grid, [1.0e-6, 0.0, 3e-6], [0.0; 3]);
    let d = restricted_momentum_density(&grid, &f, &MainPeakRegion::full(&grid), &s).unwrap();
    let fid = momentum_overlap_fidelity(&grid, &d, FidelityForm::Amplitude).unwrap();
    // Amplitude overlap of Gaussians with widths σ_x, σ_z: 2σ_xσ_z/(σ_x² + σ_z²).
    let expected = 2.0 * 3.0 / 10.0;
    assert_relative_eq!(fid, expected, max_relative = 1e-2);
}

#[test]
fn effective_temperature_reference() {
    let t = effective_temperature(&species(), 113e-6);
    assert_relative_eq!(t, 1.3347e-10, max_relative = 1e-4);
}

#[test]
fn gaussian_fit_recovers_parameters() {
    let x: Vec<f64> = (0..200).map(|i| i as f64 * 5e-6).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 * (-(v - 410e-6).powi(2) / (2.0 * 67e-6f64.powi(2))).exp()).collect();
    let fit = fit_gaussian(&x, &y).unwrap();
    assert_relative_eq!(fit.amplitude, 3.0, max_relative = 1e-8);
    assert_relative_eq!(fit.center, 410e-6, max_relative = 1e-8);
    assert_relative_eq!(fit.sigma, 67e-6, max_relative = 1e-8);
    assert!(fit_gaussian(&x, &vec![0.0; x.len()]).is_none());
}

#[test]
fn release_energy_prediction() {
    let s = species();
    let mut sch = fieldmodel::model_sequence_preset(s.clone());
    let mu = PLANCK * 318.4;
    let e = predicted_release_energy(&sch, mu, 0.0);
    assert!(e > 0.0 && e < PLANCK * 1.0, "{}", e / PLANCK);
    let c = (s.g_j - s.g_i).powi(2) * s.mu_b * tesla_from_gauss(4.0) / (4.0 * s.g_f.abs() * s.a_hfs);
    assert_relative_eq!(
        predicted_release_energy(&sch, s.hbar * sch.detuning(0.0) / (1.0 + c), 0.0),
        0.0,
        epsilon = 1e-40
    );
    let trap = HarmonicTrapSpec {
        omega: [angular_from_hz(30.0); 3],
        b_bot: 1e-12,
    };
    sch = fieldmodel::static_trap(s.clone(), trap, 1.0).unwrap();
    assert_eq!(predicted_release_energy(&sch, mu, 0.0), mu);
}

#[test]
fn velocity_metrics_survive_free_flight() {
    use crate::dynamics::{propagate, PropagatorConfig, SpinorState};
    use crate::zeeman::HyperfineLevel;
    use std::sync::Arc;
    let s = species().with_scattering_length(0.0);
    let grid = Arc::new(Grid::new(GridSpec::cylindrical(128, 100e-6, 512, 240e-6)).unwrap());
    // Shell in the far field: flown 80 ms from a source of size
    // ħ/(Mσ_v) ≈ 5 μm, elongated along z so the fidelity is below one.
    let t0 = 80e-3;
    let mut amp: Vec<C64> = (0..grid.len())
        .map(|i| {
            let k = grid.wavevector(i);
            let v = [k[0], k[2]].map(|x| x * s.hbar / s.mass);
            let r = (v[0] * v[0] + (v[1] / 1.2).powi(2)).sqrt();
            let phase = -s.hbar * grid.k_squared()[i] * t0 / (2.0 * s.mass);
            C64::from_polar((-(r - 500e-6).powi(2) / (4.0 * 150e-6f64.powi(2))).exp(), phase)
        })
        .collect();
    grid.from_momentum_in_place(&mut amp);
    let opts = AnalysisOptions::default();
    let trap = HarmonicTrapSpec {
        omega: [angular_from_hz(30.0), angular_from_hz(30.0), angular_from_hz(15.0)],
        b_bot: tesla_from_gauss(1.0),
    };
    let sch = fieldmodel::sudden_release_preset(s.clone(), trap, 10e-3).unwrap();
    let state = SpinorState::single(grid.clone(), HyperfineLevel::Untrapped, amp).unwrap();
    let n = grid.norm(&state.fields[1]);
    let before = metrics(&grid, &state.fields, 1, n, &s, &opts).unwrap();
    let cfg = PropagatorConfig::default().without_absorbers();
    let traj = propagate(state, &sch, &cfg, None).unwrap();
    let after = metrics(&grid, &traj.final_state.fields, 1, n, &s, &opts).unwrap();
    let dv = (after.mean_speed.unwrap() - before.mean_speed.unwrap()).abs() / before.mean_speed.unwrap();
    let df = (after.fidelity.unwrap() - before.fidelity.unwrap()).abs();
    assert!(before.fidelity.unwrap() < 0.99);
    assert!(dv < 1e-3 && df < 1e-3, "dv {dv} dF {df}");
}

proptest! {
    #[test]
    fn fidelity_invariant_under_scale_and_swap(
        vals in proptest::collection::vec(0.0f64..1.0, 49),
        scale in 1e-6f64..1e6,
    ) {
        let n = 7;
        prop_assume!(vals.iter().any(|v| *v > 1e-3));
        let f = plane_fidelity(&vals, n, FidelityForm::Amplitude).unwrap();
        prop_assert!(f <= 1.0 + 1e-12);
        let scaled: Vec<f64> = vals.iter().map(|v| v * scale).collect();
        prop_assert!((plane_fidelity(&scaled, n, FidelityForm::Amplitude).unwrap() - f).abs() < 1e-12);
        let mut swapped = vals.clone();
        for i in 0..n {
            for j in 0..n {
                swapped[i * n + j] = vals[j * n + i];
            }
        }
        prop_assert!((plane_fidelity(&swapped, n, FidelityForm::Amplitude).unwrap() - f).abs() < 1e-12);
        let fd = plane_fidelity(&vals, n, FidelityForm::Density).unwrap();
        prop_assert!(fd <= 1.0 + 1e-12);
    }

    #[test]
    fn symmetric_plane_has_unit_fidelity(vals in proptest::collection::vec(0.01f64..1.0, 25)) {
        let n = 5;
        let mut p = vals.clone();
        for i in 0..n {
            for j in 0..i {
                p[i * n + j] = p[j * n + i];
            }
        }
        prop_assert!((plane_fidelity(&p, n, FidelityForm::Amplitude).unwrap() - 1.0).abs() < 1e-12);
    }
}
