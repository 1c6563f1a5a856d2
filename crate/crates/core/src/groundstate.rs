//! Ground state of the trapped component by imaginary-time propagation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldmodel::{self, FieldSchedule, HarmonicTrapSpec};
use crate::grid::{Grid, C64};
use crate::zeeman::{self, HyperfineLevel, SpeciesConstants};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundStateConfig {
    /// Relative change of the energy functional per step of the initial
    /// size at convergence; smaller steps are judged by the same rate.
    pub tol: f64,
    /// Bound on ‖(H − μ)ψ‖/(μ√N) at convergence, unless the residual
    /// stalls above it once all refinements are spent.
    pub residual_tol: f64,
    pub max_iterations: usize,
    /// First imaginary time step in s; defaults to 0.01/ω_max.
    pub initial_step: Option<f64>,
    /// Number of times the step is halved after a converged pass; the
    /// splitting bias of the fixed point shrinks with the step squared.
    /// Up to `max_extra_refinements` further halvings follow when the
    /// residual stalls above its bound.
    pub refinements: usize,
    pub max_extra_refinements: usize,
    /// Energy is evaluated every this many steps.
    pub check_interval: usize,
}

impl Default for GroundStateConfig {
    fn default() -> Self {
        GroundStateConfig {
            tol: 1e-10,
            residual_tol: 1e-7,
            max_iterations: 200_000,
            initial_step: None,
            refinements: 2,
            max_extra_refinements: 4,
            check_interval: 10,
        }
    }
}

/// Energy functional split into its parts, in J (not per particle).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub potential: f64,
    /// (g/2)∫|ψ|⁴ dV.
    pub interaction: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential + self.interaction
    }

    /// μN with the interaction counted once more than in the energy.
    pub fn mu_times_n(&self) -> f64 {
        self.kinetic + self.potential + 2.0 * self.interaction
    }

    /// |2T − 2V + 3U| / E, zero for an exact stationary state in a harmonic trap.
    pub fn virial_residual(&self) -> f64 {
        (2.0 * self.kinetic - 2.0 * self.potential + 3.0 * self.interaction).abs() / self.total().abs()
    }
}

#[derive(Clone, Debug)]
pub struct GroundStateResult {
    pub psi: Vec<C64>,
    pub n_atoms: f64,
    /// Chemical potential in J, including the shift of the trap bottom by a
    /// field offset. `energy` is measured from the shifted bottom.
    pub mu: f64,
    /// ‖(H − μ)ψ‖/√N in J.
    pub residual: f64,
    pub iterations: usize,
    pub energy: EnergyParts,
    pub converged: bool,
}

/// Thomas–Fermi chemical potential (ħω̄/2)(15Na/a_ho)^{2/5} of the trapped component.
pub fn thomas_fermi_mu(n_atoms: f64, trap: &HarmonicTrapSpec, species: &SpeciesConstants) -> f64 {
    let a = species.scattering_lengths[0][0];
    let wbar = (trap.omega[0] * trap.omega[1] * trap.omega[2]).cbrt();
    let a_ho = (species.hbar / (species.mass * wbar)).sqrt();
    let chi = n_atoms * a / a_ho;
    if chi < 10.0 {
        log::warn!("Thomas-Fermi estimate outside its range: Na/a_ho = {chi:.3}");
    }
    if chi <= 0.0 {
        return 0.0;
    }
    0.5 * species.hbar * wbar * (15.0 * chi).powf(0.4)
}

/// Energy parts of a single-component field in the static potential `v` (J).
pub fn energy_parts(grid: &Grid, psi: &[C64], v: &[f64], g: f64, mass: f64, hbar: f64) -> EnergyParts {
    let tpsi = grid.apply_kinetic_operator(psi, mass, hbar);
    let dv = grid.volume_elements();
    let (k, p, u) = (0..psi.len())
        .into_par_iter()
        .map(|i| {
            let n = psi[i].norm_sqr();
            ((psi[i].conj() * tpsi[i]).re * dv[i], v[i] * n * dv[i], 0.5 * g * n * n * dv[i])
        })
        .reduce(|| (0.0, 0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    EnergyParts {
        kinetic: k,
        potential: p,
        interaction: u,
    }
}

/// ‖(H − μ)ψ‖/√N for the stationary single-component equation.
pub fn stationary_residual(grid: &Grid, psi: &[C64], v: &[f64], g: f64, mass: f64, hbar: f64, mu: f64) -> f64 {
    let mut r = grid.apply_kinetic_operator(psi, mass, hbar);
    r.par_iter_mut()
        .enumerate()
        .for_each(|(i, x)| *x += psi[i] * (v[i] + g * psi[i].norm_sqr() - mu));
    (grid.norm(&r) / grid.norm(psi)).sqrt()
}

fn check_confining(schedule: &FieldSchedule, grid: &Grid) -> Result<()> {
    let st = schedule.state(0.0);
    let shape = grid.shape();
    let active = if grid.is_cylindrical() { [true, false, true] } else { shape.map(|n| n > 1) };
    for a in 0..3 {
        if active[a] && !(st.curvature[a] > 0.0) {
            return Err(Error::Precondition(format!("trap is not confining along axis {a} at t = 0")));
        }
    }
    if grid.is_cylindrical() && !schedule.is_axially_symmetric() {
        return Err(Error::Precondition("cylindrical lattice requires omega_x = omega_y".into()));
    }
    Ok(())
}

fn normalize(grid: &Grid, psi: &mut [C64], n_atoms: f64) {
    let s = (n_atoms / grid.norm(psi)).sqrt();
    psi.par_iter_mut().for_each(|x| *x *= s);
}

/// Thomas–Fermi profile in the actual potential, or a Gaussian when the
/// Thomas–Fermi radii are not resolved.
fn initial_guess(schedule: &FieldSchedule, grid: &Grid, v: &[f64], g: f64, n_atoms: f64) -> Vec<C64> {
    let s = &schedule.species;
    let w = schedule.trap.omega;
    let mu = thomas_fermi_mu(n_atoms, &schedule.trap, s);
    let spacing = grid.spacing();
    let resolved = g > 0.0 && (0..3).all(|a| spacing[a] == 0.0 || (2.0 * mu / (s.mass * w[a] * w[a])).sqrt() > 4.0 * spacing[a]);
    let mut psi = if resolved {
        v.iter().map(|&x| C64::new(((mu - x).max(0.0) / g).sqrt(), 0.0)).collect()
    } else {
        let sigma2 = w.map(|wi| s.hbar / (s.mass * wi));
        grid.from_fn(|p| C64::new((-(0..3).map(|a| p[a] * p[a] / (2.0 * sigma2[a])).sum::<f64>()).exp(), 0.0))
    };
    normalize(grid, &mut psi, n_atoms);
    psi
}

/// Ground state of the m_F = −1 component in the trap of `schedule` at t = 0,
/// normalized to `n_atoms`.
pub fn solve_ground_state(schedule: &FieldSchedule, n_atoms: f64, grid: &Grid, config: &GroundStateConfig) -> Result<GroundStateResult> {
    if !(n_atoms > 0.0 && n_atoms.is_finite()) {
        return Err(Error::Precondition(format!("particle number must be positive, got {n_atoms}")));
    }
    if !(config.tol > 0.0) || config.check_interval == 0 {
        return Err(Error::Config("ground state: tol and check_interval must be positive".into()));
    }
    check_confining(schedule, grid)?;
    let s = &schedule.species;
    let (mass, hbar) = (s.mass, s.hbar);
    let g = s.couplings()[0][0];
    let mut v = fieldmodel::potential_on_grid(schedule, HyperfineLevel::Trapped, grid, 0.0);
    // A field offset shifts the whole trap; solve from its bottom and add the shift to μ.
    let b_bot = schedule.state(0.0).b_bot;
    let offset = zeeman::breit_rabi_difference(s, -1.0, b_bot + schedule.delta_b, b_bot);
    v.iter_mut().for_each(|x| *x -= offset);
    let mut psi = initial_guess(schedule, grid, &v, g, n_atoms);

    let w_max = schedule.trap.omega.iter().cloned().fold(0.0, f64::max);
    let tau0 = config.initial_step.unwrap_or(0.01 / w_max);
    let mut tau = tau0;
    let mut extra_left = config.max_extra_refinements;
    let mut last_residual = f64::INFINITY;
    let start = energy_parts(grid, &psi, &v, g, mass, hbar);
    let mut energy = start.total();
    let mut mu = start.mu_times_n() / n_atoms;
    let mut iterations = 0;
    let mut refinements_left = config.refinements;
    let mut converged = false;
    let mut kin = grid.kinetic_propagator(mass, hbar, tau, true);
    let mut trial = psi.clone();

    while iterations < config.max_iterations {
        trial.copy_from_slice(&psi);
        for _ in 0..config.check_interval {
            imaginary_step(grid, &mut trial, &v, g, hbar, mu, tau, &kin);
            normalize(grid, &mut trial, n_atoms);
        }
        iterations += config.check_interval;
        let parts = energy_parts(grid, &trial, &v, g, mass, hbar);
        let e = parts.total();
        if !e.is_finite() {
            return Err(Error::Numerical("imaginary-time propagation diverged".into()));
        }
        let change = (e - energy) / energy.abs() / config.check_interval as f64 * (tau0 / tau);
        log::trace!("it {iterations} tau {tau:.3e} E {e:.12e} change {change:.3e}");
        if change > 1e-14 * (tau0 / tau) {
            // The splitting overshoots; keep the previous iterate.
            tau *= 0.5;
            kin = grid.kinetic_propagator(mass, hbar, tau, true);
            log::debug!("energy increased, imaginary step halved to {tau:.3e} s");
            continue;
        }
        std::mem::swap(&mut psi, &mut trial);
        energy = e;
        mu = parts.mu_times_n() / n_atoms;
        if refinements_left > 0 {
            if change.abs() < config.tol {
                refinements_left -= 1;
                tau *= 0.5;
                kin = grid.kinetic_propagator(mass, hbar, tau, true);
            }
            continue;
        }
        // Final stage: the energy is quadratic in the error, so the residual decides.
        let r = stationary_residual(grid, &psi, &v, g, mass, hbar, mu) / mu.abs();
        if r <= config.residual_tol && change.abs() < config.tol {
            converged = true;
            break;
        }
        if r > 0.99 * last_residual {
            if extra_left == 0 {
                // Floor set by the lattice rather than the step.
                if change.abs() < config.tol {
                    log::warn!("ground-state residual stalled at {r:.3e} of mu, above the bound {:.1e}", config.residual_tol);
                    converged = true;
                    break;
                }
                continue;
            }
            extra_left -= 1;
            tau *= 0.5;
            kin = grid.kinetic_propagator(mass, hbar, tau, true);
            log::debug!("residual stalled at {r:.3e}, imaginary step halved to {tau:.3e} s");
        }
        last_residual = r;
    }

    let parts = energy_parts(grid, &psi, &v, g, mass, hbar);
    let mu = parts.mu_times_n() / n_atoms;
    let residual = stationary_residual(grid, &psi, &v, g, mass, hbar, mu);
    let result = GroundStateResult {
        psi,
        n_atoms,
        mu: mu + offset,
        residual,
        iterations,
        energy: parts,
        converged,
    };
    if !converged {
        return Err(Error::NotConverged {
            iterations,
            residual,
            best: Box::new(result),
        });
    }
    log::info!(
        "ground state: mu/h = {:.3} Hz after {iterations} steps, residual/h = {:.3e} Hz",
        result.mu / crate::units::PLANCK,
        residual / crate::units::PLANCK
    );
    Ok(result)
}

/// One Strang step of imaginary time τ for ∂ψ/∂τ = −(H − μ)ψ/ħ. The
/// pointwise part is integrated exactly: with a = (V − μ)/ħ and b = g/ħ the
/// density obeys ṅ = −2n(a + bn), whose solution is closed form.
#[allow(clippy::too_many_arguments)]
fn imaginary_step(grid: &Grid, psi: &mut [C64], v: &[f64], g: f64, hbar: f64, mu: f64, tau: f64, kin: &[C64]) {
    let half = 0.5 * tau;
    let b = g / hbar;
    let pointwise = |psi: &mut [C64]| {
        psi.par_iter_mut().enumerate().for_each(|(i, x)| {
            let a = (v[i] - mu) / hbar;
            let n0 = x.norm_sqr();
            let e = (-2.0 * a * half).exp();
            let f = if (a * half).abs() < 1e-8 {
                2.0 * half
            } else {
                -(-2.0 * a * half).exp_m1() / a
            };
            *x *= (e / (1.0 + b * n0 * f)).sqrt();
        })
    };
    pointwise(psi);
    grid.apply_spectral(psi, kin);
    pointwise(psi);
}
