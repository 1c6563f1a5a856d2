//! Breit-Rabi energies of the F = 1 ground-state manifold and the
//! outcoupling feasibility checks derived from them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units;

/// Physical constants of the simulated species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesConstants {
    pub mass: f64,
    pub a_hfs: f64,
    pub g_i: f64,
    pub g_j: f64,
    pub g_f: f64,
    pub mu_b: f64,
    pub hbar: f64,
    pub k_b: f64,
    /// s-wave scattering lengths indexed by `HyperfineLevel::index`.
    pub scattering_lengths: [[f64; 3]; 3],
}

/// On-disk species description; unlisted fundamental constants default to CODATA.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeciesFile {
    mass_kg: f64,
    ahfs_joule: f64,
    g_i: f64,
    g_j: f64,
    g_f: f64,
    scattering_lengths_m: [[f64; 3]; 3],
    #[serde(default)]
    mu_b: Option<f64>,
    #[serde(default)]
    hbar: Option<f64>,
    #[serde(default)]
    k_b: Option<f64>,
}

impl SpeciesConstants {
    /// ⁸⁷Rb in the F = 1 manifold with a common scattering length of 100.4 a₀.
    pub fn rb87() -> Self {
        let g_j = 2.0023;
        let g_i = -0.000995;
        let a = 100.4 * units::BOHR_RADIUS;
        SpeciesConstants {
            mass: 86.909_180_527 * units::ATOMIC_MASS_UNIT,
            a_hfs: units::PLANCK * 3.417e9,
            g_i,
            g_j,
            // Low-field slope of the Breit-Rabi form below, so that the
            // curvature relation reproduces the requested trap frequencies.
            g_f: -(g_j + 3.0 * g_i) / 4.0,
            mu_b: units::BOHR_MAGNETON,
            hbar: units::HBAR,
            k_b: units::BOLTZMANN,
            scattering_lengths: [[a; 3]; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("a_hfs", self.a_hfs),
            ("mu_b", self.mu_b),
            ("hbar", self.hbar),
            ("k_b", self.k_b),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("species constant {name} must be positive, got {v}")));
            }
        }
        if !(self.g_f.is_finite() && self.g_f != 0.0) {
            return Err(Error::Config("species g_f must be finite and nonzero".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = (self.scattering_lengths[i][j], self.scattering_lengths[j][i]);
                if !a.is_finite() {
                    return Err(Error::Config("scattering lengths must be finite".into()));
                }
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                    return Err(Error::Config("scattering-length matrix must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Contact couplings g = 4πħ²a/M.
    pub fn couplings(&self) -> [[f64; 3]; 3] {
        let pref = 4.0 * std::f64::consts::PI * self.hbar * self.hbar / self.mass;
        self.scattering_lengths.map(|row| row.map(|a| pref * a))
    }

    pub fn with_scattering_length(mut self, a: f64) -> Self {
        self.scattering_lengths = [[a; 3]; 3];
        self
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let f: SpeciesFile = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        let s = SpeciesConstants {
            mass: f.mass_kg,
            a_hfs: f.ahfs_joule,
            g_i: f.g_i,
            g_j: f.g_j,
            g_f: f.g_f,
            mu_b: f.mu_b.unwrap_or(units::BOHR_MAGNETON),
            hbar: f.hbar.unwrap_or(units::HBAR),
            k_b: f.k_b.unwrap_or(units::BOLTZMANN),
            scattering_lengths: f.scattering_lengths_m,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        let f = SpeciesFile {
            mass_kg: self.mass,
            ahfs_joule: self.a_hfs,
            g_i: self.g_i,
            g_j: self.g_j,
            g_f: self.g_f,
            scattering_lengths_m: self.scattering_lengths,
            mu_b: Some(self.mu_b),
            hbar: Some(self.hbar),
            k_b: Some(self.k_b),
        };
        toml::to_string(&f).expect("species serializes")
    }
}

/// Zeeman sublevel of the F = 1 manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperfineLevel {
    /// m_F = −1, magnetically trapped.
    Trapped,
    /// m_F = 0.
    Untrapped,
    /// m_F = +1, anti-trapped.
    AntiTrapped,
}

impl HyperfineLevel {
    pub const ALL: [HyperfineLevel; 3] = [HyperfineLevel::Trapped, HyperfineLevel::Untrapped, HyperfineLevel::AntiTrapped];

    pub fn m_f(self) -> i32 {
        match self {
            HyperfineLevel::Trapped => -1,
            HyperfineLevel::Untrapped => 0,
            HyperfineLevel::AntiTrapped => 1,
        }
    }

    /// Storage index 0, 1, 2 for m_F = −1, 0, +1.
    pub fn index(self) -> usize {
        (self.m_f() + 1) as usize
    }

    pub fn from_m_f(m: i32) -> Option<Self> {
        match m {
            -1 => Some(HyperfineLevel::Trapped),
            0 => Some(HyperfineLevel::Untrapped),
            1 => Some(HyperfineLevel::AntiTrapped),
            _ => None,
        }
    }

    /// Short label used in file names and CSV headers.
    pub fn label(self) -> &'static str {
        match self {
            HyperfineLevel::Trapped => "m-1",
            HyperfineLevel::Untrapped => "m0",
            HyperfineLevel::AntiTrapped => "m+1",
        }
    }
}

impl fmt::Display for HyperfineLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m_F={:+}", self.m_f())
    }
}

fn check_field(b: f64) -> Result<()> {
    if b.is_finite() && b >= 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!("field magnitude must be finite and non-negative, got {b} T")))
    }
}

/// b = (g_J − g_I)·μ_B·B / (2·A_hfs).
pub fn dimensionless_b(species: &SpeciesConstants, b_field: f64) -> Result<f64> {
    check_field(b_field)?;
    Ok(b_unchecked(species, b_field))
}

#[inline]
fn b_unchecked(s: &SpeciesConstants, b_field: f64) -> f64 {
    (s.g_j - s.g_i) * s.mu_b * b_field / (2.0 * s.a_hfs)
}

/// Breit-Rabi energy of `level` at field magnitude `b_field` (T).
pub fn breit_rabi_potential(species: &SpeciesConstants, level: HyperfineLevel, b_field: f64) -> Result<f64> {
    check_field(b_field)?;
    let m = level.m_f() as f64;
    let b = b_unchecked(species, b_field);
    Ok(-species.a_hfs / 4.0 - m * species.g_i * species.mu_b * b_field - species.a_hfs * (1.0 + m * b + b * b).sqrt())
}

/// V(m, B) − V(m, B_ref) without the cancellation of the absolute energies.
#[inline]
pub fn breit_rabi_difference(s: &SpeciesConstants, m: f64, b_field: f64, b_ref: f64) -> f64 {
    let b = b_unchecked(s, b_field);
    let b0 = b_unchecked(s, b_ref);
    let r = (1.0 + m * b + b * b).sqrt();
    let r0 = (1.0 + m * b0 + b0 * b0).sqrt();
    let sqrt_diff = (b - b0) * (m + b + b0) / (r + r0);
    -m * s.g_i * s.mu_b * (b_field - b_ref) - s.a_hfs * sqrt_diff
}

/// ∂V(m, B)/∂B in J/T.
pub fn breit_rabi_slope(s: &SpeciesConstants, m: f64, b_field: f64) -> f64 {
    let b = b_unchecked(s, b_field);
    let db = (s.g_j - s.g_i) * s.mu_b / (2.0 * s.a_hfs);
    -m * s.g_i * s.mu_b - s.a_hfs * (m + 2.0 * b) / (2.0 * (1.0 + m * b + b * b).sqrt()) * db
}

/// Transition frequencies (ω_{−1,0}, ω_{0,+1}) in rad/s.
pub fn transition_frequencies(species: &SpeciesConstants, b_field: f64) -> Result<(f64, f64)> {
    check_field(b_field)?;
    let b = b_unchecked(species, b_field);
    let s = |m: f64| (1.0 + m * b + b * b).sqrt();
    // Differences of the square roots taken without cancellation.
    let lin = species.g_i * species.mu_b * b_field;
    let lower = lin + species.a_hfs * b / (s(-1.0) + s(0.0));
    let upper = lin + species.a_hfs * b / (s(0.0) + s(1.0));
    Ok((lower / species.hbar, upper / species.hbar))
}

/// V(−1) + V(+1) − 2·V(0) at the given field, in J.
pub fn breit_rabi_asymmetry(species: &SpeciesConstants, b_field: f64) -> Result<f64> {
    check_field(b_field)?;
    let b = b_unchecked(species, b_field);
    let s = |m: f64| (1.0 + m * b + b * b).sqrt();
    // 2√(1+b²) − √(1−b+b²) − √(1+b+b²), rearranged to avoid cancellation.
    let (sm, s0, sp) = (s(-1.0), s(0.0), s(1.0));
    Ok(species.a_hfs * 2.0 * b * b / ((s0 + sm) * (s0 + sp) * (sp + sm)))
}

/// Ratio between the m_F = 0 anti-trapping potential and the trapping potential.
pub fn anti_trap_ratio(species: &SpeciesConstants, b_bot: f64) -> Result<f64> {
    check_field(b_bot)?;
    let r = (species.g_j - species.g_i).powi(2) * species.mu_b * b_bot / (4.0 * species.g_f.abs() * species.a_hfs);
    if r > 1e-2 {
        log::warn!("anti-trap ratio {r:.3e} exceeds 1e-2; the linearized m_F=0 potential is inaccurate");
    }
    Ok(r)
}

/// Outcome of one of the "≫" feasibility conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCheck {
    pub pass: bool,
    pub ratio: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub threshold: f64,
}

pub const SHARP_RESONANCE_THRESHOLD: f64 = 10.0;
pub const STATE_SELECTIVITY_THRESHOLD: f64 = 5.0;

/// μ² ≫ (ħΩ)². Sides are reported in (2π Hz)².
pub fn sharp_resonance_check(species: &SpeciesConstants, mu: f64, rabi: f64, threshold: f64) -> FeasibilityCheck {
    let unit = 2.0 * std::f64::consts::PI * species.hbar;
    let lhs = (mu / unit).powi(2);
    let rhs = (species.hbar * rabi / unit).powi(2);
    let ratio = if rhs == 0.0 {
        if lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        lhs / rhs
    };
    FeasibilityCheck {
        pass: ratio >= threshold,
        ratio,
        lhs,
        rhs,
        threshold,
    }
}

/// B_bot² ≫ 16·μ·A_hfs/((g_J − g_I)²·μ_B²). Sides are reported in G².
pub fn state_selectivity_check(species: &SpeciesConstants, b_bot: f64, mu: f64, threshold: f64) -> FeasibilityCheck {
    let lhs = units::gauss_from_tesla(b_bot).powi(2);
    let rhs_t2 = 16.0 * mu * species.a_hfs / ((species.g_j - species.g_i).powi(2) * species.mu_b.powi(2));
    let rhs = rhs_t2 * 1e8;
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    FeasibilityCheck {
        pass: ratio >= threshold,
        ratio,
        lhs,
        rhs,
        threshold,
    }
}

/// Peak transfer probability Ω²/(Ω² + δ²) of a driven two-level system.
/// An undriven system (Ω = 0) transfers nothing.
pub fn resonance_amplitude(rabi: f64, detuning: f64) -> f64 {
    if rabi == 0.0 {
        return 0.0;
    }
    let o2 = rabi * rabi;
    o2 / (o2 + detuning * detuning)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;
    use HyperfineLevel::*;

    const FOUR_GAUSS: f64 = 4e-4;

    fn rb() -> SpeciesConstants {
        SpeciesConstants::rb87()
    }

    #[test]
    fn b_at_four_gauss_matches_oracle() {
        // 40-digit evaluation of the defining formula.
        assert_relative_eq!(dimensionless_b(&rb(), FOUR_GAUSS).unwrap(), 1.641_124_231_736_012e-3, max_relative = 1e-9);
        assert_eq!(dimensionless_b(&rb(), 0.0).unwrap(), 0.0);
        assert!(dimensionless_b(&rb(), -1e-4).is_err());
    }

    #[test]
    fn b_equals_one_at_inverted_field() {
        let s = rb();
        let field = 2.0 * s.a_hfs / ((s.g_j - s.g_i) * s.mu_b);
        assert_relative_eq!(dimensionless_b(&s, field).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn zero_field_energies() {
        let s = rb();
        for level in HyperfineLevel::ALL {
            assert_relative_eq!(breit_rabi_potential(&s, level, 0.0).unwrap(), -1.25 * s.a_hfs, max_relative = 1e-15);
        }
        let (a, b) = transition_frequencies(&s, 0.0).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    #[test]
    fn rf_offset_at_four_gauss() {
        let (w10, _) = transition_frequencies(&rb(), FOUR_GAUSS).unwrap();
        assert_relative_eq!(w10 / (2.0 * PI), 2_799_437.779_861_905, max_relative = 1e-9);
        assert_relative_eq!(w10 / (2.0 * PI), 2.799e6, max_relative = 1e-3);
    }

    #[test]
    fn asymmetry_forms_agree() {
        let s = rb();
        let (w10, w01) = transition_frequencies(&s, FOUR_GAUSS).unwrap();
        let closed = breit_rabi_asymmetry(&s, FOUR_GAUSS).unwrap() / s.hbar;
        assert_relative_eq!(closed, 14_455.941_527_521_623, max_relative = 1e-12);
        assert_relative_eq!(w10 - w01, closed, max_relative = 1e-7);
        let direct = breit_rabi_potential(&s, Trapped, FOUR_GAUSS).unwrap() + breit_rabi_potential(&s, AntiTrapped, FOUR_GAUSS).unwrap()
            - 2.0 * breit_rabi_potential(&s, Untrapped, FOUR_GAUSS).unwrap();
        assert_relative_eq!(direct, 1.524_482_853_246_503e-30, max_relative = 1e-6);
    }

    #[test]
    fn anti_trap_ratio_values() {
        let s = rb();
        assert_eq!(anti_trap_ratio(&s, 0.0).unwrap(), 0.0);
        let r4 = anti_trap_ratio(&s, FOUR_GAUSS).unwrap();
        assert_relative_eq!(r4, 3.3e-3, max_relative = 0.03);
        assert_relative_eq!(anti_trap_ratio(&s, 2.0 * FOUR_GAUSS).unwrap(), 2.0 * r4, max_relative = 1e-15);
    }

    #[test]
    fn anti_trap_ratio_matches_exact_differences() {
        let s = rb();
        let r = anti_trap_ratio(&s, FOUR_GAUSS).unwrap();
        for frac in [1e-4, 1e-3, 1e-2, 0.05, 0.09] {
            let bt = frac * FOUR_GAUSS;
            let v0 = breit_rabi_difference(&s, 0.0, FOUR_GAUSS + bt, FOUR_GAUSS);
            let vm = breit_rabi_difference(&s, -1.0, FOUR_GAUSS + bt, FOUR_GAUSS);
            assert_relative_eq!(-v0 / vm, r, max_relative = 0.05);
        }
        // The dropped B_trap² term alone contributes B_t/(2·B_bot) = 5% at the edge.
        let bt = 0.1 * FOUR_GAUSS;
        let exact = -breit_rabi_difference(&s, 0.0, FOUR_GAUSS + bt, FOUR_GAUSS) / breit_rabi_difference(&s, -1.0, FOUR_GAUSS + bt, FOUR_GAUSS);
        assert!((exact / r - 1.0).abs() < 0.055);
    }

    #[test]
    fn sharp_resonance_examples() {
        let s = rb();
        let mu = s.hbar * 2.0 * PI * 318.0;
        let c = sharp_resonance_check(&s, mu, 2.0 * PI * 90.0, SHARP_RESONANCE_THRESHOLD);
        assert_relative_eq!(c.lhs, 318.0 * 318.0, max_relative = 1e-12);
        assert_relative_eq!(c.rhs, 8100.0, max_relative = 1e-12);
        assert!(c.pass);
        let zero = sharp_resonance_check(&s, 0.0, 2.0 * PI * 90.0, SHARP_RESONANCE_THRESHOLD);
        assert_eq!(zero.ratio, 0.0);
        assert!(!zero.pass);
        let eq = sharp_resonance_check(&s, mu, 2.0 * PI * 318.0, SHARP_RESONANCE_THRESHOLD);
        assert_relative_eq!(eq.ratio, 1.0, max_relative = 1e-12);
        assert!(!eq.pass);
        assert!(!sharp_resonance_check(&s, mu, 2.0 * PI * 400.0, SHARP_RESONANCE_THRESHOLD).pass);
    }

    #[test]
    fn state_selectivity_examples() {
        let s = rb();
        let mu = s.hbar * 2.0 * PI * 318.0;
        let c = state_selectivity_check(&s, FOUR_GAUSS, mu, STATE_SELECTIVITY_THRESHOLD);
        assert_relative_eq!(c.lhs, 16.0, max_relative = 1e-12);
        assert_relative_eq!(c.rhs, 2.211_460_563_599_418, max_relative = 1e-9);
        assert_relative_eq!(c.ratio, 7.3, max_relative = 0.02);
        assert!(c.pass);
        let zero = state_selectivity_check(&s, 0.0, mu, STATE_SELECTIVITY_THRESHOLD);
        assert_eq!(zero.ratio, 0.0);
        assert!(!zero.pass);
        let doubled = state_selectivity_check(&s, 2.0 * FOUR_GAUSS, mu, STATE_SELECTIVITY_THRESHOLD);
        assert_relative_eq!(doubled.ratio, 4.0 * c.ratio, max_relative = 1e-12);
    }

    #[test]
    fn resonance_amplitude_examples() {
        assert_eq!(resonance_amplitude(3.0, 0.0), 1.0);
        assert_relative_eq!(resonance_amplitude(3.0, 3.0), 0.5);
        let a = resonance_amplitude(2.0 * PI * 90.0, -2.0 * PI * 318.0);
        assert_relative_eq!(a, 0.074_159_525_379_037_57, max_relative = 1e-12);
    }

    #[test]
    fn species_round_trip_and_validation() {
        let s = rb();
        let text = s.to_toml_string();
        let back = SpeciesConstants::from_toml_str(&text, Path::new("mem")).unwrap();
        assert_eq!(s, back);
        let mut bad = s.clone();
        bad.scattering_lengths[0][1] *= 1.1;
        assert!(bad.validate().is_err());
        assert!(SpeciesConstants::from_toml_str("mass_kg = ", Path::new("mem")).is_err());
        assert!(s.g_f < 0.0 && (s.g_f.abs() - 0.5).abs() < 0.01);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let s = rb();
        for m in [-1.0, 0.0, 1.0] {
            for g in [0.2, 4.0, 40.0] {
                let b = units::tesla_from_gauss(g);
                let h = 1e-3 * b;
                let fd = (breit_rabi_difference(&s, m, b + h, b) - breit_rabi_difference(&s, m, b - h, b)) / (2.0 * h);
                assert_relative_eq!(breit_rabi_slope(&s, m, b), fd, max_relative = 1e-7, epsilon = 1e-32);
            }
        }
        let low = breit_rabi_slope(&s, -1.0, 0.0);
        assert_relative_eq!(low, s.g_f.abs() * s.mu_b, max_relative = 1e-12);
    }

    #[test]
    fn level_indices() {
        for (i, l) in HyperfineLevel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(HyperfineLevel::from_m_f(l.m_f()), Some(*l));
        }
        assert_eq!(HyperfineLevel::from_m_f(2), None);
    }

    proptest! {
        #[test]
        fn transition_asymmetry_positive(log_g in -4.0f64..2.0) {
            let field = units::tesla_from_gauss(10f64.powf(log_g));
            let (a, b) = transition_frequencies(&rb(), field).unwrap();
            prop_assert!(a > b);
            prop_assert!(breit_rabi_asymmetry(&rb(), field).unwrap() > 0.0);
        }

        #[test]
        fn anti_trapped_decreasing(b1 in 0.0f64..1e-2, db in 1e-9f64..1e-3) {
            let s = rb();
            let v1 = breit_rabi_potential(&s, AntiTrapped, b1).unwrap();
            let v2 = breit_rabi_potential(&s, AntiTrapped, b1 + db).unwrap();
            prop_assert!(v2 < v1);
        }

        #[test]
        fn untrapped_quadratic_expansion(bt_frac in 1e-4f64..1.0) {
            // V_trap,0 ≈ −(g_J−g_I)²μ_B²/(4A)·B_bot·B_trap, error O(b).
            let s = rb();
            let bt = bt_frac * FOUR_GAUSS;
            let exact = breit_rabi_difference(&s, 0.0, FOUR_GAUSS + bt, FOUR_GAUSS);
            let approx = -(s.g_j - s.g_i).powi(2) * s.mu_b.powi(2) / (4.0 * s.a_hfs) * FOUR_GAUSS * bt;
            let b = dimensionless_b(&s, FOUR_GAUSS + bt).unwrap();
            prop_assert!(((exact - approx) / approx).abs() < bt_frac + 4.0 * b);
        }

        #[test]
        fn difference_matches_direct(m in -1i32..=1, b1 in 0.0f64..1e-2, b2 in 0.0f64..1e-2) {
            let s = rb();
            let level = HyperfineLevel::from_m_f(m).unwrap();
            let direct = breit_rabi_potential(&s, level, b1).unwrap() - breit_rabi_potential(&s, level, b2).unwrap();
            let stable = breit_rabi_difference(&s, m as f64, b1, b2);
            prop_assert!((direct - stable).abs() <= 1e-14 * s.a_hfs);
        }

        #[test]
        fn resonance_amplitude_bounded_and_even(rabi in 0.0f64..1e4, det in -1e4f64..1e4) {
            let a = resonance_amplitude(rabi, det);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert_eq!(a, resonance_amplitude(rabi, -det));
        }
    }
}
