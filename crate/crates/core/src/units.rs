//! Conversions between the configuration units (Hz, G, ms, um, um/s) and SI.
//!
//! Frequencies in configuration files are always ω/2π.

use std::f64::consts::PI;

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const HBAR: f64 = PLANCK / (2.0 * PI);
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;
pub const BOHR_RADIUS: f64 = 5.291_772_109_03e-11;
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

const GAUSS: f64 = 1e-4;

pub fn tesla_from_gauss(g: f64) -> f64 {
    g / 1e4
}

pub fn gauss_from_tesla(t: f64) -> f64 {
    t / GAUSS
}

pub fn tesla_from_milligauss(mg: f64) -> f64 {
    mg / 1e7
}

pub fn milligauss_from_tesla(t: f64) -> f64 {
    t / GAUSS * 1e3
}

/// Gradient in G/mm to T/m.
pub fn tesla_per_m_from_gauss_per_mm(g: f64) -> f64 {
    g / 10.0
}

pub fn gauss_per_mm_from_tesla_per_m(t: f64) -> f64 {
    t / (GAUSS * 1e3)
}

/// ω/2π in Hz to angular frequency in rad/s.
pub fn angular_from_hz(f: f64) -> f64 {
    2.0 * PI * f
}

pub fn hz_from_angular(w: f64) -> f64 {
    w / (2.0 * PI)
}

pub fn seconds_from_ms(t: f64) -> f64 {
    t / 1e3
}

pub fn ms_from_seconds(t: f64) -> f64 {
    t * 1e3
}

pub fn meters_from_um(x: f64) -> f64 {
    x / 1e6
}

pub fn um_from_meters(x: f64) -> f64 {
    x * 1e6
}

pub fn mps_from_um_per_s(v: f64) -> f64 {
    v / 1e6
}

pub fn um_per_s_from_mps(v: f64) -> f64 {
    v * 1e6
}

/// Energy expressed as a frequency ω/2π in Hz.
pub fn hz_from_joule(e: f64) -> f64 {
    e / PLANCK
}

pub fn joule_from_hz(f: f64) -> f64 {
    f * PLANCK
}
