//! Frozen table of physical constants (SI, CODATA 2018 exact or recommended values).
//!
//! Every formula in the crate reads its constants from here; nothing is looked
//! up at runtime.

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Unified atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Mass of an N₂ molecule (28.0134 u), kg.
pub const N2_MOLECULE_MASS: f64 = 28.0134 * ATOMIC_MASS_UNIT;

/// Prefactor of the Epstein free-molecular drag, γ = C r² P / (m v̄).
pub const EPSTEIN_PREFACTOR: f64 = 15.8;

/// One millibar in pascal.
pub const PA_PER_MBAR: f64 = 100.0;
