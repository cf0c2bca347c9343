//! Physical inputs and every quantity derived from them.
//!
//! All values are SI. Angular frequencies are rad/s. The detuning convention
//! used throughout the crate is `Δ = ω_cavity − ω_laser`, so a positive
//! detuning is red and the particle-shifted detuning at an antinode is
//! `Δ^x0 = Δ − A cos²(kx0)` (a dielectric lowers the cavity resonance).

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::{
    BOLTZMANN, ELEMENTARY_CHARGE, EPSTEIN_PREFACTOR, HBAR, N2_MOLECULE_MASS, SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};

fn default_density() -> f64 {
    2200.0
}
fn default_permittivity() -> f64 {
    2.1
}
fn default_finesse() -> f64 {
    50_000.0
}
fn default_gas_temperature() -> f64 {
    300.0
}
fn default_molecule_mass() -> f64 {
    N2_MOLECULE_MASS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereSpec {
    pub radius_m: f64,
    #[serde(default = "default_density")]
    pub density_kg_m3: f64,
    #[serde(default = "default_permittivity")]
    pub rel_permittivity: f64,
    pub charge_count: u32,
}

impl SphereSpec {
    /// 209 nm fused-silica sphere carrying one elementary charge.
    pub fn silica_209nm() -> Self {
        SphereSpec {
            radius_m: 209e-9,
            density_kg_m3: default_density(),
            rel_permittivity: default_permittivity(),
            charge_count: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("sphere.radius_m", self.radius_m)?;
        positive("sphere.density_kg_m3", self.density_kg_m3)?;
        if !(self.rel_permittivity.is_finite() && self.rel_permittivity >= 1.0) {
            return Err(Error::invalid(
                "sphere.rel_permittivity",
                format!("must be >= 1, got {}", self.rel_permittivity),
            ));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radius_m.powi(3)
    }

    pub fn charge_coulomb(&self) -> f64 {
        f64::from(self.charge_count) * ELEMENTARY_CHARGE
    }
}

/// How the cavity drive strength is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CavityDrive {
    /// Pump amplitude 𝓔 in rad/s.
    PumpRate(f64),
    /// Target mean intracavity photon number at the well antinode.
    PhotonNumber(f64),
    /// Target axial mechanical frequency at the well centre (rad/s); the
    /// photon number follows from `m ω_M² = 2ħk²A n`.
    MechanicalFrequency(f64),
}

/// Which detuning the config quotes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Detuning {
    /// Empty-cavity detuning Δ.
    Bare(f64),
    /// Particle-shifted detuning Δ^x0 at an on-axis antinode.
    Effective(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySpec {
    pub wavelength_m: f64,
    pub waist_m: f64,
    pub length_m: f64,
    #[serde(default = "default_finesse")]
    pub finesse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detuning_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_detuning_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pump_rate_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_photon_number: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_omega_m_rad_s: Option<f64>,
}

impl CavitySpec {
    /// 1064 nm, 60 μm waist, 13 mm long, finesse 50 000. Drive and detuning
    /// must still be supplied.
    pub fn reference_cavity() -> Self {
        CavitySpec {
            wavelength_m: 1064e-9,
            waist_m: 60e-6,
            length_m: 13e-3,
            finesse: default_finesse(),
            detuning_rad_s: None,
            effective_detuning_rad_s: None,
            pump_rate_rad_s: None,
            target_photon_number: None,
            target_omega_m_rad_s: None,
        }
    }

    pub fn with_drive(mut self, drive: CavityDrive) -> Self {
        self.pump_rate_rad_s = None;
        self.target_photon_number = None;
        self.target_omega_m_rad_s = None;
        match drive {
            CavityDrive::PumpRate(v) => self.pump_rate_rad_s = Some(v),
            CavityDrive::PhotonNumber(v) => self.target_photon_number = Some(v),
            CavityDrive::MechanicalFrequency(v) => self.target_omega_m_rad_s = Some(v),
        }
        self
    }

    pub fn with_detuning(mut self, detuning: Detuning) -> Self {
        self.detuning_rad_s = None;
        self.effective_detuning_rad_s = None;
        match detuning {
            Detuning::Bare(v) => self.detuning_rad_s = Some(v),
            Detuning::Effective(v) => self.effective_detuning_rad_s = Some(v),
        }
        self
    }

    pub fn drive(&self) -> Result<CavityDrive> {
        match (
            self.pump_rate_rad_s,
            self.target_photon_number,
            self.target_omega_m_rad_s,
        ) {
            (Some(e), None, None) => {
                non_negative("cavity.pump_rate_rad_s", e)?;
                Ok(CavityDrive::PumpRate(e))
            }
            (None, Some(n), None) => {
                non_negative("cavity.target_photon_number", n)?;
                Ok(CavityDrive::PhotonNumber(n))
            }
            (None, None, Some(w)) => {
                non_negative("cavity.target_omega_m_rad_s", w)?;
                Ok(CavityDrive::MechanicalFrequency(w))
            }
            _ => Err(Error::invalid(
                "cavity",
                "exactly one of pump_rate_rad_s, target_photon_number, target_omega_m_rad_s is required",
            )),
        }
    }

    pub fn detuning(&self) -> Result<Detuning> {
        match (self.detuning_rad_s, self.effective_detuning_rad_s) {
            (Some(d), None) => finite("cavity.detuning_rad_s", d).map(|_| Detuning::Bare(d)),
            (None, Some(d)) => {
                finite("cavity.effective_detuning_rad_s", d).map(|_| Detuning::Effective(d))
            }
            _ => Err(Error::invalid(
                "cavity",
                "exactly one of detuning_rad_s, effective_detuning_rad_s is required",
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("cavity.wavelength_m", self.wavelength_m)?;
        positive("cavity.waist_m", self.waist_m)?;
        positive("cavity.length_m", self.length_m)?;
        positive("cavity.finesse", self.finesse)?;
        self.drive()?;
        self.detuning()?;
        Ok(())
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength_m
    }

    pub fn laser_omega(&self) -> f64 {
        2.0 * PI * SPEED_OF_LIGHT / self.wavelength_m
    }

    pub fn mode_volume(&self) -> f64 {
        PI * self.waist_m * self.waist_m * self.length_m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaulTrapSpec {
    pub drive_freq_rad_s: f64,
    pub voltage_v: f64,
    pub scale_m: f64,
}

impl PaulTrapSpec {
    /// 2π × 1500 Hz drive, 300 V, r₀ = 1 mm.
    pub fn reference_trap() -> Self {
        PaulTrapSpec {
            drive_freq_rad_s: 2.0 * PI * 1500.0,
            voltage_v: 300.0,
            scale_m: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("paul.drive_freq_rad_s", self.drive_freq_rad_s)?;
        positive("paul.voltage_v", self.voltage_v)?;
        positive("paul.scale_m", self.scale_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasSpec {
    pub pressure_pa: f64,
    #[serde(default = "default_gas_temperature")]
    pub temperature_k: f64,
    #[serde(default = "default_molecule_mass")]
    pub molecule_mass_kg: f64,
}

impl GasSpec {
    /// Room-temperature nitrogen at the given pressure.
    pub fn nitrogen(pressure_pa: f64) -> Self {
        GasSpec {
            pressure_pa,
            temperature_k: default_gas_temperature(),
            molecule_mass_kg: default_molecule_mass(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("gas.pressure_pa", self.pressure_pa)?;
        positive("gas.temperature_k", self.temperature_k)?;
        positive("gas.molecule_mass_kg", self.molecule_mass_kg)
    }
}

/// Everything the dynamics and the closed forms need, computed once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub mass_kg: f64,
    pub coupling_a_rad_s: f64,
    pub kappa_rad_s: f64,
    pub omega_t_sq: f64,
    pub gamma_m: f64,
    pub alpha_bar_re: f64,
    pub alpha_bar_im: f64,
    pub photon_n: f64,
    pub mode_volume_m3: f64,
    pub wavenumber_k: f64,
    pub laser_omega_rad_s: f64,
    pub detuning_rad_s: f64,
    pub detuning_eff_rad_s: f64,
    pub pump_rate_rad_s: f64,
    pub waist_m: f64,
    pub charge_c: f64,
    pub gas_temperature_k: f64,
}

impl DerivedParams {
    pub fn from_specs(
        sphere: &SphereSpec,
        cavity: &CavitySpec,
        paul: &PaulTrapSpec,
        gas: &GasSpec,
    ) -> Result<Self> {
        sphere.validate()?;
        cavity.validate()?;
        paul.validate()?;
        gas.validate()?;

        let mass = derive_mass(sphere)?;
        let coupling_a = derive_coupling_a(sphere, cavity)?;
        let kappa = derive_kappa(cavity)?;
        let k = cavity.wavenumber();

        let (detuning, detuning_eff) = match cavity.detuning()? {
            Detuning::Bare(d) => (d, d - coupling_a),
            Detuning::Effective(d) => (d + coupling_a, d),
        };

        let pump = match cavity.drive()? {
            CavityDrive::PumpRate(e) => e,
            CavityDrive::PhotonNumber(n) => pump_for_photon_number(n, detuning_eff, kappa),
            CavityDrive::MechanicalFrequency(w) => {
                let n = photon_number_for_omega_m(w, mass, k, coupling_a);
                pump_for_photon_number(n, detuning_eff, kappa)
            }
        };
        let alpha_bar = derive_alpha_bar(pump, detuning_eff, kappa)?;

        Ok(DerivedParams {
            mass_kg: mass,
            coupling_a_rad_s: coupling_a,
            kappa_rad_s: kappa,
            omega_t_sq: derive_omega_t_sq(sphere, paul)?,
            gamma_m: derive_gas_damping(sphere, gas)?,
            alpha_bar_re: alpha_bar.re,
            alpha_bar_im: alpha_bar.im,
            photon_n: alpha_bar.norm_sqr(),
            mode_volume_m3: cavity.mode_volume(),
            wavenumber_k: k,
            laser_omega_rad_s: cavity.laser_omega(),
            detuning_rad_s: detuning,
            detuning_eff_rad_s: detuning_eff,
            pump_rate_rad_s: pump,
            waist_m: cavity.waist_m,
            charge_c: sphere.charge_coulomb(),
            gas_temperature_k: gas.temperature_k,
        })
    }

    pub fn alpha_bar(&self) -> Complex64 {
        Complex64::new(self.alpha_bar_re, self.alpha_bar_im)
    }

    /// Axial optical frequency at the antinode, `√(2ħk²An/m)`.
    pub fn omega_m_center(&self) -> f64 {
        (2.0 * HBAR * self.wavenumber_k.powi(2) * self.coupling_a_rad_s * self.photon_n
            / self.mass_kg)
            .sqrt()
    }

    /// Particle-shifted detuning at axial position `x` and radial envelope `envelope`.
    pub fn local_detuning(&self, x: f64, envelope: f64) -> f64 {
        let c = (self.wavenumber_k * x).cos();
        self.detuning_rad_s - self.coupling_a_rad_s * c * c * envelope
    }
}

pub fn derive_mass(sphere: &SphereSpec) -> Result<f64> {
    positive("sphere.radius_m", sphere.radius_m)?;
    positive("sphere.density_kg_m3", sphere.density_kg_m3)?;
    Ok(sphere.volume() * sphere.density_kg_m3)
}

/// `A = (3V_s / 2V_m) (ε_r − 1)/(ε_r + 2) ω_l`.
pub fn derive_coupling_a(sphere: &SphereSpec, cavity: &CavitySpec) -> Result<f64> {
    sphere.validate()?;
    positive("cavity.wavelength_m", cavity.wavelength_m)?;
    positive("cavity.waist_m", cavity.waist_m)?;
    positive("cavity.length_m", cavity.length_m)?;
    let eps = sphere.rel_permittivity;
    let clausius_mossotti = (eps - 1.0) / (eps + 2.0);
    Ok(1.5 * sphere.volume() / cavity.mode_volume() * clausius_mossotti * cavity.laser_omega())
}

/// Full angular linewidth of a Fabry–Pérot cavity, `κ = πc/(LF)`.
pub fn derive_kappa(cavity: &CavitySpec) -> Result<f64> {
    positive("cavity.length_m", cavity.length_m)?;
    positive("cavity.finesse", cavity.finesse)?;
    Ok(PI * SPEED_OF_LIGHT / (cavity.length_m * cavity.finesse))
}

/// Mean thermal speed of the gas molecules.
pub fn mean_molecular_speed(gas: &GasSpec) -> f64 {
    (8.0 * BOLTZMANN * gas.temperature_k / (PI * gas.molecule_mass_kg)).sqrt()
}

/// Epstein free-molecular damping rate.
pub fn derive_gas_damping(sphere: &SphereSpec, gas: &GasSpec) -> Result<f64> {
    gas.validate()?;
    let mass = derive_mass(sphere)?;
    Ok(EPSTEIN_PREFACTOR * sphere.radius_m.powi(2) * gas.pressure_pa
        / (mass * mean_molecular_speed(gas)))
}

/// `ω_T² = 2QV₀/(m r₀²)` with Q in coulombs.
pub fn derive_omega_t_sq(sphere: &SphereSpec, paul: &PaulTrapSpec) -> Result<f64> {
    paul.validate()?;
    let mass = derive_mass(sphere)?;
    Ok(2.0 * sphere.charge_coulomb() * paul.voltage_v / (mass * paul.scale_m.powi(2)))
}

/// Steady intracavity amplitude for a fixed particle: `ᾱ = −i𝓔 / (iΔ^x0 + κ/2)`.
pub fn derive_alpha_bar(pump: f64, detuning_eff: f64, kappa: f64) -> Result<Complex64> {
    positive("kappa", kappa)?;
    Ok(-Complex64::i() * pump / Complex64::new(0.5 * kappa, detuning_eff))
}

/// Pump amplitude giving `n = 𝓔²/(Δ^x0² + κ²/4)`.
pub fn pump_for_photon_number(photon_n: f64, detuning_eff: f64, kappa: f64) -> f64 {
    (photon_n * (detuning_eff * detuning_eff + 0.25 * kappa * kappa)).sqrt()
}

/// Photon number giving axial frequency `omega_m` at an antinode.
pub fn photon_number_for_omega_m(omega_m: f64, mass: f64, k: f64, coupling_a: f64) -> f64 {
    mass * omega_m * omega_m / (2.0 * HBAR * k * k * coupling_a)
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be finite, got {v}")))
    }
}

pub(crate) fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be > 0, got {v}")))
    }
}

pub(crate) fn non_negative(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be >= 0, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Independent evaluation of the closed forms with literal constants,
    // kept apart from the production code path.
    mod oracle {
        pub const C: f64 = 299_792_458.0;
        pub const PI: f64 = std::f64::consts::PI;
        pub fn mass(r: f64, rho: f64) -> f64 {
            rho * 4.0 * PI * r * r * r / 3.0
        }
    }

    fn cavity() -> CavitySpec {
        CavitySpec::reference_cavity()
            .with_drive(CavityDrive::PhotonNumber(3.9e9))
            .with_detuning(Detuning::Effective(2.0 * PI * 100e3))
    }

    #[test]
    fn mass_of_reference_sphere() {
        let m = derive_mass(&SphereSpec::silica_209nm()).unwrap();
        assert_relative_eq!(m, oracle::mass(209e-9, 2200.0), max_relative = 1e-12);
        assert_relative_eq!(m, 8.41e-17, max_relative = 2e-3);
    }

    #[test]
    fn mass_scales_cubically_and_rejects_zero_density() {
        let mut s = SphereSpec::silica_209nm();
        let m1 = derive_mass(&s).unwrap();
        s.radius_m *= 2.0;
        assert_relative_eq!(derive_mass(&s).unwrap(), 8.0 * m1, max_relative = 1e-12);
        s.density_kg_m3 = 0.0;
        assert!(matches!(derive_mass(&s), Err(Error::InvalidInput { .. })));
    }

    #[test]
    fn coupling_a_closed_form() {
        let s = SphereSpec::silica_209nm();
        let a = derive_coupling_a(&s, &cavity()).unwrap();
        let vs = 4.0 / 3.0 * oracle::PI * 209e-9f64.powi(3);
        let vm = oracle::PI * 60e-6f64.powi(2) * 13e-3;
        let wl = 2.0 * oracle::PI * oracle::C / 1064e-9;
        let expected = 3.0 * vs / (2.0 * vm) * (1.1 / 4.1) * wl;
        assert_relative_eq!(a, expected, max_relative = 1e-12);
        assert_relative_eq!(a, 1.85e5, max_relative = 5e-3);
        assert_relative_eq!(a / (2.0 * PI), 29.5e3, max_relative = 2e-2);
    }

    #[test]
    fn coupling_a_vanishes_for_vacuum_sphere_and_is_linear_in_volume() {
        let mut s = SphereSpec::silica_209nm();
        let a1 = derive_coupling_a(&s, &cavity()).unwrap();
        s.radius_m *= 2f64.powf(1.0 / 3.0);
        assert_relative_eq!(derive_coupling_a(&s, &cavity()).unwrap(), 2.0 * a1, max_relative = 1e-12);
        s.rel_permittivity = 1.0;
        assert_eq!(derive_coupling_a(&s, &cavity()).unwrap(), 0.0);
    }

    #[test]
    fn kappa_from_finesse() {
        let mut c = cavity();
        let k = derive_kappa(&c).unwrap();
        assert_relative_eq!(k, oracle::PI * oracle::C / (13e-3 * 5e4), max_relative = 1e-12);
        assert_relative_eq!(k, 1.449e6, max_relative = 1e-3);
        assert_relative_eq!(k / (2.0 * PI), 230.6e3, max_relative = 2e-3);
        c.finesse = 1e5;
        assert_relative_eq!(derive_kappa(&c).unwrap(), k / 2.0, max_relative = 1e-12);
        c.finesse = 4e4;
        assert_relative_eq!(derive_kappa(&c).unwrap() / (2.0 * PI), 288.3e3, max_relative = 1e-3);
    }

    #[test]
    fn epstein_damping() {
        let s = SphereSpec::silica_209nm();
        let g = derive_gas_damping(&s, &GasSpec::nitrogen(3e-2)).unwrap();
        let m_n2 = 28.0134 * 1.660_539_066_60e-27;
        let vbar = (8.0 * 1.380_649e-23 * 300.0 / (oracle::PI * m_n2)).sqrt();
        let expected = 15.8 * 209e-9f64.powi(2) * 3e-2 / (oracle::mass(209e-9, 2200.0) * vbar);
        assert_relative_eq!(g, expected, max_relative = 1e-12);
        assert_relative_eq!(g, 0.5, max_relative = 0.05);
        assert_eq!(derive_gas_damping(&s, &GasSpec::nitrogen(0.0)).unwrap(), 0.0);
        let g10 = derive_gas_damping(&s, &GasSpec::nitrogen(3e-1)).unwrap();
        assert_relative_eq!(g10, 10.0 * g, max_relative = 1e-12);
    }

    #[test]
    fn paul_trap_strength() {
        let mut s = SphereSpec::silica_209nm();
        let p = PaulTrapSpec::reference_trap();
        let w2 = derive_omega_t_sq(&s, &p).unwrap();
        let expected = 2.0 * 1.602_176_634e-19 * 300.0 / (oracle::mass(209e-9, 2200.0) * 1e-6);
        assert_relative_eq!(w2, expected, max_relative = 1e-12);
        assert_relative_eq!(w2, 1.14e6, max_relative = 5e-3);
        s.charge_count = 4;
        assert_relative_eq!(derive_omega_t_sq(&s, &p).unwrap(), 4.0 * w2, max_relative = 1e-12);
        s.charge_count = 0;
        assert_eq!(derive_omega_t_sq(&s, &p).unwrap(), 0.0);
    }

    #[test]
    fn alpha_bar_limits() {
        let k = 1.45e6;
        assert_eq!(derive_alpha_bar(0.0, 1e5, k).unwrap().norm(), 0.0);
        let e = 3.0e9;
        let a = derive_alpha_bar(e, 0.0, k).unwrap();
        assert_relative_eq!(a.norm_sqr(), 4.0 * e * e / (k * k), max_relative = 1e-12);
    }

    #[test]
    fn pump_for_target_photon_number() {
        let pump = pump_for_photon_number(3.9e9, 2.0 * PI * 100e3, 1.45e6);
        // 𝓔² = n (Δ² + κ²/4)
        let d: f64 = 2.0 * PI * 100e3;
        let expected = (3.9e9 * (d * d + 1.45e6f64.powi(2) / 4.0)).sqrt();
        assert_relative_eq!(pump, expected, max_relative = 1e-12);
        assert_relative_eq!(pump, 6.0e10, max_relative = 1e-2);
    }

    #[test]
    fn photon_number_matches_alpha_bar_for_every_drive_kind() {
        let s = SphereSpec::silica_209nm();
        let p = PaulTrapSpec::reference_trap();
        let g = GasSpec::nitrogen(1e-2);
        for drive in [
            CavityDrive::PumpRate(5e10),
            CavityDrive::PhotonNumber(2.44e8),
            CavityDrive::MechanicalFrequency(2.0 * PI * 10e3),
        ] {
            let c = cavity().with_drive(drive);
            let d = DerivedParams::from_specs(&s, &c, &p, &g).unwrap();
            assert_eq!(d.photon_n, d.alpha_bar().norm_sqr());
        }
        let c = cavity().with_drive(CavityDrive::MechanicalFrequency(2.0 * PI * 40e3));
        let d = DerivedParams::from_specs(&s, &c, &p, &g).unwrap();
        assert_relative_eq!(d.photon_n, 3.9e9, max_relative = 1e-2);
        assert_relative_eq!(d.omega_m_center(), 2.0 * PI * 40e3, max_relative = 1e-12);
    }

    #[test]
    fn detuning_conventions_agree() {
        let s = SphereSpec::silica_209nm();
        let p = PaulTrapSpec::reference_trap();
        let g = GasSpec::nitrogen(1e-2);
        let eff = DerivedParams::from_specs(&s, &cavity(), &p, &g).unwrap();
        let bare = cavity().with_detuning(Detuning::Bare(eff.detuning_rad_s));
        let bare = DerivedParams::from_specs(&s, &bare, &p, &g).unwrap();
        assert_relative_eq!(bare.detuning_eff_rad_s, 2.0 * PI * 100e3, max_relative = 1e-12);
        assert_relative_eq!(eff.local_detuning(0.0, 1.0), eff.detuning_eff_rad_s, max_relative = 1e-12);
    }

    #[test]
    fn missing_or_duplicate_drive_is_rejected() {
        let mut c = cavity();
        c.pump_rate_rad_s = Some(1.0);
        assert!(c.validate().is_err());
        let mut c = cavity();
        c.target_photon_number = None;
        assert!(c.validate().is_err());
    }
}
