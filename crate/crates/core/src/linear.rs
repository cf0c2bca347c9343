//! Closed-form layer: linearisation about a trapped well, the drive-induced
//! excursion of the equilibrium, the optomechanical cooling rate, the
//! cavity-shifted secular frequency and steady-state temperatures.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constants::{BOLTZMANN, HBAR};
use crate::error::{Error, Result};
use crate::params::{DerivedParams, PaulTrapSpec};

/// A particle sitting in optical well `well_index`, displaced from the
/// antinode by `equilibrium_offset` at Paul-drive phase `drive_phase`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellSite {
    pub well_index: u32,
    pub equilibrium_offset: f64,
    pub drive_phase: f64,
}

impl WellSite {
    pub fn antinode(well_index: u32) -> Self {
        WellSite {
            well_index,
            equilibrium_offset: 0.0,
            drive_phase: 0.0,
        }
    }

    /// Axial coordinate of the antinode, measured from the Paul-trap centre.
    pub fn antinode_position(&self, k: f64) -> f64 {
        f64::from(self.well_index) * PI / k
    }

    /// Absolute equilibrium position `Nπ/k + x₀`.
    pub fn position(&self, k: f64) -> f64 {
        self.antinode_position(k) + self.equilibrium_offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizedModel {
    /// Linear coupling, rad/(s·m).
    pub g1: f64,
    /// Quadratic coupling, rad/(s·m²).
    pub g2: f64,
    pub omega_m: f64,
    pub duffing_eps: f64,
    pub detuning_eff: f64,
    pub x_zpf: f64,
    pub g1_single: f64,
    pub g2_single: f64,
    pub gamma_opt: f64,
    pub omega_s: f64,
    pub wavenumber_k: f64,
    pub sin_2kx0: f64,
    pub cos_2kx0: f64,
}

impl LinearizedModel {
    /// `kA|ᾱ|`, the envelope of both couplings.
    pub fn coupling_scale(&self) -> f64 {
        let k = self.wavenumber_k;
        k * ((self.g1 / k).powi(2) + (self.g2 / (k * k)).powi(2)).sqrt()
    }
}

/// Linearise the axial motion about absolute position `x0`.
pub fn linearize_at(x0: f64, params: &DerivedParams, paul: &PaulTrapSpec) -> Result<LinearizedModel> {
    let k = params.wavenumber_k;
    let a = params.coupling_a_rad_s;
    let alpha = params.photon_n.sqrt();
    let (sin2, cos2) = (2.0 * k * x0).sin_cos();
    if !(cos2 > 0.0) {
        return Err(Error::NotAWell { cos_2kx0: cos2 });
    }
    let omega_m =
        (2.0 * HBAR * k * k * a * params.photon_n * cos2 / params.mass_kg).sqrt();
    let x_zpf = if omega_m > 0.0 {
        (HBAR / (2.0 * params.mass_kg * omega_m)).sqrt()
    } else {
        0.0
    };
    let cos_kx = (k * x0).cos();
    let mut model = LinearizedModel {
        g1: k * a * alpha * sin2,
        g2: k * k * a * alpha * cos2,
        omega_m,
        duffing_eps: k * sin2 / cos2,
        detuning_eff: params.detuning_rad_s - a * cos_kx * cos_kx,
        x_zpf,
        g1_single: k * a * x_zpf,
        g2_single: k * k * a * x_zpf * x_zpf,
        gamma_opt: 0.0,
        omega_s: secular_frequency(params, paul, params.photon_n),
        wavenumber_k: k,
        sin_2kx0: sin2,
        cos_2kx0: cos2,
    };
    model.gamma_opt = cooling_rate(&model, params.kappa_rad_s, sin2);
    Ok(model)
}

/// Peak excursion of the equilibrium point, `(ω_T²/ω_M²)(πN/k)`; the offset
/// follows `x₀(t) = −amp·sin(ω_d t)`.
pub fn excursion_amplitude(well: &WellSite, omega_t_sq: f64, omega_m: f64, k: f64) -> f64 {
    if omega_m <= 0.0 {
        return 0.0;
    }
    omega_t_sq / (omega_m * omega_m) * f64::from(well.well_index) * PI / k
}

/// Well site at a given drive phase, with the equilibrium displaced per the excursion.
pub fn well_at_phase(well_index: u32, drive_phase: f64, params: &DerivedParams) -> WellSite {
    let site = WellSite::antinode(well_index);
    let amp = excursion_amplitude(
        &site,
        params.omega_t_sq,
        params.omega_m_center(),
        params.wavenumber_k,
    );
    WellSite {
        equilibrium_offset: -amp * drive_phase.sin(),
        drive_phase,
        ..site
    }
}

/// Cavity susceptibility `S(ω) = [(Δ^x0 − ω)² + κ²/4]⁻¹`.
pub fn susceptibility(detuning_eff: f64, kappa: f64, omega: f64) -> f64 {
    1.0 / ((detuning_eff - omega).powi(2) + 0.25 * kappa * kappa)
}

/// `Γ_opt = (kA|ᾱ| sin(2kx₀) x_zpf)² κ [S(ω_M) − S(−ω_M)]`.
pub fn cooling_rate(model: &LinearizedModel, kappa: f64, sin_2kx0: f64) -> f64 {
    let g = model.coupling_scale() * sin_2kx0 * model.x_zpf;
    g * g
        * kappa
        * (susceptibility(model.detuning_eff, kappa, model.omega_m)
            - susceptibility(model.detuning_eff, kappa, -model.omega_m))
}

/// `⟨sin²(θ sin φ)⟩` over one drive period.
pub fn drive_averaged_sin_sq(phase_amplitude: f64) -> f64 {
    // Smooth periodic integrand: the uniform rule converges spectrally.
    const NODES: usize = 512;
    (0..NODES)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / NODES as f64;
            (phase_amplitude * phi.sin()).sin().powi(2)
        })
        .sum::<f64>()
        / NODES as f64
}

/// Cooling in well `N`, bracketed by its peak and drive-cycle-averaged values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellCooling {
    pub peak: f64,
    pub cycle_average: f64,
    pub excursion_amplitude: f64,
    /// `2k·amp`, the peak phase excursion of `2kx₀`.
    pub phase_amplitude: f64,
}

pub fn well_cooling(params: &DerivedParams, paul: &PaulTrapSpec, well_index: u32) -> Result<WellCooling> {
    let site = WellSite::antinode(well_index);
    let center = linearize_at(site.position(params.wavenumber_k), params, paul)?;
    let amp = excursion_amplitude(&site, params.omega_t_sq, center.omega_m, params.wavenumber_k);
    let theta = 2.0 * params.wavenumber_k * amp;
    let peak_sin = theta.min(PI / 2.0).sin();
    let unit = cooling_rate(&center, params.kappa_rad_s, 1.0);
    Ok(WellCooling {
        peak: unit * peak_sin * peak_sin,
        cycle_average: unit * drive_averaged_sin_sq(theta),
        excursion_amplitude: amp,
        phase_amplitude: theta,
    })
}

/// Mean optical frequency seen over a drive cycle, `ω_M ⟨√cos(θ sin φ)⟩`,
/// valid when the drive is slow against `ω_M`.
pub fn drive_averaged_omega_m(params: &DerivedParams, paul: &PaulTrapSpec, well_index: u32) -> Result<f64> {
    let cooling = well_cooling(params, paul, well_index)?;
    let center = linearize_at(WellSite::antinode(well_index).position(params.wavenumber_k), params, paul)?;
    const NODES: usize = 512;
    let mean = (0..NODES)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / NODES as f64;
            (cooling.phase_amplitude * phi.sin()).cos().max(0.0).sqrt()
        })
        .sum::<f64>()
        / NODES as f64;
    Ok(center.omega_m * mean)
}

/// Adiabatic axial acceleration per unit mass at offset `x` from antinode `N`,
/// optical plus the Paul term at drive phase `phase`. The intracavity number
/// follows the local detuning.
fn axial_acceleration(x: f64, x_n: f64, phase: f64, params: &DerivedParams) -> f64 {
    let k = params.wavenumber_k;
    let d = params.local_detuning(x, 1.0);
    let n = params.pump_rate_rad_s.powi(2) / (d * d + 0.25 * params.kappa_rad_s.powi(2));
    -HBAR * k * params.coupling_a_rad_s * n * (2.0 * k * x).sin() / params.mass_kg
        - params.omega_t_sq * (x_n + x) * phase.sin()
}

/// Equilibrium offset from the antinode at one drive phase. The `ω_d²x` term
/// is the inertia of the driven excursion at the fundamental.
fn equilibrium_offset(x_n: f64, phase: f64, omega_d: f64, params: &DerivedParams) -> Result<f64> {
    let edge = 0.25 * PI / params.wavenumber_k * (1.0 - 1e-9);
    let f = |x: f64| axial_acceleration(x, x_n, phase, params) + omega_d * omega_d * x;
    let (mut lo, mut hi) = (-edge, edge);
    if f(lo) * f(hi) > 0.0 {
        return Err(Error::invalid(
            "well_index",
            "Paul force exceeds the optical restoring force; no equilibrium in the well",
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Local axial stiffness `ω²(φ)` about the quasi-static equilibrium.
pub fn stiffness_at_phase(params: &DerivedParams, paul: &PaulTrapSpec, well_index: u32, phase: f64) -> Result<f64> {
    let x_n = WellSite::antinode(well_index).position(params.wavenumber_k);
    let x = equilibrium_offset(x_n, phase, paul.drive_freq_rad_s, params)?;
    let h = 1e-4 / params.wavenumber_k;
    let f = |x: f64| axial_acceleration(x, x_n, phase, params);
    Ok(-(f(x + h) - f(x - h)) / (2.0 * h))
}

/// Floquet frequency of small axial oscillations under the drive-modulated
/// stiffness; spectral lines sit at `ω_F + jω_d`. Returns the branch closest
/// to the RMS stiffness frequency.
pub fn drive_floquet_omega(params: &DerivedParams, paul: &PaulTrapSpec, well_index: u32) -> Result<f64> {
    const NODES: usize = 1024;
    let wd = paul.drive_freq_rad_s;
    let stiff = (0..NODES)
        .map(|i| stiffness_at_phase(params, paul, well_index, 2.0 * PI * i as f64 / NODES as f64))
        .collect::<Result<Vec<f64>>>()?;
    let rms = (stiff.iter().sum::<f64>() / NODES as f64).max(0.0).sqrt();
    if wd <= 0.0 {
        return Ok(rms);
    }
    let period = 2.0 * PI / wd;
    let steps = 64 * NODES;
    let h = period / steps as f64;
    let omega_sq = |t: f64| {
        let u = (t / period).rem_euclid(1.0) * NODES as f64;
        let i = u.floor() as usize % NODES;
        let frac = u - u.floor();
        stiff[i] * (1.0 - frac) + stiff[(i + 1) % NODES] * frac
    };
    // Monodromy matrix by RK4 over one drive period.
    let mut trace = 0.0;
    for (j, start) in [[1.0, 0.0], [0.0, 1.0]].into_iter().enumerate() {
        let (mut x, mut v) = (start[0], start[1]);
        for s in 0..steps {
            let t = s as f64 * h;
            let (k1x, k1v) = (v, -omega_sq(t) * x);
            let (k2x, k2v) = (v + 0.5 * h * k1v, -omega_sq(t + 0.5 * h) * (x + 0.5 * h * k1x));
            let (k3x, k3v) = (v + 0.5 * h * k2v, -omega_sq(t + 0.5 * h) * (x + 0.5 * h * k2x));
            let (k4x, k4v) = (v + h * k3v, -omega_sq(t + h) * (x + h * k3x));
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        }
        trace += if j == 0 { x } else { v };
    }
    let half = 0.5 * trace;
    if half.abs() > 1.0 {
        return Err(Error::invalid("well_index", "axial motion is parametrically unstable under the drive"));
    }
    let mu = half.acos() / period;
    let j = ((rms - mu) / wd).round();
    let a = mu + j * wd;
    let jb = ((rms + mu) / wd).round();
    let b = -mu + jb * wd;
    Ok(if (a - rms).abs() <= (b - rms).abs() { a } else { b })
}

/// Cavity-shifted secular frequency,
/// `ω_s = (ω_d/2) √(16ħAn/(m w² ω_d²) + 8Q²V₀²/(m ω_d² r₀²)²)`.
pub fn secular_frequency(params: &DerivedParams, paul: &PaulTrapSpec, photon_n: f64) -> f64 {
    let wd = paul.drive_freq_rad_s;
    let m = params.mass_kg;
    let optical = 16.0 * HBAR * params.coupling_a_rad_s * photon_n / (m * params.waist_m.powi(2) * wd * wd);
    let paul_term = 8.0 * (params.charge_c * paul.voltage_v).powi(2)
        / (m * wd * wd * paul.scale_m.powi(2)).powi(2);
    0.5 * wd * (optical + paul_term).max(0.0).sqrt()
}

/// Two-bath balance `T = T_B γ_M / (γ_M + Γ_opt)`; returns `(T_eff, T_B/T_eff)`.
pub fn steady_state_temperature(gamma_m: f64, gamma_opt: f64, bath_k: f64) -> Result<(f64, f64)> {
    if gamma_m < 0.0 || gamma_opt < 0.0 || !gamma_m.is_finite() || !gamma_opt.is_finite() {
        return Err(Error::invalid(
            "rates",
            format!("damping rates must be >= 0, got γ_M = {gamma_m}, Γ_opt = {gamma_opt}"),
        ));
    }
    if gamma_m + gamma_opt == 0.0 {
        return Err(Error::UndefinedEquilibrium);
    }
    let t = bath_k * gamma_m / (gamma_m + gamma_opt);
    Ok((t, (gamma_m + gamma_opt) / gamma_m))
}

/// `n_p = k_B T/(ħω_M) − ½`, floored at zero.
pub fn phonon_occupancy(t_eff: f64, omega_m: f64) -> f64 {
    (BOLTZMANN * t_eff / (HBAR * omega_m) - 0.5).max(0.0)
}
