//! Full 3D stochastic particle–cavity dynamics.
//!
//! Equations integrated (axial `x`, radial `y`, `z`):
//!
//! ```text
//! ẍ = W|a|² sin(2kx) F − γ ẋ − ω_T² x sin(ω_d t) + ζ_x
//! ÿ = −(4ħA/mw²)|a|² cos²(kx) y F − γ ẏ − ω_T² y sin(ω_d t) + ζ_y
//! z̈ = −(4ħA/mw²)|a|² cos²(kx) z F − γ ż + 2ω_T² z sin(ω_d t) + ζ_z
//! ȧ = −(iΔ + κ/2) a + iA cos²(kx) F a − i𝓔 + η
//! ```
//!
//! with `W = −ħkA/m` and `F = exp(−2(y² + z²)/w²)`. The optical forces are the
//! exact gradient of `−ħA|a|² cos²(kx) F`. The stiff linear cavity part is
//! advanced by its exact exponential (exponential time differencing); the
//! remaining terms by the selected scheme.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::constants::{BOLTZMANN, HBAR};
use crate::error::{Error, Result};
use crate::linear;
use crate::params::{DerivedParams, PaulTrapSpec};

/// Identifier of the only supported generator: ChaCha8 keyed by the master
/// seed, one stream per ensemble member.
pub const RNG_ALGORITHM: &str = "chacha8-stream";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub field: Complex64,
    pub time: f64,
}

impl SimState {
    fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.velocity).all(|v| v.is_finite())
            && self.field.re.is_finite()
            && self.field.im.is_finite()
    }
}

fn default_rng() -> String {
    RNG_ALGORITHM.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "yes")]
    pub thermal: bool,
    #[serde(default)]
    pub shot_noise: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rng")]
    pub rng_algorithm: String,
}

fn yes() -> bool {
    true
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            thermal: true,
            shot_noise: false,
            seed: 0,
            rng_algorithm: default_rng(),
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            thermal: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    EulerMaruyama,
    StochasticHeun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CavityMode {
    /// Field integrated as its own degree of freedom.
    Resolved,
    /// Field slaved to the instantaneous steady state at the particle position.
    Adiabatic,
    /// Field held at ᾱ; the particle moves in a static optical potential.
    Frozen,
}

fn default_stride() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt_s: f64,
    pub duration_s: f64,
    #[serde(default = "default_stride")]
    pub record_stride: u64,
    pub scheme: Scheme,
    pub cavity_mode: CavityMode,
}

impl IntegratorConfig {
    pub fn steps(&self) -> u64 {
        (self.duration_s / self.dt_s).round() as u64
    }

    /// Largest admissible step: 2% of the fastest mechanical or drive period,
    /// and 20% of the cavity decay time when the field is resolved.
    pub fn max_dt(&self, params: &DerivedParams, drive_omega: f64) -> f64 {
        let fastest = params.omega_m_center().max(drive_omega);
        let mechanical = 0.02 * 2.0 * std::f64::consts::PI / fastest;
        match self.cavity_mode {
            CavityMode::Resolved => mechanical.min(0.2 * 2.0 / params.kappa_rad_s),
            CavityMode::Adiabatic | CavityMode::Frozen => mechanical,
        }
    }

    pub fn validate(&self, params: &DerivedParams, drive_omega: f64) -> Result<()> {
        crate::params::positive("integrator.dt_s", self.dt_s)?;
        crate::params::positive("integrator.duration_s", self.duration_s)?;
        if self.record_stride == 0 {
            return Err(Error::invalid("integrator.record_stride", "must be >= 1"));
        }
        let bound = self.max_dt(params, drive_omega);
        if self.dt_s > bound * (1.0 + 1e-9) {
            return Err(Error::invalid(
                "integrator.dt_s",
                format!("{:e} s exceeds the stability bound {:e} s", self.dt_s, bound),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditions {
    /// Temperature of the initial thermal draw; defaults to the gas temperature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_k: Option<f64>,
    /// Start at the two-bath steady-state temperature of the well instead.
    #[serde(default)]
    pub steady_state_start: bool,
    /// Displacement from the well antinode, m.
    #[serde(default)]
    pub offset_m: [f64; 3],
    /// Initial velocity added to the thermal draw, m/s.
    #[serde(default)]
    pub velocity_m_s: [f64; 3],
    /// Start on the drive-forced trajectory of the well bottom rather than at rest.
    #[serde(default = "yes")]
    pub follow_excursion: bool,
    /// Give every member exactly `k_B T` of axial energy at a random phase
    /// instead of a thermal draw. Transverse axes stay thermal.
    #[serde(default)]
    pub fixed_axial_energy: bool,
}

impl Default for InitialConditions {
    fn default() -> Self {
        InitialConditions {
            temperature_k: None,
            steady_state_start: false,
            offset_m: [0.0; 3],
            velocity_m_s: [0.0; 3],
            follow_excursion: true,
            fixed_axial_energy: false,
        }
    }
}

/// Uniformly sampled record of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<SimState>,
    pub sample_interval: f64,
    pub config_hash: String,
    pub seed: u64,
    pub member: u64,
}

pub const CSV_HEADER: &str = "t,x,y,z,vx,vy,vz,re_a,im_a";

impl Trajectory {
    pub fn sample_rate(&self) -> f64 {
        1.0 / self.sample_interval
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.position[axis]).collect()
    }

    pub fn velocity_axis(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.velocity[axis]).collect()
    }

    pub fn field(&self) -> Vec<Complex64> {
        self.samples.iter().map(|s| s.field).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for s in &self.samples {
            // `{:e}` on f64 prints the shortest representation that round-trips.
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                s.time,
                s.position[0],
                s.position[1],
                s.position[2],
                s.velocity[0],
                s.velocity[1],
                s.velocity[2],
                s.field.re,
                s.field.im
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(e.to_string()))?;
            if i == 0 {
                if line.trim() != CSV_HEADER {
                    return Err(Error::Config(format!("unexpected trajectory header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            if v.len() != 9 {
                return Err(Error::Config(format!("line {}: expected 9 columns", i + 1)));
            }
            samples.push(SimState {
                time: v[0],
                position: [v[1], v[2], v[3]],
                velocity: [v[4], v[5], v[6]],
                field: Complex64::new(v[7], v[8]),
            });
        }
        if samples.len() < 2 {
            return Err(Error::Config("trajectory needs at least two samples".into()));
        }
        let sample_interval = samples[1].time - samples[0].time;
        Ok(Trajectory {
            samples,
            sample_interval,
            config_hash: String::new(),
            seed: 0,
            member: 0,
        })
    }

    /// Flat little-endian stream of `f64` records in CSV column order.
    pub fn write_binary<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for s in &self.samples {
            for v in [
                s.time,
                s.position[0],
                s.position[1],
                s.position[2],
                s.velocity[0],
                s.velocity[1],
                s.velocity[2],
                s.field.re,
                s.field.im,
            ] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// JSON sidecar describing the binary layout.
    pub fn binary_layout(&self) -> serde_json::Value {
        serde_json::json!({
            "byte_order": "little-endian",
            "value_type": "f64",
            "record_fields": CSV_HEADER.split(',').collect::<Vec<_>>(),
            "record_bytes": 9 * 8,
            "records": self.samples.len(),
            "sample_interval_s": self.sample_interval,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "member": self.member,
        })
    }
}

/// Instantaneous optical envelope `exp(−2(y² + z²)/w²)`.
fn envelope(position: &[f64; 3], waist: f64) -> f64 {
    (-2.0 * (position[1] * position[1] + position[2] * position[2]) / (waist * waist)).exp()
}

/// Deterministic acceleration (optical + Paul + gas damping) at time `t`.
pub fn force_field(state: &SimState, params: &DerivedParams, drive_omega: f64, t: f64) -> [f64; 3] {
    Forces::new(params, drive_omega).acceleration(&state.position, &state.velocity, state.field.norm_sqr(), t)
}

/// Cavity field slaved to position: `a = −i𝓔 / (iΔ(x) + κ/2)`.
pub fn adiabatic_field(position: &[f64; 3], params: &DerivedParams) -> Complex64 {
    let detuning = params.local_detuning(position[0], envelope(position, params.waist_m));
    -Complex64::i() * params.pump_rate_rad_s / Complex64::new(0.5 * params.kappa_rad_s, detuning)
}

#[derive(Debug, Clone, Copy)]
struct Forces {
    k: f64,
    axial: f64,
    radial: f64,
    waist: f64,
    gamma: f64,
    omega_t_sq: f64,
    drive_omega: f64,
}

impl Forces {
    fn new(params: &DerivedParams, drive_omega: f64) -> Self {
        let m = params.mass_kg;
        let a = params.coupling_a_rad_s;
        Forces {
            k: params.wavenumber_k,
            axial: -HBAR * params.wavenumber_k * a / m,
            radial: 4.0 * HBAR * a / (m * params.waist_m * params.waist_m),
            waist: params.waist_m,
            gamma: params.gamma_m,
            omega_t_sq: params.omega_t_sq,
            drive_omega,
        }
    }

    #[inline]
    fn acceleration(&self, pos: &[f64; 3], vel: &[f64; 3], intensity: f64, t: f64) -> [f64; 3] {
        let f = envelope(pos, self.waist);
        let (s, c) = (self.k * pos[0]).sin_cos();
        let paul = self.omega_t_sq * (self.drive_omega * t).sin();
        let radial = -self.radial * intensity * c * c * f;
        [
            self.axial * intensity * 2.0 * s * c * f - self.gamma * vel[0] - paul * pos[0],
            radial * pos[1] - self.gamma * vel[1] - paul * pos[1],
            radial * pos[2] - self.gamma * vel[2] + 2.0 * paul * pos[2],
        ]
    }
}

/// One configured integrator; owns all precomputed coefficients.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: DerivedParams,
    paul: PaulTrapSpec,
    forces: Forces,
    noise: NoiseConfig,
    integrator: IntegratorConfig,
    well_index: u32,
    initial: InitialConditions,
    config_hash: String,
    thermal_sigma: f64,
    shot_sigma: f64,
    propagator: Complex64,
    phi1: Complex64,
    phi2: Complex64,
}

impl Simulator {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let params = config.derive()?;
        Self::from_parts(
            params,
            config.paul.clone(),
            config.well_index,
            config.noise.clone(),
            config.integrator.clone(),
            config.initial.clone(),
            config.hash(),
        )
    }

    pub fn from_parts(
        params: DerivedParams,
        paul: PaulTrapSpec,
        well_index: u32,
        noise: NoiseConfig,
        integrator: IntegratorConfig,
        initial: InitialConditions,
        config_hash: String,
    ) -> Result<Self> {
        integrator.validate(&params, paul.drive_freq_rad_s)?;
        if noise.rng_algorithm != RNG_ALGORITHM {
            return Err(Error::invalid(
                "noise.rng_algorithm",
                format!("only `{RNG_ALGORITHM}` is supported"),
            ));
        }
        let h = integrator.dt_s;
        let z = Complex64::new(-0.5 * params.kappa_rad_s, -params.detuning_rad_s) * h;
        let propagator = z.exp();
        let phi1 = (propagator - 1.0) / z;
        let phi2 = (propagator - 1.0 - z) / (z * z);
        Ok(Simulator {
            thermal_sigma: thermal_kick_sigma(params.gamma_m, params.gas_temperature_k, params.mass_kg, h),
            shot_sigma: (0.5 * params.kappa_rad_s * h).sqrt(),
            forces: Forces::new(&params, paul.drive_freq_rad_s),
            params,
            paul,
            noise,
            integrator,
            well_index,
            initial,
            config_hash,
            propagator,
            phi1,
            phi2,
        })
    }

    pub fn params(&self) -> &DerivedParams {
        &self.params
    }

    pub fn integrator(&self) -> &IntegratorConfig {
        &self.integrator
    }

    pub fn rng_for_member(&self, member: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed);
        rng.set_stream(member);
        rng
    }

    fn initial_temperature(&self) -> f64 {
        if self.initial.steady_state_start {
            let bath = self.params.gas_temperature_k;
            let gamma_opt = linear::well_cooling(&self.params, &self.paul, self.well_index)
                .map(|c| c.cycle_average.max(0.0))
                .unwrap_or(0.0);
            linear::steady_state_temperature(self.params.gamma_m, gamma_opt, bath)
                .map(|(t, _)| t)
                .unwrap_or(bath)
        } else {
            self.initial.temperature_k.unwrap_or(self.params.gas_temperature_k)
        }
    }

    /// Oscillation frequencies used to spread the initial positions: optical
    /// plus Paul secular confinement per axis (the z Paul term is doubled).
    fn thermal_frequencies(&self) -> [f64; 3] {
        let p = &self.params;
        let wd = self.paul.drive_freq_rad_s;
        let m = p.mass_kg;
        let optical = 4.0 * HBAR * p.coupling_a_rad_s * p.photon_n / (m * p.waist_m * p.waist_m);
        let paul_sq = if wd > 0.0 {
            2.0 * (p.charge_c * self.paul.voltage_v).powi(2) / (m * wd * self.paul.scale_m.powi(2)).powi(2)
        } else {
            0.0
        };
        [
            (p.omega_m_center().powi(2) + paul_sq).sqrt(),
            (optical + paul_sq).sqrt(),
            (optical + 4.0 * paul_sq).sqrt(),
        ]
    }

    /// Axial velocity at `t = 0` of the forced response `x₀(t) = −X sin(ω_d t)`,
    /// `X = ω_T² x_N / (ω_M² − ω_d²)`.
    fn excursion_velocity(&self) -> f64 {
        let wm = self.params.omega_m_center();
        let wd = self.paul.drive_freq_rad_s;
        if wm <= wd {
            return 0.0;
        }
        let x_n = f64::from(self.well_index) * std::f64::consts::PI / self.params.wavenumber_k;
        -self.params.omega_t_sq * x_n / (wm * wm - wd * wd) * wd
    }

    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> SimState {
        let k = self.params.wavenumber_k;
        let x_n = f64::from(self.well_index) * std::f64::consts::PI / k;
        let sigma_v = (BOLTZMANN * self.initial_temperature() / self.params.mass_kg).sqrt();
        let mut velocity = self.initial.velocity_m_s;
        if self.initial.follow_excursion {
            velocity[0] += self.excursion_velocity();
        }
        for v in &mut velocity {
            let xi: f64 = rng.sample(StandardNormal);
            *v += sigma_v * xi;
        }
        let mut position = [
            x_n + self.initial.offset_m[0],
            self.initial.offset_m[1],
            self.initial.offset_m[2],
        ];
        let omegas = self.thermal_frequencies();
        for (x, omega) in position.iter_mut().zip(omegas) {
            let xi: f64 = rng.sample(StandardNormal);
            if omega > 0.0 {
                *x += sigma_v / omega * xi;
            }
        }
        if self.initial.fixed_axial_energy {
            // Replace the axial thermal part by a definite amplitude √2·σ_v.
            let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            let amp_v = std::f64::consts::SQRT_2 * sigma_v;
            let mut v = self.initial.velocity_m_s[0] + amp_v * phase.cos();
            if self.initial.follow_excursion {
                v += self.excursion_velocity();
            }
            velocity[0] = v;
            position[0] = x_n + self.initial.offset_m[0] + amp_v / omegas[0] * phase.sin();
        }
        let field = match self.integrator.cavity_mode {
            CavityMode::Frozen => self.params.alpha_bar(),
            CavityMode::Resolved | CavityMode::Adiabatic => adiabatic_field(&position, &self.params),
        };
        SimState {
            position,
            velocity,
            field,
            time: 0.0,
        }
    }

    #[inline]
    fn field_drift(&self, field: Complex64, pos: &[f64; 3]) -> Complex64 {
        let c = (self.params.wavenumber_k * pos[0]).cos();
        let f = envelope(pos, self.params.waist_m);
        Complex64::i() * (self.params.coupling_a_rad_s * c * c * f * field - self.params.pump_rate_rad_s)
    }

    #[inline]
    fn slaved_field(&self, field: Complex64, pos: &[f64; 3]) -> Complex64 {
        match self.integrator.cavity_mode {
            CavityMode::Resolved | CavityMode::Frozen => field,
            CavityMode::Adiabatic => adiabatic_field(pos, &self.params),
        }
    }

    /// Advance one step of length `dt`.
    pub fn step<R: Rng>(&self, state: &SimState, rng: &mut R) -> SimState {
        let h = self.integrator.dt_s;
        let t = state.time;
        let mut kick = [0.0; 3];
        if self.noise.thermal && self.thermal_sigma > 0.0 {
            for k in &mut kick {
                let xi: f64 = rng.sample(StandardNormal);
                *k = self.thermal_sigma * xi;
            }
        }
        let resolved = self.integrator.cavity_mode == CavityMode::Resolved;
        let mut shot = Complex64::new(0.0, 0.0);
        if self.noise.shot_noise && resolved {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            shot = Complex64::new(re, im) * self.shot_sigma;
        }

        let x = state.position;
        let v = state.velocity;
        let a0 = state.field;
        let f0 = self.forces.acceleration(&x, &v, a0.norm_sqr(), t);
        let n0 = if resolved { self.field_drift(a0, &x) } else { Complex64::new(0.0, 0.0) };

        let mut xp = [0.0; 3];
        let mut vp = [0.0; 3];
        for i in 0..3 {
            xp[i] = x[i] + v[i] * h;
            vp[i] = v[i] + f0[i] * h + kick[i];
        }
        let ap = if resolved {
            self.propagator * a0 + self.phi1 * n0 * h + shot
        } else {
            self.slaved_field(a0, &xp)
        };

        match self.integrator.scheme {
            Scheme::EulerMaruyama => SimState {
                position: xp,
                velocity: vp,
                field: ap,
                time: t + h,
            },
            Scheme::StochasticHeun => {
                let f1 = self.forces.acceleration(&xp, &vp, ap.norm_sqr(), t + h);
                let mut xn = [0.0; 3];
                let mut vn = [0.0; 3];
                for i in 0..3 {
                    xn[i] = x[i] + 0.5 * (v[i] + vp[i]) * h;
                    vn[i] = v[i] + 0.5 * (f0[i] + f1[i]) * h + kick[i];
                }
                let an = if resolved {
                    let n1 = self.field_drift(ap, &xp);
                    self.propagator * a0 + (self.phi1 * n0 + self.phi2 * (n1 - n0)) * h + shot
                } else {
                    self.slaved_field(a0, &xn)
                };
                SimState {
                    position: xn,
                    velocity: vn,
                    field: an,
                    time: t + h,
                }
            }
        }
    }

    /// Integrate ensemble member `member` for the configured duration.
    pub fn run(&self, member: u64) -> Result<Trajectory> {
        let mut rng = self.rng_for_member(member);
        let mut state = self.initial_state(&mut rng);
        let steps = self.integrator.steps();
        let stride = self.integrator.record_stride;
        let mut samples = Vec::with_capacity((steps / stride + 1) as usize);
        samples.push(state);
        for i in 1..=steps {
            state = self.step(&state, &mut rng);
            // Time from the step counter avoids accumulated rounding.
            state.time = i as f64 * self.integrator.dt_s;
            if !state.is_finite() {
                return Err(Error::IntegrationDiverged { step: i });
            }
            if i % stride == 0 {
                samples.push(state);
            }
        }
        Ok(Trajectory {
            samples,
            sample_interval: self.integrator.dt_s * stride as f64,
            config_hash: self.config_hash.clone(),
            seed: self.noise.seed,
            member,
        })
    }

    /// Members `0..count`, integrated on the current rayon pool. The result
    /// does not depend on the number of workers.
    pub fn run_ensemble(&self, count: u64) -> Result<Vec<Trajectory>> {
        (0..count).into_par_iter().map(|m| self.run(m)).collect()
    }
}

/// Per-axis velocity kick standard deviation, `√(2γ k_B T dt / m)`.
pub fn thermal_kick_sigma(gamma_m: f64, temperature: f64, mass: f64, dt: f64) -> f64 {
    (2.0 * gamma_m * BOLTZMANN * temperature / mass * dt).sqrt()
}

/// Kinetic energy plus the frozen-field optical potential `−ħA n cos²(kx) F(y, z)`.
pub fn frozen_field_energy(state: &SimState, params: &DerivedParams) -> f64 {
    let v2: f64 = state.velocity.iter().map(|v| v * v).sum();
    let c = (params.wavenumber_k * state.position[0]).cos();
    0.5 * params.mass_kg * v2
        - HBAR * params.coupling_a_rad_s * params.photon_n * c * c * envelope(&state.position, params.waist_m)
}

/// Integrate member 0 of a validated config.
/// Ensemble axial energy in kelvin, `(m/2k_B)(var v_x + ω² var x)` across
/// members, averaged over consecutive bins of `bin_s`. Returns bin centres
/// and energies.
pub fn ensemble_axial_energy(trajs: &[Trajectory], omega: f64, mass: f64, bin_s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if trajs.len() < 2 {
        return Err(Error::invalid("ensemble", "need at least two members for a variance"));
    }
    let len = trajs.iter().map(|t| t.samples.len()).min().unwrap_or(0);
    let dt = trajs[0].sample_interval;
    let bin = ((bin_s / dt).round() as usize).max(1);
    let n = trajs.len() as f64;
    let var = |f: &dyn Fn(&SimState) -> f64, i: usize| {
        let mean = trajs.iter().map(|t| f(&t.samples[i])).sum::<f64>() / n;
        trajs.iter().map(|t| (f(&t.samples[i]) - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    let (mut times, mut energies) = (Vec::new(), Vec::new());
    for b in 0..len / bin {
        let acc: f64 = (b * bin..(b + 1) * bin)
            .map(|i| var(&|s| s.velocity[0], i) + omega * omega * var(&|s| s.position[0], i))
            .sum();
        times.push(trajs[0].samples[b * bin].time + 0.5 * bin as f64 * dt);
        energies.push(0.5 * mass * acc / bin as f64 / BOLTZMANN);
    }
    Ok((times, energies))
}

pub fn simulate(config: &ExperimentConfig) -> Result<Trajectory> {
    Simulator::new(config)?.run(0)
}

pub fn simulate_ensemble(config: &ExperimentConfig, count: u64) -> Result<Vec<Trajectory>> {
    Simulator::new(config)?.run_ensemble(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{CavityDrive, CavitySpec, Detuning, GasSpec, SphereSpec};
    use std::f64::consts::PI;

    const WM: f64 = 2.0 * PI * 10e3;

    fn params(drive: CavityDrive, pressure: f64, paul: &PaulTrapSpec) -> DerivedParams {
        let cavity = CavitySpec::reference_cavity()
            .with_drive(drive)
            .with_detuning(Detuning::Effective(2.0 * PI * 100e3));
        DerivedParams::from_specs(&SphereSpec::silica_209nm(), &cavity, paul, &GasSpec::nitrogen(pressure))
            .unwrap()
    }

    fn weak_trap() -> PaulTrapSpec {
        PaulTrapSpec {
            voltage_v: 1e-12,
            ..PaulTrapSpec::reference_trap()
        }
    }

    fn integrator(dt: f64, duration: f64, mode: CavityMode) -> IntegratorConfig {
        IntegratorConfig {
            dt_s: dt,
            duration_s: duration,
            record_stride: 1,
            scheme: Scheme::StochasticHeun,
            cavity_mode: mode,
        }
    }

    fn sim(
        p: DerivedParams,
        paul: PaulTrapSpec,
        well: u32,
        noise: NoiseConfig,
        integ: IntegratorConfig,
        offset: [f64; 3],
    ) -> Simulator {
        let initial = InitialConditions {
            temperature_k: Some(0.0),
            offset_m: offset,
            ..Default::default()
        };
        Simulator::from_parts(p, paul, well, noise, integ, initial, String::new()).unwrap()
    }

    /// Mean frequency from upward zero crossings (linear interpolation).
    fn crossing_frequency(series: &[f64], dt: f64) -> f64 {
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        let mut times = Vec::new();
        for i in 1..series.len() {
            let (a, b) = (series[i - 1] - mean, series[i] - mean);
            if a < 0.0 && b >= 0.0 {
                times.push((i - 1) as f64 * dt + dt * a / (a - b));
            }
        }
        let n = times.len();
        2.0 * PI * (n - 1) as f64 / (times[n - 1] - times[0])
    }

    #[test]
    fn antinode_is_a_fixed_point_without_noise() {
        let paul = PaulTrapSpec::reference_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let alpha = p.alpha_bar();
        let s = sim(p, paul, 0, NoiseConfig::off(), integrator(2.5e-7, 1e-3, CavityMode::Resolved), [0.0; 3]);
        let traj = s.run(0).unwrap();
        let last = traj.samples.last().unwrap();
        assert!(last.position.iter().all(|x| x.abs() < 1e-20), "{:?}", last.position);
        assert!((last.field - alpha).norm() < 1e-9 * alpha.norm());
    }

    #[test]
    fn optical_oscillation_at_omega_m() {
        let paul = weak_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let s = sim(p, paul, 0, NoiseConfig::off(), integrator(2.5e-7, 2e-3, CavityMode::Adiabatic), [1e-9, 0.0, 0.0]);
        let traj = s.run(0).unwrap();
        let w = crossing_frequency(&traj.axis(0), traj.sample_interval);
        assert!((w / WM - 1.0).abs() < 0.01, "{w} vs {WM}");
    }

    #[test]
    fn paul_only_secular_frequency() {
        let paul = PaulTrapSpec::reference_trap();
        let p = params(CavityDrive::PumpRate(0.0), 0.0, &paul);
        let expected = linear::secular_frequency(&p, &paul, 0.0);
        let mut integ = integrator(1e-5, 0.5, CavityMode::Frozen);
        integ.record_stride = 4;
        let s = sim(p, paul, 0, NoiseConfig::off(), integ, [0.0, 1e-7, 1e-7]);
        let traj = s.run(0).unwrap();
        let wy = crossing_frequency(&traj.axis(1), traj.sample_interval);
        let wz = crossing_frequency(&traj.axis(2), traj.sample_interval);
        assert!((wy / expected - 1.0).abs() < 0.02, "{wy} vs {expected}");
        assert!((wz / (2.0 * expected) - 1.0).abs() < 0.02, "{wz} vs {}", 2.0 * expected);
    }

    #[test]
    fn adiabatic_tracks_resolved_cavity_at_central_well() {
        let paul = weak_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let run = |mode| {
            sim(p.clone(), paul.clone(), 0, NoiseConfig::off(), integrator(2.5e-7, 1e-3, mode), [1e-9, 0.0, 0.0])
                .run(0)
                .unwrap()
                .axis(0)
        };
        let (a, r) = (run(CavityMode::Adiabatic), run(CavityMode::Resolved));
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let diff: Vec<f64> = a.iter().zip(&r).map(|(x, y)| x - y).collect();
        assert!(rms(&diff) < 0.02 * rms(&r), "{} vs {}", rms(&diff), rms(&r));
    }

    #[test]
    fn energy_drift_follows_heun_error_and_vanishes_with_dt() {
        let paul = weak_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let drift = |dt: f64| {
            let periods = 20.0;
            let s = sim(
                p.clone(),
                paul.clone(),
                0,
                NoiseConfig::off(),
                integrator(dt, periods * 2.0 * PI / WM, CavityMode::Frozen),
                [1e-9, 0.0, 0.0],
            );
            let traj = s.run(0).unwrap();
            let e = |st: &SimState| frozen_field_energy(st, &p) + HBAR * p.coupling_a_rad_s * p.photon_n;
            let e0 = e(&traj.samples[0]);
            let e1 = e(traj.samples.last().unwrap());
            (e1 - e0) / e0
        };
        // Heun on a harmonic oscillator gains (ωh)⁴/4 per step.
        let dt = 2e-6;
        let steps = (20.0 * 2.0 * PI / WM / dt).round();
        let theory = (1.0 + (WM * dt).powi(4) / 4.0).powf(steps) - 1.0;
        let measured = drift(dt);
        assert!((measured / theory - 1.0).abs() < 0.1, "{measured} vs {theory}");
        let fine = drift(dt / 64.0);
        assert!(fine.abs() < 1e-6, "{fine}");
    }

    #[test]
    fn thermal_kicks_have_the_fluctuation_dissipation_variance() {
        let paul = weak_trap();
        let p = params(CavityDrive::PumpRate(0.0), 100.0, &paul);
        let dt = 1e-6;
        let sigma = thermal_kick_sigma(p.gamma_m, 300.0, p.mass_kg, dt);
        let noise = NoiseConfig {
            seed: 11,
            ..NoiseConfig::default()
        };
        let s = sim(p, paul, 0, noise, integrator(dt, 1e-3, CavityMode::Frozen), [0.0; 3]);
        let mut rng = s.rng_for_member(0);
        let s0 = SimState {
            position: [0.0; 3],
            velocity: [0.0; 3],
            field: Complex64::new(0.0, 0.0),
            time: 0.0,
        };
        let n = 20_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let next = s.step(&s0, &mut rng);
            sum_sq += next.velocity.iter().map(|v| v * v).sum::<f64>();
        }
        let var = sum_sq / (3 * n) as f64;
        // 3n samples: relative standard error √(2/3n) ≈ 0.6%.
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.03, "{var} vs {}", sigma * sigma);
    }

    #[test]
    fn ensemble_is_identical_for_any_worker_count() {
        let paul = PaulTrapSpec::reference_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 3e-2, &paul);
        let noise = NoiseConfig {
            shot_noise: true,
            seed: 5,
            ..NoiseConfig::default()
        };
        let s = sim(p, paul, 3, noise, integrator(2.5e-7, 2e-4, CavityMode::Resolved), [0.0; 3]);
        let run_with = |workers| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap()
                .install(|| s.run_ensemble(6).unwrap())
        };
        let one = run_with(1);
        let four = run_with(4);
        assert_eq!(one, four);
        assert_ne!(one[0].samples, one[1].samples);
    }

    #[test]
    fn divergence_is_reported() {
        let paul = PaulTrapSpec::reference_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let mut s = sim(p, paul, 0, NoiseConfig::off(), integrator(2.5e-7, 1e-4, CavityMode::Frozen), [0.0; 3]);
        s.initial.velocity_m_s = [f64::INFINITY, 0.0, 0.0];
        assert!(matches!(s.run(0), Err(Error::IntegrationDiverged { step: 1 })));
    }

    #[test]
    fn dt_above_bound_is_rejected() {
        let paul = PaulTrapSpec::reference_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let integ = integrator(1e-6, 1e-3, CavityMode::Resolved);
        let res = Simulator::from_parts(p, paul, 0, NoiseConfig::off(), integ, InitialConditions::default(), String::new());
        assert!(matches!(res, Err(Error::InvalidInput { .. })));
    }

    #[test]
    fn force_field_matches_potential_gradient() {
        let paul = weak_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 0.0, &paul);
        let k = p.wavenumber_k;
        let pos = [1e-4 / k, 3e-6, -2e-6];
        let state = SimState {
            position: pos,
            velocity: [0.0; 3],
            field: Complex64::new(p.photon_n.sqrt(), 0.0),
            time: 0.0,
        };
        let acc = force_field(&state, &p, paul.drive_freq_rad_s, 0.0);
        for axis in 0..3 {
            let h = if axis == 0 { 1e-12 } else { 1e-9 };
            let mut plus = state;
            let mut minus = state;
            plus.position[axis] += h;
            minus.position[axis] -= h;
            let grad = (frozen_field_energy(&plus, &p) - frozen_field_energy(&minus, &p)) / (2.0 * h);
            let expect = -grad / p.mass_kg;
            assert!((acc[axis] - expect).abs() < 1e-5 * expect.abs(), "axis {axis}: {} vs {expect}", acc[axis]);
        }
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let paul = PaulTrapSpec::reference_trap();
        let p = params(CavityDrive::MechanicalFrequency(WM), 3e-2, &paul);
        let s = sim(p, paul, 2, NoiseConfig::default(), integrator(2.5e-7, 5e-6, CavityMode::Resolved), [0.0; 3]);
        let traj = s.run(0).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples, traj.samples);
        let mut bin = Vec::new();
        traj.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), traj.samples.len() * 72);
    }
}
