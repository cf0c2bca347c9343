//! Inversion of the closed forms: photon number from `ω_M`, charge from `ω_s`,
//! and the optical cooling rate from spectrogram decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constants::{ELEMENTARY_CHARGE, HBAR};
use crate::error::{Error, Result};
use crate::params::{non_negative, DerivedParams, PaulTrapSpec};
use crate::spectral::{
    fit_exponential, sideband_decay_rate, track_feature, DecayFit, ExpectedLines, FeatureTrack, PeakKind,
    Spectrogram,
};

/// z-score of the reported two-sided intervals.
const INTERVAL_Z: f64 = 1.959_963_984_540_054;
pub const INTERVAL_CONFIDENCE: f64 = 0.95;
/// Inconsistency threshold in units of the propagated discriminant uncertainty.
const DISCRIMINANT_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyObservation {
    pub omega_m_rad_s: f64,
    pub omega_s_rad_s: f64,
    #[serde(default)]
    pub omega_m_sigma: f64,
    #[serde(default)]
    pub omega_s_sigma: f64,
}

impl FrequencyObservation {
    pub fn validate(&self) -> Result<()> {
        non_negative("omega_m_rad_s", self.omega_m_rad_s)?;
        non_negative("omega_s_rad_s", self.omega_s_rad_s)?;
        non_negative("omega_m_sigma", self.omega_m_sigma)?;
        non_negative("omega_s_sigma", self.omega_s_sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub photon_n: f64,
    pub photon_n_interval: [f64; 2],
    pub charge_coulomb: f64,
    /// Continuous estimate in units of e.
    pub charge_e: f64,
    pub charge_count: u32,
    pub charge_interval_e: [f64; 2],
    /// `charge_e − charge_count`.
    pub residual: f64,
    pub discriminant: f64,
    pub discriminant_sigma: f64,
    pub confidence: f64,
    pub branch_flags: Vec<String>,
}

/// `n = m ω_M² / (2ħk²A)`, taking `cos(2kx₀) = 1`.
pub fn infer_photon_number(omega_m: f64, params: &DerivedParams) -> Result<f64> {
    non_negative("omega_m_rad_s", omega_m)?;
    let k = params.wavenumber_k;
    Ok(params.mass_kg * omega_m * omega_m / (2.0 * HBAR * k * k * params.coupling_a_rad_s))
}

/// `ω_M` at the well centre for photon number `n`; inverse of [`infer_photon_number`].
pub fn omega_m_for_photon_number(photon_n: f64, params: &DerivedParams) -> f64 {
    let k = params.wavenumber_k;
    (2.0 * HBAR * k * k * params.coupling_a_rad_s * photon_n / params.mass_kg).sqrt()
}

/// Secular frequency for an explicit charge, in coulombs.
pub fn secular_frequency_for_charge(params: &DerivedParams, paul: &PaulTrapSpec, photon_n: f64, charge_c: f64) -> f64 {
    let wd = paul.drive_freq_rad_s;
    let m = params.mass_kg;
    let optical = 16.0 * HBAR * params.coupling_a_rad_s * photon_n / (m * params.waist_m.powi(2) * wd * wd);
    let paul_term = 8.0 * (charge_c * paul.voltage_v).powi(2) / (m * wd * wd * paul.scale_m.powi(2)).powi(2);
    0.5 * wd * (optical + paul_term).sqrt()
}

/// Inverts the secular-frequency formula for the charge, with `n` taken from `ω_M`.
pub fn infer_charge(obs: &FrequencyObservation, params: &DerivedParams, paul: &PaulTrapSpec) -> Result<InferenceResult> {
    obs.validate()?;
    paul.validate()?;
    let wd = paul.drive_freq_rad_s;
    let m = params.mass_kg;
    let k = params.wavenumber_k;
    let w = params.waist_m;
    let n = infer_photon_number(obs.omega_m_rad_s, params)?;
    let sigma_n = 2.0 * n * obs.omega_m_sigma / obs.omega_m_rad_s.max(f64::MIN_POSITIVE);

    let observed = (2.0 * obs.omega_s_rad_s / wd).powi(2);
    let optical = 16.0 * HBAR * params.coupling_a_rad_s * n / (m * w * w * wd * wd);
    let d = observed - optical;
    let dd_ds = 8.0 * obs.omega_s_rad_s / (wd * wd);
    let dd_dm = 16.0 * obs.omega_m_rad_s / (k * k * w * w * wd * wd);
    let sigma_d = ((dd_ds * obs.omega_s_sigma).powi(2) + (dd_dm * obs.omega_m_sigma).powi(2)).sqrt();
    // Rounding floor so exact Q = 0 inputs never trip the check.
    let tolerance = DISCRIMINANT_SIGMAS * sigma_d + 1e-12 * observed.max(optical);

    let mut flags = Vec::new();
    if d < -tolerance {
        return Err(Error::InconsistentObservation {
            discriminant: d,
            tolerance,
        });
    }
    if d < 0.0 {
        flags.push("discriminant_clamped".to_owned());
    }
    if optical > d.max(0.0) {
        flags.push("optical_dominated".to_owned());
    }
    let scale = m * wd * wd * paul.scale_m * paul.scale_m / (8.0f64.sqrt() * paul.voltage_v);
    let to_e = |disc: f64| scale * disc.max(0.0).sqrt() / ELEMENTARY_CHARGE;
    let charge_e = to_e(d);
    let charge_count = charge_e.round() as u32;
    let residual = charge_e - f64::from(charge_count);
    if residual.abs() > 0.25 {
        flags.push("non_integer_charge".to_owned());
    }
    Ok(InferenceResult {
        photon_n: n,
        photon_n_interval: [
            (n - INTERVAL_Z * sigma_n).max(0.0),
            n + INTERVAL_Z * sigma_n,
        ],
        charge_coulomb: charge_e * ELEMENTARY_CHARGE,
        charge_e,
        charge_count,
        charge_interval_e: [to_e(d - INTERVAL_Z * sigma_d), to_e(d + INTERVAL_Z * sigma_d)],
        residual,
        discriminant: d,
        discriminant_sigma: sigma_d,
        confidence: INTERVAL_CONFIDENCE,
        branch_flags: flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFit {
    pub kind: PeakKind,
    pub center_hz: f64,
    /// Power decay rate divided by the feature's order in the energy.
    pub energy_rate: Option<f64>,
    pub energy_rate_stderr: Option<f64>,
    pub fit: Option<DecayFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingFit {
    pub gamma_opt: f64,
    pub gamma_opt_stderr: f64,
    pub per_feature: Vec<FeatureFit>,
}

/// Energy decay rate from spectrogram features. Power in linear-family lines
/// tracks the energy; the `2ω_M` families track its square.
pub fn fit_cooling_rate(gram: &Spectrogram, lines: &ExpectedLines, snr: f64) -> Result<CoolingFit> {
    let (o, m) = (lines.omega_het / (2.0 * PI), lines.omega_m / (2.0 * PI));
    let half = 3.0 * lines.omega_d / (2.0 * PI);
    let features = [
        (PeakKind::LinearSideband, o - m, 1.0),
        (PeakKind::LinearSideband, o + m, 1.0),
        (PeakKind::Direct1f, m, 1.0),
        (PeakKind::QuadraticSideband, o - 2.0 * m, 2.0),
        (PeakKind::QuadraticSideband, o + 2.0 * m, 2.0),
        (PeakKind::Direct2f, 2.0 * m, 2.0),
    ];
    let top = gram
        .windows
        .first()
        .and_then(|(_, s)| s.frequencies.last().copied())
        .unwrap_or(0.0);
    let mut per_feature = Vec::new();
    let (mut wsum, mut wrate) = (0.0, 0.0);
    let mut best_detections = 0;
    for (kind, center, order) in features {
        if center - half <= 0.0 || center + half >= top {
            continue;
        }
        match sideband_decay_rate(gram, center, half, snr) {
            Ok(fit) => {
                let rate = fit.rate / order;
                let stderr = fit.rate_stderr / order;
                if order == 1.0 {
                    let weight = 1.0 / (stderr * stderr).max(1e-30);
                    wsum += weight;
                    wrate += weight * rate;
                }
                per_feature.push(FeatureFit {
                    kind,
                    center_hz: center,
                    energy_rate: Some(rate),
                    energy_rate_stderr: Some(stderr),
                    fit: Some(fit),
                    error: None,
                });
            }
            Err(e) => {
                if let Error::InsufficientData { detections, .. } = e {
                    if order == 1.0 {
                        best_detections = best_detections.max(detections);
                    }
                }
                per_feature.push(FeatureFit {
                    kind,
                    center_hz: center,
                    energy_rate: None,
                    energy_rate_stderr: None,
                    fit: None,
                    error: Some(e.to_string()),
                })
            }
        }
    }
    if wsum == 0.0 {
        return Err(Error::InsufficientData {
            detections: best_detections,
            required: crate::spectral::MIN_DETECTIONS,
        });
    }
    Ok(CoolingFit {
        gamma_opt: wrate / wsum,
        gamma_opt_stderr: wsum.sqrt().recip(),
        per_feature,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialDecay {
    /// Power decay of the `Ω ± ω_M` pair.
    pub linear: DecayFit,
    /// Power decay of the `Ω ± 2ω_M` pair.
    pub quadratic: DecayFit,
    pub ratio: f64,
    pub ratio_stderr: f64,
    /// Windows where both families are detected; both fits use exactly these.
    pub common_windows: usize,
    pub linear_last_detection_s: Option<f64>,
    pub quadratic_last_detection_s: Option<f64>,
}

fn sideband_pair(gram: &Spectrogram, a_hz: f64, b_hz: f64, half: f64, snr: f64) -> FeatureTrack {
    let a = track_feature(gram, a_hz, half, snr);
    let b = track_feature(gram, b_hz, half, snr);
    FeatureTrack {
        times: a.times,
        power: a.power.iter().zip(&b.power).map(|(x, y)| x + y).collect(),
        detected: a.detected.iter().zip(&b.detected).map(|(x, y)| *x || *y).collect(),
    }
}

fn last_detection(track: &FeatureTrack) -> Option<f64> {
    track
        .times
        .iter()
        .zip(&track.detected)
        .filter(|(_, d)| **d)
        .map(|(t, _)| *t)
        .last()
}

/// Decay rates of the linear and quadratic sideband pairs over the windows
/// where both are visible, and their ratio (2 for a thermal state).
pub fn differential_decay(gram: &Spectrogram, lines: &ExpectedLines, snr: f64) -> Result<DifferentialDecay> {
    let (o, m) = (lines.omega_het / (2.0 * PI), lines.omega_m / (2.0 * PI));
    let half = (3.0 * lines.omega_d / (2.0 * PI)).min(0.45 * m);
    let lin = sideband_pair(gram, o - m, o + m, half, snr);
    let quad = sideband_pair(gram, o - 2.0 * m, o + 2.0 * m, half, snr);
    let mut t = Vec::new();
    let (mut p1, mut p2) = (Vec::new(), Vec::new());
    for i in 0..lin.times.len() {
        if lin.detected[i] && quad.detected[i] {
            t.push(lin.times[i]);
            p1.push(lin.power[i]);
            p2.push(quad.power[i]);
        }
    }
    let linear = fit_exponential(&t, &p1)?;
    let quadratic = fit_exponential(&t, &p2)?;
    let ratio = quadratic.rate / linear.rate;
    let ratio_stderr = ratio.abs()
        * ((quadratic.rate_stderr / quadratic.rate).powi(2) + (linear.rate_stderr / linear.rate).powi(2)).sqrt();
    Ok(DifferentialDecay {
        linear,
        quadratic,
        ratio,
        ratio_stderr,
        common_windows: t.len(),
        linear_last_detection_s: last_detection(&lin),
        quadratic_last_detection_s: last_detection(&quad),
    })
}
