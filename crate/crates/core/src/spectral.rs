//! Heterodyne detector synthesis, Welch spectra, spectrograms, peak finding,
//! decay fits and temperature estimates.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::DetectionConfig;
use crate::constants::BOLTZMANN;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::linear::phonon_occupancy;
use crate::params::DerivedParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesOrigin {
    Detector,
    PositionX,
    PositionY,
    PositionZ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub origin: SeriesOrigin,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, sample_rate: f64, origin: SeriesOrigin) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::invalid("sample_rate", format!("must be > 0, got {sample_rate}")));
        }
        if samples.len() < 2 {
            return Err(Error::invalid("samples", "need at least two samples"));
        }
        Ok(TimeSeries {
            samples,
            sample_rate,
            origin,
        })
    }

    /// One position axis of a trajectory.
    pub fn from_trajectory(traj: &Trajectory, axis: usize) -> Result<Self> {
        let origin = match axis {
            0 => SeriesOrigin::PositionX,
            1 => SeriesOrigin::PositionY,
            2 => SeriesOrigin::PositionZ,
            _ => return Err(Error::invalid("axis", format!("must be 0, 1 or 2, got {axis}"))),
        };
        Self::new(traj.axis(axis), traj.sample_rate(), origin)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn mean_square(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    /// Samples `[start, start + len)` as a new series.
    pub fn slice(&self, start: usize, len: usize) -> TimeSeries {
        TimeSeries {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
            origin: self.origin,
        }
    }
}

/// Detector settings for [`synth_heterodyne`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heterodyne {
    pub omega_het_rad_s: f64,
    /// Real lock-beam amplitude, in cavity-field units.
    pub lock_amplitude: f64,
    pub sample_rate_hz: f64,
    /// Highest mechanical frequency expected in the field, rad/s.
    pub omega_m_rad_s: f64,
}

impl Heterodyne {
    pub fn from_config(det: &DetectionConfig, params: &DerivedParams, traj: &Trajectory) -> Self {
        Heterodyne {
            omega_het_rad_s: det.omega_het_rad_s,
            lock_amplitude: det.lock_ratio * params.alpha_bar().norm(),
            sample_rate_hz: det.sample_rate_hz.unwrap_or_else(|| traj.sample_rate()),
            omega_m_rad_s: params.omega_m_center(),
        }
    }
}

/// RNG stream offset keeping detector noise independent of the dynamics streams.
const DETECTOR_STREAM: u64 = 1 << 40;

/// Detector record for one ensemble member: heterodyne signal plus white noise
/// of `noise_level·|ᾱ|²`, drawn from its own seeded stream.
pub fn detector_record(
    traj: &Trajectory,
    det: &DetectionConfig,
    params: &DerivedParams,
    seed: u64,
    member: u64,
) -> Result<TimeSeries> {
    let mut series = synth_heterodyne(traj, &Heterodyne::from_config(det, params, traj))?;
    let sigma = det.noise_level * params.alpha_bar().norm_sqr();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DETECTOR_STREAM + member);
    add_white_noise(&mut series, sigma, &mut rng);
    Ok(series)
}

/// `s(t) = |a_lock e^{iΩt} + a(t)|²`, with `a(t)` linearly resampled.
pub fn synth_heterodyne(traj: &Trajectory, det: &Heterodyne) -> Result<TimeSeries> {
    let max_content_hz = (det.omega_het_rad_s + 2.0 * det.omega_m_rad_s) / (2.0 * PI);
    if det.sample_rate_hz <= 2.0 * max_content_hz {
        return Err(Error::Aliasing {
            sample_rate_hz: det.sample_rate_hz,
            max_content_hz,
        });
    }
    if traj.samples.len() < 2 {
        return Err(Error::invalid("trajectory", "need at least two samples"));
    }
    let t0 = traj.samples[0].time;
    let span = traj.samples[traj.samples.len() - 1].time - t0;
    let count = (span * det.sample_rate_hz).floor() as usize + 1;
    let field = traj.field();
    let dt_src = traj.sample_interval;
    let samples = (0..count)
        .map(|j| {
            let t = j as f64 / det.sample_rate_hz;
            let pos = t / dt_src;
            let i = (pos.floor() as usize).min(field.len() - 2);
            let frac = pos - i as f64;
            let a = field[i] * (1.0 - frac) + field[i + 1] * frac;
            let lock = Complex64::from_polar(det.lock_amplitude, det.omega_het_rad_s * (t0 + t));
            (lock + a).norm_sqr()
        })
        .collect();
    TimeSeries::new(samples, det.sample_rate_hz, SeriesOrigin::Detector)
}

/// Adds zero-mean white Gaussian noise of standard deviation `sigma`.
pub fn add_white_noise<R: Rng>(series: &mut TimeSeries, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    for s in &mut series.samples {
        let xi: f64 = rng.sample(StandardNormal);
        *s += sigma * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            // Periodic Hann: exact for 50% overlap.
            Window::Hann => (0..len)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
    pub resolution: f64,
    pub window: String,
    pub segment_count: usize,
}

impl PowerSpectrum {
    /// `∫ psd df` by the rectangle rule on the bin grid.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.resolution
    }

    /// Index of the bin nearest `freq_hz`.
    pub fn bin_of(&self, freq_hz: f64) -> usize {
        ((freq_hz / self.resolution).round().max(0.0) as usize).min(self.psd.len() - 1)
    }

    /// Median PSD, used as the noise floor.
    pub fn noise_floor(&self) -> f64 {
        let mut v = self.psd.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    /// Power in `[lo_hz, hi_hz]`.
    pub fn band_power(&self, lo_hz: f64, hi_hz: f64) -> f64 {
        let (a, b) = (self.bin_of(lo_hz), self.bin_of(hi_hz));
        self.psd[a..=b].iter().sum::<f64>() * self.resolution
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "freq_hz,psd")?;
        for (f, p) in self.frequencies.iter().zip(&self.psd) {
            writeln!(out, "{f:e},{p:e}")?;
        }
        Ok(())
    }

    /// Bin-wise mean of spectra sharing one frequency grid.
    pub fn mean(spectra: &[PowerSpectrum]) -> Result<PowerSpectrum> {
        let first = spectra
            .first()
            .ok_or(Error::InsufficientData { detections: 0, required: 1 })?;
        let mut out = first.clone();
        for s in &spectra[1..] {
            if s.frequencies != first.frequencies {
                return Err(Error::invalid("spectra", "frequency grids differ"));
            }
            for (a, b) in out.psd.iter_mut().zip(&s.psd) {
                *a += b;
            }
            out.segment_count += s.segment_count;
        }
        let n = spectra.len() as f64;
        out.psd.iter_mut().for_each(|p| *p /= n);
        Ok(out)
    }

    /// Parse the output of [`PowerSpectrum::write_csv`]. Window and segment
    /// count are not stored and come back as `"unknown"` and 0.
    pub fn read_csv<R: std::io::BufRead>(input: R) -> Result<Self> {
        let (mut frequencies, mut psd) = (Vec::new(), Vec::new());
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(e.to_string()))?;
            if i == 0 {
                if line.trim() != "freq_hz,psd" {
                    return Err(Error::Config(format!("unexpected spectrum header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(f, p)| Some((f.trim().parse::<f64>().ok()?, p.trim().parse::<f64>().ok()?)));
            let (f, p) = parsed.ok_or_else(|| Error::Config(format!("line {}: expected `freq,psd`", i + 1)))?;
            frequencies.push(f);
            psd.push(p);
        }
        if frequencies.len() < 2 {
            return Err(Error::Config("spectrum needs at least two bins".into()));
        }
        let resolution = frequencies[1] - frequencies[0];
        Ok(PowerSpectrum {
            frequencies,
            psd,
            resolution,
            window: "unknown".into(),
            segment_count: 0,
        })
    }
}

/// Segment length giving a resolution no coarser than `resolution_hz`, or the
/// whole series if it is shorter.
pub fn segment_length_for(series: &TimeSeries, resolution_hz: f64) -> usize {
    ((series.sample_rate / resolution_hz).ceil() as usize)
        .min(series.samples.len())
        .max(2)
}

/// One-sided Welch estimate normalised so that `∫ psd df` equals the mean square.
pub fn welch_psd(
    series: &TimeSeries,
    segment_length: usize,
    overlap_fraction: f64,
    window: Window,
) -> Result<PowerSpectrum> {
    let n = series.samples.len();
    if segment_length < 2 || segment_length > n {
        return Err(Error::InvalidSegmentation(format!(
            "segment length {segment_length} outside [2, {n}]"
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::InvalidSegmentation(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    let step = ((segment_length as f64) * (1.0 - overlap_fraction)).round().max(1.0) as usize;
    let segments = (n - segment_length) / step + 1;
    let w = window.coefficients(segment_length);
    let w_power: f64 = w.iter().map(|x| x * x).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment_length);
    let bins = segment_length / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); segment_length];
    for s in 0..segments {
        let start = s * step;
        for (b, (x, wi)) in buf
            .iter_mut()
            .zip(series.samples[start..start + segment_length].iter().zip(&w))
        {
            *b = Complex64::new(x * wi, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let fs = series.sample_rate;
    let scale = 1.0 / (fs * w_power * segments as f64);
    let psd = acc
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let one_sided = if k == 0 || (segment_length % 2 == 0 && k == bins - 1) {
                1.0
            } else {
                2.0
            };
            p * scale * one_sided
        })
        .collect();
    let resolution = fs / segment_length as f64;
    Ok(PowerSpectrum {
        frequencies: (0..bins).map(|k| k as f64 * resolution).collect(),
        psd,
        resolution,
        window: window.name().to_owned(),
        segment_count: segments,
    })
}

/// Time-domain side of the Welch Parseval identity: the window-weighted mean
/// square averaged over the same segments `welch_psd` uses.
pub fn windowed_mean_square(series: &TimeSeries, segment_length: usize, overlap_fraction: f64, window: Window) -> f64 {
    let n = series.samples.len();
    let step = ((segment_length as f64) * (1.0 - overlap_fraction)).round().max(1.0) as usize;
    let segments = (n - segment_length) / step + 1;
    let w = window.coefficients(segment_length);
    let w_power: f64 = w.iter().map(|x| x * x).sum();
    let total: f64 = (0..segments)
        .map(|s| {
            series.samples[s * step..s * step + segment_length]
                .iter()
                .zip(&w)
                .map(|(x, wi)| (x * wi).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / (w_power * segments as f64)
}

/// Hann window, 50% overlap, resolution at most `resolution_hz`.
pub fn welch_default(series: &TimeSeries, resolution_hz: f64) -> Result<PowerSpectrum> {
    welch_psd(series, segment_length_for(series, resolution_hz), 0.5, Window::Hann)
}

pub const DEFAULT_WINDOW_S: f64 = 2.4e-3;
pub const DEFAULT_SPACING_S: f64 = 0.2e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub window_duration: f64,
    pub window_spacing: f64,
    pub windows: Vec<(f64, PowerSpectrum)>,
}

impl Spectrogram {
    /// Window-by-window mean of spectrograms on a common grid.
    pub fn mean(grams: &[Spectrogram]) -> Result<Spectrogram> {
        let first = grams
            .first()
            .ok_or_else(|| Error::InvalidSegmentation("no spectrograms to average".into()))?;
        let mut out = first.clone();
        for g in &grams[1..] {
            let same = g.windows.len() == out.windows.len()
                && g.windows.iter().zip(&out.windows).all(|(a, b)| {
                    a.0 == b.0 && a.1.frequencies.len() == b.1.frequencies.len()
                });
            if !same {
                return Err(Error::InvalidSegmentation(
                    "spectrograms differ in window layout".into(),
                ));
            }
            for ((_, acc), (_, s)) in out.windows.iter_mut().zip(&g.windows) {
                for (a, p) in acc.psd.iter_mut().zip(&s.psd) {
                    *a += p;
                }
            }
        }
        let n = grams.len() as f64;
        for (_, s) in &mut out.windows {
            s.psd.iter_mut().for_each(|p| *p /= n);
            s.segment_count *= grams.len();
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "window_start_s,freq_hz,psd")?;
        for (t, spec) in &self.windows {
            for (f, p) in spec.frequencies.iter().zip(&spec.psd) {
                writeln!(out, "{t:e},{f:e},{p:e}")?;
            }
        }
        Ok(())
    }
}

/// Hann periodogram of each window; windows start every `spacing` seconds.
pub fn spectrogram(series: &TimeSeries, window_duration: f64, window_spacing: f64) -> Result<Spectrogram> {
    if !(window_spacing > 0.0) || !(window_duration > 0.0) {
        return Err(Error::InvalidSegmentation(
            "window duration and spacing must be > 0".into(),
        ));
    }
    let fs = series.sample_rate;
    let len = (window_duration * fs).round() as usize;
    let hop = (window_spacing * fs).round() as usize;
    if len < 2 || len > series.samples.len() {
        return Err(Error::InvalidSegmentation(format!(
            "window of {len} samples does not fit a series of {}",
            series.samples.len()
        )));
    }
    let hop = hop.max(1);
    let count = (series.samples.len() - len) / hop + 1;
    let windows = (0..count)
        .into_par_iter()
        .map(|j| {
            let start = j * hop;
            let spec = welch_psd(&series.slice(start, len), len, 0.0, Window::Hann)?;
            Ok((start as f64 / fs, spec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Spectrogram {
        window_duration: len as f64 / fs,
        window_spacing: hop as f64 / fs,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakKind {
    Beat,
    LinearSideband,
    QuadraticSideband,
    Direct1f,
    Direct2f,
    DriveSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRecord {
    pub kind: PeakKind,
    pub center: f64,
    /// Power above the noise floor, integrated over the search window.
    pub amplitude: f64,
    pub width: f64,
    /// Nominal family center the search started from.
    pub expected: f64,
    /// Family center shifted by the nearest whole number of drive periods.
    pub predicted: f64,
    /// Family a drive-split satellite belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<PeakKind>,
    pub peak_psd: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PeakSet {
    pub records: Vec<PeakRecord>,
    pub noise_floor: f64,
}

impl PeakSet {
    pub fn of_kind(&self, kind: PeakKind) -> impl Iterator<Item = &PeakRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Summed amplitude of one family.
    pub fn family_amplitude(&self, kind: PeakKind) -> f64 {
        self.of_kind(kind).map(|r| r.amplitude).sum()
    }

    /// Starting point for [`estimate_omega_m`]: the predicted `ω_M` when the
    /// linear family dominates, otherwise the strongest direct line. Broad
    /// thermal lines at low wells can sit more than `ω_d/2` from prediction.
    pub fn omega_m_prior(&self, lines: &ExpectedLines) -> f64 {
        let linear = self.family_amplitude(PeakKind::LinearSideband);
        let quadratic = self.family_amplitude(PeakKind::QuadraticSideband);
        if quadratic > linear {
            self.direct_line_omega().unwrap_or(lines.omega_m)
        } else {
            lines.omega_m
        }
    }

    /// `ω_M` (rad/s) implied by the strongest direct line, halving a 2f line.
    pub fn direct_line_omega(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| matches!(r.kind, PeakKind::Direct1f | PeakKind::Direct2f))
            .max_by(|a, b| a.peak_psd.total_cmp(&b.peak_psd))
            .map(|r| {
                let f = if r.kind == PeakKind::Direct2f { 0.5 * r.center } else { r.center };
                2.0 * PI * f
            })
    }
}

/// Nominal line positions, rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLines {
    pub omega_het: f64,
    pub omega_m: f64,
    pub omega_d: f64,
}

impl ExpectedLines {
    /// Lines for a configured experiment, with the mechanical frequency taken
    /// from the drive Floquet analysis of the configured well.
    pub fn for_config(config: &crate::config::ExperimentConfig) -> Result<Self> {
        let params = config.derive()?;
        Ok(ExpectedLines {
            omega_het: config.detection.omega_het_rad_s,
            omega_m: crate::linear::drive_floquet_omega(&params, &config.paul, config.well_index)?,
            omega_d: config.paul.drive_freq_rad_s,
        })
    }
}

/// Detection settings for [`find_sidebands`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakSearch {
    /// Search half-width in units of the drive frequency.
    pub window_drive_periods: f64,
    /// Minimum peak PSD over the noise floor.
    pub snr: f64,
    /// Minimum peak PSD relative to the strongest bin above the drive frequency.
    pub dynamic_range: f64,
}

impl Default for PeakSearch {
    fn default() -> Self {
        PeakSearch {
            window_drive_periods: 3.0,
            snr: 10.0,
            dynamic_range: 1e-10,
        }
    }
}

fn argmax(psd: &[f64], lo: usize, hi: usize) -> usize {
    (lo..=hi).max_by(|a, b| psd[*a].total_cmp(&psd[*b])).unwrap_or(lo)
}

/// Full width at half maximum around bin `i`, interpolated.
fn half_width(spec: &PowerSpectrum, i: usize, lo: usize, hi: usize) -> f64 {
    let half = 0.5 * spec.psd[i];
    let mut left = i as f64;
    let mut j = i;
    while j > lo && spec.psd[j - 1] > half {
        j -= 1;
    }
    if j > lo {
        let (a, b) = (spec.psd[j - 1], spec.psd[j]);
        left = j as f64 - (b - half) / (b - a);
    } else {
        left = left.min(j as f64);
    }
    let mut right = i as f64;
    let mut j = i;
    while j < hi && spec.psd[j + 1] > half {
        j += 1;
    }
    if j < hi {
        let (a, b) = (spec.psd[j], spec.psd[j + 1]);
        right = j as f64 + (a - half) / (a - b);
    } else {
        right = right.max(j as f64);
    }
    ((right - left) * spec.resolution).max(spec.resolution)
}

/// Families searched for; centres in Hz.
fn families(lines: &ExpectedLines) -> Vec<(PeakKind, f64)> {
    let (o, m) = (lines.omega_het / (2.0 * PI), lines.omega_m / (2.0 * PI));
    vec![
        (PeakKind::Beat, o),
        (PeakKind::LinearSideband, o - m),
        (PeakKind::LinearSideband, o + m),
        (PeakKind::QuadraticSideband, o - 2.0 * m),
        (PeakKind::QuadraticSideband, o + 2.0 * m),
        (PeakKind::Direct1f, m),
        (PeakKind::Direct2f, 2.0 * m),
    ]
}

/// Local-maximum search around each expected line. Lines below the noise
/// floor threshold are left out.
pub fn find_sidebands(spec: &PowerSpectrum, lines: &ExpectedLines, search: &PeakSearch) -> PeakSet {
    let floor = spec.noise_floor();
    let fd = lines.omega_d / (2.0 * PI);
    // Slow transverse and secular motion below the drive frequency is not a reference.
    let first = spec.bin_of(fd).max(1);
    let global = spec.psd[first..].iter().cloned().fold(0.0, f64::max);
    let threshold = (search.snr * floor).max(search.dynamic_range * global);
    let half = search.window_drive_periods * fd;
    let top = *spec.frequencies.last().expect("non-empty spectrum");
    let mut records = Vec::new();
    for (kind, c) in families(lines) {
        if c - half < 0.0 && kind != PeakKind::Direct1f && kind != PeakKind::Direct2f {
            continue;
        }
        if c + half > top {
            continue;
        }
        // Skip the DC bin so the zero-frequency pedestal never wins.
        let lo = spec.bin_of((c - half).max(0.0)).max(1);
        let hi = spec.bin_of(c + half);
        if hi <= lo {
            continue;
        }
        let i = argmax(&spec.psd, lo, hi);
        if spec.psd[i] < threshold {
            continue;
        }
        let center = spec.frequencies[i];
        let shift = if fd > 0.0 { ((center - c) / fd).round() } else { 0.0 };
        let amplitude = spec.psd[lo..=hi].iter().map(|p| (p - floor).max(0.0)).sum::<f64>() * spec.resolution;
        records.push(PeakRecord {
            kind,
            center,
            amplitude,
            width: half_width(spec, i, lo, hi),
            expected: c,
            predicted: c + shift * fd,
            parent: None,
            peak_psd: spec.psd[i],
        });
        if matches!(kind, PeakKind::Direct1f | PeakKind::LinearSideband) && fd > 2.0 * spec.resolution {
            for sign in [-1.0, 1.0] {
                let s = c + sign * fd;
                let a = spec.bin_of(s - 0.25 * fd).max(1);
                let b = spec.bin_of(s + 0.25 * fd);
                if b <= a {
                    continue;
                }
                let j = argmax(&spec.psd, a, b);
                // A satellite must be a local maximum, not the shoulder of the main line.
                let local = spec.psd[j] >= spec.psd[j - 1]
                    && j + 1 < spec.psd.len()
                    && spec.psd[j] >= spec.psd[j + 1];
                if spec.psd[j] < threshold || !local {
                    continue;
                }
                let amplitude = spec.psd[a..=b].iter().map(|p| (p - floor).max(0.0)).sum::<f64>() * spec.resolution;
                records.push(PeakRecord {
                    kind: PeakKind::DriveSplit,
                    center: spec.frequencies[j],
                    amplitude,
                    width: half_width(spec, j, a, b),
                    expected: s,
                    predicted: s,
                    parent: Some(kind),
                    peak_psd: spec.psd[j],
                });
            }
        }
    }
    PeakSet {
        records,
        noise_floor: floor,
    }
}

/// Power of one feature per spectrogram window, with detection flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub times: Vec<f64>,
    pub power: Vec<f64>,
    pub detected: Vec<bool>,
}

/// Integrated power above floor within `center ± half_width_hz` per window.
pub fn track_feature(gram: &Spectrogram, center_hz: f64, half_width_hz: f64, snr: f64) -> FeatureTrack {
    let mut track = FeatureTrack {
        times: Vec::new(),
        power: Vec::new(),
        detected: Vec::new(),
    };
    for (t, spec) in &gram.windows {
        let floor = spec.noise_floor();
        let lo = spec.bin_of((center_hz - half_width_hz).max(0.0)).max(1);
        let hi = spec.bin_of(center_hz + half_width_hz).max(lo);
        let peak = spec.psd[lo..=hi].iter().cloned().fold(0.0, f64::max);
        let p = spec.psd[lo..=hi].iter().map(|p| (p - floor).max(0.0)).sum::<f64>() * spec.resolution;
        track.times.push(*t);
        track.power.push(p);
        track.detected.push(peak >= snr * floor && p > 0.0);
    }
    track
}

/// Offset of `x` from the nearest multiple of `period`.
fn fold(x: f64, period: f64) -> f64 {
    if period > 0.0 {
        x - (x / period).round() * period
    } else {
        x
    }
}

/// Mechanical frequency read off a spectrum: the `ω_M` within `±ω_d/2` of
/// `lines.omega_m` that best places every detected family line on its
/// `±ω_d` comb. Returns rad/s.
pub fn estimate_omega_m(spec: &PowerSpectrum, lines: &ExpectedLines, search: &PeakSearch) -> Result<f64> {
    let peaks = find_sidebands(spec, lines, search);
    let (o, m0) = (lines.omega_het / (2.0 * PI), lines.omega_m / (2.0 * PI));
    let fd = lines.omega_d / (2.0 * PI);
    // (center, constant part, multiplier of ω_M)
    let terms: Vec<(f64, f64, f64)> = peaks
        .records
        .iter()
        .filter_map(|r| {
            let (base, mult) = match r.kind {
                PeakKind::LinearSideband => (o, if r.expected < o { -1.0 } else { 1.0 }),
                PeakKind::QuadraticSideband => (o, if r.expected < o { -2.0 } else { 2.0 }),
                PeakKind::Direct1f => (0.0, 1.0),
                PeakKind::Direct2f => (0.0, 2.0),
                PeakKind::Beat | PeakKind::DriveSplit => return None,
            };
            Some((r.center, base, mult))
        })
        .collect();
    if terms.is_empty() {
        return Err(Error::InsufficientData {
            detections: 0,
            required: 1,
        });
    }
    let span = if fd > 0.0 { 0.5 * fd } else { 0.1 * m0 };
    let step = 0.05 * spec.resolution;
    let count = (2.0 * span / step).ceil() as usize;
    let cost = |f: f64| -> f64 {
        terms
            .iter()
            .map(|(c, base, mult)| fold(c - base - mult * f, fd).powi(2))
            .sum()
    };
    let best = (0..=count)
        .map(|i| m0 - span + i as f64 * step)
        .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
        .unwrap_or(m0);
    Ok(2.0 * PI * best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Power decay rate, s⁻¹.
    pub rate: f64,
    pub rate_stderr: f64,
    pub initial_power: f64,
    /// RMS residual of the log-power fit.
    pub residual: f64,
    pub detections: usize,
}

pub const MIN_DETECTIONS: usize = 5;

/// Least-squares fit of `ln P = ln P₀ − rate·t` over detected points.
pub fn fit_exponential(times: &[f64], power: &[f64]) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(power)
        .filter(|(_, p)| **p > 0.0 && p.is_finite())
        .map(|(t, p)| (*t, p.ln()))
        .collect();
    if pts.len() < MIN_DETECTIONS {
        return Err(Error::InsufficientData {
            detections: pts.len(),
            required: MIN_DETECTIONS,
        });
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mt;
    let ss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let dof = (n - 2.0).max(1.0);
    Ok(DecayFit {
        rate: -slope,
        rate_stderr: (ss / dof / sxx).sqrt(),
        initial_power: intercept.exp(),
        residual: (ss / n).sqrt(),
        detections: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetDecayFit {
    pub rate: f64,
    pub rate_stderr: f64,
    pub amplitude: f64,
    /// Asymptotic level the series relaxes to.
    pub offset: f64,
    /// RMS of the weighted residuals.
    pub residual: f64,
    pub points: usize,
}

fn offset_lsq(t: &[f64], y: &[f64], w: &[f64], rate: f64) -> (f64, f64, f64) {
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((t, y), w) in t.iter().zip(y).zip(w) {
        let e = (-rate * t).exp();
        let w2 = w * w;
        s11 += w2;
        s12 += w2 * e;
        s22 += w2 * e * e;
        b1 += w2 * y;
        b2 += w2 * e * y;
    }
    let det = s11 * s22 - s12 * s12;
    let c = (s22 * b1 - s12 * b2) / det;
    let a = (s11 * b2 - s12 * b1) / det;
    let ss = t
        .iter()
        .zip(y)
        .zip(w)
        .map(|((t, y), w)| (w * (y - c - a * (-rate * t).exp())).powi(2))
        .sum();
    (c, a, ss)
}

fn best_rate(t: &[f64], y: &[f64], w: &[f64], span: f64) -> f64 {
    let (lo, hi) = ((0.05 / span).ln(), (200.0 / span).ln());
    let grid = 400;
    let cost = |lr: f64| offset_lsq(t, y, w, lr.exp()).2;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=grid {
        let lr = lo + (hi - lo) * i as f64 / grid as f64;
        let c = cost(lr);
        if c < best.0 {
            best = (c, lr);
        }
    }
    let step = (hi - lo) / grid as f64;
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let (x1, x2) = (b - g * (b - a), a + g * (b - a));
        if cost(x1) < cost(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    (0.5 * (a + b)).exp()
}

/// Fit `y = c + A·exp(−rate·t)` by separable least squares. With
/// `relative_errors` the points are reweighted by the model itself, which
/// suits sample variances and other quantities whose scatter scales with level.
pub fn fit_exponential_offset(times: &[f64], values: &[f64], relative_errors: bool) -> Result<OffsetDecayFit> {
    let (t, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(t, y)| t.is_finite() && y.is_finite())
        .map(|(t, y)| (*t, *y))
        .unzip();
    if t.len() < MIN_DETECTIONS {
        return Err(Error::InsufficientData {
            detections: t.len(),
            required: MIN_DETECTIONS,
        });
    }
    let t0 = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let t: Vec<f64> = t.iter().map(|x| x - t0).collect();
    let span = t.iter().cloned().fold(0.0, f64::max);
    if !(span > 0.0) {
        return Err(Error::InvalidSegmentation("fit needs a time span".into()));
    }
    let mut w = vec![1.0; t.len()];
    let mut rate = best_rate(&t, &y, &w, span);
    if relative_errors {
        for _ in 0..4 {
            let (c, a, _) = offset_lsq(&t, &y, &w, rate);
            for (wi, ti) in w.iter_mut().zip(&t) {
                let m = c + a * (-rate * ti).exp();
                *wi = if m > 0.0 { 1.0 / m } else { 0.0 };
            }
            rate = best_rate(&t, &y, &w, span);
        }
    }
    let (c, a, ss) = offset_lsq(&t, &y, &w, rate);
    let n = t.len();
    let sigma2 = ss / (n as f64 - 3.0).max(1.0);
    // Gauss-Newton covariance from the weighted Jacobian in (c, A, rate).
    let mut jtj = [[0.0; 3]; 3];
    for (ti, wi) in t.iter().zip(&w) {
        let e = (-rate * ti).exp();
        let j = [*wi, wi * e, -wi * a * ti * e];
        for r in 0..3 {
            for s in 0..3 {
                jtj[r][s] += j[r] * j[s];
            }
        }
    }
    let m = jtj;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv22 = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
    Ok(OffsetDecayFit {
        rate,
        rate_stderr: (sigma2 * inv22).abs().sqrt(),
        amplitude: a * (rate * t0).exp(),
        offset: c,
        residual: (ss / n as f64).sqrt(),
        points: n,
    })
}

/// Decay rate of the feature at `center_hz`, from windows where it is detected.
pub fn sideband_decay_rate(
    gram: &Spectrogram,
    center_hz: f64,
    half_width_hz: f64,
    snr: f64,
) -> Result<DecayFit> {
    let track = track_feature(gram, center_hz, half_width_hz, snr);
    let (t, p): (Vec<f64>, Vec<f64>) = track
        .times
        .iter()
        .zip(&track.power)
        .zip(&track.detected)
        .filter(|(_, d)| **d)
        .map(|((t, p), _)| (*t, *p))
        .unzip();
    fit_exponential(&t, &p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureEstimate {
    pub t_eff: f64,
    pub phonon_occupancy: f64,
    pub variance: f64,
    pub window_s: f64,
}

/// Removes DC and narrow bands around each `notch_hz` by zeroing FFT bins.
pub fn notch_filter(samples: &[f64], sample_rate: f64, notch_hz: &[f64], half_width_hz: f64) -> Vec<f64> {
    let n = samples.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = samples.iter().map(|x| Complex64::new(*x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate / n as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let f = (k.min(n - k)) as f64 * df;
        if k == 0 || notch_hz.iter().any(|c| (f - c).abs() <= half_width_hz) {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// `T = m ω² ⟨x²⟩ / k_B` over the last `window` seconds of one axis, after
/// notching the drive line and its second harmonic.
pub fn temperature_from_series(
    x: &TimeSeries,
    omega: f64,
    mass: f64,
    window: f64,
    drive_omega: Option<f64>,
) -> Result<TemperatureEstimate> {
    let required = 20.0 * 2.0 * PI / omega;
    if window < required * (1.0 - 1e-9) {
        return Err(Error::WindowTooShort {
            window_s: window,
            required_s: required,
        });
    }
    let len = (window * x.sample_rate).round() as usize;
    if len > x.samples.len() {
        return Err(Error::WindowTooShort {
            window_s: x.duration(),
            required_s: window,
        });
    }
    let tail = &x.samples[x.samples.len() - len..];
    let filtered = match drive_omega {
        Some(wd) => {
            let fd = wd / (2.0 * PI);
            // At least two bins wide, never wider than a tenth of the drive.
            let hw = (2.0 * x.sample_rate / len as f64).max(0.02 * fd).min(0.1 * fd);
            notch_filter(tail, x.sample_rate, &[fd, 2.0 * fd], hw)
        }
        None => {
            let mean = tail.iter().sum::<f64>() / len as f64;
            tail.iter().map(|v| v - mean).collect()
        }
    };
    let variance = filtered.iter().map(|v| v * v).sum::<f64>() / len as f64;
    let t_eff = mass * omega * omega * variance / BOLTZMANN;
    Ok(TemperatureEstimate {
        t_eff,
        phonon_occupancy: phonon_occupancy(t_eff, omega),
        variance,
        window_s: len as f64 / x.sample_rate,
    })
}

/// Axial temperature of a trajectory.
pub fn temperature_from_trajectory(
    traj: &Trajectory,
    omega_m: f64,
    mass: f64,
    window: f64,
    drive_omega: Option<f64>,
) -> Result<TemperatureEstimate> {
    temperature_from_series(&TimeSeries::from_trajectory(traj, 0)?, omega_m, mass, window, drive_omega)
}

/// Gnuplot script for a `freq_hz,psd` file.
pub fn gnuplot_spectrum(data_file: &str, title: &str) -> String {
    format!(
        "set datafile separator ','\nset key noautotitle\nset logscale y\n\
         set xlabel 'frequency (Hz)'\nset ylabel 'PSD'\nset title '{title}'\n\
         plot '{data_file}' using 1:2 every ::1 with lines\n"
    )
}

/// Gnuplot script for a long-format spectrogram file.
pub fn gnuplot_spectrogram(data_file: &str, title: &str) -> String {
    format!(
        "set datafile separator ','\nset key noautotitle\nset view map\nset logscale cb\n\
         set xlabel 'time (s)'\nset ylabel 'frequency (Hz)'\nset title '{title}'\n\
         splot '{data_file}' using 1:2:3 every ::1 with points pointtype 5 pointsize 0.5 palette\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(f0: f64, fs: f64, n: usize, amp: f64) -> TimeSeries {
        let s = (0..n).map(|i| amp * (2.0 * PI * f0 * i as f64 / fs).sin()).collect();
        TimeSeries::new(s, fs, SeriesOrigin::Detector).unwrap()
    }

    #[test]
    fn unit_sine_parseval_and_location() {
        let fs = 100e3;
        let x = sine(5e3, fs, 100_000, 1.0);
        let spec = welch_psd(&x, 1000, 0.5, Window::Hann).unwrap();
        assert!((spec.total_power() - 0.5).abs() < 0.005, "{}", spec.total_power());
        let peak = argmax(&spec.psd, 0, spec.psd.len() - 1);
        assert_eq!(spec.frequencies[peak], 5e3);
        assert!((spec.total_power() / x.mean_square() - 1.0).abs() < 0.01);
    }

    #[test]
    fn spectrum_mean_checks_grids() {
        let a = welch_default(&sine(5e3, 100e3, 10_000, 1.0), 100.0).unwrap();
        let b = welch_default(&sine(5e3, 100e3, 10_000, 3.0), 100.0).unwrap();
        let m = PowerSpectrum::mean(&[a.clone(), b.clone()]).unwrap();
        assert!((m.total_power() - 0.5 * (a.total_power() + b.total_power())).abs() < 1e-9 * m.total_power());
        let c = welch_default(&sine(5e3, 100e3, 10_000, 1.0), 50.0).unwrap();
        assert!(PowerSpectrum::mean(&[a, c]).is_err());
        assert!(PowerSpectrum::mean(&[]).is_err());
    }

    #[test]
    fn spectrum_csv_roundtrip() {
        let x = sine(5e3, 100e3, 10_000, 1.0);
        let spec = welch_default(&x, 100.0).unwrap();
        let mut buf = Vec::new();
        spec.write_csv(&mut buf).unwrap();
        let back = PowerSpectrum::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.psd, spec.psd);
        assert_eq!(back.frequencies, spec.frequencies);
        assert!(PowerSpectrum::read_csv("f,p\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn off_bin_line_within_one_bin() {
        let fs = 100e3;
        let x = sine(5_037.0, fs, 100_000, 1.0);
        let spec = welch_default(&x, 100.0).unwrap();
        let peak = argmax(&spec.psd, 0, spec.psd.len() - 1);
        assert!((spec.frequencies[peak] - 5_037.0).abs() <= spec.resolution);
        assert!((spec.total_power() / x.mean_square() - 1.0).abs() < 0.01);
    }

    #[test]
    fn white_noise_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fs = 10e3;
        let mut x = TimeSeries::new(vec![0.0; 256 * 401], fs, SeriesOrigin::Detector).unwrap();
        add_white_noise(&mut x, 2.0, &mut rng);
        let spec = welch_psd(&x, 512, 0.5, Window::Hann).unwrap();
        assert!(spec.segment_count >= 200);
        let inner = &spec.psd[1..spec.psd.len() - 1];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean / (4.0 / (fs / 2.0)) - 1.0).abs() < 0.05, "{mean}");
        assert!((spec.total_power() / x.mean_square() - 1.0).abs() < 0.01);
    }

    #[test]
    fn dc_lands_in_zero_bin() {
        let x = TimeSeries::new(vec![3.0; 4096], 1e3, SeriesOrigin::Detector).unwrap();
        let spec = welch_psd(&x, 256, 0.5, Window::Hann).unwrap();
        let dc = spec.psd[0] * spec.resolution;
        assert!((spec.total_power() - 9.0).abs() < 1e-9);
        // Hann leaks one neighbour bin; nothing beyond.
        assert!(spec.psd[2..].iter().all(|p| *p < 1e-20));
        assert!(dc > 0.6 * 9.0);
    }

    #[test]
    fn bad_segmentation() {
        let x = sine(1.0, 10.0, 100, 1.0);
        assert!(matches!(welch_psd(&x, 101, 0.5, Window::Hann), Err(Error::InvalidSegmentation(_))));
        assert!(matches!(welch_psd(&x, 50, 1.0, Window::Hann), Err(Error::InvalidSegmentation(_))));
        assert!(spectrogram(&x, 20.0, 1.0).is_err());
    }

    #[test]
    fn spectrogram_cadence() {
        let fs = 500e3;
        let x = sine(10e3, fs, 6000, 1.0);
        let gram = spectrogram(&x, DEFAULT_WINDOW_S, DEFAULT_SPACING_S).unwrap();
        assert_eq!(gram.windows.len(), 49);
        let p0 = gram.windows[0].1.total_power();
        for (_, s) in &gram.windows {
            assert!((s.total_power() / p0 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn decaying_sine_rate_is_recovered() {
        let fs = 500e3;
        let gamma = 400.0;
        let s: Vec<f64> = (0..10_000)
            .map(|i| {
                let t = i as f64 / fs;
                (-0.5 * gamma * t).exp() * (2.0 * PI * 10e3 * t).sin()
            })
            .collect();
        let x = TimeSeries::new(s, fs, SeriesOrigin::PositionX).unwrap();
        let gram = spectrogram(&x, DEFAULT_WINDOW_S, DEFAULT_SPACING_S).unwrap();
        let fit = sideband_decay_rate(&gram, 10e3, 1.5e3, 10.0).unwrap();
        assert!((fit.rate / gamma - 1.0).abs() < 0.05, "{fit:?}");

        let flat = sine(10e3, fs, 10_000, 1.0);
        let gram = spectrogram(&flat, DEFAULT_WINDOW_S, DEFAULT_SPACING_S).unwrap();
        let fit = sideband_decay_rate(&gram, 10e3, 1.5e3, 10.0).unwrap();
        assert!(fit.rate.abs() <= 3.0 * fit.rate_stderr + 1e-9, "{fit:?}");
    }

    #[test]
    fn too_few_detections() {
        let err = fit_exponential(&[0.0, 1.0, 2.0], &[1.0, 0.5, 0.25]);
        assert!(matches!(err, Err(Error::InsufficientData { detections: 3, required: 5 })));
    }

    #[test]
    fn temperature_of_deterministic_oscillation() {
        let w = 2.0 * PI * 10e3;
        let fs = 500e3;
        let amp = 2e-9;
        let mass = 8.4e-17;
        let s: Vec<f64> = (0..50_000).map(|i| amp * (w * i as f64 / fs).cos()).collect();
        let x = TimeSeries::new(s, fs, SeriesOrigin::PositionX).unwrap();
        let est = temperature_from_series(&x, w, mass, 0.05, Some(2.0 * PI * 1500.0)).unwrap();
        let expected = mass * w * w * amp * amp / (2.0 * BOLTZMANN);
        assert!((est.t_eff / expected - 1.0).abs() < 0.01, "{} vs {expected}", est.t_eff);
        assert!(matches!(
            temperature_from_series(&x, w, mass, 1e-3, None),
            Err(Error::WindowTooShort { .. })
        ));
    }

    #[test]
    fn notch_removes_micromotion_line() {
        let fs = 100e3;
        let n = 100_000;
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                5.0 * (2.0 * PI * 1500.0 * t).sin() + (2.0 * PI * 10e3 * t).sin()
            })
            .collect();
        let out = notch_filter(&s, fs, &[1500.0, 3000.0], 30.0);
        let ms = out.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((ms - 0.5).abs() < 1e-6);
    }

    #[test]
    fn two_sideband_lines_only() {
        let fs = 1e6;
        let n = 200_000;
        let (o, m) = (100e3, 10e3);
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * (o - m) * t).cos() + (2.0 * PI * (o + m) * t).cos()
            })
            .collect();
        let x = TimeSeries::new(s, fs, SeriesOrigin::Detector).unwrap();
        let spec = welch_default(&x, 100.0).unwrap();
        let lines = ExpectedLines {
            omega_het: 2.0 * PI * o,
            omega_m: 2.0 * PI * m,
            omega_d: 2.0 * PI * 1500.0,
        };
        let peaks = find_sidebands(&spec, &lines, &PeakSearch::default());
        assert_eq!(peaks.records.len(), 2, "{peaks:?}");
        assert!(peaks.records.iter().all(|r| r.kind == PeakKind::LinearSideband));
        for r in &peaks.records {
            assert!((r.center - r.predicted).abs() <= spec.resolution);
        }
    }

    fn field_trajectory(fs: f64, n: usize, f: impl Fn(f64) -> Complex64) -> Trajectory {
        use crate::dynamics::SimState;
        Trajectory {
            samples: (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    SimState {
                        position: [0.0; 3],
                        velocity: [0.0; 3],
                        field: f(t),
                        time: t,
                    }
                })
                .collect(),
            sample_interval: 1.0 / fs,
            config_hash: String::new(),
            seed: 0,
            member: 0,
        }
    }

    fn line_power(spec: &PowerSpectrum, f: f64) -> f64 {
        spec.band_power(f - 300.0, f + 300.0)
    }

    const FS: f64 = 1e6;
    const OMEGA: f64 = 2.0 * PI * 100e3;
    const WM: f64 = 2.0 * PI * 10e3;

    fn det(lock: f64) -> Heterodyne {
        Heterodyne {
            omega_het_rad_s: OMEGA,
            lock_amplitude: lock,
            sample_rate_hz: FS,
            omega_m_rad_s: WM,
        }
    }

    #[test]
    fn constant_field_gives_dc_and_beat_only() {
        let traj = field_trajectory(FS, 100_000, |_| Complex64::new(3.0, -1.0));
        let x = synth_heterodyne(&traj, &det(1.0)).unwrap();
        let spec = welch_default(&x, 100.0).unwrap();
        let beat = line_power(&spec, 100e3);
        // 2|a_lock||ᾱ| cos → power 2|ᾱ|².
        assert!((beat / 20.0 - 1.0).abs() < 0.01, "{beat}");
        let rest = spec.total_power() - beat - spec.band_power(0.0, 300.0);
        assert!(rest.abs() < 1e-6 * spec.total_power());
    }

    #[test]
    fn small_modulation_sidebands_match_expansion() {
        let (abar, delta, lock) = (2.0, 0.01, 1.0);
        let traj = field_trajectory(FS, 100_000, |t| Complex64::new(abar + delta * (WM * t).cos(), 0.0));
        let x = synth_heterodyne(&traj, &det(lock)).unwrap();
        let spec = welch_default(&x, 100.0).unwrap();
        // 2 a_lock δ cos(ω_M t) cos(Ω t): two lines of amplitude a_lock δ.
        let expected = (lock * delta).powi(2) / 2.0;
        for f in [90e3, 110e3] {
            let p = line_power(&spec, f);
            assert!((p / expected - 1.0).abs() < 0.01, "{f}: {p} vs {expected}");
        }
        // |a|² term: 2ᾱδ cos(ω_M t).
        let direct = line_power(&spec, 10e3);
        assert!((direct / ((2.0 * abar * delta).powi(2) / 2.0) - 1.0).abs() < 0.01);

        let no_lock = synth_heterodyne(&traj, &det(0.0)).unwrap();
        let spec = welch_default(&no_lock, 100.0).unwrap();
        assert!(line_power(&spec, 110e3) < 1e-12 * spec.total_power());
        assert!(line_power(&spec, 10e3) > 0.0);
    }

    #[test]
    fn sideband_amplitudes_scale_linearly_and_quadratically() {
        let run = |c: f64| {
            let traj = field_trajectory(FS, 100_000, |t| {
                let d = c * 0.01 * (WM * t).cos();
                Complex64::new(2.0 + d + 0.5 * d * d, 0.0)
            });
            let spec = welch_default(&synth_heterodyne(&traj, &det(1.0)).unwrap(), 100.0).unwrap();
            (line_power(&spec, 110e3).sqrt(), line_power(&spec, 120e3).sqrt())
        };
        let (l1, q1) = run(1.0);
        let (l2, q2) = run(2.0);
        assert!((l2 / l1 / 2.0 - 1.0).abs() < 0.02);
        assert!((q2 / q1 / 4.0 - 1.0).abs() < 0.02);
    }

    #[test]
    fn undersampling_is_rejected() {
        let traj = field_trajectory(FS, 100, |_| Complex64::new(1.0, 0.0));
        let mut d = det(1.0);
        d.sample_rate_hz = 200e3;
        assert!(matches!(synth_heterodyne(&traj, &d), Err(Error::Aliasing { .. })));
    }

    #[test]
    fn offset_fit_recovers_synthetic_decay() {
        let t: Vec<f64> = (0..60).map(|i| 1e-4 + i as f64 * 5e-4).collect();
        let y: Vec<f64> = t.iter().map(|t| 0.9 + 4.0 * (-180.0 * t).exp()).collect();
        for rel in [false, true] {
            let f = fit_exponential_offset(&t, &y, rel).unwrap();
            assert!((f.rate - 180.0).abs() < 1e-3, "{f:?}");
            assert!((f.offset - 0.9).abs() < 1e-6);
            assert!((f.amplitude - 4.0).abs() < 1e-4);
        }
        assert!(fit_exponential_offset(&t[..3], &y[..3], false).is_err());
    }

    #[test]
    fn spectrogram_mean_averages_psd() {
        let fs = 10_000.0;
        let a = TimeSeries::new((0..4000).map(|i| (i as f64 * 0.3).sin()).collect(), fs, SeriesOrigin::Detector).unwrap();
        let b = TimeSeries::new((0..4000).map(|i| 3.0 * (i as f64 * 0.3).sin()).collect(), fs, SeriesOrigin::Detector).unwrap();
        let ga = spectrogram(&a, 0.04, 0.02).unwrap();
        let gb = spectrogram(&b, 0.04, 0.02).unwrap();
        let m = Spectrogram::mean(&[ga.clone(), gb]).unwrap();
        for ((_, sa), (_, sm)) in ga.windows.iter().zip(&m.windows) {
            assert!((sm.total_power() - 5.0 * sa.total_power()).abs() < 1e-9 * sm.total_power());
        }
        let short = spectrogram(&a.slice(0, 2000), 0.04, 0.02).unwrap();
        assert!(Spectrogram::mean(&[ga, short]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn welch_matches_windowed_mean_square(
            seed in 0u64..10_000,
            seg in 16usize..512,
            overlap in 0.0f64..0.75,
            hann in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4096;
            let s: Vec<f64> = (0..n).map(|i| rng.random::<f64>() - 0.5 + (i as f64 * 0.01).sin()).collect();
            let ts = TimeSeries::new(s, 1e4, SeriesOrigin::Detector).unwrap();
            let window = if hann { Window::Hann } else { Window::Rectangular };
            let psd = welch_psd(&ts, seg, overlap, window).unwrap();
            let want = windowed_mean_square(&ts, seg, overlap, window);
            proptest::prop_assert!((psd.total_power() / want - 1.0).abs() < 1e-9);
        }
    }
}
