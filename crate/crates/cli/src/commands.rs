use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hybridtrap_core::config::TrajectoryFormat;
use hybridtrap_core::dynamics::Trajectory;
use hybridtrap_core::inference::{self, FrequencyObservation};
use hybridtrap_core::linear;
use hybridtrap_core::spectral::{self, ExpectedLines, PeakSearch, PowerSpectrum, Spectrogram, TimeSeries};
use hybridtrap_core::{presets, Error, ExperimentConfig, Simulator};
use rayon::prelude::*;
use serde::Serialize;

use crate::output::RunOutput;
use crate::{Common, Signal};

pub const WORKERS_ENV: &str = "HYBRIDTRAP_WORKERS";

#[derive(Debug)]
pub struct MissingFile(pub PathBuf);

impl fmt::Display for MissingFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no such file: {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

/// 2 missing input, 3 invalid config or input, 4 integration divergence,
/// 5 analysis could not produce a result, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<MissingFile>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidInput { .. }
                | Error::Config(_)
                | Error::NotAWell { .. }
                | Error::Aliasing { .. }
                | Error::InvalidSegmentation(_) => 3,
                Error::IntegrationDiverged { .. } => 4,
                Error::InsufficientData { .. }
                | Error::WindowTooShort { .. }
                | Error::UndefinedEquilibrium
                | Error::InconsistentObservation { .. } => 5,
            };
        }
    }
    1
}

pub fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidInput {
            field: WORKERS_ENV.into(),
            reason: format!("expected a positive integer, got `{raw}`"),
        })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn existing(path: &Path) -> Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(MissingFile(path.to_path_buf()).into())
    }
}

fn parse_overrides(common: &Common) -> Result<Vec<(String, String)>> {
    let mut out = common
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        out.push(("noise.seed".into(), seed.to_string()));
    }
    Ok(out)
}

pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(common)?;
    let path = Path::new(&common.config);
    if path.is_file() {
        return Ok(ExperimentConfig::load(path, &overrides)?);
    }
    if presets::source(&common.config).is_some() {
        return Ok(presets::load(&common.config)?.with_overrides(&overrides)?);
    }
    Err(MissingFile(path.to_path_buf()).into())
}

fn out_dir(common: &Common, config: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| config.outputs.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn begin(common: &Common, subcommand: &str) -> Result<(ExperimentConfig, RunOutput)> {
    let config = load_config(common)?;
    let out = RunOutput::create(&out_dir(common, &config), subcommand)?;
    Ok((config, out))
}

/// Stdout write that tolerates a closed pipe (`| head`).
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn derive(common: &Common) -> Result<()> {
    let (config, mut out) = begin(common, "derive")?;
    let params = config.derive()?;
    out.write_json("derived.json", &params)?;
    out.finish(&config)?;
    print_json(&params)
}

#[derive(Serialize)]
struct Linearization {
    well_index: u32,
    model: linear::LinearizedModel,
    cooling: linear::WellCooling,
    omega_m_drive_averaged: f64,
    omega_m_floquet: Option<f64>,
    secular_frequency_rad_s: f64,
    steady_state_temperature_k: Option<f64>,
}

pub fn linearize(common: &Common) -> Result<()> {
    let (config, mut out) = begin(common, "linearize")?;
    let p = config.derive()?;
    let site = linear::WellSite::antinode(config.well_index);
    let model = linear::linearize_at(site.position(p.wavenumber_k), &p, &config.paul)?;
    let cooling = linear::well_cooling(&p, &config.paul, config.well_index)?;
    let report = Linearization {
        well_index: config.well_index,
        model,
        cooling,
        omega_m_drive_averaged: linear::drive_averaged_omega_m(&p, &config.paul, config.well_index)?,
        omega_m_floquet: linear::drive_floquet_omega(&p, &config.paul, config.well_index).ok(),
        secular_frequency_rad_s: linear::secular_frequency(&p, &config.paul, p.photon_n),
        steady_state_temperature_k: linear::steady_state_temperature(p.gamma_m, cooling.cycle_average, p.gas_temperature_k)
            .ok()
            .map(|(t, _)| t),
    };
    out.write_json("linearized.json", &report)?;
    out.finish(&config)?;
    print_json(&report)
}

fn run_ensemble(config: &ExperimentConfig) -> Result<Vec<Trajectory>> {
    Ok(Simulator::new(config)?.run_ensemble(config.ensemble_members)?)
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = File::open(existing(path)?)?;
    Trajectory::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn trajectories(config: &ExperimentConfig, path: Option<&Path>) -> Result<Vec<Trajectory>> {
    match path {
        Some(p) => Ok(vec![read_trajectory(p)?]),
        None => run_ensemble(config),
    }
}

pub fn simulate(common: &Common) -> Result<()> {
    let (config, mut out) = begin(common, "simulate")?;
    let trajs = run_ensemble(&config)?;
    for t in &trajs {
        match config.outputs.format {
            TrajectoryFormat::Csv => {
                out.write_with(&format!("trajectory_{:03}.csv", t.member), |b| t.write_csv(b))?;
            }
            TrajectoryFormat::Binary => {
                out.write_with(&format!("trajectory_{:03}.bin", t.member), |b| t.write_binary(b))?;
            }
        }
    }
    if config.outputs.format == TrajectoryFormat::Binary {
        out.write_json("trajectory_layout.json", &trajs[0].binary_layout())?;
    }
    if common.gnuplot && config.outputs.format == TrajectoryFormat::Csv {
        let script = "set datafile separator ','\nset key noautotitle\nset xlabel 't (s)'\nset ylabel 'x (m)'\n\
                      plot 'trajectory_000.csv' using 1:2 every ::1 with lines\n";
        out.write("trajectory.gp", script.as_bytes())?;
    }
    let manifest = out.finish(&config)?;
    eprintln!("{} trajectories, manifest {}", trajs.len(), manifest.display());
    Ok(())
}

fn series_for(config: &ExperimentConfig, traj: &Trajectory, signal: Signal) -> Result<TimeSeries> {
    Ok(match signal {
        Signal::Detector => {
            let p = config.derive()?;
            spectral::detector_record(traj, &config.detection, &p, config.noise.seed, traj.member)?
        }
        Signal::X => TimeSeries::from_trajectory(traj, 0)?,
        Signal::Y => TimeSeries::from_trajectory(traj, 1)?,
        Signal::Z => TimeSeries::from_trajectory(traj, 2)?,
    })
}

fn mean_spectrum(config: &ExperimentConfig, trajs: &[Trajectory], signal: Signal, skip_s: f64) -> Result<PowerSpectrum> {
    let spectra = trajs
        .iter()
        .map(|t| {
            let s = series_for(config, t, signal)?;
            let skip = ((skip_s * s.sample_rate) as usize).min(s.samples.len().saturating_sub(2));
            let s = s.slice(skip, s.samples.len() - skip);
            Ok(spectral::welch_default(&s, config.detection.resolution_hz)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PowerSpectrum::mean(&spectra)?)
}

fn expected_lines(config: &ExperimentConfig) -> Result<ExpectedLines> {
    match ExpectedLines::for_config(config) {
        Ok(l) => Ok(l),
        Err(_) => {
            let p = config.derive()?;
            Ok(ExpectedLines {
                omega_het: config.detection.omega_het_rad_s,
                omega_m: p.omega_m_center(),
                omega_d: config.paul.drive_freq_rad_s,
            })
        }
    }
}

#[derive(Serialize)]
struct SpectrumReport {
    signal: String,
    members: usize,
    resolution_hz: f64,
    noise_floor: f64,
    predicted: ExpectedLines,
    omega_m_estimate_rad_s: Option<f64>,
    peaks: spectral::PeakSet,
}

/// Peak table and ω_M estimate for a detector spectrum.
fn analyse_detector(spec: &PowerSpectrum, lines: &ExpectedLines) -> (spectral::PeakSet, Option<f64>) {
    let search = PeakSearch::default();
    let peaks = spectral::find_sidebands(spec, lines, &search);
    let prior = ExpectedLines {
        omega_m: peaks.omega_m_prior(lines),
        ..*lines
    };
    let estimate = spectral::estimate_omega_m(spec, &prior, &search).ok();
    let refined = match estimate {
        Some(w) => spectral::find_sidebands(spec, &ExpectedLines { omega_m: w, ..*lines }, &search),
        None => peaks,
    };
    (refined, estimate)
}

pub fn spectrum(common: &Common, trajectory: Option<&Path>, signal: Signal) -> Result<()> {
    let (config, mut out) = begin(common, "spectrum")?;
    let trajs = trajectories(&config, trajectory)?;
    let spec = mean_spectrum(&config, &trajs, signal, 0.0)?;
    let name = match signal {
        Signal::Detector => "spectrum.csv",
        Signal::X => "spectrum_x.csv",
        Signal::Y => "spectrum_y.csv",
        Signal::Z => "spectrum_z.csv",
    };
    out.write_with(name, |b| spec.write_csv(b))?;
    if signal == Signal::Detector {
        let lines = expected_lines(&config)?;
        let (peaks, estimate) = analyse_detector(&spec, &lines);
        let report = SpectrumReport {
            signal: "detector".into(),
            members: trajs.len(),
            resolution_hz: spec.resolution,
            noise_floor: spec.noise_floor(),
            predicted: lines,
            omega_m_estimate_rad_s: estimate,
            peaks,
        };
        out.write_json("peaks.json", &report)?;
    }
    if common.gnuplot {
        out.write("spectrum.gp", spectral::gnuplot_spectrum(name, &config.name).as_bytes())?;
    }
    out.finish(&config)?;
    Ok(())
}

pub fn spectrogram(common: &Common, trajectory: Option<&Path>) -> Result<()> {
    let (config, mut out) = begin(common, "spectrogram")?;
    let trajs = trajectories(&config, trajectory)?;
    let grams = trajs
        .par_iter()
        .map(|t| {
            let s = series_for(&config, t, Signal::Detector)?;
            Ok(spectral::spectrogram(&s, spectral::DEFAULT_WINDOW_S, spectral::DEFAULT_SPACING_S)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let gram = Spectrogram::mean(&grams)?;
    out.write_with("spectrogram.csv", |b| gram.write_csv(b))?;
    let lines = expected_lines(&config)?;
    match inference::differential_decay(&gram, &lines, PeakSearch::default().snr) {
        Ok(d) => {
            out.write_json("decay.json", &d)?;
        }
        Err(e) => eprintln!("warning: no differential decay fit: {e}"),
    }
    if common.gnuplot {
        out.write("spectrogram.gp", spectral::gnuplot_spectrogram("spectrogram.csv", &config.name).as_bytes())?;
    }
    out.finish(&config)?;
    Ok(())
}

fn read_spectrum(path: &Path) -> Result<PowerSpectrum> {
    let file = File::open(existing(path)?)?;
    PowerSpectrum::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Frequency of the strongest bin between DC and `limit_hz`.
fn strongest_below(spec: &PowerSpectrum, limit_hz: f64) -> Result<f64> {
    let hi = spec.bin_of(limit_hz);
    (2..hi)
        .max_by(|a, b| spec.psd[*a].total_cmp(&spec.psd[*b]))
        .map(|i| spec.frequencies[i])
        .ok_or_else(|| anyhow!(Error::InsufficientData { detections: 0, required: 1 }))
}

#[derive(Serialize)]
struct InferenceReport {
    observation: FrequencyObservation,
    source: String,
    result: inference::InferenceResult,
}

pub fn infer(
    common: &Common,
    observation: Option<&Path>,
    spectrum: Option<&Path>,
    secular: Option<&Path>,
) -> Result<()> {
    let (config, mut out) = begin(common, "infer")?;
    let params = config.derive()?;
    let (obs, source) = match (observation, spectrum) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(existing(path)?)?;
            let obs: FrequencyObservation =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            (obs, "observation".to_owned())
        }
        (None, Some(path)) => {
            let spec = read_spectrum(path)?;
            let lines = expected_lines(&config)?;
            let (_, estimate) = analyse_detector(&spec, &lines);
            let omega_m = estimate.ok_or_else(|| anyhow!(Error::InsufficientData { detections: 0, required: 1 }))?;
            let half_drive = 0.5 * config.paul.drive_freq_rad_s / (2.0 * PI);
            let bin = 2.0 * PI * spec.resolution;
            let (omega_s, sigma_s, source) = match secular {
                Some(sp) => {
                    let s = read_spectrum(sp)?;
                    (2.0 * PI * strongest_below(&s, half_drive)?, PI * s.resolution, "spectrum+secular")
                }
                // The detector sees transverse motion through the beam envelope, at 2ω_s.
                None => (PI * strongest_below(&spec, half_drive)?, 0.25 * bin, "spectrum"),
            };
            let obs = FrequencyObservation {
                omega_m_rad_s: omega_m,
                omega_s_rad_s: omega_s,
                omega_m_sigma: 0.5 * bin,
                omega_s_sigma: sigma_s,
            };
            (obs, source.to_owned())
        }
        (None, None) => bail!(Error::Config("infer needs --observation or --spectrum".into())),
    };
    let result = inference::infer_charge(&obs, &params, &config.paul)?;
    let report = InferenceReport {
        observation: obs,
        source,
        result,
    };
    out.write_json("inference.json", &report)?;
    out.finish(&config)?;
    print_json(&report)
}

/// `hi:lo:decade` or a comma list of values.
pub fn parse_ladder(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse ladder `{spec}`"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        if parts[2] != "decade" {
            return Err(bad().into());
        }
        let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        if !(a > 0.0 && b > 0.0) {
            return Err(bad().into());
        }
        let (la, lb) = (a.log10(), b.log10());
        let steps = (lb - la).abs().round() as i32;
        let dir = if lb < la { -1.0 } else { 1.0 };
        return Ok((0..=steps).map(|i| 10f64.powf(la + dir * f64::from(i))).collect());
    }
    spec.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad().into()))
        .collect()
}

#[derive(Clone, Copy)]
enum Point {
    Pressure(f64),
    Well(u32),
}

impl Point {
    fn label(self) -> String {
        match self {
            Point::Pressure(p) => format!("p{p:.0e}mbar"),
            Point::Well(n) => format!("n{n:03}"),
        }
    }

    fn apply(self, config: &ExperimentConfig) -> Result<ExperimentConfig> {
        let o = match self {
            Point::Pressure(p) => ("gas.pressure_pa".to_owned(), format!("{:e}", p * 100.0)),
            Point::Well(n) => ("well_index".to_owned(), n.to_string()),
        };
        Ok(config.with_overrides(&[o])?)
    }
}

#[derive(Serialize)]
struct SweepRow {
    label: String,
    pressure_mbar: f64,
    well_index: u32,
    gamma_m: f64,
    gamma_opt_avg: f64,
    gamma_opt_peak: f64,
    t_eff_predicted_k: f64,
    phonon_occupancy: f64,
    t_eff_measured_k: f64,
    sideband_amplitude: f64,
    omega_m_estimate_rad_s: f64,
}

const SWEEP_HEADER: &str = "label,pressure_mbar,well_index,gamma_m,gamma_opt_avg,gamma_opt_peak,\
t_eff_predicted_k,phonon_occupancy,t_eff_measured_k,sideband_amplitude,omega_m_estimate_rad_s";

impl SweepRow {
    fn csv(&self) -> String {
        format!(
            "{},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.label,
            self.pressure_mbar,
            self.well_index,
            self.gamma_m,
            self.gamma_opt_avg,
            self.gamma_opt_peak,
            self.t_eff_predicted_k,
            self.phonon_occupancy,
            self.t_eff_measured_k,
            self.sideband_amplitude,
            self.omega_m_estimate_rad_s
        )
    }
}

fn sweep_point(config: &ExperimentConfig, point: Point) -> Result<(SweepRow, PowerSpectrum)> {
    let c = point.apply(config)?;
    let p = c.derive()?;
    let trajs = run_ensemble(&c)?;
    // Drop the first fifth as transient.
    let skip = 0.2 * c.integrator.duration_s;
    let spec = mean_spectrum(&c, &trajs, Signal::Detector, skip)?;
    let lines = expected_lines(&c)?;
    let (_, estimate) = analyse_detector(&spec, &lines);
    let (o, m, fd) = (lines.omega_het / (2.0 * PI), lines.omega_m / (2.0 * PI), lines.omega_d / (2.0 * PI));
    let floor = spec.noise_floor();
    let band: f64 = [o - m, o + m]
        .iter()
        .map(|c| spec.band_power(c - 3.0 * fd, c + 3.0 * fd) - floor * 6.0 * fd)
        .sum();
    let cooling = linear::well_cooling(&p, &c.paul, c.well_index).ok();
    let (avg, peak) = cooling.map_or((f64::NAN, f64::NAN), |w| (w.cycle_average, w.peak));
    let t_pred = linear::steady_state_temperature(p.gamma_m, avg.max(0.0), p.gas_temperature_k)
        .map_or(f64::NAN, |(t, _)| t);
    let window = 0.5 * c.integrator.duration_s;
    let measured: Vec<f64> = trajs
        .iter()
        .filter_map(|t| {
            spectral::temperature_from_trajectory(t, lines.omega_m, p.mass_kg, window, Some(lines.omega_d))
                .ok()
                .map(|e| e.t_eff)
        })
        .collect();
    let t_meas = if measured.is_empty() {
        f64::NAN
    } else {
        measured.iter().sum::<f64>() / measured.len() as f64
    };
    let row = SweepRow {
        label: point.label(),
        pressure_mbar: c.gas.pressure_pa / 100.0,
        well_index: c.well_index,
        gamma_m: p.gamma_m,
        gamma_opt_avg: avg,
        gamma_opt_peak: peak,
        t_eff_predicted_k: t_pred,
        phonon_occupancy: linear::phonon_occupancy(t_pred, lines.omega_m),
        t_eff_measured_k: t_meas,
        sideband_amplitude: band.max(0.0).sqrt(),
        omega_m_estimate_rad_s: estimate.unwrap_or(f64::NAN),
    };
    Ok((row, spec))
}

pub fn sweep(common: &Common, pressure: Option<&str>, wells: Option<&str>) -> Result<()> {
    let (config, mut out) = begin(common, "sweep")?;
    let points: Vec<Point> = match (pressure, wells) {
        (Some(p), _) => parse_ladder(p)?.into_iter().map(Point::Pressure).collect(),
        (None, Some(w)) => parse_ladder(w)?
            .into_iter()
            .map(|n| {
                if n >= 0.0 && n.fract() == 0.0 && n <= f64::from(u32::MAX) {
                    Ok(Point::Well(n as u32))
                } else {
                    Err(Error::Config(format!("well index {n} is not a non-negative integer")))
                }
            })
            .collect::<Result<_, _>>()?,
        (None, None) if !config.sweep.pressures_mbar.is_empty() => {
            config.sweep.pressures_mbar.iter().copied().map(Point::Pressure).collect()
        }
        (None, None) if !config.sweep.wells.is_empty() => config.sweep.wells.iter().copied().map(Point::Well).collect(),
        (None, None) => bail!(Error::Config("sweep needs --pressure, --wells or a [sweep] table".into())),
    };
    let results = points
        .par_iter()
        .map(|pt| sweep_point(&config, *pt))
        .collect::<Result<Vec<_>>>()?;
    let mut table = String::from(SWEEP_HEADER);
    table.push('\n');
    for (row, spec) in &results {
        let name = format!("spectrum_{}.csv", row.label);
        out.write_with(&name, |b| spec.write_csv(b))?;
        if common.gnuplot {
            let script = spectral::gnuplot_spectrum(&name, &row.label);
            out.write(&format!("spectrum_{}.gp", row.label), script.as_bytes())?;
        }
        table.push_str(&row.csv());
        table.push('\n');
    }
    out.write("summary.csv", table.as_bytes())?;
    out.finish(&config)?;
    emit(&table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decade_ladders_run_both_ways() {
        let down = parse_ladder("1e-2:1e-6:decade").unwrap();
        assert_eq!(down.len(), 5);
        assert!((down[0] - 1e-2).abs() < 1e-18 && (down[4] - 1e-6).abs() < 1e-20);
        assert_eq!(parse_ladder("1:100:decade").unwrap().len(), 3);
        assert_eq!(parse_ladder("0, 10,20").unwrap(), vec![0.0, 10.0, 20.0]);
        assert!(parse_ladder("1:2:octave").is_err());
        assert!(parse_ladder("0:1e-3:decade").is_err());
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let e = |err: Error| exit_code(&anyhow::Error::new(err).context("while running"));
        assert_eq!(e(Error::Config("x".into())), 3);
        assert_eq!(e(Error::IntegrationDiverged { step: 3 }), 4);
        assert_eq!(e(Error::UndefinedEquilibrium), 5);
        assert_eq!(exit_code(&MissingFile("a".into()).into()), 2);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }
}
