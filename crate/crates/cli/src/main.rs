use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

/// Simulate and analyse a charged nanosphere in a hybrid Paul-trap / optical-cavity trap.
#[derive(Parser, Debug)]
#[command(name = "hybridtrap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config, prior run manifest, or preset name (fig2, fig3, fig4a).
    #[arg(long, short = 'c')]
    pub config: String,
    /// Dotted-key override, e.g. `gas.pressure_pa=1e-2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces `noise.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (defaults to `outputs.dir`, then `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write gnuplot scripts next to the data files.
    #[arg(long)]
    pub gnuplot: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Detector,
    X,
    Y,
    Z,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derived physical parameters as JSON.
    Derive(Common),
    /// Linearised model and cooling rates at the configured well.
    Linearize(Common),
    /// Integrate the ensemble and write trajectories.
    Simulate(Common),
    /// Ensemble-mean power spectrum plus detected lines.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Analyse a saved trajectory CSV instead of simulating.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "detector")]
        signal: Signal,
    },
    /// Ensemble-mean detector spectrogram plus the differential decay fit.
    Spectrogram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Photon number and charge from an observation record or spectra.
    Infer {
        #[command(flatten)]
        common: Common,
        /// JSON with omega_m_rad_s, omega_s_rad_s and optional sigmas.
        #[arg(long, conflicts_with = "spectrum")]
        observation: Option<PathBuf>,
        /// Detector spectrum CSV; ω_M is read off its sidebands.
        #[arg(long, required_unless_present = "observation")]
        spectrum: Option<PathBuf>,
        /// Transverse position spectrum CSV for ω_s. Without it ω_s is half the
        /// strongest detector line below ω_d/2.
        #[arg(long, requires = "spectrum")]
        secular_spectrum: Option<PathBuf>,
    },
    /// Run a pressure or well ladder and tabulate the steady states.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `hi:lo:decade` in mbar, or a comma list.
        #[arg(long, conflicts_with = "wells")]
        pressure: Option<String>,
        /// Comma list of well indices.
        #[arg(long)]
        wells: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_workers() {
        eprintln!("error: {e:#}");
        return ExitCode::from(3);
    }
    let result = match cli.command {
        Command::Derive(c) => commands::derive(&c),
        Command::Linearize(c) => commands::linearize(&c),
        Command::Simulate(c) => commands::simulate(&c),
        Command::Spectrum {
            common,
            trajectory,
            signal,
        } => commands::spectrum(&common, trajectory.as_deref(), signal),
        Command::Spectrogram { common, trajectory } => commands::spectrogram(&common, trajectory.as_deref()),
        Command::Infer {
            common,
            observation,
            spectrum,
            secular_spectrum,
        } => commands::infer(&common, observation.as_deref(), spectrum.as_deref(), secular_spectrum.as_deref()),
        Command::Sweep {
            common,
            pressure,
            wells,
        } => commands::sweep(&common, pressure.as_deref(), wells.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
