//! Simulation and analysis toolkit for a charged nanosphere held in a hybrid
//! Paul-trap / optical-cavity trap.
//!
//! The crate is organised bottom-up:
//!
//! - [`params`] turns raw inputs into derived SI parameters,
//! - [`dynamics`] integrates the coupled stochastic particle–cavity equations,
//! - [`linear`] holds the closed forms about a trapped well,
//! - [`spectral`] synthesises heterodyne signals and analyses spectra,
//! - [`inference`] inverts the closed forms for photon number and charge,
//! - [`config`] parses experiment files, presets and run metadata.

pub mod config;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod inference;
pub mod linear;
pub mod params;
pub mod presets;
pub mod spectral;

pub use config::ExperimentConfig;
pub use dynamics::{Simulator, Trajectory};
pub use error::{Error, Result};
pub use linear::{LinearizedModel, WellCooling, WellSite};
pub use params::{CavitySpec, DerivedParams, GasSpec, PaulTrapSpec, SphereSpec};
