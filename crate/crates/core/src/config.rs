//! Experiment configuration files, dotted-key overrides and run manifests.
//!
//! Config files are TOML with SI values and the unit in each key name
//! (`pressure_pa`, `dt_s`, …). Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{InitialConditions, IntegratorConfig, NoiseConfig};
use crate::error::{Error, Result};
use crate::params::{CavitySpec, DerivedParams, GasSpec, PaulTrapSpec, SphereSpec};

fn default_lock_ratio() -> f64 {
    1.0 / 3.0
}
fn default_resolution() -> f64 {
    100.0
}
fn default_members() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Heterodyne beat frequency Ω, rad/s.
    pub omega_het_rad_s: f64,
    /// Lock-beam amplitude as a fraction of |ᾱ|.
    #[serde(default = "default_lock_ratio")]
    pub lock_ratio: f64,
    /// Detector sample rate; defaults to the trajectory record rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_hz: Option<f64>,
    /// Standard deviation of additive white detector noise, in units of |ᾱ|².
    #[serde(default)]
    pub noise_level: f64,
    /// Target Welch resolution, Hz.
    #[serde(default = "default_resolution")]
    pub resolution_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default)]
    pub format: TrajectoryFormat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pressures_mbar: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wells: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub well_index: u32,
    #[serde(default = "default_members")]
    pub ensemble_members: u64,
    pub sphere: SphereSpec,
    pub cavity: CavitySpec,
    pub paul: PaulTrapSpec,
    pub gas: GasSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub initial: InitialConditions,
    pub detection: DetectionConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a TOML config or a prior run manifest (JSON, detected by content).
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let manifest: RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            manifest.config.with_overrides(overrides)
        } else {
            Self::from_toml_with_overrides(&text, overrides)
        }
    }

    /// A copy with dotted-key overrides applied and re-validated.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        let params = self.derive()?;
        self.integrator.validate(&params, self.paul.drive_freq_rad_s)?;
        crate::params::positive("detection.omega_het_rad_s", self.detection.omega_het_rad_s)?;
        crate::params::non_negative("detection.lock_ratio", self.detection.lock_ratio)?;
        crate::params::non_negative("detection.noise_level", self.detection.noise_level)?;
        crate::params::positive("detection.resolution_hz", self.detection.resolution_hz)?;
        if let Some(fs) = self.detection.sample_rate_hz {
            crate::params::positive("detection.sample_rate_hz", fs)?;
        }
        if self.ensemble_members == 0 {
            return Err(Error::invalid("ensemble_members", "must be >= 1"));
        }
        if let Some(t) = self.initial.temperature_k {
            crate::params::non_negative("initial.temperature_k", t)?;
        }
        for p in &self.sweep.pressures_mbar {
            crate::params::non_negative("sweep.pressures_mbar", *p)?;
        }
        Ok(())
    }

    pub fn derive(&self) -> Result<DerivedParams> {
        DerivedParams::from_specs(&self.sphere, &self.cavity, &self.paul, &self.gas)
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Set `a.b.c = value` in a TOML table, creating intermediate tables.
/// Integers written where a float already lives are widened.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut current = table;
    for p in parents {
        let entry = current
            .entry((*p).to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    let mut value = parse_value(raw);
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (current.get(*last), &value) {
        value = toml::Value::Float(*i as f64);
    }
    current.insert((*last).to_owned(), value);
    Ok(())
}

/// One emitted file and its SHA-256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub subcommand: String,
    pub started_at: String,
    pub finished_at: String,
    pub files: Vec<EmittedFile>,
    pub config: ExperimentConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
