//! Figure-level parameter sets shipped with the crate.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const NAMES: [&str; 3] = ["fig2", "fig3", "fig4a"];

const FIG2: &str = include_str!("../presets/fig2.toml");
const FIG3: &str = include_str!("../presets/fig3.toml");
const FIG4A: &str = include_str!("../presets/fig4a.toml");

/// Raw TOML text of a named preset.
pub fn source(name: &str) -> Option<&'static str> {
    match name {
        "fig2" => Some(FIG2),
        "fig3" => Some(FIG3),
        "fig4a" => Some(FIG4A),
        _ => None,
    }
}

pub fn load(name: &str) -> Result<ExperimentConfig> {
    let text = source(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    ExperimentConfig::from_toml_str(text)
}

/// All presets, parsed and validated.
pub fn provide_figure_presets() -> Vec<(&'static str, ExperimentConfig)> {
    NAMES
        .iter()
        .map(|n| (*n, load(n).expect("shipped presets are valid")))
        .collect()
}
