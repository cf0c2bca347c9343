use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hybridtrap_core::config::{sha256_hex, EmittedFile, RunManifest};
use hybridtrap_core::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Collects the files of one run and writes its manifest last.
pub struct RunOutput {
    dir: PathBuf,
    subcommand: String,
    started_at: String,
    files: Vec<EmittedFile>,
}

impl RunOutput {
    pub fn create(dir: &Path, subcommand: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            subcommand: subcommand.to_owned(),
            started_at: now(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.files.push(EmittedFile {
            path: name.to_owned(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_with(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        fill(&mut buf).with_context(|| format!("serialising {name}"))?;
        self.write(name, &buf)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(self, config: &ExperimentConfig) -> Result<PathBuf> {
        let manifest = RunManifest {
            config_hash: config.hash(),
            seed: config.noise.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            subcommand: self.subcommand,
            started_at: self.started_at,
            finished_at: now(),
            files: self.files,
            config: config.clone(),
        };
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
