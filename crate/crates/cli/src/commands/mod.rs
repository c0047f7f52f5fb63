pub mod ablate;
pub mod export;
pub mod gendata;
pub mod gradcheck;
pub mod perturb;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;

/// Output directory resolution: `--out` beats the config, which beats `runs/`.
pub fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
