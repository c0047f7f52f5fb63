//! `gen-data`: materialize the synthetic dataset as QMTF tensors plus a
//! labels CSV and a manifest recording the config and seed.

use retfuse_core::synthetic::generate_dataset;

use crate::commands::out_dir;
use crate::config::ExperimentConfig;

pub fn run(cfg: &ExperimentConfig, quiet: bool) -> anyhow::Result<()> {
    let dir = out_dir(cfg).join("dataset");
    let data = generate_dataset(&cfg.synthetic)?;
    data.export(&dir)?;
    if !quiet {
        println!("wrote {} samples × 6 modalities to {}", data.len(), dir.display());
        println!("dataset hash {}", data.hash());
    }
    Ok(())
}
