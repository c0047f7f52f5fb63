//! `export`: plot-ready artifacts from a trained checkpoint — attention
//! grids per modality, a 2-D PCA projection of the pre-head embeddings
//! (deterministic stand-in for nonlinear embedding plots), and perturbed SRF
//! families.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retfuse_core::fusion::{AttentionTrace, BLOCKS_PER_UNIT, MODALITY_NAMES, SCALES};
use retfuse_core::pca;
use retfuse_core::spectral::{perturb_srf, PerturbationParams, Srf};
use retfuse_core::synthetic::{generate_dataset, Labels};
use retfuse_core::training::{holdout_split, System};

use crate::commands::{out_dir, write_text};
use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportKind {
    Attention,
    Embeddings,
    Srf,
}

pub fn run(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    what: ExportKind,
    quiet: bool,
) -> anyhow::Result<()> {
    let dir = out_dir(cfg).join("exports");
    match what {
        ExportKind::Srf => export_srf(cfg, &dir, quiet),
        ExportKind::Attention => {
            let system = load_system(cfg, checkpoint)?;
            export_attention(cfg, &system, &dir, quiet)
        }
        ExportKind::Embeddings => {
            let system = load_system(cfg, checkpoint)?;
            export_embeddings(cfg, &system, &dir, quiet)
        }
    }
}

fn load_system(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> anyhow::Result<System> {
    let ckpt = checkpoint
        .ok_or_else(|| anyhow::anyhow!("this export kind needs --checkpoint <dir>"))?;
    anyhow::ensure!(ckpt.exists(), "checkpoint {} does not exist", ckpt.display());
    let mut system = System::build(
        cfg.synthetic.height,
        cfg.synthetic.width,
        cfg.synthetic.channels,
        &cfg.train,
        &cfg.loss,
    )?;
    let saved = system.store.load_checkpoint(ckpt)?;
    anyhow::ensure!(
        saved == cfg.hash(),
        "checkpoint {} was trained under config {}, current config is {}",
        ckpt.display(),
        saved,
        cfg.hash()
    );
    Ok(system)
}

/// Per-modality mean-attention grids from the final refinement block of the
/// last scale, on the first validation sample.
fn export_attention(
    cfg: &ExperimentConfig,
    system: &System,
    dir: &Path,
    quiet: bool,
) -> anyhow::Result<()> {
    anyhow::ensure!(
        cfg.train.nodes.mdfc,
        "attention export needs the cross-attention node enabled"
    );
    let data = generate_dataset(&cfg.synthetic)?;
    let (_, val_idx) = holdout_split(data.len(), cfg.train.val_fraction, cfg.train.seed);
    let sample = val_idx[0];
    let mut trace = AttentionTrace::default();
    let _ = system.embed(&data.images[sample], Some(&mut trace))?;
    let (h, w) = (cfg.synthetic.height, cfg.synthetic.width);
    for (m, name) in MODALITY_NAMES.iter().enumerate() {
        let map = trace.export_attention_map(m, SCALES, BLOCKS_PER_UNIT - 1, h, w, h, w)?;
        let mut csv = String::new();
        for y in 0..h {
            let row: Vec<String> =
                (0..w).map(|x| map.data()[y * w + x].to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_text(&dir.join(format!("attention_{name}.csv")), &csv)?;
    }
    if !quiet {
        println!(
            "wrote {} attention grids ({}×{}) for sample {} to {}",
            MODALITY_NAMES.len(),
            h,
            w,
            sample,
            dir.display()
        );
    }
    Ok(())
}

/// PCA projection of pooled pre-head embeddings with labels; header comments
/// carry the distance-preservation statistic against a random projection.
fn export_embeddings(
    cfg: &ExperimentConfig,
    system: &System,
    dir: &Path,
    quiet: bool,
) -> anyhow::Result<()> {
    let data = generate_dataset(&cfg.synthetic)?;
    let n = data.len();
    let mut flat = Vec::new();
    let mut dim = 0;
    for i in 0..n {
        let e = system.embed(&data.images[i], None)?;
        dim = e.len();
        flat.extend_from_slice(&e);
    }
    let (coords, _axes) = pca::project_2d(&flat, n, dim)?;
    let pca_corr = pca::distance_correlation(&flat, n, dim, &coords);
    // Random-axes baseline for the sanity statistic.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xd15c);
    let rand_axes: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let rand_coords: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let row = &flat[i * dim..(i + 1) * dim];
            [
                row.iter().zip(&rand_axes[0]).map(|(a, b)| a * b).sum(),
                row.iter().zip(&rand_axes[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    let rand_corr = pca::distance_correlation(&flat, n, dim, &rand_coords);

    let mut csv = String::new();
    csv.push_str("# projection=pca2d (deterministic power iteration)\n");
    csv.push_str(&format!("# distance_corr_pca={pca_corr}\n"));
    csv.push_str(&format!("# distance_corr_random={rand_corr}\n"));
    csv.push_str("sample_id,x,y,labels\n");
    for (i, c) in coords.iter().enumerate() {
        let label_str = match &data.labels {
            Labels::Multilabel(rows) => rows[i]
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(l, _)| l.to_string())
                .collect::<Vec<_>>()
                .join("|"),
            Labels::Grades(gs) => gs[i].to_string(),
        };
        csv.push_str(&format!("{},{},{},{}\n", i, c[0], c[1], label_str));
    }
    write_text(&dir.join("embeddings_pca.csv"), &csv)?;
    if !quiet {
        println!(
            "wrote {} embeddings; distance correlation pca={:.4} random={:.4}",
            n, pca_corr, rand_corr
        );
    }
    Ok(())
}

/// Baseline SRF plus a seeded family of perturbed SRFs for plotting.
fn export_srf(cfg: &ExperimentConfig, dir: &Path, quiet: bool) -> anyhow::Result<()> {
    let srf = Srf::<f64>::baseline();
    write_text(&dir.join("srf_baseline.csv"), &srf.to_csv())?;
    let family = 8;
    for i in 0..family {
        let params = PerturbationParams::sample(srf.bands(), cfg.train.seed.wrapping_add(i));
        let perturbed = perturb_srf(&srf, &params)?;
        write_text(&dir.join(format!("srf_perturbed_{i}.csv")), &perturbed.to_csv())?;
    }
    if !quiet {
        println!("wrote baseline + {family} perturbed SRFs to {}", dir.display());
    }
    Ok(())
}
