//! `perturb`: robustness table over {None, Blur, Sharp, Distortion} against
//! a trained checkpoint. The None row is the unperturbed evaluation of the
//! checkpoint on the same validation split the training run used.

use std::path::Path;

use retfuse_core::synthetic::{generate_dataset, PerturbKind};
use retfuse_core::training::{evaluate, holdout_split, System, TaskKind};

use crate::commands::{out_dir, write_text};
use crate::config::{ExperimentConfig, RunReport};

pub fn run(cfg: &ExperimentConfig, checkpoint: &Path, quiet: bool) -> anyhow::Result<()> {
    anyhow::ensure!(checkpoint.exists(), "checkpoint {} does not exist", checkpoint.display());
    let dir = out_dir(cfg);
    let data = generate_dataset(&cfg.synthetic)?;
    let (_, val_idx) = holdout_split(data.len(), cfg.train.val_fraction, cfg.train.seed);

    let mut system = System::build(
        cfg.synthetic.height,
        cfg.synthetic.width,
        cfg.synthetic.channels,
        &cfg.train,
        &cfg.loss,
    )?;
    let saved_hash = system.store.load_checkpoint(checkpoint)?;
    anyhow::ensure!(
        saved_hash == cfg.hash(),
        "checkpoint {} was trained under config {}, current config is {}",
        checkpoint.display(),
        saved_hash,
        cfg.hash()
    );

    let mut out = String::from(
        "perturbation,precision,f1,auc,map,kappa,accuracy,delta_precision,delta_f1,delta_auc,delta_map,delta_kappa,delta_accuracy\n",
    );
    let (none_report, _) = evaluate(&system, &data, &val_idx, None)?;
    // When the training report sits next to the checkpoint, load it through
    // the hash-checked loader and confirm the unperturbed row reproduces it.
    if let Some(parent) = checkpoint.parent() {
        let report_path = parent.join("metrics.json");
        if report_path.exists() {
            let trained = RunReport::load_checked(&report_path, &cfg.hash())?;
            anyhow::ensure!(
                (trained.metrics.headline() - none_report.headline()).abs() < 1e-12,
                "checkpoint evaluation drifted from the training report: {} vs {}",
                trained.metrics.headline(),
                none_report.headline()
            );
        }
    }
    let base = cells(cfg.train.task, &none_report);
    push_row(&mut out, "None", &base, &base);
    if !quiet {
        println!("None: headline {:.4}", none_report.headline());
    }
    for kind in PerturbKind::ALL {
        let (report, _) = evaluate(&system, &data, &val_idx, Some((kind, cfg.train.seed)))?;
        let row = cells(cfg.train.task, &report);
        let label = match kind {
            PerturbKind::Blur => "Blur",
            PerturbKind::Sharpen => "Sharp",
            PerturbKind::Distort => "Distortion",
        };
        push_row(&mut out, label, &row, &base);
        if !quiet {
            println!("{label}: headline {:.4}", report.headline());
        }
    }
    write_text(&dir.join("robustness.csv"), &out)?;
    if !quiet {
        println!("robustness table written to {}", dir.join("robustness.csv").display());
    }
    Ok(())
}

fn cells(task: TaskKind, r: &retfuse_core::metrics::MetricsReport) -> Vec<(f64, bool)> {
    match task {
        TaskKind::Multilabel => vec![
            (r.macro_precision, true),
            (r.macro_f1, true),
            (r.macro_auc.unwrap_or(f64::NAN), r.macro_auc.is_some()),
            (r.mean_average_precision.unwrap_or(f64::NAN), r.mean_average_precision.is_some()),
            (f64::NAN, false),
            (r.accuracy, true),
        ],
        TaskKind::Grading => vec![
            (r.macro_precision, true),
            (r.macro_f1, true),
            (r.macro_auc.unwrap_or(f64::NAN), r.macro_auc.is_some()),
            (f64::NAN, false),
            (r.kappa.unwrap_or(f64::NAN), r.kappa.is_some()),
            (r.accuracy, true),
        ],
    }
}

fn push_row(out: &mut String, name: &str, row: &[(f64, bool)], base: &[(f64, bool)]) {
    out.push_str(name);
    for (v, ok) in row {
        if *ok {
            out.push_str(&format!(",{v}"));
        } else {
            out.push(',');
        }
    }
    for ((v, ok), (b, bok)) in row.iter().zip(base) {
        if *ok && *bok {
            out.push_str(&format!(",{}", v - b));
        } else {
            out.push(',');
        }
    }
    out.push('\n');
}
