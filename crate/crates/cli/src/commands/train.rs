//! `train`: dataset generation, training (single split or k-fold), and the
//! three artifacts: checkpoint, history CSV, metrics report JSON (+ CSV).

use std::path::Path;

use retfuse_core::synthetic::generate_dataset;
use retfuse_core::training::{self, cross_validate, holdout_split, System};

use crate::config::{CvSummary, ExperimentConfig, ReportFormat, RunReport};
use crate::commands::{out_dir, write_json, write_text};

pub fn run(cfg: &ExperimentConfig, quiet: bool) -> anyhow::Result<()> {
    let dir = out_dir(cfg);
    let data = generate_dataset(&cfg.synthetic)?;
    let dataset_hash = data.hash();
    let hash = cfg.hash();

    if cfg.train.folds >= 2 {
        let cv = cross_validate(&data, &cfg.train, &cfg.loss)?;
        // The aggregate report is fold 0's, with the summary carried
        // alongside; the checkpoint is fold 0's model retrained below.
        let mut report = RunReport::stamp(cfg, dataset_hash, None, cv.fold_reports[0].clone());
        report.folds = cv.fold_reports.clone();
        report.cv_summary = Some(CvSummary {
            headline_mean: cv.headline.mean,
            headline_std: cv.headline.std,
            macro_f1_mean: cv.macro_f1.mean,
            macro_f1_std: cv.macro_f1.std,
            accuracy_mean: cv.accuracy.mean,
            accuracy_std: cv.accuracy.std,
            degenerate: cv.degenerate,
        });
        emit(cfg, &dir, &report, None, quiet)?;
        if !quiet {
            println!(
                "cross-validation ({} folds): headline {:.4} ± {:.4}",
                cfg.train.folds, cv.headline.mean, cv.headline.std
            );
        }
        return Ok(());
    }

    let (train_idx, val_idx) =
        holdout_split(data.len(), cfg.train.val_fraction, cfg.train.seed);
    let mut system = System::build(
        cfg.synthetic.height,
        cfg.synthetic.width,
        cfg.synthetic.channels,
        &cfg.train,
        &cfg.loss,
    )?;
    let outcome = training::train(&mut system, &data, &train_idx, &val_idx, &cfg.train, &cfg.loss)?;
    system.store.save_checkpoint(&dir.join("checkpoint"), &hash)?;
    write_text(&dir.join("history.csv"), &training::history_csv(&outcome.history))?;

    let report = RunReport::stamp(cfg, dataset_hash, Some(outcome.best_epoch), outcome.report);
    emit(cfg, &dir, &report, Some(&report.metrics), quiet)?;
    if !quiet {
        println!(
            "trained {} epochs; best epoch {}; headline metric {:.4}",
            cfg.train.epochs,
            outcome.best_epoch,
            report.metrics.headline()
        );
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

fn emit(
    cfg: &ExperimentConfig,
    dir: &Path,
    report: &RunReport,
    metrics_csv: Option<&retfuse_core::metrics::MetricsReport>,
    _quiet: bool,
) -> anyhow::Result<()> {
    if cfg.report_formats.contains(&ReportFormat::Json) {
        write_json(&dir.join("metrics.json"), report)?;
    }
    if cfg.report_formats.contains(&ReportFormat::Csv) {
        if let Some(m) = metrics_csv.or(Some(&report.metrics)) {
            write_text(&dir.join("metrics.csv"), &m.to_csv())?;
        }
    }
    Ok(())
}
