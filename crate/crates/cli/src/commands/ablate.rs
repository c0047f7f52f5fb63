//! `ablate`: run every plan variant against a shared dataset and seed, and
//! emit a comparison table shaped like the modality/node/strategy ablation
//! tables (variant rows × metric columns) plus deltas against the baseline.

use retfuse_core::fusion::MODALITY_NAMES;
use retfuse_core::metrics::MetricsReport;
use retfuse_core::synthetic::generate_dataset;
use retfuse_core::training::{self, holdout_split, System, TaskKind};

use crate::commands::{out_dir, write_json, write_text};
use crate::config::{AblationPlan, ExperimentConfig, RunReport};

pub fn run(cfg: &ExperimentConfig, plan: &AblationPlan, quiet: bool) -> anyhow::Result<()> {
    let dir = out_dir(cfg);
    let data = generate_dataset(&cfg.synthetic)?;
    let dataset_hash = data.hash();
    let (train_idx, val_idx) = holdout_split(data.len(), cfg.train.val_fraction, cfg.train.seed);

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for variant in &plan.variants {
        let mut vcfg = cfg.clone();
        if let Some(mask) = variant.modality_mask {
            vcfg.train.modality_mask = mask;
        }
        if let Some(nodes) = variant.nodes {
            vcfg.train.nodes = nodes;
        }
        if let Some(strategy) = variant.strategy {
            vcfg.train.strategy = strategy;
        }
        vcfg.validate()?;
        let mut system = System::build(
            vcfg.synthetic.height,
            vcfg.synthetic.width,
            vcfg.synthetic.channels,
            &vcfg.train,
            &vcfg.loss,
        )?;
        let outcome =
            training::train(&mut system, &data, &train_idx, &val_idx, &vcfg.train, &vcfg.loss)?;
        if !quiet {
            println!(
                "variant {:<24} headline {:.4} (best epoch {})",
                variant.name,
                outcome.report.headline(),
                outcome.best_epoch
            );
        }
        rows.push((variant, vcfg.train.clone(), outcome.report.clone()));
        let mut report =
            RunReport::stamp(&vcfg, dataset_hash.clone(), Some(outcome.best_epoch), outcome.report);
        report.config_hash = cfg.hash();
        reports.push((variant.name.clone(), report));
    }

    let baseline = rows
        .iter()
        .find(|(v, _, _)| v.name == "baseline")
        .map(|(_, _, r)| r.clone())
        .expect("plan validation guarantees a baseline");

    let csv = table_csv(cfg.train.task, &rows, &baseline, &dataset_hash);
    write_text(&dir.join(format!("ablation_{}.csv", plan.name)), &csv)?;
    let detail: Vec<serde_json::Value> = reports
        .into_iter()
        .map(|(name, r)| serde_json::json!({ "variant": name, "report": r }))
        .collect();
    write_json(
        &dir.join(format!("ablation_{}.json", plan.name)),
        &serde_json::json!({
            "plan": plan.name,
            "config_hash": cfg.hash(),
            "dataset_hash": dataset_hash,
            "variants": detail,
        }),
    )?;
    if !quiet {
        println!("ablation table written to {}", dir.display());
    }
    Ok(())
}

fn metric_cells(task: TaskKind, r: &MetricsReport) -> Vec<(f64, bool)> {
    // (value, applicable): precision, f1, auc, map, kappa, accuracy.
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

fn table_csv(
    task: TaskKind,
    rows: &[(&crate::config::AblationVariant, retfuse_core::training::TrainConfig, MetricsReport)],
    baseline: &MetricsReport,
    dataset_hash: &str,
) -> String {
    let mut out = String::from("variant");
    for m in MODALITY_NAMES {
        out.push_str(&format!(",{m}"));
    }
    out.push_str(",mffm,msfc,mdfc,unfrozen_encoders,feature_level");
    out.push_str(",precision,f1,auc,map,kappa,accuracy");
    out.push_str(",delta_precision,delta_f1,delta_auc,delta_map,delta_kappa,delta_accuracy");
    out.push_str(",dataset_hash\n");
    let base_cells = metric_cells(task, baseline);
    for (variant, tcfg, report) in rows {
        out.push_str(&variant.name);
        for m in 0..6 {
            out.push_str(if tcfg.modality_mask[m] { ",1" } else { ",0" });
        }
        out.push_str(",1"); // MFFM is always present
        out.push_str(if tcfg.nodes.msfc { ",1" } else { ",0" });
        out.push_str(if tcfg.nodes.mdfc { ",1" } else { ",0" });
        out.push_str(if tcfg.strategy.unfrozen_encoders { ",1" } else { ",0" });
        out.push_str(if tcfg.strategy.feature_level { ",1" } else { ",0" });
        let cells = metric_cells(task, report);
        for (v, ok) in &cells {
            if *ok {
                out.push_str(&format!(",{v}"));
            } else {
                out.push(',');
            }
        }
        for ((v, ok), (b, bok)) in cells.iter().zip(&base_cells) {
            if *ok && *bok {
                out.push_str(&format!(",{}", v - b));
            } else {
                out.push(',');
            }
        }
        out.push_str(&format!(",{dataset_hash}\n"));
    }
    out
}
