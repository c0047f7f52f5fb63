//! Experiment configuration: a single JSON document embedding the synthetic
//! dataset spec, the training setup and the loss constants. Unknown keys are
//! rejected. The effective config (after CLI overrides) is hashed and the
//! hash is embedded in every artifact, so reports and checkpoints can be
//! matched to the exact configuration that produced them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use retfuse_core::objectives::LossConfig;
use retfuse_core::params::fnv1a_hex;
use retfuse_core::synthetic::{LabelMode, SyntheticConfig};
use retfuse_core::training::{TaskKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Json, ReportFormat::Csv]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let compatible = matches!(
            (self.train.task, self.synthetic.label_mode),
            (TaskKind::Multilabel, LabelMode::Multilabel20)
                | (TaskKind::Grading, LabelMode::Grading5)
        );
        anyhow::ensure!(compatible, "train.task does not match synthetic.label_mode");
        anyhow::ensure!(
            self.synthetic.channels.is_multiple_of(self.train.reduction),
            "train.reduction {} must divide synthetic.channels {}",
            self.train.reduction,
            self.synthetic.channels
        );
        Ok(())
    }

    /// Canonical serialization of the experiment identity (dataset, training
    /// and loss sections — not output paths or formats), hashed with FNV-1a.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(&(&self.synthetic, &self.train, &self.loss))
            .expect("config serializes");
        fnv1a_hex(canon.as_bytes())
    }
}

/// Loads a config, applying `--seed` (overrides both dataset and training
/// seeds) and `--out`.
pub fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
    if let Some(seed) = seed_override {
        cfg.synthetic.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.out_dir = Some(out.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

// ----------------------------------------------------------------------
// Ablation plans
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub modality_mask: Option<[bool; 6]>,
    #[serde(default)]
    pub nodes: Option<retfuse_core::fusion::NodeMask>,
    #[serde(default)]
    pub strategy: Option<retfuse_core::training::FusionStrategy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub name: String,
    pub variants: Vec<AblationVariant>,
}

impl AblationPlan {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(!self.variants.is_empty(), "ablation plan has no variants");
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        anyhow::ensure!(names.len() == before, "duplicate variant names in ablation plan");
        anyhow::ensure!(
            self.variants.iter().any(|v| v.name == "baseline"),
            "ablation plan must include a variant named 'baseline'"
        );
        Ok(())
    }
}

pub fn load_plan(path: &Path) -> anyhow::Result<AblationPlan> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read plan {}: {e}", path.display()))?;
    let plan: AblationPlan = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("invalid plan {}: {e}", path.display()))?;
    plan.validate()?;
    Ok(plan)
}

// ----------------------------------------------------------------------
// Run reports
// ----------------------------------------------------------------------

pub const REPORT_FORMAT: &str = "retfuse-run-report";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub task: TaskKind,
    pub best_epoch: Option<usize>,
    pub metrics: retfuse_core::metrics::MetricsReport,
    /// Per-fold reports when cross-validation ran.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<retfuse_core::metrics::MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv_summary: Option<CvSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSummary {
    pub headline_mean: f64,
    pub headline_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub degenerate: bool,
}

impl RunReport {
    pub fn stamp(
        cfg: &ExperimentConfig,
        dataset_hash: String,
        best_epoch: Option<usize>,
        metrics: retfuse_core::metrics::MetricsReport,
    ) -> Self {
        RunReport {
            format: REPORT_FORMAT.to_string(),
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            dataset_hash,
            task: cfg.train.task,
            best_epoch,
            metrics,
            folds: Vec::new(),
            cv_summary: None,
        }
    }

    /// Loads a report and rejects it when its hash does not match the
    /// expected config hash.
    pub fn load_checked(path: &Path, expected_hash: &str) -> anyhow::Result<RunReport> {
        let text = fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read report {}: {e}", path.display()))?;
        let report: RunReport = serde_json::from_str(&text)?;
        anyhow::ensure!(report.format == REPORT_FORMAT, "not a run report: {}", path.display());
        anyhow::ensure!(
            report.config_hash == expected_hash,
            "report {} was produced by config {}, expected {}",
            path.display(),
            report.config_hash,
            expected_hash
        );
        Ok(report)
    }
}
