//! Evaluation statistics: classification, ranking, agreement, segmentation
//! and image quality. Everything here is pure and detached from the autodiff
//! tape; metric functions never touch tape state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ----------------------------------------------------------------------
// Ranking metrics
// ----------------------------------------------------------------------

/// ROC AUC as the Mann–Whitney statistic P(score⁺ > score⁻) + ½·P(tie),
/// computed by sorting with midrank tie correction. Errors when only one
/// class is present rather than returning NaN.
pub fn roc_auc<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "roc_auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks: tied scores share the average of their rank range.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Trapezoidal integral of the ROC curve with tied scores grouped into
/// single curve points. Algebraically equal to the midrank Mann–Whitney
/// form; kept as a second route for verification.
pub fn roc_auc_trapezoid<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let (mut prev_tp, mut prev_fp) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        auc += (fp - prev_fp) * (tp + prev_tp) / 2.0;
        prev_tp = tp;
        prev_fp = fp;
        i = j + 1;
    }
    Ok(auc / (pos as f64 * neg as f64))
}

/// Average precision: step-wise integral of the precision-recall curve over
/// distinct score thresholds (so it depends only on the score multiset, not
/// on sample order). Errors when there are no positives.
pub fn average_precision<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "average_precision",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average_precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut ap = 0.0;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / pos as f64;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

// ----------------------------------------------------------------------
// Confusion matrix and agreement
// ----------------------------------------------------------------------

/// K×K counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::invalid(format!("expected {} counts, got {}", k * k, counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion_matrix",
                detail: format!("{} vs {}", truth.len(), pred.len()),
            });
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.k || pred >= self.k {
            return Err(Error::invalid(format!(
                "class ({}, {}) out of range for k={}",
                truth, pred, self.k
            )));
        }
        self.counts[truth * self.k + pred] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.k).map(|i| self.at(i, i)).sum();
        diag as f64 / self.total() as f64
    }
}

/// Cohen's kappa with quadratic weights w_ij = (i−j)²/(K−1)²; expected counts
/// from the outer product of the marginals. Errors when both marginals put
/// all mass on a single class (chance agreement is then undefined).
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("empty confusion matrix".into()));
    }
    if k < 2 {
        return Err(Error::UndefinedMetric("kappa needs at least two classes".into()));
    }
    let mut row = vec![0.0f64; k];
    let mut col = vec![0.0f64; k];
    for (i, r) in row.iter_mut().enumerate() {
        for (j, c) in col.iter_mut().enumerate() {
            *r += cm.at(i, j) as f64;
            *c += cm.at(i, j) as f64;
        }
    }
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let t = total as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for (i, ri) in row.iter().enumerate() {
        for (j, cj) in col.iter().enumerate() {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_w;
            observed += w * cm.at(i, j) as f64;
            expected += w * ri * cj / t;
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedMetric(
            "degenerate marginals: a single class on both axes".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

// ----------------------------------------------------------------------
// Segmentation and image quality
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: f64,
    pub iou: f64,
    /// Both masks empty: scored 1 by convention.
    pub both_empty: bool,
}

pub fn segmentation_metrics(pred: &[bool], truth: &[bool]) -> Result<SegScores> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "segmentation_metrics",
            detail: format!("{} vs {}", pred.len(), truth.len()),
        });
    }
    let mut inter = 0u64;
    let mut a = 0u64;
    let mut b = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        if p {
            a += 1;
        }
        if t {
            b += 1;
        }
        if p && t {
            inter += 1;
        }
    }
    if a + b == 0 {
        return Ok(SegScores { dice: 1.0, iou: 1.0, both_empty: true });
    }
    let union = a + b - inter;
    let dice = 2.0 * inter as f64 / (a + b) as f64;
    let iou = inter as f64 / union as f64;
    Ok(SegScores { dice, iou, both_empty: false })
}

/// PSNR in dB and the global-moment SSIM over the whole image. Identical
/// images report PSNR as the +∞ sentinel.
pub fn image_quality<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, dynamic_range: f64) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "image_quality",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let n = a.numel() as f64;
    let mut mse = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        mse += d * d;
    }
    mse /= n;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (dynamic_range * dynamic_range / mse).log10()
    };
    Ok((psnr, ssim_global(a, b, dynamic_range)))
}

/// Single-window SSIM from whole-image moments.
pub fn ssim_global<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, dynamic_range: f64) -> f64 {
    let n = a.numel() as f64;
    let (mut ma, mut mb) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        ma += x.to_f64();
        mb += y.to_f64();
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x.to_f64() - ma, y.to_f64() - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    va /= n;
    vb /= n;
    cov /= n;
    let xi1 = 1e-4 * dynamic_range * dynamic_range;
    let xi2 = 9e-4 * dynamic_range * dynamic_range;
    ((2.0 * ma * mb + xi1) * (2.0 * cov + xi2)) / ((ma * ma + mb * mb + xi1) * (va + vb + xi2))
}

// ----------------------------------------------------------------------
// Aggregated classification reports
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// None when the class had a single label value (AUC undefined).
    pub auc: Option<f64>,
    /// None when the class had no positives (AP undefined, skipped).
    pub ap: Option<f64>,
    pub support: usize,
    /// Set when a zero denominator forced precision/recall/F1 to 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassReport>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean AUC over classes where it is defined.
    pub macro_auc: Option<f64>,
    /// Mean AP (mAP) over classes with positives.
    pub mean_average_precision: Option<f64>,
    pub accuracy: f64,
    /// Quadratic-weighted kappa; grading task only.
    pub kappa: Option<f64>,
}

impl MetricsReport {
    /// Headline scalar used for model selection: macro-F1 for multi-label,
    /// kappa for grading.
    pub fn headline(&self) -> f64 {
        self.kappa.unwrap_or(self.macro_f1)
    }

    pub const CSV_HEADER: &'static str =
        "class,precision,recall,f1,auc,ap,support,accuracy,kappa";

    /// One row per class plus a `macro` aggregate row; accuracy and kappa are
    /// populated on the aggregate row only.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},,\n",
                c.class,
                c.precision,
                c.recall,
                c.f1,
                opt(c.auc),
                opt(c.ap),
                c.support
            ));
        }
        out.push_str(&format!(
            "macro,{},{},{},{},{},,{},{}\n",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            opt(self.macro_auc),
            opt(self.mean_average_precision),
            self.accuracy,
            opt(self.kappa)
        ));
        out
    }
}

/// Multi-label metrics at a decision threshold (predicted positive when the
/// score is ≥ threshold). `scores` and `labels` are row-major N×K.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    n: usize,
    k: usize,
    threshold: f64,
) -> Result<MetricsReport> {
    if n == 0 {
        return Err(Error::EmptyInput { op: "classification_metrics" });
    }
    if scores.len() != n * k || labels.len() != n * k {
        return Err(Error::ShapeMismatch {
            op: "classification_metrics",
            detail: format!("want {}×{}, got {} scores / {} labels", n, k, scores.len(), labels.len()),
        });
    }
    let mut per_class = Vec::with_capacity(k);
    let mut correct = 0usize;
    for c in 0..k {
        let col_scores: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let col_labels: Vec<bool> = (0..n).map(|i| labels[i * k + c]).collect();
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&s, &y) in col_scores.iter().zip(&col_labels) {
            let pred = s >= threshold;
            if pred == y {
                correct += 1;
            }
            match (pred, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let mut zero_division = false;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            zero_division = true;
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            zero_division = true;
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let auc = roc_auc(&col_scores, &col_labels).ok();
        let ap = average_precision(&col_scores, &col_labels).ok();
        let support = col_labels.iter().filter(|&&y| y).count();
        per_class.push(ClassReport { class: c, precision, recall, f1, auc, ap, support, zero_division });
    }
    let kf = k as f64;
    let macro_precision = per_class.iter().map(|c| c.precision).sum::<f64>() / kf;
    let macro_recall = per_class.iter().map(|c| c.recall).sum::<f64>() / kf;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / kf;
    let defined_auc: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let defined_ap: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let macro_auc = if defined_auc.is_empty() {
        None
    } else {
        Some(defined_auc.iter().sum::<f64>() / defined_auc.len() as f64)
    };
    let mean_average_precision = if defined_ap.is_empty() {
        None
    } else {
        Some(defined_ap.iter().sum::<f64>() / defined_ap.len() as f64)
    };
    Ok(MetricsReport {
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        macro_auc,
        mean_average_precision,
        accuracy: correct as f64 / (n * k) as f64,
        kappa: None,
    })
}

/// Grading metrics: argmax prediction, per-grade one-vs-rest statistics,
/// overall accuracy and quadratic-weighted kappa.
pub fn grading_metrics(scores: &[f64], grades: &[usize], n: usize, k: usize) -> Result<MetricsReport> {
    if n == 0 {
        return Err(Error::EmptyInput { op: "grading_metrics" });
    }
    if scores.len() != n * k || grades.len() != n {
        return Err(Error::ShapeMismatch {
            op: "grading_metrics",
            detail: format!("want {}×{} scores and {} grades", n, k, n),
        });
    }
    for &g in grades {
        if g >= k {
            return Err(Error::invalid(format!("grade {} out of range 0..{}", g, k)));
        }
    }
    let preds: Vec<usize> = (0..n)
        .map(|i| {
            let row = &scores[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let cm = ConfusionMatrix::from_predictions(grades, &preds, k)?;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.at(c, c);
        let fp: u64 = (0..k).filter(|&i| i != c).map(|i| cm.at(i, c)).sum();
        let fn_: u64 = (0..k).filter(|&j| j != c).map(|j| cm.at(c, j)).sum();
        let mut zero_division = false;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            zero_division = true;
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            zero_division = true;
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let col_scores: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let col_labels: Vec<bool> = grades.iter().map(|&g| g == c).collect();
        let auc = roc_auc(&col_scores, &col_labels).ok();
        let ap = average_precision(&col_scores, &col_labels).ok();
        let support = col_labels.iter().filter(|&&y| y).count();
        per_class.push(ClassReport { class: c, precision, recall, f1, auc, ap, support, zero_division });
    }
    let kf = k as f64;
    let macro_precision = per_class.iter().map(|c| c.precision).sum::<f64>() / kf;
    let macro_recall = per_class.iter().map(|c| c.recall).sum::<f64>() / kf;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / kf;
    let defined_auc: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let defined_ap: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    Ok(MetricsReport {
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        macro_auc: if defined_auc.is_empty() {
            None
        } else {
            Some(defined_auc.iter().sum::<f64>() / defined_auc.len() as f64)
        },
        mean_average_precision: if defined_ap.is_empty() {
            None
        } else {
            Some(defined_ap.iter().sum::<f64>() / defined_ap.len() as f64)
        },
        accuracy: cm.accuracy(),
        kappa: Some(quadratic_weighted_kappa(&cm)?),
    })
}
