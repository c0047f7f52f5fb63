//! Training objectives: the composite two-stage total, task losses for
//! multi-label classification and grading, spectral fidelity losses, the
//! adversarial regularizer, and segmentation losses.
//!
//! Every loss is built on tape ops, so each is differentiable and passes the
//! finite-difference checks in this module's tests. Losses evaluated on an
//! eval tape (or on untracked tensors) are plain computations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Loss weighting and shaping constants. Defaults follow the training setup:
/// composite weights λ₁ = λ₂ = 0.2, asymmetric-loss focusing γ⁺ = 0, γ⁻ = 4
/// with probability margin 0.05, spectral total with SSIM/MSE weights of 0.5,
/// segmentation total with dice weight 0.4 and smoothing ξ = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cyc: f64,
    pub lambda_adv: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub asl_margin: f64,
    /// SSIM stabilizers ξ₁ = 1e-4·R², ξ₂ = 9e-4·R² with dynamic range R = 1.
    pub ssim_xi1: f64,
    pub ssim_xi2: f64,
    /// Smooth-dice constant.
    pub seg_xi: f64,
    pub dice_weight: f64,
    pub msi_ssim_weight: f64,
    pub msi_mse_weight: f64,
    /// Guard for the relative-L1 denominator in the cycle loss.
    pub cyc_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_cyc: 0.2,
            lambda_adv: 0.2,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            asl_margin: 0.05,
            ssim_xi1: 1e-4,
            ssim_xi2: 9e-4,
            seg_xi: 1.0,
            dice_weight: 0.4,
            msi_ssim_weight: 0.5,
            msi_mse_weight: 0.5,
            cyc_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_adv", self.lambda_adv),
            ("gamma_pos", self.gamma_pos),
            ("gamma_neg", self.gamma_neg),
            ("asl_margin", self.asl_margin),
            ("dice_weight", self.dice_weight),
            ("msi_ssim_weight", self.msi_ssim_weight),
            ("msi_mse_weight", self.msi_mse_weight),
        ];
        for (name, v) in nonneg {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        let positive = [
            ("ssim_xi1", self.ssim_xi1),
            ("ssim_xi2", self.ssim_xi2),
            ("seg_xi", self.seg_xi),
            ("cyc_eps", self.cyc_eps),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Asymmetric multi-label loss over logits with binary targets; mean over
/// labels and samples. Degenerates to binary cross-entropy when both gammas
/// and the margin are zero.
pub fn asymmetric_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: &Tensor<F>,
    targets: &[bool],
    cfg: &LossConfig,
) -> Result<Tensor<F>> {
    tape.asymmetric_loss(
        logits,
        targets,
        F::from_f64(cfg.gamma_pos),
        F::from_f64(cfg.gamma_neg),
        F::from_f64(cfg.asl_margin),
    )
}

/// Mean categorical cross-entropy of logits [N×K] against grades.
pub fn categorical_cross_entropy<F: Scalar>(
    tape: &mut Tape<F>,
    logits: &Tensor<F>,
    grades: &[usize],
) -> Result<Tensor<F>> {
    tape.cross_entropy_rows(logits, grades)
}

/// Relative-L1 reconstruction loss: mean over pixels of the channel-summed
/// |C − C′| / (C + ε). The reference image sits in the denominator, so the
/// guard ε keeps zero-valued pixels finite.
pub fn cycle_loss<F: Scalar>(
    tape: &mut Tape<F>,
    c: &Tensor<F>,
    c_rec: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<Tensor<F>> {
    if c.shape() != c_rec.shape() {
        return Err(Error::ShapeMismatch {
            op: "cycle_loss",
            detail: format!("{:?} vs {:?}", c.shape(), c_rec.shape()),
        });
    }
    let channels = *c.shape().last().ok_or(Error::EmptyInput { op: "cycle_loss" })?;
    let pixels = c.numel() / channels;
    let diff = tape.sub(c, c_rec)?;
    let num = tape.abs(&diff)?;
    let den = tape.add_scalar(c, F::from_f64(cfg.cyc_eps))?;
    let ratio = tape.div(&num, &den)?;
    let total = tape.sum(&ratio)?;
    tape.scale(&total, F::from_f64(1.0 / pixels as f64))
}

/// Squared L2 distance between two SRF weight matrices (summed over channels
/// and wavelengths).
pub fn srf_mse_loss<F: Scalar>(
    tape: &mut Tape<F>,
    m_true: &Tensor<F>,
    m_gen: &Tensor<F>,
) -> Result<Tensor<F>> {
    if m_true.shape() != m_gen.shape() {
        return Err(Error::ShapeMismatch {
            op: "srf_mse_loss",
            detail: format!("{:?} vs {:?}", m_true.shape(), m_gen.shape()),
        });
    }
    let d = tape.sub(m_true, m_gen)?;
    let sq = tape.mul(&d, &d)?;
    tape.sum(&sq)
}

/// Per-band structural dissimilarity from whole-image moments, summed over
/// wavelengths: Σ_λ [1 − SSIM_λ]. Inputs are H×W×|Λ| datacube tensors.
pub fn ssim_loss<F: Scalar>(
    tape: &mut Tape<F>,
    s_true: &Tensor<F>,
    s_pred: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<Tensor<F>> {
    if s_true.shape() != s_pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim_loss",
            detail: format!("{:?} vs {:?}", s_true.shape(), s_pred.shape()),
        });
    }
    let bands = *s_true.shape().last().ok_or(Error::EmptyInput { op: "ssim_loss" })?;
    let xi1 = F::from_f64(cfg.ssim_xi1);
    let xi2 = F::from_f64(cfg.ssim_xi2);
    let two = F::from_f64(2.0);
    let mut total: Option<Tensor<F>> = None;
    for b in 0..bands {
        let x = tape.slice_channels(s_true, b, b + 1)?;
        let y = tape.slice_channels(s_pred, b, b + 1)?;
        let mx = tape.mean(&x)?;
        let my = tape.mean(&y)?;
        let xx = tape.mul(&x, &x)?;
        let yy = tape.mul(&y, &y)?;
        let xy = tape.mul(&x, &y)?;
        let exx = tape.mean(&xx)?;
        let eyy = tape.mean(&yy)?;
        let exy = tape.mean(&xy)?;
        let mx2 = tape.mul(&mx, &mx)?;
        let my2 = tape.mul(&my, &my)?;
        let mxy = tape.mul(&mx, &my)?;
        let var_x = tape.sub(&exx, &mx2)?;
        let var_y = tape.sub(&eyy, &my2)?;
        let cov = tape.sub(&exy, &mxy)?;
        // (2 μμ′ + ξ₁)(2 σ_xy + ξ₂) / ((μ² + μ′² + ξ₁)(σ² + σ′² + ξ₂))
        let n1 = tape.scale(&mxy, two)?;
        let n1 = tape.add_scalar(&n1, xi1)?;
        let n2 = tape.scale(&cov, two)?;
        let n2 = tape.add_scalar(&n2, xi2)?;
        let num = tape.mul(&n1, &n2)?;
        let d1 = tape.add(&mx2, &my2)?;
        let d1 = tape.add_scalar(&d1, xi1)?;
        let d2 = tape.add(&var_x, &var_y)?;
        let d2 = tape.add_scalar(&d2, xi2)?;
        let den = tape.mul(&d1, &d2)?;
        let ssim = tape.div(&num, &den)?;
        let neg = tape.scale(&ssim, -F::one())?;
        let term = tape.add_scalar(&neg, F::one())?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyInput { op: "ssim_loss" })
}

/// Spectral synthesis total: L_cyc + 0.5·L_SSIM + 0.5·L_MSE (weights from
/// the config).
pub fn msi_total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    cyc: &Tensor<F>,
    ssim: &Tensor<F>,
    mse: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<Tensor<F>> {
    let ws = tape.scale(ssim, F::from_f64(cfg.msi_ssim_weight))?;
    let wm = tape.scale(mse, F::from_f64(cfg.msi_mse_weight))?;
    let s = tape.add(cyc, &ws)?;
    tape.add(&s, &wm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvSide {
    Generator,
    Discriminator,
}

/// Least-squares adversarial objective over score tensors. The generator
/// term drives fake scores toward 1 and ignores the real scores; the
/// discriminator term is the averaged (real−1)² and fake² pair.
pub fn adversarial_loss<F: Scalar>(
    tape: &mut Tape<F>,
    real_scores: &Tensor<F>,
    fake_scores: &Tensor<F>,
    side: AdvSide,
) -> Result<Tensor<F>> {
    let one = F::one();
    match side {
        AdvSide::Generator => {
            let shifted = tape.add_scalar(fake_scores, -one)?;
            let sq = tape.mul(&shifted, &shifted)?;
            tape.mean(&sq)
        }
        AdvSide::Discriminator => {
            let r = tape.add_scalar(real_scores, -one)?;
            let rsq = tape.mul(&r, &r)?;
            let rterm = tape.mean(&rsq)?;
            let fsq = tape.mul(fake_scores, fake_scores)?;
            let fterm = tape.mean(&fsq)?;
            let s = tape.add(&rterm, &fterm)?;
            tape.scale(&s, F::from_f64(0.5))
        }
    }
}

/// Stage-II composite: L_task + λ₁·L_cyc + λ₂·L_adv.
pub fn stage2_total<F: Scalar>(
    tape: &mut Tape<F>,
    task: &Tensor<F>,
    cyc: &Tensor<F>,
    adv: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<Tensor<F>> {
    let wc = tape.scale(cyc, F::from_f64(cfg.lambda_cyc))?;
    let wa = tape.scale(adv, F::from_f64(cfg.lambda_adv))?;
    let s = tape.add(task, &wc)?;
    tape.add(&s, &wa)
}

/// Segmentation losses over per-label masks laid out H×W×N. Predictions must
/// lie in [0, 1]; the cross-entropy clamps them away from zero before the
/// logarithm. Returns (cross-entropy, dice, total = ce + dice_weight·dice).
pub fn seg_losses<F: Scalar>(
    tape: &mut Tape<F>,
    pred: &Tensor<F>,
    truth: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "seg_losses",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    if pred.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "seg_losses",
            detail: format!("expected H×W×N masks, got {:?}", pred.shape()),
        });
    }
    let tol = F::from_f64(1e-9);
    if pred.data().iter().any(|&v| v < -tol || v > F::one() + tol) {
        return Err(Error::invalid("predictions must lie in [0, 1]"));
    }
    if truth.data().iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(Error::invalid("ground-truth masks must be binary"));
    }
    let (h, w, n) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let tiny = F::from_f64(1e-12);
    let xi = F::from_f64(cfg.seg_xi);

    // Clamp predictions to [tiny, 1] via a relu shift so ln stays finite;
    // gradient is the identity wherever pred > tiny.
    let shifted = tape.add_scalar(pred, -tiny)?;
    let relu = tape.relu(&shifted)?;
    let clamped = tape.add_scalar(&relu, tiny)?;

    // L_ce = −(1/HW) Σ_{h,w} Σ_n y ln ŷ
    let lp = tape.ln(&clamped)?;
    let masked = tape.mul(truth, &lp)?;
    let s = tape.sum(&masked)?;
    let ce = tape.scale(&s, F::from_f64(-1.0 / (h * w) as f64))?;

    // L_dice = 1 − (1/N) Σ_n (2 Σ yŷ + ξ) / (Σ (y + ŷ) + ξ)
    let mut acc: Option<Tensor<F>> = None;
    for c in 0..n {
        let p_n = tape.slice_channels(&clamped, c, c + 1)?;
        let y_n = tape.slice_channels(truth, c, c + 1)?;
        let prod = tape.mul(&y_n, &p_n)?;
        let inter = tape.sum(&prod)?;
        let sums_t = tape.add(&y_n, &p_n)?;
        let sums = tape.sum(&sums_t)?;
        let num = tape.scale(&inter, F::from_f64(2.0))?;
        let num = tape.add_scalar(&num, xi)?;
        let den = tape.add_scalar(&sums, xi)?;
        let frac = tape.div(&num, &den)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &frac)?,
            None => frac,
        });
    }
    let mean_frac = tape.scale(&acc.expect("n ≥ 1"), F::from_f64(1.0 / n as f64))?;
    let neg = tape.scale(&mean_frac, -F::one())?;
    let dice = tape.add_scalar(&neg, F::one())?;

    let wd = tape.scale(&dice, F::from_f64(cfg.dice_weight))?;
    let total = tape.add(&ce, &wd)?;
    Ok((ce, dice, total))
}
