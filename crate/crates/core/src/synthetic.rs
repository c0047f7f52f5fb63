//! Deterministic synthetic multimodal datasets with planted, localized,
//! modality-specific disease signatures, plus the small stand-in encoders
//! that map raw images to per-modality feature maps.
//!
//! Every label owns a Gaussian blob at a label-specific location. The blob
//! is planted into each modality scaled by the strength matrix, on top of a
//! base intensity and i.i.d. Gaussian noise; images are clamped at zero.
//! Labels sharing a primary modality sit at different lattice corners, so
//! separating them requires spatial attention rather than global pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ModalityBundle, MODALITY_COUNT};
use crate::image::{affine_warp, blur5, sharpen3};
use crate::params::{fnv1a_hex, init_normal, Binding, ParamGroup, ParamStore};
use crate::tensor::qmtf;
use crate::tensor::tape::ParamId;
use crate::{Tape, Tensor};

pub const BASE_INTENSITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Independent binary labels with long-tail marginals.
    Multilabel20,
    /// Ordinal grades 0..4 encoded as blob amplitude.
    Grading5,
}

impl LabelMode {
    pub fn class_count(&self) -> usize {
        match self {
            LabelMode::Multilabel20 => 20,
            LabelMode::Grading5 => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label_mode: LabelMode,
    /// classes×6 signal amplitudes; `None` uses the default planting scheme.
    #[serde(default)]
    pub strengths: Option<Vec<Vec<f64>>>,
    pub noise_level: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::invalid("synthetic config needs samples ≥ 1 and H, W ≥ 2"));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(Error::invalid("noise level must be ≥ 0"));
        }
        let k = self.label_mode.class_count();
        if let Some(s) = &self.strengths {
            if s.len() != k || s.iter().any(|row| row.len() != MODALITY_COUNT) {
                return Err(Error::invalid(format!(
                    "strength matrix must be {k}×{MODALITY_COUNT}"
                )));
            }
            if s.iter().flatten().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::invalid("strengths must be ≥ 0"));
            }
        }
        Ok(())
    }

    /// Effective strength matrix. The default multi-label scheme gives each
    /// label a primary modality (round robin) at amplitude 1 and a weak 0.3
    /// copy in the CFP channel; grading uses amplitude g/4 in every modality.
    pub fn strength_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(s) = &self.strengths {
            return s.clone();
        }
        let k = self.label_mode.class_count();
        match self.label_mode {
            LabelMode::Multilabel20 => (0..k)
                .map(|l| {
                    let mut row = vec![0.0; MODALITY_COUNT];
                    row[l % MODALITY_COUNT] = 1.0;
                    if l % MODALITY_COUNT != 0 {
                        row[0] = 0.3;
                    } else {
                        row[0] = 1.0;
                    }
                    row
                })
                .collect(),
            LabelMode::Grading5 => {
                (0..k).map(|g| vec![g as f64 / 4.0; MODALITY_COUNT]).collect()
            }
        }
    }
}

/// Blob center for a label: a 2×2 corner lattice indexed by label/6, plus a
/// small deterministic per-label jitter. Labels that share a modality
/// (label % 6) land on different corners.
fn label_center(label: usize, h: usize, w: usize) -> (f64, f64) {
    const LATTICE: [(f64, f64); 4] = [(0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7)];
    let slot = (label / MODALITY_COUNT) % LATTICE.len();
    let (fy, fx) = LATTICE[slot];
    let jitter = |x: u64| {
        let mut z = x.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x6a09e667f3bcc909);
        z ^= z >> 31;
        (z % 1000) as f64 / 1000.0 - 0.5
    };
    let jy = jitter(label as u64 * 2 + 1) * 0.12;
    let jx = jitter(label as u64 * 2 + 2) * 0.12;
    ((fy + jy) * (h as f64 - 1.0), (fx + jx) * (w as f64 - 1.0))
}

/// Unit-peak Gaussian blob pattern for a label.
pub fn label_pattern(label: usize, h: usize, w: usize) -> Tensor {
    let (cy, cx) = label_center(label, h, w);
    let sigma = 0.15 * h.min(w) as f64;
    Tensor::from_fn(&[h, w, 1], |i| {
        let y = (i / w) as f64;
        let x = (i % w) as f64;
        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

/// Ground-truth annotations for a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Multilabel(Vec<Vec<bool>>),
    Grades(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Multilabel(v) => v.len(),
            Labels::Grades(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: SyntheticConfig,
    /// Per sample: six H×W×1 modality images in the fixed modality order.
    pub images: Vec<Vec<Tensor>>,
    pub labels: Labels,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Content hash covering every pixel and label.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        for sample in &self.images {
            for img in sample {
                for &v in img.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.labels {
            Labels::Multilabel(rows) => {
                for row in rows {
                    for &b in row {
                        bytes.push(b as u8);
                    }
                }
            }
            Labels::Grades(gs) => {
                for &g in gs {
                    bytes.push(g as u8);
                }
            }
        }
        fnv1a_hex(&bytes)
    }

    /// Writes the QMTF tensors, the labels CSV and a manifest recording the
    /// config and seed.
    pub fn export(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, sample) in self.images.iter().enumerate() {
            for (m, img) in sample.iter().enumerate() {
                qmtf::write_file(&dir.join(format!("sample_{i:05}_m{m}.qmtf")), img)?;
            }
        }
        let k = self.cfg.label_mode.class_count();
        let mut csv = String::from("sample_id");
        match self.cfg.label_mode {
            LabelMode::Multilabel20 => {
                for c in 0..k {
                    csv.push_str(&format!(",label_{c}"));
                }
            }
            LabelMode::Grading5 => csv.push_str(",grade"),
        }
        csv.push('\n');
        match &self.labels {
            Labels::Multilabel(rows) => {
                for (i, row) in rows.iter().enumerate() {
                    csv.push_str(&i.to_string());
                    for &b in row {
                        csv.push_str(if b { ",1" } else { ",0" });
                    }
                    csv.push('\n');
                }
            }
            Labels::Grades(gs) => {
                for (i, &g) in gs.iter().enumerate() {
                    csv.push_str(&format!("{i},{g}\n"));
                }
            }
        }
        std::fs::write(dir.join("labels.csv"), csv)?;
        let manifest = serde_json::json!({
            "format": "retfuse-dataset",
            "version": 1,
            "config": self.cfg,
            "hash": self.hash(),
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Long-tail multi-label marginals (geometric decay, clamped).
pub fn label_marginal(label: usize) -> f64 {
    (0.5 * 0.85f64.powi(label as i32)).max(0.04)
}

const GRADE_MARGINALS: [f64; 5] = [0.42, 0.22, 0.16, 0.12, 0.08];

/// Generates the full dataset. Samples are independent given (seed, index),
/// so generation parallelizes over index ranges without changing results.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.label_mode.class_count();
    let strengths = cfg.strength_matrix();
    let patterns: Vec<Tensor> = (0..k).map(|l| label_pattern(l, h, w)).collect();

    let rows: Vec<(Vec<Tensor>, Vec<bool>, usize)> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
            let (active, grade): (Vec<bool>, usize) = match cfg.label_mode {
                LabelMode::Multilabel20 => {
                    let y: Vec<bool> = (0..k).map(|l| rng.gen_bool(label_marginal(l))).collect();
                    (y, 0)
                }
                LabelMode::Grading5 => {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let mut acc = 0.0;
                    let mut g = GRADE_MARGINALS.len() - 1;
                    for (gi, &p) in GRADE_MARGINALS.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            g = gi;
                            break;
                        }
                    }
                    let mut y = vec![false; k];
                    y[g] = true;
                    (y, g)
                }
            };
            let images: Vec<Tensor> = (0..MODALITY_COUNT)
                .map(|m| {
                    let mut img = vec![BASE_INTENSITY; h * w];
                    for (l, on) in active.iter().enumerate() {
                        if *on && strengths[l][m] > 0.0 {
                            for (px, pv) in img.iter_mut().zip(patterns[l].data()) {
                                *px += strengths[l][m] * pv;
                            }
                        }
                    }
                    for px in img.iter_mut() {
                        let noise: f64 = rng.sample(StandardNormal);
                        *px = (*px + cfg.noise_level * noise).max(0.0);
                    }
                    Tensor::from_vec(vec![h, w, 1], img).expect("image shape")
                })
                .collect();
            (images, active, grade)
        })
        .collect();

    let mut images = Vec::with_capacity(cfg.samples);
    let mut multilabel = Vec::new();
    let mut grades = Vec::new();
    for (imgs, y, g) in rows {
        images.push(imgs);
        match cfg.label_mode {
            LabelMode::Multilabel20 => multilabel.push(y),
            LabelMode::Grading5 => grades.push(g),
        }
    }
    let labels = match cfg.label_mode {
        LabelMode::Multilabel20 => Labels::Multilabel(multilabel),
        LabelMode::Grading5 => Labels::Grades(grades),
    };
    Ok(Dataset { cfg: cfg.clone(), images, labels })
}

// ----------------------------------------------------------------------
// Input perturbations
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Blur,
    Sharpen,
    Distort,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [PerturbKind::Blur, PerturbKind::Sharpen, PerturbKind::Distort];

    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::Blur => "blur",
            PerturbKind::Sharpen => "sharp",
            PerturbKind::Distort => "distortion",
        }
    }
}

/// Applies one perturbation: 5×5 Gaussian blur (σ = 1, reflect padding), the
/// 5-center 3×3 sharpening kernel, or a random small affine distortion
/// (shear ≤ 5°, scale ∈ [0.95, 1.05], translation ≤ 5% of the extent,
/// rotation ≤ 5°, bilinear resampling).
pub fn perturb_image(img: &Tensor, kind: PerturbKind, seed: u64) -> Result<Tensor> {
    match kind {
        PerturbKind::Blur => blur5(img),
        PerturbKind::Sharpen => sharpen3(img),
        PerturbKind::Distort => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let deg = std::f64::consts::PI / 180.0;
            let shear = rng.gen_range(-5.0..5.0) * deg;
            let scale = rng.gen_range(0.95..1.05);
            let rot = rng.gen_range(-5.0..5.0) * deg;
            let (h, w) = (img.shape()[0] as f64, img.shape()[1] as f64);
            let tx = rng.gen_range(-0.05..0.05) * w;
            let ty = rng.gen_range(-0.05..0.05) * h;
            // Output→source affine: rotation ∘ shear ∘ scale, plus offset.
            let (c, s) = (rot.cos(), rot.sin());
            let sh = shear.tan();
            // [a b; d e] = R(rot) · [1 sh; 0 1] · scale
            let a = c * scale;
            let b = (c * sh - s) * scale;
            let d = s * scale;
            let e = (s * sh + c) * scale;
            affine_warp(img, &[a, b, tx, d, e, ty])
        }
    }
}

// ----------------------------------------------------------------------
// Stand-in encoders and companions
// ----------------------------------------------------------------------

/// Two 1×1 conv + ReLU layers mapping a raw H×W×1 image to H×W×C features.
/// Frozen stubs register their parameters as non-trainable, so they receive
/// no gradient and never change during training.
///
/// Stubs stand in for encoders pretrained during the synthesis stage, so
/// they initialize close to a signal-preserving map (per-channel positive
/// gains and a near-identity mixing layer) rather than from white noise;
/// fine-tuning then adapts them rather than first having to rediscover the
/// input.
#[derive(Debug, Clone)]
pub struct EncoderStub {
    pub modality: usize,
    pub frozen: bool,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EncoderStub {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality: usize,
        channels: usize,
        frozen: bool,
    ) -> Result<Self> {
        let name = format!("enc.m{modality}");
        let trainable = !frozen;
        let gains = init_normal(rng, &[channels, 1], 0.15).map(|v| 1.0 + v);
        let mixing = init_normal(rng, &[channels, channels], 0.1);
        let near_identity = Tensor::from_fn(&[channels, channels], |i| {
            let (r, c) = (i / channels, i % channels);
            mixing.data()[i] + if r == c { 1.0 } else { 0.0 }
        });
        Ok(EncoderStub {
            modality,
            frozen,
            w1: store.add(format!("{name}.w1"), gains, trainable, ParamGroup::Main)?,
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[channels]), trainable, ParamGroup::Main)?,
            w2: store.add(format!("{name}.w2"), near_identity, trainable, ParamGroup::Main)?,
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[channels]), trainable, ParamGroup::Main)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        img: &Tensor,
        binding: Binding,
    ) -> Result<Tensor> {
        let w1 = store.tracked(tape, self.w1, binding)?;
        let b1 = store.tracked(tape, self.b1, binding)?;
        let w2 = store.tracked(tape, self.w2, binding)?;
        let b2 = store.tracked(tape, self.b2, binding)?;
        let x = tape.conv1x1(img, &w1, Some(&b1))?;
        let x = tape.relu(&x)?;
        let x = tape.conv1x1(&x, &w2, Some(&b2))?;
        tape.relu(&x)
    }
}

/// Per-modality feature extraction; errors when counts disagree.
pub fn encode_modalities(
    store: &ParamStore,
    tape: &mut Tape,
    images: &[Tensor],
    stubs: &[EncoderStub],
    binding: Binding,
) -> Result<ModalityBundle> {
    if images.len() != MODALITY_COUNT || stubs.len() != MODALITY_COUNT {
        return Err(Error::invalid(format!(
            "expected {} images and stubs, got {} and {}",
            MODALITY_COUNT,
            images.len(),
            stubs.len()
        )));
    }
    let features = images
        .iter()
        .zip(stubs)
        .map(|(img, stub)| stub.forward(store, tape, img, binding))
        .collect::<Result<Vec<_>>>()?;
    ModalityBundle::new(features)
}

/// Single shared 1×1 conv + ReLU used by the image-level fusion strategy:
/// raw synthesized images feed the calibration pipeline directly through
/// this shallow embedder (no per-modality encoders, no residual adapters).
#[derive(Debug, Clone)]
pub struct SharedEmbedder {
    pub frozen: bool,
    pub w: ParamId,
    pub b: ParamId,
}

impl SharedEmbedder {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: usize,
        frozen: bool,
    ) -> Result<Self> {
        let trainable = !frozen;
        let gains = init_normal(rng, &[channels, 1], 0.15).map(|v| 1.0 + v);
        Ok(SharedEmbedder {
            frozen,
            w: store.add("embed.shared.w", gains, trainable, ParamGroup::Main)?,
            b: store.add("embed.shared.b", Tensor::zeros(&[channels]), trainable, ParamGroup::Main)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        img: &Tensor,
        binding: Binding,
    ) -> Result<Tensor> {
        let w = store.tracked(tape, self.w, binding)?;
        let b = store.tracked(tape, self.b, binding)?;
        let x = tape.conv1x1(img, &w, Some(&b))?;
        tape.relu(&x)
    }
}

/// Frozen 1×1 conv mapping adapted features back to a single-channel image;
/// the reconstruction target of the fidelity losses.
#[derive(Debug, Clone)]
pub struct DecoderStub {
    pub modality: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl DecoderStub {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality: usize,
        channels: usize,
    ) -> Result<Self> {
        let name = format!("dec.m{modality}");
        Ok(DecoderStub {
            modality,
            w: store.add(
                format!("{name}.w"),
                init_normal(rng, &[1, channels], 1.0 / (channels as f64).sqrt()),
                false,
                ParamGroup::Main,
            )?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1]), false, ParamGroup::Main)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        features: &Tensor,
        binding: Binding,
    ) -> Result<Tensor> {
        let w = store.tracked(tape, self.w, binding)?;
        let b = store.tracked(tape, self.b, binding)?;
        tape.conv1x1(features, &w, Some(&b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::roc_auc;

    fn small_cfg(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            samples: 48,
            height: 8,
            width: 8,
            channels: 4,
            label_mode: LabelMode::Multilabel20,
            strengths: None,
            noise_level: 0.2,
            seed,
        }
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let a = generate_dataset(&small_cfg(7)).unwrap();
        let b = generate_dataset(&small_cfg(7)).unwrap();
        assert_eq!(a.hash(), b.hash());
        for (sa, sb) in a.images.iter().zip(&b.images) {
            for (ia, ib) in sa.iter().zip(sb) {
                assert_eq!(ia.data(), ib.data());
            }
        }
        let c = generate_dataset(&small_cfg(8)).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn null_signal_gives_chance_auc_for_matched_filter() {
        let mut cfg = small_cfg(9);
        cfg.samples = 200;
        cfg.strengths = Some(vec![vec![0.0; MODALITY_COUNT]; 20]);
        let data = generate_dataset(&cfg).unwrap();
        let Labels::Multilabel(labels) = &data.labels else { panic!() };
        // Matched filter for label 0 on its primary modality.
        let pattern = label_pattern(0, 8, 8);
        let mut aucs = Vec::new();
        for label in 0..3 {
            let scores: Vec<f64> = data
                .images
                .iter()
                .map(|imgs| {
                    imgs[label % MODALITY_COUNT]
                        .data()
                        .iter()
                        .zip(label_pattern(label, 8, 8).data())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let y: Vec<bool> = labels.iter().map(|row| row[label]).collect();
            if y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
                aucs.push(roc_auc(&scores, &y).unwrap());
            }
        }
        let _ = pattern;
        for auc in aucs {
            assert!((auc - 0.5).abs() < 0.15, "null-signal AUC should hover near 0.5, got {auc}");
        }
    }

    #[test]
    fn planted_signal_recoverable_by_linear_probe() {
        // Strength ≥ 5× noise: the matched filter on the signal modality
        // separates the label at AUC > 0.9 across seeds.
        for seed in 0..5 {
            let mut cfg = small_cfg(100 + seed);
            cfg.samples = 160;
            cfg.noise_level = 0.2; // default strengths plant at 1.0 = 5×
            let data = generate_dataset(&cfg).unwrap();
            let Labels::Multilabel(labels) = &data.labels else { panic!() };
            for label in [0usize, 1, 7] {
                let modality = label % MODALITY_COUNT;
                let pat = label_pattern(label, 8, 8);
                let scores: Vec<f64> = data
                    .images
                    .iter()
                    .map(|imgs| {
                        imgs[modality].data().iter().zip(pat.data()).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let y: Vec<bool> = labels.iter().map(|row| row[label]).collect();
                if y.iter().filter(|&&v| v).count() >= 3 && y.iter().any(|&v| !v) {
                    let auc = roc_auc(&scores, &y).unwrap();
                    assert!(auc > 0.9, "seed {seed} label {label}: probe AUC {auc}");
                }
            }
        }
    }

    #[test]
    fn masking_the_signal_modality_kills_the_probe() {
        // A label whose only strong signal lives in modality m loses its
        // matched-filter signal when probing a different modality.
        let mut cfg = small_cfg(33);
        cfg.samples = 200;
        let data = generate_dataset(&cfg).unwrap();
        let Labels::Multilabel(labels) = &data.labels else { panic!() };
        let label = 7; // primary modality 1, weak CFP copy
        let pat = label_pattern(label, 8, 8);
        let y: Vec<bool> = labels.iter().map(|row| row[label]).collect();
        let probe = |modality: usize| -> f64 {
            let scores: Vec<f64> = data
                .images
                .iter()
                .map(|imgs| imgs[modality].data().iter().zip(pat.data()).map(|(a, b)| a * b).sum())
                .collect();
            roc_auc(&scores, &y).unwrap()
        };
        let on_signal = probe(1);
        let off_signal = probe(3); // no planted copy of label 7 in modality 3
        assert!(on_signal > 0.9, "signal-modality probe {on_signal}");
        assert!(off_signal < on_signal - 0.2, "off-modality probe {off_signal} vs {on_signal}");
    }

    #[test]
    fn grading_mode_plants_ordinal_amplitudes() {
        let cfg = SyntheticConfig {
            samples: 120,
            height: 8,
            width: 8,
            channels: 4,
            label_mode: LabelMode::Grading5,
            strengths: None,
            noise_level: 0.1,
            seed: 5,
        };
        let data = generate_dataset(&cfg).unwrap();
        let Labels::Grades(grades) = &data.labels else { panic!() };
        assert!(grades.iter().all(|&g| g < 5));
        // Mean image intensity grows with grade.
        let mut sums = vec![(0.0, 0usize); 5];
        for (imgs, &g) in data.images.iter().zip(grades) {
            let m: f64 = imgs[0].data().iter().sum::<f64>() / 64.0;
            sums[g].0 += m;
            sums[g].1 += 1;
        }
        let means: Vec<f64> =
            sums.iter().map(|&(s, n)| if n > 0 { s / n as f64 } else { f64::NAN }).collect();
        for g in 1..5 {
            if sums[g].1 >= 3 && sums[g - 1].1 >= 3 {
                assert!(means[g] > means[g - 1] - 0.02, "grade {g}: {means:?}");
            }
        }
    }

    #[test]
    fn perturbations_behave_like_their_kernels() {
        let img = Tensor::full(&[8, 8, 1], 0.7);
        let b = perturb_image(&img, PerturbKind::Blur, 0).unwrap();
        let s = perturb_image(&img, PerturbKind::Sharpen, 0).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(s.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // Distortion is deterministic per seed and differs across seeds.
        let textured = label_pattern(3, 8, 8);
        let d1 = perturb_image(&textured, PerturbKind::Distort, 11).unwrap();
        let d2 = perturb_image(&textured, PerturbKind::Distort, 11).unwrap();
        let d3 = perturb_image(&textured, PerturbKind::Distort, 12).unwrap();
        assert_eq!(d1.data(), d2.data());
        assert_ne!(d1.data(), d3.data());

        let tiny = Tensor::zeros(&[4, 4, 1]);
        assert!(perturb_image(&tiny, PerturbKind::Blur, 0).is_err());
    }

    #[test]
    fn encoder_stub_contracts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stubs: Vec<EncoderStub> = (0..MODALITY_COUNT)
            .map(|m| EncoderStub::build(&mut store, &mut rng, m, 4, m >= 4).unwrap())
            .collect();

        // Zero image through zero-bias stubs → zero bundle.
        let mut tape = Tape::eval();
        let zeros: Vec<Tensor> = (0..6).map(|_| Tensor::zeros(&[6, 6, 1])).collect();
        let bundle = encode_modalities(&store, &mut tape, &zeros, &stubs, Binding::Eval).unwrap();
        for m in 0..6 {
            assert!(bundle.feature(m).data().iter().all(|&v| v == 0.0));
        }

        // Frozen stubs receive no gradient.
        let mut tape = Tape::new();
        let img = label_pattern(2, 6, 6);
        let images: Vec<Tensor> = (0..6).map(|_| img.clone()).collect();
        let bundle =
            encode_modalities(&store, &mut tape, &images, &stubs, Binding::Train(ParamGroup::Main))
                .unwrap();
        // Loss spans a trainable and a frozen branch: only the former may
        // receive gradients.
        let f5 = bundle.feature(5).clone();
        let f0 = bundle.feature(0).clone();
        let both = tape.add(&f5, &f0).unwrap();
        let sq = tape.mul(&both, &both).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.param(stubs[5].w1).is_none(), "frozen stub gradient must be absent");
        assert!(grads.param(stubs[0].w1).is_some());

        // Trainable stub 0 does get a gradient through its own feature.
        let mut tape = Tape::new();
        let bundle =
            encode_modalities(&store, &mut tape, &images, &stubs, Binding::Train(ParamGroup::Main))
                .unwrap();
        let f0 = bundle.feature(0).clone();
        let sq = tape.mul(&f0, &f0).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.param(stubs[0].w1).is_some());

        // Two-layer composition oracle.
        let mut tape = Tape::eval();
        let out = stubs[0].forward(&store, &mut tape, &img, Binding::Eval).unwrap();
        let w1 = store.value(stubs[0].w1).clone();
        let w2 = store.value(stubs[0].w2).clone();
        let h1 = tape.conv1x1(&img, &w1, Some(store.value(stubs[0].b1))).unwrap();
        let h1 = tape.relu(&h1).unwrap();
        let h2 = tape.conv1x1(&h1, &w2, Some(store.value(stubs[0].b2))).unwrap();
        let h2 = tape.relu(&h2).unwrap();
        assert_eq!(out.data(), h2.data());

        // Count mismatch errors.
        assert!(encode_modalities(&store, &mut tape, &zeros[..5].to_vec(), &stubs, Binding::Eval).is_err());
    }

    #[test]
    fn export_writes_expected_layout() {
        let mut cfg = small_cfg(3);
        cfg.samples = 2;
        let data = generate_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("retfuse-ds-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        data.export(&dir).unwrap();
        assert!(dir.join("sample_00000_m0.qmtf").exists());
        assert!(dir.join("sample_00001_m5.qmtf").exists());
        let csv = std::fs::read_to_string(dir.join("labels.csv")).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("sample_id,label_0,"));
        assert_eq!(header.split(',').count(), 21);
        assert_eq!(lines.count(), 2);
        let back: Tensor = qmtf::read_file(&dir.join("sample_00000_m0.qmtf")).unwrap();
        assert_eq!(back.data(), data.images[0][0].data());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
