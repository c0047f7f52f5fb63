//! Optimization: Adam with cosine-annealed learning rate, mini-batch
//! training of the full system (encoders + calibration pipeline + fidelity
//! heads), fusion-strategy and node/modality ablation switches, holdout
//! evaluation and stratified k-fold cross-validation.
//!
//! Batches are data-parallel: each sample runs forward/backward on its own
//! tape and the per-sample gradients are reduced in sample order, so results
//! are bit-identical regardless of worker scheduling.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    AttentionTrace, FusionConfig, FusionModel, ModalityBundle, ModalityMask, NodeMask,
    MODALITY_COUNT,
};
use crate::metrics::{classification_metrics, grading_metrics, MetricsReport};
use crate::objectives::{adversarial_loss, cycle_loss, stage2_total, AdvSide, LossConfig};
use crate::params::{init_normal, Binding, ParamGroup, ParamStore};
use crate::synthetic::{
    encode_modalities, perturb_image, Dataset, DecoderStub, EncoderStub, Labels, PerturbKind,
    SharedEmbedder,
};
use crate::tensor::tape::ParamId;
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multilabel,
    Grading,
}

/// Table-6 style fusion strategy switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionStrategy {
    /// Unfrozen: encoder (or embedder) parameters train with the pipeline.
    pub unfrozen_encoders: bool,
    /// Feature-level: per-modality encoders feed the pipeline; image-level:
    /// raw images enter through a single shared shallow embedder.
    pub feature_level: bool,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        FusionStrategy { unfrozen_encoders: true, feature_level: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub task: TaskKind,
    pub strategy: FusionStrategy,
    pub modality_mask: [bool; MODALITY_COUNT],
    pub nodes: NodeMask,
    /// Squeeze-and-excitation reduction ratio.
    pub reduction: usize,
    pub base_lr: f64,
    pub grad_clip: f64,
    /// Held-out fraction for single-split training.
    pub val_fraction: f64,
    /// Cross-validation folds for `cross_validate`; 1 degenerates to
    /// train = test (allowed for smoke tests, flagged in the outcome).
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            task: TaskKind::Multilabel,
            strategy: FusionStrategy::default(),
            modality_mask: [true; MODALITY_COUNT],
            nodes: NodeMask::all(),
            reduction: 16,
            base_lr: 1e-4,
            grad_clip: 10.0,
            val_fraction: 0.2,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be ≥ 1"));
        }
        ModalityMask(self.modality_mask).validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        if self.folds == 0 {
            return Err(Error::invalid("folds must be ≥ 1"));
        }
        if self.base_lr < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::invalid("base_lr ≥ 0 and grad_clip > 0 required"));
        }
        Ok(())
    }

    pub fn mask(&self) -> ModalityMask {
        ModalityMask(self.modality_mask)
    }
}

// ----------------------------------------------------------------------
// Adversarial scorer
// ----------------------------------------------------------------------

/// Tiny two-conv scorer over reconstructed single-channel images; trained in
/// alternation with the main pipeline.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

const DISC_HIDDEN: usize = 8;

impl Discriminator {
    pub fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Discriminator {
            w1: store.add("disc.w1", init_normal(rng, &[DISC_HIDDEN, 1], 0.8), true, ParamGroup::Disc)?,
            b1: store.add("disc.b1", Tensor::zeros(&[DISC_HIDDEN]), true, ParamGroup::Disc)?,
            w2: store.add(
                "disc.w2",
                init_normal(rng, &[1, DISC_HIDDEN], 1.0 / (DISC_HIDDEN as f64).sqrt()),
                true,
                ParamGroup::Disc,
            )?,
            b2: store.add("disc.b2", Tensor::zeros(&[1]), true, ParamGroup::Disc)?,
        })
    }

    /// Scalar realism score for an H×W×1 image.
    pub fn score(
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
        tape.mean(&x)
    }
}

// ----------------------------------------------------------------------
// The trainable system
// ----------------------------------------------------------------------

/// Modalities whose encoders are fine-tuned under fidelity regularization
/// (both FFA phases and MSI).
pub const FIDELITY_MODALITIES: [usize; 3] = [1, 2, 3];

/// (modality index, non-negative reference image, reconstruction).
pub type FidelityPair = (usize, Tensor, Tensor);

/// Floor for relative-L1 reference pixels: synthetic images are clamped at
/// zero, and a zero denominator (guarded only by ε) would let a handful of
/// dark pixels dominate the fidelity term.
pub const FIDELITY_REF_FLOOR: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct System {
    pub fusion: FusionModel,
    pub encoders: Vec<EncoderStub>,
    pub embedder: Option<SharedEmbedder>,
    pub decoders: Vec<DecoderStub>,
    pub discriminator: Option<Discriminator>,
    pub store: ParamStore,
    pub strategy: FusionStrategy,
    pub mask: ModalityMask,
    pub task: TaskKind,
    pub labels: usize,
    pub fidelity: bool,
}

impl System {
    /// Builds the full system deterministically from the seed. Fidelity
    /// heads (decoders + discriminator) exist only when a fidelity weight is
    /// nonzero and the strategy is feature-level.
    pub fn build(
        height: usize,
        width: usize,
        channels: usize,
        cfg: &TrainConfig,
        loss_cfg: &LossConfig,
    ) -> Result<System> {
        cfg.validate()?;
        loss_cfg.validate()?;
        let labels = match cfg.task {
            TaskKind::Multilabel => 20,
            TaskKind::Grading => 5,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a7e);
        let frozen = !cfg.strategy.unfrozen_encoders;
        let mut encoders = Vec::new();
        let mut embedder = None;
        if cfg.strategy.feature_level {
            for m in 0..MODALITY_COUNT {
                encoders.push(EncoderStub::build(&mut store, &mut rng, m, channels, frozen)?);
            }
        } else {
            embedder = Some(SharedEmbedder::build(&mut store, &mut rng, channels, frozen)?);
        }
        let fusion = FusionModel::build(
            FusionConfig {
                height,
                width,
                channels,
                labels,
                reduction: cfg.reduction,
                nodes: cfg.nodes,
            },
            &mut store,
            &mut rng,
        )?;
        let fidelity = cfg.strategy.feature_level
            && (loss_cfg.lambda_cyc > 0.0 || loss_cfg.lambda_adv > 0.0);
        let mut decoders = Vec::new();
        let mut discriminator = None;
        if fidelity {
            for &m in &FIDELITY_MODALITIES {
                decoders.push(DecoderStub::build(&mut store, &mut rng, m, channels)?);
            }
            if loss_cfg.lambda_adv > 0.0 {
                discriminator = Some(Discriminator::build(&mut store, &mut rng)?);
            }
        }
        Ok(System {
            fusion,
            encoders,
            embedder,
            decoders,
            discriminator,
            store,
            strategy: cfg.strategy,
            mask: cfg.mask(),
            task: cfg.task,
            labels,
            fidelity,
        })
    }

    fn bundle(
        &self,
        tape: &mut Tape,
        images: &[Tensor],
        binding: Binding,
    ) -> Result<ModalityBundle> {
        if self.strategy.feature_level {
            encode_modalities(&self.store, tape, images, &self.encoders, binding)
        } else {
            let embedder = self.embedder.as_ref().expect("image-level strategy has an embedder");
            let features = images
                .iter()
                .map(|img| embedder.forward(&self.store, tape, img, binding))
                .collect::<Result<Vec<_>>>()?;
            ModalityBundle::new(features)
        }
    }

    /// Forward pass for one sample. Returns the logits plus, when fidelity
    /// regularization is active, the per-modality (reference, reconstruction)
    /// pairs read from the adapted feature slices.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        images: &[Tensor],
        binding: Binding,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<(Tensor, Vec<FidelityPair>)> {
        let bundle = self.bundle(tape, images, binding)?;
        // Feature-level fusion runs the residual-adapter module; image-level
        // fusion feeds the embedded images straight into the calibration
        // pipeline (masked slots zero-filled either way).
        let h_sc = if self.strategy.feature_level {
            self.fusion.mffm_fuse(&self.store, tape, &bundle, self.mask, binding)?
        } else {
            let (h, w, c) = bundle.dims();
            let zero = Tensor::zeros(&[h, w, c]);
            let parts: Vec<Tensor> = (0..MODALITY_COUNT)
                .map(|m| if self.mask.is_active(m) { bundle.feature(m).clone() } else { zero.clone() })
                .collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            tape.concat_channels(&refs)?
        };
        let logits =
            self.fusion.forward_from_hsc(&self.store, tape, &h_sc, &bundle, self.mask, binding, trace)?;
        let mut fidelity = Vec::new();
        if self.fidelity && binding != Binding::Eval {
            let c = bundle.dims().2;
            for (dec, &m) in self.decoders.iter().zip(&FIDELITY_MODALITIES) {
                if !self.mask.is_active(m) {
                    continue;
                }
                let slice = tape.slice_channels(&h_sc, m * c, (m + 1) * c)?;
                let recon = dec.forward(&self.store, tape, &slice, binding)?;
                // Relative-L1 references must stay away from the
                // denominator singularity.
                let reference = images[m].map(|v| v.max(FIDELITY_REF_FLOOR));
                fidelity.push((m, reference, recon));
            }
        }
        Ok((logits, fidelity))
    }

    /// Pooled pre-head feature vector for a sample (embedding export), with
    /// an optional attention trace.
    pub fn embed(
        &self,
        images: &[Tensor],
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::eval();
        let bundle = self.bundle(&mut tape, images, Binding::Eval)?;
        let h_sc = self.fusion.mffm_fuse(&self.store, &mut tape, &bundle, self.mask, Binding::Eval)?;
        let y = self.fusion.head_input_from_hsc(
            &self.store,
            &mut tape,
            &h_sc,
            &bundle,
            self.mask,
            Binding::Eval,
            trace,
        )?;
        let pooled = tape.global_avg_pool(&y)?;
        Ok(pooled.into_data())
    }
}

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

/// Per-parameter first/second moment accumulators with bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: HashMap<usize, Vec<f64>>,
    v: HashMap<usize, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState { beta1: 0.5, beta2: 0.999, eps: 1e-8, step: 0, m: HashMap::new(), v: HashMap::new() }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers keyed by parameter id; ordered so reductions and norm
/// computations visit entries deterministically.
pub type GradAccum = BTreeMap<usize, Vec<f64>>;

/// Bias-corrected Adam update over the given parameters; parameters without
/// a gradient entry are left untouched.
pub fn adam_step(
    store: &mut ParamStore,
    ids: &[ParamId],
    grads: &GradAccum,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for &id in ids {
        let Some(g) = grads.get(&id.0) else { continue };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let n = g.len();
        if store.value(id).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} grads vs {} params", n, store.value(id).numel()),
            });
        }
        let m = state.m.entry(id.0).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(id.0).or_insert_with(|| vec![0.0; n]);
        let mut value = store.value(id).detached();
        {
            let data = value.data_mut();
            for i in 0..n {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
            }
        }
        store.set_value(id, value);
    }
    Ok(())
}

/// Cosine annealing: base · (1 + cos(π·step/total)) / 2.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid(format!("step {step} outside 0..={total_steps}")));
    }
    Ok(base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

fn global_clip(grads: &mut GradAccum, max_norm: f64) {
    let mut sq = 0.0;
    for g in grads.values() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

// ----------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------

fn multilabel_targets(labels: &Labels, idx: &[usize], k: usize) -> Vec<bool> {
    let Labels::Multilabel(rows) = labels else { panic!("task/label mode mismatch") };
    let mut out = Vec::with_capacity(idx.len() * k);
    for &i in idx {
        out.extend_from_slice(&rows[i]);
    }
    out
}

fn grade_targets(labels: &Labels, idx: &[usize]) -> Vec<usize> {
    let Labels::Grades(g) = labels else { panic!("task/label mode mismatch") };
    idx.iter().map(|&i| g[i]).collect()
}

/// Scores the system over a sample subset; optionally perturbs every
/// modality image first (seeded per sample and modality). Returns the
/// report plus the raw N×K score matrix.
pub fn evaluate(
    system: &System,
    data: &Dataset,
    idx: &[usize],
    perturb: Option<(PerturbKind, u64)>,
) -> Result<(MetricsReport, Vec<f64>)> {
    let k = system.labels;
    let rows: Vec<Result<Vec<f64>>> = idx
        .par_iter()
        .map(|&i| {
            let mut images: Vec<Tensor> = data.images[i].clone();
            if let Some((kind, seed)) = perturb {
                for (m, img) in images.iter_mut().enumerate() {
                    *img = perturb_image(img, kind, seed ^ ((i as u64) << 3) ^ m as u64)?;
                }
            }
            let mut tape = Tape::eval();
            let (logits, _) = system.forward_sample(&mut tape, &images, Binding::Eval, None)?;
            let row = match system.task {
                TaskKind::Multilabel => {
                    logits.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect::<Vec<f64>>()
                }
                TaskKind::Grading => {
                    let mx = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.data().iter().map(|&x| (x - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    exps.iter().map(|&e| e / z).collect()
                }
            };
            Ok(row)
        })
        .collect();
    let mut scores = Vec::with_capacity(idx.len() * k);
    for row in rows {
        scores.extend_from_slice(&row?);
    }
    let report = match system.task {
        TaskKind::Multilabel => {
            let targets = multilabel_targets(&data.labels, idx, k);
            classification_metrics(&scores, &targets, idx.len(), k, 0.5)?
        }
        TaskKind::Grading => {
            let grades = grade_targets(&data.labels, idx);
            grading_metrics(&scores, &grades, idx.len(), k)?
        }
    };
    Ok((report, scores))
}

// ----------------------------------------------------------------------
// Training loop
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Validation report at the best epoch (the restored checkpoint).
    pub report: MetricsReport,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_metric, r.lr));
    }
    out
}

/// Deterministic holdout split: shuffles 0..n with the seed, takes the last
/// `val_fraction` as validation.
pub fn holdout_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_9117);
    idx.shuffle(&mut rng);
    let val_len = ((n as f64) * val_fraction).round() as usize;
    let val_len = val_len.min(n.saturating_sub(1));
    let train = idx[..n - val_len].to_vec();
    let val = idx[n - val_len..].to_vec();
    (train, val)
}

struct SampleGrads {
    loss: f64,
    grads: crate::Gradients,
    /// Detached (reference, reconstruction) pairs for the discriminator step.
    recons: Vec<(Tensor, Tensor)>,
}

/// Trains the system in place, minimizing the composite objective (task +
/// fidelity terms when enabled). Records per-epoch loss, validation metric
/// and learning rate; restores the best-validation parameters afterwards.
pub fn train(
    system: &mut System,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }
    if cfg.batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            data.len()
        )));
    }
    let batch = cfg.batch_size.min(train_idx.len());
    let steps_per_epoch = train_idx.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let main_ids = system.store.group_ids(ParamGroup::Main);
    let disc_ids = system.store.group_ids(ParamGroup::Disc);
    let mut opt_main = OptimizerState::new();
    let mut opt_disc = OptimizerState::new();

    let k = system.labels;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>, MetricsReport)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe_90c4 ^ (epoch as u64) << 8);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_lr = cfg.base_lr;

        for chunk in order.chunks(batch) {
            let lr = cosine_lr(global_step, total_steps, cfg.base_lr)?;
            epoch_lr = lr;

            // Main step: per-sample forward/backward in parallel, ordered
            // reduce.
            let results: Vec<Result<SampleGrads>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let (logits, fidelity) = system.forward_sample(
                        &mut tape,
                        &data.images[i],
                        Binding::Train(ParamGroup::Main),
                        None,
                    )?;
                    let row = tape.reshape(&logits, vec![1, k])?;
                    let task = match (system.task, &data.labels) {
                        (TaskKind::Multilabel, Labels::Multilabel(rows)) => {
                            crate::objectives::asymmetric_loss(&mut tape, &row, &rows[i], loss_cfg)?
                        }
                        (TaskKind::Grading, Labels::Grades(gs)) => {
                            crate::objectives::categorical_cross_entropy(&mut tape, &row, &[gs[i]])?
                        }
                        _ => return Err(Error::invalid("task does not match dataset label mode")),
                    };
                    let total = if fidelity.is_empty() {
                        task
                    } else {
                        let mut cyc_sum: Option<Tensor> = None;
                        let mut adv_sum: Option<Tensor> = None;
                        for (_, reference, recon) in &fidelity {
                            let c = cycle_loss(&mut tape, reference, recon, loss_cfg)?;
                            cyc_sum = Some(match cyc_sum {
                                Some(t) => tape.add(&t, &c)?,
                                None => c,
                            });
                            if let Some(disc) = &system.discriminator {
                                let score = disc.score(
                                    &system.store,
                                    &mut tape,
                                    recon,
                                    Binding::Train(ParamGroup::Main),
                                )?;
                                let fake = tape.reshape(&score, vec![1])?;
                                let g = adversarial_loss(&mut tape, &fake, &fake, AdvSide::Generator)?;
                                adv_sum = Some(match adv_sum {
                                    Some(t) => tape.add(&t, &g)?,
                                    None => g,
                                });
                            }
                        }
                        let zero = Tensor::scalar(0.0);
                        let cyc = cyc_sum.unwrap_or_else(|| zero.clone());
                        let adv = adv_sum.unwrap_or(zero);
                        stage2_total(&mut tape, &task, &cyc, &adv, loss_cfg)?
                    };
                    let loss_value = total.item();
                    let recons = fidelity
                        .iter()
                        .map(|(_, reference, recon)| (reference.detached(), recon.detached()))
                        .collect();
                    let grads = tape.backward(&total)?;
                    Ok(SampleGrads { loss: loss_value, grads, recons })
                })
                .collect();

            let mut accum: GradAccum = GradAccum::new();
            let mut batch_loss = 0.0;
            let mut batch_recons: Vec<Vec<(Tensor, Tensor)>> = Vec::with_capacity(chunk.len());
            let n = chunk.len() as f64;
            for r in results {
                let s = r.map_err(|e| {
                    Error::invalid(format!("non-finite training loss at epoch {epoch}: {e}"))
                })?;
                batch_loss += s.loss / n;
                for &id in &main_ids {
                    if let Some(g) = s.grads.param(id) {
                        let acc = accum.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v / n;
                        }
                    }
                }
                batch_recons.push(s.recons);
            }
            if !batch_loss.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite training loss at epoch {epoch} (value {batch_loss})"
                )));
            }
            global_clip(&mut accum, cfg.grad_clip);
            adam_step(&mut system.store, &main_ids, &accum, &mut opt_main, lr)?;
            epoch_loss += batch_loss * chunk.len() as f64;

            // Simultaneous discriminator step: scores the reconstructions
            // the main step just produced (pre-update parameters). With all
            // fidelity modalities masked there is nothing to score.
            let have_recons = batch_recons.iter().any(|r| !r.is_empty());
            if system.discriminator.is_some() && !disc_ids.is_empty() && have_recons {
                let disc = system.discriminator.as_ref().expect("checked");
                let mut d_accum: GradAccum = GradAccum::new();
                for recons in batch_recons.iter().filter(|r| !r.is_empty()) {
                    let mut tape = Tape::new();
                    let mut loss_sum: Option<Tensor> = None;
                    for (reference, recon) in recons {
                        let real = disc.score(
                            &system.store,
                            &mut tape,
                            reference,
                            Binding::Train(ParamGroup::Disc),
                        )?;
                        let fake = disc.score(
                            &system.store,
                            &mut tape,
                            recon,
                            Binding::Train(ParamGroup::Disc),
                        )?;
                        let real = tape.reshape(&real, vec![1])?;
                        let fake = tape.reshape(&fake, vec![1])?;
                        let d = adversarial_loss(&mut tape, &real, &fake, AdvSide::Discriminator)?;
                        loss_sum = Some(match loss_sum {
                            Some(t) => tape.add(&t, &d)?,
                            None => d,
                        });
                    }
                    let total = loss_sum.ok_or(Error::EmptyInput { op: "disc_step" })?;
                    let grads = tape.backward(&total)?;
                    for &id in &disc_ids {
                        if let Some(g) = grads.param(id) {
                            let acc = d_accum.entry(id.0).or_insert_with(|| vec![0.0; g.len()]);
                            for (a, v) in acc.iter_mut().zip(g) {
                                *a += v / n;
                            }
                        }
                    }
                }
                global_clip(&mut d_accum, cfg.grad_clip);
                adam_step(&mut system.store, &disc_ids, &d_accum, &mut opt_disc, lr)?;
            }

            global_step += 1;
        }

        let (report, _) = evaluate(system, data, val_idx, None)?;
        let metric = report.headline();
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_metric: metric,
            lr: epoch_lr,
        });
        let improved = best.as_ref().map(|(m, _, _, _)| metric > *m).unwrap_or(true);
        if improved {
            best = Some((metric, epoch, system.store.snapshot(), report));
        }
    }

    let (_, best_epoch, snapshot, report) = best.expect("at least one epoch ran");
    system.store.restore(&snapshot);
    Ok(TrainOutcome { history, best_epoch, report })
}

// ----------------------------------------------------------------------
// Cross-validation
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricSummary { mean, std: var.sqrt() }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub fold_reports: Vec<MetricsReport>,
    pub headline: MetricSummary,
    pub macro_f1: MetricSummary,
    pub accuracy: MetricSummary,
    /// k = 1 trains and evaluates on the same split.
    pub degenerate: bool,
}

/// Deterministic stratified fold assignment: every sample lands in exactly
/// one validation fold. Multi-label uses iterative balancing on the rarest
/// labels; grading deals classes round-robin after a seeded shuffle.
pub fn stratified_folds(labels: &Labels, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let n = labels.len();
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    if k == 1 {
        folds[0] = (0..n).collect();
        return folds;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf01d);
    match labels {
        Labels::Grades(grades) => {
            let classes = grades.iter().copied().max().unwrap_or(0) + 1;
            for c in 0..classes {
                let mut members: Vec<usize> =
                    (0..n).filter(|&i| grades[i] == c).collect();
                members.shuffle(&mut rng);
                for (j, i) in members.into_iter().enumerate() {
                    folds[j % k].push(i);
                }
            }
        }
        Labels::Multilabel(rows) => {
            let classes = rows.first().map(|r| r.len()).unwrap_or(0);
            let mut remaining: Vec<usize> = (0..n).collect();
            remaining.shuffle(&mut rng);
            // Desire per fold per label: positives / k.
            let mut desire = vec![vec![0.0f64; classes]; k];
            for l in 0..classes {
                let pos = rows.iter().filter(|r| r[l]).count() as f64;
                for fold in desire.iter_mut() {
                    fold[l] = pos / k as f64;
                }
            }
            let mut capacity = vec![(n as f64) / k as f64; k];
            while !remaining.is_empty() {
                // Rarest label still present among remaining samples.
                let mut counts = vec![0usize; classes];
                for &i in &remaining {
                    for (l, c) in counts.iter_mut().enumerate() {
                        if rows[i][l] {
                            *c += 1;
                        }
                    }
                }
                let target = (0..classes)
                    .filter(|&l| counts[l] > 0)
                    .min_by_key(|&l| (counts[l], l));
                match target {
                    Some(l) => {
                        let members: Vec<usize> =
                            remaining.iter().copied().filter(|&i| rows[i][l]).collect();
                        for i in members {
                            let f = (0..k)
                                .max_by(|&a, &b| {
                                    desire[a][l]
                                        .partial_cmp(&desire[b][l])
                                        .unwrap()
                                        .then(capacity[a].partial_cmp(&capacity[b]).unwrap())
                                        .then(b.cmp(&a))
                                })
                                .unwrap();
                            folds[f].push(i);
                            capacity[f] -= 1.0;
                            for (ll, d) in desire[f].iter_mut().enumerate() {
                                if rows[i][ll] {
                                    *d -= 1.0;
                                }
                            }
                            remaining.retain(|&x| x != i);
                        }
                    }
                    None => {
                        // Label-free leftovers: deal by remaining capacity.
                        for i in remaining.drain(..) {
                            let f = (0..k)
                                .max_by(|&a, &b| {
                                    capacity[a]
                                        .partial_cmp(&capacity[b])
                                        .unwrap()
                                        .then(b.cmp(&a))
                                })
                                .unwrap();
                            folds[f].push(i);
                            capacity[f] -= 1.0;
                        }
                    }
                }
            }
        }
    }
    for fold in folds.iter_mut() {
        fold.sort_unstable();
    }
    folds
}

/// Trains k models over deterministic stratified folds and aggregates the
/// per-fold validation metrics as mean ± std.
pub fn cross_validate(
    data: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<CvOutcome> {
    let k = cfg.folds;
    if data.len() < k {
        return Err(Error::invalid(format!("dataset size {} < folds {}", data.len(), k)));
    }
    let folds = stratified_folds(&data.labels, k, cfg.seed);
    let degenerate = k == 1;
    let mut fold_reports = Vec::with_capacity(k);
    for (f, val_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = if degenerate {
            val_idx.clone()
        } else {
            folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect()
        };
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed ^ ((f as u64 + 1) << 32);
        fold_cfg.batch_size = cfg.batch_size.min(train_idx.len());
        let (h, w, _c) = (data.cfg.height, data.cfg.width, data.cfg.channels);
        let mut system = System::build(h, w, data.cfg.channels, &fold_cfg, loss_cfg)?;
        let outcome = train(&mut system, data, &train_idx, val_idx, &fold_cfg, loss_cfg)?;
        fold_reports.push(outcome.report);
    }
    let headline = summarize(&fold_reports.iter().map(|r| r.headline()).collect::<Vec<_>>());
    let macro_f1 = summarize(&fold_reports.iter().map(|r| r.macro_f1).collect::<Vec<_>>());
    let accuracy = summarize(&fold_reports.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(CvOutcome { fold_reports, headline, macro_f1, accuracy, degenerate })
}
