//! Stage-II calibration pipeline.
//!
//! Six per-modality feature maps are residual-adapted and concatenated
//! (MFFM), calibrated through three stacked squeeze-and-excitation stages
//! with a narrowing channel schedule (MSFC), then refined per modality by
//! recursive cross-attention against the scale-aligned MSFC outputs (MDFC).
//! The concatenated per-modality outputs feed a pooled linear classifier.
//!
//! Channel widths follow φ_k ∈ {6C, 3C, C} for scales k = 1, 2, 3. Spatial
//! positions are the attention tokens: an H×W×φ map doubles as an HW×φ token
//! matrix without data movement.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::bilinear_resize;
use crate::params::{init_normal, Binding, ParamGroup, ParamStore};
use crate::tensor::tape::ParamId;
use crate::{Tape, Tensor};

/// Fixed modality order; ablation masks index into it.
pub const MODALITY_COUNT: usize = 6;

pub const MODALITY_NAMES: [&str; MODALITY_COUNT] =
    ["cfp", "ffa_arterial", "ffa_arteriovenous", "msi", "lesion_saliency", "disc_cup_saliency"];

/// Attention blocks stacked inside every cross-attention unit.
pub const BLOCKS_PER_UNIT: usize = 6;

/// Cross-attention scales (and SE stages).
pub const SCALES: usize = 3;

/// The six per-modality feature maps entering the pipeline, each H×W×C in
/// the fixed modality order.
#[derive(Debug, Clone)]
pub struct ModalityBundle {
    features: Vec<Tensor>,
    h: usize,
    w: usize,
    c: usize,
}

impl ModalityBundle {
    pub fn new(features: Vec<Tensor>) -> Result<Self> {
        if features.len() != MODALITY_COUNT {
            return Err(Error::invalid(format!(
                "bundle needs {} modalities, got {}",
                MODALITY_COUNT,
                features.len()
            )));
        }
        let shape = features[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "modality_bundle",
                detail: format!("expected H×W×C features, got {:?}", shape),
            });
        }
        for f in &features {
            if f.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "modality_bundle",
                    detail: format!("{:?} vs {:?}", f.shape(), shape),
                });
            }
        }
        Ok(ModalityBundle { h: shape[0], w: shape[1], c: shape[2], features })
    }

    pub fn feature(&self, m: usize) -> &Tensor {
        &self.features[m]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
}

/// Which modalities participate; masked slots are zero-filled so parameter
/// shapes are identical across ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask(pub [bool; MODALITY_COUNT]);

impl ModalityMask {
    pub fn all() -> Self {
        ModalityMask([true; MODALITY_COUNT])
    }

    pub fn only(indices: &[usize]) -> Self {
        let mut m = [false; MODALITY_COUNT];
        for &i in indices {
            m[i] = true;
        }
        ModalityMask(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.0.iter().any(|&b| b) {
            return Err(Error::invalid("modality mask cannot exclude every modality"));
        }
        Ok(())
    }

    pub fn is_active(&self, m: usize) -> bool {
        self.0[m]
    }
}

/// Calibration-node switches: MFFM is always present, the two CPAM
/// sub-modules can be ablated independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMask {
    pub msfc: bool,
    pub mdfc: bool,
}

impl NodeMask {
    pub fn all() -> Self {
        NodeMask { msfc: true, mdfc: true }
    }

    pub fn mffm_only() -> Self {
        NodeMask { msfc: false, mdfc: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: usize,
    /// Squeeze-and-excitation reduction ratio; must divide the narrowest
    /// stage width (= channels).
    pub reduction: usize,
    pub nodes: NodeMask,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.labels == 0 {
            return Err(Error::invalid("fusion config dims must be positive"));
        }
        if !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::invalid(format!(
                "reduction {} must divide the stage width schedule; channels {} are the narrowest",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }

    /// Stage widths φ_k for k = 1, 2, 3.
    pub fn stage_widths(&self) -> [usize; SCALES] {
        [6 * self.channels, 3 * self.channels, self.channels]
    }

    /// Channel width entering the classifier head under the node mask.
    pub fn head_width(&self) -> usize {
        if self.nodes.mdfc {
            6 * self.channels
        } else if self.nodes.msfc {
            self.channels
        } else {
            6 * self.channels
        }
    }
}

// ----------------------------------------------------------------------
// Layers
// ----------------------------------------------------------------------

/// Residual adapter R_m: identity skip around conv1x1 + ReLU. Zero-initial
/// weights make the adapter start as the identity.
#[derive(Debug, Clone)]
pub struct ResidualAdapter {
    pub w: ParamId,
    pub b: ParamId,
}

impl ResidualAdapter {
    fn build(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[c, c]), true, ParamGroup::Main)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c]), true, ParamGroup::Main)?;
        Ok(ResidualAdapter { w, b })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: &Tensor,
        binding: Binding,
    ) -> Result<Tensor> {
        let w = store.tracked(tape, self.w, binding)?;
        let b = store.tracked(tape, self.b, binding)?;
        let conv = tape.conv1x1(x, &w, Some(&b))?;
        let act = tape.relu(&conv)?;
        tape.add(x, &act)
    }
}

/// One squeeze-and-excitation stage: a 1×1 pre-conv onto this stage's width,
/// then a bottleneck gate Sigmoid[Θ₂ ReLU(Θ₁ P(·))] applied multiplicatively
/// with a residual path.
#[derive(Debug, Clone)]
pub struct SePipeline {
    pub stage: usize,
    pub width: usize,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub theta1: ParamId,
    pub theta2: ParamId,
}

impl SePipeline {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        stage: usize,
        in_width: usize,
        width: usize,
        reduction: usize,
    ) -> Result<Self> {
        if !width.is_multiple_of(reduction) {
            return Err(Error::invalid(format!(
                "reduction {} does not divide stage width {}",
                reduction, width
            )));
        }
        let squeeze = width / reduction;
        let name = format!("msfc.s{stage}");
        let conv_w = store.add(
            format!("{name}.conv.w"),
            init_normal(rng, &[width, in_width], 1.0 / (in_width as f64).sqrt()),
            true,
            ParamGroup::Main,
        )?;
        let conv_b = store.add(format!("{name}.conv.b"), Tensor::zeros(&[width]), true, ParamGroup::Main)?;
        let theta1 = store.add(
            format!("{name}.theta1"),
            init_normal(rng, &[squeeze, width], 1.0 / (width as f64).sqrt()),
            true,
            ParamGroup::Main,
        )?;
        let theta2 = store.add(
            format!("{name}.theta2"),
            init_normal(rng, &[width, squeeze], 1.0 / (squeeze as f64).sqrt()),
            true,
            ParamGroup::Main,
        )?;
        Ok(SePipeline { stage, width, conv_w, conv_b, theta1, theta2 })
    }

    /// Gate vector in (0,1)^width from a feature map of matching width.
    pub fn se_gate(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        f: &Tensor,
        binding: Binding,
    ) -> Result<Tensor> {
        let width = *f.shape().last().unwrap_or(&0);
        if width != self.width {
            return Err(Error::ShapeMismatch {
                op: "se_gate",
                detail: format!("feature width {} vs pipeline width {}", width, self.width),
            });
        }
        let t1 = store.tracked(tape, self.theta1, binding)?;
        let t2 = store.tracked(tape, self.theta2, binding)?;
        let pooled = tape.global_avg_pool(f)?;
        let z = tape.reshape(&pooled, vec![self.width, 1])?;
        let squeezed = tape.matmul(&t1, &z)?;
        let act = tape.relu(&squeezed)?;
        let excited = tape.matmul(&t2, &act)?;
        let gate = tape.sigmoid(&excited)?;
        tape.reshape(&gate, vec![self.width])
    }

    /// Full stage: g = conv(x); out = g ⊙ SE(g) + g. When `gated` is false
    /// the calibration is bypassed and only the pre-conv runs (node
    /// ablation), keeping channel plumbing intact.
    pub fn msfc_stage(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: &Tensor,
        binding: Binding,
        gated: bool,
    ) -> Result<Tensor> {
        let w = store.tracked(tape, self.conv_w, binding)?;
        let b = store.tracked(tape, self.conv_b, binding)?;
        let g = tape.conv1x1(x, &w, Some(&b))?;
        if !gated {
            return Ok(g);
        }
        let gate = self.se_gate(store, tape, &g, binding)?;
        let gated_map = tape.hadamard(&g, &gate)?;
        tape.add(&gated_map, &g)
    }
}

/// Scaled dot-product attention head: queries from the evolving per-modality
/// state, keys and values from the scale-aligned calibrated features.
#[allow(clippy::too_many_arguments)]
pub fn attention_head(
    tape: &mut Tape,
    f_tokens: &Tensor,
    y_prev: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let phi = *y_prev
        .shape()
        .last()
        .ok_or(Error::ShapeMismatch { op: "attention_head", detail: "empty query".into() })?;
    let q = tape.matmul(y_prev, wq)?;
    let k = tape.matmul(f_tokens, wk)?;
    let v = tape.matmul(f_tokens, wv)?;
    let scores = tape.matmul_nt(&q, &k)?;
    let scaled = tape.scale(&scores, 1.0 / (phi as f64).sqrt())?;
    let attn = tape.softmax_rows(&scaled)?;
    if let Some(sink) = trace {
        sink.push(attn.detached());
    }
    tape.matmul(&attn, &v)
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl AttentionBlock {
    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, phi: usize) -> Result<Self> {
        let std = 1.0 / (phi as f64).sqrt();
        let hidden = 2 * phi;
        Ok(AttentionBlock {
            wq: store.add(format!("{name}.wq"), init_normal(rng, &[phi, phi], std), true, ParamGroup::Main)?,
            wk: store.add(format!("{name}.wk"), init_normal(rng, &[phi, phi], std), true, ParamGroup::Main)?,
            wv: store.add(format!("{name}.wv"), init_normal(rng, &[phi, phi], std), true, ParamGroup::Main)?,
            ln1_g: store.add(format!("{name}.ln1.g"), Tensor::full(&[phi], 1.0), true, ParamGroup::Main)?,
            ln1_b: store.add(format!("{name}.ln1.b"), Tensor::zeros(&[phi]), true, ParamGroup::Main)?,
            mlp_w1: store.add(
                format!("{name}.mlp.w1"),
                init_normal(rng, &[phi, hidden], std),
                true,
                ParamGroup::Main,
            )?,
            mlp_b1: store.add(format!("{name}.mlp.b1"), Tensor::zeros(&[hidden]), true, ParamGroup::Main)?,
            mlp_w2: store.add(
                format!("{name}.mlp.w2"),
                init_normal(rng, &[hidden, phi], 1.0 / (hidden as f64).sqrt()),
                true,
                ParamGroup::Main,
            )?,
            mlp_b2: store.add(format!("{name}.mlp.b2"), Tensor::zeros(&[phi]), true, ParamGroup::Main)?,
            ln2_g: store.add(format!("{name}.ln2.g"), Tensor::full(&[phi], 1.0), true, ParamGroup::Main)?,
            ln2_b: store.add(format!("{name}.ln2.b"), Tensor::zeros(&[phi]), true, ParamGroup::Main)?,
        })
    }

    /// attention → add & norm → MLP → add & norm.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        f_tokens: &Tensor,
        y: &Tensor,
        binding: Binding,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let wq = store.tracked(tape, self.wq, binding)?;
        let wk = store.tracked(tape, self.wk, binding)?;
        let wv = store.tracked(tape, self.wv, binding)?;
        let ctx = attention_head(tape, f_tokens, y, &wq, &wk, &wv, trace)?;
        let sum1 = tape.add(y, &ctx)?;
        let g1 = store.tracked(tape, self.ln1_g, binding)?;
        let b1 = store.tracked(tape, self.ln1_b, binding)?;
        let y1 = tape.layer_norm(&sum1, &g1, &b1, LAYER_NORM_EPS)?;

        let w1 = store.tracked(tape, self.mlp_w1, binding)?;
        let bb1 = store.tracked(tape, self.mlp_b1, binding)?;
        let w2 = store.tracked(tape, self.mlp_w2, binding)?;
        let bb2 = store.tracked(tape, self.mlp_b2, binding)?;
        let h = tape.matmul(&y1, &w1)?;
        let h = tape.add_row_vec(&h, &bb1)?;
        let h = tape.relu(&h)?;
        let m = tape.matmul(&h, &w2)?;
        let m = tape.add_row_vec(&m, &bb2)?;
        let sum2 = tape.add(&y1, &m)?;
        let g2 = store.tracked(tape, self.ln2_g, binding)?;
        let b2 = store.tracked(tape, self.ln2_b, binding)?;
        tape.layer_norm(&sum2, &g2, &b2, LAYER_NORM_EPS)
    }
}

/// Six stacked attention blocks at one scale, with an input projection when
/// the state width changes across scales.
#[derive(Debug, Clone)]
pub struct CrossAttentionUnit {
    pub scale: usize,
    pub input_proj: Option<ParamId>,
    pub blocks: Vec<AttentionBlock>,
}

impl CrossAttentionUnit {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        scale: usize,
        in_width: usize,
        phi: usize,
    ) -> Result<Self> {
        let input_proj = if in_width != phi {
            Some(store.add(
                format!("{name}.proj"),
                init_normal(rng, &[in_width, phi], 1.0 / (in_width as f64).sqrt()),
                true,
                ParamGroup::Main,
            )?)
        } else {
            None
        };
        let blocks = (0..BLOCKS_PER_UNIT)
            .map(|j| AttentionBlock::build(store, rng, &format!("{name}.b{j}"), phi))
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossAttentionUnit { scale, input_proj, blocks })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        f_tokens: &Tensor,
        y_in: &Tensor,
        binding: Binding,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let mut y = match self.input_proj {
            Some(p) => {
                let w = store.tracked(tape, p, binding)?;
                tape.matmul(y_in, &w)?
            }
            None => y_in.clone(),
        };
        for block in &self.blocks {
            y = block.forward(store, tape, f_tokens, &y, binding, trace.as_deref_mut())?;
        }
        Ok(y)
    }
}

/// Per-modality recursion over the three scales.
#[derive(Debug, Clone)]
pub struct ModalityBranch {
    pub modality: usize,
    pub proj_in: ParamId,
    pub units: Vec<CrossAttentionUnit>,
}

impl ModalityBranch {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality: usize,
        c: usize,
        widths: &[usize; SCALES],
    ) -> Result<Self> {
        let name = format!("mdfc.m{modality}");
        let proj_in = store.add(
            format!("{name}.proj_in"),
            init_normal(rng, &[c, widths[0]], 1.0 / (c as f64).sqrt()),
            true,
            ParamGroup::Main,
        )?;
        let mut units = Vec::with_capacity(SCALES);
        let mut in_width = widths[0];
        for (k, &phi) in widths.iter().enumerate() {
            units.push(CrossAttentionUnit::build(
                store,
                rng,
                &format!("{name}.s{}", k + 1),
                k + 1,
                in_width,
                phi,
            )?);
            in_width = phi;
        }
        Ok(ModalityBranch { modality, proj_in, units })
    }
}

/// Pooled linear classifier; losses own the link function, so there is no
/// output activation here.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
    pub in_width: usize,
}

impl ClassifierHead {
    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, in_width: usize, labels: usize) -> Result<Self> {
        let w = store.add(
            "head.w",
            init_normal(rng, &[labels, in_width], 1.0 / (in_width as f64).sqrt()),
            true,
            ParamGroup::Main,
        )?;
        let b = store.add("head.b", Tensor::zeros(&[labels]), true, ParamGroup::Main)?;
        Ok(ClassifierHead { w, b, in_width })
    }

    /// Global-average-pool then affine: y may be H×W×D or tokens×D.
    pub fn classify(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        y: &Tensor,
        binding: Binding,
    ) -> Result<Tensor> {
        let width = *y.shape().last().unwrap_or(&0);
        if width != self.in_width {
            return Err(Error::ShapeMismatch {
                op: "classify",
                detail: format!("feature width {} vs head width {}", width, self.in_width),
            });
        }
        let pooled = tape.global_avg_pool(y)?;
        let row = tape.reshape(&pooled, vec![1, self.in_width])?;
        let w = store.tracked(tape, self.w, binding)?;
        let b = store.tracked(tape, self.b, binding)?;
        let logits = tape.matmul_nt(&row, &w)?;
        let logits = tape.add_row_vec(&logits, &b)?;
        let labels = w.shape()[0];
        tape.reshape(&logits, vec![labels])
    }
}

/// Detached attention matrices captured during a forward pass, addressed by
/// (modality, scale, block).
#[derive(Debug, Default, Clone)]
pub struct AttentionTrace {
    entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub modality: usize,
    pub scale: usize,
    pub block: usize,
    pub matrix: Tensor,
}

impl AttentionTrace {
    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn get(&self, modality: usize, scale: usize, block: usize) -> Option<&TraceEntry> {
        self.entries
            .iter()
            .find(|e| e.modality == modality && e.scale == scale && e.block == block)
    }

    /// Mean attention over the query axis, reshaped to the key grid and
    /// bilinearly upsampled to the requested size. Before upsampling the map
    /// entries sum to 1 (each row of the attention matrix does).
    #[allow(clippy::too_many_arguments)]
    pub fn export_attention_map(
        &self,
        modality: usize,
        scale: usize,
        block: usize,
        grid_h: usize,
        grid_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        let entry = self.get(modality, scale, block).ok_or_else(|| {
            Error::invalid(format!(
                "no stored attention for modality {modality} scale {scale} block {block}"
            ))
        })?;
        let (rows, cols) = (entry.matrix.shape()[0], entry.matrix.shape()[1]);
        if cols != grid_h * grid_w {
            return Err(Error::ShapeMismatch {
                op: "export_attention_map",
                detail: format!("{} keys vs {}×{} grid", cols, grid_h, grid_w),
            });
        }
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += entry.matrix.data()[r * cols + c];
            }
        }
        for v in mean.iter_mut() {
            *v /= rows as f64;
        }
        let grid = Tensor::from_vec(vec![grid_h, grid_w], mean)?;
        bilinear_resize(&grid, out_h, out_w)
    }
}

// ----------------------------------------------------------------------
// The assembled model
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub adapters: Vec<ResidualAdapter>,
    pub msfc: Vec<SePipeline>,
    pub branches: Vec<ModalityBranch>,
    pub head: ClassifierHead,
}

impl FusionModel {
    /// Registers all pipeline parameters into the store, deterministically
    /// from the init rng.
    pub fn build(cfg: FusionConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_widths();
        let adapters = (0..MODALITY_COUNT)
            .map(|m| ResidualAdapter::build(store, &format!("adapter.m{m}"), cfg.channels))
            .collect::<Result<Vec<_>>>()?;
        let mut msfc = Vec::with_capacity(SCALES);
        let mut in_width = widths[0];
        for (k, &width) in widths.iter().enumerate() {
            msfc.push(SePipeline::build(store, rng, k + 1, in_width, width, cfg.reduction)?);
            in_width = width;
        }
        let branches = (0..MODALITY_COUNT)
            .map(|m| ModalityBranch::build(store, rng, m, cfg.channels, &widths))
            .collect::<Result<Vec<_>>>()?;
        let head = ClassifierHead::build(store, rng, cfg.head_width(), cfg.labels)?;
        Ok(FusionModel { cfg, adapters, msfc, branches, head })
    }

    /// Residual adaptation and channel concatenation with ReLU. Masked
    /// modalities contribute zero tensors, preserving channel slots.
    pub fn mffm_fuse(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        bundle: &ModalityBundle,
        mask: ModalityMask,
        binding: Binding,
    ) -> Result<Tensor> {
        mask.validate()?;
        let (h, w, c) = bundle.dims();
        if c != self.cfg.channels || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::ShapeMismatch {
                op: "mffm_fuse",
                detail: format!("bundle {h}×{w}×{c} vs config", ),
            });
        }
        let zero = Tensor::zeros(&[h, w, c]);
        let mut parts = Vec::with_capacity(MODALITY_COUNT);
        for m in 0..MODALITY_COUNT {
            if mask.is_active(m) {
                parts.push(self.adapters[m].forward(store, tape, bundle.feature(m), binding)?);
            } else {
                parts.push(zero.clone());
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cat = tape.concat_channels(&refs)?;
        tape.relu(&cat)
    }

    /// Three stacked SE stages; returns all scale outputs (widths 6C, 3C, C)
    /// for the scale-aligned cross-attention.
    pub fn msfc_forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        h_sc: &Tensor,
        binding: Binding,
    ) -> Result<Vec<Tensor>> {
        let gated = self.cfg.nodes.msfc;
        let mut outs = Vec::with_capacity(SCALES);
        let mut x = h_sc.clone();
        for stage in &self.msfc {
            x = stage.msfc_stage(store, tape, &x, binding, gated)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// Per-modality recursive refinement against the three MSFC scales,
    /// concatenated over modalities.
    #[allow(clippy::too_many_arguments)]
    pub fn mdfc_forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        msfc_outs: &[Tensor],
        bundle: &ModalityBundle,
        mask: ModalityMask,
        binding: Binding,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        let (h, w, c) = bundle.dims();
        let tokens = h * w;
        let zero = Tensor::zeros(&[h, w, c]);
        let f_tokens: Vec<Tensor> = msfc_outs
            .iter()
            .map(|f| {
                let width = *f.shape().last().unwrap();
                tape.reshape(f, vec![tokens, width])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut outputs = Vec::with_capacity(MODALITY_COUNT);
        for (m, branch) in self.branches.iter().enumerate() {
            let feat = if mask.is_active(m) { bundle.feature(m) } else { &zero };
            let flat = tape.reshape(feat, vec![tokens, c])?;
            let proj = store.tracked(tape, branch.proj_in, binding)?;
            let mut y = tape.matmul(&flat, &proj)?;
            for (k, unit) in branch.units.iter().enumerate() {
                let mut sink: Vec<Tensor> = Vec::new();
                let want_trace = trace.is_some();
                y = unit.forward(
                    store,
                    tape,
                    &f_tokens[k],
                    &y,
                    binding,
                    if want_trace { Some(&mut sink) } else { None },
                )?;
                if let Some(tr) = trace.as_deref_mut() {
                    for (j, matrix) in sink.into_iter().enumerate() {
                        tr.entries.push(TraceEntry { modality: m, scale: k + 1, block: j, matrix });
                    }
                }
            }
            outputs.push(y);
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        tape.concat_channels(&refs)
    }

    /// Full pipeline: bundle → logits.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        bundle: &ModalityBundle,
        mask: ModalityMask,
        binding: Binding,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        let h_sc = self.mffm_fuse(store, tape, bundle, mask, binding)?;
        self.forward_from_hsc(store, tape, &h_sc, bundle, mask, binding, trace)
    }

    /// Pipeline tail from an already-fused H_sc; callers that need the fused
    /// map for fidelity heads reuse it this way.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_from_hsc(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        h_sc: &Tensor,
        bundle: &ModalityBundle,
        mask: ModalityMask,
        binding: Binding,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        let y = self.head_input_from_hsc(store, tape, h_sc, bundle, mask, binding, trace)?;
        self.head.classify(store, tape, &y, binding)
    }

    /// The tensor entering the classifier head under the node mask: H_sc,
    /// the final MSFC output, or the concatenated per-modality refinement.
    #[allow(clippy::too_many_arguments)]
    pub fn head_input_from_hsc(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        h_sc: &Tensor,
        bundle: &ModalityBundle,
        mask: ModalityMask,
        binding: Binding,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        if !self.cfg.nodes.msfc && !self.cfg.nodes.mdfc {
            return Ok(h_sc.clone());
        }
        let msfc_outs = self.msfc_forward(store, tape, h_sc, binding)?;
        if !self.cfg.nodes.mdfc {
            return Ok(msfc_outs.last().unwrap().clone());
        }
        self.mdfc_forward(store, tape, &msfc_outs, bundle, mask, binding, trace)
    }
}
