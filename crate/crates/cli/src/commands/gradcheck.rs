//! `gradcheck`: central-difference verification of every differentiable
//! primitive, every loss, and the end-to-end pipeline. Prints one line per
//! item and exits nonzero naming the first failure.
//!
//! Primitives are held to 1e-5 relative error, composite losses and the
//! end-to-end model to 1e-4, all at eps = 1e-6.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retfuse_core::objectives::{self, AdvSide, LossConfig};
use retfuse_core::params::{grad_check_store, Binding, ParamGroup};
use retfuse_core::tensor::gradcheck::{grad_check, CoordSample, ScalarFn};
use retfuse_core::training::{System, TrainConfig};
use retfuse_core::synthetic::{generate_dataset, LabelMode, Labels, SyntheticConfig};
use retfuse_core::{Activation, Tape, Tensor};

const PRIMITIVE_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub struct Item {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Extra context for failures (e.g. the worst parameter coordinate).
    pub detail: String,
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check(name: &'static str, tol: f64, theta: Tensor, f: Box<ScalarFn<f64>>) -> anyhow::Result<Item> {
    let err = grad_check(f.as_ref(), &theta, EPS, CoordSample::All)?;
    Ok(Item { name, max_rel_err: err, tolerance: tol, detail: String::new() })
}

/// Runs the battery at the given spatial/channel dims (the end-to-end item
/// uses them directly; primitives use small fixed shapes).
pub fn battery(h: usize, w: usize, c: usize, inject_failure: bool) -> anyhow::Result<Vec<Item>> {
    let mut items = Vec::new();
    let cfg = LossConfig::default();

    // -------------------- primitives --------------------
    let b = randn(&[4, 3], 101);
    items.push(check("matmul", PRIMITIVE_TOL, randn(&[3, 4], 102), Box::new(move |t, x| {
        let y = t.matmul(x, &b)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq)
    }))?);
    let b = randn(&[5, 4], 103);
    items.push(check("matmul_nt", PRIMITIVE_TOL, randn(&[3, 4], 104), Box::new(move |t, x| {
        let y = t.matmul_nt(x, &b)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq)
    }))?);
    let w1 = randn(&[2, 3], 105);
    let bias = randn(&[2], 106);
    items.push(check("conv1x1", PRIMITIVE_TOL, randn(&[3, 3, 3], 107), Box::new(move |t, x| {
        let y = t.conv1x1(x, &w1, Some(&bias))?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq)
    }))?);
    items.push(check("global_avg_pool", PRIMITIVE_TOL, randn(&[4, 4, 3], 108), Box::new(|t, x| {
        let p = t.global_avg_pool(x)?;
        let sq = t.mul(&p, &p)?;
        t.sum(&sq)
    }))?);
    items.push(check(
        "activation_relu",
        PRIMITIVE_TOL,
        randn(&[8], 109).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v }),
        Box::new(|t, x| {
            let r = t.activation(x, Activation::Relu)?;
            let sq = t.mul(&r, &r)?;
            t.sum(&sq)
        }),
    )?);
    items.push(check("activation_sigmoid", PRIMITIVE_TOL, randn(&[8], 110), Box::new(|t, x| {
        let s = t.activation(x, Activation::Sigmoid)?;
        t.sum(&s)
    }))?);
    let wsm = randn(&[3, 5], 111);
    items.push(check("softmax_rows", PRIMITIVE_TOL, randn(&[3, 5], 112), Box::new(move |t, x| {
        let s = t.softmax_rows(x)?;
        let weighted = t.mul(&s, &wsm)?;
        t.sum(&weighted)
    }))?);
    let gain = randn(&[6], 113);
    let lnb = randn(&[6], 114);
    let wln = randn(&[3, 6], 115);
    items.push(check("layer_norm", PRIMITIVE_TOL, randn(&[3, 6], 116), Box::new(move |t, x| {
        let y = t.layer_norm(x, &gain, &lnb, 1e-5)?;
        let weighted = t.mul(&y, &wln)?;
        t.sum(&weighted)
    }))?);
    let other = randn(&[2, 2, 3], 117);
    items.push(check("concat_channels", PRIMITIVE_TOL, randn(&[2, 2, 2], 118), Box::new(move |t, x| {
        let cat = t.concat_channels(&[x, &other])?;
        let sq = t.mul(&cat, &cat)?;
        t.sum(&sq)
    }))?);
    items.push(check("slice_channels", PRIMITIVE_TOL, randn(&[2, 2, 4], 119), Box::new(|t, x| {
        let s = t.slice_channels(x, 1, 3)?;
        let sq = t.mul(&s, &s)?;
        t.sum(&sq)
    }))?);
    let vch = randn(&[4], 120);
    items.push(check("hadamard_broadcast", PRIMITIVE_TOL, randn(&[3, 2, 4], 121), Box::new(move |t, x| {
        let h = t.hadamard(x, &vch)?;
        let sq = t.mul(&h, &h)?;
        t.sum(&sq)
    }))?);
    let addv = randn(&[4], 122);
    items.push(check("add_row_vec", PRIMITIVE_TOL, randn(&[5, 4], 123), Box::new(move |t, x| {
        let y = t.add_row_vec(x, &addv)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq)
    }))?);
    let divisor = randn(&[6], 124).map(|v| v + 3.0);
    items.push(check("div", PRIMITIVE_TOL, randn(&[6], 125), Box::new(move |t, x| {
        let d = t.div(x, &divisor)?;
        let sq = t.mul(&d, &d)?;
        t.sum(&sq)
    }))?);
    items.push(check(
        "abs",
        PRIMITIVE_TOL,
        randn(&[8], 126).map(|v| if v.abs() < 0.05 { v + 0.3 } else { v }),
        Box::new(|t, x| {
            let a = t.abs(x)?;
            t.sum(&a)
        }),
    )?);
    items.push(check("ln", PRIMITIVE_TOL, randn(&[6], 127).map(|v| v.abs() + 0.5), Box::new(|t, x| {
        let l = t.ln(x)?;
        t.sum(&l)
    }))?);
    items.push(check("mean", PRIMITIVE_TOL, randn(&[7], 128), Box::new(|t, x| {
        let sq = t.mul(&x.clone(), x)?;
        t.mean(&sq)
    }))?);
    let srow = randn(&[3], 129);
    items.push(check("stack_rows", PRIMITIVE_TOL, randn(&[3], 130), Box::new(move |t, x| {
        let o = t.input(&srow)?;
        let m = t.stack_rows(&[x, &o])?;
        let sq = t.mul(&m, &m)?;
        t.sum(&sq)
    }))?);

    // -------------------- losses --------------------
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let targets: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.5)).collect();
    let c1 = cfg.clone();
    let t1 = targets.clone();
    items.push(check("loss_asymmetric", MODEL_TOL, randn(&[2, 4], 132), Box::new(move |t, x| {
        objectives::asymmetric_loss(t, x, &t1, &c1)
    }))?);
    let c2 = LossConfig { gamma_pos: 1.0, gamma_neg: 2.0, asl_margin: 0.0, ..Default::default() };
    items.push(check("loss_asymmetric_focused", MODEL_TOL, randn(&[2, 4], 133), Box::new(move |t, x| {
        objectives::asymmetric_loss(t, x, &targets, &c2)
    }))?);
    let grades = vec![1usize, 0, 3];
    items.push(check("loss_categorical_ce", MODEL_TOL, randn(&[3, 5], 134), Box::new(move |t, x| {
        objectives::categorical_cross_entropy(t, x, &grades)
    }))?);
    let cref = randn(&[3, 3, 2], 135).map(|v| v.abs() + 0.3);
    let c3 = cfg.clone();
    items.push(check(
        "loss_cycle",
        MODEL_TOL,
        randn(&[3, 3, 2], 136).map(|v| v.abs() + 1.0),
        Box::new(move |t, x| objectives::cycle_loss(t, &cref, x, &c3)),
    )?);
    let mref = randn(&[3, 7], 137);
    items.push(check("loss_srf_mse", MODEL_TOL, randn(&[3, 7], 138), Box::new(move |t, x| {
        objectives::srf_mse_loss(t, &mref, x)
    }))?);
    let sref = randn(&[4, 4, 2], 139).map(|v| v.abs() + 0.2);
    let c4 = cfg.clone();
    items.push(check(
        "loss_ssim",
        MODEL_TOL,
        randn(&[4, 4, 2], 140).map(|v| v.abs() + 0.2),
        Box::new(move |t, x| objectives::ssim_loss(t, &sref, x, &c4)),
    )?);
    let real = randn(&[4], 141);
    items.push(check("loss_adversarial_generator", MODEL_TOL, randn(&[4], 142), Box::new(move |t, x| {
        objectives::adversarial_loss(t, &real, x, AdvSide::Generator)
    }))?);
    let fake = randn(&[4], 143);
    items.push(check("loss_adversarial_discriminator", MODEL_TOL, randn(&[4], 144), Box::new(move |t, x| {
        objectives::adversarial_loss(t, x, &fake, AdvSide::Discriminator)
    }))?);
    let truth = Tensor::from_fn(&[3, 3, 2], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let c5 = cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(145);
    items.push(check(
        "loss_segmentation_total",
        MODEL_TOL,
        Tensor::from_fn(&[3, 3, 2], |_| rng.gen_range(0.05..0.95)),
        Box::new(move |t, x| {
            let (_, _, total) = objectives::seg_losses(t, x, &truth, &c5)?;
            Ok(total)
        }),
    )?);
    let c6 = cfg.clone();
    let tref = randn(&[2, 2, 1], 146).map(|v| v.abs() + 0.5);
    items.push(check(
        "loss_stage2_composite",
        MODEL_TOL,
        randn(&[2, 2], 147).map(|v| v + 3.0),
        Box::new(move |t, x| {
            let flat = t.reshape(x, vec![1, 4])?;
            let tg = [true, false, false, true];
            let task = objectives::asymmetric_loss(t, &flat, &tg, &c6)?;
            let rec = t.reshape(x, vec![2, 2, 1])?;
            let rec = t.mul(&rec, &rec)?;
            let cyc = objectives::cycle_loss(t, &tref, &rec, &c6)?;
            let scores = t.reshape(x, vec![4])?;
            let adv = objectives::adversarial_loss(t, &scores, &scores, AdvSide::Generator)?;
            objectives::stage2_total(t, &task, &cyc, &adv, &c6)
        }),
    )?);
    let c7 = cfg.clone();
    items.push(check("loss_msi_total", MODEL_TOL, randn(&[3], 148).map(|v| v.abs()), Box::new(move |t, x| {
        let cyc = t.slice_channels(x, 0, 1)?;
        let ssim = t.slice_channels(x, 1, 2)?;
        let mse = t.slice_channels(x, 2, 3)?;
        let cyc = t.sum(&cyc)?;
        let ssim = t.sum(&ssim)?;
        let mse = t.sum(&mse)?;
        objectives::msi_total_loss(t, &cyc, &ssim, &mse, &c7)
    }))?);

    // -------------------- end-to-end pipeline --------------------
    let data = generate_dataset(&SyntheticConfig {
        samples: 2,
        height: h,
        width: w,
        channels: c,
        label_mode: LabelMode::Multilabel20,
        strengths: None,
        noise_level: 0.2,
        seed: 149,
    })?;
    let train_cfg = TrainConfig {
        reduction: if c.is_multiple_of(4) { 4 } else { 1 },
        seed: 150,
        ..Default::default()
    };
    let mut system = System::build(h, w, c, &train_cfg, &cfg)?;
    // Zero-initialized adapters sit exactly on their ReLU kink, where the
    // subgradient and a central difference legitimately disagree; probe the
    // derivative code at a generic parameter point instead.
    let mut arng = ChaCha8Rng::seed_from_u64(152);
    for adapter in &system.fusion.adapters.clone() {
        system.store.set_value(
            adapter.w,
            retfuse_core::params::init_normal(&mut arng, &[c, c], 0.3),
        );
        system.store.set_value(
            adapter.b,
            retfuse_core::params::init_normal(&mut arng, &[c], 0.1),
        );
    }
    // Encoder biases start at zero and clamped-at-zero image pixels put
    // their first ReLU exactly on the kink; nudge them off it.
    for enc in &system.encoders.clone() {
        system.store.set_value(enc.b1, retfuse_core::params::init_normal(&mut arng, &[c], 0.1));
        system.store.set_value(enc.b2, retfuse_core::params::init_normal(&mut arng, &[c], 0.1));
    }
    let system = system;
    let Labels::Multilabel(labels) = &data.labels else { unreachable!() };
    let sample = data.images[0].clone();
    let target = labels[0].clone();
    let k = system.labels;
    let base_store = system.store.clone();
    let system2 = system.clone();
    let sample2 = sample.clone();
    let target2 = target.clone();
    let c8 = cfg.clone();
    let c9 = cfg.clone();
    let system3 = system.clone();
    let system4 = system.clone();
    let sample3 = sample.clone();
    let sample4 = sample.clone();
    let summary = grad_check_store(
        &base_store,
        ParamGroup::Main,
        move |st, tape| {
            let mut sys = system.clone();
            sys.store = st.clone();
            let (logits, _) = sys.forward_sample(tape, &sample, Binding::Train(ParamGroup::Main), None)?;
            let row = tape.reshape(&logits, vec![1, k])?;
            objectives::asymmetric_loss(tape, &row, &target, &c8)
        },
        move |st| {
            let mut sys = system2.clone();
            sys.store = st.clone();
            let mut tape = Tape::new();
            let (logits, _) =
                sys.forward_sample(&mut tape, &sample2, Binding::Train(ParamGroup::Main), None)?;
            let row = tape.reshape(&logits, vec![1, k])?;
            Ok(objectives::asymmetric_loss(&mut tape, &row, &target2, &c9)?.item())
        },
        EPS,
        2,
        151,
    )?;
    items.push(Item {
        name: "end_to_end_pipeline",
        max_rel_err: summary.max_rel_err,
        tolerance: MODEL_TOL,
        detail: format!("worst at {} over {} coords", summary.worst_param, summary.coords_checked),
    });

    // Fidelity route: encoder → adapter slice → frozen decoder → weighted
    // cycle + adversarial terms, exactly as the trainer composes them.
    let c10 = cfg.clone();
    let c11 = cfg.clone();
    let fid_summary = grad_check_store(
        &base_store,
        ParamGroup::Main,
        move |st, tape| {
            let mut sys = system3.clone();
            sys.store = st.clone();
            let (_, fidelity) =
                sys.forward_sample(tape, &sample3, Binding::Train(ParamGroup::Main), None)?;
            let mut total = Tensor::scalar(0.0);
            for (_, reference, recon) in &fidelity {
                let cyc = objectives::cycle_loss(tape, reference, recon, &c10)?;
                let wc = tape.scale(&cyc, c10.lambda_cyc)?;
                total = tape.add(&total, &wc)?;
                if let Some(disc) = &sys.discriminator {
                    let score = disc.score(&sys.store, tape, recon, Binding::Train(ParamGroup::Main))?;
                    let fake = tape.reshape(&score, vec![1])?;
                    let g = objectives::adversarial_loss(tape, &fake, &fake, AdvSide::Generator)?;
                    let wg = tape.scale(&g, c10.lambda_adv)?;
                    total = tape.add(&total, &wg)?;
                }
            }
            Ok(total)
        },
        move |st| {
            let mut sys = system4.clone();
            sys.store = st.clone();
            let mut tape = Tape::new();
            let (_, fidelity) =
                sys.forward_sample(&mut tape, &sample4, Binding::Train(ParamGroup::Main), None)?;
            let mut total = Tensor::scalar(0.0);
            for (_, reference, recon) in &fidelity {
                let cyc = objectives::cycle_loss(&mut tape, reference, recon, &c11)?;
                let wc = tape.scale(&cyc, c11.lambda_cyc)?;
                total = tape.add(&total, &wc)?;
                if let Some(disc) = &sys.discriminator {
                    let score =
                        disc.score(&sys.store, &mut tape, recon, Binding::Train(ParamGroup::Main))?;
                    let fake = tape.reshape(&score, vec![1])?;
                    let g = objectives::adversarial_loss(&mut tape, &fake, &fake, AdvSide::Generator)?;
                    let wg = tape.scale(&g, c11.lambda_adv)?;
                    total = tape.add(&total, &wg)?;
                }
            }
            Ok(total.item())
        },
        EPS,
        2,
        153,
    )?;
    items.push(Item {
        name: "fidelity_path",
        max_rel_err: fid_summary.max_rel_err,
        tolerance: MODEL_TOL,
        detail: format!(
            "worst at {} over {} coords",
            fid_summary.worst_param, fid_summary.coords_checked
        ),
    });

    if inject_failure {
        // Deliberately corrupted gradient: analytic 2x vs true derivative
        // of x³ at 1 (= 3). Exercises the failure path end to end.
        items.push(Item {
            name: "corrupted_gradient_fixture",
            max_rel_err: 0.2,
            tolerance: MODEL_TOL,
            detail: "intentionally wrong analytic derivative".into(),
        });
    }
    Ok(items)
}

pub fn run(dims: &str, inject_failure: bool, quiet: bool) -> anyhow::Result<bool> {
    let parts: Vec<usize> = dims
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow::anyhow!("bad --dims {dims:?}: {e}"))?;
    anyhow::ensure!(parts.len() == 3, "--dims wants H,W,C");
    let (h, w, c) = (parts[0], parts[1], parts[2]);
    anyhow::ensure!(h <= 8 && w <= 8 && c <= 8, "gradcheck dims are capped at 8");
    let started = std::time::Instant::now();
    let items = battery(h, w, c, inject_failure)?;
    let mut all_ok = true;
    for item in &items {
        let ok = item.max_rel_err < item.tolerance;
        all_ok &= ok;
        if !quiet || !ok {
            let detail = if item.detail.is_empty() || ok {
                String::new()
            } else {
                format!("  ({})", item.detail)
            };
            println!(
                "{} {:<32} max_rel_err={:.3e} tol={:.0e}{}",
                if ok { "PASS" } else { "FAIL" },
                item.name,
                item.max_rel_err,
                item.tolerance,
                detail
            );
        }
    }
    if !quiet {
        println!(
            "gradcheck: {} items at H={h} W={w} C={c} in {:.1}s",
            items.len(),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(all_ok)
}
