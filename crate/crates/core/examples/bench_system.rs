use retfuse_core::objectives::LossConfig;
use retfuse_core::params::{Binding, ParamGroup};
use retfuse_core::synthetic::{generate_dataset, LabelMode, Labels, SyntheticConfig};
use retfuse_core::training::{System, TrainConfig};
use retfuse_core::Tape;
use std::time::Instant;

fn main() {
    let cfg = LossConfig::default();
    let data = generate_dataset(&SyntheticConfig {
        samples: 16, height: 8, width: 8, channels: 8,
        label_mode: LabelMode::Multilabel20, strengths: None, noise_level: 0.2, seed: 1,
    }).unwrap();
    let tc = TrainConfig { reduction: 4, seed: 2, ..Default::default() };
    let system = System::build(8, 8, 8, &tc, &cfg).unwrap();
    let Labels::Multilabel(labels) = &data.labels else { unreachable!() };

    // Eval-mode forward
    let t0 = Instant::now();
    let reps = 30;
    for r in 0..reps {
        let mut tape = Tape::eval();
        let (logits, _) = system.forward_sample(&mut tape, &data.images[r % 16], Binding::Eval, None).unwrap();
        std::hint::black_box(logits);
    }
    println!("eval forward:   {:7.2} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Recording forward
    let t0 = Instant::now();
    for r in 0..reps {
        let mut tape = Tape::new();
        let (logits, _) = system.forward_sample(&mut tape, &data.images[r % 16], Binding::Train(ParamGroup::Main), None).unwrap();
        std::hint::black_box((logits, tape.len()));
    }
    println!("record forward: {:7.2} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // Forward + loss + backward + grad extraction
    let t0 = Instant::now();
    for r in 0..reps {
        let mut tape = Tape::new();
        let (logits, fid) = system.forward_sample(&mut tape, &data.images[r % 16], Binding::Train(ParamGroup::Main), None).unwrap();
        let row = tape.reshape(&logits, vec![1, 20]).unwrap();
        let task = retfuse_core::objectives::asymmetric_loss(&mut tape, &row, &labels[r % 16], &cfg).unwrap();
        let mut total = task;
        for (_, reference, recon) in &fid {
            let c = retfuse_core::objectives::cycle_loss(&mut tape, reference, recon, &cfg).unwrap();
            let wc = tape.scale(&c, 0.2).unwrap();
            total = tape.add(&total, &wc).unwrap();
        }
        let grads = tape.backward(&total).unwrap();
        let mut n = 0usize;
        for id in grads.param_ids() { if let Some(g) = grads.param(id) { n += g.len(); } }
        std::hint::black_box(n);
    }
    println!("fwd+bwd+grads:  {:7.2} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
