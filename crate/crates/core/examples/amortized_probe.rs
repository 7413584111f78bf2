//! Trains an amortized probe on a frozen toy model and scores its
//! attributions against the ground truth.
//!
//! ```text
//! cargo run --release --example amortized_probe -- toy_model.json [input|hidden] [epochs] [seed] [probe.json] [lr]
//! ```

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffmask::diffmask::{attribute, train_probe, MaskMode, ProbeConfig};
use diffmask::metrics::{evaluate_against_ground_truth, js_divergence};
use diffmask::model::{kl_to_logits_plain, ModelParams};
use diffmask::toytask::{generate_dataset, ground_truth};

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let checkpoint = args.first().map_or("toy_model.json", String::as_str);
    let mode = MaskMode::parse(args.get(1).map_or("input", String::as_str))?;
    let mut config = ProbeConfig::default();
    if let Some(epochs) = args.get(2) {
        config.epochs = epochs.parse().expect("epochs must be an integer");
    }
    if let Some(seed) = args.get(3) {
        config.seed = seed.parse().expect("seed must be an integer");
    }
    if let Some(lr) = args.get(5) {
        config.lr = lr.parse().expect("lr must be a number");
    }

    let model = ModelParams::load_checkpoint(Path::new(checkpoint))?;
    let data = generate_dataset(1, 10_000, 10)?;
    let start = Instant::now();
    let trained = train_probe(&model, &data, &config, mode)?;
    for row in &trained.log {
        println!(
            "epoch {:>3}  layer {}  KL {:.4}  expected L0 {:.3}  lambda {:.3}",
            row.epoch, row.layer, row.mean_kl, row.mean_expected_l0, row.lambda
        );
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    let probe = &trained.probe;
    if let Some(out) = args.get(4) {
        probe.save_checkpoint(Path::new(out))?;
    }

    let truths: Vec<Vec<f64>> = data.validation.iter().map(ground_truth).collect();
    for &layer in mode.layers() {
        let attrs = data
            .validation
            .iter()
            .map(|ex| attribute(&model, probe, ex, layer, 0))
            .collect::<diffmask::Result<Vec<_>>>()?;
        let summary = evaluate_against_ground_truth(&attrs, &truths)?;
        let mut js_uniform = 0.0;
        for a in &attrs {
            let uniform = vec![1.0 / a.len() as f64; a.len()];
            js_uniform += js_divergence(&uniform, &a.normalized)?;
        }
        println!(
            "layer {layer}: KL {:.4}  JS {:.4} vs ground truth, JS {:.4} vs uniform",
            summary.mean_kl,
            summary.mean_js,
            js_uniform / attrs.len() as f64
        );
    }

    // fidelity of the masked model, one gate sample per example
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let last = *mode.layers().last().expect("every mode has a layer");
    let mut kl = 0.0;
    for ex in &data.validation {
        let trace = model.forward(ex);
        let gates = probe.sample_gates(&trace, last, &mut rng)?;
        let masked = probe.masked_logits(&model, &trace, ex.query, &gates.gates)?;
        kl += kl_to_logits_plain(&trace.class_probs, &masked);
    }
    println!("validation KL(y || masked) {:.4}", kl / data.validation.len() as f64);
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
