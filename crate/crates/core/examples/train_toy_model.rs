//! Trains the toy classifier on 10k generated examples and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_toy_model -- [checkpoint.json] [epochs] [data-size]
//! ```

use std::path::Path;
use std::time::Instant;

use diffmask::model::{self, ModelConfig, TrainConfig};
use diffmask::toytask::generate_dataset;

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let out = args.first().map_or("toy_model.json", String::as_str);
    let mut config = TrainConfig::default();
    if let Some(epochs) = args.get(1) {
        config.epochs = epochs.parse().expect("epochs must be an integer");
    }
    let size = args.get(2).map_or(10_000, |s| s.parse().expect("data size must be an integer"));
    let data = generate_dataset(1, size, 10)?;
    let start = Instant::now();
    let trained = model::fit(&data, ModelConfig::default(), &config)?;
    for e in &trained.log {
        println!(
            "epoch {:>2}  loss {:.4}  validation accuracy {:.4}",
            e.epoch, e.train_loss, e.validation_accuracy
        );
    }
    println!(
        "best validation accuracy {:.4} after {:.1}s (target {:.2}: {})",
        trained.validation_accuracy,
        start.elapsed().as_secs_f64(),
        config.target_accuracy,
        if trained.validation_accuracy >= config.target_accuracy { "reached" } else { "missed" }
    );
    trained.params.save_checkpoint(Path::new(out))?;
    println!("saved {out}");
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
