//! Per-example gates from non-amortized DiffMask and from REINFORCE, scored
//! against the exact erasure optimum on validation examples.
//!
//! ```text
//! cargo run --release --example nonamortized_vs_reinforce -- toy_model.json [probe.json|-] [examples]
//! ```
//!
//! With a probe checkpoint, masked positions are replaced by the baselines
//! that probe learned; without one (`-`), by zeros.

use std::path::Path;
use std::time::Instant;

use diffmask::diffmask::{Baselines, MaskMode, PerExampleConfig, ProbeParams};
use diffmask::experiments::agreement_table;
use diffmask::hardconcrete::HardConcrete;
use diffmask::model::ModelParams;
use diffmask::toytask::generate_dataset;

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let model = ModelParams::load_checkpoint(Path::new(args.first().map_or("toy_model.json", String::as_str)))?;
    let (baselines, mode) = match args.get(1).filter(|p| p.as_str() != "-") {
        Some(p) => {
            let probe = ProbeParams::load_checkpoint(Path::new(p), &model)?;
            (Baselines::from_probe(&probe), probe.mode)
        }
        None => (Baselines::zeros(&model), MaskMode::Hidden),
    };
    let count = args.get(2).map_or(100, |c| c.parse().expect("examples must be an integer"));
    let data = generate_dataset(1, 10_000, 10)?;
    let examples: Vec<_> = data.validation.iter().take(count).cloned().collect();

    let start = Instant::now();
    let run = agreement_table(&model, &examples, &baselines, HardConcrete::default(), &PerExampleConfig::default(), mode)?;
    println!("{:<12} {:>9} {:>9} {:>9} {:>9} {:>10}", "method", "precision", "recall", "F1", "sparsity", "optimality");
    for m in &run.table {
        let r = &m.report;
        println!(
            "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>10.3}",
            m.method, r.precision, r.recall, r.f1, r.sparsity, r.optimality
        );
    }
    let ties_or_wins = run.per_example_f1.iter().filter(|(d, r)| d >= r).count();
    println!(
        "DiffMask F1 >= REINFORCE F1 on {ties_or_wins}/{} examples ({:.1}s)",
        run.per_example_f1.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
