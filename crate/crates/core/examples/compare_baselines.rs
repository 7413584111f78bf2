//! Divergence of each attribution method from the ground truth on the
//! validation split: DiffMask (deepest probe layer), exhaustive erasure,
//! leave-one-out and integrated gradients.
//!
//! ```text
//! cargo run --release --example compare_baselines -- toy_model.json probe.json [examples]
//! ```

use std::path::Path;

use diffmask::diffmask::ProbeParams;
use diffmask::experiments::divergence_table;
use diffmask::model::ModelParams;
use diffmask::toytask::generate_dataset;

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let model = ModelParams::load_checkpoint(Path::new(args.first().map_or("toy_model.json", String::as_str)))?;
    let probe = ProbeParams::load_checkpoint(Path::new(args.get(1).map_or("probe.json", String::as_str)), &model)?;
    let data = generate_dataset(1, 10_000, 10)?;
    let count = args.get(2).map_or(data.validation.len(), |c| c.parse().expect("examples must be an integer"));
    let table = divergence_table(&model, &probe, &data.validation[..count.min(data.validation.len())])?;
    println!("{:<22} {:>10} {:>14} {:>10}", "method", "KL", "KL unsmoothed", "JS");
    for row in &table {
        let s = &row.summary;
        println!("{:<22} {:>10.4} {:>14.4} {:>10.4}", row.method, s.mean_kl, s.mean_kl_unsmoothed, s.mean_js);
    }
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
