//! Exhaustive erasure on the classic example and the size of the smallest
//! sufficient subsequence across longer validation examples: the search
//! happily keeps a single digit even though the model counted all of them.
//!
//! ```text
//! cargo run --release --example erasure_search -- toy_model.json
//! ```

use std::path::Path;

use diffmask::baselines::{erasure_exact, leave_one_out};
use diffmask::model::ModelParams;
use diffmask::toytask::{generate_dataset, ToyExample};

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let model = ModelParams::load_checkpoint(Path::new(args.first().map_or("toy_model.json", String::as_str)))?;
    let ex = ToyExample::new(vec![7, 3, 7, 1], (7, 1))?;
    let found = erasure_exact(&model, &ex)?;
    println!("{:?} / query {:?}: prediction {}", ex.digits, ex.query, found.predicted);
    for subset in &found.optimal_subsets {
        let kept: Vec<u8> = subset.iter().map(|&i| ex.digits[i]).collect();
        println!("  minimal kept positions {subset:?} = digits {kept:?}");
    }
    println!("  leave-one-out {:.3?}", leave_one_out(&model, &ex).normalized);

    let data = generate_dataset(1, 10_000, 10)?;
    let long: Vec<&ToyExample> = data.validation.iter().filter(|e| e.len() >= 6).collect();
    let mut sizes = vec![0usize; 11];
    for e in &long {
        sizes[erasure_exact(&model, e)?.optimum_size()] += 1;
    }
    let mean = sizes.iter().enumerate().map(|(k, c)| k * c).sum::<usize>() as f64 / long.len() as f64;
    println!("validation examples of length >= 6: {}", long.len());
    for (k, c) in sizes.iter().enumerate().filter(|(_, c)| **c > 0) {
        println!("  optimum keeps {k} digit(s): {c}");
    }
    println!("mean optimum size {mean:.3}");
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
