//! Samples the digit-counting dataset, writes it as JSON lines and prints a
//! few statistics together with one ground-truth attribution.
//!
//! ```text
//! cargo run --release --example generate_data -- [data.jsonl] [seed] [size]
//! ```

use std::path::Path;

use diffmask::toytask::{generate_dataset, ground_truth, ToyExample};

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let out = args.first().map_or("data.jsonl", String::as_str);
    let seed = args.get(1).map_or(1, |s| s.parse().expect("seed must be an integer"));
    let size = args.get(2).map_or(10_000, |s| s.parse().expect("size must be an integer"));
    let data = generate_dataset(seed, size, 10)?;
    data.save_jsonl(Path::new(out))?;

    let all: Vec<&ToyExample> = data.iter().collect();
    let positive = all.iter().filter(|e| e.label).count();
    let without_query = all
        .iter()
        .filter(|e| !(0..e.len()).any(|i| e.is_query_position(i)))
        .count();
    let mean_len = all.iter().map(|e| e.len()).sum::<usize>() as f64 / all.len() as f64;
    println!("wrote {out}: {} train, {} validation", data.train.len(), data.validation.len());
    println!("positive labels {:.3}", positive as f64 / all.len() as f64);
    println!("mean length {mean_len:.2}");
    println!("examples without a query digit {:.3}", without_query as f64 / all.len() as f64);

    let ex = ToyExample::new(vec![7, 3, 7, 1], (7, 1))?;
    println!("ground truth for {:?} / {:?}: {:?}", ex.digits, ex.query, ground_truth(&ex));
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
