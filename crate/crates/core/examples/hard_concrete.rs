//! Samples the Hard Concrete gate and compares Monte Carlo estimates of the
//! probability of a non-zero gate with the closed form.
//!
//! ```text
//! cargo run --release --example hard_concrete -- [samples]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffmask::hardconcrete::HardConcrete;

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let samples: usize = args.first().map_or(100_000, |s| s.parse().expect("samples must be an integer"));
    let gate = HardConcrete::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    println!(
        "temperature {}, stretch ({}, {})",
        gate.temperature, gate.left, gate.right
    );
    println!("{:>9} {:>12} {:>12} {:>10} {:>10}", "location", "P(z>0)", "closed form", "P(z=0)", "mean z");
    for location in [-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0] {
        let (mut open, mut total) = (0usize, 0.0);
        for _ in 0..samples {
            let z = gate.sample_rng(location, &mut rng).z;
            open += usize::from(z > 0.0);
            total += z;
        }
        let p = open as f64 / samples as f64;
        println!(
            "{location:>9.1} {p:>12.4} {:>12.4} {:>10.4} {:>10.4}",
            gate.gate_open_prob(location),
            1.0 - p,
            total / samples as f64
        );
    }
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
