//! Linear separability of the 2-d bottleneck outputs: one point per
//! `(digit, query)` combination, labelled by the digit's role in the query.
//!
//! ```text
//! cargo run --release --example separability -- toy_model.json
//! ```

use std::path::Path;

use diffmask::experiments::separability;
use diffmask::model::ModelParams;

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let path = args.first().map_or("toy_model.json", String::as_str);
    let model = ModelParams::load_checkpoint(Path::new(path))?;
    let s = separability(&model);
    println!("first / second / other query role: {:.4}", s.roles);
    println!("query digit vs other:              {:.4}", s.membership);
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
