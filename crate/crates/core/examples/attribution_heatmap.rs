//! Attributes one example with a trained probe at every probe layer and
//! writes the heatmap as SVG (rows are layers, columns are digits).
//!
//! ```text
//! cargo run --release --example attribution_heatmap -- toy_model.json probe.json [heatmap.svg] [digits] [n,m]
//! ```

use std::path::Path;

use diffmask::diffmask::{attribute, ProbeParams};
use diffmask::heatmap::{render_svg, HeatmapRow};
use diffmask::model::ModelParams;
use diffmask::toytask::{ground_truth, ToyExample};

fn digits(s: &str) -> Vec<u8> {
    s.split(',').map(|d| d.trim().parse().expect("digits are 0-9")).collect()
}

pub fn run(args: &[String]) -> diffmask::Result<()> {
    let model = ModelParams::load_checkpoint(Path::new(args.first().map_or("toy_model.json", String::as_str)))?;
    let probe = ProbeParams::load_checkpoint(Path::new(args.get(1).map_or("probe.json", String::as_str)), &model)?;
    let out = args.get(2).map_or("heatmap.svg", String::as_str);
    let seq = digits(args.get(3).map_or("7,3,7,1", String::as_str));
    let query = digits(args.get(4).map_or("7,1", String::as_str));
    let ex = ToyExample::new(seq, (query[0], query[1]))?;

    println!("{:?} / query {:?}, prediction {}", ex.digits, ex.query, model.forward(&ex).predicted());
    println!("ground truth   {:?}", ground_truth(&ex));
    let mut rows = Vec::new();
    for &layer in probe.mode.layers() {
        let a = attribute(&model, &probe, &ex, layer, 0)?;
        println!("layer {layer} keep   {:.3?}", a.raw);
        println!("layer {layer} normed {:.3?}", a.normalized);
        rows.push(HeatmapRow {
            label: format!("ℓ={layer}"),
            values: a.raw,
        });
    }
    let columns: Vec<String> = ex.digits.iter().map(u8::to_string).collect();
    let title = format!("query ({}, {})", ex.query.0, ex.query.1);
    std::fs::write(out, render_svg(&title, &columns, &rows))?;
    println!("wrote {out}");
    Ok(())
}

fn main() -> diffmask::Result<()> {
    run(&std::env::args().skip(1).collect::<Vec<_>>())
}
