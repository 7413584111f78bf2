//! Runs every example end to end on tiny inputs.

#[allow(dead_code)]
#[path = "../examples/generate_data.rs"]
mod generate_data;
#[allow(dead_code)]
#[path = "../examples/train_toy_model.rs"]
mod train_toy_model;
#[allow(dead_code)]
#[path = "../examples/separability.rs"]
mod separability;
#[allow(dead_code)]
#[path = "../examples/erasure_search.rs"]
mod erasure_search;
#[allow(dead_code)]
#[path = "../examples/amortized_probe.rs"]
mod amortized_probe;
#[allow(dead_code)]
#[path = "../examples/attribution_heatmap.rs"]
mod attribution_heatmap;
#[allow(dead_code)]
#[path = "../examples/compare_baselines.rs"]
mod compare_baselines;
#[allow(dead_code)]
#[path = "../examples/nonamortized_vs_reinforce.rs"]
mod nonamortized_vs_reinforce;

fn call(run: fn(&[String]) -> diffmask::Result<()>, args: &[&str]) {
    run(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();
}

#[test]
fn examples_run_on_tiny_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |f: &str| dir.path().join(f).display().to_string();
    let (model, probe, svg, data) = (p("model.json"), p("probe.json"), p("heatmap.svg"), p("data.jsonl"));

    call(generate_data::run, &[&data, "3", "200"]);
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 200);
    call(train_toy_model::run, &[&model, "1", "300"]);
    call(hard_concrete::run, &["2000"]);
    call(separability::run, &[&model]);
    call(erasure_search::run, &[&model]);
    call(amortized_probe::run, &[&model, "input", "1", "4", &probe]);
    call(attribution_heatmap::run, &[&model, &probe, &svg, "7,3,7,1", "7,1"]);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
    call(compare_baselines::run, &[&model, &probe, "10"]);
    call(nonamortized_vs_reinforce::run, &[&model, &probe, "3"]);
    call(nonamortized_vs_reinforce::run, &[&model, "-", "2"]);
}
