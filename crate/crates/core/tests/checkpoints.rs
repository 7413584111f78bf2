mod common;

use std::fs;

use diffmask::diffmask::{MaskMode, ProbeParams};
use diffmask::model::{ModelConfig, ModelParams};
use diffmask::toytask::{generate_dataset, ToyDataset};
use diffmask::Error;

#[test]
fn model_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = ModelParams::init(ModelConfig::default(), 9);
    model.save_checkpoint(&path).unwrap();
    assert_eq!(ModelParams::load_checkpoint(&path).unwrap(), model);
}

#[test]
fn probe_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = common::small_model(2);
    for mode in [MaskMode::Input, MaskMode::Hidden] {
        let path = dir.path().join(format!("{}.json", mode.as_str()));
        let probe = common::random_probe(&model, mode, 3);
        probe.save_checkpoint(&path).unwrap();
        assert_eq!(ProbeParams::load_checkpoint(&path, &model).unwrap(), probe);
    }
}

#[test]
fn truncated_checkpoint_is_a_checkpoint_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ModelParams::init(ModelConfig::default(), 1).save_checkpoint(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    match ModelParams::load_checkpoint(&path) {
        Err(e @ Error::Checkpoint(_)) => {
            assert!(e.to_string().contains("model.json"), "{e}");
            assert_eq!(e.exit_code(), 1);
        }
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nowhere.json");
    let err = ModelParams::load_checkpoint(&path).unwrap_err();
    assert!(matches!(err, Error::Missing(_)), "{err:?}");
    assert!(err.to_string().contains("nowhere.json"), "{err}");
}

#[test]
fn tensor_of_wrong_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ModelParams::init(ModelConfig::default(), 1).save_checkpoint(&path).unwrap();
    let small = ModelConfig {
        gru_hidden: 3,
        ..ModelConfig::default()
    };
    assert!(ModelParams::load_checkpoint_with(&path, small).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let data = generate_dataset(4, 200, 10).unwrap();
    data.save_jsonl(&path).unwrap();
    let back = ToyDataset::load_jsonl(&path).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.validation, data.validation);
}

#[test]
fn corrupted_dataset_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    generate_dataset(4, 50, 10).unwrap().save_jsonl(&path).unwrap();
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[6] = lines[6].replace("\"label\":true", "\"label\":X").replace("\"label\":false", "\"label\":X");
    fs::write(&path, lines.join("\n")).unwrap();
    match ToyDataset::load_jsonl(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
