mod common;

use diffmask::diffmask::{aggregate_votes, masked_hidden_logits, masked_input_logits, mask_hidden, MaskMode, ProbeParams};
use diffmask::hardconcrete::HardConcrete;
use diffmask::metrics::{js_divergence, kl_divergence, mask_agreement, normalize};
use diffmask::toytask::{count_label, ground_truth, sample_example, ToyExample, MAX_LEN};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|raw| normalize(&raw))
}

fn pair_of_distributions() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))
}

fn example() -> impl Strategy<Value = ToyExample> {
    any::<u64>().prop_map(|seed| sample_example(&mut ChaCha8Rng::seed_from_u64(seed), MAX_LEN))
}

proptest! {
    #[test]
    fn normalized_scores_are_a_distribution(raw in prop::collection::vec(0.0f64..5.0, 1..20)) {
        let p = normalize(&raw);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergences_are_bounded((p, q) in pair_of_distributions()) {
        let kl = kl_divergence(&p, &q).unwrap();
        let js = js_divergence(&p, &q).unwrap();
        prop_assert!(kl >= -1e-12);
        prop_assert!((-1e-12..=std::f64::consts::LN_2 + 1e-12).contains(&js));
        prop_assert!((js - js_divergence(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn extra_votes_never_reopen_a_gate(
        first in prop::collection::vec(0.0f64..1.0, 1..10),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let second: Vec<f64> = first.iter().map(|_| rng.random::<f64>()).collect();
        let one = aggregate_votes(std::slice::from_ref(&first));
        let two = aggregate_votes(&[first.clone(), second]);
        for (a, b) in one.iter().zip(&two) {
            prop_assert!(b <= a);
            if *a == 0.0 { prop_assert_eq!(*b, 0.0); }
        }
    }

    #[test]
    fn samples_lie_in_half_open_unit_interval(location in -30.0f64..30.0, u in 0.0f64..=1.0, tau in 0.01f64..2.0) {
        let gate = HardConcrete::new(tau, -0.2, 1.0).unwrap();
        let z = gate.sample(location, u).z;
        prop_assert!((0.0..1.0).contains(&z), "z = {}", z);
    }

    #[test]
    fn ground_truth_is_uniform_over_query_positions(ex in example()) {
        let gt = ground_truth(&ex);
        prop_assert!((gt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let hits: Vec<usize> = (0..ex.len()).filter(|&i| ex.is_query_position(i)).collect();
        if hits.is_empty() {
            prop_assert!(gt.iter().all(|&g| (g - 1.0 / ex.len() as f64).abs() < 1e-12));
        } else {
            for i in 0..ex.len() {
                let expected = if hits.contains(&i) { 1.0 / hits.len() as f64 } else { 0.0 };
                prop_assert!((gt[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_only_depends_on_query_digits(ex in example()) {
        let kept: Vec<u8> = ex.digits.iter().copied().filter(|&d| d == ex.query.0 || d == ex.query.1).collect();
        prop_assert_eq!(count_label(&ex.digits, ex.query), count_label(&kept, ex.query));
    }

    #[test]
    fn open_gates_reproduce_the_model(ex in example(), seed in 0u64..4) {
        let model = common::small_model(seed);
        let trace = model.forward(&ex);
        let ones = vec![1.0; ex.len()];
        let b = vec![0.3; 2];
        prop_assert_eq!(mask_hidden(&trace, &ones, &b).unwrap(), trace.h1.clone());
        prop_assert_eq!(masked_hidden_logits(&model, &trace, &ones, &b).unwrap(), trace.logits.clone());
        let b = vec![0.3; model.config.embed_dim];
        prop_assert_eq!(masked_input_logits(&model, &trace, ex.query, &ones, &b).unwrap(), trace.logits.clone());
    }

    #[test]
    fn closed_gates_hide_the_position(ex in example(), seed in 0u64..4, pos in 0usize..MAX_LEN, digit in 0u8..10) {
        let model = common::small_model(seed);
        let pos = pos % ex.len();
        let mut changed = ex.digits.clone();
        changed[pos] = digit;
        let changed = ToyExample::new(changed, ex.query).unwrap();
        let (a, c) = (model.forward(&ex), model.forward(&changed));
        let mut gates = vec![0.7; ex.len()];
        gates[pos] = 0.0;
        let b = vec![-0.1; model.config.embed_dim];
        prop_assert_eq!(
            masked_input_logits(&model, &a, ex.query, &gates, &b).unwrap(),
            masked_input_logits(&model, &c, ex.query, &gates, &b).unwrap()
        );
        let b = vec![0.2, -0.4];
        prop_assert_eq!(
            masked_hidden_logits(&model, &a, &gates, &b).unwrap(),
            masked_hidden_logits(&model, &c, &gates, &b).unwrap()
        );
    }

    #[test]
    fn agreement_scores_are_bounded(
        kept in prop::collection::btree_set(0usize..8, 0..8),
        optimum in prop::collection::btree_set(0usize..8, 1..8),
        preserved in any::<bool>(),
    ) {
        let kept: Vec<usize> = kept.into_iter().collect();
        let optimum: Vec<usize> = optimum.into_iter().collect();
        let row = mask_agreement(&kept, &[optimum.clone()], 8, preserved).unwrap();
        for v in [row.precision, row.recall, row.f1, row.sparsity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if kept == optimum && preserved {
            prop_assert_eq!(row.f1, 1.0);
            prop_assert!(row.optimal);
        }
    }
}

#[test]
fn probe_checkpoint_rejects_mismatched_model() {
    let model = common::small_model(0);
    let probe = ProbeParams::init(MaskMode::Input, &model, &Default::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.json");
    probe.save_checkpoint(&path).unwrap();
    let other = diffmask::model::ModelParams::init(
        diffmask::model::ModelConfig {
            embed_dim: 7,
            ffnn_hidden: 4,
            gru_hidden: 3,
        },
        0,
    );
    assert!(ProbeParams::load_checkpoint(&path, &other).is_err());
}
