mod common;

use diffmask::diffmask::MaskMode;
use diffmask::model::example_gradients;
use diffmask::toytask::ToyExample;

#[test]
fn every_primitive_matches_central_differences() {
    for seed in 0..3 {
        for (op, err) in common::op_gradient_errors(seed).unwrap() {
            assert!(err < 1e-4, "{op} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn input_probe_objective_matches_central_differences() {
    for seed in 0..3 {
        let (err, checked) = common::objective_gradient_error(MaskMode::Input, seed).unwrap();
        assert!(checked > 50, "only {checked} smooth coordinates");
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn hidden_probe_objective_matches_central_differences() {
    for seed in 0..3 {
        let (err, checked) = common::objective_gradient_error(MaskMode::Hidden, seed).unwrap();
        assert!(checked >= 8, "only {checked} smooth coordinates");
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn model_loss_gradient_matches_central_differences() {
    let model = common::small_model(4);
    let example = ToyExample::new(vec![2, 7, 7, 0, 2], (7, 2)).unwrap();
    let (_, grads) = example_gradients(&model, &example).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, grad) in grads.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate().step_by(3) {
            let mut plus = model.clone();
            plus.tensors_mut()[t].data_mut()[i] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[t].data_mut()[i] -= h;
            let fp = example_gradients(&plus, &example).unwrap().0;
            let fm = example_gradients(&minus, &example).unwrap().0;
            worst = worst.max(common::rel_error(analytic, (fp - fm) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-4, "relative error {worst:e}");
}
