//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use diffmask::autograd::{Tape, Tensor, Var};
use diffmask::diffmask::{objective_and_gradients, probe_value_mut, MaskMode, ProbeConfig, ProbeParams};
use diffmask::hardconcrete::HardConcrete;
use diffmask::model::{ModelConfig, ModelParams};
use diffmask::toytask::ToyExample;
use diffmask::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a − b| / max(|a| + |b|, floor)`: relative, but tolerant of gradients
/// that are zero on both sides.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-7)
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    /// Shapes of the differentiated inputs.
    shapes: Vec<Vec<usize>>,
    /// Inputs are drawn from `[lo, hi]`.
    range: (f64, f64),
    build: Build,
}

fn op_cases() -> Vec<OpCase> {
    let v3 = || vec![vec![3]];
    let v3v3 = || vec![vec![3], vec![3]];
    let wide = (-2.0, 2.0);
    vec![
        OpCase { name: "add", shapes: v3v3(), range: wide, build: |t, x| t.add(x[0], x[1]) },
        OpCase { name: "sub", shapes: v3v3(), range: wide, build: |t, x| t.sub(x[0], x[1]) },
        OpCase { name: "mul", shapes: v3v3(), range: wide, build: |t, x| t.mul(x[0], x[1]) },
        OpCase { name: "matmul", shapes: vec![vec![2, 3], vec![3, 4]], range: wide, build: |t, x| t.matmul(x[0], x[1]) },
        OpCase { name: "matmul_vec_mat", shapes: vec![vec![3], vec![3, 2]], range: wide, build: |t, x| t.matmul(x[0], x[1]) },
        OpCase { name: "matmul_mat_vec", shapes: vec![vec![2, 3], vec![3]], range: wide, build: |t, x| t.matmul(x[0], x[1]) },
        OpCase { name: "matmul_dot", shapes: v3v3(), range: wide, build: |t, x| t.matmul(x[0], x[1]) },
        OpCase { name: "concat", shapes: vec![vec![2], vec![3]], range: wide, build: |t, x| t.concat(x) },
        OpCase { name: "sigmoid", shapes: v3(), range: wide, build: |t, x| Ok(t.sigmoid(x[0])) },
        OpCase { name: "tanh", shapes: v3(), range: wide, build: |t, x| Ok(t.tanh(x[0])) },
        OpCase { name: "log", shapes: v3(), range: (0.5, 3.0), build: |t, x| Ok(t.log(x[0])) },
        OpCase { name: "exp", shapes: v3(), range: wide, build: |t, x| Ok(t.exp(x[0])) },
        // Kinks at ±0.25 are avoided by drawing away from them.
        OpCase { name: "min_const_active", shapes: v3(), range: (-2.0, -0.5), build: |t, x| Ok(t.min_const(x[0], 0.25)) },
        OpCase { name: "min_const_clipped", shapes: v3(), range: (0.5, 2.0), build: |t, x| Ok(t.min_const(x[0], 0.25)) },
        OpCase { name: "max_const_active", shapes: v3(), range: (0.5, 2.0), build: |t, x| Ok(t.max_const(x[0], 0.25)) },
        OpCase { name: "max_const_clipped", shapes: v3(), range: (-2.0, -0.5), build: |t, x| Ok(t.max_const(x[0], 0.25)) },
        OpCase { name: "affine", shapes: v3(), range: wide, build: |t, x| Ok(t.affine(x[0], -1.7, 0.3)) },
        OpCase { name: "sum", shapes: v3(), range: wide, build: |t, x| Ok(t.sum(x[0])) },
        OpCase { name: "mean", shapes: v3(), range: wide, build: |t, x| Ok(t.mean(x[0])) },
        OpCase { name: "embedding", shapes: vec![vec![4, 3]], range: wide, build: |t, x| t.embedding(x[0], 2) },
        OpCase { name: "softmax", shapes: v3(), range: wide, build: |t, x| t.softmax(x[0]) },
        OpCase { name: "log_softmax", shapes: v3(), range: wide, build: |t, x| t.log_softmax(x[0]) },
        OpCase { name: "reshape", shapes: vec![vec![6]], range: wide, build: |t, x| t.reshape(x[0], &[2, 3]) },
        OpCase { name: "scale", shapes: vec![vec![3], vec![1]], range: wide, build: |t, x| t.scale(x[0], x[1]) },
        OpCase { name: "slice", shapes: vec![vec![5]], range: wide, build: |t, x| t.slice(x[0], 1, 3) },
    ]
}

/// Reduces the op output to a scalar through fixed random weights, so every
/// output element contributes with a distinct coefficient.
fn evaluate(case: &OpCase, inputs: &[Vec<f64>], weights_seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(d, s)| Ok(tape.leaf(Tensor::new(s.clone(), d.clone())?)))
        .collect::<Result<_>>()?;
    let out = (case.build)(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    let total = tape.sum(prod);
    let grads = tape.backward(total)?;
    let g = vars.iter().zip(inputs).map(|(&v, d)| grads.get_or_zeros(v, d.len())).collect();
    Ok((tape.value(total).item(), g))
}

/// Largest relative error between reverse-mode and central-difference
/// gradients for every primitive op.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let inputs: Vec<Vec<f64>> = case
            .shapes
            .iter()
            .map(|s| (0..s.iter().product()).map(|_| rng.random_range(case.range.0..case.range.1)).collect())
            .collect();
        let weights_seed = rng.random();
        let (_, analytic) = evaluate(&case, &inputs, weights_seed)?;
        let mut worst: f64 = 0.0;
        for t in 0..inputs.len() {
            for i in 0..inputs[t].len() {
                let mut plus = inputs.clone();
                plus[t][i] += h;
                let mut minus = inputs.clone();
                minus[t][i] -= h;
                let numeric = (evaluate(&case, &plus, weights_seed)?.0 - evaluate(&case, &minus, weights_seed)?.0) / (2.0 * h);
                worst = worst.max(rel_error(analytic[t][i], numeric));
            }
        }
        out.push((case.name, worst));
    }
    Ok(out)
}

pub fn small_model(seed: u64) -> ModelParams {
    ModelParams::init(
        ModelConfig {
            embed_dim: 5,
            ffnn_hidden: 4,
            gru_hidden: 3,
        },
        seed,
    )
}

/// A probe with weights large enough that gates sit in the interior of
/// `(0, 1)` and the objective depends on every parameter.
pub fn random_probe(model: &ModelParams, mode: MaskMode, seed: u64) -> ProbeParams {
    let config = ProbeConfig {
        seed,
        init_location: 0.5,
        init_scale: 0.5,
        ..ProbeConfig::default()
    };
    let mut probe = ProbeParams::init(mode, model, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    for v in probe.input_baseline.data_mut().iter_mut().chain(probe.hidden_baseline.data_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    for l in &mut probe.lagrangian {
        l.lambda = rng.random_range(0.5..2.0);
    }
    probe
}

/// Largest relative error of the objective gradient (with fixed uniform
/// draws) against central differences over every probe parameter.
/// Parameters whose perturbation moves a gate across a rectifier kink are
/// skipped, since the objective is not differentiable there.
pub fn objective_gradient_error(mode: MaskMode, seed: u64) -> Result<(f64, usize)> {
    let model = small_model(seed);
    let probe = random_probe(&model, mode, seed);
    let example = ToyExample::new(vec![3, 1, 4, 1, 5, 9, 2], (1, 4))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0dd);
    let uniforms: Vec<Vec<f64>> = (0..probe.layers.len()).map(|_| (0..example.len()).map(|_| rng.random()).collect()).collect();
    let base = objective_and_gradients(&model, &probe, &example, &uniforms)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, grad) in base.gradients.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            let mut plus = probe.clone();
            *probe_value_mut(&mut plus, t, i) += h;
            let mut minus = probe.clone();
            *probe_value_mut(&mut minus, t, i) -= h;
            let fp = objective_and_gradients(&model, &plus, &example, &uniforms)?.value;
            let fm = objective_and_gradients(&model, &minus, &example, &uniforms)?.value;
            let numeric = (fp - fm) / (2.0 * h);
            // A one-sided kink shows up as disagreeing one-sided slopes.
            let left = (base.value - fm) / h;
            let right = (fp - base.value) / h;
            if (left - right).abs() > 1e-3 * (left.abs() + right.abs()).max(1.0) {
                continue;
            }
            worst = worst.max(rel_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Monte Carlo estimate of `P(z ≠ 0)` with `n` draws, plus the number of
/// draws that landed on exactly one.
pub fn open_frequency(gate: &HardConcrete, location: f64, n: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut open, mut ones) = (0usize, 0usize);
    for _ in 0..n {
        let z = gate.sample_rng(location, &mut rng).z;
        if z != 0.0 {
            open += 1;
        }
        if z == 1.0 {
            ones += 1;
        }
    }
    (open as f64 / n as f64, ones)
}

/// Largest relative error of `dz/dγ` from the tape against central
/// differences of the plain sampler, over `points` interior samples.
pub fn reparameterization_error(points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let h = 1e-6;
    while done < points {
        let tau = rng.random_range(0.1..1.0);
        let gate = HardConcrete::new(tau, -0.2, 1.0)?;
        let location = rng.random_range(-3.0..3.0);
        let u: f64 = rng.random();
        let z = gate.sample(location, u).z;
        // Interior points only: the rectifier is flat outside (0, 1).
        if !(0.01..0.99).contains(&z) {
            continue;
        }
        let mut tape = Tape::new();
        let loc = tape.leaf(Tensor::vector(vec![location]));
        let zv = gate.sample_on_tape(&mut tape, loc, &[u])?;
        let total = tape.sum(zv);
        let analytic = tape.backward(total)?.get_or_zeros(loc, 1)[0];
        let numeric = (gate.sample(location + h, u).z - gate.sample(location - h, u).z) / (2.0 * h);
        worst = worst.max(rel_error(analytic, numeric));
        done += 1;
    }
    Ok(worst)
}
