//! Reference attribution methods: exhaustive erasure, leave-one-out,
//! integrated gradients and per-example REINFORCE gates.
//!
//! Erasure and leave-one-out delete positions (the GRU simply reads a shorter
//! sequence); the query is never touched. Because the feed-forward bottleneck
//! acts on each position independently, `h1` is computed once per example and
//! subsets only re-run the GRU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logistic, Tape, Tensor};
use crate::diffmask::{masked_hidden_logits, masked_input_logits, Baselines, MaskMode, PerExampleConfig, PerExampleGates, LagrangianState};
use crate::error::{Error, Result};
use crate::metrics::Attribution;
use crate::model::{argmax, kl_to_logits_plain, ModelParams, ModelVars};
use crate::optim::Adam;
use crate::toytask::ToyExample;

/// Longest sequence [`erasure_exact`] will enumerate.
pub const ERASURE_MAX_LEN: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureResult {
    /// Class predicted on the full sequence.
    pub predicted: usize,
    /// Every minimum-cardinality kept set that preserves the prediction, in
    /// lexicographic order.
    pub optimal_subsets: Vec<Vec<usize>>,
    /// Uniform over the lexicographically first optimum.
    pub attribution: Attribution,
}

impl ErasureResult {
    pub fn optimum_size(&self) -> usize {
        self.optimal_subsets[0].len()
    }

    pub fn canonical(&self) -> &[usize] {
        &self.optimal_subsets[0]
    }
}

/// Argmax of the model on the subsequence at `kept`.
pub fn subsequence_prediction(model: &ModelParams, h1: &[Vec<f64>], kept: &[usize]) -> usize {
    let sub: Vec<Vec<f64>> = kept.iter().map(|&i| h1[i].clone()).collect();
    argmax(&model.logits_from_hidden(&sub))
}

/// Whether deleting every position outside `kept` leaves the argmax unchanged.
pub fn preserves_prediction(model: &ModelParams, example: &ToyExample, kept: &[usize]) -> bool {
    let trace = model.forward(example);
    subsequence_prediction(model, &trace.h1, kept) == trace.predicted()
}

/// Calls `visit` with every `k`-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Searches all non-empty subsequences for the smallest kept sets that
/// preserve the prediction. Sizes are visited in increasing order, so the
/// search stops at the first size with a hit.
pub fn erasure_exact(model: &ModelParams, example: &ToyExample) -> Result<ErasureResult> {
    let n = example.len();
    if n > ERASURE_MAX_LEN {
        return Err(Error::TooLong {
            len: n,
            limit: ERASURE_MAX_LEN,
        });
    }
    let trace = model.forward(example);
    let predicted = trace.predicted();
    for k in 1..=n {
        let mut hits = Vec::new();
        for_each_combination(n, k, |subset| {
            if subsequence_prediction(model, &trace.h1, subset) == predicted {
                hits.push(subset.to_vec());
            }
        });
        if !hits.is_empty() {
            let attribution = Attribution::indicator(n, &hits[0]);
            return Ok(ErasureResult {
                predicted,
                optimal_subsets: hits,
                attribution,
            });
        }
    }
    Err(Error::InvalidArgument("erasure needs a non-empty sequence".into()))
}

/// `score_i = KL(y ‖ f(x without position i))`, normalized.
pub fn leave_one_out(model: &ModelParams, example: &ToyExample) -> Attribution {
    let n = example.len();
    if n <= 1 {
        return Attribution::from_raw(vec![1.0; n]);
    }
    let trace = model.forward(example);
    let raw = (0..n)
        .map(|skip| {
            let sub: Vec<Vec<f64>> = (0..n).filter(|&i| i != skip).map(|i| trace.h1[i].clone()).collect();
            kl_to_logits_plain(&trace.class_probs, &model.logits_from_hidden(&sub)).max(0.0)
        })
        .collect();
    Attribution::from_raw(raw)
}

/// Signed path integrals `Σ_d (x_{i,d} − b_d) · mean_k ∂f/∂x_{i,d}` along the
/// straight line from the baseline, using a right Riemann sum with `steps`
/// points. `grad` returns `∂f/∂x` for every position at the given inputs.
pub fn integrated_gradients_with<G>(inputs: &[Vec<f64>], baseline: &[f64], steps: usize, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least one step".into()));
    }
    let mut avg: Vec<Vec<f64>> = inputs.iter().map(|x| vec![0.0; x.len()]).collect();
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| x.iter().zip(baseline).map(|(&x, &b)| b + alpha * (x - b)).collect())
            .collect();
        for (acc, g) in avg.iter_mut().zip(grad(&point)?) {
            for (a, g) in acc.iter_mut().zip(g) {
                *a += g / steps as f64;
            }
        }
    }
    Ok(inputs
        .iter()
        .zip(&avg)
        .map(|(x, g)| x.iter().zip(baseline).zip(g).map(|((&x, &b), &g)| (x - b) * g).sum())
        .collect())
}

/// Signed integrated gradients of the predicted-class logit with respect to
/// the digit-embedding blocks.
pub fn integrated_gradients_signed(model: &ModelParams, example: &ToyExample, baseline: &[f64], steps: usize) -> Result<Vec<f64>> {
    let e = model.config.embed_dim;
    if baseline.len() != e {
        return Err(Error::Shape {
            op: "integrated_gradients",
            lhs: vec![e],
            rhs: vec![baseline.len()],
        });
    }
    let trace = model.forward(example);
    let class = trace.predicted();
    let inputs: Vec<Vec<f64>> = (0..trace.len()).map(|i| trace.digit_block(i).to_vec()).collect();
    integrated_gradients_with(&inputs, baseline, steps, |point| {
        let mut tape = Tape::new();
        let vars = ModelVars::new(&mut tape, model, false);
        let leaves: Vec<_> = point.iter().map(|b| tape.leaf(Tensor::vector(b.clone()))).collect();
        let mut h1 = Vec::with_capacity(leaves.len());
        for &leaf in &leaves {
            let h0 = vars.input(&mut tape, leaf, example.query)?;
            h1.push(vars.ffnn(&mut tape, h0)?);
        }
        let logits = vars.logits_from_hidden(&mut tape, &h1)?;
        let target = tape.slice(logits, class, 1)?;
        let grads = tape.backward(target)?;
        Ok(leaves.iter().map(|&l| grads.get_or_zeros(l, e)).collect())
    })
}

/// `|signed integrated gradients|`, normalized.
pub fn integrated_gradients(model: &ModelParams, example: &ToyExample, baseline: &[f64], steps: usize) -> Result<Attribution> {
    let signed = integrated_gradients_signed(model, example, baseline, steps)?;
    Ok(Attribution::from_raw(signed.into_iter().map(f64::abs).collect()))
}

/// Decay of the moving-average control variate.
pub const REINFORCE_BASELINE_DECAY: f64 = 0.9;

/// Per-example Bernoulli gates trained with the score-function estimator on
/// `E[Σ m_i] + λ·E[KL(y ‖ ŷ(m))]`. The expected-count term has the closed
/// form `Σ σ(θ_i)` and is differentiated exactly; the divergence term uses
/// `(KL − b̄)·(m_i − σ(θ_i))` with a moving-average baseline `b̄`.
pub fn reinforce_gates(
    model: &ModelParams,
    example: &ToyExample,
    baselines: &Baselines,
    config: &PerExampleConfig,
    mode: MaskMode,
) -> Result<PerExampleGates> {
    let trace = model.forward(example);
    let n = trace.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut logits = vec![config.init_location; n];
    let mut adam = Adam::new(config.lr, &[n]);
    let mut lagrangian = LagrangianState::new(config.margin);
    let mut control: Option<f64> = None;
    let mut kl_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let probs: Vec<f64> = logits.iter().map(|&t| logistic(t)).collect();
        let mask: Vec<f64> = probs.iter().map(|&p| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
        let masked = match mode {
            MaskMode::Input => masked_input_logits(model, &trace, example.query, &mask, &baselines.input)?,
            MaskMode::Hidden => masked_hidden_logits(model, &trace, &mask, &baselines.hidden)?,
        };
        let kl = kl_to_logits_plain(&trace.class_probs, &masked);
        if !kl.is_finite() {
            return Err(Error::Diverged { step });
        }
        let b = control.unwrap_or(kl);
        let advantage = lagrangian.lambda * (kl - b);
        let grad: Vec<f64> = probs
            .iter()
            .zip(&mask)
            .map(|(&p, &m)| p * (1.0 - p) + advantage * (m - p))
            .collect();
        adam.step(&mut [logits.as_mut_slice()], &[grad]);
        control = Some(REINFORCE_BASELINE_DECAY * b + (1.0 - REINFORCE_BASELINE_DECAY) * kl);
        lagrangian.ascend(kl, config.lr_lambda);
        kl_trace.push(kl);
    }
    Ok(PerExampleGates {
        keep: logits.iter().map(|&t| logistic(t)).collect(),
        locations: logits,
        lambda: lagrangian.lambda,
        kl_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_in_lexicographic_order() {
        let mut seen = Vec::new();
        for_each_combination(4, 2, |c| seen.push(c.to_vec()));
        assert_eq!(
            seen,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        let mut count = 0;
        for_each_combination(10, 3, |_| count += 1);
        assert_eq!(count, 120);
    }

    #[test]
    fn ig_on_linear_function_is_exact() {
        let w = [vec![2.0, -1.0], vec![0.5, 3.0]];
        let x = vec![vec![1.0, 2.0], vec![-1.0, 4.0]];
        let signed = integrated_gradients_with(&x, &[0.0, 0.0], 1, |_| Ok(w.to_vec())).unwrap();
        assert_eq!(signed, vec![2.0 * 1.0 - 2.0, -0.5 + 12.0]);
        let same = integrated_gradients_with(&x, &[0.0, 0.0], 0, |_| Ok(w.to_vec()));
        assert!(same.is_err());
    }

    #[test]
    fn ig_with_baseline_equal_to_input_is_zero() {
        let x = vec![vec![1.0, 2.0]];
        let signed = integrated_gradients_with(&x, &[1.0, 2.0], 8, |p| Ok(vec![vec![p[0][0], 1.0]])).unwrap();
        assert_eq!(signed, vec![0.0]);
    }
}
