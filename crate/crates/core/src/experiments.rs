//! End-to-end comparisons built from the other modules: the ground-truth
//! divergence table, the mask-agreement table against the erasure oracle,
//! probe stability across seeds and the linear separability of the
//! bottleneck.

use serde::{Deserialize, Serialize};

use crate::baselines::{erasure_exact, integrated_gradients, leave_one_out, reinforce_gates, subsequence_prediction};
use crate::diffmask::{attribute, train_probe_nonamortized, Baselines, MaskMode, PerExampleConfig, PerExampleGates, ProbeParams};
use crate::error::{Error, Result};
use crate::hardconcrete::HardConcrete;
use crate::metrics::{aggregate_agreement, evaluate_against_ground_truth, mask_agreement, AgreementReport, Attribution, DivergenceSummary, ReportRow};
use crate::model::ModelParams;
use crate::toytask::{ground_truth, ToyExample, NUM_DIGITS};

pub const DIFFMASK: &str = "diffmask";
pub const ERASURE: &str = "erasure";
pub const LEAVE_ONE_OUT: &str = "leave-one-out";
pub const INTEGRATED_GRADIENTS: &str = "integrated-gradients";
pub const REINFORCE: &str = "reinforce";

/// Riemann steps used for integrated gradients in the comparison.
pub const IG_STEPS: usize = 64;

/// Seed of the gate samples behind every evaluation attribution.
pub const ATTRIBUTION_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodDivergence {
    pub method: String,
    pub summary: DivergenceSummary,
}

/// Mean divergence of each method's attributions from the ground truth.
/// DiffMask uses the probe's deepest layer.
pub fn divergence_table(model: &ModelParams, probe: &ProbeParams, examples: &[ToyExample]) -> Result<Vec<MethodDivergence>> {
    let layer = *probe.mode.layers().last().expect("every mode has a layer");
    let truths: Vec<Vec<f64>> = examples.iter().map(ground_truth).collect();
    let zero = vec![0.0; model.config.embed_dim];
    let mut diffmask = Vec::with_capacity(examples.len());
    let mut erasure = Vec::with_capacity(examples.len());
    let mut loo = Vec::with_capacity(examples.len());
    let mut ig = Vec::with_capacity(examples.len());
    for ex in examples {
        diffmask.push(attribute(model, probe, ex, layer, ATTRIBUTION_SEED)?);
        erasure.push(erasure_exact(model, ex)?.attribution);
        loo.push(leave_one_out(model, ex));
        ig.push(integrated_gradients(model, ex, &zero, IG_STEPS)?);
    }
    let rows = [
        (DIFFMASK, diffmask),
        (ERASURE, erasure),
        (LEAVE_ONE_OUT, loo),
        (INTEGRATED_GRADIENTS, ig),
    ];
    rows.into_iter()
        .map(|(method, attrs)| {
            Ok(MethodDivergence {
                method: method.to_string(),
                summary: evaluate_against_ground_truth(&attrs, &truths)?,
            })
        })
        .collect()
}

pub fn divergence_rows(table: &[MethodDivergence]) -> Vec<ReportRow> {
    table
        .iter()
        .flat_map(|m| {
            [
                ReportRow::new(&m.method, "kl", m.summary.mean_kl),
                ReportRow::new(&m.method, "kl_unsmoothed", m.summary.mean_kl_unsmoothed),
                ReportRow::new(&m.method, "js", m.summary.mean_js),
            ]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAgreement {
    pub method: String,
    pub report: AgreementReport,
}

/// Per-example kept sets of one method together with the oracle result.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementRun {
    pub table: Vec<MethodAgreement>,
    /// `(diffmask F1, reinforce F1)` per example.
    pub per_example_f1: Vec<(f64, f64)>,
}

fn agreement_of(model: &ModelParams, example: &ToyExample, optima: &[Vec<usize>], gates: &PerExampleGates) -> Result<crate::metrics::ExampleAgreement> {
    let kept = gates.kept_set();
    let trace = model.forward(example);
    let preserved = !kept.is_empty() && subsequence_prediction(model, &trace.h1, &kept) == trace.predicted();
    mask_agreement(&kept, optima, example.len(), preserved)
}

/// Non-amortized DiffMask and REINFORCE gates fitted per example, scored by
/// token-level agreement with the exact erasure optimum. Kept sets are
/// positions with keep score above one half; a set counts as optimal when
/// deleting everything else keeps the prediction and it has the optimum's
/// size.
pub fn agreement_table(
    model: &ModelParams,
    examples: &[ToyExample],
    baselines: &Baselines,
    gate: HardConcrete,
    config: &PerExampleConfig,
    mode: MaskMode,
) -> Result<AgreementRun> {
    let mut dm = Vec::with_capacity(examples.len());
    let mut rf = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let oracle = erasure_exact(model, ex)?;
        let cfg = PerExampleConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let diffmask = train_probe_nonamortized(model, ex, baselines, gate, &cfg, mode)?;
        let reinforce = reinforce_gates(model, ex, baselines, &cfg, mode)?;
        dm.push(agreement_of(model, ex, &oracle.optimal_subsets, &diffmask)?);
        rf.push(agreement_of(model, ex, &oracle.optimal_subsets, &reinforce)?);
    }
    let oracle = AgreementReport {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
        sparsity: examples
            .iter()
            .map(|ex| Ok(1.0 - erasure_exact(model, ex)?.optimum_size() as f64 / ex.len() as f64))
            .sum::<Result<f64>>()?
            / examples.len().max(1) as f64,
        optimality: 1.0,
        count: examples.len(),
    };
    Ok(AgreementRun {
        per_example_f1: dm.iter().zip(&rf).map(|(d, r)| (d.f1, r.f1)).collect(),
        table: vec![
            MethodAgreement {
                method: ERASURE.into(),
                report: oracle,
            },
            MethodAgreement {
                method: DIFFMASK.into(),
                report: aggregate_agreement(&dm),
            },
            MethodAgreement {
                method: REINFORCE.into(),
                report: aggregate_agreement(&rf),
            },
        ],
    })
}

pub fn agreement_rows(table: &[MethodAgreement]) -> Vec<ReportRow> {
    table
        .iter()
        .flat_map(|m| {
            [
                ReportRow::new(&m.method, "precision", m.report.precision),
                ReportRow::new(&m.method, "recall", m.report.recall),
                ReportRow::new(&m.method, "f1", m.report.f1),
                ReportRow::new(&m.method, "sparsity", m.report.sparsity),
                ReportRow::new(&m.method, "optimality", m.report.optimality),
            ]
        })
        .collect()
}

/// Mean over examples and positions of the standard deviation (across
/// probes) of the normalized attribution.
pub fn attribution_stability(model: &ModelParams, probes: &[ProbeParams], examples: &[ToyExample], layer: usize) -> Result<f64> {
    if probes.len() < 2 {
        return Err(Error::InvalidArgument("stability needs at least two probes".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for ex in examples {
        let attrs: Vec<Attribution> = probes
            .iter()
            .map(|p| attribute(model, p, ex, layer, ATTRIBUTION_SEED))
            .collect::<Result<_>>()?;
        for i in 0..ex.len() {
            let values: Vec<f64> = attrs.iter().map(|a| a.normalized[i]).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
            total += var.sqrt();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Role of a digit with respect to the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryRole {
    First,
    Second,
    Other,
}

impl QueryRole {
    pub fn of(digit: u8, (n, m): (u8, u8)) -> Self {
        if digit == n {
            Self::First
        } else if digit == m {
            Self::Second
        } else {
            Self::Other
        }
    }

    fn index(self) -> usize {
        match self {
            Self::First => 0,
            Self::Second => 1,
            Self::Other => 2,
        }
    }
}

/// Bottleneck output of every `(digit, query)` combination.
pub fn bottleneck_points(model: &ModelParams) -> Vec<(Vec<f64>, QueryRole)> {
    let mut points = Vec::new();
    for n in 0..NUM_DIGITS as u8 {
        for m in 0..NUM_DIGITS as u8 {
            if n == m {
                continue;
            }
            for d in 0..NUM_DIGITS as u8 {
                let h1 = model.ffnn(&model.input_vector(d, (n, m)));
                points.push((h1, QueryRole::of(d, (n, m))));
            }
        }
    }
    points
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    /// Accuracy of the best linear split of query digits (either) from the rest.
    pub membership: f64,
    /// Accuracy of a linear three-way split into first query digit, second
    /// query digit and other.
    pub roles: f64,
}

/// Fits linear classifiers to the bottleneck outputs and reports their
/// training accuracy; 1.0 means the classes are linearly separable.
pub fn separability(model: &ModelParams) -> Separability {
    let points = bottleneck_points(model);
    let xs: Vec<Vec<f64>> = points.iter().map(|(h, _)| h.clone()).collect();
    let membership: Vec<usize> = points.iter().map(|(_, r)| usize::from(*r != QueryRole::Other)).collect();
    let roles: Vec<usize> = points.iter().map(|(_, r)| r.index()).collect();
    Separability {
        membership: linear_fit_accuracy(&xs, &membership, 2),
        roles: linear_fit_accuracy(&xs, &roles, 3),
    }
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features, returning training accuracy.
pub fn linear_fit_accuracy(xs: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let Some(first) = xs.first() else {
        return 1.0;
    };
    let d = first.len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let z: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut v: Vec<f64> = (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect();
            v.push(1.0);
            v
        })
        .collect();
    let mut w = vec![vec![0.0; d + 1]; classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> { w.iter().map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
    for _ in 0..5000 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (x, &y) in z.iter().zip(labels) {
            let p = crate::model::softmax(&scores(&w, x));
            for c in 0..classes {
                let err = p[c] - if c == y { 1.0 } else { 0.0 };
                for (g, xi) in grad[c].iter_mut().zip(x) {
                    *g += err * xi / n;
                }
            }
        }
        for (wc, gc) in w.iter_mut().zip(&grad) {
            for (a, g) in wc.iter_mut().zip(gc) {
                *a -= 2.0 * g;
            }
        }
    }
    let correct = z
        .iter()
        .zip(labels)
        .filter(|(x, &y)| crate::model::argmax(&scores(&w, x)) == y)
        .count();
    correct as f64 / n
}
