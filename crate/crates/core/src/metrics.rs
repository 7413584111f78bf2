//! Divergences against ground-truth attributions and token-level agreement
//! with the erasure oracle.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing mass added to the second argument of [`kl_divergence`].
pub const KL_EPS: f64 = 1e-8;

/// Non-negative per-position scores and their normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl Attribution {
    /// Normalizes `raw` to sum to one; an all-zero vector normalizes to the
    /// uniform distribution.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let normalized = normalize(&raw);
        Self { raw, normalized }
    }

    /// Uniform mass over `kept` positions of a length-`len` sequence.
    pub fn indicator(len: usize, kept: &[usize]) -> Self {
        let mut raw = vec![0.0; len];
        for &i in kept {
            raw[i] = 1.0;
        }
        Self::from_raw(raw)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if raw.is_empty() {
        Vec::new()
    } else if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).ln())
        .sum()
}

/// `KL(p ‖ q̃)` in nats, where `q̃ = (q + ε) / (1 + nε)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let denom = 1.0 + KL_EPS * q.len() as f64;
    let smoothed: Vec<f64> = q.iter().map(|q| (q + KL_EPS) / denom).collect();
    Ok(kl_raw(p, &smoothed).max(0.0))
}

/// `KL(p ‖ q)` without smoothing; infinite when `q` misses mass of `p`.
pub fn kl_divergence_unsmoothed(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(kl_raw(p, q).max(0.0))
}

/// Jensen–Shannon divergence in nats, bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(p, q)| 0.5 * (p + q)).collect();
    let js = 0.5 * kl_raw(p, &m) + 0.5 * kl_raw(q, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub mean_kl: f64,
    /// Mean of the unsmoothed KL; infinite if any example has disjoint support.
    pub mean_kl_unsmoothed: f64,
    pub mean_js: f64,
    pub count: usize,
}

/// Mean divergences of `attributions` from `ground_truths` (the latter as `p`).
pub fn evaluate_against_ground_truth(attributions: &[Attribution], ground_truths: &[Vec<f64>]) -> Result<DivergenceSummary> {
    if attributions.len() != ground_truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} attributions for {} ground truths",
            attributions.len(),
            ground_truths.len()
        )));
    }
    let (mut kl, mut kl_u, mut js) = (0.0, 0.0, 0.0);
    for (a, g) in attributions.iter().zip(ground_truths) {
        kl += kl_divergence(g, &a.normalized)?;
        kl_u += kl_divergence_unsmoothed(g, &a.normalized)?;
        js += js_divergence(g, &a.normalized)?;
    }
    let n = attributions.len().max(1) as f64;
    Ok(DivergenceSummary {
        mean_kl: kl / n,
        mean_kl_unsmoothed: kl_u / n,
        mean_js: js / n,
        count: attributions.len(),
    })
}

/// Token-level agreement of one predicted kept set with the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleAgreement {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sparsity: f64,
    pub optimal: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sparsity: f64,
    pub optimality: f64,
    pub count: usize,
}

fn prf(predicted: &BTreeSet<usize>, optimum: &[usize]) -> (f64, f64, f64) {
    let hits = optimum.iter().filter(|i| predicted.contains(i)).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let recall = if optimum.is_empty() { 0.0 } else { hits / optimum.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Compares a predicted kept set against every optimum and keeps the best
/// F1. `preserved` says whether the predicted set keeps the model's argmax.
pub fn mask_agreement(predicted: &[usize], optima: &[Vec<usize>], len: usize, preserved: bool) -> Result<ExampleAgreement> {
    let Some(first) = optima.first() else {
        return Err(Error::InvalidArgument("no erasure optimum to compare against".into()));
    };
    let set: BTreeSet<usize> = predicted.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&i| i >= len) {
        return Err(Error::InvalidArgument(format!("kept position {bad} outside a length-{len} sequence")));
    }
    let (precision, recall, f1) = optima
        .iter()
        .map(|o| prf(&set, o))
        .fold((0.0, 0.0, -1.0), |best, cur| if cur.2 > best.2 { cur } else { best });
    Ok(ExampleAgreement {
        precision,
        recall,
        f1,
        sparsity: if len == 0 { 0.0 } else { 1.0 - set.len() as f64 / len as f64 },
        optimal: preserved && !set.is_empty() && set.len() == first.len(),
    })
}

pub fn aggregate_agreement(rows: &[ExampleAgreement]) -> AgreementReport {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ExampleAgreement) -> f64| rows.iter().map(f).sum::<f64>() / n;
    AgreementReport {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        sparsity: mean(|r| r.sparsity),
        optimality: mean(|r| if r.optimal { 1.0 } else { 0.0 }),
        count: rows.len(),
    }
}

/// One `(method, metric, value)` row of a comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metric: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(method: &str, metric: &str, value: f64) -> Self {
        Self {
            method: method.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "method,metric,value")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.method, r.metric, r.value)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_json(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut summary = serde_json::Map::new();
    for r in rows {
        let entry = summary
            .entry(r.method.clone())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        if let serde_json::Value::Object(m) = entry {
            m.insert(r.metric.clone(), number(r.value));
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(&serde_json::Value::Object(summary))?)?;
    Ok(())
}

/// JSON has no infinity; non-finite values are written as strings.
fn number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}
