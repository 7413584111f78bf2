//! Differentiable masking.
//!
//! A probe reads the frozen model's activations and predicts, for every
//! position, the location of a Hard Concrete gate. Layer `ℓ` of the probe sees
//! a pair `(x_i, h_i)` and scores it with a bilinear form
//!
//! ```text
//! γ̂_i = x_iᵀ W1 h_i + W2 [x_i; h_i] + bias
//! ```
//!
//! Deeper layers average their own score with the mean of the earlier ones,
//! `γ_i = ½ (γ̂_i + mean_{k<ℓ} γ̂_i^(k))`. Votes `v^(k) ~ HardConcrete(γ^(k))`
//! are multiplied into the gate `z_i = ∏_{k≤ℓ} v_i^(k)`, so a single zero vote
//! masks the position.
//!
//! In [`MaskMode::Input`] the gate interpolates each position's digit
//! embedding with a learned baseline (`x̂ = z·x + (1 − z)·b`); the query
//! embeddings are never masked. Layer 0 conditions on the digit embedding
//! alone and layer 1 on the digit embedding and the bottleneck state. In
//! [`MaskMode::Hidden`] a single probe on the bottleneck state masks that
//! state itself and the GRU is re-run on the result.
//!
//! Probes are trained by Lagrangian relaxation: descent on
//! `E[L0] + λ·KL(y ‖ ŷ)` over probe weights and baselines, projected ascent
//! `λ ← max(0, λ + α (KL − m))` on the multiplier.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hardconcrete::HardConcrete;
use crate::metrics::Attribution;
use crate::model::{kl_to_logits, kl_to_logits_plain, ModelParams, ModelTrace, ModelVars, BOTTLENECK};
use crate::optim::Adam;
use crate::toytask::{ToyDataset, ToyExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Input,
    Hidden,
}

impl MaskMode {
    /// Probe layers available in this mode.
    pub fn layers(self) -> &'static [usize] {
        match self {
            MaskMode::Input => &[0, 1],
            MaskMode::Hidden => &[1],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Input => "input",
            MaskMode::Hidden => "hidden",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MaskMode::Input),
            "hidden" => Ok(MaskMode::Hidden),
            other => Err(Error::InvalidArgument(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// One bilinear probe layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeLayer {
    pub layer: usize,
    /// `[dx, dh]`
    pub w1: Tensor,
    /// `[dx + dh]`
    pub w2: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl ProbeLayer {
    fn init<R: Rng>(layer: usize, dx: usize, dh: usize, scale: f64, bias: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect::<Vec<_>>();
        Self {
            layer,
            w1: Tensor::matrix(dx, dh, draw(dx * dh)).expect("shape"),
            w2: Tensor::vector(draw(dx + dh)),
            bias: Tensor::vector(vec![bias]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w1.shape()[0], self.w1.shape()[1])
    }

    /// `xᵀ W1 h + W2 [x; h] + bias`.
    pub fn score(&self, x: &[f64], h: &[f64]) -> f64 {
        let (dx, dh) = self.dims();
        let w1 = self.w1.data();
        let w2 = self.w2.data();
        let mut total = self.bias.data()[0];
        for (k, &xv) in x.iter().enumerate() {
            let row = &w1[k * dh..(k + 1) * dh];
            total += xv * row.iter().zip(h).map(|(w, h)| w * h).sum::<f64>();
            total += w2[k] * xv;
        }
        total += w2[dx..].iter().zip(h).map(|(w, h)| w * h).sum::<f64>();
        total
    }
}

/// Lagrange multiplier for `KL(y ‖ ŷ) ≤ margin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub margin: f64,
}

impl LagrangianState {
    pub fn new(margin: f64) -> Self {
        Self { lambda: 0.0, margin }
    }

    /// Projected ascent step on the multiplier.
    pub fn ascend(&mut self, divergence: f64, lr: f64) {
        self.lambda = (self.lambda + lr * (divergence - self.margin)).max(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub mode: MaskMode,
    pub layers: Vec<ProbeLayer>,
    /// Replacement for a masked digit embedding.
    pub input_baseline: Tensor,
    /// Replacement for a masked bottleneck state.
    pub hidden_baseline: Tensor,
    pub gate: HardConcrete,
    /// One multiplier per probe layer.
    pub lagrangian: Vec<LagrangianState>,
}

/// Sampled votes and the resulting gates at one probe depth.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet {
    /// Locations `γ^(k)` per layer up to the requested depth.
    pub locations: Vec<Vec<f64>>,
    /// Votes per layer and position.
    pub votes: Vec<Vec<f64>>,
    /// Product of votes per position.
    pub gates: Vec<f64>,
}

/// Elementwise product of per-layer votes.
pub fn aggregate_votes(votes: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = votes.first() else {
        return Vec::new();
    };
    let mut z = first.clone();
    for layer in &votes[1..] {
        for (z, v) in z.iter_mut().zip(layer) {
            *z *= v;
        }
    }
    z
}

/// `x̂_i = z_i·x_i + (1 − z_i)·b` on digit-embedding blocks.
pub fn mask_input(trace: &ModelTrace, gates: &[f64], baseline: &[f64]) -> Result<Vec<Vec<f64>>> {
    if gates.len() != trace.len() {
        return Err(Error::Shape {
            op: "mask_input",
            lhs: vec![trace.len()],
            rhs: vec![gates.len()],
        });
    }
    (0..trace.len())
        .map(|i| interpolate(trace.digit_block(i), gates[i], baseline, "mask_input"))
        .collect()
}

/// `ĥ_i = z_i·h1_i + (1 − z_i)·b⁽¹⁾` on bottleneck states.
pub fn mask_hidden(trace: &ModelTrace, gates: &[f64], baseline: &[f64]) -> Result<Vec<Vec<f64>>> {
    if gates.len() != trace.len() {
        return Err(Error::Shape {
            op: "mask_hidden",
            lhs: vec![trace.len()],
            rhs: vec![gates.len()],
        });
    }
    (0..trace.len())
        .map(|i| interpolate(&trace.h1[i], gates[i], baseline, "mask_hidden"))
        .collect()
}

fn interpolate(x: &[f64], z: f64, b: &[f64], op: &'static str) -> Result<Vec<f64>> {
    if x.len() != b.len() {
        return Err(Error::Shape {
            op,
            lhs: vec![x.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(x.iter().zip(b).map(|(&x, &b)| z * x + (1.0 - z) * b).collect())
}

/// Logits of the model re-run on inputs masked by `gates`.
pub fn masked_input_logits(model: &ModelParams, trace: &ModelTrace, query: (u8, u8), gates: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    let blocks = mask_input(trace, gates, baseline)?;
    Ok(model.logits_from_blocks(&blocks, query))
}

/// Logits of the GRU and read-out re-run on masked bottleneck states.
pub fn masked_hidden_logits(model: &ModelParams, trace: &ModelTrace, gates: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    let h1 = mask_hidden(trace, gates, baseline)?;
    Ok(model.logits_from_hidden(&h1))
}

impl ProbeParams {
    pub fn init(mode: MaskMode, model: &ModelParams, config: &ProbeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let e = model.config.embed_dim;
        let layers = match mode {
            MaskMode::Input => vec![
                ProbeLayer::init(0, e, e, config.init_scale, config.init_location, &mut rng),
                ProbeLayer::init(1, e, BOTTLENECK, config.init_scale, config.init_location, &mut rng),
            ],
            MaskMode::Hidden => vec![ProbeLayer::init(
                1,
                BOTTLENECK,
                BOTTLENECK,
                config.init_scale,
                config.init_location,
                &mut rng,
            )],
        };
        Self {
            mode,
            lagrangian: vec![LagrangianState::new(config.margin); layers.len()],
            layers,
            input_baseline: Tensor::zeros(&[e]),
            hidden_baseline: Tensor::zeros(&[BOTTLENECK]),
            gate: config.gate,
        }
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.layer == layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no probe for layer {layer} in {} mode", self.mode.as_str())))
    }

    /// The `(x_i, h_i)` pair that layer `layer` conditions on.
    fn conditioning<'a>(&self, trace: &'a ModelTrace, layer: usize, i: usize) -> (&'a [f64], &'a [f64]) {
        match (self.mode, layer) {
            (MaskMode::Input, 0) => (trace.digit_block(i), trace.digit_block(i)),
            (MaskMode::Input, _) => (trace.digit_block(i), &trace.h1[i]),
            (MaskMode::Hidden, _) => (&trace.h1[i], &trace.h1[i]),
        }
    }

    /// Raw scores `γ̂` of every layer up to and including `layer`.
    fn raw_scores(&self, trace: &ModelTrace, layer: usize) -> Result<Vec<Vec<f64>>> {
        let last = self.slot(layer)?;
        Ok(self.layers[..=last]
            .iter()
            .map(|p| {
                (0..trace.len())
                    .map(|i| {
                        let (x, h) = self.conditioning(trace, p.layer, i);
                        p.score(x, h)
                    })
                    .collect()
            })
            .collect())
    }

    /// Locations `γ^(k)` for every layer up to `layer`.
    pub fn locations_upto(&self, trace: &ModelTrace, layer: usize) -> Result<Vec<Vec<f64>>> {
        let raw = self.raw_scores(trace, layer)?;
        Ok(average_scores(&raw))
    }

    /// Per-position gate locations of probe layer `layer`.
    pub fn probe_locations(&self, trace: &ModelTrace, layer: usize) -> Result<Vec<f64>> {
        Ok(self.locations_upto(trace, layer)?.pop().expect("at least one layer"))
    }

    /// Samples votes for all layers up to `layer` and multiplies them.
    pub fn sample_gates<R: Rng>(&self, trace: &ModelTrace, layer: usize, rng: &mut R) -> Result<GateSet> {
        let locations = self.locations_upto(trace, layer)?;
        let votes: Vec<Vec<f64>> = locations
            .iter()
            .map(|locs| locs.iter().map(|&g| self.gate.sample_rng(g, rng).z).collect())
            .collect();
        let gates = aggregate_votes(&votes);
        Ok(GateSet { locations, votes, gates })
    }

    /// `P(z_i ≠ 0)` at depth `layer`: the product of per-layer open probabilities.
    pub fn keep_probabilities(&self, trace: &ModelTrace, layer: usize) -> Result<Vec<f64>> {
        let locations = self.locations_upto(trace, layer)?;
        let probs: Vec<Vec<f64>> = locations
            .iter()
            .map(|l| l.iter().map(|&g| self.gate.gate_open_prob(g)).collect())
            .collect();
        Ok(aggregate_votes(&probs))
    }

    /// Model logits with the activations of this probe's mode masked by `gates`.
    pub fn masked_logits(&self, model: &ModelParams, trace: &ModelTrace, query: (u8, u8), gates: &[f64]) -> Result<Vec<f64>> {
        match self.mode {
            MaskMode::Input => masked_input_logits(model, trace, query, gates, self.input_baseline.data()),
            MaskMode::Hidden => masked_hidden_logits(model, trace, gates, self.hidden_baseline.data()),
        }
    }

    fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.w1, &l.w2, &l.bias]);
        }
        out.push(&self.input_baseline);
        out.push(&self.hidden_baseline);
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w1);
            out.push(&mut l.w2);
            out.push(&mut l.bias);
        }
        out.push(&mut self.input_baseline);
        out.push(&mut self.hidden_baseline);
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for l in &self.layers {
            ckpt.push(format!("probe.l{}.w1", l.layer), l.w1.clone());
            ckpt.push(format!("probe.l{}.w2", l.layer), l.w2.clone());
            ckpt.push(format!("probe.l{}.bias", l.layer), l.bias.clone());
        }
        ckpt.push("baseline.input", self.input_baseline.clone());
        ckpt.push("baseline.hidden", self.hidden_baseline.clone());
        ckpt.set_scalar("mode", json!(self.mode.as_str()));
        ckpt.set_scalar("lambda", json!(self.lagrangian.iter().map(|l| l.lambda).collect::<Vec<_>>()));
        ckpt.set_scalar("margin", json!(self.lagrangian.first().map_or(0.0, |l| l.margin)));
        ckpt.set_scalar("tau", json!(self.gate.temperature));
        ckpt.set_scalar("l", json!(self.gate.left));
        ckpt.set_scalar("r", json!(self.gate.right));
        ckpt
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint, model: &ModelParams) -> Result<Self> {
        let mode = MaskMode::parse(ckpt.scalar_str("mode")?)?;
        let e = model.config.embed_dim;
        let gate = HardConcrete::new(ckpt.scalar_f64("tau")?, ckpt.scalar_f64("l")?, ckpt.scalar_f64("r")?)?;
        let margin = ckpt.scalar_f64("margin")?;
        let lambdas: Vec<f64> = ckpt
            .scalars
            .get("lambda")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Checkpoint("missing array field `lambda`".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::Checkpoint("`lambda` must hold numbers".into())))
            .collect::<Result<_>>()?;
        let dims: Vec<(usize, usize, usize)> = match mode {
            MaskMode::Input => vec![(0, e, e), (1, e, BOTTLENECK)],
            MaskMode::Hidden => vec![(1, BOTTLENECK, BOTTLENECK)],
        };
        if lambdas.len() != dims.len() {
            return Err(Error::Checkpoint(format!(
                "`lambda` holds {} values, {} mode needs {}",
                lambdas.len(),
                mode.as_str(),
                dims.len()
            )));
        }
        let mut layers = Vec::new();
        for &(layer, dx, dh) in &dims {
            layers.push(ProbeLayer {
                layer,
                w1: ckpt.take(&format!("probe.l{layer}.w1"), &[dx, dh])?,
                w2: ckpt.take(&format!("probe.l{layer}.w2"), &[dx + dh])?,
                bias: ckpt.take(&format!("probe.l{layer}.bias"), &[1])?,
            });
        }
        let probe = Self {
            mode,
            layers,
            input_baseline: ckpt.take("baseline.input", &[e])?,
            hidden_baseline: ckpt.take("baseline.hidden", &[BOTTLENECK])?,
            gate,
            lagrangian: lambdas.into_iter().map(|lambda| LagrangianState { lambda, margin }).collect(),
        };
        if !probe.trainable().iter().all(|t| t.is_finite()) {
            return Err(Error::Checkpoint("non-finite probe parameters".into()));
        }
        Ok(probe)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path, model: &ModelParams) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, model)
    }
}

/// `γ^(0) = γ̂^(0)`, `γ^(ℓ) = ½(γ̂^(ℓ) + mean_{k<ℓ} γ̂^(k))`.
fn average_scores(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .enumerate()
        .map(|(l, scores)| {
            if l == 0 {
                return scores.clone();
            }
            scores
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let prev = raw[..l].iter().map(|r| r[i]).sum::<f64>() / l as f64;
                    0.5 * (s + prev)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for probe weights.
    pub lr: f64,
    /// Step size for the baseline vectors. Kept well below `lr`: a baseline
    /// that moves early can settle on the state of one query digit, after
    /// which masking that digit is free and the probe learns to drop it.
    pub lr_baseline: f64,
    /// Ascent step size for the multipliers.
    pub lr_lambda: f64,
    /// Tolerated `KL(y ‖ ŷ)` in nats.
    pub margin: f64,
    #[serde(skip, default)]
    pub gate: HardConcrete,
    /// Initial probe bias, so that gates start open.
    pub init_location: f64,
    pub init_scale: f64,
    /// Second-moment decay of Adam. Lower than the usual 0.999 so that the
    /// large gradients of an early high-λ phase are forgotten quickly.
    pub beta2: f64,
    /// Step sizes decay linearly from `lr` to `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 150,
            batch_size: 64,
            lr: 0.08,
            lr_baseline: 3e-3,
            lr_lambda: 0.1,
            margin: 0.05,
            gate: HardConcrete::default(),
            init_location: 3.0,
            init_scale: 0.01,
            beta2: 0.99,
            final_lr_fraction: 0.1,
        }
    }
}

/// Per-epoch constraint statistics, one entry per probe layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintLog {
    pub epoch: usize,
    pub layer: usize,
    pub mean_kl: f64,
    pub mean_expected_l0: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeTraining {
    pub probe: ProbeParams,
    pub log: Vec<ConstraintLog>,
    /// Multipliers after each optimisation step, per layer.
    pub lambda_trace: Vec<Vec<f64>>,
}

/// Probe parameters placed on a tape as leaves.
struct ProbeVars {
    layers: Vec<(Var, Var, Var)>,
    input_baseline: Var,
    hidden_baseline: Var,
}

impl ProbeVars {
    fn new(tape: &mut Tape, probe: &ProbeParams) -> Self {
        let layers = probe
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w1.clone()), tape.leaf(l.w2.clone()), tape.leaf(l.bias.clone())))
            .collect();
        Self {
            layers,
            input_baseline: tape.leaf(probe.input_baseline.clone()),
            hidden_baseline: tape.leaf(probe.hidden_baseline.clone()),
        }
    }

    fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(a, b, c) in &self.layers {
            out.extend([a, b, c]);
        }
        out.push(self.input_baseline);
        out.push(self.hidden_baseline);
        out
    }
}

fn stack_rows(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Tensor {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / cols.max(1);
    Tensor::matrix(n, cols, data).expect("rows have equal length")
}

/// `xᵀ W1 h + W2 [x; h] + bias` for all positions at once.
fn scores_on_tape(tape: &mut Tape, x: &Tensor, h: &Tensor, (w1, w2, bias): (Var, Var, Var)) -> Result<Var> {
    let n = x.shape()[0];
    let dh = h.shape()[1];
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h.clone());
    let xh = {
        let (dx, data_x, data_h) = (x.shape()[1], x.data(), h.data());
        let mut data = Vec::with_capacity(n * (dx + dh));
        for i in 0..n {
            data.extend_from_slice(&data_x[i * dx..(i + 1) * dx]);
            data.extend_from_slice(&data_h[i * dh..(i + 1) * dh]);
        }
        tape.constant(Tensor::matrix(n, dx + dh, data)?)
    };
    let a = tape.matmul(xv, w1)?;
    let b = tape.mul(a, hv)?;
    let ones_h = tape.constant(Tensor::vector(vec![1.0; dh]));
    let bilinear = tape.matmul(b, ones_h)?;
    let linear = tape.matmul(xh, w2)?;
    let ones_n = tape.constant(Tensor::matrix(n, 1, vec![1.0; n])?);
    let bias = tape.matmul(ones_n, bias)?;
    let s = tape.add(bilinear, linear)?;
    tape.add(s, bias)
}

/// Everything about one example that stays fixed during probe training.
struct Frozen<'a> {
    model: &'a ModelParams,
    trace: ModelTrace,
    query: (u8, u8),
    target: Vec<f64>,
}

/// Records the masked forward pass and returns the logits.
struct MaskedForward {
    model: ModelVars,
    /// `ffnn_w1` rows that multiply the digit block.
    w1_digit: Var,
    /// `b1 + [emb(n); emb(m)] · W1[E..]`
    query_bias: Var,
}

impl MaskedForward {
    fn new(tape: &mut Tape, model: &ModelParams, query: (u8, u8)) -> Result<Self> {
        let e = model.config.embed_dim;
        let f = model.config.ffnn_hidden;
        let w1 = model.ffnn_w1.data();
        let w1_digit = Tensor::matrix(e, f, w1[..e * f].to_vec())?;
        let mut qb = model.ffnn_b1.data().to_vec();
        let q: Vec<f64> = model.embedding(query.0).iter().chain(model.embedding(query.1)).copied().collect();
        for (k, &qv) in q.iter().enumerate() {
            let row = &w1[(e + k) * f..(e + k + 1) * f];
            for (o, w) in qb.iter_mut().zip(row) {
                *o += qv * w;
            }
        }
        Ok(Self {
            model: ModelVars::new(tape, model, false),
            w1_digit: tape.constant(w1_digit),
            query_bias: tape.constant(Tensor::vector(qb)),
        })
    }

    fn bottleneck(&self, tape: &mut Tape, block: Var) -> Result<Var> {
        let v = &self.model.vars;
        let a = tape.matmul(block, self.w1_digit)?;
        let a = tape.add(a, self.query_bias)?;
        let a = tape.tanh(a);
        let b = tape.matmul(a, v[3])?;
        let b = tape.add(b, v[4])?;
        Ok(tape.tanh(b))
    }

    /// Interpolates each row with the baseline and re-runs the model.
    fn logits(&self, tape: &mut Tape, mode: MaskMode, rows: &[Var], gates: Var, baseline: Var) -> Result<Var> {
        let mut h1 = Vec::with_capacity(rows.len());
        for (i, &row) in rows.iter().enumerate() {
            let z = tape.slice(gates, i, 1)?;
            let keep = tape.scale(row, z)?;
            let zc = tape.affine(z, -1.0, 1.0);
            let fill = tape.scale(baseline, zc)?;
            let masked = tape.add(keep, fill)?;
            h1.push(match mode {
                MaskMode::Input => self.bottleneck(tape, masked)?,
                MaskMode::Hidden => masked,
            });
        }
        self.model.logits_from_hidden(tape, &h1)
    }
}

/// Per-layer objective terms recorded on one tape.
struct ObjectiveTerms {
    expected_l0: Vec<Var>,
    kl: Vec<Var>,
}

/// Records the amortized objective terms for one example. `uniforms[k]`
/// supplies the draws for the votes of probe layer slot `k`.
fn record_objective(
    tape: &mut Tape,
    probe: &ProbeParams,
    vars: &ProbeVars,
    frozen: &Frozen<'_>,
    uniforms: &[Vec<f64>],
) -> Result<ObjectiveTerms> {
    let trace = &frozen.trace;
    let n = trace.len();
    let e = frozen.model.config.embed_dim;
    let digits = stack_rows((0..n).map(|i| trace.digit_block(i).to_vec()), e);
    let hidden = stack_rows(trace.h1.iter().cloned(), BOTTLENECK);

    let mut raw = Vec::new();
    for (slot, layer) in probe.layers.iter().enumerate() {
        let (x, h) = match (probe.mode, layer.layer) {
            (MaskMode::Input, 0) => (&digits, &digits),
            (MaskMode::Input, _) => (&digits, &hidden),
            (MaskMode::Hidden, _) => (&hidden, &hidden),
        };
        raw.push(scores_on_tape(tape, x, h, vars.layers[slot])?);
    }
    let mut locations = Vec::new();
    for l in 0..raw.len() {
        if l == 0 {
            locations.push(raw[0]);
            continue;
        }
        let mut prev = raw[0];
        for &r in &raw[1..l] {
            prev = tape.add(prev, r)?;
        }
        let prev = tape.affine(prev, 1.0 / l as f64, 0.0);
        let s = tape.add(raw[l], prev)?;
        locations.push(tape.affine(s, 0.5, 0.0));
    }

    let forward = MaskedForward::new(tape, frozen.model, frozen.query)?;
    let (rows, baseline) = match probe.mode {
        MaskMode::Input => (&digits, vars.input_baseline),
        MaskMode::Hidden => (&hidden, vars.hidden_baseline),
    };
    let cols = rows.shape()[1];
    let row_vars: Vec<Var> = (0..n)
        .map(|i| tape.constant(Tensor::vector(rows.data()[i * cols..(i + 1) * cols].to_vec())))
        .collect();

    let mut terms = ObjectiveTerms {
        expected_l0: Vec::new(),
        kl: Vec::new(),
    };
    let mut gates: Option<Var> = None;
    let mut keep_prob: Option<Var> = None;
    for (slot, &loc) in locations.iter().enumerate() {
        let vote = probe.gate.sample_on_tape(tape, loc, &uniforms[slot])?;
        let open = probe.gate.gate_open_prob_on_tape(tape, loc);
        let z = match gates {
            Some(g) => tape.mul(g, vote)?,
            None => vote,
        };
        let p = match keep_prob {
            Some(k) => tape.mul(k, open)?,
            None => open,
        };
        gates = Some(z);
        keep_prob = Some(p);
        terms.expected_l0.push(tape.sum(p));
        let logits = forward.logits(tape, probe.mode, &row_vars, z, baseline)?;
        terms.kl.push(kl_to_logits(tape, &frozen.target, logits)?);
    }
    Ok(terms)
}

fn draw_uniforms<R: Rng>(rng: &mut R, layers: usize, n: usize) -> Vec<Vec<f64>> {
    (0..layers).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect()
}

/// Value and gradients of `Σ_ℓ E[L0_ℓ] + λ_ℓ KL_ℓ` for one example, with
/// explicit uniform draws (common random numbers make this deterministic).
pub fn objective_and_gradients(
    model: &ModelParams,
    probe: &ProbeParams,
    example: &ToyExample,
    uniforms: &[Vec<f64>],
) -> Result<ObjectiveValue> {
    let trace = model.forward(example);
    let frozen = Frozen {
        model,
        target: trace.class_probs.clone(),
        query: example.query,
        trace,
    };
    let mut tape = Tape::new();
    let vars = ProbeVars::new(&mut tape, probe);
    let terms = record_objective(&mut tape, probe, &vars, &frozen, uniforms)?;
    let mut total: Option<Var> = None;
    for (slot, (&l0, &kl)) in terms.expected_l0.iter().zip(&terms.kl).enumerate() {
        let weighted = tape.affine(kl, probe.lagrangian[slot].lambda, 0.0);
        let term = tape.add(l0, weighted)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("probe has layers");
    let grads = tape.backward(total)?;
    let gradients = vars
        .all()
        .iter()
        .zip(probe.trainable())
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok(ObjectiveValue {
        value: tape.value(total).item(),
        expected_l0: terms.expected_l0.iter().map(|&v| tape.value(v).item()).collect(),
        kl: terms.kl.iter().map(|&v| tape.value(v).item()).collect(),
        gradients,
    })
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub value: f64,
    pub expected_l0: Vec<f64>,
    pub kl: Vec<f64>,
    /// In the order layer (w1, w2, bias)…, input baseline, hidden baseline.
    pub gradients: Vec<Vec<f64>>,
}

/// Flat view of a probe's trainable values in gradient order.
pub fn probe_values(probe: &ProbeParams) -> Vec<Vec<f64>> {
    probe.trainable().iter().map(|t| t.data().to_vec()).collect()
}

/// Mutable access to the value at `(tensor, index)` in gradient order.
pub fn probe_value_mut(probe: &mut ProbeParams, tensor: usize, index: usize) -> &mut f64 {
    let mut all = probe.trainable_mut();
    let t = all.swap_remove(tensor);
    &mut t.data_mut()[index]
}

/// Per-tensor step sizes. Adam moves every weight by about the same amount
/// per step, so when all weights of a tensor move together a gate location
/// shifts by the step size times the L1 norms of the vectors the tensor
/// multiplies (their product for the bilinear form, their sum for the
/// linear term). Dividing by the average of those norms over the training
/// positions keeps every tensor's largest per-step effect on γ near `lr`.
fn step_sizes(probe: &ProbeParams, frozen: &[Frozen<'_>], config: &ProbeConfig) -> Vec<f64> {
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    let mut rates = Vec::new();
    for l in &probe.layers {
        let (mut product, mut sum, mut count) = (0.0, 0.0, 0usize);
        for f in frozen {
            for i in 0..f.trace.len() {
                let (x, h) = probe.conditioning(&f.trace, l.layer, i);
                product += l1(x) * l1(h);
                sum += l1(x) + l1(h);
                count += 1;
            }
        }
        let count = count.max(1) as f64;
        rates.extend([
            config.lr / (product / count).max(1.0),
            config.lr / (sum / count).max(1.0),
            config.lr,
        ]);
    }
    rates.extend([config.lr_baseline, config.lr_baseline]);
    rates
}

fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Trains an amortized probe on the training split with the model frozen.
pub fn train_probe(model: &ModelParams, dataset: &ToyDataset, config: &ProbeConfig, mode: MaskMode) -> Result<ProbeTraining> {
    config.gate.validate()?;
    let mut probe = ProbeParams::init(mode, model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let sizes: Vec<usize> = probe.trainable().iter().map(|t| t.numel()).collect();

    let frozen: Vec<Frozen<'_>> = dataset
        .train
        .iter()
        .map(|ex| {
            let trace = model.forward(ex);
            Frozen {
                model,
                target: trace.class_probs.clone(),
                query: ex.query,
                trace,
            }
        })
        .collect();

    let base_rates = step_sizes(&probe, &frozen, config);
    let mut adam = Adam::with_rates(base_rates.clone(), &sizes);
    adam.beta2 = config.beta2;
    let batches_per_epoch = batch_count(dataset.train.len(), config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1);
    let n_layers = probe.layers.len();
    let mut order: Vec<usize> = (0..frozen.len()).collect();
    let mut log = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_kl = vec![0.0; n_layers];
        let mut epoch_l0 = vec![0.0; n_layers];
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_kl = vec![0.0; n_layers];
            for &i in batch {
                let f = &frozen[i];
                let uniforms = draw_uniforms(&mut rng, n_layers, f.trace.len());
                let mut tape = Tape::new();
                let vars = ProbeVars::new(&mut tape, &probe);
                let terms = record_objective(&mut tape, &probe, &vars, f, &uniforms)?;
                let mut total: Option<Var> = None;
                for slot in 0..n_layers {
                    let kl = terms.kl[slot];
                    let l0 = terms.expected_l0[slot];
                    let kl_value = tape.value(kl).item();
                    batch_kl[slot] += kl_value;
                    epoch_kl[slot] += kl_value;
                    epoch_l0[slot] += tape.value(l0).item();
                    let weighted = tape.affine(kl, probe.lagrangian[slot].lambda, 0.0);
                    let term = tape.add(l0, weighted)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, term)?,
                        None => term,
                    });
                }
                let total = total.expect("probe has layers");
                if !tape.value(total).item().is_finite() {
                    return Err(Error::Diverged { step });
                }
                let mut grads = tape.backward(total)?;
                for (a, v) in acc.iter_mut().zip(vars.all()) {
                    if let Some(g) = grads.take(v) {
                        for (a, g) in a.iter_mut().zip(&g) {
                            *a += g;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= scale);
            let decay = 1.0 - (1.0 - config.final_lr_fraction) * step as f64 / total_steps as f64;
            for (rate, base) in adam.rates.iter_mut().zip(&base_rates) {
                *rate = base * decay;
            }
            {
                let mut slices: Vec<&mut [f64]> = probe.trainable_mut().into_iter().map(|t| t.data_mut()).collect();
                adam.step(&mut slices, &acc);
            }
            for (state, kl) in probe.lagrangian.iter_mut().zip(&batch_kl) {
                state.ascend(kl * scale, config.lr_lambda);
            }
            if !probe.trainable().iter().all(|t| t.is_finite()) {
                return Err(Error::Diverged { step });
            }
            lambda_trace.push(probe.lagrangian.iter().map(|l| l.lambda).collect());
            step += 1;
        }
        let n = frozen.len().max(1) as f64;
        for (slot, layer) in probe.layers.iter().enumerate() {
            log.push(ConstraintLog {
                epoch: epoch + 1,
                layer: layer.layer,
                mean_kl: epoch_kl[slot] / n,
                mean_expected_l0: epoch_l0[slot] / n,
                lambda: probe.lagrangian[slot].lambda,
            });
        }
    }
    Ok(ProbeTraining { probe, log, lambda_trace })
}

/// Number of gate samples averaged by [`attribute`].
pub const ATTRIBUTION_SAMPLES: usize = 128;

/// Monte Carlo mean gate value per position at probe depth `layer`.
pub fn expected_gates(probe: &ProbeParams, trace: &ModelTrace, layer: usize, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let locations = probe.locations_upto(trace, layer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = vec![0.0; trace.len()];
    for _ in 0..samples {
        let votes: Vec<Vec<f64>> = locations
            .iter()
            .map(|locs| locs.iter().map(|&g| probe.gate.sample_rng(g, &mut rng).z).collect())
            .collect();
        for (m, z) in mean.iter_mut().zip(aggregate_votes(&votes)) {
            *m += z;
        }
    }
    mean.iter_mut().for_each(|m| *m /= samples.max(1) as f64);
    Ok(mean)
}

/// Attribution of one example: mean gate value over
/// [`ATTRIBUTION_SAMPLES`] draws from a fixed seed.
pub fn attribute(model: &ModelParams, probe: &ProbeParams, example: &ToyExample, layer: usize, seed: u64) -> Result<Attribution> {
    let trace = model.forward(example);
    let raw = expected_gates(probe, &trace, layer, ATTRIBUTION_SAMPLES, seed)?;
    Ok(Attribution::from_raw(raw))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerExampleConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub lr_lambda: f64,
    pub margin: f64,
    /// Starting location (or logit) of every gate.
    pub init_location: f64,
}

impl Default for PerExampleConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 300,
            lr: 0.1,
            lr_lambda: 0.1,
            margin: 0.05,
            init_location: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerExampleGates {
    /// Free gate parameters per position (Hard Concrete locations or
    /// Bernoulli logits).
    pub locations: Vec<f64>,
    /// Keep score per position in `[0, 1]`.
    pub keep: Vec<f64>,
    pub lambda: f64,
    /// Constraint value `KL(y ‖ ŷ)` per step.
    pub kl_trace: Vec<f64>,
}

impl PerExampleGates {
    /// Positions whose keep score exceeds one half.
    pub fn kept_set(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i] > 0.5).collect()
    }
}

/// Replacement vectors used when masking.
#[derive(Clone, Debug, PartialEq)]
pub struct Baselines {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Baselines {
    pub fn zeros(model: &ModelParams) -> Self {
        Self {
            input: vec![0.0; model.config.embed_dim],
            hidden: vec![0.0; BOTTLENECK],
        }
    }

    pub fn from_probe(probe: &ProbeParams) -> Self {
        Self {
            input: probe.input_baseline.data().to_vec(),
            hidden: probe.hidden_baseline.data().to_vec(),
        }
    }

    pub fn for_mode(&self, mode: MaskMode) -> &[f64] {
        match mode {
            MaskMode::Input => &self.input,
            MaskMode::Hidden => &self.hidden,
        }
    }
}

/// Learns free Hard Concrete locations for a single example under the same
/// Lagrangian objective as the amortized probe. Baselines stay fixed.
pub fn train_probe_nonamortized(
    model: &ModelParams,
    example: &ToyExample,
    baselines: &Baselines,
    gate: HardConcrete,
    config: &PerExampleConfig,
    mode: MaskMode,
) -> Result<PerExampleGates> {
    gate.validate()?;
    let trace = model.forward(example);
    let n = trace.len();
    let target = trace.class_probs.clone();
    let baseline = baselines.for_mode(mode);
    let rows: Vec<Vec<f64>> = match mode {
        MaskMode::Input => (0..n).map(|i| trace.digit_block(i).to_vec()).collect(),
        MaskMode::Hidden => trace.h1.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut locations = vec![config.init_location; n];
    let mut adam = Adam::new(config.lr, &[n]);
    let mut lagrangian = LagrangianState::new(config.margin);
    let mut kl_trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mut tape = Tape::new();
        let loc = tape.leaf(Tensor::vector(locations.clone()));
        let z = gate.sample_on_tape(&mut tape, loc, &uniforms)?;
        let l0 = gate.expected_l0_on_tape(&mut tape, loc);
        let forward = MaskedForward::new(&mut tape, model, example.query)?;
        let row_vars: Vec<Var> = rows.iter().map(|r| tape.constant(Tensor::vector(r.clone()))).collect();
        let b = tape.constant(Tensor::vector(baseline.to_vec()));
        let logits = forward.logits(&mut tape, mode, &row_vars, z, b)?;
        let kl = kl_to_logits(&mut tape, &target, logits)?;
        let weighted = tape.affine(kl, lagrangian.lambda, 0.0);
        let total = tape.add(l0, weighted)?;
        let kl_value = tape.value(kl).item();
        if !tape.value(total).item().is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = tape.backward(total)?;
        let g = grads.get_or_zeros(loc, n);
        adam.step(&mut [locations.as_mut_slice()], &[g]);
        lagrangian.ascend(kl_value, config.lr_lambda);
        kl_trace.push(kl_value);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa77e);
    let mut keep = vec![0.0; n];
    for _ in 0..ATTRIBUTION_SAMPLES {
        for (k, &g) in keep.iter_mut().zip(&locations) {
            *k += gate.sample_rng(g, &mut rng).z;
        }
    }
    keep.iter_mut().for_each(|k| *k /= ATTRIBUTION_SAMPLES as f64);
    Ok(PerExampleGates {
        locations,
        keep,
        lambda: lagrangian.lambda,
        kl_trace,
    })
}

/// `KL(y ‖ ŷ)` when positions outside `kept` are replaced by the baseline.
pub fn masked_divergence(model: &ModelParams, example: &ToyExample, kept: &[usize], baselines: &Baselines, mode: MaskMode) -> Result<f64> {
    let trace = model.forward(example);
    let mut gates = vec![0.0; trace.len()];
    for &i in kept {
        gates[i] = 1.0;
    }
    let logits = match mode {
        MaskMode::Input => masked_input_logits(model, &trace, example.query, &gates, &baselines.input)?,
        MaskMode::Hidden => masked_hidden_logits(model, &trace, &gates, &baselines.hidden)?,
    };
    Ok(kl_to_logits_plain(&trace.class_probs, &logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                embed_dim: 6,
                ffnn_hidden: 4,
                gru_hidden: 5,
            },
            11,
        )
    }

    #[test]
    fn votes_multiply() {
        assert_eq!(aggregate_votes(&[vec![1.0], vec![1.0]]), vec![1.0]);
        assert_eq!(aggregate_votes(&[vec![1.0], vec![0.0]]), vec![0.0]);
        assert_eq!(aggregate_votes(&[vec![0.5], vec![0.5]]), vec![0.25]);
    }

    #[test]
    fn zero_probe_gives_zero_locations() {
        let model = small_model();
        let cfg = ProbeConfig {
            init_location: 0.0,
            init_scale: 0.0,
            ..ProbeConfig::default()
        };
        let probe = ProbeParams::init(MaskMode::Input, &model, &cfg);
        let trace = model.forward(&ToyExample::new(vec![1, 2, 3], (1, 2)).unwrap());
        assert_eq!(probe.probe_locations(&trace, 0).unwrap(), vec![0.0; 3]);
        assert_eq!(probe.probe_locations(&trace, 1).unwrap(), vec![0.0; 3]);
        assert!(probe.probe_locations(&trace, 2).is_err());
        let hidden = ProbeParams::init(MaskMode::Hidden, &model, &cfg);
        assert!(hidden.probe_locations(&trace, 0).is_err());
    }

    #[test]
    fn saturated_bias_opens_gates() {
        let model = small_model();
        let cfg = ProbeConfig {
            init_location: 10.0,
            init_scale: 0.0,
            ..ProbeConfig::default()
        };
        let probe = ProbeParams::init(MaskMode::Input, &model, &cfg);
        let trace = model.forward(&ToyExample::new(vec![4, 4, 0, 9], (4, 9)).unwrap());
        for p in probe.keep_probabilities(&trace, 1).unwrap() {
            assert!(p > 0.9999);
        }
    }

    #[test]
    fn layer_one_averages_scores() {
        let raw = vec![vec![2.0, -4.0], vec![0.0, 8.0]];
        assert_eq!(average_scores(&raw), vec![vec![2.0, -4.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn masking_identities() {
        let model = small_model();
        let ex = ToyExample::new(vec![3, 5, 3], (3, 5)).unwrap();
        let trace = model.forward(&ex);
        let b = vec![0.0; 6];
        let ones = vec![1.0; 3];
        let logits = masked_input_logits(&model, &trace, ex.query, &ones, &b).unwrap();
        assert_eq!(logits, trace.logits);
        let blocks = mask_input(&trace, &[0.5, 0.0, 1.0], &[7.0; 6]).unwrap();
        for (a, x) in blocks[0].iter().zip(trace.digit_block(0)) {
            assert_eq!(*a, 0.5 * x + 3.5);
        }
        assert_eq!(blocks[1], vec![7.0; 6]);
        let half = mask_input(&trace, &[0.5; 3], &b).unwrap();
        for (a, x) in half[2].iter().zip(trace.digit_block(2)) {
            assert_eq!(*a, 0.5 * x);
        }
        assert!(mask_input(&trace, &[1.0; 2], &b).is_err());
        assert!(mask_input(&trace, &ones, &[0.0; 5]).is_err());
        let hidden = masked_hidden_logits(&model, &trace, &ones, &[0.0, 0.0]).unwrap();
        assert_eq!(hidden, trace.logits);
    }

    #[test]
    fn tape_objective_matches_plain_masking() {
        let model = small_model();
        let ex = ToyExample::new(vec![3, 5, 3, 1], (3, 5)).unwrap();
        let mut cfg = ProbeConfig::default();
        cfg.init_scale = 0.3;
        cfg.init_location = 0.5;
        let mut probe = ProbeParams::init(MaskMode::Input, &model, &cfg);
        probe.input_baseline.data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let uniforms = vec![vec![0.3, 0.6, 0.9, 0.45], vec![0.2, 0.8, 0.55, 0.7]];
        let obj = objective_and_gradients(&model, &probe, &ex, &uniforms).unwrap();

        let trace = model.forward(&ex);
        let locs = probe.locations_upto(&trace, 1).unwrap();
        let votes: Vec<Vec<f64>> = locs
            .iter()
            .zip(&uniforms)
            .map(|(l, u)| l.iter().zip(u).map(|(&g, &u)| probe.gate.sample(g, u).z).collect())
            .collect();
        for (depth, kl) in obj.kl.iter().enumerate() {
            let z = aggregate_votes(&votes[..=depth]);
            let logits = probe.masked_logits(&model, &trace, ex.query, &z).unwrap();
            let plain = kl_to_logits_plain(&trace.class_probs, &logits);
            assert!((kl - plain).abs() < 1e-12, "{kl} vs {plain}");
        }
        let keep = probe.keep_probabilities(&trace, 1).unwrap();
        assert!((obj.expected_l0[1] - keep.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn lambda_projection() {
        let mut s = LagrangianState::new(0.05);
        s.ascend(0.0, 0.1);
        assert_eq!(s.lambda, 0.0);
        s.ascend(1.05, 0.1);
        assert!((s.lambda - 0.1).abs() < 1e-15);
        let mut inf = LagrangianState::new(f64::INFINITY);
        inf.ascend(3.0, 0.1);
        assert_eq!(inf.lambda, 0.0);
    }

    #[test]
    fn probe_checkpoint_round_trip() {
        let model = small_model();
        let probe = ProbeParams::init(MaskMode::Input, &model, &ProbeConfig::default());
        let back = ProbeParams::from_checkpoint(Checkpoint::from_json(&probe.to_checkpoint().to_json()).unwrap(), &model).unwrap();
        assert_eq!(back, probe);
    }
}
