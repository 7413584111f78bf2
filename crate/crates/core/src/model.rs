//! The analysed classifier: digit and query embeddings, a per-position
//! feed-forward bottleneck to two units, a unidirectional GRU over the
//! bottleneck states and a linear read-out of the last GRU state.
//!
//! Class index 1 means "more `n` than `m`".
//!
//! Two evaluation paths exist. [`ModelParams::forward`] and friends work on
//! plain slices and are used for inference-heavy code (erasure search,
//! attribution). [`ModelVars`] records the same computation on a [`Tape`] for
//! gradients. Both are kept numerically identical.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{logistic, logsumexp, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::toytask::{ToyDataset, ToyExample, NUM_DIGITS};

pub const NUM_CLASSES: usize = 2;
/// Width of the per-position bottleneck.
pub const BOTTLENECK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ffnn_hidden: usize,
    pub gru_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            ffnn_hidden: 64,
            gru_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        3 * self.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[10, E]`
    pub embeddings: Tensor,
    /// `[3E, F]`, `[F]`
    pub ffnn_w1: Tensor,
    pub ffnn_b1: Tensor,
    /// `[F, 2]`, `[2]`
    pub ffnn_w2: Tensor,
    pub ffnn_b2: Tensor,
    /// Reset gate: `[2, H]`, `[H, H]`, `[H]`.
    pub gru_w_r: Tensor,
    pub gru_u_r: Tensor,
    pub gru_b_r: Tensor,
    /// Update gate.
    pub gru_w_u: Tensor,
    pub gru_u_u: Tensor,
    pub gru_b_u: Tensor,
    /// Candidate state.
    pub gru_w_c: Tensor,
    pub gru_u_c: Tensor,
    pub gru_b_c: Tensor,
    /// `[H, 2]`, `[2]`
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

/// Activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTrace {
    /// `[emb(x_i); emb(n); emb(m)]` per position.
    pub h0: Vec<Vec<f64>>,
    /// Bottleneck output per position.
    pub h1: Vec<Vec<f64>>,
    pub gru_states: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl ModelTrace {
    pub fn len(&self) -> usize {
        self.h0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h0.is_empty()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }

    /// Digit-embedding block of `h0` at position `i`.
    pub fn digit_block(&self, i: usize) -> &[f64] {
        let e = self.h0[i].len() / 3;
        &self.h0[i][..e]
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `x · W + b` for a row-major `W` of shape `[x.len(), b.len()]`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = b.numel();
    let mut out = b.data().to_vec();
    let wd = w.data();
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&wd[k * n..(k + 1) * n]) {
            *o += xv * wv;
        }
    }
    out
}

/// `x · W` (no bias) accumulated into `out`.
fn matvec_into(x: &[f64], w: &Tensor, out: &mut [f64]) {
    let n = out.len();
    let wd = w.data();
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&wd[k * n..(k + 1) * n]) {
            *o += xv * wv;
        }
    }
}

fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

const TENSOR_NAMES: [&str; 16] = [
    "embeddings",
    "ffnn.w1",
    "ffnn.b1",
    "ffnn.w2",
    "ffnn.b2",
    "gru.w_r",
    "gru.u_r",
    "gru.b_r",
    "gru.w_u",
    "gru.u_u",
    "gru.b_u",
    "gru.w_c",
    "gru.u_c",
    "gru.b_c",
    "classifier.w",
    "classifier.b",
];

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, f, h) = (config.embed_dim, config.ffnn_hidden, config.gru_hidden);
        let embeddings = Tensor::matrix(
            NUM_DIGITS,
            e,
            (0..NUM_DIGITS * e).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .expect("shape");
        Self {
            config,
            embeddings,
            ffnn_w1: glorot(&mut rng, 3 * e, f),
            ffnn_b1: Tensor::zeros(&[f]),
            ffnn_w2: glorot(&mut rng, f, BOTTLENECK),
            ffnn_b2: Tensor::zeros(&[BOTTLENECK]),
            gru_w_r: glorot(&mut rng, BOTTLENECK, h),
            gru_u_r: glorot(&mut rng, h, h),
            gru_b_r: Tensor::zeros(&[h]),
            gru_w_u: glorot(&mut rng, BOTTLENECK, h),
            gru_u_u: glorot(&mut rng, h, h),
            gru_b_u: Tensor::zeros(&[h]),
            gru_w_c: glorot(&mut rng, BOTTLENECK, h),
            gru_u_c: glorot(&mut rng, h, h),
            gru_b_c: Tensor::zeros(&[h]),
            cls_w: glorot(&mut rng, h, NUM_CLASSES),
            cls_b: Tensor::zeros(&[NUM_CLASSES]),
        }
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(config: ModelConfig) -> Self {
        let mut p = Self::init(config, 0);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    fn expected_shapes(config: &ModelConfig) -> [Vec<usize>; 16] {
        let (e, f, h) = (config.embed_dim, config.ffnn_hidden, config.gru_hidden);
        [
            vec![NUM_DIGITS, e],
            vec![3 * e, f],
            vec![f],
            vec![f, BOTTLENECK],
            vec![BOTTLENECK],
            vec![BOTTLENECK, h],
            vec![h, h],
            vec![h],
            vec![BOTTLENECK, h],
            vec![h, h],
            vec![h],
            vec![BOTTLENECK, h],
            vec![h, h],
            vec![h],
            vec![h, NUM_CLASSES],
            vec![NUM_CLASSES],
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.embeddings,
            &self.ffnn_w1,
            &self.ffnn_b1,
            &self.ffnn_w2,
            &self.ffnn_b2,
            &self.gru_w_r,
            &self.gru_u_r,
            &self.gru_b_r,
            &self.gru_w_u,
            &self.gru_u_u,
            &self.gru_b_u,
            &self.gru_w_c,
            &self.gru_u_c,
            &self.gru_b_c,
            &self.cls_w,
            &self.cls_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.embeddings,
            &mut self.ffnn_w1,
            &mut self.ffnn_b1,
            &mut self.ffnn_w2,
            &mut self.ffnn_b2,
            &mut self.gru_w_r,
            &mut self.gru_u_r,
            &mut self.gru_b_r,
            &mut self.gru_w_u,
            &mut self.gru_u_u,
            &mut self.gru_b_u,
            &mut self.gru_w_c,
            &mut self.gru_u_c,
            &mut self.gru_b_c,
            &mut self.cls_w,
            &mut self.cls_b,
        ]
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        TENSOR_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn embedding(&self, digit: u8) -> &[f64] {
        self.embeddings.row(digit as usize)
    }

    /// `[emb(digit); emb(n); emb(m)]`.
    pub fn input_vector(&self, digit: u8, query: (u8, u8)) -> Vec<f64> {
        self.input_from_block(self.embedding(digit), query)
    }

    /// Joins an arbitrary digit block with the query embeddings.
    pub fn input_from_block(&self, block: &[f64], (n, m): (u8, u8)) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * block.len());
        v.extend_from_slice(block);
        v.extend_from_slice(self.embedding(n));
        v.extend_from_slice(self.embedding(m));
        v
    }

    pub fn ffnn(&self, h0: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = affine(h0, &self.ffnn_w1, &self.ffnn_b1)
            .into_iter()
            .map(f64::tanh)
            .collect();
        affine(&hidden, &self.ffnn_w2, &self.ffnn_b2)
            .into_iter()
            .map(f64::tanh)
            .collect()
    }

    /// One GRU step:
    /// `r = σ(W_r in + U_r h + b_r)`, `u = σ(W_u in + U_u h + b_u)`,
    /// `c = tanh(W_c in + U_c (r ⊙ h) + b_c)`, `h' = (1 − u) ⊙ h + u ⊙ c`.
    pub fn gru_cell(&self, input: &[f64], state: &[f64]) -> Vec<f64> {
        let mut r = affine(input, &self.gru_w_r, &self.gru_b_r);
        matvec_into(state, &self.gru_u_r, &mut r);
        let mut u = affine(input, &self.gru_w_u, &self.gru_b_u);
        matvec_into(state, &self.gru_u_u, &mut u);
        let rh: Vec<f64> = r.iter().zip(state).map(|(&r, &h)| logistic(r) * h).collect();
        let mut c = affine(input, &self.gru_w_c, &self.gru_b_c);
        matvec_into(&rh, &self.gru_u_c, &mut c);
        u.iter()
            .zip(&c)
            .zip(state)
            .map(|((&u, &c), &h)| {
                let u = logistic(u);
                let c = c.tanh();
                (1.0 - u) * h + u * c
            })
            .collect()
    }

    /// GRU states for a bottleneck sequence, starting from zero.
    pub fn run_gru(&self, h1: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut state = vec![0.0; self.config.gru_hidden];
        let mut states = Vec::with_capacity(h1.len());
        for x in h1 {
            state = self.gru_cell(x, &state);
            states.push(state.clone());
        }
        states
    }

    pub fn classify(&self, last_state: Option<&[f64]>) -> Vec<f64> {
        match last_state {
            Some(s) => affine(s, &self.cls_w, &self.cls_b),
            None => self.cls_b.data().to_vec(),
        }
    }

    /// Logits for a bottleneck sequence, running only the GRU and read-out.
    pub fn logits_from_hidden(&self, h1: &[Vec<f64>]) -> Vec<f64> {
        let mut state = vec![0.0; self.config.gru_hidden];
        for x in h1 {
            state = self.gru_cell(x, &state);
        }
        if h1.is_empty() {
            self.classify(None)
        } else {
            self.classify(Some(&state))
        }
    }

    /// Logits when each position's digit block is replaced by `blocks[i]`.
    pub fn logits_from_blocks(&self, blocks: &[Vec<f64>], query: (u8, u8)) -> Vec<f64> {
        let h1: Vec<Vec<f64>> = blocks
            .iter()
            .map(|b| self.ffnn(&self.input_from_block(b, query)))
            .collect();
        self.logits_from_hidden(&h1)
    }

    /// Logits of an arbitrary (possibly empty) digit sequence.
    pub fn logits(&self, digits: &[u8], query: (u8, u8)) -> Vec<f64> {
        let h1: Vec<Vec<f64>> = digits
            .iter()
            .map(|&d| self.ffnn(&self.input_vector(d, query)))
            .collect();
        self.logits_from_hidden(&h1)
    }

    pub fn predict(&self, digits: &[u8], query: (u8, u8)) -> usize {
        argmax(&self.logits(digits, query))
    }

    pub fn forward(&self, example: &ToyExample) -> ModelTrace {
        let h0: Vec<Vec<f64>> = example
            .digits
            .iter()
            .map(|&d| self.input_vector(d, example.query))
            .collect();
        let h1: Vec<Vec<f64>> = h0.iter().map(|x| self.ffnn(x)).collect();
        let gru_states = self.run_gru(&h1);
        let logits = self.classify(gru_states.last().map(Vec::as_slice));
        let class_probs = softmax(&logits);
        ModelTrace {
            h0,
            h1,
            gru_states,
            logits,
            class_probs,
        }
    }

    pub fn accuracy(&self, examples: &[ToyExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let correct = examples
            .iter()
            .filter(|ex| (self.predict(&ex.digits, ex.query) == 1) == ex.label)
            .count();
        correct as f64 / examples.len() as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, t) in self.named_tensors() {
            ckpt.push(name, t.clone());
        }
        ckpt
    }

    /// Rebuilds parameters, inferring the configuration from the tensors.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let emb = ckpt.shape_of("embeddings")?;
        let w1 = ckpt.shape_of("ffnn.w1")?;
        let u_r = ckpt.shape_of("gru.u_r")?;
        if emb.len() != 2 || w1.len() != 2 || u_r.len() != 2 {
            return Err(Error::Checkpoint("weight matrices must be 2-D".into()));
        }
        let config = ModelConfig {
            embed_dim: emb[1],
            ffnn_hidden: w1[1],
            gru_hidden: u_r[0],
        };
        Self::from_checkpoint_with(ckpt, config)
    }

    /// Rebuilds parameters, requiring every tensor to match `config`.
    pub fn from_checkpoint_with(mut ckpt: Checkpoint, config: ModelConfig) -> Result<Self> {
        let shapes = Self::expected_shapes(&config);
        let mut params = Self::zeros(config);
        for ((name, shape), slot) in TENSOR_NAMES.iter().zip(&shapes).zip(params.tensors_mut()) {
            *slot = ckpt.take(name, shape)?;
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(params)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn load_checkpoint_with(path: &Path, config: ModelConfig) -> Result<Self> {
        Self::from_checkpoint_with(Checkpoint::load(path)?, config)
    }
}

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub vars: [Var; 16],
    embed_dim: usize,
    gru_hidden: usize,
}

impl ModelVars {
    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn new(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params.tensors().map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        });
        Self {
            vars,
            embed_dim: params.config.embed_dim,
            gru_hidden: params.config.gru_hidden,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embedding(&self, tape: &mut Tape, digit: u8) -> Result<Var> {
        tape.embedding(self.vars[0], digit as usize)
    }

    /// `h0 = [block; emb(n); emb(m)]`.
    pub fn input(&self, tape: &mut Tape, block: Var, (n, m): (u8, u8)) -> Result<Var> {
        let en = self.embedding(tape, n)?;
        let em = self.embedding(tape, m)?;
        tape.concat(&[block, en, em])
    }

    pub fn ffnn(&self, tape: &mut Tape, h0: Var) -> Result<Var> {
        let v = &self.vars;
        let a = tape.matmul(h0, v[1])?;
        let a = tape.add(a, v[2])?;
        let a = tape.tanh(a);
        let b = tape.matmul(a, v[3])?;
        let b = tape.add(b, v[4])?;
        Ok(tape.tanh(b))
    }

    pub fn gru_cell(&self, tape: &mut Tape, input: Var, state: Var) -> Result<Var> {
        let v = &self.vars;
        let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
            let a = tape.matmul(input, w)?;
            let c = tape.matmul(h, u)?;
            let s = tape.add(a, c)?;
            tape.add(s, b)
        };
        let r = gate(tape, v[5], v[6], v[7], state)?;
        let r = tape.sigmoid(r);
        let u = gate(tape, v[8], v[9], v[10], state)?;
        let u = tape.sigmoid(u);
        let rh = tape.mul(r, state)?;
        let c = gate(tape, v[11], v[12], v[13], rh)?;
        let c = tape.tanh(c);
        let keep = tape.affine(u, -1.0, 1.0);
        let old = tape.mul(keep, state)?;
        let new = tape.mul(u, c)?;
        tape.add(old, new)
    }

    /// Logits after running the GRU over `h1`.
    pub fn logits_from_hidden(&self, tape: &mut Tape, h1: &[Var]) -> Result<Var> {
        let mut state = tape.constant(Tensor::zeros(&[self.gru_hidden]));
        for &x in h1 {
            state = self.gru_cell(tape, x, state)?;
        }
        let z = tape.matmul(state, self.vars[14])?;
        tape.add(z, self.vars[15])
    }

    /// Logits of `digits` with every digit block taken from the embedding table.
    pub fn logits(&self, tape: &mut Tape, digits: &[u8], query: (u8, u8)) -> Result<Var> {
        let mut h1 = Vec::with_capacity(digits.len());
        for &d in digits {
            let block = self.embedding(tape, d)?;
            let h0 = self.input(tape, block, query)?;
            h1.push(self.ffnn(tape, h0)?);
        }
        self.logits_from_hidden(tape, &h1)
    }
}

/// `KL(p ‖ softmax(logits))` on the tape, `p` given as probabilities.
pub fn kl_to_logits(tape: &mut Tape, target: &[f64], logits: Var) -> Result<Var> {
    let logq = tape.log_softmax(logits)?;
    let p = tape.constant(Tensor::vector(target.to_vec()));
    let cross = tape.mul(p, logq)?;
    let cross = tape.sum(cross);
    let entropy: f64 = target
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    Ok(tape.affine(cross, -1.0, entropy))
}

/// `KL(p ‖ softmax(logits))` on plain values.
pub fn kl_to_logits_plain(target: &[f64], logits: &[f64]) -> f64 {
    let logq = log_softmax(logits);
    target
        .iter()
        .zip(&logq)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &lq)| p * (p.ln() - lq))
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Required validation accuracy.
    pub target_accuracy: f64,
    /// Stop once validation accuracy reaches this value.
    pub early_stop_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            epochs: 50,
            lr: 3e-3,
            batch_size: 64,
            target_accuracy: 0.99,
            early_stop_accuracy: 0.998,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub validation_accuracy: f64,
    pub log: Vec<EpochLog>,
}

/// Cross-entropy loss and its parameter gradients for one example.
pub fn example_gradients(params: &ModelParams, example: &ToyExample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::new(&mut tape, params, true);
    let logits = vars.logits(&mut tape, &example.digits, example.query)?;
    let logp = tape.log_softmax(logits)?;
    let pick = tape.slice(logp, example.label as usize, 1)?;
    let loss = tape.affine(pick, -1.0, 0.0);
    let loss = tape.sum(loss);
    let grads = tape.backward(loss)?;
    let g = vars
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok((tape.value(loss).item(), g))
}

/// Trains with Adam on cross-entropy, keeping the parameters with the best
/// validation accuracy. Does not enforce the accuracy target; see [`train`].
pub fn fit(dataset: &ToyDataset, model: ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut params = ModelParams::init(model, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(config.lr, &sizes);

    let mut best_acc = params.accuracy(&dataset.validation);
    let mut best = params.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let (loss, grads) = example_gradients(&params, &dataset.train[i])?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step });
                }
                total_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (a, g) in a.iter_mut().zip(g) {
                        *a += g;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= scale);
            let mut slices: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
            adam.step(&mut slices, &acc);
            step += 1;
        }
        let validation_accuracy = params.accuracy(&dataset.validation);
        log.push(EpochLog {
            epoch: epoch + 1,
            train_loss: total_loss / dataset.train.len() as f64,
            validation_accuracy,
        });
        if validation_accuracy > best_acc {
            best_acc = validation_accuracy;
            best = params.clone();
        }
        if validation_accuracy >= config.early_stop_accuracy {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        validation_accuracy: best_acc,
        log,
    })
}

/// [`fit`], failing when the best validation accuracy misses the target.
pub fn train(dataset: &ToyDataset, model: ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let outcome = fit(dataset, model, config)?;
    if outcome.validation_accuracy < config.target_accuracy {
        return Err(Error::BelowTarget {
            best_accuracy: outcome.validation_accuracy,
            target: config.target_accuracy,
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            ffnn_hidden: 3,
            gru_hidden: 5,
        }
    }

    #[test]
    fn trace_shapes() {
        let p = ModelParams::init(ModelConfig::default(), 3);
        let ex = ToyExample::new(vec![7, 3, 7, 1], (7, 1)).unwrap();
        let t = p.forward(&ex);
        assert_eq!(t.h0.len(), 4);
        assert!(t.h0.iter().all(|h| h.len() == 192));
        assert!(t.h1.iter().all(|h| h.len() == 2));
        assert_eq!(t.gru_states.len(), 4);
        assert!((t.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_are_uninformative() {
        let p = ModelParams::zeros(ModelConfig::default());
        let ex = ToyExample::new(vec![1, 2, 3], (1, 2)).unwrap();
        assert_eq!(p.forward(&ex).class_probs, vec![0.5, 0.5]);
        let h = p.gru_cell(&[0.0, 0.0], &vec![0.0; 64]);
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_update_gate_copies_state() {
        let mut p = ModelParams::init(small(), 1);
        p.gru_b_u.data_mut().iter_mut().for_each(|b| *b = -1e3);
        let state = vec![0.3, -0.2, 0.9, 0.0, -0.7];
        assert_eq!(p.gru_cell(&[0.5, -0.5], &state), state);
    }

    #[test]
    fn tape_matches_plain_forward() {
        let p = ModelParams::init(small(), 9);
        let ex = ToyExample::new(vec![4, 0, 4, 9, 2], (4, 9)).unwrap();
        let mut tape = Tape::new();
        let vars = ModelVars::new(&mut tape, &p, false);
        let logits = vars.logits(&mut tape, &ex.digits, ex.query).unwrap();
        let plain = p.forward(&ex).logits;
        for (a, b) in tape.value(logits).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_on_tape_matches_plain() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(vec![0.3, -1.2]));
        let kl = kl_to_logits(&mut tape, &[0.8, 0.2], l).unwrap();
        let plain = kl_to_logits_plain(&[0.8, 0.2], &[0.3, -1.2]);
        assert!((tape.value(kl).item() - plain).abs() < 1e-14);
        assert!(kl_to_logits_plain(&[0.5, 0.5], &[0.0, 0.0]).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_rejects_other_hidden_size() {
        let p = ModelParams::init(small(), 2);
        let other = ModelConfig { gru_hidden: 7, ..small() };
        let err = ModelParams::from_checkpoint_with(p.to_checkpoint(), other).unwrap_err();
        assert!(err.to_string().contains("gru.w_r"), "{err}");
    }
}
