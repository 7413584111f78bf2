//! Stretched and rectified Binary Concrete ("Hard Concrete") gates with
//! support on `[0, 1)`.
//!
//! A sample is `s = σ((log u − log(1 − u) + γ) / τ)` followed by the stretch
//! `z = min(1, max(0, s·(r − l) + l))`. With `r = 1` the stretched sample is
//! below one almost surely, so the only atom is at zero. In floating point a
//! saturated `s` rounds to exactly one, so samples are capped at [`Z_MAX`].

use rand::Rng;

use crate::autograd::{logistic, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Clamp applied to uniform draws so that `log u` stays finite.
pub const UNIFORM_EPS: f64 = 1e-6;

/// Largest `f64` below one; the upper end of every sample.
pub const Z_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardConcrete {
    pub temperature: f64,
    pub left: f64,
    pub right: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            left: -0.2,
            right: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateSample {
    pub u: f64,
    pub s: f64,
    pub z: f64,
}

pub fn clamp_uniform(u: f64) -> f64 {
    u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

impl HardConcrete {
    pub fn new(temperature: f64, left: f64, right: f64) -> Result<Self> {
        let hc = Self {
            temperature,
            left,
            right,
        };
        hc.validate()?;
        Ok(hc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.left < 0.0) {
            return Err(Error::InvalidArgument(format!("stretch l must be negative, got {}", self.left)));
        }
        if !(self.right >= 1.0) {
            return Err(Error::InvalidArgument(format!("stretch r must be at least 1, got {}", self.right)));
        }
        Ok(())
    }

    /// Reparameterized sample for location `location` and uniform draw `u`.
    pub fn sample(&self, location: f64, u: f64) -> GateSample {
        let u = clamp_uniform(u);
        let s = logistic((u.ln() - (1.0 - u).ln() + location) / self.temperature);
        let z = (s * (self.right - self.left) + self.left).max(0.0).min(Z_MAX);
        GateSample { u, s, z }
    }

    pub fn sample_rng<R: Rng>(&self, location: f64, rng: &mut R) -> GateSample {
        self.sample(location, rng.random::<f64>())
    }

    /// `P(z ≠ 0) = σ(γ − τ log(−l / r))`.
    pub fn gate_open_prob(&self, location: f64) -> f64 {
        logistic(location - self.log_ratio_shift())
    }

    fn log_ratio_shift(&self) -> f64 {
        self.temperature * (-self.left / self.right).ln()
    }

    /// Expected number of open gates.
    pub fn expected_l0(&self, locations: &[f64]) -> f64 {
        locations.iter().map(|&g| self.gate_open_prob(g)).sum()
    }

    /// Records a sample on the tape. `location` may be any shape; `uniforms`
    /// supplies one draw per element.
    pub fn sample_on_tape(&self, tape: &mut Tape, location: Var, uniforms: &[f64]) -> Result<Var> {
        let shape = tape.shape(location).to_vec();
        if uniforms.len() != tape.value(location).numel() {
            return Err(Error::Shape {
                op: "hard_concrete",
                lhs: shape,
                rhs: vec![uniforms.len()],
            });
        }
        let noise: Vec<f64> = uniforms
            .iter()
            .map(|&u| {
                let u = clamp_uniform(u);
                u.ln() - (1.0 - u).ln()
            })
            .collect();
        let noise = tape.constant(Tensor::new(shape, noise)?);
        let logit = tape.add(location, noise)?;
        let logit = tape.affine(logit, 1.0 / self.temperature, 0.0);
        let s = tape.sigmoid(logit);
        let stretched = tape.affine(s, self.right - self.left, self.left);
        let z = tape.max_const(stretched, 0.0);
        Ok(tape.min_const(z, Z_MAX))
    }

    /// Differentiable `P(z ≠ 0)` per element of `location`.
    pub fn gate_open_prob_on_tape(&self, tape: &mut Tape, location: Var) -> Var {
        let shifted = tape.affine(location, 1.0, -self.log_ratio_shift());
        tape.sigmoid(shifted)
    }

    /// Differentiable expected L0 over all elements of `location`.
    pub fn expected_l0_on_tape(&self, tape: &mut Tape, location: Var) -> Var {
        let p = self.gate_open_prob_on_tape(tape, location);
        tape.sum(p)
    }
}
