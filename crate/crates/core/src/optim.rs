//! Adam over a fixed, ordered list of tensors.

use crate::autograd::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    /// Step size per tensor.
    pub rates: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self::with_rates(vec![lr; sizes.len()], sizes)
    }

    /// A separate step size for every tensor.
    pub fn with_rates(rates: Vec<f64>, sizes: &[usize]) -> Self {
        assert_eq!(rates.len(), sizes.len(), "one step size per tensor");
        Self {
            rates,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_tensors(lr: f64, tensors: &[&Tensor]) -> Self {
        let sizes: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
        Self::new(lr, &sizes)
    }

    /// One descent step. `grads[i]` must match `params[i]` in length.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((((p, g), m), v), &lr) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&self.rates)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(0.1, &[2]);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            adam.step(&mut [x.as_mut_slice()], &[g]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }
}
