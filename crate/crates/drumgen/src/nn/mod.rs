//! Minimal deep-learning substrate: an autodiff tape, parameter registry,
//! Adam, and seeded initializers.

pub mod tape;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use tape::{Grads, Tape, Var};

/// Anything holding named trainable matrices.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>));

    fn named(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, a| out.push((name.to_string(), a.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    /// Round every parameter through f32, matching checkpoint precision.
    fn quantize_f32(&mut self) {
        self.visit_mut(&mut |_, a| a.mapv_inplace(|v| v as f32 as f64));
    }
}

/// Uniform init in `[-limit, limit]`, filled in row-major order.
pub fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    let mut a = Array2::zeros((rows, cols));
    for v in a.iter_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    a
}

/// Xavier/Glorot-style uniform init for a `rows x cols` weight.
pub fn init_xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    init_uniform(rng, rows, cols, limit)
}

/// Adam with bias correction; state is keyed by parameter name so it can be
/// checkpointed and restored exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from gradients keyed by parameter name.
    pub fn update(&mut self, params: &mut dyn Params, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        params.visit_mut(&mut |name, p| {
            let g = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.raw_dim()));
            for ((p, g), (m, v)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        });
    }

    /// Round optimizer state through f32, matching checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for a in self.m.values_mut().chain(self.v.values_mut()) {
            a.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Central finite-difference gradient of `loss` with respect to one matrix.
///
/// `loss` must be a pure function of the matrix contents.
pub fn finite_difference(
    param: &mut Array2<f64>,
    eps: f64,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(param.raw_dim());
    for idx in 0..param.len() {
        let (r, c) = (idx / param.ncols(), idx % param.ncols());
        let orig = param[[r, c]];
        param[[r, c]] = orig + eps;
        let up = loss(param);
        param[[r, c]] = orig - eps;
        let down = loss(param);
        param[[r, c]] = orig;
        grad[[r, c]] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between two gradients, with an absolute floor so
/// near-zero entries do not blow the ratio up.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
