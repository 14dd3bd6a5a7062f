//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use eiven_core::autograd::{self, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller keeps this oracle free of the crate's own init helpers.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Contract a tensor output with fixed random weights so any op can be
/// checked through a scalar loss.
pub fn probe_loss(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let w = Tensor::constant(randn(&mut r, out.numel(), 1.0), out.shape()).unwrap();
    autograd::sum(&autograd::mul(out, &w).unwrap())
}

/// Norm-wise relative error between analytic gradients and central finite
/// differences, taken over every element of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], loss_fn: F) -> f64
where
    F: Fn() -> Tensor<f64>,
{
    for t in inputs {
        t.zero_grad();
    }
    loss_fn().backward().unwrap();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let h = 1e-6;
    let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
    for (t, a) in inputs.iter().zip(&analytic) {
        let base = t.to_vec();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            t.assign(&v).unwrap();
            let up = loss_fn().item();
            v[i] = base[i] - h;
            t.assign(&v).unwrap();
            let down = loss_fn().item();
            let numeric = (up - down) / (2.0 * h);
            diff += (a[i] - numeric).powi(2);
            a_norm += a[i] * a[i];
            n_norm += numeric * numeric;
        }
        t.assign(&base).unwrap();
    }
    diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-12)
}

pub fn param(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(randn(rng, n, std), shape).unwrap()
}
