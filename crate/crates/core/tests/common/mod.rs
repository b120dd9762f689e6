#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stan_core::config::ModelConfig;
use stan_core::model::StanModel;
use stan_core::params::ParamStore;
use stan_core::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0)).unwrap()
}

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn tiny() -> (StanModel, ParamStore<f32>) {
    StanModel::new(&ModelConfig::tiny(), 11).unwrap()
}

pub fn desk() -> (StanModel, ParamStore<f32>) {
    StanModel::new(&ModelConfig::default(), 11).unwrap()
}

pub fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// `x[n, k] · w[k, m] + b[m]` over row-major slices.
pub fn affine(x: &[f64], n: usize, w: &[f32], b: &[f32], m: usize) -> Vec<f64> {
    let k = x.len() / n;
    assert_eq!(w.len(), k * m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = b[j] as f64;
            for t in 0..k {
                s += x[i * k + t] * w[t * m + j] as f64;
            }
            out[i * m + j] = s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}
