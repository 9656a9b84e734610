#![allow(dead_code)]

pub mod mapcheck;

use cft_core::autodiff::{Graph, ParamStore, Var};
use cft_core::rng::Rng;
use cft_core::{Result, Tensor};

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Weighted sum of `v` against fixed random weights, so every output
/// element gets a distinct upstream gradient.
pub fn probe<'g>(g: &'g Graph<f64>, v: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = random(&v.shape(), seed ^ 0xabc, -1.0, 1.0);
    v.mul(g.constant(w))?.sum()
}

/// Overwrite every parameter with uniform noise in `[-a, a]`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, a: f64) {
    let ids: Vec<_> = store.iter().map(|(pid, _)| pid).collect();
    for (i, pid) in ids.into_iter().enumerate() {
        let shape = store.value(pid).shape().to_vec();
        store
            .set_value(pid, random(&shape, seed.wrapping_add(i as u64), -a, a))
            .unwrap();
    }
}
