//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use ddmseg::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that vanishing gradients
/// compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Evaluates `f` on fresh graphs with the given inputs registered as params.
fn eval(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item().unwrap()
}

/// Central-difference gradients of a scalar function of several tensors.
pub fn numeric_grads(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].numel());
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            gi.push((eval(f, &plus) - eval(f, &minus)) / (2.0 * FD_STEP));
        }
        out.push(gi);
    }
    out
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients over every input element.
pub fn max_grad_error(f: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let numeric = numeric_grads(f, inputs);
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let ana = g.grad(*v).unwrap();
        for (a, n) in ana.data().iter().zip(num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Contracts a tensor-valued node with fixed random weights so that every
/// output element contributes a distinct amount to the scalar.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random_tensor(&mut r, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}
