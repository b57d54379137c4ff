#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.random_range(-1.0..1.0))
}

/// `sum(v * R)` for a fixed pseudo-random `R`, so every output element
/// contributes a distinct weight to the scalar under test.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let w = randn(&mut r, g.shape(v), 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

/// Largest elementwise relative error between reverse-mode gradients and
/// central differences (step 1e-5) over all `inputs`.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - STEP;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}
