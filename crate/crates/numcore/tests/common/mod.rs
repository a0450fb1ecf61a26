#![allow(dead_code)]

use finsep_numcore::gradcheck::{numeric_grad, relative_error, FD_STEP};
use finsep_numcore::{Compute, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Like `rand_tensor` but keeps every entry at least 0.05 away from zero, so
/// finite differences never straddle a ReLU/PReLU kink.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = rand_tensor(rng, shape);
    t.map(|v| {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// Relative errors between tape gradients and central differences for every input
/// of `f`, using a fixed random projection of the output as the scalar loss.
pub fn grad_errors(
    inputs: &[Tensor],
    seed: u64,
    f: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> Vec<f64> {
    let mut g0 = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g0.leaf(t.clone())).collect();
    let out = f(&mut g0, &vars);
    let proj = rand_tensor(
        &mut rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)),
        g0.value(out).shape(),
    );
    let loss_of = |g: &mut Graph, out: Var| {
        let p = g.input(proj.clone());
        let m = g.mul(&out, &p).unwrap();
        g.sum(m)
    };
    let loss = loss_of(&mut g0, out);
    let grads = g0.backward(loss).unwrap();
    let mut eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let o = f(&mut g, &vs);
        let l = loss_of(&mut g, o);
        g.value(l).item()
    };
    (0..inputs.len())
        .map(|i| {
            let numeric = numeric_grad(&mut eval, inputs, i, FD_STEP);
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            relative_error(&analytic, &numeric)
        })
        .collect()
}
