//! Finite-difference checks for every tape primitive.

use std::rc::Rc;

use rand::Rng;

use splatrefine::autodiff::{Tape, Tensor, Var};
use splatrefine::Real;

use super::{rel_err, rng};

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "softmax_rows",
    "softmax_cols",
    "softmax_rank3",
    "layer_norm",
    "gather",
    "scatter_add",
    "reshape",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "sum",
    "mean",
    "custom",
];

pub fn input_shapes(op: &str) -> Vec<Vec<usize>> {
    match op {
        "add" | "sub" | "mul" => vec![vec![3, 4], vec![3, 4]],
        "add_bias" => vec![vec![3, 4], vec![4]],
        "matmul" => vec![vec![2, 3], vec![3, 2]],
        "softmax_rank3" => vec![vec![2, 3, 4]],
        "layer_norm" => vec![vec![3, 5], vec![5], vec![5]],
        "gather" | "scatter_add" => vec![vec![3, 2]],
        "concat_cols" => vec![vec![3, 2], vec![3, 3]],
        "concat_rows" => vec![vec![2, 3], vec![1, 3]],
        _ => vec![vec![3, 4]],
    }
}

/// Apply `op` to the inputs. The custom case is an elementwise cube with a
/// hand-written derivative.
pub fn apply<'t, T: Real>(tape: &'t Tape<T>, op: &str, x: &[Var<'t, T>]) -> Var<'t, T> {
    let idx = || Rc::new(vec![2usize, 0, 2, 1]);
    match op {
        "add" => x[0].add(x[1]).unwrap(),
        "sub" => x[0].sub(x[1]).unwrap(),
        "mul" => x[0].mul(x[1]).unwrap(),
        "add_bias" => x[0].add_bias(x[1]).unwrap(),
        "scale" => x[0].scale(-1.7),
        "matmul" => x[0].matmul(x[1]).unwrap(),
        "relu" => x[0].relu(),
        "sigmoid" => x[0].sigmoid(),
        "exp" => x[0].exp(),
        "softmax_rows" => x[0].softmax(1).unwrap(),
        "softmax_cols" => x[0].softmax(0).unwrap(),
        "softmax_rank3" => x[0].softmax(1).unwrap(),
        "layer_norm" => x[0].layer_norm(x[1], x[2]).unwrap(),
        "gather" => x[0].gather(idx()).unwrap(),
        "scatter_add" => x[0].gather(idx()).unwrap().scatter_add(idx(), 3).unwrap(),
        "reshape" => x[0].reshape(&[2, 6]).unwrap().softmax(1).unwrap(),
        "slice_cols" => x[0].slice_cols(1, 2).unwrap(),
        "concat_cols" => tape.concat_cols(&[x[0], x[1]]).unwrap(),
        "concat_rows" => tape.concat_rows(&[x[0], x[1]]).unwrap(),
        "sum" => x[0].exp().sum(),
        "mean" => x[0].exp().mean(),
        "custom" => tape
            .custom(&[x[0]], |v| {
                let a = v[0].clone();
                let out = a.map(|t| t * t * t);
                let back: splatrefine::autodiff::BackwardFn<T> = Box::new(move |g| {
                    vec![g.zip_map(&a, |u, t| u * T::lit(3.0) * t * t)]
                });
                Ok((out, back))
            })
            .unwrap(),
        _ => panic!("unknown op {op}"),
    }
}

/// Random inputs kept at least 0.1 away from zero so `relu` stays off its
/// kink under a 1e-3 step.
pub fn random_inputs(op: &str, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    input_shapes(op)
        .iter()
        .map(|s| {
            Tensor::from_fn(s, |_| {
                let m = r.random_range(0.1..1.0);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
        })
        .collect()
}

fn loss<T: Real>(op: &str, inputs: &[Tensor<T>], weights: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = apply(&tape, op, &vars);
    let v = out.value();
    v.data().iter().zip(weights.data()).map(|(a, w)| a.as_f64() * w).sum()
}

/// Worst relative error between tape gradients and central differences of
/// `Σ w·op(x)` for random `w`, evaluated entirely in precision `T`.
pub fn check_op<T: Real>(op: &str, seed: u64, eps: f64, floor: f64) -> f64 {
    let inputs: Vec<Tensor<T>> = random_inputs(op, seed).iter().map(|t| t.cast()).collect();
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = apply(&tape, op, &vars);
    let shape = out.shape();
    let mut r = rng(seed ^ 0x5eed);
    let weights = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0));
    let wt = tape.constant(weights.cast());
    let l = out.mul(wt).unwrap().sum();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).unwrap();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            let x = inputs[k].data()[i];
            plus[k].data_mut()[i] = x + T::lit(eps);
            minus[k].data_mut()[i] = x - T::lit(eps);
            let h = (x + T::lit(eps)).as_f64() - (x - T::lit(eps)).as_f64();
            let fd = (loss(op, &plus, &weights) - loss(op, &minus, &weights)) / h;
            worst = worst.max(rel_err(g.data()[i].as_f64(), fd, floor));
        }
    }
    worst
}
