//! Named parameter sets, the layer helpers built on the tape, and Adam.

use rand::Rng;

use crate::autodiff::{Gradients, Result, Tape, Tensor, Var};
use crate::real::Real;

/// Ordered collection of named tensors; order is insertion order and is the
/// order used for checkpoints and optimiser state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Insert or replace.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index_of(&name) {
            Some(i) => self.tensors[i] = t,
            None => {
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    /// Weight `[fan_in, fan_out]` and bias uniform in `±sqrt(1/fan_in)`.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |_| T::lit(rng.random_range(-bound..bound));
        let w = Tensor::from_fn(&[fan_in, fan_out], &mut draw);
        let b = Tensor::from_fn(&[fan_out], &mut draw);
        self.insert(format!("{name}.w"), w);
        self.insert(format!("{name}.b"), b);
    }

    pub fn add_zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn add_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.g"), Tensor::full(&[dim], T::one()));
        self.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
    }

    /// `linear → layer_norm → relu → linear`.
    pub fn add_mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut impl Rng) {
        self.add_linear(&format!("{name}.l1"), fan_in, hidden, rng);
        self.add_layer_norm(&format!("{name}.ln"), hidden);
        self.add_linear(&format!("{name}.l2"), hidden, fan_out, rng);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Put every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Parameters placed on a tape, addressable by name.
pub struct Bound<'t, T> {
    names: Vec<String>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Var<'t, T> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Gradients in parameter order.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| g.get(*v).expect("bound leaf").clone()).collect()
    }

    pub fn linear(&self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.var(&format!("{name}.w")))?.add_bias(self.var(&format!("{name}.b")))
    }

    pub fn layer_norm(&self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.var(&format!("{name}.g")), self.var(&format!("{name}.b")))
    }

    pub fn mlp(&self, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.linear(&format!("{name}.l1"), x)?;
        let h = self.layer_norm(&format!("{name}.ln"), h)?.relu();
        self.linear(&format!("{name}.l2"), h)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction; state follows [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            step: 0,
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (ADAM_EPS * c2.sqrt()) as f32;
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *x -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}
