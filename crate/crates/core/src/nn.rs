//! Parameterised layers shared by the attention blocks and the model heads.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor};

/// Walks named parameters in a fixed order. The order is what lets a tracked
/// copy of a model line up with the original when gradients come back.
pub trait Params<S: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear<S: Real = f32> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Real> Linear<S> {
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self { weight: Tensor::randn(&[fan_in, fan_out], std, rng), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn identity(d: usize) -> Self {
        Self { weight: Tensor::eye(d), bias: Tensor::zeros(&[d]) }
    }

    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = tape.matmul(x, &self.weight)?;
        tape.add_row(&y, &self.bias)
    }
}

impl<S: Real> Params<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<S: Real = f32> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Real> LayerNorm<S> {
    pub fn new(d: usize) -> Self {
        Self { gain: Tensor::ones(&[d]), bias: Tensor::zeros(&[d]) }
    }

    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        tape.layer_norm(x, &self.gain, &self.bias)
    }
}

impl<S: Real> Params<S> for LayerNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp<S: Real = f32> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Real> Mlp<S> {
    pub fn random<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self { fc1: Linear::random(d_in, hidden, rng), fc2: Linear::random(hidden, d_out, rng) }
    }

    pub fn forward(&self, tape: &Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(&h)?;
        self.fc2.forward(tape, &h)
    }
}

impl<S: Real> Params<S> for Mlp<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<S>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
