//! Parameter containers and the two building blocks used everywhere:
//! affine layers and rectified perceptrons.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::{round_f32, Matrix};

/// Deterministic generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Optimizer parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Everything except the word embedding rows.
    Main,
    /// Word embedding rows (fine-tuned at a much lower rate).
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamMeta {
    pub group: ParamGroup,
    /// Batch-normalization affine parameters opt out of weight decay.
    pub decay: bool,
}

impl ParamMeta {
    pub const MAIN: ParamMeta = ParamMeta { group: ParamGroup::Main, decay: true };
    pub const NO_DECAY: ParamMeta = ParamMeta { group: ParamGroup::Main, decay: false };
    pub const EMBEDDING: ParamMeta = ParamMeta { group: ParamGroup::Embedding, decay: true };
}

/// A named, trainable matrix.
pub struct ParamRef<'p> {
    pub name: String,
    pub meta: ParamMeta,
    pub value: &'p Matrix,
}

pub struct ParamMut<'p> {
    pub name: String,
    pub meta: ParamMeta,
    pub value: &'p mut Matrix,
}

/// Anything owning trainable matrices. Both visitors must yield the same
/// names in the same order.
pub trait Parameters {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>);
    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn round_matrix(m: Matrix) -> Matrix {
    m.map(round_f32)
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut Rng) -> Matrix {
    let dist = Normal::new(mean, std).expect("valid normal parameters");
    round_matrix(Matrix::from_fn(rows, cols, |_, _| dist.sample(rng)))
}

/// Affine map `x · W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(input, output), bias: Matrix::zeros(1, output) }
    }

    /// Uniform `±1/√in` initialization for weight and bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(input.max(1) as f64);
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let weight = round_matrix(Matrix::from_fn(input, output, |_, _| dist.sample(rng)));
        let bias = round_matrix(Matrix::from_fn(1, output, |_, _| rng.sample(dist)));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Plain (non-recording) evaluation.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for i in 0..y.rows() {
            for (o, b) in y.row_mut(i).iter_mut().zip(self.bias.as_slice()) {
                *o += b;
            }
        }
        y
    }
}

impl Parameters for Linear {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        out.push(ParamRef { name: join(prefix, "weight"), meta: ParamMeta::MAIN, value: &self.weight });
        out.push(ParamRef { name: join(prefix, "bias"), meta: ParamMeta::MAIN, value: &self.bias });
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        out.push(ParamMut { name: join(prefix, "weight"), meta: ParamMeta::MAIN, value: &mut self.weight });
        out.push(ParamMut { name: join(prefix, "bias"), meta: ParamMeta::MAIN, value: &mut self.bias });
    }
}

/// Stack of [`Linear`] layers with a rectifier between consecutive layers
/// (none after the last one).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, mut x: Var) -> Var {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let last = self.layers.len().saturating_sub(1);
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.apply(&y);
            if i < last {
                y = y.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        y
    }
}

impl Parameters for Mlp {
    fn params<'p>(&'p self, prefix: &str, out: &mut Vec<ParamRef<'p>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&join(prefix, &format!("{i}")), out);
        }
    }

    fn params_mut<'p>(&'p mut self, prefix: &str, out: &mut Vec<ParamMut<'p>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&join(prefix, &format!("{i}")), out);
        }
    }
}
