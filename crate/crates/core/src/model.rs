//! Trainable parameters and their closed set of forward/backward operations.
//!
//! * encoder: `h -> W2 · σ(W1 · h + b1) + b2`, used only to compare features
//! * prediction head: `h -> W · h + b`, the K class logits
//! * uncertainty slope `theta_u` of the logistic branch `sigmoid(-theta_u · E)`
//!
//! Every `*_backward` accumulates into a [`Gradients`] and returns the
//! gradient with respect to its vector input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{logsumexp, sigmoid, softmax, Scalar};

/// Lower clamp applied to `theta_u` after every update.
pub const THETA_U_MIN: f64 = 1e-6;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    /// `self · x + bias`
    pub fn affine(&self, x: &[S], bias: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x) + bias[r]).collect()
    }

    /// `selfᵀ · y`
    pub fn transpose_mul(&self, y: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o = *o + w * yr;
            }
        }
        out
    }

    /// `self += scale · (u ⊗ v)`
    fn add_outer(&mut self, u: &[S], v: &[S], scale: S) {
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &vc) in row.iter_mut().zip(v) {
                *x = *x + scale * ur * vc;
            }
        }
    }
}

pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = σ(x)`.
    fn derivative_from_output<S: Scalar>(self, y: S) -> S {
        match self {
            Activation::Tanh => S::one() - y * y,
            Activation::Identity => S::one(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub enc_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub activation: Activation,
    pub enc_w1: Matrix<S>,
    pub enc_b1: Vec<S>,
    pub enc_w2: Matrix<S>,
    pub enc_b2: Vec<S>,
    pub head_w: Matrix<S>,
    pub head_b: Vec<S>,
    pub theta_u: S,
}

/// Same tensor layout as [`ModelParams`], holding derivatives of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub enc_w1: Matrix<S>,
    pub enc_b1: Vec<S>,
    pub enc_w2: Matrix<S>,
    pub enc_b2: Vec<S>,
    pub head_w: Matrix<S>,
    pub head_b: Vec<S>,
    pub theta_u: S,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a, S> {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub values: &'a [S],
}

pub struct TensorMut<'a, S> {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub values: &'a mut [S],
}

pub const TENSOR_NAMES: [&str; 7] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "head.w",
    "head.b",
    "theta_u",
];

macro_rules! tensor_views {
    ($self:ident, $view:ident, $one:path, $($slice:tt)*) => {
        vec![
            $view { name: TENSOR_NAMES[0], shape: [$self.enc_w1.rows, $self.enc_w1.cols], values: $($slice)* $self.enc_w1.data },
            $view { name: TENSOR_NAMES[1], shape: [$self.enc_b1.len(), 1], values: $($slice)* $self.enc_b1 },
            $view { name: TENSOR_NAMES[2], shape: [$self.enc_w2.rows, $self.enc_w2.cols], values: $($slice)* $self.enc_w2.data },
            $view { name: TENSOR_NAMES[3], shape: [$self.enc_b2.len(), 1], values: $($slice)* $self.enc_b2 },
            $view { name: TENSOR_NAMES[4], shape: [$self.head_w.rows, $self.head_w.cols], values: $($slice)* $self.head_w.data },
            $view { name: TENSOR_NAMES[5], shape: [$self.head_b.len(), 1], values: $($slice)* $self.head_b },
            $view { name: TENSOR_NAMES[6], shape: [1, 1], values: $one($($slice)* $self.theta_u) },
        ]
    };
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(dims: ModelDims, activation: Activation) -> Self {
        ModelParams {
            activation,
            enc_w1: Matrix::zeros(dims.enc_dim, dims.feature_dim),
            enc_b1: vec![S::zero(); dims.enc_dim],
            enc_w2: Matrix::zeros(dims.enc_dim, dims.enc_dim),
            enc_b2: vec![S::zero(); dims.enc_dim],
            head_w: Matrix::zeros(dims.num_classes, dims.feature_dim),
            head_b: vec![S::zero(); dims.num_classes],
            theta_u: S::one(),
        }
    }

    /// Uniform initialization in `[-a, a]` with `a = 1/sqrt(fan_in)` per layer.
    pub fn init<R: Rng>(dims: ModelDims, activation: Activation, theta_u: S, rng: &mut R) -> Self {
        let mut uniform = |fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            S::lit(rng.random_range(-a..=a))
        };
        let enc_w1 = Matrix::from_fn(dims.enc_dim, dims.feature_dim, |_, _| uniform(dims.feature_dim));
        let enc_b1 = (0..dims.enc_dim).map(|_| uniform(dims.feature_dim)).collect();
        let enc_w2 = Matrix::from_fn(dims.enc_dim, dims.enc_dim, |_, _| uniform(dims.enc_dim));
        let enc_b2 = (0..dims.enc_dim).map(|_| uniform(dims.enc_dim)).collect();
        let head_w = Matrix::from_fn(dims.num_classes, dims.feature_dim, |_, _| uniform(dims.feature_dim));
        let head_b = (0..dims.num_classes).map(|_| uniform(dims.feature_dim)).collect();
        ModelParams {
            activation,
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            head_w,
            head_b,
            theta_u,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.enc_w1.cols,
            enc_dim: self.enc_w1.rows,
            num_classes: self.head_w.rows,
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, S>> {
        tensor_views!(self, TensorRef, std::slice::from_ref, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, S>> {
        tensor_views!(self, TensorMut, std::slice::from_mut, &mut)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.values.iter().all(|x| x.is_finite()))
    }

    /// Plain SGD step; `theta_u` is clamped to stay positive.
    pub fn sgd_step(&mut self, grads: &Gradients<S>, learning_rate: S) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            axpy(p.values, -learning_rate, g.values);
        }
        self.theta_u = self.theta_u.max(S::lit(THETA_U_MIN));
    }

    /// `ĥ = W2 · σ(W1 · h + b1) + b2`
    pub fn encode(&self, h: &[S]) -> Vec<S> {
        self.encode_traced(h).output
    }

    pub fn encode_traced(&self, h: &[S]) -> EncodeTrace<S> {
        let hidden: Vec<S> = self
            .enc_w1
            .affine(h, &self.enc_b1)
            .into_iter()
            .map(|x| self.activation.apply(x))
            .collect();
        let output = self.enc_w2.affine(&hidden, &self.enc_b2);
        EncodeTrace { hidden, output }
    }

    /// `f = W · h + b`
    pub fn class_logits(&self, h: &[S]) -> Vec<S> {
        self.head_w.affine(h, &self.head_b)
    }

    /// Energy of the head's logits for feature `h`.
    pub fn feature_energy(&self, h: &[S]) -> S {
        energy(&self.class_logits(h))
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b` of the prediction head given `∂L/∂f`; returns `∂L/∂h`.
    pub fn class_logits_backward(&self, h: &[S], upstream: &[S], grads: &mut Gradients<S>) -> Vec<S> {
        grads.head_w.add_outer(upstream, h, S::one());
        axpy(&mut grads.head_b, S::one(), upstream);
        self.head_w.transpose_mul(upstream)
    }

    /// Accumulates encoder gradients given `∂L/∂ĥ`; returns `∂L/∂h`.
    pub fn encode_backward(&self, h: &[S], trace: &EncodeTrace<S>, upstream: &[S], grads: &mut Gradients<S>) -> Vec<S> {
        grads.enc_w2.add_outer(upstream, &trace.hidden, S::one());
        axpy(&mut grads.enc_b2, S::one(), upstream);
        let d_hidden = self.enc_w2.transpose_mul(upstream);
        let d_pre: Vec<S> = d_hidden
            .iter()
            .zip(&trace.hidden)
            .map(|(&d, &y)| d * self.activation.derivative_from_output(y))
            .collect();
        grads.enc_w1.add_outer(&d_pre, h, S::one());
        axpy(&mut grads.enc_b1, S::one(), &d_pre);
        self.enc_w1.transpose_mul(&d_pre)
    }
}

/// Encoder activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeTrace<S> {
    pub hidden: Vec<S>,
    pub output: Vec<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros(dims: ModelDims) -> Self {
        Gradients {
            enc_w1: Matrix::zeros(dims.enc_dim, dims.feature_dim),
            enc_b1: vec![S::zero(); dims.enc_dim],
            enc_w2: Matrix::zeros(dims.enc_dim, dims.enc_dim),
            enc_b2: vec![S::zero(); dims.enc_dim],
            head_w: Matrix::zeros(dims.num_classes, dims.feature_dim),
            head_b: vec![S::zero(); dims.num_classes],
            theta_u: S::zero(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, S>> {
        tensor_views!(self, TensorRef, std::slice::from_ref, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, S>> {
        tensor_views!(self, TensorMut, std::slice::from_mut, &mut)
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Gradients<S>, scale: S) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(a.values, scale, b.values);
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.values.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.values.iter().all(|x| x.is_zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.values.iter().all(|x| x.is_finite()))
    }
}

/// `E(f) = -log Σ_k exp(f_k)`
pub fn energy<S: Scalar>(logits: &[S]) -> S {
    -logsumexp(logits)
}

/// `∂E/∂f_k = -softmax(f)_k`, scaled by `upstream`.
pub fn energy_backward<S: Scalar>(logits: &[S], upstream: S) -> Vec<S> {
    softmax(logits).into_iter().map(|p| -p * upstream).collect()
}

/// Probability of the ID class under the logistic uncertainty branch, `sigmoid(-theta_u · E)`.
pub fn ood_probability<S: Scalar>(energy: S, theta_u: S) -> S {
    sigmoid(-theta_u * energy)
}

/// Returns `(∂p/∂E, ∂p/∂theta_u)` scaled by `upstream`.
pub fn ood_probability_backward<S: Scalar>(energy: S, theta_u: S, upstream: S) -> (S, S) {
    let p = ood_probability(energy, theta_u);
    let dz = p * (S::one() - p) * upstream;
    (-theta_u * dz, -energy * dz)
}
