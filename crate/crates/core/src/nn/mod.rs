//! Minimal dense network engine with hand-written backward passes.
//!
//! Every layer exposes `forward(&self, ..) -> (output, cache)` and
//! `backward(&mut self, cache, grad_output) -> grad_input`; parameter
//! gradients accumulate into [`Param::grad`] until [`Param::zero_grad`].
//! Feature maps are `[C, H, W]` and token matrices `[N, D]`, both row-major.

pub mod gradcheck;
pub mod layers;
pub mod scalar;

pub use layers::{
    gelu, gelu_backward, relu_backward, relu_inplace, sigmoid, Concat, Conv2d, GroupNorm,
    LayerNorm, Linear, MultiHeadAttention, Upsample2x,
};
pub use scalar::{matmul, Scalar};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a feature map.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C, H, W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// `(rows, cols)` of a matrix.
    pub fn rc(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected [N, D], got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }
}

/// A named learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: F) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Normal(0, std) resampled until within two standard deviations.
    pub fn trunc_normal<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        for v in p.value.iter_mut() {
            let mut x: f64 = normal.sample(rng);
            while x.abs() > 2.0 * std {
                x = normal.sample(rng);
            }
            *v = F::of(x);
        }
        p
    }

    /// He-normal initialisation for layers followed by a ReLU.
    pub fn kaiming<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut p = Self::zeros(name, shape);
        let normal = Normal::new(0.0, std).expect("fan_in must be positive");
        for v in p.value.iter_mut() {
            *v = F::of(normal.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn rename(mut self, prefix: &str) -> Self {
        self.name = format!("{prefix}.{}", self.name);
        self
    }
}

/// Anything owning parameters.
pub trait Module<F: Scalar> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
