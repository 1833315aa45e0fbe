//! Minimal reverse-mode differentiation engine.
//!
//! Covers exactly the layer set the classifier and the convolutional VAE
//! need: convolution (strided / same-padded), batch normalization, ReLU,
//! dropout, max pooling, dense layers, softmax cross-entropy, sum of
//! squared errors, the Gaussian KL term and the reparameterization step.
//! Training runs in `f32` with 64-bit accumulation in every reduction;
//! gradient-check tests instantiate the same code at `f64`.

pub mod adam;
pub mod checkpoint;
pub mod rng;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use rng::{derive_seed, Stream, StreamRng};
pub use tape::{
    softmax_rows, BatchNormMode, Grads, Padding, RunningStats, Tape, TapeError, TensorId,
};

/// Element type of the engine: `f32` for training storage, `f64` for
/// gradient-check precision. Reductions accumulate in `f64` either way.
pub trait Real: Copy + PartialOrd + std::fmt::Debug + std::fmt::Display + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shaped array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "value count {} does not match shape {:?}",
            values.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Self {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::ZERO; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Self {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    /// Same values under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        Self::new(shape, self.values.clone())
    }

    pub fn map_to_f32(&self) -> Tensor<f32> {
        Tensor::new(
            &self.shape,
            self.values.iter().map(|v| v.to_f64() as f32).collect(),
        )
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor::new(&self.shape, self.values.iter().map(|v| v.to_f64()).collect())
    }
}
