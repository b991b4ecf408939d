//! Dense row-major `f64` tensors.

use rand::Rng;

use crate::error::{contract, Result};
use crate::rng::rng_from;

/// A dense N-dimensional array of `f64` in row-major order.
///
/// Parameters carry `requires_grad` and an accumulated `grad`; activations
/// recorded on a [`Tape`](crate::tape::Tape) use plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Panics if `shape` and `data` disagree on the element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Glorot/Xavier uniform initialization: values in `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
///
/// For rank-2 shapes the two axes are the fans. Higher ranks follow the
/// convolution convention `[out, in, k...]` with the receptive field folded
/// into both fans. Rank-1 shapes (biases) are rejected; those start at zero.
pub fn xavier_uniform(shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.len() < 2 {
        return Err(contract(format!(
            "xavier init needs at least 2 axes, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(contract(format!("zero extent in shape {shape:?}")));
    }
    let receptive: usize = shape[2..].iter().product();
    let (fan_out, fan_in) = (shape[0] * receptive, shape[1] * receptive);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::new(shape.to_vec(), data))
}
