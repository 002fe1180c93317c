//! Dense tensors and the differentiable layer set used by the network.
//!
//! Every layer is a pair of pure functions: a forward pass that returns
//! whatever it needs to keep for the reverse pass, and a backward pass that
//! maps the upstream gradient to gradients of the inputs and parameters.
//! Rank-3 tensors are laid out as `[batch, channels, time]`, row-major.

mod activation;
mod adam;
mod conv;
mod gradcheck;
mod layout;
mod norm;
mod pool;
mod real;

pub use activation::{elu, elu_backward, softmax, softmax_backward, tanh, tanh_backward};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv1d, conv1d_backward, Conv1dGrads};
pub use gradcheck::{grad_check, max_relative_error, numeric_gradient};
pub use layout::{
    concat_channels, crop_time, pad_time, split_channels, swap_last_axes,
};
pub use norm::{
    batch_norm, batch_norm_backward, categorical_bn, categorical_bn_backward, sandwich_bn,
    sandwich_bn_backward, Affine, AffineGrads, BatchNormState, CategoricalBNState, Mode,
    NormCache, RunningStats, SandwichBNState, SandwichGrads, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{
    avgpool1d, avgpool1d_backward, maxpool1d, maxpool1d_backward, upsample_nearest,
    upsample_nearest_backward, MaxPoolIndices,
};
pub use real::{DType, Real};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFinite { name: String },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::contract(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::contract(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Convenience constructor for `[1, 1, n]` signals.
    pub fn from_signal(values: &[T]) -> Self {
        Tensor {
            shape: vec![1, 1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Splits a rank-3 shape into `(batch, channels, time)`.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, t] => Ok((b, c, t)),
            _ => Err(TensorError::Shape {
                op,
                axis: "rank",
                expected: 3,
                found: self.shape.len(),
            }),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign on different shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }
}

pub(crate) fn expect_axis(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    found: usize,
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(TensorError::Shape {
            op,
            axis,
            expected,
            found,
        })
    }
}

/// Runs `f(index, chunk)` over consecutive `chunk`-sized pieces of `data`,
/// in parallel when the `parallel` feature is on.
pub(crate) fn for_each_chunk<T: Send>(
    data: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Sync + Send,
) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
