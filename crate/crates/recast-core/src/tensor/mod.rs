//! Dense tensors with tape-based reverse-mode autodiff, the layer
//! operations every block type needs, Xavier initialization and the two
//! optimizers used for training and recasting.

mod init;
mod optim;
mod scalar;
mod tape;

pub use init::{xavier_init, xavier_uniform, RngPool};
pub use optim::{optimizer_step, OptKind, OptState, OptimizerConfig, Param, ParamId, ParamSet};
pub use scalar::{matmul, matmul_at, matmul_bt, Scalar};
pub use tape::{Mode, Tape, ValRef};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {actual:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        actual: Vec<usize>,
    },
    #[error("conv2d: input has {input_channels} channels but weight expects {weight_channels}")]
    ChannelMismatch {
        input_channels: usize,
        weight_channels: usize,
    },
    #[error("conv2d: kernel {k}x{k} does not fit input {h}x{w} with padding {padding}")]
    KernelTooLarge {
        k: usize,
        h: usize,
        w: usize,
        padding: usize,
    },
    #[error("batchnorm: train mode needs at least 2 values per channel, got {per_channel}")]
    DegenerateVariance { per_channel: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid optimizer config: {0}")]
    BadOptimizerConfig(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("xavier init requires >= 2 dimensions, got shape {shape:?}")]
    InitRank { shape: Vec<usize> },
}

/// Dense N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// (batch, channels, height, width) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        if self.shape.len() != 4 {
            return Err(TensorError::BadRank {
                op: "dims4",
                expected: "a rank-4 tensor",
                actual: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Finite check via one vectorizable |v| sum: any NaN/inf poisons the
    /// f64 accumulator, and finite f32/f64 data cannot overflow it.
    pub fn all_finite(&self) -> bool {
        let acc: f64 = self.data.iter().map(|v| v.to_f64().abs()).sum();
        acc.is_finite()
    }

    /// Convert the element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
