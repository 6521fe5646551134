//! Dense row-major tensors and a reverse-mode tape.
//!
//! Values are always held as `f64`. A tensor created with
//! [`Precision::Single`] has every value rounded through `f32`, and any op
//! with a single-precision input rounds its output the same way, so a model
//! trained in single precision sees exactly the values an `f32` pipeline
//! would store. Gradient checks use [`Precision::Double`].

mod finite_diff;
mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use finite_diff::{finite_diff, max_relative_error, relative_error};
pub use kernels::{matmul_a_bt, matmul_at_b, matmul_into, tanh_exp};
pub use tape::{elu, sigmoid, softmax, BackwardFn, BatchNormMode, BatchStats, Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape {lhs:?} is incompatible with {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the function's domain")]
    Domain { op: &'static str },
    #[error("backward() needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    Single,
    #[default]
    #[serde(rename = "f64")]
    Double,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    pub fn apply(self, data: &mut [f64]) {
        if self == Precision::Single {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Result precision of an op over inputs of `self` and `other`.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::Single || other == Precision::Single {
            Precision::Single
        } else {
            Precision::Double
        }
    }

    pub fn dtype(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }

    pub fn from_dtype(s: &str) -> Option<Precision> {
        match s {
            "f32" => Some(Precision::Single),
            "f64" => Some(Precision::Double),
            _ => None,
        }
    }
}

/// An immutable shaped array. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Tensor> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        let mut data = data;
        precision.apply(&mut data);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            precision,
            requires_grad: false,
        })
    }

    /// Double-precision constructor used throughout the tests.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, data, Precision::Double)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], precision).expect("valid zeros shape")
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n], precision).expect("valid fill")
    }

    /// Skips the finiteness scan; callers guarantee finite, pre-rounded data.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, precision: Precision) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            precision,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Tensor {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Same values, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            precision: self.precision,
            requires_grad: self.requires_grad,
        })
    }

    /// Re-rounds the values for a different precision.
    pub fn cast(&self, precision: Precision) -> Tensor {
        let mut data = self.to_vec();
        precision.apply(&mut data);
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            precision,
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect(), self.precision)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &self.precision)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(())
}
