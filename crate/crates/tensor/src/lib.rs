//! Small reverse-mode autodiff engine.
//!
//! Values live in a [`Tape`]; every operation appends a node holding its
//! result and the information needed to push gradients back to its inputs.
//! Storage is generic over [`Scalar`] so the same graph code runs in `f32`
//! for training and in `f64` for finite-difference checks.

use std::fmt;

use thiserror::Error;

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod tape;

pub use checkpoint::{apply_entries, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use gradcheck::{grad_check, run_op_suite, GradCheckOptions, GradCheckReport};
pub use optim::{lr_at, sgd_step, Adam, Param, ParamStore};
pub use tape::{Fault, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {message}")]
    Shape { op: &'static str, message: String },
    #[error("region of interest is empty after clipping: {0:?}")]
    EmptyRoi([f64; 4]),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

pub(crate) fn shape_err<T>(op: &'static str, message: impl Into<String>) -> Result<T, TensorError> {
    Err(TensorError::Shape {
        op,
        message: message.into(),
    })
}

/// Floating-point element type: `f32` for training, `f64` for verification.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row-major matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, a: usize, rsa: isize, csa: isize, b: usize, rsb: isize, csb: isize, c: usize) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0);
    assert!(last(m, k, rsa, csa) <= a, "gemm: a too short");
    assert!(last(k, n, rsb, csb) <= b, "gemm: b too short");
    assert!(m * n <= c, "gemm: c too short");
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len());
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above; c is exclusively borrowed and
                // does not alias a or b.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
