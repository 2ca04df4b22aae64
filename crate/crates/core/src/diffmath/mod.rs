//! Dense tensors with reverse-mode differentiation.
//!
//! Model code is written once against [`Ops`] and runs either on a recording
//! [`Tape`] (training) or on [`Eval`], which computes values without keeping
//! any history (rollouts, state refreshes).

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Mismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: unsupported rank {rank}")]
    Rank { op: &'static str, rank: usize },
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// Primitive operations shared by the recording and non-recording backends.
pub trait Ops {
    type Value: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Value;
    /// A leaf that receives a gradient when recorded.
    fn param(&mut self, t: Tensor) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    /// `x · wᵀ`; with `x` a vector this is the matrix-vector product `w · x`.
    fn matmul_t(&mut self, x: &Self::Value, w: &Self::Value) -> Result<Self::Value, ShapeError>;
    fn add_bias(&mut self, x: &Self::Value, b: &Self::Value) -> Result<Self::Value, ShapeError>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, ShapeError>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, ShapeError>;
    fn hadamard(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, ShapeError>;
    fn scale(&mut self, a: &Self::Value, s: f64) -> Self::Value;
    fn affine(
        &mut self,
        a: &Self::Value,
        alpha: f64,
        b: &Self::Value,
        beta: f64,
    ) -> Result<Self::Value, ShapeError>;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value, ShapeError>;
    fn scale_rows(&mut self, a: &Self::Value, factors: &[f64]) -> Result<Self::Value, ShapeError>;
    fn outer_rows(&mut self, v: &Self::Value, coeffs: &[f64]) -> Result<Self::Value, ShapeError>;
    fn sum(&mut self, a: &Self::Value) -> Self::Value;

    fn matvec(&mut self, w: &Self::Value, v: &Self::Value) -> Result<Self::Value, ShapeError> {
        self.matmul_t(v, w)
    }

    /// `x · wᵀ + b`
    fn linear(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
    ) -> Result<Self::Value, ShapeError> {
        let xw = self.matmul_t(x, w)?;
        self.add_bias(&xw, b)
    }
}

/// Non-recording backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Ops for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul_t(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor, ShapeError> {
        kernels::matmul_t(x, w)
    }

    fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
        kernels::add_bias(x, b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
        kernels::add(a, b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
        kernels::sub(a, b)
    }

    fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
        kernels::hadamard(a, b)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        kernels::scale(a, s)
    }

    fn affine(&mut self, a: &Tensor, alpha: f64, b: &Tensor, beta: f64) -> Result<Tensor, ShapeError> {
        kernels::affine(a, alpha, b, beta)
    }

    fn tanh(&mut self, a: &Tensor) -> Tensor {
        kernels::tanh(a)
    }

    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        kernels::sigmoid(a)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor, ShapeError> {
        kernels::transpose(a)
    }

    fn scale_rows(&mut self, a: &Tensor, factors: &[f64]) -> Result<Tensor, ShapeError> {
        kernels::scale_rows(a, factors)
    }

    fn outer_rows(&mut self, v: &Tensor, coeffs: &[f64]) -> Result<Tensor, ShapeError> {
        kernels::outer_rows(v, coeffs)
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        kernels::sum(a)
    }
}

/// Fourth-order central-difference gradient estimate of `f` at `params`:
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>, DiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(DiffError::InvalidStep(step));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        let mut at = |k: f64| {
            p[i] = orig + k * step;
            f(&p)
        };
        let (up2, up, down, down2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        p[i] = orig;
        grad.push((8.0 * (up - down) - (up2 - down2)) / (12.0 * step));
    }
    Ok(grad)
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-6)` between an analytic
/// gradient `a` and a numeric estimate `n`. The floor keeps entries that are
/// numerically zero from being judged on finite-difference roundoff alone.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
