//! Forward kernels shared by the recording tape and the plain evaluator, so
//! both paths produce bit-identical values.

use super::{ShapeError, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), ShapeError> {
    if a.shape() != b.shape() {
        return Err(ShapeError::Mismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

/// `C = alpha * A * B + beta * C` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n (row-major, contiguous) index ranges.
    unsafe {
        matrixmultiply::dgemm(
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
        );
    }
}

/// `x · wᵀ` for `x` of shape `[n]` or `[B×n]` and `w` of shape `[m×n]`.
pub fn matmul_t(x: &Tensor, w: &Tensor) -> Result<Tensor, ShapeError> {
    if w.rank() != 2 || x.rank() == 0 || x.cols() != w.cols() {
        return Err(ShapeError::Mismatch {
            op: "matmul",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let (b, n) = x.dims2();
    let m = w.rows();
    let mut out = vec![0.0; b * m];
    gemm(b, n, m, x.data(), (n as isize, 1), w.data(), (1, n as isize), 0.0, &mut out);
    let shape = if x.rank() == 1 { vec![m] } else { vec![b, m] };
    Tensor::new(shape, out)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, ShapeError> {
    if bias.rank() != 1 || x.rank() == 0 || x.cols() != bias.len() {
        return Err(ShapeError::Mismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let c = bias.len();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(x.with_data(out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    same_shape("add", a, b)?;
    Ok(a.zip_map(b, |x, y| x + y))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    same_shape("sub", a, b)?;
    Ok(a.zip_map(b, |x, y| x - y))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor, ShapeError> {
    same_shape("hadamard", a, b)?;
    Ok(a.zip_map(b, |x, y| x * y))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

/// `alpha·a + beta·b`.
pub fn affine(a: &Tensor, alpha: f64, b: &Tensor, beta: f64) -> Result<Tensor, ShapeError> {
    same_shape("affine", a, b)?;
    Ok(a.zip_map(b, |x, y| alpha * x + beta * y))
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor, ShapeError> {
    if a.rank() != 2 {
        return Err(ShapeError::Rank { op: "transpose", rank: a.rank() });
    }
    let (r, c) = a.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

/// Multiplies row `i` of `a` by `factors[i]`.
pub fn scale_rows(a: &Tensor, factors: &[f64]) -> Result<Tensor, ShapeError> {
    let (r, c) = a.dims2();
    if a.rank() == 0 || r != factors.len() {
        return Err(ShapeError::Mismatch {
            op: "scale_rows",
            lhs: a.shape().to_vec(),
            rhs: vec![factors.len()],
        });
    }
    let mut out = a.data().to_vec();
    for (row, f) in out.chunks_exact_mut(c).zip(factors) {
        for v in row {
            *v *= f;
        }
    }
    Ok(a.with_data(out))
}

/// Stacks `coeffs[i] · v` as rows of a `[coeffs.len() × v.len()]` matrix.
pub fn outer_rows(v: &Tensor, coeffs: &[f64]) -> Result<Tensor, ShapeError> {
    if v.rank() != 1 {
        return Err(ShapeError::Rank { op: "outer_rows", rank: v.rank() });
    }
    let mut out = Vec::with_capacity(coeffs.len() * v.len());
    for c in coeffs {
        out.extend(v.data().iter().map(|x| c * x));
    }
    Tensor::matrix(coeffs.len(), v.len(), out)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}
