//! Scalar and matrix kernels shared by forward and backward rules.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Row/column strides of a row-major `rows × cols` matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn normal(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Reads a row-major `rows × cols` buffer as its `cols × rows` transpose.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `out (m×n) = a (m×k) · b (k×n) + beta · out`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, out: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertions above bound every index the kernel can touch,
    // since all views are dense row-major buffers of the stated sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

const TANH_COEF: f64 = 0.044715;

pub(crate) fn gelu(x: f64, tanh_approx: bool) -> f64 {
    if tanh_approx {
        let u = (2.0 / PI).sqrt() * (x + TANH_COEF * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    } else {
        x * std_normal_cdf(x)
    }
}

pub(crate) fn gelu_grad(x: f64, tanh_approx: bool) -> f64 {
    if tanh_approx {
        let c = (2.0 / PI).sqrt();
        let u = c * (x + TANH_COEF * x * x * x);
        let t = u.tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * TANH_COEF * x * x)
    } else {
        std_normal_cdf(x) + x * std_normal_pdf(x)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and population variance of a row. The mean is accumulated relative
/// to the first element so that a constant row has exactly zero deviation.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let pivot = row[0];
    let shift = row.iter().map(|x| x - pivot).sum::<f64>() / n;
    let mean = pivot + shift;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
