//! Dense kernels shared by the forward and backward passes.
//!
//! Everything is generic over [`Real`] so the same transformer code runs in
//! fp32 for training/inference and in fp64 for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable by the model.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static {
    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// All pointers and strides must describe in-bounds matrices, and `c` must
    /// not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> View<'a, T> {
    /// Row-major contiguous `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let v = View { data, rows, cols, rs, cs };
        assert!(v.fits(data.len()), "view {rows}x{cols} (rs={rs}, cs={cs}) exceeds buffer of {}", data.len());
        v
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// Mutable strided output matrix.
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let ok = rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len();
        assert!(ok, "output view {rows}x{cols} exceeds buffer of {}", data.len());
        ViewMut { data, rows, cols, rs, cs }
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply treats k = 0 as a pure scale of C.
        for i in 0..c.rows {
            for j in 0..c.cols {
                let v = &mut c.data[i * c.rs + j * c.cs];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked at construction, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `out (m x n) = a (m x k) * b (k x n)`, or `+=` when `accumulate`.
pub fn matmul<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(T::one(), View::new(a, m, k), View::new(b, k, n), beta, ViewMut::new(out, m, n));
}

/// `out (m x n) = a^T * b` with `a` stored as `k x m`.
pub fn matmul_tn<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(T::one(), View::new(a, k, m).t(), View::new(b, k, n), beta, ViewMut::new(out, m, n));
}

/// `out (m x n) = a * b^T` with `b` stored as `n x k`.
pub fn matmul_nt<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(T::one(), View::new(a, m, k), View::new(b, n, k).t(), beta, ViewMut::new(out, m, n));
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; records per-row mean and reciprocal std for backward.
pub fn layernorm_forward<T: Real>(out: &mut [T], mean: &mut [T], rstd: &mut [T], inp: &[T], gamma: &[T], beta: &[T], dim: usize) {
    let eps = T::lit(LN_EPS);
    let n = T::from_usize(dim).unwrap();
    for (row, (o, (m, r))) in inp.chunks_exact(dim).zip(out.chunks_exact_mut(dim).zip(mean.iter_mut().zip(rstd.iter_mut()))) {
        let mu = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        for i in 0..dim {
            o[i] = (row[i] - mu) * rs * gamma[i] + beta[i];
        }
        *m = mu;
        *r = rs;
    }
}

/// Accumulates into `dinp`, and into `dgamma`/`dbeta` when given.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    dinp: &mut [T],
    mut dparams: Option<(&mut [T], &mut [T])>,
    dout: &[T],
    inp: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dim: usize,
) {
    let n = T::from_usize(dim).unwrap();
    let mut norm = vec![T::zero(); dim];
    for (r, (di, (row, dy))) in dinp.chunks_exact_mut(dim).zip(inp.chunks_exact(dim).zip(dout.chunks_exact(dim))).enumerate() {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut mean_dn = T::zero();
        let mut mean_dn_norm = T::zero();
        for i in 0..dim {
            norm[i] = (row[i] - mu) * rs;
            let dn = dy[i] * gamma[i];
            mean_dn += dn;
            mean_dn_norm += dn * norm[i];
        }
        mean_dn /= n;
        mean_dn_norm /= n;
        for i in 0..dim {
            let dn = dy[i] * gamma[i];
            di[i] += rs * (dn - mean_dn - norm[i] * mean_dn_norm);
        }
        if let Some((dg, db)) = dparams.as_mut() {
            for i in 0..dim {
                dg[i] += norm[i] * dy[i];
                db[i] += dy[i];
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// In-place numerically stable softmax over `row[..len]`.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul(&mut out, &a, &b, m, k, n, false);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        matmul_tn(&mut out, &at, &b, m, k, n, false);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        matmul_nt(&mut out, &a, &bt, m, k, n, true);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inner_dimension_zeroes_output() {
        let mut out = vec![7.0f32; 4];
        matmul(&mut out, &[], &[], 2, 0, 2, false);
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_backward_matches_central_difference() {
        let dim = 6;
        let x: Vec<f64> = (0..dim).map(|i| (i as f64 * 1.3).sin() * 2.0).collect();
        let g: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * i as f64).collect();
        let b: Vec<f64> = (0..dim).map(|i| 0.05 * i as f64).collect();
        let w: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).cos()).collect();
        let f = |x: &[f64]| {
            let mut out = vec![0.0; dim];
            let (mut m, mut r) = (vec![0.0], vec![0.0]);
            layernorm_forward(&mut out, &mut m, &mut r, x, &g, &b, dim);
            out.iter().zip(&w).map(|(o, w)| o * w).sum::<f64>()
        };
        let mut out = vec![0.0; dim];
        let (mut m, mut r) = (vec![0.0], vec![0.0]);
        layernorm_forward(&mut out, &mut m, &mut r, &x, &g, &b, dim);
        let mut dx = vec![0.0; dim];
        layernorm_backward(&mut dx, None, &w, &x, &g, &m, &r, dim);
        for i in 0..dim {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", dx[i]);
        }
    }
}
