//! Dense kernels shared by the inference engine and the training path.
//!
//! Every kernel computes each output element with a summation order that
//! depends only on the inner dimension, never on how many rows are
//! processed together. A row evaluated alone and the same row evaluated
//! inside a larger block therefore produce bit-identical results, which is
//! what makes speculative verification exactly reproduce greedy decoding.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type used by the model (f32 for inference and
/// training, f64 for gradient checking).
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

const MR: usize = 4;
const NC: usize = 16;

/// `out[rows×n] = x[rows×k] · w[k×n]`.
///
/// Each output element accumulates `x[r,kk]·w[kk,j]` for `kk` ascending,
/// starting from zero.
pub fn matmul<F: Scalar>(x: &[F], w: &[F], out: &mut [F], rows: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), rows * n);
    // column panels outermost: each k×NC weight panel is read from memory
    // once and reused by every row block
    let mut j0 = 0;
    while j0 < n {
        let jb = NC.min(n - j0);
        let mut r0 = 0;
        while r0 < rows {
            let rb = MR.min(rows - r0);
            if rb == MR && jb == NC {
                micro_full(x, w, out, r0, j0, k, n);
            } else {
                micro_edge(x, w, out, r0, rb, j0, jb, k, n);
            }
            r0 += rb;
        }
        j0 += jb;
    }
}

#[inline(always)]
fn micro_full<F: Scalar>(
    x: &[F],
    w: &[F],
    out: &mut [F],
    r0: usize,
    j0: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[F::zero(); NC]; MR];
    let xr: [&[F]; MR] = std::array::from_fn(|i| &x[(r0 + i) * k..(r0 + i + 1) * k]);
    for kk in 0..k {
        let wrow: &[F; NC] = w[kk * n + j0..kk * n + j0 + NC].try_into().unwrap();
        for i in 0..MR {
            let a = xr[i][kk];
            let row = &mut acc[i];
            for j in 0..NC {
                row[j] += a * wrow[j];
            }
        }
    }
    for i in 0..MR {
        out[(r0 + i) * n + j0..(r0 + i) * n + j0 + NC].copy_from_slice(&acc[i]);
    }
}

#[allow(clippy::too_many_arguments)]
fn micro_edge<F: Scalar>(
    x: &[F],
    w: &[F],
    out: &mut [F],
    r0: usize,
    rb: usize,
    j0: usize,
    jb: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[F::zero(); NC]; MR];
    for kk in 0..k {
        let wrow = &w[kk * n + j0..kk * n + j0 + jb];
        for i in 0..rb {
            let a = x[(r0 + i) * k + kk];
            let row = &mut acc[i];
            for j in 0..jb {
                row[j] += a * wrow[j];
            }
        }
    }
    for i in 0..rb {
        out[(r0 + i) * n + j0..(r0 + i) * n + j0 + jb].copy_from_slice(&acc[i][..jb]);
    }
}

/// Dot product with a fixed 16-lane accumulation pattern.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); NC];
    let chunks = a.len() / NC;
    for c in 0..chunks {
        let pa: &[F; NC] = a[c * NC..(c + 1) * NC].try_into().unwrap();
        let pb: &[F; NC] = b[c * NC..(c + 1) * NC].try_into().unwrap();
        for l in 0..NC {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * NC..a.len() {
        tail += a[i] * b[i];
    }
    // pairwise fold keeps the reduction order fixed
    let mut width = NC;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            lanes[l] = lanes[l] + lanes[l + width];
        }
    }
    lanes[0] + tail
}

/// `out[rows×n] = x[rows×k] · wᵀ` where `w` is stored `[n×k]`.
pub fn matmul_bt<F: Scalar>(x: &[F], w: &[F], out: &mut [F], rows: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), rows * n);
    for j in 0..n {
        let wj = &w[j * k..(j + 1) * k];
        for r in 0..rows {
            out[r * n + j] = dot(&x[r * k..(r + 1) * k], wj);
        }
    }
}

/// `dw[k×n] += xᵀ · dy` for `x: [rows×k]`, `dy: [rows×n]`.
pub fn matmul_at_acc<F: Scalar>(x: &[F], dy: &[F], dw: &mut [F], rows: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(dy.len(), rows * n);
    debug_assert_eq!(dw.len(), k * n);
    let mut k0 = 0;
    while k0 < k {
        let kb = MR.min(k - k0);
        let mut j0 = 0;
        while j0 < n {
            let jb = NC.min(n - j0);
            let mut acc = [[F::zero(); NC]; MR];
            for r in 0..rows {
                let dyr = &dy[r * n + j0..r * n + j0 + jb];
                for i in 0..kb {
                    let a = x[r * k + k0 + i];
                    if a == F::zero() {
                        continue;
                    }
                    let row = &mut acc[i];
                    for j in 0..jb {
                        row[j] += a * dyr[j];
                    }
                }
            }
            for i in 0..kb {
                let dst = &mut dw[(k0 + i) * n + j0..(k0 + i) * n + j0 + jb];
                for j in 0..jb {
                    dst[j] += acc[i][j];
                }
            }
            j0 += jb;
        }
        k0 += kb;
    }
}

/// `out[rows×n] += x[rows×k] · w[k×n]`, reusing [`matmul`] through a scratch buffer.
pub fn matmul_acc<F: Scalar>(
    x: &[F],
    w: &[F],
    out: &mut [F],
    rows: usize,
    k: usize,
    n: usize,
    scratch: &mut Vec<F>,
) {
    scratch.clear();
    scratch.resize(rows * n, F::zero());
    matmul(x, w, scratch, rows, k, n);
    for (o, s) in out.iter_mut().zip(scratch.iter()) {
        *o += *s;
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalization of one row; returns `(mean, rstd)`.
#[inline]
pub fn layer_norm_row<F: Scalar>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) -> (F, F) {
    let n = F::of_f64(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = F::one() / (var + F::of_f64(LN_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::of_f64(3.0) * a * x * x)
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for &v in xs {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in xs.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in xs.iter_mut() {
        *v /= s;
    }
}
