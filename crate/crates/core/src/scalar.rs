//! Floating-point element types usable by the tensor engine.

use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training) and `f64` (gradient checks). The GEMM
/// kernel is dispatched to `matrixmultiply` with explicit strides so that
/// transposed operands never need to be materialised.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// Dtype tag used by the checkpoint format.
    const DTYPE_TAG: u32;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// `c[m×n] = a[m×k]·b[k×n] (+ c if accumulate)` with arbitrary strides.
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
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr) => {
        debug_assert!($a.len() >= span($m, $k, $rsa, $csa));
        debug_assert!($b.len() >= span($k, $n, $rsb, $csb));
        assert!($c.len() >= $m * $n);
    };
}

/// Products below this many multiply-adds skip `matrixmultiply`, whose
/// packing dominates at these sizes.
const SMALL_GEMM: usize = 1 << 15;

#[allow(clippy::too_many_arguments)]
#[inline]
fn small_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
    accumulate: bool,
) {
    if csa == 1 && rsb == 1 && k > 0 {
        // Both operands contiguous along k (e.g. `A·Bᵀ`): row-by-row dot products.
        for i in 0..m {
            let arow = &a[i * rsa as usize..i * rsa as usize + k];
            for j in 0..n {
                let bcol = &b[j * csb as usize..j * csb as usize + k];
                let d = dot(arow, bcol);
                let cv = &mut c[i * n + j];
                *cv = if accumulate { *cv + d } else { d };
            }
        }
        return;
    }
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[(i as isize * rsa + p as isize * csa) as usize];
            let base = p as isize * rsb;
            if csb == 1 {
                let brow = &b[base as usize..base as usize + n];
                for (cv, &bv) in row.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            } else {
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv = *cv + av * b[(base + j as isize * csb) as usize];
                }
            }
        }
    }
}

/// Eight independent partial sums so the loop vectorises.
#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s = s + x * y;
    }
    s
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl Scalar for f32 {
    const DTYPE_TAG: u32 = 0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

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
        c: &mut [Self],
        accumulate: bool,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c);
        if m == 0 || n == 0 {
            return;
        }
        if m * k * n < SMALL_GEMM {
            return small_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds are checked above; strides describe in-bounds views.
        unsafe {
            matrixmultiply::sgemm(
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
}

impl Scalar for f64 {
    const DTYPE_TAG: u32 = 2;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

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
        c: &mut [Self],
        accumulate: bool,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c);
        if m == 0 || n == 0 {
            return;
        }
        if m * k * n < SMALL_GEMM {
            return small_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: see the f32 implementation.
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
}

/// Shorthand for `T::from_f64`.
#[inline]
pub fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
