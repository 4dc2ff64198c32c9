use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point element type of the engine.
///
/// Training runs in `f32`; gradient checks switch to `f64`.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// All pointers plus their strides must stay inside their allocations
    /// for the given `m`, `k`, `n`.
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
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatView { offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        MatView {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Bounds-checked `c = a·b + beta·c` over views.
pub(crate) fn gemm<S: Scalar>(
    a: &[S],
    av: MatView,
    b: &[S],
    bv: MatView,
    c: &mut [S],
    cv: MatView,
    alpha: S,
    beta: S,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] = c[idx] * beta;
            }
        }
        return;
    }
    assert!(av.max_index() < a.len(), "gemm lhs out of bounds");
    assert!(bv.max_index() < b.len(), "gemm rhs out of bounds");
    assert!(cv.max_index() < c.len(), "gemm output out of bounds");
    // SAFETY: every addressed element was bounds-checked above.
    unsafe {
        S::gemm_raw(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(a: &[f64], av: MatView, b: &[f64], bv: MatView) -> Vec<f64> {
        let mut out = vec![0.0; av.rows * bv.cols];
        for i in 0..av.rows {
            for j in 0..bv.cols {
                for p in 0..av.cols {
                    out[i * bv.cols + j] += a[av.offset + i * av.row_stride + p * av.col_stride] * b[bv.offset + p * bv.row_stride + j * bv.col_stride];
                }
            }
        }
        out
    }

    #[test]
    fn strided_views_match_the_oracle() {
        for (m, k, n) in [(3, 4, 5), (40, 30, 20)] {
            let a: Vec<f64> = (0..2 * m * k + 3).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let b: Vec<f64> = (0..k * n + 1).map(|i| ((i * 5) % 13) as f64 * 0.5).collect();
            // every other column of a, b transposed
            let av = MatView { offset: 1, rows: m, cols: k, row_stride: 2 * k, col_stride: 2 };
            let bv = MatView::dense(n, k).t();
            let b_t: Vec<f64> = b.clone();
            let mut c = vec![1.0; m * n];
            gemm(&a, av, &b_t, bv, &mut c, MatView::dense(m, n), 2.0, 0.5);
            let want: Vec<f64> = oracle(&a, av, &b_t, bv).iter().map(|v| 2.0 * v + 0.5).collect();
            assert_eq!(c, want);
        }
    }
}
