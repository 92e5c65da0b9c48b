//! Safe wrapper over the `matrixmultiply` kernels.

use super::Real;

/// A borrowed strided matrix view. Transposition is a stride swap.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    /// The transposed view of the same storage.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    T::gemm_raw(m, k, n, alpha, a, b, beta, c, n);
}

macro_rules! kernel {
    ($name:ident, $t:ty, $f:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            alpha: $t,
            a: MatRef<'_, $t>,
            b: MatRef<'_, $t>,
            beta: $t,
            c: &mut [$t],
            c_row_stride: usize,
        ) {
            if m == 0 || n == 0 {
                return;
            }
            a.check(m, k);
            b.check(k, n);
            assert!((m - 1) * c_row_stride + n <= c.len(), "output out of bounds");
            // SAFETY: the three views were bounds-checked above for the
            // extents the kernel touches; `c` is uniquely borrowed.
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    alpha,
                    a.data.as_ptr(),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b.data.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    beta,
                    c.as_mut_ptr(),
                    c_row_stride as isize,
                    1,
                );
            }
        }
    };
}

kernel!(sgemm, f32, matrixmultiply::sgemm);
kernel!(dgemm, f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_view_matches_naive() {
        // a: 2x3, b: stored as 2x3 and used transposed (3x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, -1.0, 2.0, 1.0, 0.0];
        let mut c = [0.0f64; 4];
        gemm(
            2,
            3,
            2,
            1.0,
            MatRef::row_major(&a, 3),
            MatRef::transposed(&b, 3),
            0.0,
            &mut c,
        );
        assert_eq!(c, [-2.0, 4.0, -2.0, 13.0]);
    }
}
