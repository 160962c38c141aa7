//! Strided matrix products used by the differentiable primitives.

/// Read-only strided view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

// Below this many multiply-adds the packing overhead of the blocked kernel dominates.
const SMALL_GEMM: usize = 2048;

/// `c = a * b + (accumulate ? c : 0)` with `a: m x k`, `b: k x n` and `c` row-major `m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                let slot = &mut c[i * n + j];
                *slot = if accumulate { *slot + acc } else { acc };
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the views cover m x k and k x n elements with the given strides,
    // and `c` holds m * n contiguous row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_and_small_paths_agree_with_naive() {
        for &(m, k, n) in &[(2, 3, 4), (40, 30, 20)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, MatRef::rows(&a, k), MatRef::rows(&b, n), &mut c, false);
            for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_view() {
        // a is 2x3, use a^T (3x2) times a (2x3)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = vec![0.0; 9];
        gemm(3, 2, 3, MatRef::transposed(&a, 3), MatRef::rows(&a, 3), &mut c, false);
        assert_eq!(c, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
