//! Subtraction-free LU factorisation of nonsingular M-matrices.
//!
//! For a matrix `M = diag(leak + Σ_j w_ij) − W` with non-negative
//! off-diagonal weights `W` and non-negative row "leaks", Gaussian elimination
//! without pivoting can be arranged so that every pivot is a sum of
//! non-negative terms (Grassmann–Taksar–Heyman). Pivots, and hence
//! determinants and solutions, are then accurate to a few ulps in the relative
//! sense even when the leaks are far below machine epsilon relative to the
//! weights.

/// LU factors of an M-matrix: unit-lower `L` below the diagonal, `U` on and above.
#[derive(Debug, Clone)]
pub(crate) struct GthLu {
    m: usize,
    a: Vec<f64>,
}

impl GthLu {
    /// Factors the `m × m` matrix whose off-diagonal entries are given
    /// (row-major, all ≤ 0; the diagonal of `offdiag` is ignored) and whose
    /// row sums are `leak` (all ≥ 0).
    ///
    /// Returns the index of the first zero pivot if the matrix is singular.
    pub(crate) fn factor(mut a: Vec<f64>, mut leak: Vec<f64>, m: usize) -> Result<Self, usize> {
        debug_assert_eq!(a.len(), m * m);
        debug_assert_eq!(leak.len(), m);
        for k in 0..m {
            let off: f64 = a[k * m + k + 1..(k + 1) * m].iter().map(|v| -v).sum();
            let piv = leak[k] + off;
            if !(piv > 0.0) {
                return Err(k);
            }
            a[k * m + k] = piv;
            for i in k + 1..m {
                let aik = a[i * m + k];
                if aik == 0.0 {
                    continue;
                }
                let l = aik / piv;
                a[i * m + k] = l;
                for j in k + 1..m {
                    if j != i {
                        a[i * m + j] -= l * a[k * m + j];
                    }
                }
                leak[i] -= l * leak[k];
            }
        }
        Ok(GthLu { m, a })
    }

    pub(crate) fn dim(&self) -> usize {
        self.m
    }

    /// Diagonal of `U`: the successive ratios of leading principal minors.
    pub(crate) fn pivots(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.m).map(move |k| self.a[k * self.m + k])
    }

    /// Solves `Mᵀ x = b` in place.
    pub(crate) fn solve_transpose(&self, b: &mut [f64]) {
        let (m, a) = (self.m, &self.a);
        // Mᵀ = Uᵀ Lᵀ: forward with Uᵀ, then backward with Lᵀ.
        for k in 0..m {
            let mut s = b[k];
            for j in 0..k {
                s -= a[j * m + k] * b[j];
            }
            b[k] = s / a[k * m + k];
        }
        for k in (0..m).rev() {
            let mut s = b[k];
            for j in k + 1..m {
                s -= a[j * m + k] * b[j];
            }
            b[k] = s;
        }
    }

    /// Solves `M x = b` in place.
    #[cfg(test)]
    pub(crate) fn solve(&self, b: &mut [f64]) {
        let (m, a) = (self.m, &self.a);
        for k in 0..m {
            let mut s = b[k];
            for j in 0..k {
                s -= a[k * m + j] * b[j];
            }
            b[k] = s;
        }
        for k in (0..m).rev() {
            let mut s = b[k];
            for j in k + 1..m {
                s -= a[k * m + j] * b[j];
            }
            b[k] = s / a[k * m + k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn example() -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let w = [[0.0, 0.3, 0.2], [0.1, 0.0, 0.5], [0.4, 0.4, 0.0]];
        let leak = vec![0.5, 1e-3, 0.2];
        let mut off = vec![0.0; 9];
        let mut dense = DMatrix::zeros(3, 3);
        for i in 0..3 {
            let mut row = leak[i];
            for j in 0..3 {
                if i != j {
                    off[i * 3 + j] = -w[i][j];
                    dense[(i, j)] = -w[i][j];
                    row += w[i][j];
                }
            }
            dense[(i, i)] = row;
        }
        (off, leak, dense)
    }

    #[test]
    fn solves_match_dense_lu() {
        let (off, leak, dense) = example();
        let lu = GthLu::factor(off, leak, 3).unwrap();
        let b = [1.0, -2.0, 0.5];
        let mut x = b;
        lu.solve(&mut x);
        let expect = dense.clone().lu().solve(&DVector::from_row_slice(&b)).unwrap();
        let mut y = b;
        lu.solve_transpose(&mut y);
        let expect_t = dense.transpose().lu().solve(&DVector::from_row_slice(&b)).unwrap();
        for k in 0..3 {
            assert!((x[k] - expect[k]).abs() < 1e-12);
            assert!((y[k] - expect_t[k]).abs() < 1e-12);
        }
        let det: f64 = lu.pivots().product();
        assert!((det - dense.determinant()).abs() < 1e-12);
    }

    #[test]
    fn tiny_leaks_keep_full_relative_accuracy() {
        // Two states swapping with probability 1/2 and exiting at rate ε:
        // det = ε(1 + ε) ... computed exactly as a product of positive pivots.
        let eps = 1e-200;
        let lu = GthLu::factor(vec![0.0, -0.5, -0.5, 0.0], vec![eps, eps], 2).unwrap();
        let det: f64 = lu.pivots().product();
        let exact = eps * (1.0 + eps);
        assert!((det - exact).abs() <= 1e-15 * exact);
    }

    #[test]
    fn zero_leak_closed_class_is_singular() {
        assert_eq!(GthLu::factor(vec![0.0, -0.5, -0.5, 0.0], vec![0.0, 0.0], 2).unwrap_err(), 1);
    }
}
