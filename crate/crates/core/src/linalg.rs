//! Small dense linear algebra kernels used by the kernel and stats modules.
//!
//! Matrices here are at most a few hundred rows (Gram matrices over sample
//! sets), so a cyclic Jacobi eigensolver and an unblocked Cholesky are
//! plenty, and they stay generic over the scalar type.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Eigenvalues of a symmetric matrix via the cyclic Jacobi method,
/// returned in descending order.
pub fn symmetric_eigenvalues<T: Real>(matrix: &Array2<T>) -> Result<Vec<T>> {
    let n = check_square(matrix)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut a = matrix.clone();

    let off = |a: &Array2<T>| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                s = s + a[[i, j]] * a[[i, j]];
            }
        }
        s.sqrt()
    };

    let scale = frobenius(&a);
    let tol = T::epsilon() * T::of(n as f64) * if scale > T::zero() { scale } else { T::one() };
    let max_sweeps = 64;

    for _ in 0..max_sweeps {
        if off(&a) <= tol {
            let mut eig: Vec<T> = (0..n).map(|i| a[[i, i]]).collect();
            eig.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
            return Ok(eig);
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                // Rotation angle that annihilates a[p,q].
                let theta = (aqq - app) / (T::of(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::EigenDidNotConverge { sweeps: max_sweeps })
}

/// Cholesky factor of a symmetric positive definite matrix (lower triangular).
pub struct CholeskyFactor<T> {
    lower: Array2<T>,
}

impl<T: Real> CholeskyFactor<T> {
    pub fn new(matrix: &Array2<T>) -> Result<Self> {
        let n = check_square(matrix)?;
        let mut l = Array2::zeros((n, n));
        for j in 0..n {
            let mut diag = matrix[[j, j]];
            for k in 0..j {
                diag = diag - l[[j, k]] * l[[j, k]];
            }
            if diag <= T::zero() || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: diag.as_f64(),
                    index: j,
                });
            }
            let djj = diag.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut sum = matrix[[i, j]];
                for k in 0..j {
                    sum = sum - l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = sum / djj;
            }
        }
        Ok(Self { lower: l })
    }

    /// Solve `A x = b` given the factor `A = L Lᵀ`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.lower.nrows();
        assert_eq!(b.len(), n, "right-hand side length must match matrix size");
        // Forward substitution: L y = b.
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum = sum - self.lower[[i, k]] * y[k];
            }
            y[i] = sum / self.lower[[i, i]];
        }
        // Back substitution: Lᵀ x = y.
        let mut x = vec![T::zero(); n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum = sum - self.lower[[k, i]] * x[k];
            }
            x[i] = sum / self.lower[[i, i]];
        }
        x
    }
}

/// Solve the ordinary least-squares normal equations `(XᵀX) c = Xᵀ y` for a
/// small column basis, used by the polynomial trend fits.
pub fn least_squares<T: Real>(design: &Array2<T>, y: &[T]) -> Result<Vec<T>> {
    let (n, p) = (design.nrows(), design.ncols());
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y.len(),
            context: "least-squares labels",
        });
    }
    if n < p {
        return Err(Error::TooFew {
            needed: p,
            got: n,
            what: "observations for least squares",
        });
    }
    let mut gram = Array2::zeros((p, p));
    for a in 0..p {
        for b in 0..p {
            let mut s = T::zero();
            for i in 0..n {
                s = s + design[[i, a]] * design[[i, b]];
            }
            gram[[a, b]] = s;
        }
    }
    let mut rhs = vec![T::zero(); p];
    for a in 0..p {
        let mut s = T::zero();
        for i in 0..n {
            s = s + design[[i, a]] * y[i];
        }
        rhs[a] = s;
    }
    // Tiny ridge keeps nearly-collinear trend fits solvable.
    let jitter = T::epsilon() * T::of(n as f64) * frobenius(&gram);
    for a in 0..p {
        gram[[a, a]] = gram[[a, a]] + jitter;
    }
    Ok(CholeskyFactor::new(&gram)?.solve(&rhs))
}

pub fn frobenius<T: Real>(matrix: &Array2<T>) -> T {
    matrix.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

fn check_square<T>(matrix: &Array2<T>) -> Result<usize> {
    let (r, c) = (matrix.nrows(), matrix.ncols());
    if r != c {
        return Err(Error::DimensionMismatch {
            expected: r,
            actual: c,
            context: "square matrix",
        });
    }
    Ok(r)
}
