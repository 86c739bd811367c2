//! Routing-kernel Gram matrices, effective dimension, ridge regression in
//! primal and dual form, generalization-bound terms, and a Monte-Carlo
//! check of the variance term.
//!
//! All kernel quantities are evaluated at the model's initial parameters
//! (the tangent features are finite-width, single-initialization objects;
//! the gate/expert decomposition is exact per initialization).

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, CholeskyFactor};
use crate::scalar::{simplex_tolerance, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramProvenance {
    EmpiricalGradient,
    Analytic,
}

/// Symmetric PSD Gram matrix with its regularization strength.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGram<T> {
    pub matrix: Array2<T>,
    pub lambda: T,
    pub provenance: GramProvenance,
}

/// Relative symmetry tolerance for Gram construction.
const SYMMETRY_TOLERANCE: f64 = 1e-9;
/// Relative clamp threshold for small negative eigenvalues.
const PSD_CLAMP_RELATIVE: f64 = 1e-8;

impl<T: Real> KernelGram<T> {
    pub fn new(matrix: Array2<T>, lambda: T, provenance: GramProvenance) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: matrix.ncols(),
                context: "Gram matrix shape",
            });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Gram matrix entries",
            });
        }
        if lambda <= T::zero() {
            return Err(Error::InvalidConfig("regularization lambda must be > 0".into()));
        }
        let scale = matrix
            .iter()
            .map(|v| v.abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
            .max(T::one());
        let mut max_asym = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                let asym = (matrix[[i, j]] - matrix[[j, i]]).abs();
                if asym > max_asym {
                    max_asym = asym;
                }
            }
        }
        if max_asym > T::of(SYMMETRY_TOLERANCE) * scale {
            return Err(Error::NotSymmetric {
                max_asymmetry: max_asym.as_f64(),
            });
        }
        Ok(Self {
            matrix,
            lambda,
            provenance,
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> T {
        (0..self.n()).map(|i| self.matrix[[i, i]]).sum()
    }

    /// Eigenvalues sorted descending, with tiny negative values clamped to
    /// zero. Negative eigenvalues beyond the relative clamp threshold are
    /// hard errors.
    pub fn clamped_eigenvalues(&self) -> Result<Vec<T>> {
        let eigs = symmetric_eigenvalues(&self.matrix)?;
        let scale = eigs
            .iter()
            .map(|e| e.abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a });
        let tol = T::of(PSD_CLAMP_RELATIVE) * scale;
        eigs.into_iter()
            .map(|e| {
                if e >= T::zero() {
                    Ok(e)
                } else if -e <= tol {
                    Ok(T::zero())
                } else {
                    Err(Error::NotPositiveSemidefinite {
                        value: e.as_f64(),
                        tolerance: tol.as_f64(),
                    })
                }
            })
            .collect()
    }

    fn regularized_factor(&self) -> Result<CholeskyFactor<T>> {
        let n = self.n();
        let mut reg = self.matrix.clone();
        for i in 0..n {
            reg[[i, i]] += self.lambda;
        }
        CholeskyFactor::new(&reg)
    }
}

/// Empirical expert kernel over `n` samples: `K[i,j] = ⟨row_i, row_j⟩` of
/// the per-sample gradient features of one expert (no gate factors).
pub fn expert_gram<T: Real>(features: ArrayView2<'_, T>) -> Array2<T> {
    features.dot(&features.t())
}

/// Routing-kernel Gram: `H[i,j] = Σ_k g[i,k] g[j,k] K_k[i,j]` over the
/// per-expert kernels, with gate rows on the simplex.
pub fn routing_gram<T: Real>(
    gates: ArrayView2<'_, T>,
    expert_kernels: &[Array2<T>],
    lambda: T,
) -> Result<KernelGram<T>> {
    let n = gates.nrows();
    let k = gates.ncols();
    if expert_kernels.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: expert_kernels.len(),
            context: "per-expert kernel count",
        });
    }
    for kernel in expert_kernels {
        if kernel.nrows() != n || kernel.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: kernel.nrows(),
                context: "per-expert kernel shape",
            });
        }
    }
    let tol = simplex_tolerance::<T>(k);
    for i in 0..n {
        let sum = gates.row(i).iter().copied().sum::<T>();
        if (sum - T::one()).abs() > tol {
            return Err(Error::SimplexViolation {
                deviation: (sum - T::one()).abs().as_f64(),
                layer: 0,
            });
        }
    }

    let mut h = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let mut acc = T::zero();
            for (e, kernel) in expert_kernels.iter().enumerate() {
                acc += gates[[i, e]] * gates[[j, e]] * kernel[[i, j]];
            }
            h[[i, j]] = acc;
            h[[j, i]] = acc;
        }
    }
    KernelGram::new(h, lambda, GramProvenance::EmpiricalGradient)
}

/// Effective dimension `Tr(H (H + λI)⁻¹) = Σ μ_i / (μ_i + λ)` through the
/// clamped eigenvalues.
pub fn effective_dimension<T: Real>(gram: &KernelGram<T>) -> Result<T> {
    effective_dimension_with(gram, gram.lambda)
}

/// Effective dimension at an explicit `lambda` (for λ sweeps).
pub fn effective_dimension_with<T: Real>(gram: &KernelGram<T>, lambda: T) -> Result<T> {
    if lambda <= T::zero() {
        return Err(Error::InvalidConfig("effective dimension needs lambda > 0".into()));
    }
    let eigs = gram.clamped_eigenvalues()?;
    Ok(eigs.iter().map(|mu| *mu / (*mu + lambda)).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit<T> {
    /// Dual coefficients `α = (H + λI)⁻¹ ỹ`.
    pub dual_coefficients: Vec<T>,
    /// Predictions at the training points, `H α`.
    pub train_predictions: Vec<T>,
}

/// Kernel ridge regression in dual form on centered labels.
pub fn ridge_fit_dual<T: Real>(gram: &KernelGram<T>, y: &[T]) -> Result<RidgeFit<T>> {
    let n = gram.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y.len(),
            context: "ridge labels",
        });
    }
    let alpha = gram.regularized_factor()?.solve(y);
    let mut predictions = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..n {
            acc += gram.matrix[[i, j]] * alpha[j];
        }
        predictions[i] = acc;
    }
    Ok(RidgeFit {
        dual_coefficients: alpha,
        train_predictions: predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalRidgeFit<T> {
    /// Explicit weight change `Δθ* = (XᵀX + λI)⁻¹ Xᵀ ỹ`.
    pub weights: Vec<T>,
    pub train_predictions: Vec<T>,
}

/// Ridge regression in primal form on explicit features (rows = samples).
/// Agrees with [`ridge_fit_dual`] on `H = X Xᵀ` by the push-through identity.
pub fn ridge_fit_primal<T: Real>(
    features: ArrayView2<'_, T>,
    y: &[T],
    lambda: T,
) -> Result<PrimalRidgeFit<T>> {
    let (n, p) = (features.nrows(), features.ncols());
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y.len(),
            context: "ridge labels",
        });
    }
    if lambda <= T::zero() {
        return Err(Error::InvalidConfig("ridge lambda must be > 0".into()));
    }
    let mut gram = features.t().dot(&features);
    for i in 0..p {
        gram[[i, i]] += lambda;
    }
    let mut rhs = vec![T::zero(); p];
    for j in 0..p {
        let mut acc = T::zero();
        for i in 0..n {
            acc += features[[i, j]] * y[i];
        }
        rhs[j] = acc;
    }
    let weights = CholeskyFactor::new(&gram)?.solve(&rhs);
    let train_predictions = (0..n)
        .map(|i| {
            let mut acc = T::zero();
            for j in 0..p {
                acc += features[[i, j]] * weights[j];
            }
            acc
        })
        .collect();
    Ok(PrimalRidgeFit {
        weights,
        train_predictions,
    })
}

/// The three displayed terms of the excess-risk bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport<T> {
    /// `C1 λ²/n · yᵀ(H+λI)⁻²y`
    pub bias: T,
    /// `C2 σ² Tr(H(H+λI)⁻¹)/n`
    pub variance: T,
    /// `C2 σ² log(1/δ)/n`
    pub noise: T,
    pub total: T,
    pub c1: T,
    pub c2: T,
    pub sigma: T,
    pub n: usize,
    pub delta_conf: f64,
    pub effective_dimension: T,
}

/// Evaluate the bias/variance/noise decomposition with declared constants.
/// The constants are unspecified upstream; defaults of 1 make the report a
/// structural evaluation, not a certified bound.
pub fn bound_terms<T: Real>(
    gram: &KernelGram<T>,
    y: &[T],
    sigma: T,
    delta_conf: f64,
    c1: T,
    c2: T,
) -> Result<BoundReport<T>> {
    let n = gram.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: y.len(),
            context: "bound labels",
        });
    }
    if !(0.0 < delta_conf && delta_conf < 1.0) {
        return Err(Error::ThresholdOutOfRange {
            value: delta_conf,
            range: "(0, 1)",
        });
    }
    if sigma < T::zero() {
        return Err(Error::InvalidConfig("noise sigma must be ≥ 0".into()));
    }
    let nf = T::of(n as f64);
    // yᵀ(H+λI)⁻²y = ‖(H+λI)⁻¹y‖² for a symmetric regularized matrix.
    let u = gram.regularized_factor()?.solve(y);
    let quad = u.iter().map(|v| *v * *v).sum::<T>();
    let d_eff = effective_dimension(gram)?;
    let bias = c1 * gram.lambda * gram.lambda / nf * quad;
    let variance = c2 * sigma * sigma * d_eff / nf;
    let noise = c2 * sigma * sigma * T::of((1.0 / delta_conf).ln()) / nf;
    Ok(BoundReport {
        bias,
        variance,
        noise,
        total: bias + variance + noise,
        c1,
        c2,
        sigma,
        n,
        delta_conf,
        effective_dimension: d_eff,
    })
}

/// The bound's variance term `(σ²/n)·Tr(H(H+λI)⁻¹)`.
pub fn variance_formula<T: Real>(gram: &KernelGram<T>, sigma: T) -> Result<T> {
    Ok(sigma * sigma * effective_dimension(gram)? / T::of(gram.n() as f64))
}

/// Exact average prediction variance at the training inputs for a fixed
/// design: `(σ²/n)·Tr([H(H+λI)⁻¹]²)`. The bound's trace term dominates it
/// (each spectral factor `μ/(μ+λ)` lies in [0,1]); the two coincide as the
/// spectrum becomes binary.
pub fn prediction_variance_exact<T: Real>(gram: &KernelGram<T>, sigma: T) -> Result<T> {
    let eigs = gram.clamped_eigenvalues()?;
    let tr_s2 = eigs
        .iter()
        .map(|mu| {
            let s = *mu / (*mu + gram.lambda);
            s * s
        })
        .sum::<T>();
    Ok(sigma * sigma * tr_s2 / T::of(gram.n() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloVariance<T> {
    /// Empirical average over training points of Var(ŷ_i) across noise draws.
    pub empirical: T,
    /// The bound's trace formula at the same (gram, sigma).
    pub formula: T,
    /// The exact fixed-design value `(σ²/n)·Tr(S²)`.
    pub exact: T,
    pub trials: usize,
}

/// Minimum Monte-Carlo trial count.
pub const MC_MIN_TRIALS: usize = 1_000;

/// Draw label noise, refit the ridge predictor, and measure the average
/// prediction variance at the training inputs. The fit is linear in the
/// labels, so pure-noise labels lose no generality.
pub fn variance_monte_carlo<T: Real>(
    features: ArrayView2<'_, T>,
    lambda: T,
    sigma: T,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloVariance<T>> {
    if trials < MC_MIN_TRIALS {
        return Err(Error::TooFew {
            needed: MC_MIN_TRIALS,
            got: trials,
            what: "Monte-Carlo trials",
        });
    }
    let n = features.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("Monte-Carlo design"));
    }
    let gram = KernelGram::new(
        features.dot(&features.t()),
        lambda,
        GramProvenance::EmpiricalGradient,
    )?;
    let factor = gram.regularized_factor()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut second_moment = vec![T::zero(); n];
    let mut noise = vec![T::zero(); n];
    for _ in 0..trials {
        for e in noise.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *e = sigma * T::of(z);
        }
        let alpha = factor.solve(&noise);
        for i in 0..n {
            let mut pred = T::zero();
            for j in 0..n {
                pred += gram.matrix[[i, j]] * alpha[j];
            }
            // E[ŷ] = 0 exactly under pure-noise labels, so the raw second
            // moment is an unbiased variance estimate.
            second_moment[i] += pred * pred;
        }
    }
    let tf = T::of(trials as f64);
    let empirical =
        second_moment.iter().map(|m| *m / tf).sum::<T>() / T::of(n as f64);
    Ok(MonteCarloVariance {
        empirical,
        formula: variance_formula(&gram, sigma)?,
        exact: prediction_variance_exact(&gram, sigma)?,
        trials,
    })
}
