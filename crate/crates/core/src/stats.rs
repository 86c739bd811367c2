//! Correlation statistics, moving averages, and trend fits.
//!
//! Pearson and Spearman come with two-sided p-values from the t
//! approximation with `n - 2` degrees of freedom; for short series (n ≤ 10)
//! a permutation p-value is reported alongside, since the t approximation is
//! weak there.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::scalar::Real;

/// Series length at or below which permutation p-values are reported.
pub const PERMUTATION_N_MAX: usize = 10;
/// Permutation budget: enumerate exhaustively up to this many, sample otherwise.
pub const PERMUTATION_BUDGET: usize = 100_000;
const PERMUTATION_SEED: u64 = 0x70617468;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation<T> {
    pub r: T,
    pub p: f64,
    pub n: usize,
}

/// Sample Pearson correlation with a two-sided t-test p-value.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<Correlation<T>> {
    let n = check_paired(x, y)?;
    let nf = T::of(n as f64);
    let mean_x = x.iter().copied().sum::<T>() / nf;
    let mean_y = y.iter().copied().sum::<T>() / nf;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for i in 0..n {
        let dx = x[i] - mean_x;
        let dy = y[i] - mean_y;
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::UndefinedStatistic("correlation of a constant vector"));
    }
    let r = clamp_unit(sxy / (sxx * syy).sqrt());
    Ok(Correlation {
        r,
        p: t_test_pvalue(r.as_f64(), n),
        n,
    })
}

/// Spearman rank correlation: Pearson on mid-ranks, ties averaged.
pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Result<Correlation<T>> {
    check_paired(x, y)?;
    pearson(&midranks(x), &midranks(y))
}

/// Mid-ranks (1-based), with tied values getting the average of their ranks.
pub fn midranks<T: Real>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ties; their ranks average to (i+j)/2 + 1.
        let avg = T::of((i + j) as f64 / 2.0 + 1.0);
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided permutation p-value for the Pearson statistic, permuting `y`.
///
/// All `n!` permutations are enumerated when that fits in the budget;
/// otherwise `budget` permutations are sampled with a fixed seed and the
/// add-one estimator is used.
pub fn permutation_pvalue<T: Real>(x: &[T], y: &[T], budget: usize) -> Result<f64> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let n = check_paired(x, y)?;
    let observed = pearson(x, y)?.r.abs();

    let nf = T::of(n as f64);
    let mean_x = x.iter().copied().sum::<T>() / nf;
    let mean_y = y.iter().copied().sum::<T>() / nf;
    let cx: Vec<T> = x.iter().map(|v| *v - mean_x).collect();
    let mut cy: Vec<T> = y.iter().map(|v| *v - mean_y).collect();
    let sxx = cx.iter().map(|v| *v * *v).sum::<T>();
    let syy = cy.iter().map(|v| *v * *v).sum::<T>();
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::UndefinedStatistic("permutation test of a constant vector"));
    }
    let denom = (sxx * syy).sqrt();
    let abs_r = |cy: &[T]| {
        let sxy = cx.iter().zip(cy).map(|(a, b)| *a * *b).sum::<T>();
        clamp_unit(sxy / denom).abs()
    };

    let total_perms = (1..=n as u128).product::<u128>();
    if total_perms <= budget as u128 {
        let mut hits = 0u64;
        let total = total_perms as u64;
        // Heap's algorithm over cy in place.
        let mut counters = vec![0usize; n];
        if abs_r(&cy) >= observed {
            hits += 1;
        }
        let mut i = 0;
        while i < n {
            if counters[i] < i {
                if i % 2 == 0 {
                    cy.swap(0, i);
                } else {
                    cy.swap(counters[i], i);
                }
                if abs_r(&cy) >= observed {
                    hits += 1;
                }
                counters[i] += 1;
                i = 0;
            } else {
                counters[i] = 0;
                i += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
        let mut hits = 0u64;
        for _ in 0..budget {
            cy.shuffle(&mut rng);
            if abs_r(&cy) >= observed {
                hits += 1;
            }
        }
        Ok((hits as f64 + 1.0) / (budget as f64 + 1.0))
    }
}

/// Permutation p-value for Spearman: the Pearson permutation test on ranks.
pub fn permutation_pvalue_spearman<T: Real>(x: &[T], y: &[T], budget: usize) -> Result<f64> {
    permutation_pvalue(&midranks(x), &midranks(y), budget)
}

/// Trailing moving average; entry `i` averages the last `min(window, i+1)` points.
pub fn moving_average<T: Real>(series: &[T], window: usize) -> Result<Vec<T>> {
    if window == 0 {
        return Err(Error::InvalidConfig("moving-average window must be ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let lo = (i + 1).saturating_sub(window);
        let span = &series[lo..=i];
        let sum = span.iter().copied().sum::<T>();
        out.push(sum / T::of(span.len() as f64));
    }
    Ok(out)
}

/// Least-squares polynomial fit; returns coefficients in ascending degree,
/// in the original `x` units. `x` is standardized internally for conditioning.
pub fn polyfit<T: Real>(x: &[T], y: &[T], degree: usize) -> Result<Vec<T>> {
    let n = check_paired(x, y)?;
    if n < degree + 1 {
        return Err(Error::TooFew {
            needed: degree + 1,
            got: n,
            what: "points for polynomial fit",
        });
    }
    let mean = x.iter().copied().sum::<T>() / T::of(n as f64);
    let spread = x
        .iter()
        .map(|v| (*v - mean).abs())
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    let scale = if spread > T::zero() { spread } else { T::one() };

    let mut design = Array2::zeros((n, degree + 1));
    for i in 0..n {
        let u = (x[i] - mean) / scale;
        let mut p = T::one();
        for d in 0..=degree {
            design[[i, d]] = p;
            p = p * u;
        }
    }
    let c = least_squares(&design, y)?;

    // Expand c0 + c1 u + c2 u² + … with u = (x - m)/s back to powers of x.
    let mut coeffs = vec![T::zero(); degree + 1];
    for (d, cd) in c.iter().enumerate() {
        // (x - m)^d / s^d expanded binomially.
        let mut binom = vec![T::one()];
        for _ in 0..d {
            let mut next = vec![T::zero(); binom.len() + 1];
            for (k, b) in binom.iter().enumerate() {
                next[k] = next[k] - *b * mean;
                next[k + 1] = next[k + 1] + *b;
            }
            binom = next;
        }
        let s_pow = scale.powi(d as i32);
        for (k, b) in binom.iter().enumerate() {
            coeffs[k] = coeffs[k] + *cd * *b / s_pow;
        }
    }
    Ok(coeffs)
}

/// Slope of the least-squares line through the points.
pub fn linear_slope<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    Ok(polyfit(x, y, 1)?[1])
}

/// Earliest index from which the series is non-decreasing, allowing up to
/// `allowed_violations` adjacent decreases in the remaining suffix.
pub fn sustained_rise_start<T: Real>(series: &[T], allowed_violations: usize) -> Option<usize> {
    if series.is_empty() {
        return None;
    }
    let n = series.len();
    // violations[s] = adjacent decreases within series[s..].
    let mut violations = vec![0usize; n];
    for s in (0..n - 1).rev() {
        violations[s] = violations[s + 1] + usize::from(series[s + 1] < series[s]);
    }
    (0..n).find(|&s| violations[s] <= allowed_violations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Positive => write!(f, "positive"),
            Direction::Negative => write!(f, "negative"),
        }
    }
}

/// One named metric trajectory to correlate against accuracy.
pub struct MetricSeries<'a, T> {
    pub name: String,
    pub values: &'a [T],
    pub expected: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: String,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub pearson_perm_p: Option<f64>,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub spearman_perm_p: Option<f64>,
    pub n: usize,
    pub expected_direction: Direction,
    pub direction_consistent: bool,
}

/// Correlate each metric against accuracy over the sustained-rise window.
///
/// The window starts at the first checkpoint after which accuracy is
/// non-decreasing (allowing one violation); at least three aligned
/// checkpoints must remain.
pub fn correlation_table<T: Real>(
    metrics: &[MetricSeries<'_, T>],
    accuracy: &[T],
) -> Result<Vec<CorrelationReport>> {
    let start = sustained_rise_start(accuracy, 1)
        .ok_or(Error::EmptyInput("accuracy series for correlation table"))?;
    let n = accuracy.len() - start;
    if n < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: n,
            what: "aligned checkpoints after sustained-rise start",
        });
    }
    let acc = &accuracy[start..];
    let mut reports = Vec::with_capacity(metrics.len());
    for m in metrics {
        if m.values.len() != accuracy.len() {
            return Err(Error::DimensionMismatch {
                expected: accuracy.len(),
                actual: m.values.len(),
                context: "metric series alignment",
            });
        }
        let vals = &m.values[start..];
        let pe = pearson(vals, acc)?;
        let sp = spearman(vals, acc)?;
        let (perm_p, perm_s) = if n <= PERMUTATION_N_MAX {
            (
                Some(permutation_pvalue(vals, acc, PERMUTATION_BUDGET)?),
                Some(permutation_pvalue_spearman(vals, acc, PERMUTATION_BUDGET)?),
            )
        } else {
            (None, None)
        };
        let r = pe.r.as_f64();
        let consistent = match m.expected {
            Direction::Positive => r > 0.0,
            Direction::Negative => r < 0.0,
        };
        reports.push(CorrelationReport {
            metric: m.name.clone(),
            pearson_r: r,
            pearson_p: pe.p,
            pearson_perm_p: perm_p,
            spearman_rho: sp.r.as_f64(),
            spearman_p: sp.p,
            spearman_perm_p: perm_s,
            n,
            expected_direction: m.expected,
            direction_consistent: consistent,
        });
    }
    Ok(reports)
}

fn t_test_pvalue(r: f64, n: usize) -> f64 {
    debug_assert!(n >= 3);
    let df = (n - 2) as f64;
    if (1.0 - r * r) <= 0.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

fn clamp_unit<T: Real>(r: T) -> T {
    if r > T::one() {
        T::one()
    } else if r < -T::one() {
        -T::one()
    } else {
        r
    }
}

fn check_paired<T: Real>(x: &[T], y: &[T]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
            context: "paired statistics input",
        });
    }
    if x.len() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: x.len(),
            what: "points for correlation",
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "correlation input",
        });
    }
    Ok(x.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn pearson_exact_linearity() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(pearson(&x, &y).unwrap().r, 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg).unwrap().r, -1.0);
    }

    #[test]
    fn pearson_matches_definitional_oracle() {
        let mut rng = crate::testutil::rng(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = pearson(&x, &y).unwrap().r;
            // Oracle: raw-moment covariance formula.
            let n = 20.0;
            let sx: f64 = x.iter().sum();
            let sy: f64 = y.iter().sum();
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let sxx: f64 = x.iter().map(|a| a * a).sum();
            let syy: f64 = y.iter().map(|a| a * a).sum();
            let want = (sxy - sx * sy / n)
                / ((sxx - sx * sx / n).sqrt() * (syy - sy * sy / n).sqrt());
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn pearson_rejects_constant_input() {
        let x = vec![1.0_f64; 5];
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(
            pearson(&x, &y),
            Err(Error::UndefinedStatistic(_))
        ));
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let x: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        assert_eq!(spearman(&x, &cubed).unwrap().r, 1.0);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &rev).unwrap().r, -1.0);
    }

    #[test]
    fn spearman_equals_pearson_on_midranks_with_ties() {
        let x = vec![1.0_f64, 2.0, 2.0, 3.0, 5.0, 5.0, 5.0, 9.0];
        let y = vec![3.0_f64, 1.0, 4.0, 4.0, 2.0, 8.0, 8.0, 7.0];
        let direct = spearman(&x, &y).unwrap().r;
        let oracle = pearson(&midranks(&x), &midranks(&y)).unwrap().r;
        assert_eq!(direct, oracle);
    }

    #[test]
    fn midranks_average_ties() {
        let r = midranks(&[10.0_f64, 20.0, 20.0, 30.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn pvalue_monotone_in_abs_r() {
        let n = 8;
        let mut last = 1.1;
        for k in 1..10 {
            let r = k as f64 / 10.0;
            let p = t_test_pvalue(r, n);
            assert!(p < last, "p must fall as |r| grows");
            last = p;
        }
    }

    #[test]
    fn permutation_pvalue_detects_perfect_correlation() {
        let x = vec![1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = vec![2.0_f64, 4.0, 6.0, 8.0, 10.0, 12.0];
        let p = permutation_pvalue(&x, &y, PERMUTATION_BUDGET).unwrap();
        // Only the identity and full reversal reach |r| = 1 out of 720.
        assert_abs_diff_eq!(p, 2.0 / 720.0, epsilon = 1e-12);
    }

    #[test]
    fn moving_average_hand_case() {
        let out = moving_average(&[1.0_f64, 2.0, 3.0], 2).unwrap();
        assert_eq!(out, vec![1.0, 1.5, 2.5]);
        let konst = moving_average(&[4.0_f64; 5], 3).unwrap();
        assert_eq!(konst, vec![4.0; 5]);
        let ident = moving_average(&[1.0_f64, 7.0, 2.0], 1).unwrap();
        assert_eq!(ident, vec![1.0, 7.0, 2.0]);
        assert!(moving_average(&[1.0_f64], 0).is_err());
    }

    #[test]
    fn sustained_rise_rule() {
        // Fluctuating prefix, then a rise with one tolerated dip at index 6.
        let acc = vec![0.3_f64, 0.1, 0.35, 0.05, 0.2, 0.25, 0.3, 0.28, 0.5, 0.9];
        let s = sustained_rise_start(&acc, 1).unwrap();
        assert_eq!(s, 3);
        // Prepending more fluctuating checkpoints must not move the start step.
        let mut longer = vec![0.4, 0.1, 0.33, 0.02];
        longer.extend_from_slice(&acc);
        assert_eq!(sustained_rise_start(&longer, 1).unwrap(), s + 4);
    }

    #[test]
    fn polyfit_slope_sign() {
        let x: Vec<f64> = (0..6).map(|i| 100.0 + 50.0 * i as f64).collect();
        let y = vec![5.0_f64, 4.0, 3.5, 2.8, 2.2, 1.0];
        assert!(linear_slope(&x, &y).unwrap() < 0.0);
    }
}
