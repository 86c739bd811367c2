//! Memorization/generalization detection over checkpoint series, grouping,
//! threshold calibration, contamination scoring, and parameter-dynamics
//! summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::SampleId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Loss,
    Accuracy,
}

impl std::fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeriesKind::Loss => write!(f, "loss"),
            SeriesKind::Accuracy => write!(f, "accuracy"),
        }
    }
}

impl std::str::FromStr for SeriesKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(SeriesKind::Loss),
            "accuracy" => Ok(SeriesKind::Accuracy),
            other => Err(Error::InvalidConfig(format!("unknown series kind '{other}'"))),
        }
    }
}

/// Per-sample value trajectory over training checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSeries<T> {
    pub sample_id: SampleId,
    pub steps: Vec<u64>,
    pub values: Vec<T>,
    pub kind: SeriesKind,
}

impl<T: Real> CheckpointSeries<T> {
    pub fn new(
        sample_id: SampleId,
        steps: Vec<u64>,
        values: Vec<T>,
        kind: SeriesKind,
    ) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::EmptyInput("checkpoint series"));
        }
        if steps.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: steps.len(),
                actual: values.len(),
                context: "checkpoint series lengths",
            });
        }
        if !steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::MalformedSeries(format!(
                "steps must be strictly increasing for sample {sample_id}"
            )));
        }
        match kind {
            SeriesKind::Loss => {
                if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
                    return Err(Error::MalformedSeries(format!(
                        "loss values must be finite and non-negative for sample {sample_id}"
                    )));
                }
            }
            SeriesKind::Accuracy => {
                if values.iter().any(|v| *v < T::zero() || *v > T::one()) {
                    return Err(Error::MalformedSeries(format!(
                        "accuracy values must lie in [0, 1] for sample {sample_id}"
                    )));
                }
            }
        }
        Ok(Self {
            sample_id,
            steps,
            values,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_step(&self) -> u64 {
        *self.steps.last().expect("validated nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemorizationThresholds<T> {
    /// Loss level a memorized sample must stay at or below.
    pub epsilon: T,
    /// Maximum deviation from the final-checkpoint loss.
    pub delta: T,
}

impl<T: Real> MemorizationThresholds<T> {
    pub fn new(epsilon: T, delta: T) -> Result<Self> {
        if epsilon <= T::zero() || delta <= T::zero() {
            return Err(Error::InvalidConfig(
                "memorization thresholds must be positive".into(),
            ));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Stability threshold fixed across domains.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Earliest recorded step from which the loss stays at or below `epsilon`
/// *and* within `delta` of the final-checkpoint loss, at every subsequent
/// checkpoint (the final checkpoint compares against itself, trivially).
pub fn memorization_step<T: Real>(
    series: &CheckpointSeries<T>,
    thresholds: &MemorizationThresholds<T>,
) -> Result<Option<u64>> {
    if series.kind != SeriesKind::Loss {
        return Err(Error::SeriesKindMismatch {
            expected: "loss",
            actual: "accuracy",
        });
    }
    if series.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: series.len(),
            what: "checkpoints for memorization detection",
        });
    }
    let final_loss = *series.values.last().expect("nonempty");
    let holds = |v: T| v <= thresholds.epsilon && (v - final_loss).abs() <= thresholds.delta;
    // Walk back from the end while the condition holds; the earliest index
    // of that maximal suffix is the memorization step.
    let mut start = None;
    for i in (0..series.len()).rev() {
        if holds(series.values[i]) {
            start = Some(i);
        } else {
            break;
        }
    }
    Ok(start.map(|i| series.steps[i]))
}

/// Default sustained-accuracy threshold.
pub const DEFAULT_ACC_MEAN_MIN: f64 = 0.8;
/// Default number of tolerated errors after the generalization step.
pub const DEFAULT_MAX_ERRORS: usize = 1;

/// Earliest step such that, over the closed suffix starting there, mean
/// accuracy exceeds `acc_mean_min` and at most `max_errors` entries are zero.
pub fn generalization_step<T: Real>(
    series: &CheckpointSeries<T>,
    acc_mean_min: T,
    max_errors: usize,
) -> Result<Option<u64>> {
    if series.kind != SeriesKind::Accuracy {
        return Err(Error::SeriesKindMismatch {
            expected: "accuracy",
            actual: "loss",
        });
    }
    let n = series.len();
    let mut suffix_sum = vec![T::zero(); n + 1];
    let mut suffix_zeros = vec![0usize; n + 1];
    for i in (0..n).rev() {
        suffix_sum[i] = suffix_sum[i + 1] + series.values[i];
        suffix_zeros[i] = suffix_zeros[i + 1] + usize::from(series.values[i] == T::zero());
    }
    for s in 0..n {
        let count = T::of((n - s) as f64);
        if suffix_sum[s] / count > acc_mean_min && suffix_zeros[s] <= max_errors {
            return Ok(Some(series.steps[s]));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGroup {
    /// The shared detection step (t* for training groups, t# for test groups).
    pub step: u64,
    pub members: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    /// Groups in ascending step order; members keep input order.
    pub groups: Vec<DataGroup>,
    pub undetected: usize,
}

impl Grouping {
    pub fn detected(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }
}

/// Partition detected samples by their detection step; undetected samples
/// are excluded and counted.
pub fn group_by_step(detections: &[(SampleId, Option<u64>)]) -> Grouping {
    let mut by_step: BTreeMap<u64, Vec<SampleId>> = BTreeMap::new();
    let mut undetected = 0usize;
    for (id, det) in detections {
        match det {
            Some(step) => by_step.entry(*step).or_default().push(id.clone()),
            None => undetected += 1,
        }
    }
    Grouping {
        groups: by_step
            .into_iter()
            .map(|(step, members)| DataGroup { step, members })
            .collect(),
        undetected,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonCalibration {
    /// Smallest grid value whose coverage lands in the band, if any.
    pub chosen: Option<f64>,
    /// Grid value whose coverage is closest to the band (the chosen value
    /// when the band was reached).
    pub nearest: f64,
    pub nearest_coverage: f64,
    /// Every scanned (epsilon, coverage) point, ascending.
    pub scanned: Vec<(f64, f64)>,
}

/// Default coverage band for the memorized fraction before the final checkpoint.
pub const DEFAULT_COVERAGE_BAND: (f64, f64) = (0.20, 0.25);
/// Default calibration grid step.
pub const DEFAULT_GRID_STEP: f64 = 0.1;

/// Scan `epsilon` upward in grid steps until the fraction of samples
/// memorized strictly before the final checkpoint lands in `band` (or the
/// scan saturates). Coverage is monotone in epsilon, so the scan stops once
/// the band's upper edge is passed.
pub fn calibrate_epsilon<T: Real>(
    series: &[CheckpointSeries<T>],
    delta: T,
    band: (f64, f64),
    grid_step: f64,
) -> Result<EpsilonCalibration> {
    if series.is_empty() {
        return Err(Error::EmptyInput("series set for epsilon calibration"));
    }
    if grid_step <= 0.0 {
        return Err(Error::InvalidConfig("calibration grid step must be > 0".into()));
    }
    if !(band.0 <= band.1) {
        return Err(Error::InvalidConfig("coverage band must be ordered".into()));
    }
    let max_value = series
        .iter()
        .flat_map(|s| s.values.iter())
        .fold(0.0_f64, |a, v| a.max(v.as_f64()));

    let mut scanned = Vec::new();
    let mut chosen = None;
    let mut nearest = (f64::INFINITY, 0.0, 0.0); // (distance, epsilon, coverage)
    let mut k = 1usize;
    loop {
        let epsilon = k as f64 * grid_step;
        let thresholds = MemorizationThresholds::new(T::of(epsilon), delta)?;
        let mut memorized = 0usize;
        for s in series {
            if let Some(step) = memorization_step(s, &thresholds)? {
                if step < s.final_step() {
                    memorized += 1;
                }
            }
        }
        let coverage = memorized as f64 / series.len() as f64;
        scanned.push((epsilon, coverage));

        let distance = if coverage < band.0 {
            band.0 - coverage
        } else if coverage > band.1 {
            coverage - band.1
        } else {
            0.0
        };
        if distance < nearest.0 {
            nearest = (distance, epsilon, coverage);
        }
        if distance == 0.0 && chosen.is_none() {
            chosen = Some(epsilon);
        }
        if coverage > band.1 || epsilon > max_value + grid_step {
            break;
        }
        k += 1;
    }
    Ok(EpsilonCalibration {
        chosen,
        nearest: nearest.1,
        nearest_coverage: nearest.2,
        scanned,
    })
}

/// Per-token inputs for the contamination score: log-probability plus the
/// vocabulary-level mean and standard deviation at that position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenStat<T> {
    pub log_prob: T,
    pub mu: T,
    pub sigma: T,
}

/// Mean of the lowest `⌈k·n⌉` standardized token log-probabilities
/// `z = (log p − μ)/σ`; high scores flag likely training-set membership.
pub fn contamination_score<T: Real>(token_stats: &[TokenStat<T>], k_fraction: f64) -> Result<T> {
    if token_stats.is_empty() {
        return Err(Error::EmptyInput("token statistics"));
    }
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::ThresholdOutOfRange {
            value: k_fraction,
            range: "(0, 1]",
        });
    }
    let mut z: Vec<T> = token_stats
        .iter()
        .map(|t| {
            if t.sigma <= T::zero() {
                return Err(Error::InvalidConfig(
                    "token sigma must be positive".into(),
                ));
            }
            Ok((t.log_prob - t.mu) / t.sigma)
        })
        .collect::<Result<_>>()?;
    z.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let take = ((k_fraction * token_stats.len() as f64).ceil() as usize).max(1);
    let take = take.min(z.len());
    Ok(z[..take].iter().copied().sum::<T>() / T::of(take as f64))
}

/// Default fraction of highest-scoring samples dropped as likely contaminated.
pub const DEFAULT_DROP_FRACTION: f64 = 0.10;

/// Drop the `⌈drop_fraction·n⌉` highest-scoring samples; ties break by
/// sample id (the lexicographically smaller id is dropped first). The kept
/// ids come back in input order.
pub fn filter_contaminated<T: Real>(
    scores: &[(SampleId, T)],
    drop_fraction: f64,
) -> Result<Vec<SampleId>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::ThresholdOutOfRange {
            value: drop_fraction,
            range: "[0, 1)",
        });
    }
    let n = scores.len();
    let drop = (drop_fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .1
            .partial_cmp(&scores[a].1)
            .expect("finite scores")
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let dropped: std::collections::BTreeSet<usize> = order[..drop.min(n)].iter().copied().collect();
    Ok(scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, (id, _))| id.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceStability<T> {
    /// Drop in change magnitude from early to late training.
    pub speed: T,
    /// Inverse standard deviation of the normalized changes.
    pub stability: T,
    /// True when the deviation hit the floor and stability is reported capped.
    pub capped: bool,
}

/// Floor for the standard deviation in the stability ratio.
pub const STABILITY_FLOOR: f64 = 1e-12;

/// Early/late split fraction used by default (first vs last third).
pub const DEFAULT_SPLIT_FRACTION: f64 = 1.0 / 3.0;

/// Convergence speed and stability of one parameter type's normalized
/// change series. `split_fraction` sets how much of the series counts as
/// early and late (1/3 by default; both windows need at least two points).
pub fn convergence_and_stability<T: Real>(
    changes: &[T],
    split_fraction: f64,
) -> Result<ConvergenceStability<T>> {
    let m = changes.len();
    let window = (m as f64 * split_fraction).floor() as usize;
    if window < 2 || 2 * window > m {
        return Err(Error::TooFew {
            needed: (2.0 / split_fraction).ceil() as usize,
            got: m,
            what: "points in the change series",
        });
    }
    let mean_of = |slice: &[T]| slice.iter().copied().sum::<T>() / T::of(slice.len() as f64);
    let speed = mean_of(&changes[..window]) - mean_of(&changes[m - window..]);
    let mean_all = mean_of(changes);
    let var = changes
        .iter()
        .map(|c| (*c - mean_all) * (*c - mean_all))
        .sum::<T>()
        / T::of(m as f64);
    let sigma = var.sqrt();
    let floor = T::of(STABILITY_FLOOR);
    let capped = sigma < floor;
    let stability = T::one() / if capped { floor } else { sigma };
    Ok(ConvergenceStability {
        speed,
        stability,
        capped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_series(values: Vec<f64>) -> CheckpointSeries<f64> {
        let steps = (0..values.len() as u64).map(|i| i * 10).collect();
        CheckpointSeries::new(SampleId::new("s"), steps, values, SeriesKind::Loss).unwrap()
    }

    fn acc_series(values: Vec<f64>) -> CheckpointSeries<f64> {
        let steps = (0..values.len() as u64).map(|i| i * 10).collect();
        CheckpointSeries::new(SampleId::new("s"), steps, values, SeriesKind::Accuracy).unwrap()
    }

    fn th(e: f64, d: f64) -> MemorizationThresholds<f64> {
        MemorizationThresholds::new(e, d).unwrap()
    }

    #[test]
    fn memorization_suffix_scan_examples() {
        let s = loss_series(vec![3.0, 2.1, 0.40, 0.38, 0.37]);
        assert_eq!(memorization_step(&s, &th(0.5, 0.05)).unwrap(), Some(20));

        let constant = loss_series(vec![0.1; 5]);
        assert_eq!(memorization_step(&constant, &th(0.5, 0.05)).unwrap(), Some(0));

        let high = loss_series(vec![2.0, 1.5, 1.2, 1.0]);
        assert_eq!(memorization_step(&high, &th(0.5, 0.05)).unwrap(), None);
    }

    #[test]
    fn memorization_rejects_wrong_kind_and_short_series() {
        let acc = acc_series(vec![1.0, 1.0]);
        assert!(memorization_step(&acc, &th(0.5, 0.05)).is_err());
        let short = loss_series(vec![0.1]);
        assert!(memorization_step(&short, &th(0.5, 0.05)).is_err());
    }

    #[test]
    fn memorization_conditions_hold_over_entire_suffix() {
        // Independent re-verification of the suffix property on random series.
        let mut rng = crate::testutil::rng(17);
        use rand::Rng;
        for _ in 0..500 {
            let n = rng.random_range(2..20usize);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = loss_series(values.clone());
            let eps = rng.random_range(0.1..1.0);
            let delta = rng.random_range(0.01..0.5);
            if let Some(step) = memorization_step(&s, &th(eps, delta)).unwrap() {
                let idx = s.steps.iter().position(|&t| t == step).unwrap();
                let fin = *values.last().unwrap();
                for v in &values[idx..] {
                    assert!(*v <= eps && (v - fin).abs() <= delta);
                }
                // Anti-causality: the checkpoint just before must fail.
                if idx > 0 {
                    let v = values[idx - 1];
                    assert!(v > eps || (v - fin).abs() > delta);
                }
            }
        }
    }

    #[test]
    fn memorization_monotone_in_thresholds() {
        let mut rng = crate::testutil::rng(18);
        use rand::Rng;
        for _ in 0..300 {
            let n = rng.random_range(2..15usize);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = loss_series(values);
            let eps = rng.random_range(0.1..0.8);
            let delta = rng.random_range(0.01..0.4);
            let base = memorization_step(&s, &th(eps, delta)).unwrap();
            let wider_eps = memorization_step(&s, &th(eps + 0.3, delta)).unwrap();
            let wider_delta = memorization_step(&s, &th(eps, delta + 0.3)).unwrap();
            for wider in [wider_eps, wider_delta] {
                match (base, wider) {
                    (Some(b), Some(w)) => assert!(w <= b),
                    (Some(_), None) => panic!("relaxing thresholds lost the detection"),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn generalization_suffix_examples() {
        let s = acc_series(vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(generalization_step(&s, 0.8, 1).unwrap(), Some(10));

        let ones = acc_series(vec![1.0; 4]);
        assert_eq!(generalization_step(&ones, 0.8, 1).unwrap(), Some(0));

        let zeros = acc_series(vec![0.0; 4]);
        assert_eq!(generalization_step(&zeros, 0.8, 1).unwrap(), None);
    }

    #[test]
    fn generalization_threshold_is_strict() {
        // Suffix [0,1,1,1,1] has mean exactly 0.8: not strictly above.
        let s = acc_series(vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(generalization_step(&s, 0.8, 1).unwrap(), Some(10));
        let t = acc_series(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        // Suffixes: full mean 4/6 fail; from idx1 mean 3/5 fail; idx2 mean 3/4
        // fail zeros=1 mean 0.75 ≤ 0.8; idx3 mean 2/3 fail; idx4 mean 0.5 fail;
        // idx5 mean 1 pass.
        assert_eq!(generalization_step(&t, 0.8, 1).unwrap(), Some(50));
    }

    #[test]
    fn grouping_partitions_and_counts() {
        let detections = vec![
            (SampleId::new("a"), Some(10)),
            (SampleId::new("b"), Some(20)),
            (SampleId::new("c"), Some(10)),
            (SampleId::new("d"), None),
        ];
        let g = group_by_step(&detections);
        assert_eq!(g.groups.len(), 2);
        assert_eq!(g.groups[0].step, 10);
        assert_eq!(g.groups[0].members, vec![SampleId::new("a"), SampleId::new("c")]);
        assert_eq!(g.undetected, 1);
        assert_eq!(g.detected(), 3);

        let same: Vec<_> = (0..5)
            .map(|i| (SampleId::new(format!("s{i}")), Some(7u64)))
            .collect();
        assert_eq!(group_by_step(&same).groups.len(), 1);

        let distinct: Vec<_> = (0..5)
            .map(|i| (SampleId::new(format!("s{i}")), Some(i as u64)))
            .collect();
        assert_eq!(group_by_step(&distinct).groups.len(), 5);
    }

    #[test]
    fn calibration_finds_known_quantile() {
        // 100 series: 22 stabilize below 0.45 before the end, the rest sit
        // near 0.55 (inside the 0.5 grid point but memorized only at ε=0.6).
        let mut series = Vec::new();
        for i in 0..100 {
            let id = SampleId::new(format!("s{i:03}"));
            let vals = if i < 22 {
                vec![2.0, 0.42, 0.41, 0.40]
            } else {
                vec![2.0, 0.56, 0.55, 0.55]
            };
            series.push(
                CheckpointSeries::new(id, vec![0, 10, 20, 30], vals, SeriesKind::Loss).unwrap(),
            );
        }
        let cal = calibrate_epsilon(&series, 0.05, (0.20, 0.25), 0.1).unwrap();
        assert_eq!(cal.chosen, Some(0.5));
        assert_eq!(cal.nearest, 0.5);
        assert!((cal.nearest_coverage - 0.22).abs() < 1e-12);

        // A [0,1] band accepts the first grid value that memorizes anything.
        let wide = calibrate_epsilon(&series, 0.05, (0.0, 1.0), 0.1).unwrap();
        assert_eq!(wide.chosen, Some(0.1));
    }

    #[test]
    fn calibration_coverage_monotone_in_epsilon() {
        let mut rng = crate::testutil::rng(19);
        use rand::Rng;
        let series: Vec<_> = (0..40)
            .map(|i| {
                let n = rng.random_range(3..8usize);
                let vals: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
                CheckpointSeries::new(
                    SampleId::new(format!("s{i}")),
                    (0..n as u64).map(|t| t * 5).collect(),
                    vals,
                    SeriesKind::Loss,
                )
                .unwrap()
            })
            .collect();
        let cal = calibrate_epsilon(&series, 0.5, (0.99, 1.0), 0.1).unwrap();
        for w in cal.scanned.windows(2) {
            assert!(w[1].1 >= w[0].1, "coverage must not fall as epsilon grows");
        }
    }

    #[test]
    fn contamination_score_examples() {
        let stats = |zs: &[f64]| -> Vec<TokenStat<f64>> {
            zs.iter()
                .map(|z| TokenStat {
                    log_prob: *z,
                    mu: 0.0,
                    sigma: 1.0,
                })
                .collect()
        };
        let s = contamination_score(&stats(&[-2.0, -1.0, 0.0, 1.0]), 0.5).unwrap();
        assert_eq!(s, -1.5);
        let all = contamination_score(&stats(&[-2.0, -1.0, 0.0, 1.0]), 1.0).unwrap();
        assert_eq!(all, -0.5);
        let single = contamination_score(&stats(&[0.7]), 0.3).unwrap();
        assert_eq!(single, 0.7);
        assert!(contamination_score::<f64>(&[], 0.5).is_err());
        let bad_sigma = vec![TokenStat {
            log_prob: 0.0,
            mu: 0.0,
            sigma: 0.0,
        }];
        assert!(contamination_score(&bad_sigma, 0.5).is_err());
    }

    #[test]
    fn contamination_score_monotone_in_z() {
        let mut rng = crate::testutil::rng(20);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(1..10usize);
            let zs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let k = rng.random_range(0.1..1.0);
            let base: Vec<TokenStat<f64>> = zs
                .iter()
                .map(|z| TokenStat {
                    log_prob: *z,
                    mu: 0.0,
                    sigma: 1.0,
                })
                .collect();
            let s0 = contamination_score(&base, k).unwrap();
            let idx = rng.random_range(0..n);
            let mut bumped = base.clone();
            bumped[idx].log_prob += 0.5;
            let s1 = contamination_score(&bumped, k).unwrap();
            assert!(s1 >= s0 - 1e-12);
        }
    }

    #[test]
    fn filter_matches_sort_and_slice() {
        let scores: Vec<(SampleId, f64)> = (0..10)
            .map(|i| (SampleId::new(format!("s{i}")), (i as f64 * 7.3) % 5.0))
            .collect();
        let kept = filter_contaminated(&scores, 0.10).unwrap();
        assert_eq!(kept.len(), 9);
        // Brute-force oracle.
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let dropped = &sorted[..1];
        assert!(!kept.contains(&dropped[0].0));

        let none = filter_contaminated(&scores, 0.0).unwrap();
        assert_eq!(none.len(), 10);
    }

    #[test]
    fn convergence_and_stability_hand_cases() {
        let flat = convergence_and_stability(&[0.2_f64; 6], DEFAULT_SPLIT_FRACTION).unwrap();
        assert_eq!(flat.speed, 0.0);
        assert!(flat.capped);
        assert_eq!(flat.stability, 1.0 / STABILITY_FLOOR);

        let halves = convergence_and_stability(&[0.3_f64, 0.3, 0.1, 0.1], 0.5).unwrap();
        assert!((halves.speed - 0.2).abs() < 1e-15);
        assert!(!halves.capped);

        assert!(convergence_and_stability(&[0.1_f64; 5], DEFAULT_SPLIT_FRACTION).is_err());
    }
}
