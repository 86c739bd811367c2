//! Cross-layer pathway consistency from router weights and routing weights.
//!
//! Each router row is an expert embedding; the gate-weighted sum of rows is
//! a sample's routing embedding at that layer. The per-sample score compares
//! consecutive-layer embeddings by cosine, normalizes by the (signed)
//! maximum cosine plus a small epsilon, and averages.
//!
//! Sign convention: `c_i` is the printed formula (1 minus the normalized
//! average), where *higher* means more erratic transitions. The monitored
//! quantity in reports is `raw_smoothness = 1 - c_i`, which improves as
//! transitions smooth out; every emitted table labels which one it uses.
//! Note the two-layer degeneracy: with a single consecutive pair the
//! normalized term is ≈ 1 whenever the cosine is positive, so `c_i ≈ 0`
//! regardless of the cosine's size.

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoEModel, RoutingRecord};
use crate::scalar::Real;
use crate::SampleId;

/// Stabilizer added to the maximum cosine before normalizing.
pub const CONSISTENCY_EPSILON: f64 = 1e-8;
/// Simplex tolerance for externally supplied gate vectors.
pub const GATE_SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Expert embeddings of one layer: a read-only view of the router rows.
pub fn expert_embeddings<T: Real>(
    model: &MoEModel<T>,
    layer: usize,
) -> Result<ArrayView2<'_, T>> {
    model.router(layer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingEmbedding<T> {
    pub layer: usize,
    pub vector: Array1<T>,
}

/// Gate-weighted sum of the layer's expert embeddings: `e = Σ_k g_k W[k]`.
pub fn routing_embedding<T: Real>(
    model: &MoEModel<T>,
    layer: usize,
    gates: &[T],
) -> Result<RoutingEmbedding<T>> {
    let rows = model.router(layer)?;
    if gates.len() != rows.nrows() {
        return Err(Error::DimensionMismatch {
            expected: rows.nrows(),
            actual: gates.len(),
            context: "gate vector length",
        });
    }
    let sum = gates.iter().copied().sum::<T>();
    let deviation = (sum - T::one()).abs();
    if deviation > T::of(GATE_SIMPLEX_TOLERANCE) || gates.iter().any(|g| *g < T::zero()) {
        return Err(Error::SimplexViolation {
            deviation: deviation.as_f64(),
            layer,
        });
    }
    let mut vector = Array1::zeros(rows.ncols());
    for (k, g) in gates.iter().enumerate() {
        vector.zip_mut_with(&rows.row(k), |v, w| *v += *g * *w);
    }
    Ok(RoutingEmbedding { layer, vector })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyFlag {
    /// The maximum consecutive cosine is negative; the printed normalization
    /// divides by it unchanged, which flips term signs.
    NegativeMaxCosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyScore<T> {
    pub sample_id: SampleId,
    /// Printed formula: higher means more erratic transitions.
    pub c_i: T,
    /// `1 - c_i`: higher means smoother transitions.
    pub raw_smoothness: T,
    /// Consecutive-layer cosines, length `L - 1`.
    pub cosines: Vec<T>,
    pub degenerate: Option<DegeneracyFlag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedReason {
    /// A single layer has no consecutive pair to compare.
    SingleLayer,
    /// Some routing embedding has exactly zero norm; cosines are undefined.
    ZeroNormEmbedding { layer: usize },
    /// The normalizer `max cosine + ε` is exactly zero.
    ZeroNormalizer,
}

impl std::fmt::Display for UndefinedReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UndefinedReason::SingleLayer => write!(f, "single_layer"),
            UndefinedReason::ZeroNormEmbedding { layer } => {
                write!(f, "zero_norm_embedding(layer={layer})")
            }
            UndefinedReason::ZeroNormalizer => write!(f, "zero_normalizer"),
        }
    }
}

/// A per-sample score, or an explicit undefined marker — never a silent zero.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleConsistency<T> {
    Defined(ConsistencyScore<T>),
    Undefined {
        sample_id: SampleId,
        reason: UndefinedReason,
    },
}

impl<T> SampleConsistency<T> {
    pub fn as_defined(&self) -> Option<&ConsistencyScore<T>> {
        match self {
            SampleConsistency::Defined(score) => Some(score),
            SampleConsistency::Undefined { .. } => None,
        }
    }
}

/// Consistency of one sample's routing across consecutive layers.
///
/// `records` must hold this sample's full gate vector for every layer.
pub fn pathway_consistency<T: Real>(
    model: &MoEModel<T>,
    records: &[RoutingRecord<T>],
) -> Result<SampleConsistency<T>> {
    let num_layers = model.config().num_layers;
    if records.len() != num_layers {
        return Err(Error::DimensionMismatch {
            expected: num_layers,
            actual: records.len(),
            context: "routing records per sample",
        });
    }
    let sample_id = records[0].sample_id.clone();
    if num_layers < 2 {
        return Ok(SampleConsistency::Undefined {
            sample_id,
            reason: UndefinedReason::SingleLayer,
        });
    }

    let mut ordered: Vec<Option<&RoutingRecord<T>>> = vec![None; num_layers];
    for rec in records {
        if rec.sample_id != sample_id {
            return Err(Error::InvalidConfig(
                "consistency records mix different samples".into(),
            ));
        }
        let slot = ordered.get_mut(rec.layer).ok_or(Error::LayerOutOfRange {
            layer: rec.layer,
            num_layers,
        })?;
        *slot = Some(rec);
    }

    let mut embeddings = Vec::with_capacity(num_layers);
    for (layer, slot) in ordered.iter().enumerate() {
        let rec = slot.ok_or(Error::InvalidConfig(format!(
            "missing routing record for layer {layer}"
        )))?;
        embeddings.push(routing_embedding(model, layer, &rec.weights)?);
    }

    let mut cosines = Vec::with_capacity(num_layers - 1);
    for pair in embeddings.windows(2) {
        let a = &pair[0].vector;
        let b = &pair[1].vector;
        let na = a.dot(a).sqrt();
        let nb = b.dot(b).sqrt();
        if na == T::zero() || nb == T::zero() {
            let layer = if na == T::zero() {
                pair[0].layer
            } else {
                pair[1].layer
            };
            return Ok(SampleConsistency::Undefined {
                sample_id,
                reason: UndefinedReason::ZeroNormEmbedding { layer },
            });
        }
        cosines.push(a.dot(b) / (na * nb));
    }

    let max_cos = cosines
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let denom = max_cos + T::of(CONSISTENCY_EPSILON);
    if denom == T::zero() {
        return Ok(SampleConsistency::Undefined {
            sample_id,
            reason: UndefinedReason::ZeroNormalizer,
        });
    }
    let raw_smoothness =
        cosines.iter().map(|c| *c / denom).sum::<T>() / T::of((num_layers - 1) as f64);
    let c_i = T::one() - raw_smoothness;
    let degenerate = (max_cos < T::zero()).then_some(DegeneracyFlag::NegativeMaxCosine);
    Ok(SampleConsistency::Defined(ConsistencyScore {
        sample_id,
        c_i,
        raw_smoothness,
        cosines,
        degenerate,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupConsistency<T> {
    pub mean_c_i: T,
    pub std_c_i: T,
    pub defined: usize,
    pub undefined: usize,
}

impl<T: Real> GroupConsistency<T> {
    pub fn mean_raw_smoothness(&self) -> T {
        T::one() - self.mean_c_i
    }
}

/// Aggregate `c_i` over defined per-sample scores; undefined scores are
/// excluded and counted. Errors only if every score is undefined.
pub fn group_consistency<T: Real>(
    model: &MoEModel<T>,
    per_sample_records: &[Vec<RoutingRecord<T>>],
) -> Result<GroupConsistency<T>> {
    if per_sample_records.is_empty() {
        return Err(Error::EmptyInput("samples for group consistency"));
    }
    let mut values = Vec::new();
    let mut undefined = 0usize;
    for records in per_sample_records {
        match pathway_consistency(model, records)? {
            SampleConsistency::Defined(score) => values.push(score.c_i),
            SampleConsistency::Undefined { .. } => undefined += 1,
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedStatistic(
            "every consistency score in the group is undefined",
        ));
    }
    let n = T::of(values.len() as f64);
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    Ok(GroupConsistency {
        mean_c_i: mean,
        std_c_i: var.sqrt(),
        defined: values.len(),
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{ExpertKind, MoEConfig, MoEModel};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn model(layers: usize, k: usize, d: usize, seed: u64) -> MoEModel<f64> {
        MoEModel::init(MoEConfig {
            num_experts: k,
            input_dim: d,
            hidden_dim: 3,
            num_layers: layers,
            expert_kind: ExpertKind::TwoLayerRelu,
            router_frozen: false,
            seed,
        })
        .unwrap()
    }

    fn rec(id: &str, layer: usize, weights: Vec<f64>) -> RoutingRecord<f64> {
        RoutingRecord::new(SampleId::new(id), layer, weights).unwrap()
    }

    #[test]
    fn expert_embeddings_are_router_rows() {
        let m = model(2, 3, 4, 1);
        let rows = expert_embeddings(&m, 1).unwrap();
        assert_eq!(rows.nrows(), 3);
        for k in 0..3 {
            assert_eq!(rows.row(k), m.router(1).unwrap().row(k));
        }
        assert!(expert_embeddings(&m, 2).is_err());
        // Mutating a copy leaves the model untouched.
        let mut copy = rows.to_owned();
        copy[[0, 0]] += 1.0;
        assert_ne!(copy[[0, 0]], m.router(1).unwrap()[[0, 0]]);
    }

    #[test]
    fn routing_embedding_selection_and_mean() {
        let m = model(1, 3, 4, 2);
        let rows = m.router(0).unwrap().to_owned();
        let onehot = routing_embedding(&m, 0, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(onehot.vector, rows.row(1).to_owned());
        let uniform = routing_embedding(&m, 0, &[1.0 / 3.0; 3]).unwrap();
        let mean = (&rows.row(0) + &rows.row(1) + &rows.row(2)) / 3.0;
        for (a, b) in uniform.vector.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn routing_embedding_matches_matrix_product() {
        let m = model(1, 4, 5, 3);
        let g = vec![0.1, 0.2, 0.3, 0.4];
        let e = routing_embedding(&m, 0, &g).unwrap();
        let gv = Array1::from_vec(g);
        let want = m.router(0).unwrap().t().dot(&gv);
        for (a, b) in e.vector.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn routing_embedding_rejects_off_simplex_gates() {
        let m = model(1, 2, 3, 4);
        assert!(matches!(
            routing_embedding(&m, 0, &[0.7, 0.7]),
            Err(Error::SimplexViolation { .. })
        ));
    }

    fn with_routers(mut m: MoEModel<f64>, routers: Vec<ndarray::Array2<f64>>) -> MoEModel<f64> {
        for (l, r) in routers.into_iter().enumerate() {
            m.set_router_for_test(l, r);
        }
        m
    }

    #[test]
    fn identical_embeddings_give_near_zero_c_i() {
        let m = with_routers(
            model(3, 2, 2, 5),
            vec![
                array![[1.0, 0.0], [0.0, 1.0]],
                array![[1.0, 0.0], [0.0, 1.0]],
                array![[1.0, 0.0], [0.0, 1.0]],
            ],
        );
        let recs = vec![
            rec("a", 0, vec![0.5, 0.5]),
            rec("a", 1, vec![0.5, 0.5]),
            rec("a", 2, vec![0.5, 0.5]),
        ];
        let score = pathway_consistency(&m, &recs).unwrap();
        let score = score.as_defined().unwrap();
        assert!(score.c_i.abs() < 1e-6, "c_i = {}", score.c_i);
        assert_eq!(score.c_i + score.raw_smoothness, 1.0);
        assert_eq!(score.cosines.len(), 2);
    }

    #[test]
    fn two_layer_degeneracy_gives_near_zero_c_i() {
        // Any positive cosine c yields the single term c/(c+eps) ≈ 1.
        let m = with_routers(
            model(2, 2, 2, 6),
            vec![
                array![[1.0, 0.0], [0.0, 1.0]],
                array![[0.6, 0.8], [0.6, 0.8]],
            ],
        );
        let recs = vec![rec("a", 0, vec![1.0, 0.0]), rec("a", 1, vec![0.3, 0.7])];
        let score = pathway_consistency(&m, &recs).unwrap();
        let score = score.as_defined().unwrap();
        assert!(score.c_i.abs() < 1e-6);
    }

    #[test]
    fn orthogonal_consecutive_embeddings_give_c_i_one() {
        let m = with_routers(
            model(3, 2, 2, 7),
            vec![
                array![[1.0, 0.0], [1.0, 0.0]],
                array![[0.0, 1.0], [0.0, 1.0]],
                array![[1.0, 0.0], [1.0, 0.0]],
            ],
        );
        let recs = vec![
            rec("a", 0, vec![0.5, 0.5]),
            rec("a", 1, vec![0.5, 0.5]),
            rec("a", 2, vec![0.5, 0.5]),
        ];
        let score = pathway_consistency(&m, &recs).unwrap();
        let score = score.as_defined().unwrap();
        // Each term is 0/(0 + eps) = 0, so c_i = 1 exactly.
        assert_eq!(score.c_i, 1.0);
        assert_eq!(score.cosines, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_norm_embedding_is_flagged_undefined() {
        let m = with_routers(
            model(2, 2, 2, 8),
            vec![
                array![[1.0, 0.0], [-1.0, 0.0]],
                array![[1.0, 0.0], [0.0, 1.0]],
            ],
        );
        let recs = vec![rec("a", 0, vec![0.5, 0.5]), rec("a", 1, vec![0.5, 0.5])];
        match pathway_consistency(&m, &recs).unwrap() {
            SampleConsistency::Undefined {
                reason: UndefinedReason::ZeroNormEmbedding { layer: 0 },
                ..
            } => {}
            other => panic!("expected zero-norm flag, got {other:?}"),
        }
    }

    #[test]
    fn single_layer_is_undefined() {
        let m = model(1, 2, 2, 9);
        let recs = vec![rec("a", 0, vec![0.5, 0.5])];
        match pathway_consistency(&m, &recs).unwrap() {
            SampleConsistency::Undefined {
                reason: UndefinedReason::SingleLayer,
                ..
            } => {}
            other => panic!("expected single-layer undefined, got {other:?}"),
        }
    }

    #[test]
    fn negative_max_cosine_sets_degeneracy_flag() {
        let m = with_routers(
            model(2, 2, 2, 10),
            vec![
                array![[1.0, 0.0], [1.0, 0.0]],
                array![[-1.0, 0.0], [-1.0, 0.0]],
            ],
        );
        let recs = vec![rec("a", 0, vec![0.5, 0.5]), rec("a", 1, vec![0.5, 0.5])];
        let score = pathway_consistency(&m, &recs).unwrap();
        let score = score.as_defined().unwrap();
        assert_eq!(score.degenerate, Some(DegeneracyFlag::NegativeMaxCosine));
    }

    #[test]
    fn scale_invariance_of_c_i() {
        let base = model(3, 4, 5, 11);
        let recs = vec![
            rec("a", 0, vec![0.4, 0.3, 0.2, 0.1]),
            rec("a", 1, vec![0.25, 0.25, 0.25, 0.25]),
            rec("a", 2, vec![0.7, 0.1, 0.1, 0.1]),
        ];
        let before = pathway_consistency(&base, &recs).unwrap();
        let mut scaled = base.clone();
        for l in 0..3 {
            let r = scaled.router(l).unwrap().to_owned() * 3.5;
            scaled.set_router_for_test(l, r);
        }
        let after = pathway_consistency(&scaled, &recs).unwrap();
        let (b, a) = (before.as_defined().unwrap(), after.as_defined().unwrap());
        assert_abs_diff_eq!(b.c_i, a.c_i, epsilon = 1e-12);
    }

    #[test]
    fn embedding_stays_in_convex_hull() {
        // Support-function check along random directions.
        let m = model(1, 5, 6, 12);
        let mut rng = crate::testutil::rng(13);
        let rows = m.router(0).unwrap().to_owned();
        for _ in 0..50 {
            let raw: Vec<f64> = crate::testutil::random_vec(&mut rng, 5);
            let pos: Vec<f64> = raw.iter().map(|v| v.abs() + 1e-3).collect();
            let total: f64 = pos.iter().sum();
            let gates: Vec<f64> = pos.iter().map(|v| v / total).collect();
            let e = routing_embedding(&m, 0, &gates).unwrap();
            let dir = Array1::from_vec(crate::testutil::random_vec::<f64>(&mut rng, 6));
            let proj = e.vector.dot(&dir);
            let max_row = (0..5)
                .map(|k| rows.row(k).dot(&dir))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(proj <= max_row + 1e-10);
        }
    }

    #[test]
    fn group_consistency_aggregates_and_counts() {
        let m = model(3, 3, 4, 14);
        let sample = |id: &str| {
            vec![
                rec(id, 0, vec![0.5, 0.3, 0.2]),
                rec(id, 1, vec![0.2, 0.5, 0.3]),
                rec(id, 2, vec![0.3, 0.3, 0.4]),
            ]
        };
        let single = group_consistency(&m, &[sample("a")]).unwrap();
        assert_eq!(single.std_c_i, 0.0);
        assert_eq!(single.defined, 1);

        let dup = group_consistency(&m, &[sample("a"), sample("a")]).unwrap();
        assert_eq!(dup.mean_c_i, single.mean_c_i);
        assert_eq!(dup.std_c_i, 0.0);

        // Matches an external per-sample recomputation.
        let scores: Vec<f64> = ["a", "b"]
            .iter()
            .map(|id| {
                pathway_consistency(&m, &sample(id))
                    .unwrap()
                    .as_defined()
                    .unwrap()
                    .c_i
            })
            .collect();
        let want = scores.iter().sum::<f64>() / 2.0;
        let got = group_consistency(&m, &[sample("a"), sample("b")]).unwrap();
        assert_abs_diff_eq!(got.mean_c_i, want, epsilon = 1e-15);
    }
}
