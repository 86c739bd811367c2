//! Group pairing: similarity matrices over embedded groups and the optimal
//! one-to-one assignment between training and test groups.
//!
//! The assignment maximizes total similarity over injective matchings of
//! `min(rows, cols)` pairs, with ties broken toward the lexicographically
//! smallest pair list. Embeddings are an injection point: any externally
//! computed vectors can be supplied; the deterministic synthetic embedder
//! below stands in when none are.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A group of unit-normalized embedding vectors keyed by its detection step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedGroup<T> {
    pub key: u64,
    pub embeddings: Vec<Array1<T>>,
}

impl<T: Real> EmbeddedGroup<T> {
    /// Normalizes every vector to unit length; rejects empty groups, mixed
    /// dimensions, and zero vectors.
    pub fn new(key: u64, vectors: Vec<Array1<T>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::EmptyInput("embedded group"));
        }
        let dim = vectors[0].len();
        let mut embeddings = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                    context: "group embedding dimension",
                });
            }
            let norm = v.dot(&v).sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    context: "embedding vector norm",
                });
            }
            embeddings.push(v / norm);
        }
        Ok(Self { key, embeddings })
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

/// Similarity matrix: entry `(a, b)` is the mean cosine similarity over all
/// cross pairs between train group `a` and test group `b`.
pub fn group_similarity<T: Real>(
    train: &[EmbeddedGroup<T>],
    test: &[EmbeddedGroup<T>],
) -> Result<Array2<T>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyInput("groups for similarity matrix"));
    }
    let dim = train[0].dim();
    for g in train.iter().chain(test) {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: g.dim(),
                context: "group embedding dimension",
            });
        }
    }
    let mut matrix = Array2::zeros((train.len(), test.len()));
    for (a, ga) in train.iter().enumerate() {
        for (b, gb) in test.iter().enumerate() {
            let mut sum = T::zero();
            for va in &ga.embeddings {
                for vb in &gb.embeddings {
                    sum += va.dot(vb);
                }
            }
            let pairs = T::of((ga.embeddings.len() * gb.embeddings.len()) as f64);
            matrix[[a, b]] = sum / pairs;
        }
    }
    Ok(matrix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    /// (row, column) pairs in ascending row order.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the similarity entries at the assigned cells.
    pub total: T,
}

/// Optimal value of the maximum-similarity assignment on `matrix`,
/// restricted to the given row/column subsets.
fn assignment_value<T: Real>(matrix: &Array2<T>, rows: &[usize], cols: &[usize]) -> T {
    let k = rows.len().min(cols.len());
    if k == 0 {
        return T::zero();
    }
    // Square minimization problem: negate and pad with zeros (padding adds a
    // constant count of dummy cells to every complete assignment, so the
    // real-cell optimum is unaffected).
    let dim = rows.len().max(cols.len());
    let mut cost = vec![vec![T::zero(); dim]; dim];
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            cost[i][j] = -matrix[[r, c]];
        }
    }
    let assigned = hungarian_min(&cost);
    let mut total = T::zero();
    for (i, &r) in rows.iter().enumerate() {
        let j = assigned[i];
        if j < cols.len() {
            total += matrix[[r, cols[j]]];
        }
    }
    total
}

/// O(n³) Hungarian algorithm (potentials + shortest augmenting paths) for a
/// square minimization problem; returns the column assigned to each row.
fn hungarian_min<T: Real>(cost: &[Vec<T>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; p[j] = row matched to column j (0 = none).
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![T::infinity(); n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = T::infinity();
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Maximum-total-similarity one-to-one assignment of `min(rows, cols)` pairs.
///
/// Among equal-total optima the lexicographically smallest pair list wins:
/// rows are fixed in ascending order, each taking the smallest column that
/// still admits an optimal completion.
pub fn hungarian_match<T: Real>(similarity: &Array2<T>) -> Result<Assignment<T>> {
    let (rows, cols) = (similarity.nrows(), similarity.ncols());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("similarity matrix"));
    }
    if similarity.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "similarity matrix",
        });
    }
    let budget = rows.min(cols);
    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let optimum = assignment_value(similarity, &all_rows, &all_cols);
    let tol = T::of(1e-9) * (T::one() + optimum.abs());

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(budget);
    let mut fixed_total = T::zero();
    let mut free_rows = all_rows;
    let mut free_cols = all_cols;
    for r in 0..rows {
        if pairs.len() == budget {
            break;
        }
        let Some(row_pos) = free_rows.iter().position(|&x| x == r) else {
            continue;
        };
        let mut chosen = None;
        for (col_pos, &c) in free_cols.iter().enumerate() {
            let mut rem_rows = free_rows.clone();
            rem_rows.remove(row_pos);
            let mut rem_cols = free_cols.clone();
            rem_cols.remove(col_pos);
            let value =
                fixed_total + similarity[[r, c]] + assignment_value(similarity, &rem_rows, &rem_cols);
            if (optimum - value).abs() <= tol {
                chosen = Some((col_pos, c));
                break;
            }
        }
        if let Some((col_pos, c)) = chosen {
            pairs.push((r, c));
            fixed_total += similarity[[r, c]];
            free_rows.remove(row_pos);
            free_cols.remove(col_pos);
        } else {
            // No optimal completion uses this row (possible when rows > cols).
            free_rows.remove(row_pos);
        }
    }

    // Report the total as a plain ascending-row sum over the chosen cells.
    let mut total = T::zero();
    for &(r, c) in &pairs {
        total += similarity[[r, c]];
    }
    Ok(Assignment { pairs, total })
}

/// Embedding dimension of the synthetic embedder.
pub const SYNTHETIC_EMBED_DIM: usize = 32;
const SYNTHETIC_EMBED_SEED: u64 = 0x656d_6265_6464;

/// Deterministic stand-in for an external sentence embedder: a fixed random
/// projection of the feature vector, normalized to unit length. The
/// projection depends only on (input dim, embed dim), so identical inputs
/// always map to identical vectors, and nearby inputs (same synthetic
/// cluster) stay nearby.
pub fn synthetic_embedder<T: Real>(features: &[T], embed_dim: usize) -> Array1<T> {
    let d = features.len();
    let seed = SYNTHETIC_EMBED_SEED
        ^ (d as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (embed_dim as u64).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array1::zeros(embed_dim);
    for j in 0..embed_dim {
        let mut acc = T::zero();
        for f in features {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += *f * T::of(z);
        }
        out[j] = acc;
    }
    let norm = out.dot(&out).sqrt();
    if norm > T::zero() {
        out.mapv_inplace(|v| v / norm);
    } else {
        out[0] = T::one();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn unit<T: Real>(v: Vec<T>) -> Array1<T> {
        let a = Array1::from_vec(v);
        let n = a.dot(&a).sqrt();
        a / n
    }

    /// Exhaustive max-assignment oracle: enumerate every injective map of
    /// `min(r, c)` rows into columns (and which rows participate when r > c).
    fn brute_force(matrix: &Array2<f64>) -> f64 {
        fn go(
            matrix: &Array2<f64>,
            next_row: usize,
            remaining: usize,
            used_cols: &mut [bool],
            acc: f64,
            best: &mut f64,
        ) {
            if remaining == 0 {
                if acc > *best {
                    *best = acc;
                }
                return;
            }
            if matrix.nrows() - next_row < remaining {
                return;
            }
            // Skip this row entirely (legal when rows outnumber columns).
            go(matrix, next_row + 1, remaining, used_cols, acc, best);
            for col in 0..matrix.ncols() {
                if !used_cols[col] {
                    used_cols[col] = true;
                    go(
                        matrix,
                        next_row + 1,
                        remaining - 1,
                        used_cols,
                        acc + matrix[[next_row, col]],
                        best,
                    );
                    used_cols[col] = false;
                }
            }
        }
        let k = matrix.nrows().min(matrix.ncols());
        let mut best = f64::NEG_INFINITY;
        let mut used = vec![false; matrix.ncols()];
        go(matrix, 0, k, &mut used, 0.0, &mut best);
        best
    }

    #[test]
    fn trivial_one_by_one() {
        let a = hungarian_match(&array![[0.5_f64]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total, 0.5);
    }

    #[test]
    fn two_by_two_antidiagonal() {
        let a = hungarian_match(&array![[1.0_f64, 2.0], [2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total, 4.0);
    }

    #[test]
    fn lexicographic_tie_break_on_constant_matrix() {
        let a = hungarian_match(&Array2::from_elem((3, 3), 1.0_f64)).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = crate::testutil::rng(23);
        for _ in 0..500 {
            let r = rng.random_range(1..=5usize);
            let c = rng.random_range(1..=5usize);
            let m = Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
            let got = hungarian_match(&m).unwrap();
            let want = brute_force(&m);
            assert_abs_diff_eq!(got.total, want, epsilon = 1e-9);
            assert_eq!(got.pairs.len(), r.min(c));
            // Injectivity both ways.
            let mut rows: Vec<_> = got.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = got.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(rows.len(), got.pairs.len());
            assert_eq!(cols.len(), got.pairs.len());
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = crate::testutil::rng(24);
        let m = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..1.0));
        let base = hungarian_match(&m).unwrap();
        // Swap rows 0 and 2: the assignment permutes identically.
        let mut swapped = m.clone();
        for j in 0..4 {
            swapped[[0, j]] = m[[2, j]];
            swapped[[2, j]] = m[[0, j]];
        }
        let perm = hungarian_match(&swapped).unwrap();
        let remap = |r: usize| match r {
            0 => 2,
            2 => 0,
            other => other,
        };
        let mut expected: Vec<(usize, usize)> =
            base.pairs.iter().map(|&(r, c)| (remap(r), c)).collect();
        expected.sort_unstable();
        assert_eq!(perm.pairs, expected);
        assert_abs_diff_eq!(perm.total, base.total, epsilon = 1e-12);
    }

    #[test]
    fn similarity_entries_and_oracle() {
        let g = |key, vs: Vec<Array1<f64>>| EmbeddedGroup::new(key, vs).unwrap();
        let e1 = unit(vec![1.0, 0.0, 0.0]);
        let e2 = unit(vec![0.0, 1.0, 0.0]);
        let train = vec![g(10, vec![e1.clone()])];
        let test_same = vec![g(20, vec![e1.clone()]), g(30, vec![e2.clone()])];
        let sim = group_similarity(&train, &test_same).unwrap();
        assert_abs_diff_eq!(sim[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sim[[0, 1]], 0.0, epsilon = 1e-12);

        // Random groups against a brute-force double loop.
        let mut rng = crate::testutil::rng(25);
        let rand_group = |key: u64, n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let vs: Vec<Array1<f64>> = (0..n)
                .map(|_| unit(crate::testutil::random_vec(rng, 4)))
                .collect();
            EmbeddedGroup::new(key, vs).unwrap()
        };
        let tr = vec![rand_group(1, 3, &mut rng), rand_group(2, 2, &mut rng)];
        let te = vec![rand_group(3, 4, &mut rng)];
        let sim = group_similarity(&tr, &te).unwrap();
        for (a, ga) in tr.iter().enumerate() {
            let mut acc = 0.0;
            for va in &ga.embeddings {
                for vb in &te[0].embeddings {
                    acc += va.dot(vb);
                }
            }
            let want = acc / (ga.embeddings.len() * te[0].embeddings.len()) as f64;
            assert_abs_diff_eq!(sim[[a, 0]], want, epsilon = 1e-9);
            assert!(sim[[a, 0] ] >= -1.0 - 1e-12 && sim[[a, 0]] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn group_construction_normalizes_and_validates() {
        let g = EmbeddedGroup::new(5, vec![Array1::from_vec(vec![3.0_f64, 4.0])]).unwrap();
        let n = g.embeddings[0].dot(&g.embeddings[0]).sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
        assert!(EmbeddedGroup::<f64>::new(5, vec![]).is_err());
        assert!(EmbeddedGroup::new(5, vec![Array1::from_vec(vec![0.0_f64, 0.0])]).is_err());
    }

    #[test]
    fn synthetic_embedder_is_deterministic_unit_and_cluster_aware() {
        let x = vec![0.5_f64, -1.0, 2.0, 0.25];
        let a = synthetic_embedder(&x, SYNTHETIC_EMBED_DIM);
        let b = synthetic_embedder(&x, SYNTHETIC_EMBED_DIM);
        assert_eq!(a, b);
        assert_abs_diff_eq!(a.dot(&a).sqrt(), 1.0, epsilon = 1e-9);

        // Same-cluster similarity beats cross-cluster on generated data.
        let ds = crate::data::Dataset::<f64>::generate(&crate::data::ClusterDataConfig {
            num_clusters: 4,
            dim: 20,
            samples_per_cluster: 10,
            seed: 3,
            ..crate::data::ClusterDataConfig::default()
        })
        .unwrap();
        let emb: Vec<(usize, Array1<f64>)> = ds
            .samples
            .iter()
            .map(|s| {
                (
                    s.cluster,
                    synthetic_embedder(s.features.as_slice().unwrap(), SYNTHETIC_EMBED_DIM),
                )
            })
            .collect();
        let mut same = (0.0, 0usize);
        let mut cross = (0.0, 0usize);
        for i in 0..emb.len() {
            for j in (i + 1)..emb.len() {
                let cos = emb[i].1.dot(&emb[j].1);
                if emb[i].0 == emb[j].0 {
                    same = (same.0 + cos, same.1 + 1);
                } else {
                    cross = (cross.0 + cos, cross.1 + 1);
                }
            }
        }
        assert!(same.0 / same.1 as f64 > cross.0 / cross.1 as f64);
    }
}
