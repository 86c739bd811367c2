//! Routing pathways and their edit-distance statistics.
//!
//! A pathway is, per layer, the ordered list of experts that cover a
//! cumulative routing-weight threshold. Distances are Levenshtein over
//! *tokens* (expert indices plus a layer separator), not over characters:
//! character-level distance would weight multi-digit expert indices
//! inconsistently, and the separator token makes cross-layer misalignment
//! cost something.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::moe::RoutingRecord;
use crate::scalar::Real;
use crate::SampleId;

/// Default cumulative routing-weight threshold.
pub const DEFAULT_TAU: f64 = 0.7;
/// All-pairs budget before distance statistics switch to sampled pairs.
pub const DEFAULT_PAIR_BUDGET: usize = 20_000;
pub const DEFAULT_PAIR_SEED: u64 = 0x70617277;

#[derive(Debug, Clone, PartialEq)]
pub struct Pathway {
    pub sample_id: SampleId,
    /// Selected expert indices per layer, descending routing weight.
    pub layers: Vec<Vec<usize>>,
    /// Cumulative-weight threshold the pathway was extracted with.
    pub threshold: f64,
}

/// Select, per layer, the shortest weight-descending expert prefix whose
/// cumulative routing weight reaches `tau`. Ties break toward the lower
/// expert index. Records must cover layers `0..L` exactly once each.
pub fn extract_pathway<T: Real>(records: &[RoutingRecord<T>], tau: f64) -> Result<Pathway> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::ThresholdOutOfRange {
            value: tau,
            range: "(0, 1]",
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("routing records for pathway extraction"));
    }
    let num_layers = records.len();
    let mut by_layer: Vec<Option<&RoutingRecord<T>>> = vec![None; num_layers];
    for rec in records {
        rec.validate()?;
        if rec.sample_id != records[0].sample_id {
            return Err(Error::InvalidConfig(
                "pathway extraction mixes records from different samples".into(),
            ));
        }
        let slot = by_layer.get_mut(rec.layer).ok_or(Error::LayerOutOfRange {
            layer: rec.layer,
            num_layers,
        })?;
        if slot.is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate routing record for layer {}",
                rec.layer
            )));
        }
        *slot = Some(rec);
    }

    let tau_t = T::of(tau);
    let mut layers = Vec::with_capacity(num_layers);
    for (layer, slot) in by_layer.iter().enumerate() {
        let rec = slot.ok_or(Error::InvalidConfig(format!("missing routing record for layer {layer}")))?;
        let mut order: Vec<usize> = (0..rec.weights.len()).collect();
        order.sort_by(|&a, &b| {
            rec.weights[b]
                .partial_cmp(&rec.weights[a])
                .expect("finite weights")
                .then(a.cmp(&b))
        });
        let mut selected = Vec::new();
        let mut cumulative = T::zero();
        for &k in &order {
            if rec.weights[k] <= T::zero() {
                break; // zero-weight experts never join the cover
            }
            selected.push(k);
            cumulative += rec.weights[k];
            if cumulative >= tau_t {
                break;
            }
        }
        layers.push(selected);
    }
    Ok(Pathway {
        sample_id: records[0].sample_id.clone(),
        layers,
        threshold: tau,
    })
}

/// Canonical string form: expert indices comma-joined within a layer,
/// layers hyphen-joined (e.g. `3,1,5-9,1`).
pub fn encode_pathway(pathway: &Pathway) -> String {
    pathway
        .layers
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join("-")
}

/// Inverse of [`encode_pathway`] on the layer structure.
pub fn decode_pathway(encoded: &str) -> Result<Vec<Vec<usize>>> {
    encoded
        .split('-')
        .map(|layer| {
            if layer.is_empty() {
                return Ok(Vec::new());
            }
            layer
                .split(',')
                .map(|tok| {
                    tok.parse::<usize>().map_err(|e| Error::Parse {
                        line: 0,
                        message: format!("bad expert index '{tok}': {e}"),
                    })
                })
                .collect()
        })
        .collect()
}

/// Pathway token alphabet: expert indices and the layer separator are both
/// atomic symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathToken {
    Expert(usize),
    LayerSep,
}

pub fn pathway_tokens(pathway: &Pathway) -> Vec<PathToken> {
    let mut tokens = Vec::new();
    for (i, layer) in pathway.layers.iter().enumerate() {
        if i > 0 {
            tokens.push(PathToken::LayerSep);
        }
        tokens.extend(layer.iter().map(|&k| PathToken::Expert(k)));
    }
    tokens
}

/// Levenshtein distance over arbitrary token slices (two-row DP).
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> u64 {
    if a.is_empty() {
        return b.len() as u64;
    }
    if b.is_empty() {
        return a.len() as u64;
    }
    let mut row: Vec<u64> = (0..=b.len() as u64).collect();
    for (i, ta) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i as u64 + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = diag + u64::from(ta != tb);
            diag = row[j + 1];
            row[j + 1] = sub.min(diag + 1).min(row[j] + 1);
        }
    }
    row[b.len()]
}

/// Token-level edit distance between two pathways extracted with the same
/// threshold. Distances across thresholds are not comparable and are refused.
pub fn edit_distance(p1: &Pathway, p2: &Pathway) -> Result<u64> {
    if p1.threshold != p2.threshold {
        return Err(Error::MismatchedThreshold {
            left: p1.threshold,
            right: p2.threshold,
        });
    }
    Ok(levenshtein(&pathway_tokens(p1), &pathway_tokens(p2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    AllPairs,
    /// Uniform pairs (i ≠ j) with replacement from a fixed seed.
    Sampled { pairs: usize, seed: u64 },
}

/// All pairs while they fit the budget, sampled beyond it.
pub fn default_pair_policy(n: usize) -> PairPolicy {
    let all = n.saturating_mul(n.saturating_sub(1)) / 2;
    if all <= DEFAULT_PAIR_BUDGET {
        PairPolicy::AllPairs
    } else {
        PairPolicy::Sampled {
            pairs: DEFAULT_PAIR_BUDGET,
            seed: DEFAULT_PAIR_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwayDistanceStat {
    pub mean: f64,
    pub std: f64,
    pub pairs: u64,
    pub policy: String,
    /// `None` for full pathways, `Some(ℓ)` for a single-layer restriction.
    pub layer: Option<usize>,
}

/// Mean and population standard deviation of pairwise pathway distance.
pub fn mean_pairwise_distance(paths: &[Pathway], policy: PairPolicy) -> Result<PathwayDistanceStat> {
    pairwise_stat(paths, policy, None)
}

/// As [`mean_pairwise_distance`], restricted to the layer-`layer` expert lists.
pub fn layerwise_distance(
    paths: &[Pathway],
    layer: usize,
    policy: PairPolicy,
) -> Result<PathwayDistanceStat> {
    for p in paths {
        if layer >= p.layers.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                num_layers: p.layers.len(),
            });
        }
    }
    pairwise_stat(paths, policy, Some(layer))
}

fn pairwise_stat(
    paths: &[Pathway],
    policy: PairPolicy,
    layer: Option<usize>,
) -> Result<PathwayDistanceStat> {
    if paths.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: paths.len(),
            what: "pathways for pairwise distance",
        });
    }
    let tau = paths[0].threshold;
    if let Some(p) = paths.iter().find(|p| p.threshold != tau) {
        return Err(Error::MismatchedThreshold {
            left: tau,
            right: p.threshold,
        });
    }
    let tokens: Vec<Vec<PathToken>> = match layer {
        None => paths.iter().map(pathway_tokens).collect(),
        Some(l) => paths
            .iter()
            .map(|p| p.layers[l].iter().map(|&k| PathToken::Expert(k)).collect())
            .collect(),
    };

    let mut sum = 0u128;
    let mut sum_sq = 0u128;
    let mut count = 0u64;
    let mut tally = |d: u64| {
        sum += d as u128;
        sum_sq += (d as u128) * (d as u128);
        count += 1;
    };
    let policy_label = match policy {
        PairPolicy::AllPairs => {
            for i in 0..tokens.len() {
                for j in (i + 1)..tokens.len() {
                    tally(levenshtein(&tokens[i], &tokens[j]));
                }
            }
            "all-pairs".to_string()
        }
        PairPolicy::Sampled { pairs, seed } => {
            if pairs == 0 {
                return Err(Error::TooFew {
                    needed: 1,
                    got: 0,
                    what: "sampled pairs",
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = tokens.len();
            for _ in 0..pairs {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                tally(levenshtein(&tokens[i], &tokens[j]));
            }
            format!("sampled({pairs},seed={seed})")
        }
    };

    let mean = sum as f64 / count as f64;
    let var = (sum_sq as f64 / count as f64 - mean * mean).max(0.0);
    Ok(PathwayDistanceStat {
        mean,
        std: var.sqrt(),
        pairs: count,
        policy: policy_label,
        layer,
    })
}

/// Mean over layers of the Shannon entropy of the full routing-weight
/// vector (natural log, `0·ln 0 := 0`). No thresholding is applied.
pub fn routing_entropy<T: Real>(records: &[RoutingRecord<T>]) -> Result<T> {
    if records.is_empty() {
        return Err(Error::EmptyInput("routing records for entropy"));
    }
    let mut total = T::zero();
    for rec in records {
        rec.validate()?;
        let mut h = T::zero();
        for &g in &rec.weights {
            if g > T::zero() {
                h = h - g * g.ln();
            }
        }
        total += h;
    }
    Ok(total / T::of(records.len() as f64))
}
