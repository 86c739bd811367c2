//! Router-seed study: how routing diversity relates to kernel complexity.
//!
//! Each trial freezes a freshly initialized router over a fixed clustered
//! dataset, extracts the training inputs' pathways, and computes (a) their
//! mean pairwise edit distance and (b) the effective dimension of the
//! empirical routing-kernel Gram at initialization. The result is the
//! cross-seed correlation between the two, with per-seed rows for plotting.
//!
//! No expert training is involved: with a frozen router both quantities are
//! fixed at initialization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ClusterDataConfig, Dataset};
use crate::error::{Error, Result};
use crate::kernel::{effective_dimension, expert_gram, routing_gram};
use crate::moe::{ExpertKind, MoEConfig, MoEModel, RoutingRecord};
use crate::pathway::{default_pair_policy, extract_pathway, mean_pairwise_distance};
use crate::stats::pearson;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStudyConfig {
    pub num_experts: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_clusters: usize,
    /// Total sample count; split into train/validation by `train_fraction`.
    pub num_samples: usize,
    pub train_fraction: f64,
    /// Cumulative routing-weight threshold for pathway extraction.
    pub tau: f64,
    /// Regularization as a fraction of the Gram's mean diagonal.
    pub lambda_ratio: f64,
    pub num_seeds: usize,
    pub base_router_seed: u64,
    pub data_seed: u64,
}

impl Default for SeedStudyConfig {
    fn default() -> Self {
        Self {
            num_experts: 16,
            input_dim: 100,
            hidden_dim: 16,
            num_clusters: 8,
            num_samples: 200,
            train_fraction: 0.5,
            tau: crate::pathway::DEFAULT_TAU,
            lambda_ratio: 0.01,
            num_seeds: 30,
            base_router_seed: 1,
            data_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStudyRow {
    pub seed: u64,
    pub mean_edit_distance: f64,
    pub effective_dimension: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStudyResult {
    pub rows: Vec<SeedStudyRow>,
    /// Min-max normalized (distance, dimension) per row, for plotting on a
    /// common scale alongside the raw values.
    pub normalized: Vec<(f64, f64)>,
    pub pearson_r: f64,
    pub p_value: f64,
    pub n_seeds: usize,
}

/// Minimum number of seeds for the cross-seed correlation to mean anything.
pub const MIN_STUDY_SEEDS: usize = 10;

pub fn run_seed_study(cfg: &SeedStudyConfig) -> Result<SeedStudyResult> {
    if cfg.num_seeds < MIN_STUDY_SEEDS {
        return Err(Error::TooFew {
            needed: MIN_STUDY_SEEDS,
            got: cfg.num_seeds,
            what: "router seeds for the study",
        });
    }
    if cfg.num_clusters == 0 || cfg.num_samples < cfg.num_clusters {
        return Err(Error::InvalidConfig(
            "study needs at least one sample per cluster".into(),
        ));
    }

    // One dataset shared by every trial, so all cross-seed variation comes
    // from the router initialization.
    let data = Dataset::<f64>::generate(&ClusterDataConfig {
        num_clusters: cfg.num_clusters,
        dim: cfg.input_dim,
        samples_per_cluster: cfg.num_samples / cfg.num_clusters,
        seed: cfg.data_seed,
        ..ClusterDataConfig::default()
    })?;
    let (train, _validation) = data.split(cfg.train_fraction)?;
    if train.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: train.len(),
            what: "training samples",
        });
    }

    let mut rows = Vec::with_capacity(cfg.num_seeds);
    for i in 0..cfg.num_seeds {
        let seed = cfg.base_router_seed + i as u64;
        rows.push(run_trial(cfg, &train, seed)?);
    }

    let dist: Vec<f64> = rows.iter().map(|r| r.mean_edit_distance).collect();
    let dim: Vec<f64> = rows.iter().map(|r| r.effective_dimension).collect();
    let corr = pearson(&dist, &dim)?;
    let normalized = min_max_pairs(&dist, &dim);

    Ok(SeedStudyResult {
        rows,
        normalized,
        pearson_r: corr.r,
        p_value: corr.p,
        n_seeds: cfg.num_seeds,
    })
}

fn run_trial(
    cfg: &SeedStudyConfig,
    train: &crate::data::LabeledSet<f64>,
    seed: u64,
) -> Result<SeedStudyRow> {
    let model = MoEModel::<f64>::init(MoEConfig {
        num_experts: cfg.num_experts,
        input_dim: cfg.input_dim,
        hidden_dim: cfg.hidden_dim,
        num_layers: 1,
        expert_kind: ExpertKind::TwoLayerRelu,
        router_frozen: true,
        seed,
    })?;

    let n = train.len();
    let mut gates = Array2::zeros((n, cfg.num_experts));
    let mut pathways = Vec::with_capacity(n);
    let mut per_expert: Vec<Array2<f64>> = Vec::new();
    for i in 0..n {
        let x = train.inputs.row(i);
        let g = model.gates_at_init(x)?.remove(0);
        let record = RoutingRecord::new(train.ids[i].clone(), 0, g.clone())?;
        pathways.push(extract_pathway(&[record], cfg.tau)?);
        for (k, v) in g.iter().enumerate() {
            gates[[i, k]] = *v;
        }
        let blocks = model.expert_grad_features(x)?;
        if per_expert.is_empty() {
            per_expert = blocks
                .iter()
                .map(|b| Array2::zeros((n, b.len())))
                .collect();
        }
        for (k, b) in blocks.into_iter().enumerate() {
            per_expert[k].row_mut(i).assign(&b);
        }
    }

    let distance = mean_pairwise_distance(&pathways, default_pair_policy(n))?;

    let kernels: Vec<Array2<f64>> = per_expert.iter().map(|f| expert_gram(f.view())).collect();
    // Lambda proportional to the Gram's mean diagonal keeps the effective
    // dimension scale-free across trials.
    let mut trace = 0.0;
    for (k, gk) in kernels.iter().enumerate() {
        for i in 0..n {
            trace += gates[[i, k]] * gates[[i, k]] * gk[[i, i]];
        }
    }
    let lambda = (cfg.lambda_ratio * trace / n as f64).max(f64::MIN_POSITIVE);
    let gram = routing_gram(gates.view(), &kernels, lambda)?;
    let d_eff = effective_dimension(&gram)?;

    Ok(SeedStudyRow {
        seed,
        mean_edit_distance: distance.mean,
        effective_dimension: d_eff,
    })
}

fn min_max_pairs(a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    let norm = |v: &[f64]| -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        v.iter()
            .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
            .collect()
    };
    norm(a).into_iter().zip(norm(b)).collect()
}

/// Per-seed rows plus the summary line, as written by the study subcommand.
pub fn render_study(result: &SeedStudyResult) -> String {
    let mut out = String::from(
        "seed,mean_edit_distance,effective_dimension,normalized_distance,normalized_dimension\n",
    );
    for (row, (nd, ne)) in result.rows.iter().zip(&result.normalized) {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.seed,
            crate::io::fmt_float(row.mean_edit_distance),
            crate::io::fmt_float(row.effective_dimension),
            crate::io::fmt_float(*nd),
            crate::io::fmt_float(*ne),
        ));
    }
    out.push_str(&format!(
        "# summary r={} p={} n_seeds={}\n",
        crate::io::fmt_float(result.pearson_r),
        crate::io::fmt_float(result.p_value),
        result.n_seeds
    ));
    out
}
