//! The bundled synthetic training run: a multi-layer toy MoE on clustered
//! regression data, with checkpointed losses, routing logs, held-out
//! accuracy, detection, grouping, per-group pathway trajectories,
//! correlation reports, and threshold-robustness checks.
//!
//! Everything is deterministic under the config's seeds; two runs emit
//! byte-identical bundles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consistency::{pathway_consistency, SampleConsistency};
use crate::data::{ClusterDataConfig, Dataset};
use crate::dynamics::{
    calibrate_epsilon, generalization_step, group_by_step, memorization_step, CheckpointSeries,
    DataGroup, EpsilonCalibration, Grouping, MemorizationThresholds, SeriesKind,
    DEFAULT_ACC_MEAN_MIN, DEFAULT_MAX_ERRORS,
};
use crate::error::{Error, Result};
use crate::io::DetectionRow;
use crate::moe::{
    ExpertKind, MoEConfig, MoEModel, ParamType, RoutingRecord, TrainHyper,
};
use crate::pairing::{group_similarity, hungarian_match, synthetic_embedder, EmbeddedGroup,
    SYNTHETIC_EMBED_DIM};
use crate::pathway::{
    extract_pathway, layerwise_distance, mean_pairwise_distance, default_pair_policy, Pathway,
    PathwayDistanceStat,
};
use crate::stats::{
    correlation_table, linear_slope, moving_average, polyfit, CorrelationReport, Direction,
    MetricSeries,
};
use crate::SampleId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub num_experts: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub model_seed: u64,
    pub num_clusters: usize,
    pub samples_per_cluster: usize,
    pub mean_radius: f64,
    pub cluster_std: f64,
    pub target_noise: f64,
    pub data_seed: u64,
    pub train_fraction: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub checkpoint_interval: usize,
    /// Cumulative routing-weight threshold for pathways.
    pub tau: f64,
    /// Stability threshold for memorization detection.
    pub delta: f64,
    /// Loss threshold; calibrated against the coverage band when absent.
    pub epsilon: Option<f64>,
    pub coverage_band: (f64, f64),
    pub grid_step: f64,
    /// A held-out prediction within this fraction of the label scale counts
    /// as correct.
    pub accuracy_margin: f64,
    /// Smallest memorization group eligible as the focus group.
    pub min_group_size: usize,
    pub moving_average_window: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            input_dim: 16,
            hidden_dim: 12,
            num_layers: 3,
            model_seed: 7,
            num_clusters: 6,
            samples_per_cluster: 30,
            mean_radius: 5.0,
            cluster_std: 1.0,
            target_noise: 0.02,
            data_seed: 11,
            train_fraction: 2.0 / 3.0,
            learning_rate: 0.05,
            steps: 2400,
            checkpoint_interval: 80,
            tau: crate::pathway::DEFAULT_TAU,
            delta: crate::dynamics::DEFAULT_DELTA,
            epsilon: None,
            coverage_band: crate::dynamics::DEFAULT_COVERAGE_BAND,
            grid_step: crate::dynamics::DEFAULT_GRID_STEP,
            accuracy_margin: 0.5,
            min_group_size: 5,
            moving_average_window: 3,
        }
    }
}

/// Raw per-checkpoint observations captured during training.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointLog {
    pub step: u64,
    pub train_losses: Vec<f64>,
    pub held_losses: Vec<f64>,
    /// 1.0 when the held-out prediction is within the accuracy margin.
    pub held_correct: Vec<f64>,
    /// Routing records per training sample (all layers).
    pub records: Vec<Vec<RoutingRecord<f64>>>,
    pub consistency: Vec<SampleConsistency<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauWindow {
    pub start_step: u64,
    pub end_step: u64,
    /// Relative fall in the focus group's mean edit distance over the window.
    pub distance_drop_fraction: f64,
    /// Largest relative deviation of the training objective within the window.
    pub loss_change_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusAnalysis {
    pub group_step: u64,
    pub member_count: usize,
    /// Checkpoints at or after the group's memorization step.
    pub post_steps: Vec<u64>,
    pub post_distance: Vec<f64>,
    pub post_smoothness: Vec<f64>,
    /// Adjacent decreases in the post-window smoothness sequence.
    pub smoothness_violations: usize,
    pub peak_distance: f64,
    pub final_distance: f64,
    /// Quadratic trend coefficients (ascending degree) over the post window.
    pub quadratic_fit: Vec<f64>,
    pub post_slope: f64,
    pub plateau: Option<PlateauWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub epsilon: f64,
    pub delta: f64,
    pub group_step: Option<u64>,
    pub slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    /// True when every grid combination produced a slope of identical sign.
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub train_step: u64,
    pub test_step: u64,
    pub similarity: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub config: DemoConfig,
    pub label_scale: f64,
    pub checkpoint_steps: Vec<u64>,
    pub domain_accuracy: Vec<f64>,
    pub train_objective: Vec<f64>,
    pub validation_objective: Vec<f64>,
    pub calibration: Option<EpsilonCalibration>,
    pub epsilon_used: f64,
    pub delta_used: f64,
    pub train_groups: Vec<DataGroup>,
    pub test_groups: Vec<DataGroup>,
    pub undetected_train: usize,
    pub undetected_test: usize,
    pub focus: FocusAnalysis,
    pub correlations: Vec<CorrelationReport>,
    pub robustness: RobustnessReport,
    pub pairing: Vec<PairLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRow {
    pub step: u64,
    pub group_step: u64,
    pub mean_c_i: f64,
    pub std_c_i: f64,
    pub mean_raw_smoothness: f64,
    pub defined: usize,
    pub degenerate: usize,
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRun {
    pub summary: DemoSummary,
    pub train_ids: Vec<SampleId>,
    pub held_ids: Vec<SampleId>,
    pub logs: Vec<CheckpointLog>,
    pub param_norms: Vec<(u64, ParamType, f64)>,
    pub train_series: Vec<CheckpointSeries<f64>>,
    pub held_loss_series: Vec<CheckpointSeries<f64>>,
    pub held_acc_series: Vec<CheckpointSeries<f64>>,
    pub detections: Vec<DetectionRow>,
    /// (checkpoint, group step, full-pathway stat) for every group with ≥ 2
    /// members.
    pub group_distance_rows: Vec<(u64, u64, PathwayDistanceStat)>,
    /// (checkpoint, group step, per-layer stat) for the focus group.
    pub layerwise_rows: Vec<(u64, u64, PathwayDistanceStat)>,
    pub smoothness_rows: Vec<SmoothnessRow>,
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoRun> {
    if cfg.num_layers < 2 {
        return Err(Error::InvalidConfig(
            "the demo needs a multi-layer model (num_layers ≥ 2)".into(),
        ));
    }
    if cfg.min_group_size < 2 {
        return Err(Error::InvalidConfig("min_group_size must be ≥ 2".into()));
    }

    let dataset = Dataset::<f64>::generate(&ClusterDataConfig {
        num_clusters: cfg.num_clusters,
        dim: cfg.input_dim,
        samples_per_cluster: cfg.samples_per_cluster,
        mean_radius: cfg.mean_radius,
        cluster_std: cfg.cluster_std,
        target_noise: cfg.target_noise,
        seed: cfg.data_seed,
    })?;
    let (train, held) = dataset.split(cfg.train_fraction)?;
    if held.is_empty() {
        return Err(Error::InvalidConfig(
            "train_fraction leaves no held-out samples".into(),
        ));
    }
    let label_scale = train.target_scale();
    let margin = cfg.accuracy_margin * label_scale;

    let mut model = MoEModel::<f64>::init(MoEConfig {
        num_experts: cfg.num_experts,
        input_dim: cfg.input_dim,
        hidden_dim: cfg.hidden_dim,
        num_layers: cfg.num_layers,
        expert_kind: ExpertKind::TwoLayerRelu,
        router_frozen: false,
        seed: cfg.model_seed,
    })?;

    let hyper = TrainHyper {
        learning_rate: cfg.learning_rate,
        steps: cfg.steps,
        ridge_lambda: None,
        checkpoint_interval: cfg.checkpoint_interval,
    };

    let mut logs: Vec<CheckpointLog> = Vec::new();
    let trace = model.train_with(&train, &hyper, |event| {
        let mut records = Vec::with_capacity(train.len());
        let mut consistency = Vec::with_capacity(train.len());
        for i in 0..train.len() {
            let out = event.model.forward(&train.ids[i], train.inputs.row(i))?;
            consistency.push(pathway_consistency(event.model, &out.records)?);
            records.push(out.records);
        }
        let mut held_losses = Vec::with_capacity(held.len());
        let mut held_correct = Vec::with_capacity(held.len());
        for i in 0..held.len() {
            let out = event.model.forward(&held.ids[i], held.inputs.row(i))?;
            let err = out.prediction - held.targets[i];
            held_losses.push(err * err);
            held_correct.push(if err.abs() <= margin { 1.0 } else { 0.0 });
        }
        logs.push(CheckpointLog {
            step: event.step,
            train_losses: event.per_sample_loss.to_vec(),
            held_losses,
            held_correct,
            records,
            consistency,
        });
        Ok(())
    })?;

    let checkpoint_steps = trace.steps.clone();
    let param_norms: Vec<(u64, ParamType, f64)> = trace
        .steps
        .iter()
        .zip(&trace.param_norms)
        .flat_map(|(step, norms)| norms.iter().map(|(ty, v)| (*step, *ty, *v)))
        .collect();

    // Per-sample series.
    let column = |rows: &dyn Fn(&CheckpointLog) -> f64| -> Vec<f64> {
        logs.iter().map(rows).collect()
    };
    let train_series: Vec<CheckpointSeries<f64>> = (0..train.len())
        .map(|i| {
            CheckpointSeries::new(
                train.ids[i].clone(),
                checkpoint_steps.clone(),
                column(&|log| log.train_losses[i]),
                SeriesKind::Loss,
            )
        })
        .collect::<Result<_>>()?;
    let held_loss_series: Vec<CheckpointSeries<f64>> = (0..held.len())
        .map(|i| {
            CheckpointSeries::new(
                held.ids[i].clone(),
                checkpoint_steps.clone(),
                column(&|log| log.held_losses[i]),
                SeriesKind::Loss,
            )
        })
        .collect::<Result<_>>()?;
    let held_acc_series: Vec<CheckpointSeries<f64>> = (0..held.len())
        .map(|i| {
            CheckpointSeries::new(
                held.ids[i].clone(),
                checkpoint_steps.clone(),
                column(&|log| log.held_correct[i]),
                SeriesKind::Accuracy,
            )
        })
        .collect::<Result<_>>()?;

    let mean_of = |f: &dyn Fn(&CheckpointLog) -> &Vec<f64>| -> Vec<f64> {
        logs.iter()
            .map(|log| {
                let v = f(log);
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    };
    let train_objective = mean_of(&|log| &log.train_losses);
    let validation_objective = mean_of(&|log| &log.held_losses);
    let domain_accuracy = mean_of(&|log| &log.held_correct);

    // Threshold calibration and detection.
    let (calibration, epsilon_used) = match cfg.epsilon {
        Some(eps) => (None, eps),
        None => {
            let cal = calibrate_epsilon(&train_series, cfg.delta, cfg.coverage_band, cfg.grid_step)?;
            let eps = cal.chosen.unwrap_or(cal.nearest);
            (Some(cal), eps)
        }
    };
    let thresholds = MemorizationThresholds::new(epsilon_used, cfg.delta)?;
    let train_detections: Vec<(SampleId, Option<u64>)> = train_series
        .iter()
        .map(|s| Ok((s.sample_id.clone(), memorization_step(s, &thresholds)?)))
        .collect::<Result<_>>()?;
    let test_detections: Vec<(SampleId, Option<u64>)> = held_acc_series
        .iter()
        .map(|s| {
            Ok((
                s.sample_id.clone(),
                generalization_step(s, DEFAULT_ACC_MEAN_MIN, DEFAULT_MAX_ERRORS)?,
            ))
        })
        .collect::<Result<_>>()?;
    let train_grouping = group_by_step(&train_detections);
    let test_grouping = group_by_step(&test_detections);

    let mut detections: Vec<DetectionRow> = train_detections
        .iter()
        .map(|(id, t)| DetectionRow {
            sample_id: id.clone(),
            t_star: *t,
            t_hash: None,
        })
        .collect();
    detections.extend(test_detections.iter().map(|(id, t)| DetectionRow {
        sample_id: id.clone(),
        t_star: None,
        t_hash: *t,
    }));

    // Pathways for every train sample at every checkpoint.
    let pathways: Vec<Vec<Pathway>> = logs
        .iter()
        .map(|log| {
            log.records
                .iter()
                .map(|records| extract_pathway(records, cfg.tau))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let index_of: BTreeMap<&SampleId, usize> = train
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let member_indices = |group: &DataGroup| -> Vec<usize> {
        group
            .members
            .iter()
            .map(|id| *index_of.get(id).expect("group members come from train ids"))
            .collect()
    };

    // Distance and smoothness trajectories per group.
    let mut group_distance_rows = Vec::new();
    let mut smoothness_rows = Vec::new();
    for group in &train_grouping.groups {
        let idx = member_indices(group);
        if idx.len() < 2 {
            continue;
        }
        for (c, log) in logs.iter().enumerate() {
            let member_paths: Vec<Pathway> =
                idx.iter().map(|&i| pathways[c][i].clone()).collect();
            let stat = mean_pairwise_distance(&member_paths, default_pair_policy(idx.len()))?;
            group_distance_rows.push((log.step, group.step, stat));

            // Degenerate scores (negative max cosine, common at random
            // init where adjacent-layer routers are uncorrelated) are
            // flagged per sample and left out of the monitored group mean.
            let scores: Vec<f64> = idx
                .iter()
                .filter_map(|&i| {
                    log.consistency[i]
                        .as_defined()
                        .filter(|s| s.degenerate.is_none())
                        .map(|s| s.c_i)
                })
                .collect();
            let degenerate = idx
                .iter()
                .filter(|&&i| {
                    log.consistency[i]
                        .as_defined()
                        .is_some_and(|s| s.degenerate.is_some())
                })
                .count();
            let undefined = idx.len() - scores.len() - degenerate;
            if !scores.is_empty() {
                let n = scores.len() as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let var = scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                smoothness_rows.push(SmoothnessRow {
                    step: log.step,
                    group_step: group.step,
                    mean_c_i: mean,
                    std_c_i: var.sqrt(),
                    mean_raw_smoothness: 1.0 - mean,
                    defined: scores.len(),
                    degenerate,
                    undefined,
                });
            }
        }
    }

    // Focus group: earliest memorized group big enough to carry statistics.
    let focus_group = pick_focus_group(&train_grouping, cfg.min_group_size)?;
    let focus_idx = member_indices(focus_group);
    let focus = analyze_focus(
        cfg,
        focus_group,
        &focus_idx,
        &logs,
        &pathways,
        &group_distance_rows,
        &smoothness_rows,
        &train_objective,
        &checkpoint_steps,
    )?;

    let mut layerwise_rows = Vec::new();
    for (c, log) in logs.iter().enumerate() {
        let member_paths: Vec<Pathway> =
            focus_idx.iter().map(|&i| pathways[c][i].clone()).collect();
        for layer in 0..cfg.num_layers {
            let stat = layerwise_distance(&member_paths, layer, default_pair_policy(focus_idx.len()))?;
            layerwise_rows.push((log.step, focus_group.step, stat));
        }
    }

    // Correlation table over the sustained-rise window.
    let focus_distance: Vec<f64> = checkpoint_steps
        .iter()
        .map(|step| {
            group_distance_rows
                .iter()
                .find(|(s, g, _)| s == step && *g == focus_group.step)
                .map(|(_, _, stat)| stat.mean)
                .expect("focus group has a distance row per checkpoint")
        })
        .collect();
    let focus_smoothness: Vec<f64> = checkpoint_steps
        .iter()
        .map(|step| {
            smoothness_rows
                .iter()
                .find(|r| r.step == *step && r.group_step == focus_group.step)
                .map(|r| r.mean_raw_smoothness)
                .expect("focus group has a smoothness row per checkpoint")
        })
        .collect();
    let loss_ma = moving_average(&train_objective, cfg.moving_average_window)?;
    let metrics = vec![
        MetricSeries {
            name: "pathway_distance".to_string(),
            values: &focus_distance,
            expected: Direction::Negative,
        },
        MetricSeries {
            name: "pathway_consistency_raw_smoothness".to_string(),
            values: &focus_smoothness,
            expected: Direction::Positive,
        },
        MetricSeries {
            name: "train_loss".to_string(),
            values: &train_objective,
            expected: Direction::Negative,
        },
        MetricSeries {
            name: "train_loss_moving_average".to_string(),
            values: &loss_ma,
            expected: Direction::Negative,
        },
        MetricSeries {
            name: "validation_loss".to_string(),
            values: &validation_objective,
            expected: Direction::Negative,
        },
    ];
    let correlations = correlation_table(&metrics, &domain_accuracy)?;

    // Threshold-robustness harness: the post-memorization distance trend
    // direction across the (epsilon, delta) grid.
    let robustness = robustness_report(
        cfg,
        epsilon_used,
        &train_series,
        &pathways,
        &logs,
        &checkpoint_steps,
        &index_of,
    )?;

    // Embedding-based pairing of train and test groups.
    let feature_of: BTreeMap<&SampleId, &ndarray::Array1<f64>> = dataset
        .samples
        .iter()
        .map(|s| (&s.id, &s.features))
        .collect();
    let embed_groups = |groups: &[DataGroup]| -> Result<Vec<EmbeddedGroup<f64>>> {
        groups
            .iter()
            .map(|g| {
                let vectors = g
                    .members
                    .iter()
                    .map(|id| {
                        let features = feature_of.get(id).expect("sample id from dataset");
                        synthetic_embedder(
                            features.as_slice().expect("contiguous features"),
                            SYNTHETIC_EMBED_DIM,
                        )
                    })
                    .collect();
                EmbeddedGroup::new(g.step, vectors)
            })
            .collect()
    };
    let pairing = if train_grouping.groups.is_empty() || test_grouping.groups.is_empty() {
        Vec::new()
    } else {
        let tr = embed_groups(&train_grouping.groups)?;
        let te = embed_groups(&test_grouping.groups)?;
        let sim = group_similarity(&tr, &te)?;
        let assignment = hungarian_match(&sim)?;
        assignment
            .pairs
            .iter()
            .map(|&(a, b)| {
                let train_step = tr[a].key;
                let test_step = te[b].key;
                PairLine {
                    train_step,
                    test_step,
                    similarity: sim[[a, b]],
                    label: format!("Pretrain@{train_step} -> Test@{test_step}"),
                }
            })
            .collect()
    };

    let summary = DemoSummary {
        config: cfg.clone(),
        label_scale,
        checkpoint_steps,
        domain_accuracy,
        train_objective,
        validation_objective,
        calibration,
        epsilon_used,
        delta_used: cfg.delta,
        train_groups: train_grouping.groups.clone(),
        test_groups: test_grouping.groups.clone(),
        undetected_train: train_grouping.undetected,
        undetected_test: test_grouping.undetected,
        focus,
        correlations,
        robustness,
        pairing,
    };

    Ok(DemoRun {
        summary,
        train_ids: train.ids.clone(),
        held_ids: held.ids.clone(),
        logs,
        param_norms,
        train_series,
        held_loss_series,
        held_acc_series,
        detections,
        group_distance_rows,
        layerwise_rows,
        smoothness_rows,
    })
}

fn pick_focus_group(grouping: &Grouping, min_size: usize) -> Result<&DataGroup> {
    grouping
        .groups
        .iter()
        .find(|g| g.members.len() >= min_size)
        .or_else(|| grouping.groups.iter().find(|g| g.members.len() >= 2))
        .ok_or(Error::UndefinedStatistic(
            "no memorized group with at least two members",
        ))
}

#[allow(clippy::too_many_arguments)]
fn analyze_focus(
    cfg: &DemoConfig,
    group: &DataGroup,
    focus_idx: &[usize],
    logs: &[CheckpointLog],
    pathways: &[Vec<Pathway>],
    distance_rows: &[(u64, u64, PathwayDistanceStat)],
    smoothness_rows: &[SmoothnessRow],
    train_objective: &[f64],
    checkpoint_steps: &[u64],
) -> Result<FocusAnalysis> {
    let _ = (logs, pathways, cfg, focus_idx);
    let post: Vec<(u64, f64)> = distance_rows
        .iter()
        .filter(|(s, g, _)| *g == group.step && *s >= group.step)
        .map(|(s, _, stat)| (*s, stat.mean))
        .collect();
    if post.len() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: post.len(),
            what: "post-memorization checkpoints for the focus group",
        });
    }
    let post_steps: Vec<u64> = post.iter().map(|(s, _)| *s).collect();
    let post_distance: Vec<f64> = post.iter().map(|(_, d)| *d).collect();
    let post_smoothness: Vec<f64> = smoothness_rows
        .iter()
        .filter(|r| r.group_step == group.step && r.step >= group.step)
        .map(|r| r.mean_raw_smoothness)
        .collect();
    let smoothness_violations = post_smoothness
        .windows(2)
        .filter(|w| w[1] < w[0])
        .count();

    let peak_distance = post_distance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let final_distance = *post_distance.last().expect("nonempty post window");

    let xs: Vec<f64> = post_steps.iter().map(|s| *s as f64).collect();
    let quadratic_fit = polyfit(&xs, &post_distance, 2)?;
    let post_slope = linear_slope(&xs, &post_distance)?;

    // Plateaued-objective window: among post-window checkpoint pairs where
    // the training objective stays within the loss tolerance of its start,
    // take the one with the largest relative distance drop.
    let post_obj: Vec<f64> = checkpoint_steps
        .iter()
        .zip(train_objective)
        .filter(|(s, _)| **s >= group.step)
        .map(|(_, v)| *v)
        .collect();
    let mut plateau: Option<PlateauWindow> = None;
    for a in 0..post_distance.len() {
        if post_distance[a] <= 0.0 || post_obj[a] <= 0.0 {
            continue;
        }
        for b in (a + 1)..post_distance.len() {
            let loss_change = post_obj[a..=b]
                .iter()
                .map(|v| (v - post_obj[a]).abs() / post_obj[a])
                .fold(0.0, f64::max);
            if loss_change >= 0.05 {
                continue;
            }
            let drop = (post_distance[a] - post_distance[b]) / post_distance[a];
            if plateau
                .as_ref()
                .is_none_or(|p| drop > p.distance_drop_fraction)
            {
                plateau = Some(PlateauWindow {
                    start_step: post_steps[a],
                    end_step: post_steps[b],
                    distance_drop_fraction: drop,
                    loss_change_fraction: loss_change,
                });
            }
        }
    }

    Ok(FocusAnalysis {
        group_step: group.step,
        member_count: group.members.len(),
        post_steps,
        post_distance,
        post_smoothness,
        smoothness_violations,
        peak_distance,
        final_distance,
        quadratic_fit,
        post_slope,
        plateau,
    })
}

fn robustness_report(
    cfg: &DemoConfig,
    epsilon_used: f64,
    train_series: &[CheckpointSeries<f64>],
    pathways: &[Vec<Pathway>],
    logs: &[CheckpointLog],
    checkpoint_steps: &[u64],
    index_of: &BTreeMap<&SampleId, usize>,
) -> Result<RobustnessReport> {
    let _ = logs;
    let mut epsilons = vec![epsilon_used];
    if epsilon_used - cfg.grid_step > 0.0 {
        epsilons.insert(0, epsilon_used - cfg.grid_step);
    }
    epsilons.push(epsilon_used + cfg.grid_step);
    let deltas = [0.03, 0.05];

    let mut rows = Vec::new();
    for &eps in &epsilons {
        for &delta in &deltas {
            let thresholds = MemorizationThresholds::new(eps, delta)?;
            let detections: Vec<(SampleId, Option<u64>)> = train_series
                .iter()
                .map(|s| Ok((s.sample_id.clone(), memorization_step(s, &thresholds)?)))
                .collect::<Result<_>>()?;
            let grouping = group_by_step(&detections);
            let Ok(group) = pick_focus_group(&grouping, cfg.min_group_size) else {
                rows.push(RobustnessRow {
                    epsilon: eps,
                    delta,
                    group_step: None,
                    slope: None,
                });
                continue;
            };
            let idx: Vec<usize> = group
                .members
                .iter()
                .map(|id| *index_of.get(id).expect("train member"))
                .collect();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (c, step) in checkpoint_steps.iter().enumerate() {
                if *step < group.step {
                    continue;
                }
                let member_paths: Vec<Pathway> =
                    idx.iter().map(|&i| pathways[c][i].clone()).collect();
                let stat = mean_pairwise_distance(&member_paths, default_pair_policy(idx.len()))?;
                xs.push(*step as f64);
                ys.push(stat.mean);
            }
            let slope = if xs.len() >= 2 {
                Some(linear_slope(&xs, &ys)?)
            } else {
                None
            };
            rows.push(RobustnessRow {
                epsilon: eps,
                delta,
                group_step: Some(group.step),
                slope,
            });
        }
    }
    let signs: Vec<i8> = rows
        .iter()
        .filter_map(|r| r.slope.map(|s| if s < 0.0 { -1 } else { 1 }))
        .collect();
    let consistent =
        signs.len() == rows.len() && signs.windows(2).all(|w| w[0] == w[1]) && !signs.is_empty();
    Ok(RobustnessReport { rows, consistent })
}
