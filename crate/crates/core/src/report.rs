//! Bundle emission: tabular files, plot-data triples, and the structured
//! JSON report. Field ordering is fixed and floats print in shortest
//! round-trip form, so re-emitting the same run yields identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::demo::DemoRun;
use crate::dynamics::DataGroup;
use crate::error::Result;
use crate::io::{
    self, fmt_float, render_consistency, render_detections, render_distance_stats, render_groups,
    render_param_norms, render_plot_data, render_routing_records, render_series, SteppedRecord,
};
use crate::stats::CorrelationReport;
use crate::study::{render_study, SeedStudyResult};
use crate::SampleId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Comma-separated tables plus plot-data triples.
    Tabular,
    /// One self-describing JSON document.
    Structured,
}

/// Write a demo run's bundle under `dir`. `format` narrows the output to
/// one family; `None` writes everything. Returns the written paths, sorted.
pub fn emit_demo(run: &DemoRun, dir: &Path, format: Option<ReportFormat>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let tabular = format != Some(ReportFormat::Structured);
    let structured = format != Some(ReportFormat::Tabular);

    if tabular {
        let records: Vec<SteppedRecord<f64>> = run
            .logs
            .iter()
            .flat_map(|log| {
                log.records.iter().flatten().map(|record| SteppedRecord {
                    step: log.step,
                    record: record.clone(),
                })
            })
            .collect();
        let consistency_rows: Vec<(u64, crate::consistency::SampleConsistency<f64>)> = run
            .logs
            .iter()
            .flat_map(|log| log.consistency.iter().map(|c| (log.step, c.clone())))
            .collect();
        let mut distance_rows = run.group_distance_rows.clone();
        distance_rows.extend(run.layerwise_rows.iter().cloned());

        let files: Vec<(&str, String)> = vec![
            ("routing_records.csv", render_routing_records(&records)),
            ("train_loss.csv", render_series(&run.train_series)),
            ("validation_loss.csv", render_series(&run.held_loss_series)),
            ("held_accuracy.csv", render_series(&run.held_acc_series)),
            ("param_norms.csv", render_param_norms(&run.param_norms)),
            ("detections.csv", render_detections(&run.detections)),
            ("groups_train.csv", render_groups(&run.summary.train_groups)),
            ("groups_test.csv", render_groups(&run.summary.test_groups)),
            ("distance_stats.csv", render_distance_stats(&distance_rows)),
            ("consistency.csv", render_consistency(&consistency_rows)),
            ("consistency_groups.csv", render_smoothness(run)),
            ("correlations.csv", render_correlations(&run.summary.correlations)),
            ("assignment.csv", render_assignment(run)),
            ("robustness.csv", render_robustness(run)),
        ];
        for (name, text) in files {
            written.push(write(dir, name, &text)?);
        }
        for (name, text) in plot_files(run) {
            written.push(write(dir, &format!("plots/{name}"), &text)?);
        }
    }
    if structured {
        let json = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
        written.push(write(dir, "report.json", &format!("{json}\n"))?);
    }
    written.sort();
    Ok(written)
}

/// Write the router-seed study outputs under `dir`.
pub fn emit_study(result: &SeedStudyResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    written.push(write(dir, "study.csv", &render_study(result))?);
    let mut rows = Vec::new();
    for r in &result.rows {
        rows.push((
            r.mean_edit_distance,
            r.effective_dimension,
            "raw".to_string(),
        ));
    }
    for (nd, ne) in &result.normalized {
        rows.push((*nd, *ne, "normalized".to_string()));
    }
    written.push(write(dir, "plots/fig8_distance_vs_dimension.csv", &render_plot_data(&rows))?);
    let json = serde_json::to_string_pretty(result).expect("study serializes");
    written.push(write(dir, "study.json", &format!("{json}\n"))?);
    written.sort();
    Ok(written)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    io::write_text(&path, text)?;
    Ok(path)
}

/// Header: one row per correlation report, fixed column order.
pub fn render_correlations(reports: &[CorrelationReport]) -> String {
    let mut out = String::from(
        "metric,pearson_r,pearson_p,pearson_perm_p,spearman_rho,spearman_p,spearman_perm_p,n,expected_direction,direction_consistent\n",
    );
    for r in reports {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| fmt_float(x));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.metric,
            fmt_float(r.pearson_r),
            fmt_float(r.pearson_p),
            opt(r.pearson_perm_p),
            fmt_float(r.spearman_rho),
            fmt_float(r.spearman_p),
            opt(r.spearman_perm_p),
            r.n,
            r.expected_direction,
            r.direction_consistent
        ));
    }
    out
}

fn render_smoothness(run: &DemoRun) -> String {
    let mut out = String::from(
        "checkpoint_step,group_step,mean_c_i,std_c_i,mean_raw_smoothness,defined,degenerate,undefined\n",
    );
    for r in &run.smoothness_rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.group_step,
            fmt_float(r.mean_c_i),
            fmt_float(r.std_c_i),
            fmt_float(r.mean_raw_smoothness),
            r.defined,
            r.degenerate,
            r.undefined
        ));
    }
    out
}

fn render_assignment(run: &DemoRun) -> String {
    let mut out = String::from("train_step,test_step,similarity,label\n");
    for p in &run.summary.pairing {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.train_step,
            p.test_step,
            fmt_float(p.similarity),
            p.label
        ));
    }
    out
}

fn render_robustness(run: &DemoRun) -> String {
    let mut out = String::from("epsilon,delta,group_step,slope\n");
    for r in &run.summary.robustness.rows {
        let group = r.group_step.map_or(String::new(), |g| g.to_string());
        let slope = r.slope.map_or(String::new(), fmt_float);
        out.push_str(&format!(
            "{},{},{group},{slope}\n",
            fmt_float(r.epsilon),
            fmt_float(r.delta)
        ));
    }
    out.push_str(&format!("# consistent={}\n", run.summary.robustness.consistent));
    out
}

/// Plot-data files, one per figure analog, all (x, y, series) triples.
fn plot_files(run: &DemoRun) -> Vec<(String, String)> {
    let steps = &run.summary.checkpoint_steps;
    let mut files = Vec::new();

    // Memorized-count and accuracy trajectories.
    let mut rows = Vec::new();
    for (c, step) in steps.iter().enumerate() {
        let memorized: usize = run
            .summary
            .train_groups
            .iter()
            .filter(|g| g.step <= *step)
            .map(|g| g.members.len())
            .sum();
        rows.push((*step as f64, memorized as f64, "memorized_count".to_string()));
        rows.push((
            *step as f64,
            run.summary.domain_accuracy[c],
            "domain_accuracy".to_string(),
        ));
    }
    files.push(("fig1_memorization_vs_accuracy.csv".to_string(), render_plot_data(&rows)));

    // Paired train-loss / test-accuracy curves.
    let train_by_id: BTreeMap<&SampleId, usize> = run
        .train_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let held_by_id: BTreeMap<&SampleId, usize> = run
        .held_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let group_mean = |group: &DataGroup,
                      lookup: &BTreeMap<&SampleId, usize>,
                      values: &dyn Fn(usize, usize) -> f64|
     -> Vec<f64> {
        let idx: Vec<usize> = group
            .members
            .iter()
            .filter_map(|id| lookup.get(id).copied())
            .collect();
        (0..steps.len())
            .map(|c| idx.iter().map(|&i| values(c, i)).sum::<f64>() / idx.len().max(1) as f64)
            .collect()
    };
    let mut rows = Vec::new();
    for pair in &run.summary.pairing {
        let train_group = run
            .summary
            .train_groups
            .iter()
            .find(|g| g.step == pair.train_step)
            .expect("paired train group exists");
        let test_group = run
            .summary
            .test_groups
            .iter()
            .find(|g| g.step == pair.test_step)
            .expect("paired test group exists");
        let loss = group_mean(train_group, &train_by_id, &|c, i| {
            run.logs[c].train_losses[i]
        });
        let acc = group_mean(test_group, &held_by_id, &|c, i| run.logs[c].held_correct[i]);
        for (c, step) in steps.iter().enumerate() {
            rows.push((
                *step as f64,
                loss[c],
                format!("Pretrain@{} loss", pair.train_step),
            ));
            rows.push((
                *step as f64,
                acc[c],
                format!("Test@{} accuracy", pair.test_step),
            ));
        }
    }
    files.push(("fig2_paired_groups.csv".to_string(), render_plot_data(&rows)));

    // Edit-distance trajectories per group, the focus group's quadratic
    // trend, and the training objective.
    let mut rows = Vec::new();
    for (step, group, stat) in &run.group_distance_rows {
        rows.push((*step as f64, stat.mean, format!("distance_group@{group}")));
    }
    let q = &run.summary.focus.quadratic_fit;
    for step in &run.summary.focus.post_steps {
        let x = *step as f64;
        let y = q[0] + q[1] * x + q[2] * x * x;
        rows.push((x, y, format!("quadratic_fit_group@{}", run.summary.focus.group_step)));
    }
    for (c, step) in steps.iter().enumerate() {
        rows.push((
            *step as f64,
            run.summary.train_objective[c],
            "train_loss".to_string(),
        ));
    }
    files.push(("fig3_edit_distance.csv".to_string(), render_plot_data(&rows)));

    // Layer-wise distance for the focus group.
    let mut rows = Vec::new();
    for (step, group, stat) in &run.layerwise_rows {
        let layer = stat.layer.expect("layerwise rows carry a layer");
        rows.push((
            *step as f64,
            stat.mean,
            format!("layer{layer}_group@{group}"),
        ));
    }
    files.push(("fig4_layerwise_distance.csv".to_string(), render_plot_data(&rows)));

    // Consistency trajectories per group plus the training objective.
    let mut rows = Vec::new();
    for r in &run.smoothness_rows {
        rows.push((
            r.step as f64,
            r.mean_raw_smoothness,
            format!("raw_smoothness_group@{}", r.group_step),
        ));
    }
    for (c, step) in steps.iter().enumerate() {
        rows.push((
            *step as f64,
            run.summary.train_objective[c],
            "train_loss".to_string(),
        ));
    }
    files.push(("fig5_consistency.csv".to_string(), render_plot_data(&rows)));

    files
}

/// Serialize any report piece as pretty JSON (stable field order).
pub fn to_json<S: Serialize>(value: &S) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report value serializes");
    text.push('\n');
    text
}
