//! Tabular file formats shared by every pipeline stage.
//!
//! Everything is comma-separated text with a header row, rendered to
//! strings first so emission is byte-deterministic. Floats print in
//! shortest-round-trip form. The routing-record and series formats are the
//! ingestion contract: dumps from external MoE runs can substitute for the
//! built-in model anywhere downstream.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;

use crate::consistency::{SampleConsistency, UndefinedReason};
use crate::dynamics::{CheckpointSeries, DataGroup, SeriesKind};
use crate::error::{Error, Result};
use crate::moe::{ParamType, RoutingRecord};
use crate::pathway::PathwayDistanceStat;
use crate::scalar::Real;
use crate::SampleId;

pub fn fmt_float<T: Real>(v: T) -> String {
    format!("{}", v.as_f64())
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|e| Error::Parse {
        line,
        message: format!("bad float '{tok}': {e}"),
    })
}

fn parse_u64(tok: &str, line: usize) -> Result<u64> {
    tok.trim().parse::<u64>().map_err(|e| Error::Parse {
        line,
        message: format!("bad integer '{tok}': {e}"),
    })
}

/// One routing record tagged with the checkpoint it was logged at.
#[derive(Debug, Clone, PartialEq)]
pub struct SteppedRecord<T> {
    pub step: u64,
    pub record: RoutingRecord<T>,
}

/// Header: `sample_id,checkpoint_step,layer,w0,...,w{K-1}`.
pub fn render_routing_records<T: Real>(records: &[SteppedRecord<T>]) -> String {
    let k = records.first().map_or(0, |r| r.record.weights.len());
    let mut out = String::from("sample_id,checkpoint_step,layer");
    for i in 0..k {
        out.push_str(&format!(",w{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{}",
            r.record.sample_id, r.step, r.record.layer
        ));
        for w in &r.record.weights {
            out.push(',');
            out.push_str(&fmt_float(*w));
        }
        out.push('\n');
    }
    out
}

/// Parse routing records. Multiple rows sharing (sample, step, layer) are
/// token-level entries and are averaged into one record.
pub fn parse_routing_records<T: Real>(text: &str) -> Result<Vec<SteppedRecord<T>>> {
    let mut acc: BTreeMap<(String, u64, usize), (Vec<f64>, usize)> = BTreeMap::new();
    let mut order: Vec<(String, u64, usize)> = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: lineno,
                message: "routing record needs sample_id, step, layer, weights".into(),
            });
        }
        let key = (
            fields[0].trim().to_string(),
            parse_u64(fields[1], lineno)?,
            parse_u64(fields[2], lineno)? as usize,
        );
        let weights: Vec<f64> = fields[3..]
            .iter()
            .map(|t| parse_f64(t, lineno))
            .collect::<Result<_>>()?;
        match acc.get_mut(&key) {
            Some((sum, count)) => {
                if sum.len() != weights.len() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "inconsistent expert count across rows".into(),
                    });
                }
                for (s, w) in sum.iter_mut().zip(&weights) {
                    *s += w;
                }
                *count += 1;
            }
            None => {
                order.push(key.clone());
                acc.insert(key, (weights, 1));
            }
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (sum, count) = acc.remove(&key).expect("key recorded in order");
            let weights = sum.iter().map(|s| T::of(s / count as f64)).collect();
            Ok(SteppedRecord {
                step: key.1,
                record: RoutingRecord::new(SampleId::new(key.0), key.2, weights)?,
            })
        })
        .collect()
}

/// Header: `sample_id,step,value,kind`.
pub fn render_series<T: Real>(series: &[CheckpointSeries<T>]) -> String {
    let mut out = String::from("sample_id,step,value,kind\n");
    for s in series {
        for (step, value) in s.steps.iter().zip(&s.values) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.sample_id,
                step,
                fmt_float(*value),
                s.kind
            ));
        }
    }
    out
}

/// Parse per-sample series; rows may arrive unsorted and are ordered by step.
pub fn parse_series<T: Real>(text: &str) -> Result<Vec<CheckpointSeries<T>>> {
    let mut acc: BTreeMap<String, (Vec<(u64, T)>, SeriesKind)> = BTreeMap::new();
    let mut order = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: "series row needs sample_id, step, value, kind".into(),
            });
        }
        let id = fields[0].trim().to_string();
        let step = parse_u64(fields[1], lineno)?;
        let value = T::of(parse_f64(fields[2], lineno)?);
        let kind: SeriesKind = fields[3].trim().parse()?;
        match acc.get_mut(&id) {
            Some((rows, existing)) => {
                if *existing != kind {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("sample {id} mixes series kinds"),
                    });
                }
                rows.push((step, value));
            }
            None => {
                order.push(id.clone());
                acc.insert(id, (vec![(step, value)], kind));
            }
        }
    }
    order
        .into_iter()
        .map(|id| {
            let (mut rows, kind) = acc.remove(&id).expect("key recorded in order");
            rows.sort_by_key(|(step, _)| *step);
            let steps = rows.iter().map(|(s, _)| *s).collect();
            let values = rows.iter().map(|(_, v)| *v).collect();
            CheckpointSeries::new(SampleId::new(id), steps, values, kind)
        })
        .collect()
}

/// Header: `step,param_type,norm`.
pub fn render_param_norms<T: Real>(rows: &[(u64, ParamType, T)]) -> String {
    let mut out = String::from("step,param_type,norm\n");
    for (step, ty, norm) in rows {
        out.push_str(&format!("{step},{ty},{}\n", fmt_float(*norm)));
    }
    out
}

pub fn parse_param_norms<T: Real>(text: &str) -> Result<Vec<(u64, ParamType, T)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: "param-norm row needs step, param_type, norm".into(),
            });
        }
        out.push((
            parse_u64(fields[0], lineno)?,
            fields[1].trim().parse()?,
            T::of(parse_f64(fields[2], lineno)?),
        ));
    }
    Ok(out)
}

/// Embedding file: `sample_id v0 v1 ...`, whitespace separated, no header.
pub fn render_embeddings<T: Real>(rows: &[(SampleId, Array1<T>)]) -> String {
    let mut out = String::new();
    for (id, v) in rows {
        out.push_str(id.as_str());
        for x in v.iter() {
            out.push(' ');
            out.push_str(&fmt_float(*x));
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings<T: Real>(text: &str) -> Result<Vec<(SampleId, Array1<T>)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut toks = line.split_whitespace();
        let id = toks.next().ok_or(Error::Parse {
            line: lineno,
            message: "embedding row needs a sample id".into(),
        })?;
        let values: Vec<T> = toks
            .map(|t| parse_f64(t, lineno).map(T::of))
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("embedding for {id} has no components"),
            });
        }
        out.push((SampleId::new(id), Array1::from_vec(values)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRow {
    pub sample_id: SampleId,
    pub t_star: Option<u64>,
    pub t_hash: Option<u64>,
}

/// Header: `sample_id,t_star,t_hash`; absent detections are empty cells.
pub fn render_detections(rows: &[DetectionRow]) -> String {
    let mut out = String::from("sample_id,t_star,t_hash\n");
    for r in rows {
        let star = r.t_star.map_or(String::new(), |v| v.to_string());
        let hash = r.t_hash.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!("{},{},{}\n", r.sample_id, star, hash));
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRow>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: "detection row needs sample_id, t_star, t_hash".into(),
            });
        }
        let opt = |tok: &str| -> Result<Option<u64>> {
            let t = tok.trim();
            if t.is_empty() {
                Ok(None)
            } else {
                parse_u64(t, lineno).map(Some)
            }
        };
        out.push(DetectionRow {
            sample_id: SampleId::new(fields[0].trim()),
            t_star: opt(fields[1])?,
            t_hash: opt(fields[2])?,
        });
    }
    Ok(out)
}

/// Header: `group_step,sample_id`.
pub fn render_groups(groups: &[DataGroup]) -> String {
    let mut out = String::from("group_step,sample_id\n");
    for g in groups {
        for m in &g.members {
            out.push_str(&format!("{},{}\n", g.step, m));
        }
    }
    out
}

pub fn parse_groups(text: &str) -> Result<Vec<DataGroup>> {
    let mut acc: BTreeMap<u64, Vec<SampleId>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                message: "group row needs group_step, sample_id".into(),
            });
        }
        acc.entry(parse_u64(fields[0], lineno)?)
            .or_default()
            .push(SampleId::new(fields[1].trim()));
    }
    Ok(acc
        .into_iter()
        .map(|(step, members)| DataGroup { step, members })
        .collect())
}

/// Header: `checkpoint_step,group_id,layer,mean,std,pairs`; `layer` is `ALL`
/// for full-pathway statistics.
pub fn render_distance_stats(rows: &[(u64, u64, PathwayDistanceStat)]) -> String {
    let mut out = String::from("checkpoint_step,group_id,layer,mean,std,pairs\n");
    for (step, group, stat) in rows {
        let layer = stat
            .layer
            .map_or_else(|| "ALL".to_string(), |l| l.to_string());
        out.push_str(&format!(
            "{step},{group},{layer},{},{},{}\n",
            fmt_float(stat.mean),
            fmt_float(stat.std),
            stat.pairs
        ));
    }
    out
}

/// Header: `checkpoint_step,sample_id,c_i,raw_smoothness,degenerate_flag`.
/// Undefined scores keep their row with empty values and the reason in the
/// flag column, so they are visible rather than silently zero.
pub fn render_consistency<T: Real>(rows: &[(u64, SampleConsistency<T>)]) -> String {
    let mut out = String::from("checkpoint_step,sample_id,c_i,raw_smoothness,degenerate_flag\n");
    for (step, entry) in rows {
        match entry {
            SampleConsistency::Defined(score) => {
                let flag = match score.degenerate {
                    Some(crate::consistency::DegeneracyFlag::NegativeMaxCosine) => {
                        "negative_max_cosine"
                    }
                    None => "none",
                };
                out.push_str(&format!(
                    "{step},{},{},{},{flag}\n",
                    score.sample_id,
                    fmt_float(score.c_i),
                    fmt_float(score.raw_smoothness)
                ));
            }
            SampleConsistency::Undefined { sample_id, reason } => {
                let label = match reason {
                    UndefinedReason::SingleLayer => "undefined:single_layer".to_string(),
                    UndefinedReason::ZeroNormEmbedding { layer } => {
                        format!("undefined:zero_norm_embedding(layer={layer})")
                    }
                    UndefinedReason::ZeroNormalizer => "undefined:zero_normalizer".to_string(),
                };
                out.push_str(&format!("{step},{sample_id},,,{label}\n"));
            }
        }
    }
    out
}

/// Header: `x,y,series`; the plot-data triple format.
pub fn render_plot_data(rows: &[(f64, f64, String)]) -> String {
    let mut out = String::from("x,y,series\n");
    for (x, y, series) in rows {
        out.push_str(&format!("{},{},{series}\n", fmt_float(*x), fmt_float(*y)));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}
