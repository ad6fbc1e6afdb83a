//! Next-event prediction, MAE/MPA metrics and report emission.
//!
//! Evaluation is one-step-ahead with teacher forcing: each test event is
//! predicted from the true preceding events. Predicted times use the
//! configured point estimate (analytic mean by default, so MAE is
//! deterministic); the per-event table and the training curve are written as
//! CSV with a stable column order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{self, PointMode};
use crate::mtpp::{
    embed_event, fuse, mark_log_probs, rnn_step, scored_bounds, sequence_cluster, ModelParams,
    Range,
};
use crate::rng;
use crate::seqdata::{RegionDataset, Sequence};
use crate::train::CurvePoint;

/// Prediction settings.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub mode: PointMode,
    /// Seed for `PointMode::Sample`; ignored by the deterministic modes.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: PointMode::Mean,
            seed: 0,
        }
    }
}

/// One predicted next event.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub category: usize,
    /// Absolute normalized time `t_last + Δ̂t`.
    pub time: f64,
    /// Predicted incremental travel distance; absent in non-spatial mode.
    pub distance: Option<f64>,
}

/// One row of the per-event report (the data behind the qualitative plots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerEventRow {
    pub user_id: String,
    pub step: usize,
    pub true_dt: f64,
    pub predicted_dt: f64,
    pub true_category: usize,
    pub predicted_category: usize,
}

/// Aggregate evaluation result.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean |t − t̂| over test events, in normalized time units.
    pub mae: f64,
    /// Fraction of test events with the category predicted exactly.
    pub mpa: f64,
    pub num_events: usize,
    pub rows: Vec<PerEventRow>,
}

/// Category argmax with ties broken toward the smallest id, plus the point
/// estimates of the next deltas.
fn step_prediction(
    params: &ModelParams,
    state: &[f64],
    cluster: usize,
    opts: &EvalOptions,
    seq_seed: u64,
    step: usize,
) -> Result<(usize, f64, Option<f64>)> {
    let mut step_rng = rng::step_rng(seq_seed, step);
    let t_params = params.t_flow.params(state, cluster)?;
    let est_t = flows::point_estimate(t_params, opts.mode, &mut step_rng);
    let est_d = match &params.d_flow {
        Some(head) => Some(flows::point_estimate(
            head.params(state, cluster)?,
            opts.mode,
            &mut step_rng,
        )),
        None => None,
    };
    let fused = fuse(params, state, est_d.unwrap_or(est_t));
    let log_probs = mark_log_probs(params, &fused);
    let mut best = 0usize;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp > log_probs[best] {
            best = i;
        }
    }
    Ok((best, est_t, est_d))
}

/// Predict the event following `events[..prefix_len]`.
pub fn predict_next(
    params: &ModelParams,
    seq: &Sequence,
    prefix_len: usize,
    opts: &EvalOptions,
) -> Result<Prediction> {
    if prefix_len == 0 || prefix_len > seq.len() {
        return Err(Error::InvalidConfig(format!(
            "prefix length {prefix_len} outside 1..={}",
            seq.len()
        )));
    }
    let cluster = sequence_cluster(params, seq)?;
    let seq_seed = rng::sequence_seed(opts.seed, &seq.user_id);
    let mut state = vec![0.0; params.dims.hidden];
    for j in 0..prefix_len {
        let v = embed_event(params, seq.events[j].category, seq.delta_t[j], seq.delta_d[j])?;
        state = rnn_step(params, &state, &v, seq.delta_t[j], seq.delta_d[j]);
    }
    let step = prefix_len - 1;
    let (category, est_t, est_d) = step_prediction(params, &state, cluster, opts, seq_seed, step)?;
    Ok(Prediction {
        category,
        time: seq.events[step].time + est_t,
        distance: est_d,
    })
}

/// One-step-ahead evaluation over the test suffixes of the given sequences.
///
/// Sequences without test events are skipped; it is an error if none remain.
/// Never mutates the parameters (enforced by the shared borrow).
pub fn evaluate_sequences(
    params: &ModelParams,
    seqs: &[&Sequence],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut abs_err_sum = 0.0;
    let mut hits = 0usize;
    for seq in seqs {
        let Some((lo, hi)) = scored_bounds(seq, Range::Test) else {
            continue;
        };
        let cluster = sequence_cluster(params, seq)?;
        let seq_seed = rng::sequence_seed(opts.seed, &seq.user_id);
        let mut state = vec![0.0; params.dims.hidden];
        for j in 0..=hi {
            let v = embed_event(params, seq.events[j].category, seq.delta_t[j], seq.delta_d[j])?;
            state = rnn_step(params, &state, &v, seq.delta_t[j], seq.delta_d[j]);
            if j < lo {
                continue;
            }
            let (category, est_t, _) =
                step_prediction(params, &state, cluster, opts, seq_seed, j)?;
            let true_dt = seq.delta_t[j + 1];
            let true_category = seq.events[j + 1].category;
            abs_err_sum += (true_dt - est_t).abs();
            hits += usize::from(category == true_category);
            rows.push(PerEventRow {
                user_id: seq.user_id.clone(),
                step: j,
                true_dt,
                predicted_dt: est_t,
                true_category,
                predicted_category: category,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let n = rows.len();
    Ok(EvalReport {
        mae: abs_err_sum / n as f64,
        mpa: hits as f64 / n as f64,
        num_events: n,
        rows,
    })
}

/// Evaluate a whole dataset, checking model/dataset compatibility first.
pub fn evaluate(
    params: &ModelParams,
    dataset: &RegionDataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if params.dims.num_categories != dataset.num_categories {
        return Err(Error::VocabMismatch {
            model: params.dims.num_categories,
            dataset: dataset.num_categories,
        });
    }
    if params.spatial() != dataset.spatial_mode {
        return Err(Error::SpatialModeMismatch {
            model: params.spatial(),
            dataset: dataset.spatial_mode,
        });
    }
    let refs: Vec<&Sequence> = dataset.sequences.iter().collect();
    evaluate_sequences(params, &refs, opts)
}

/// Write the epoch-indexed training curve.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for point in curve {
        w.serialize(point)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Write the per-event prediction table.
pub fn write_events_csv(path: impl AsRef<Path>, rows: &[PerEventRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_csv(path: impl AsRef<Path>) -> Result<Vec<PerEventRow>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Write both report files into a directory, creating it if needed.
///
/// Returns the (curve, per-event) paths.
pub fn emit_reports(
    curve: &[CurvePoint],
    rows: &[PerEventRow],
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let curve_path = dir.join("training_curve.csv");
    let events_path = dir.join("per_event.csv");
    write_curve_csv(&curve_path, curve)?;
    write_events_csv(&events_path, rows)?;
    Ok((curve_path, events_path))
}
