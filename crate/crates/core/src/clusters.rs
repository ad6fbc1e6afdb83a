//! Median-time sequence clustering.
//!
//! Every sequence is routed to one of M clusters by the median of its
//! training-prefix event times. Thresholds are the i/M empirical quantiles of
//! the training medians, fitted once on training data and reused verbatim for
//! test-time assignment (they persist inside checkpoints).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{RegionDataset, Sequence};

/// Fitted cluster model: M and the M−1 median-time cut points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub m: usize,
    /// Strictly increasing; empty when `m == 1`.
    pub thresholds: Vec<f64>,
}

impl ClusterModel {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::ZeroClusters);
        }
        if self.thresholds.len() + 1 != self.m {
            return Err(Error::ShapeMismatch {
                what: "cluster thresholds".into(),
                expected: self.m - 1,
                got: self.thresholds.len(),
            });
        }
        if self.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::DegenerateThresholds);
        }
        Ok(())
    }

    /// Smallest `i` with `median < thresholds[i]`, else `M − 1`.
    pub fn assign(&self, median: f64) -> usize {
        self.thresholds
            .iter()
            .position(|&t| median < t)
            .unwrap_or(self.m - 1)
    }
}

/// Median of the normalized event times of the training prefix.
///
/// Even counts average the two central values.
pub fn sequence_median(seq: &Sequence) -> Result<f64> {
    let (train, _) = seq.split_train_test();
    if train.is_empty() {
        return Err(Error::EmptyTrainingPrefix {
            user_id: seq.user_id.clone(),
        });
    }
    let mut times: Vec<f64> = train.iter().map(|e| e.time).collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let n = times.len();
    Ok(if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    })
}

/// Fit the M−1 quantile thresholds from training medians.
///
/// Threshold i is the element at rank `⌊n·i/M⌋` of the sorted medians, which
/// yields cluster sizes equal up to rounding for distinct medians.
pub fn fit_thresholds(medians: &[f64], m: usize) -> Result<ClusterModel> {
    if m < 1 {
        return Err(Error::ZeroClusters);
    }
    if medians.len() < m {
        return Err(Error::TooFewMedians {
            m,
            n: medians.len(),
        });
    }
    let mut sorted = medians.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = sorted.len();
    let thresholds: Vec<f64> = (1..m).map(|i| sorted[n * i / m]).collect();
    let model = ClusterModel { m, thresholds };
    model.validate()?;
    Ok(model)
}

/// Fit thresholds on a dataset's training medians and assign every sequence.
///
/// Returns the fitted model; the dataset's `clusters` field and each
/// sequence's `cluster` id are filled in place.
pub fn fit_and_assign(dataset: &mut RegionDataset, m: usize) -> Result<ClusterModel> {
    let medians: Vec<f64> = dataset
        .sequences
        .iter()
        .map(sequence_median)
        .collect::<Result<_>>()?;
    let model = fit_thresholds(&medians, m)?;
    for (seq, &median) in dataset.sequences.iter_mut().zip(&medians) {
        seq.cluster = Some(model.assign(median));
    }
    dataset.clusters = Some(model.clone());
    Ok(model)
}

/// Assign clusters to a dataset using an existing (e.g. checkpointed) model.
pub fn assign_all(dataset: &mut RegionDataset, model: &ClusterModel) -> Result<()> {
    for seq in &mut dataset.sequences {
        let median = sequence_median(seq)?;
        seq.cluster = Some(model.assign(median));
    }
    dataset.clusters = Some(model.clone());
    Ok(())
}
