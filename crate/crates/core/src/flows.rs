//! Conditional log-normal flow heads.
//!
//! A head maps an RNN hidden state to the (mean, variance) of a log-normal
//! over the next inter-event delta. Per-cluster scalar offsets sit on top of
//! shared projection weights; in transfer mode a frozen per-cluster anchor
//! pair imported from an origin checkpoint is blended in through a single
//! trainable attention scalar φ shared across clusters.
//!
//! The affine variance pre-activation is mapped through softplus plus a small
//! floor so the realized variance is strictly positive for every state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Variance floor added after the softplus positivity map.
pub const EPS_SIGMA: f64 = 1e-4;

/// Realized parameters of one conditional log-normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Mean of the log-variable.
    pub mu: f64,
    /// Variance of the log-variable, strictly positive.
    pub sigma2: f64,
}

/// Full head output including the variance pre-activation, which the
/// backward pass needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub mu: f64,
    pub rho: f64,
    pub sigma2: f64,
}

impl HeadOutput {
    pub fn params(&self) -> FlowParams {
        FlowParams {
            mu: self.mu,
            sigma2: self.sigma2,
        }
    }
}

/// Frozen origin anchors plus the trainable attention scalar of a
/// transfer-mode head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTerms {
    /// Attention scalar blending the origin anchors; shared across clusters.
    pub phi: f64,
    /// When set, φ is excluded from optimization (used to reduce a transfer
    /// run to a scratch run exactly).
    #[serde(default)]
    pub phi_frozen: bool,
    /// Per-cluster mean anchors from the origin region. Never trained.
    pub anchor_mu: Vec<f64>,
    /// Per-cluster variance pre-activation anchors. Never trained.
    pub anchor_rho: Vec<f64>,
}

/// One conditional flow head (temporal or spatial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowHead {
    /// Mean projection; one row shared across clusters, or M rows when
    /// per-cluster weights are enabled.
    pub w_mu: Mat,
    pub b_mu: f64,
    /// Variance pre-activation projection, same row layout as `w_mu`.
    pub w_rho: Mat,
    pub b_rho: f64,
    /// Per-cluster mean offsets on top of `b_mu`; the combined per-cluster
    /// bias is what checkpoints export as transfer anchors.
    pub cluster_mu: Vec<f64>,
    /// Per-cluster variance pre-activation offsets.
    pub cluster_rho: Vec<f64>,
    /// Present iff the head is in transfer mode.
    pub transfer: Option<TransferTerms>,
}

impl FlowHead {
    pub fn zeros(hidden: usize, m: usize, per_cluster_weights: bool) -> Self {
        let rows = if per_cluster_weights { m } else { 1 };
        FlowHead {
            w_mu: Mat::zeros(rows, hidden),
            b_mu: 0.0,
            w_rho: Mat::zeros(rows, hidden),
            b_rho: 0.0,
            cluster_mu: vec![0.0; m],
            cluster_rho: vec![0.0; m],
            transfer: None,
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_mu.len()
    }

    /// Row of the projection matrices used for a cluster.
    pub fn weight_row(&self, cluster: usize) -> usize {
        if self.w_mu.rows() == 1 {
            0
        } else {
            cluster
        }
    }

    /// Realized (μ, ρ, σ²) for a hidden state and cluster.
    pub fn output(&self, state: &[f64], cluster: usize) -> Result<HeadOutput> {
        debug_assert!(cluster < self.num_clusters());
        let row = self.weight_row(cluster);
        let mut mu = dot(self.w_mu.row(row), state) + self.b_mu + self.cluster_mu[cluster];
        let mut rho = dot(self.w_rho.row(row), state) + self.b_rho + self.cluster_rho[cluster];
        if let Some(t) = &self.transfer {
            mu += t.phi * t.anchor_mu[cluster];
            rho += t.phi * t.anchor_rho[cluster];
        }
        if !mu.is_finite() {
            return Err(Error::NonFinite {
                what: "flow head mean".into(),
                step: None,
            });
        }
        if !rho.is_finite() {
            return Err(Error::NonFinite {
                what: "flow head variance pre-activation".into(),
                step: None,
            });
        }
        Ok(HeadOutput {
            mu,
            rho,
            sigma2: softplus(rho) + EPS_SIGMA,
        })
    }

    /// Realized log-normal parameters for a hidden state and cluster.
    pub fn params(&self, state: &[f64], cluster: usize) -> Result<FlowParams> {
        self.output(state, cluster).map(|o| o.params())
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact log-density of the log-normal at `x > 0`.
pub fn log_pdf(params: FlowParams, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveSample(x));
    }
    let ln_x = x.ln();
    let d = ln_x - params.mu;
    Ok(-ln_x
        - 0.5 * params.sigma2.ln()
        - 0.5 * (2.0 * std::f64::consts::PI).ln()
        - d * d / (2.0 * params.sigma2))
}

/// One reparameterized draw `exp(μ + σ z)`, `z ~ N(0, 1)`.
pub fn sample(params: FlowParams, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (params.mu + params.sigma2.sqrt() * z).exp()
}

/// Deterministic point-estimate modes for prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointMode {
    /// `exp(μ + σ²/2)`, the MSE-optimal estimate. Evaluation default.
    Mean,
    /// `exp(μ)`.
    Median,
    /// A single seeded draw.
    Sample,
}

/// Point estimate of the next delta under the given mode.
pub fn point_estimate(params: FlowParams, mode: PointMode, rng: &mut impl Rng) -> f64 {
    match mode {
        PointMode::Mean => (params.mu + 0.5 * params.sigma2).exp(),
        PointMode::Median => params.mu.exp(),
        PointMode::Sample => sample(params, rng),
    }
}
