//! Recurrent MTPP forward pass.
//!
//! Three stages per consumed event: an affine input embedding, a tanh RNN
//! state update, and output heads (temporal flow, optional spatial flow, and
//! a softmax mark head over a fusion-updated state). The per-sequence joint
//! negative log-likelihood sums a mark term, a time term and — in spatial
//! mode — a travel-distance term for every predicted step.
//!
//! Step `j` (0-indexed) is the state after consuming event `j`; it predicts
//! event `j + 1`. A sequence of n events therefore scores n − 1 steps; the
//! first event is never predicted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{self, FlowHead, HeadOutput};
use crate::linalg::{axpy, Mat};
use crate::rng;
use crate::seqdata::Sequence;

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Embedding width D.
    pub embed: usize,
    /// Hidden width H.
    pub hidden: usize,
    /// Vocabulary size |C|.
    pub num_categories: usize,
    /// Cluster count M.
    pub num_clusters: usize,
}

/// Input-stage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams {
    /// Category embeddings, one row per category (|C| × D).
    pub w_c: Mat,
    pub w_t: Vec<f64>,
    pub w_d: Vec<f64>,
    pub b_v: Vec<f64>,
}

/// Update-stage parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub g_s: Mat,
    pub g_v: Mat,
    pub g_t: Vec<f64>,
    pub g_d: Vec<f64>,
    pub b_s: Vec<f64>,
}

/// Attention-weighted fusion of the sampled next delta into the hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseParams {
    pub alpha: f64,
    pub w_f: Vec<f64>,
}

/// Mark (category) head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkParams {
    /// |C| × H.
    pub v_s: Mat,
    pub b_c: Vec<f64>,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    pub embed: EmbedParams,
    pub rnn: RnnParams,
    pub fuse: FuseParams,
    pub mark: MarkParams,
    pub t_flow: FlowHead,
    /// Absent for non-spatial (product) models.
    pub d_flow: Option<FlowHead>,
}

/// Metadata attached to each tensor in the canonical enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: &'static str,
    pub trainable: bool,
    /// Fan-in of the linear map the tensor implements; 0 for biases and
    /// offsets, which initialize to zero.
    pub fan_in: usize,
}

pub struct TensorSlice<'a> {
    pub meta: TensorMeta,
    pub data: &'a [f64],
}

pub struct TensorSliceMut<'a> {
    pub meta: TensorMeta,
    pub data: &'a mut [f64],
}

fn meta(name: &'static str, trainable: bool, fan_in: usize) -> TensorMeta {
    TensorMeta {
        name,
        trainable,
        fan_in,
    }
}

impl ModelParams {
    /// All-zero parameters (useful as a gradient buffer and in tests).
    pub fn zeros(dims: Dims, spatial: bool, per_cluster_weights: bool) -> Self {
        ModelParams {
            dims,
            embed: EmbedParams {
                w_c: Mat::zeros(dims.num_categories, dims.embed),
                w_t: vec![0.0; dims.embed],
                w_d: vec![0.0; dims.embed],
                b_v: vec![0.0; dims.embed],
            },
            rnn: RnnParams {
                g_s: Mat::zeros(dims.hidden, dims.hidden),
                g_v: Mat::zeros(dims.hidden, dims.embed),
                g_t: vec![0.0; dims.hidden],
                g_d: vec![0.0; dims.hidden],
                b_s: vec![0.0; dims.hidden],
            },
            fuse: FuseParams {
                alpha: 0.0,
                w_f: vec![0.0; dims.hidden],
            },
            mark: MarkParams {
                v_s: Mat::zeros(dims.num_categories, dims.hidden),
                b_c: vec![0.0; dims.num_categories],
            },
            t_flow: FlowHead::zeros(dims.hidden, dims.num_clusters, per_cluster_weights),
            d_flow: spatial
                .then(|| FlowHead::zeros(dims.hidden, dims.num_clusters, per_cluster_weights)),
        }
    }

    /// Fresh random initialization: weights uniform in ±1/√fan-in drawn in
    /// canonical tensor order, biases and per-cluster offsets zero.
    pub fn init(dims: Dims, spatial: bool, per_cluster_weights: bool, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut params = Self::zeros(dims, spatial, per_cluster_weights);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng::derive(seed, 0x1217));
        for t in params.tensors_mut() {
            if t.meta.fan_in == 0 {
                continue;
            }
            let k = 1.0 / (t.meta.fan_in as f64).sqrt();
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-k..=k);
            }
        }
        params
    }

    pub fn spatial(&self) -> bool {
        self.d_flow.is_some()
    }

    /// Canonical ordered view of every tensor, frozen ones included.
    pub fn tensors(&self) -> Vec<TensorSlice<'_>> {
        let d = self.dims;
        let mut out: Vec<TensorSlice<'_>> = Vec::with_capacity(32);
        out.push(TensorSlice {
            meta: meta("embed.w_c", true, d.num_categories),
            data: self.embed.w_c.as_slice(),
        });
        out.push(TensorSlice {
            meta: meta("embed.w_t", true, 1),
            data: &self.embed.w_t,
        });
        out.push(TensorSlice {
            meta: meta("embed.w_d", true, 1),
            data: &self.embed.w_d,
        });
        out.push(TensorSlice {
            meta: meta("embed.b_v", true, 0),
            data: &self.embed.b_v,
        });
        out.push(TensorSlice {
            meta: meta("rnn.g_s", true, d.hidden),
            data: self.rnn.g_s.as_slice(),
        });
        out.push(TensorSlice {
            meta: meta("rnn.g_v", true, d.embed),
            data: self.rnn.g_v.as_slice(),
        });
        out.push(TensorSlice {
            meta: meta("rnn.g_t", true, 1),
            data: &self.rnn.g_t,
        });
        out.push(TensorSlice {
            meta: meta("rnn.g_d", true, 1),
            data: &self.rnn.g_d,
        });
        out.push(TensorSlice {
            meta: meta("rnn.b_s", true, 0),
            data: &self.rnn.b_s,
        });
        out.push(TensorSlice {
            meta: meta("fuse.alpha", true, 1),
            data: std::slice::from_ref(&self.fuse.alpha),
        });
        out.push(TensorSlice {
            meta: meta("fuse.w_f", true, 1),
            data: &self.fuse.w_f,
        });
        out.push(TensorSlice {
            meta: meta("mark.v_s", true, d.hidden),
            data: self.mark.v_s.as_slice(),
        });
        out.push(TensorSlice {
            meta: meta("mark.b_c", true, 0),
            data: &self.mark.b_c,
        });
        flow_tensors(&self.t_flow, T_FLOW_NAMES, d.hidden, &mut out);
        if let Some(df) = &self.d_flow {
            flow_tensors(df, D_FLOW_NAMES, d.hidden, &mut out);
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorSliceMut<'_>> {
        let d = self.dims;
        let mut out: Vec<TensorSliceMut<'_>> = Vec::with_capacity(32);
        out.push(TensorSliceMut {
            meta: meta("embed.w_c", true, d.num_categories),
            data: self.embed.w_c.as_mut_slice(),
        });
        out.push(TensorSliceMut {
            meta: meta("embed.w_t", true, 1),
            data: &mut self.embed.w_t,
        });
        out.push(TensorSliceMut {
            meta: meta("embed.w_d", true, 1),
            data: &mut self.embed.w_d,
        });
        out.push(TensorSliceMut {
            meta: meta("embed.b_v", true, 0),
            data: &mut self.embed.b_v,
        });
        out.push(TensorSliceMut {
            meta: meta("rnn.g_s", true, d.hidden),
            data: self.rnn.g_s.as_mut_slice(),
        });
        out.push(TensorSliceMut {
            meta: meta("rnn.g_v", true, d.embed),
            data: self.rnn.g_v.as_mut_slice(),
        });
        out.push(TensorSliceMut {
            meta: meta("rnn.g_t", true, 1),
            data: &mut self.rnn.g_t,
        });
        out.push(TensorSliceMut {
            meta: meta("rnn.g_d", true, 1),
            data: &mut self.rnn.g_d,
        });
        out.push(TensorSliceMut {
            meta: meta("rnn.b_s", true, 0),
            data: &mut self.rnn.b_s,
        });
        out.push(TensorSliceMut {
            meta: meta("fuse.alpha", true, 1),
            data: std::slice::from_mut(&mut self.fuse.alpha),
        });
        out.push(TensorSliceMut {
            meta: meta("fuse.w_f", true, 1),
            data: &mut self.fuse.w_f,
        });
        out.push(TensorSliceMut {
            meta: meta("mark.v_s", true, d.hidden),
            data: self.mark.v_s.as_mut_slice(),
        });
        out.push(TensorSliceMut {
            meta: meta("mark.b_c", true, 0),
            data: &mut self.mark.b_c,
        });
        flow_tensors_mut(&mut self.t_flow, T_FLOW_NAMES, d.hidden, &mut out);
        if let Some(df) = &mut self.d_flow {
            flow_tensors_mut(df, D_FLOW_NAMES, d.hidden, &mut out);
        }
        out
    }

    /// Total number of scalar parameters, frozen ones included.
    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Dimension and finiteness checks.
    pub fn validate(&self) -> Result<()> {
        for t in self.tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: t.meta.name.into(),
                    step: None,
                });
            }
        }
        let d = self.dims;
        let checks = [
            ("embed.w_c", self.embed.w_c.rows(), d.num_categories),
            ("embed.w_c cols", self.embed.w_c.cols(), d.embed),
            ("rnn.g_s", self.rnn.g_s.rows(), d.hidden),
            ("rnn.g_v cols", self.rnn.g_v.cols(), d.embed),
            ("mark.v_s", self.mark.v_s.rows(), d.num_categories),
            ("mark.v_s cols", self.mark.v_s.cols(), d.hidden),
            ("t_flow clusters", self.t_flow.num_clusters(), d.num_clusters),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(Error::ShapeMismatch {
                    what: what.into(),
                    expected,
                    got,
                });
            }
        }
        if let Some(df) = &self.d_flow {
            if df.num_clusters() != d.num_clusters {
                return Err(Error::ShapeMismatch {
                    what: "d_flow clusters".into(),
                    expected: d.num_clusters,
                    got: df.num_clusters(),
                });
            }
        }
        Ok(())
    }
}

/// Tensor names for the two flow heads, in field order:
/// (w_mu, b_mu, w_rho, b_rho, cluster_mu, cluster_rho, phi, anchor_mu, anchor_rho).
const T_FLOW_NAMES: [&str; 9] = [
    "t_flow.w_mu",
    "t_flow.b_mu",
    "t_flow.w_rho",
    "t_flow.b_rho",
    "t_flow.cluster_mu",
    "t_flow.cluster_rho",
    "t_flow.phi",
    "t_flow.anchor_mu",
    "t_flow.anchor_rho",
];
const D_FLOW_NAMES: [&str; 9] = [
    "d_flow.w_mu",
    "d_flow.b_mu",
    "d_flow.w_rho",
    "d_flow.b_rho",
    "d_flow.cluster_mu",
    "d_flow.cluster_rho",
    "d_flow.phi",
    "d_flow.anchor_mu",
    "d_flow.anchor_rho",
];

fn flow_tensors<'a>(
    head: &'a FlowHead,
    names: [&'static str; 9],
    hidden: usize,
    out: &mut Vec<TensorSlice<'a>>,
) {
    out.push(TensorSlice {
        meta: meta(names[0], true, hidden),
        data: head.w_mu.as_slice(),
    });
    out.push(TensorSlice {
        meta: meta(names[1], true, 0),
        data: std::slice::from_ref(&head.b_mu),
    });
    out.push(TensorSlice {
        meta: meta(names[2], true, hidden),
        data: head.w_rho.as_slice(),
    });
    out.push(TensorSlice {
        meta: meta(names[3], true, 0),
        data: std::slice::from_ref(&head.b_rho),
    });
    out.push(TensorSlice {
        meta: meta(names[4], true, 0),
        data: &head.cluster_mu,
    });
    out.push(TensorSlice {
        meta: meta(names[5], true, 0),
        data: &head.cluster_rho,
    });
    if let Some(t) = &head.transfer {
        out.push(TensorSlice {
            meta: meta(names[6], !t.phi_frozen, 0),
            data: std::slice::from_ref(&t.phi),
        });
        out.push(TensorSlice {
            meta: meta(names[7], false, 0),
            data: &t.anchor_mu,
        });
        out.push(TensorSlice {
            meta: meta(names[8], false, 0),
            data: &t.anchor_rho,
        });
    }
}

fn flow_tensors_mut<'a>(
    head: &'a mut FlowHead,
    names: [&'static str; 9],
    hidden: usize,
    out: &mut Vec<TensorSliceMut<'a>>,
) {
    out.push(TensorSliceMut {
        meta: meta(names[0], true, hidden),
        data: head.w_mu.as_mut_slice(),
    });
    out.push(TensorSliceMut {
        meta: meta(names[1], true, 0),
        data: std::slice::from_mut(&mut head.b_mu),
    });
    out.push(TensorSliceMut {
        meta: meta(names[2], true, hidden),
        data: head.w_rho.as_mut_slice(),
    });
    out.push(TensorSliceMut {
        meta: meta(names[3], true, 0),
        data: std::slice::from_mut(&mut head.b_rho),
    });
    out.push(TensorSliceMut {
        meta: meta(names[4], true, 0),
        data: &mut head.cluster_mu,
    });
    out.push(TensorSliceMut {
        meta: meta(names[5], true, 0),
        data: &mut head.cluster_rho,
    });
    if let Some(t) = &mut head.transfer {
        out.push(TensorSliceMut {
            meta: meta(names[6], !t.phi_frozen, 0),
            data: std::slice::from_mut(&mut t.phi),
        });
        out.push(TensorSliceMut {
            meta: meta(names[7], false, 0),
            data: &mut t.anchor_mu,
        });
        out.push(TensorSliceMut {
            meta: meta(names[8], false, 0),
            data: &mut t.anchor_rho,
        });
    }
}

/// Which prediction steps of a sequence to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Range {
    /// Steps whose predicted event lies in the training prefix.
    Train,
    /// Steps whose predicted event lies in the test suffix; the hidden state
    /// is still rolled through the full training prefix first.
    Test,
    /// Every prediction step.
    All,
}

/// Inclusive step-index bounds `[lo, hi]` scored under a range, if non-empty.
pub fn scored_bounds(seq: &Sequence, range: Range) -> Option<(usize, usize)> {
    let n = seq.len();
    if n < 2 {
        return None;
    }
    let split = seq.split_index;
    let (lo, hi) = match range {
        Range::Train => {
            if split < 2 {
                return None;
            }
            (0, split - 2)
        }
        Range::Test => {
            if split >= n {
                return None;
            }
            (split - 1, n - 2)
        }
        Range::All => (0, n - 2),
    };
    (lo <= hi).then_some((lo, hi))
}

/// Per-event state cached while rolling the RNN.
#[derive(Debug, Clone)]
pub struct ConsumedStep {
    pub embedding: Vec<f64>,
    pub hidden: Vec<f64>,
    pub dt: f64,
    pub dd: f64,
    pub category: usize,
}

/// Everything a scored step contributes, cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ScoredStep {
    /// Index of the state that makes this prediction.
    pub step: usize,
    pub target_category: usize,
    pub target_dt: f64,
    pub target_dd: f64,
    pub t_out: HeadOutput,
    pub d_out: Option<HeadOutput>,
    /// Standard-normal draw behind the reparameterized fusion delta.
    pub z: f64,
    pub fusion_delta: f64,
    pub fused: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// (mark, time, distance) negative log-likelihood terms.
    pub nll: (f64, f64, f64),
}

/// Cached forward pass over one sequence.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub consumed: Vec<ConsumedStep>,
    pub scored: Vec<ScoredStep>,
}

impl ForwardTrace {
    /// Hidden states of the scored prediction steps.
    pub fn hidden_states(&self) -> Vec<&[f64]> {
        self.scored
            .iter()
            .map(|s| self.consumed[s.step].hidden.as_slice())
            .collect()
    }

    /// Fusion-updated states of the scored prediction steps.
    pub fn fused_states(&self) -> Vec<&[f64]> {
        self.scored.iter().map(|s| s.fused.as_slice()).collect()
    }

    /// (mark, time, distance) NLL triples per scored step.
    pub fn per_step_nll(&self) -> Vec<(f64, f64, f64)> {
        self.scored.iter().map(|s| s.nll).collect()
    }

    pub fn total_nll(&self) -> f64 {
        self.scored
            .iter()
            .map(|s| s.nll.0 + s.nll.1 + s.nll.2)
            .sum()
    }

    pub fn num_scored(&self) -> usize {
        self.scored.len()
    }
}

/// Input embedding of one event (Eq.-1 stage).
pub fn embed_event(params: &ModelParams, category: usize, dt: f64, dd: f64) -> Result<Vec<f64>> {
    if category >= params.dims.num_categories {
        return Err(Error::CategoryOutOfRange {
            category,
            num_categories: params.dims.num_categories,
        });
    }
    let mut v = params.embed.w_c.row(category).to_vec();
    axpy(dt, &params.embed.w_t, &mut v);
    axpy(dd, &params.embed.w_d, &mut v);
    axpy(1.0, &params.embed.b_v, &mut v);
    Ok(v)
}

/// Hidden-state update: `tanh(G_s s + G_v v + g_t Δt + g_d Δd + b_s)`.
pub fn rnn_step(params: &ModelParams, s_prev: &[f64], v: &[f64], dt: f64, dd: f64) -> Vec<f64> {
    let mut a = params.rnn.g_s.matvec(s_prev);
    params.rnn.g_v.matvec_acc(v, &mut a);
    axpy(dt, &params.rnn.g_t, &mut a);
    axpy(dd, &params.rnn.g_d, &mut a);
    axpy(1.0, &params.rnn.b_s, &mut a);
    for x in &mut a {
        *x = x.tanh();
    }
    a
}

/// Attention-weighted fusion: `s* = s + α · w_f · δ`.
pub fn fuse(params: &ModelParams, state: &[f64], delta: f64) -> Vec<f64> {
    let mut out = state.to_vec();
    axpy(params.fuse.alpha * delta, &params.fuse.w_f, &mut out);
    out
}

/// Log-probabilities of the next category from a fused state.
pub fn mark_log_probs(params: &ModelParams, fused: &[f64]) -> Vec<f64> {
    let mut logits = params.mark.v_s.matvec(fused);
    axpy(1.0, &params.mark.b_c, &mut logits);
    log_softmax(&mut logits);
    logits
}

/// In-place log-softmax, stabilized by max subtraction.
pub fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in logits.iter_mut() {
        *x -= lse;
    }
}

/// Resolve the flow-routing cluster of a sequence.
pub fn sequence_cluster(params: &ModelParams, seq: &Sequence) -> Result<usize> {
    match seq.cluster {
        Some(c) if c < params.dims.num_clusters => Ok(c),
        Some(c) => Err(Error::CategoryOutOfRange {
            category: c,
            num_categories: params.dims.num_clusters,
        }),
        None if params.dims.num_clusters == 1 => Ok(0),
        None => Err(Error::InvalidConfig(format!(
            "sequence '{}' has no cluster assignment but the model has {} clusters",
            seq.user_id, params.dims.num_clusters
        ))),
    }
}

/// Joint negative log-likelihood of a sequence over a scored range.
///
/// Rolls the RNN from the zero state; at each scored step the temporal (and
/// spatial) flow densities are evaluated at the true next deltas while the
/// fusion input is a reparameterized sample, so the mark head conditions on a
/// draw from the model's own delta distribution. The per-step noise is keyed
/// by (seed, user id, step), which makes the train and test contributions of
/// a fixed seed compose exactly.
pub fn sequence_nll(
    params: &ModelParams,
    seq: &Sequence,
    range: Range,
    seed: u64,
) -> Result<(f64, ForwardTrace)> {
    let cluster = sequence_cluster(params, seq)?;
    let Some((lo, hi)) = scored_bounds(seq, range) else {
        return Ok((0.0, ForwardTrace::default()));
    };
    let seq_seed = rng::sequence_seed(seed, &seq.user_id);
    let spatial = params.spatial();

    let mut trace = ForwardTrace {
        consumed: Vec::with_capacity(hi + 1),
        scored: Vec::with_capacity(hi - lo + 1),
    };
    let mut state = vec![0.0; params.dims.hidden];

    for j in 0..=hi {
        let (dt, dd) = (seq.delta_t[j], seq.delta_d[j]);
        let category = seq.events[j].category;
        let v = embed_event(params, category, dt, dd)?;
        state = rnn_step(params, &state, &v, dt, dd);
        trace.consumed.push(ConsumedStep {
            embedding: v,
            hidden: state.clone(),
            dt,
            dd,
            category,
        });

        if j < lo {
            continue;
        }
        let target_category = seq.events[j + 1].category;
        let target_dt = seq.delta_t[j + 1];
        let target_dd = seq.delta_d[j + 1];

        let t_out = params.t_flow.output(&state, cluster)?;
        let time_nll = -flows::log_pdf(t_out.params(), target_dt)?;

        let (d_out, dist_nll) = if spatial {
            let head = params.d_flow.as_ref().expect("spatial mode");
            let out = head.output(&state, cluster)?;
            let nll = -flows::log_pdf(out.params(), target_dd)?;
            (Some(out), nll)
        } else {
            (None, 0.0)
        };

        let z = rng::step_normal(seq_seed, j);
        let fusion_src = d_out.as_ref().unwrap_or(&t_out);
        let fusion_delta = (fusion_src.mu + fusion_src.sigma2.sqrt() * z).exp();
        let fused = fuse(params, &state, fusion_delta);
        let log_probs = mark_log_probs(params, &fused);
        let mark_nll = -log_probs[target_category];

        let step_total = mark_nll + time_nll + dist_nll;
        if !step_total.is_finite() {
            return Err(Error::NonFinite {
                what: format!("NLL of sequence '{}'", seq.user_id),
                step: Some(j),
            });
        }
        trace.scored.push(ScoredStep {
            step: j,
            target_category,
            target_dt,
            target_dd,
            t_out,
            d_out,
            z,
            fusion_delta,
            fused,
            log_probs,
            nll: (mark_nll, time_nll, dist_nll),
        });
    }
    Ok((trace.total_nll(), trace))
}
