//! Adam training loop, early stopping and checkpoint serialization.
//!
//! A training run fits cluster thresholds on the dataset's training medians,
//! initializes (or transfer-initializes) the model, and optimizes the mean
//! per-step NLL with shuffled mini-batches. The last tenth of the sequences
//! (sorted by user id) is held out for early stopping; the checkpoint with
//! the best held-out NLL is returned together with the epoch-indexed curve.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clusters::{self, ClusterModel};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::flows::PointMode;
use crate::grad::{self, GradientSet};
use crate::mtpp::{scored_bounds, Dims, ModelParams, Range};
use crate::rng;
use crate::seqdata::{RegionDataset, Sequence};
use crate::transfer;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything a training run needs beyond the dataset itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without held-out NLL improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Embedding width D.
    pub dim_embed: usize,
    /// Hidden width H.
    pub dim_hidden: usize,
    /// Cluster count M.
    pub num_clusters: usize,
    /// Initial value of the transfer attention scalars.
    pub phi_init: f64,
    /// Keep φ fixed at `phi_init` (makes a φ = 0 transfer run reduce exactly
    /// to scratch training).
    pub freeze_phi: bool,
    /// Copy the origin trunk (embedding, RNN, fusion, mark head) instead of
    /// fresh-initializing it. Requires matching dimensions and vocabulary.
    pub warm_start_trunk: bool,
    /// Give each cluster its own flow projection rows instead of shared ones.
    pub per_cluster_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            dim_embed: 64,
            dim_hidden: 64,
            num_clusters: 3,
            phi_init: 0.5,
            freeze_phi: false,
            warm_start_trunk: false,
            per_cluster_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.dim_embed == 0 || self.dim_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.num_clusters == 0 {
            return bad("cluster count must be at least 1");
        }
        Ok(())
    }
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: GradientSet,
    pub v: GradientSet,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            step: 0,
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update. Frozen tensors are untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);

    let mut p_t = params.tensors_mut();
    let g_t = grads.tensors();
    let mut m_t = state.m.tensors_mut();
    let mut v_t = state.v.tensors_mut();
    for i in 0..p_t.len() {
        if !p_t[i].meta.trainable {
            continue;
        }
        debug_assert_eq!(p_t[i].meta.name, g_t[i].meta.name);
        let (p, g) = (&mut p_t[i].data, g_t[i].data);
        let (m, v) = (&mut m_t[i].data, &mut v_t[i].data);
        for k in 0..p.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
}

/// Dataset facts a checkpoint carries along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_categories: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub spatial_mode: bool,
}

impl DatasetMeta {
    pub fn of(dataset: &RegionDataset) -> Self {
        DatasetMeta {
            num_categories: dataset.num_categories,
            t_min: dataset.t_min,
            t_max: dataset.t_max,
            spatial_mode: dataset.spatial_mode,
        }
    }
}

/// A per-cluster (mean, variance pre-activation) bias pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub mu: f64,
    pub rho: f64,
}

/// The transferable per-cluster flow offsets of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTable {
    pub temporal: Vec<AnchorPair>,
    pub spatial: Option<Vec<AnchorPair>>,
}

impl AnchorTable {
    /// Cluster i's flow bias is the shared head bias plus its offset; the
    /// combined pair is what a per-cluster-independent flow would have
    /// learned, and is what transfers.
    pub fn of(params: &ModelParams) -> Self {
        let pairs = |head: &crate::flows::FlowHead| {
            head.cluster_mu
                .iter()
                .zip(&head.cluster_rho)
                .map(|(&mu, &rho)| AnchorPair {
                    mu: head.b_mu + mu,
                    rho: head.b_rho + rho,
                })
                .collect::<Vec<_>>()
        };
        AnchorTable {
            temporal: pairs(&params.t_flow),
            spatial: params.d_flow.as_ref().map(pairs),
        }
    }
}

/// How and why a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Training NLL of the last completed epoch; absent when no epoch ran.
    pub final_train_nll: Option<f64>,
    pub best_val_nll: f64,
    pub stop_reason: String,
    pub transferred: bool,
}

/// Serialized model plus everything needed to reuse or transfer it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
    pub meta: DatasetMeta,
    pub clusters: ClusterModel,
    pub anchors: AnchorTable,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                got: ckpt.version,
            });
        }
        ckpt.params.validate()?;
        ckpt.clusters.validate()?;
        Ok(ckpt)
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_mae: f64,
}

const VAL_SEED_TAG: u64 = 0x56414c;
const SHUFFLE_SEED_TAG: u64 = 0x534846;

/// Train a model on one region, from scratch or transfer-initialized.
///
/// Cluster thresholds are (re)fitted on this dataset's training medians, so a
/// transfer run clusters the target region by its own quantiles. Returns the
/// best-validation checkpoint and the per-epoch curve. A run whose loss goes
/// non-finite aborts cleanly and returns the best checkpoint seen so far.
pub fn train_region(
    dataset: &RegionDataset,
    config: &TrainConfig,
    transfer_from: Option<&Checkpoint>,
) -> Result<(Checkpoint, Vec<CurvePoint>)> {
    config.validate()?;
    dataset.validate()?;

    let mut data = dataset.clone();
    let cluster_model = clusters::fit_and_assign(&mut data, config.num_clusters)?;

    let dims = Dims {
        embed: config.dim_embed,
        hidden: config.dim_hidden,
        num_categories: data.num_categories,
        num_clusters: config.num_clusters,
    };
    let mut params = ModelParams::init(
        dims,
        data.spatial_mode,
        config.per_cluster_weights,
        config.seed,
    );
    if let Some(origin) = transfer_from {
        transfer::apply(origin, &mut params, config)?;
    }

    // Hold out the tail tenth of the (user-id-sorted) sequences.
    let n = data.sequences.len();
    let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let (train_seqs, val_seqs) = data.sequences.split_at(n - n_val);
    let step_counts: Vec<usize> = train_seqs
        .iter()
        .map(|s| scored_bounds(s, Range::Train).map_or(0, |(lo, hi)| hi - lo + 1))
        .collect();

    let val_seed = rng::derive(config.seed, VAL_SEED_TAG);
    let val_refs: Vec<&Sequence> = if val_seqs.is_empty() {
        train_seqs.iter().collect()
    } else {
        val_seqs.iter().collect()
    };
    let val_nll_of = |p: &ModelParams| grad::batch_nll(p, &val_refs, val_seed);
    let val_mae_of = |p: &ModelParams| -> f64 {
        let opts = EvalOptions {
            mode: PointMode::Mean,
            seed: val_seed,
        };
        eval::evaluate_sequences(p, &val_refs, &opts).map_or(f64::NAN, |r| r.mae)
    };

    let mut best_val = val_nll_of(&params)?;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut curve = Vec::new();
    let mut adam = AdamState::new(&params);
    let mut final_train_nll = None;
    let mut stop_reason = "max_epochs".to_string();
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    'epochs: for epoch in 1..=config.max_epochs {
        // Shuffling is re-seeded per epoch; the fusion noise is not, so a
        // zero-learning-rate run sees a constant loss surface.
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::derive(
            rng::derive(config.seed, epoch as u64),
            SHUFFLE_SEED_TAG,
        ));
        order.shuffle(&mut shuffle_rng);

        let mut nll_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &train_seqs[i]).collect();
            let batch_steps: usize = chunk.iter().map(|&i| step_counts[i]).sum();
            let (mean_nll, grads) = match grad::backward(&params, &batch, config.seed) {
                Ok(out) => out,
                Err(Error::NonFinite { .. }) => {
                    stop_reason = format!("diverged at epoch {epoch}");
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !mean_nll.is_finite() {
                stop_reason = format!("diverged at epoch {epoch}");
                break 'epochs;
            }
            adam_step(&mut params, &grads, &mut adam, config);
            nll_sum += mean_nll * batch_steps as f64;
            steps += batch_steps;
        }
        let train_nll = if steps == 0 { 0.0 } else { nll_sum / steps as f64 };
        let val_nll = val_nll_of(&params)?;
        let val_mae = val_mae_of(&params);
        curve.push(CurvePoint {
            epoch,
            train_nll,
            val_nll,
            val_mae,
        });
        epochs_run = epoch;
        final_train_nll = Some(train_nll);

        if !val_nll.is_finite() {
            stop_reason = format!("diverged at epoch {epoch}");
            break;
        }
        if val_nll < best_val {
            best_val = val_nll;
            best_params = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stop_reason = format!("patience at epoch {epoch}");
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        anchors: AnchorTable::of(&best_params),
        meta: DatasetMeta::of(&data),
        clusters: cluster_model,
        provenance: Provenance {
            config: config.clone(),
            epochs_run,
            best_epoch,
            final_train_nll,
            best_val_nll: best_val,
            stop_reason,
            transferred: transfer_from.is_some(),
        },
        params: best_params,
    };
    Ok((checkpoint, curve))
}
