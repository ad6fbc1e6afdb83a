//! Origin → target flow transfer.
//!
//! A trained origin checkpoint exports one (mean, variance pre-activation)
//! bias pair per cluster and per flow head. A target model imports them as
//! frozen anchors, aligned cluster i ↔ cluster i, and blends them through a
//! trainable attention scalar per head. Everything else trains from scratch
//! (optionally warm-started).
//!
//! Anchors are dimension-free scalars, so origin and target may use different
//! hidden widths and vocabularies; only the cluster count must match.

use crate::error::{Error, Result};
use crate::flows::{FlowHead, TransferTerms};
use crate::mtpp::ModelParams;
use crate::train::{AnchorPair, AnchorTable, Checkpoint, TrainConfig};

/// Read the per-cluster anchor table out of an origin checkpoint, checking
/// the cluster count against the target's.
pub fn extract_anchors<'a>(origin: &'a Checkpoint, target_m: usize) -> Result<&'a AnchorTable> {
    if origin.clusters.m != target_m {
        return Err(Error::ClusterCountMismatch {
            origin: origin.clusters.m,
            target: target_m,
        });
    }
    Ok(&origin.anchors)
}

/// Put one flow head into transfer mode with the given anchors.
pub fn build_target_head(
    head: &mut FlowHead,
    anchors: &[AnchorPair],
    phi_init: f64,
    phi_frozen: bool,
) {
    head.transfer = Some(TransferTerms {
        phi: phi_init,
        phi_frozen,
        anchor_mu: anchors.iter().map(|a| a.mu).collect(),
        anchor_rho: anchors.iter().map(|a| a.rho).collect(),
    });
}

/// Wire a freshly initialized target model to an origin checkpoint.
pub fn apply(origin: &Checkpoint, params: &mut ModelParams, config: &TrainConfig) -> Result<()> {
    let anchors = extract_anchors(origin, params.dims.num_clusters)?;
    build_target_head(
        &mut params.t_flow,
        &anchors.temporal,
        config.phi_init,
        config.freeze_phi,
    );
    if let Some(d_flow) = &mut params.d_flow {
        let spatial = anchors
            .spatial
            .as_ref()
            .ok_or(Error::MissingSpatialAnchors)?;
        build_target_head(d_flow, spatial, config.phi_init, config.freeze_phi);
    }
    if config.warm_start_trunk {
        warm_start_trunk(origin, params)?;
    }
    Ok(())
}

/// Copy the origin trunk (embedding, RNN, fusion, mark head) into the target.
///
/// Requires identical embedding/hidden widths and vocabulary sizes.
pub fn warm_start_trunk(origin: &Checkpoint, params: &mut ModelParams) -> Result<()> {
    let od = origin.params.dims;
    let td = params.dims;
    if od.embed != td.embed || od.hidden != td.hidden || od.num_categories != td.num_categories {
        return Err(Error::WarmStartMismatch {
            origin_d: od.embed,
            origin_h: od.hidden,
            origin_c: od.num_categories,
            target_d: td.embed,
            target_h: td.hidden,
            target_c: td.num_categories,
        });
    }
    params.embed = origin.params.embed.clone();
    params.rnn = origin.params.rnn.clone();
    params.fuse = origin.params.fuse.clone();
    params.mark = origin.params.mark.clone();
    Ok(())
}
