//! Longitudinal label fusion: every timepoint's labels are carried into a
//! reference timepoint and combined with weights from local intensity
//! agreement.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{se3_exp, svf_exp, Direction, DisplacementField, RigidLog, Svf};
use crate::graph::TimepointData;
use crate::template::latent_deformations;
use crate::volume_io::{
    one_hot, resample_image, resample_one_hot, LabelTable, LabelVolume,
    TransformChain, TransformStep, Volume,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Intensity scale of the similarity kernel.
    pub sigma: f64,
    pub include_self: bool,
    /// Restrict fusion to these ids (background always included).
    pub labels: Option<Vec<i32>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            include_self: true,
            labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub labels: LabelVolume,
    /// Unnormalised score per fused id, in `ids` order.
    pub scores: Vec<Volume>,
    pub ids: Vec<i32>,
    /// Timepoints left out for lack of a label map.
    pub skipped: Vec<String>,
}

/// Scores closer than this fraction of the larger one count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Voxelwise argmax with near-ties going to the lowest id; `ids` ascending.
fn argmax_tolerant(scores: &[Vec<f64>], ids: &[i32], len: usize) -> Vec<i32> {
    (0..len)
        .into_par_iter()
        .map(|v| {
            let mut best = 0;
            for c in 1..scores.len() {
                let (a, b) = (scores[c][v], scores[best][v]);
                if a - b > TIE_TOLERANCE * a.abs().max(b.abs()) {
                    best = c;
                }
            }
            ids[best]
        })
        .collect()
}

/// Gaussian intensity-agreement weight.
pub fn fusion_weight(reference: f64, moved: f64, sigma: f64) -> f64 {
    let d = reference - moved;
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Pull chain from the reference timepoint's world into timepoint `n`'s
/// world through the template.
fn reference_to_timepoint(
    r_rigid: &RigidLog,
    r_back: Option<&DisplacementField>,
    n_rigid: &RigidLog,
    n_fwd: Option<&DisplacementField>,
) -> TransformChain {
    let mut chain = TransformChain::rigid(se3_exp(r_rigid).inverse());
    if let Some(d) = r_back {
        chain.push(TransformStep::Deformation(d.clone()));
    }
    if let Some(d) = n_fwd {
        chain.push(TransformStep::Deformation(d.clone()));
    }
    chain.push(TransformStep::Rigid(se3_exp(n_rigid)));
    chain
}

pub fn longitudinal_segment(
    timepoints: &[TimepointData],
    latent_rigids: &[RigidLog],
    latent_svfs: Option<&[Svf]>,
    reference: usize,
    config: &FusionConfig,
) -> Result<FusionResult> {
    if !(config.sigma > 0.0) {
        return Err(Error::InvalidDesign(format!("fusion sigma {} must be positive", config.sigma)));
    }
    let n = timepoints.len();
    let reference_tp = timepoints
        .get(reference)
        .ok_or_else(|| Error::UnknownNode(format!("#{reference}")))?;
    if latent_rigids.len() != n {
        return Err(Error::MissingLatentTransform(format!(
            "{} latent rigids for {n} timepoints",
            latent_rigids.len()
        )));
    }
    let ref_labels = reference_tp
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingLabels(reference_tp.id.clone()))?;
    let grid = reference_tp.image.grid();
    grid.ensure_matches(ref_labels.grid(), "reference image vs labels")?;

    let forward = latent_deformations(latent_svfs, n, None)?;
    let backward = latent_svfs
        .map(|svfs| svf_exp(&svfs[reference], Direction::Inverse))
        .transpose()?;

    let mut skipped = Vec::new();
    let mut table = LabelTable::default();
    for tp in timepoints {
        match &tp.labels {
            Some(l) => table = table.merged(l.table()),
            None => skipped.push(tp.id.clone()),
        }
    }
    let ids: Vec<i32> = match &config.labels {
        Some(sel) => table.ids().into_iter().filter(|l| *l == 0 || sel.contains(l)).collect(),
        None => table.ids(),
    };
    let slot = |id: i32| ids.binary_search(&id).ok();

    let mut scores = vec![vec![0.0; grid.len()]; ids.len()];
    let ref_image = reference_tp.image.data();
    for (i, tp) in timepoints.iter().enumerate() {
        let Some(labels) = &tp.labels else { continue };
        let own: Vec<i32> = ids.iter().copied().filter(|&l| labels.table().contains(l)).collect();
        let (weights, channels) = if i == reference {
            if !config.include_self {
                continue;
            }
            (vec![1.0; grid.len()], one_hot(labels, &own)?)
        } else {
            let chain = reference_to_timepoint(
                &latent_rigids[reference],
                backward.as_ref(),
                &latent_rigids[i],
                forward[i].as_ref(),
            );
            let moved = resample_image(&tp.image, grid, &chain, 0.0)?;
            let w = ref_image
                .par_iter()
                .zip(moved.data().par_iter())
                .map(|(&a, &b)| fusion_weight(a, b, config.sigma))
                .collect();
            (w, resample_one_hot(labels, &own, grid, &chain)?)
        };
        for (id, ch) in own.iter().zip(channels) {
            let s = slot(*id).expect("id from the fused table");
            scores[s]
                .par_iter_mut()
                .zip(ch.data().par_iter().zip(weights.par_iter()))
                .for_each(|(acc, (p, w))| *acc += w * p);
        }
    }
    // A voxel with no evidence at all falls to background.
    let labels = LabelVolume::new(grid.clone(), argmax_tolerant(&scores, &ids, grid.len()), table)?;
    let scores = scores
        .into_iter()
        .map(|s| Volume::new(grid.clone(), s))
        .collect::<Result<_>>()?;
    Ok(FusionResult {
        labels,
        scores,
        ids,
        skipped,
    })
}
