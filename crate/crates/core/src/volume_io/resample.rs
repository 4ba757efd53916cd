//! Pull-back resampling through a chain of rigid and dense transforms.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::{LabelVolume, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::geometry::sample::{corners, sample_scalar};
use crate::geometry::{Boundary, DisplacementField, Grid, RigidTransform};

/// One link of a [`TransformChain`].
#[derive(Clone, Debug)]
pub enum TransformStep {
    /// World to world.
    Rigid(RigidTransform),
    /// World to world through `x -> x + u(x)`, evaluated on the field's own
    /// grid (displacements in that grid's voxel units, edge-clamped).
    Deformation(DisplacementField),
}

impl TransformStep {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            TransformStep::Rigid(r) => r.apply(p),
            TransformStep::Deformation(d) => {
                let g = d.grid();
                g.voxel_to_world(&d.map_voxel(&g.world_to_voxel(p)))
            }
        }
    }
}

/// Maps destination world coordinates to source world coordinates by
/// applying its steps in order.
#[derive(Clone, Debug, Default)]
pub struct TransformChain {
    steps: Vec<TransformStep>,
}

impl TransformChain {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(steps: Vec<TransformStep>) -> Self {
        Self { steps }
    }

    pub fn rigid(r: RigidTransform) -> Self {
        Self::new(vec![TransformStep::Rigid(r)])
    }

    /// Appends a step applied after the existing ones.
    pub fn then(mut self, step: TransformStep) -> Self {
        self.steps.push(step);
        self
    }

    pub fn push(&mut self, step: TransformStep) {
        self.steps.push(step);
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    pub fn map(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.steps.iter().fold(*p, |q, s| s.apply(&q))
    }

    fn validate(&self) -> Result<()> {
        for s in &self.steps {
            if let TransformStep::Deformation(d) = s {
                if !d.is_finite() {
                    return Err(Error::NonFiniteField);
                }
            }
        }
        Ok(())
    }

    /// Source voxel coordinate for every destination voxel.
    fn source_points(&self, src: &Grid, dst: &Grid) -> Vec<Vector3<f64>> {
        let direct = self.steps.is_empty() && src.matches(dst);
        (0..dst.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = dst.coords(i);
                let v = Vector3::new(x as f64, y as f64, z as f64);
                if direct {
                    return v;
                }
                src.world_to_voxel(&self.map(&dst.voxel_to_world(&v)))
            })
            .collect()
    }
}

/// Trilinear resampling of an image onto `dst`; outside the source field
/// of view the value is `fill`.
pub fn resample_image(src: &Volume, dst: &Grid, chain: &TransformChain, fill: f64) -> Result<Volume> {
    chain.validate()?;
    let shape = src.grid().shape();
    let data = chain
        .source_points(src.grid(), dst)
        .par_iter()
        .map(|p| sample_scalar(src.data(), shape, p, Boundary::Fill(fill)))
        .collect();
    Volume::new(dst.clone(), data)
}

pub fn resample_mask(src: &MaskVolume, dst: &Grid, chain: &TransformChain) -> Result<MaskVolume> {
    chain.validate()?;
    let shape = src.grid().shape();
    let data = chain
        .source_points(src.grid(), dst)
        .par_iter()
        .map(|p| sample_scalar(src.probabilities(), shape, p, Boundary::Fill(0.0)).clamp(0.0, 1.0))
        .collect();
    MaskVolume::new(dst.clone(), data)
}

/// Interpolated indicator of each id in `ids`; corners outside the source
/// count as background (id 0).
pub fn resample_one_hot(
    src: &LabelVolume,
    ids: &[i32],
    dst: &Grid,
    chain: &TransformChain,
) -> Result<Vec<Volume>> {
    if let Some(&bad) = ids.iter().find(|&&l| !src.table().contains(l)) {
        return Err(Error::UnknownLabel(bad));
    }
    chain.validate()?;
    let shape = src.grid().shape();
    let pts = chain.source_points(src.grid(), dst);
    let labels = src.labels();
    let channels: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|&id| {
            pts.iter()
                .map(|p| {
                    if !p.iter().all(|v| v.is_finite()) {
                        return if id == 0 { 1.0 } else { 0.0 };
                    }
                    corners(shape, p, false)
                        .iter()
                        .filter(|&&(i, _)| i.map_or(0, |i| labels[i]) == id)
                        .map(|&(_, w)| w)
                        .sum()
                })
                .collect()
        })
        .collect();
    channels
        .into_iter()
        .map(|c| Volume::new(dst.clone(), c))
        .collect()
}

/// Label resampling by weighted vote of the eight neighbouring source
/// labels; ties go to the lowest id.
pub fn resample_labels(src: &LabelVolume, dst: &Grid, chain: &TransformChain) -> Result<LabelVolume> {
    chain.validate()?;
    let shape = src.grid().shape();
    let labels = src.labels();
    let out = chain
        .source_points(src.grid(), dst)
        .par_iter()
        .map(|p| {
            if !p.iter().all(|v| v.is_finite()) {
                return 0;
            }
            let mut votes: [(i32, f64); 8] = [(0, 0.0); 8];
            let mut n = 0;
            for (i, w) in corners(shape, p, false) {
                let l = i.map_or(0, |i| labels[i]);
                match votes[..n].iter_mut().find(|(id, _)| *id == l) {
                    Some(v) => v.1 += w,
                    None => {
                        votes[n] = (l, w);
                        n += 1;
                    }
                }
            }
            let mut best = votes[0];
            for &v in &votes[1..n] {
                if v.1 > best.1 + 1e-12 || ((v.1 - best.1).abs() <= 1e-12 && v.0 < best.0) {
                    best = v;
                }
            }
            best.0
        })
        .collect();
    LabelVolume::new(dst.clone(), out, src.table().clone())
}

/// Any resamplable payload.
#[derive(Clone, Copy, Debug)]
pub enum SourceVolume<'a> {
    Image(&'a Volume),
    Mask(&'a MaskVolume),
    Labels(&'a LabelVolume),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Resampled {
    Image(Volume),
    Mask(MaskVolume),
    Labels(LabelVolume),
}

/// Resamples with the natural interpolation for the payload: trilinear
/// for images and masks, neighbour vote for labels.
pub fn resample(src: SourceVolume, dst: &Grid, chain: &TransformChain) -> Result<Resampled> {
    Ok(match src {
        SourceVolume::Image(v) => Resampled::Image(resample_image(v, dst, chain, 0.0)?),
        SourceVolume::Mask(m) => Resampled::Mask(resample_mask(m, dst, chain)?),
        SourceVolume::Labels(l) => Resampled::Labels(resample_labels(l, dst, chain)?),
    })
}
