//! Subject grid and subject-specific template: every timepoint is pulled
//! into a common unbiased space through the inverse of its latent
//! transform and fused voxelwise.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{se3_exp, svf_exp, Direction, DisplacementField, Grid, RigidLog, Svf};
use crate::graph::TimepointData;
use crate::volume_io::{
    argmax_labels, resample_image, resample_mask, resample_one_hot, LabelTable, LabelVolume,
    MaskVolume, TransformChain, TransformStep, Volume,
};

/// Margin added on every side of the bounding cuboid, in mm.
pub const GRID_PADDING_MM: f64 = 5.0;
pub const GRID_SPACING_MM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTemplate {
    pub intensity: Volume,
    pub mask: MaskVolume,
    pub segmentation: Option<LabelVolume>,
}

/// Axis-aligned 1 mm grid over the union of all timepoint fields of view,
/// mapped into template space by the inverse latent rigids and padded.
pub fn define_subject_grid(fovs: &[&Grid], latent_rigids: &[RigidLog]) -> Result<Grid> {
    if fovs.is_empty() {
        return Err(Error::InsufficientTimepoints { needed: 1, got: 0 });
    }
    if latent_rigids.len() != fovs.len() {
        return Err(Error::MissingLatentTransform(format!(
            "{} latent rigids for {} timepoints",
            latent_rigids.len(),
            fovs.len()
        )));
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (g, log) in fovs.iter().zip(latent_rigids) {
        let to_template = se3_exp(log).inverse();
        for c in g.corners_world() {
            let p = to_template.apply(&c);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
    }
    let centre = (lo + hi) * 0.5;
    let mut shape = [0usize; 3];
    let mut origin = Vector3::zeros();
    for a in 0..3 {
        let length = hi[a] - lo[a] + 2.0 * GRID_PADDING_MM;
        shape[a] = ((length - 1e-9) / GRID_SPACING_MM).ceil().max(0.0) as usize + 1;
        origin[a] = centre[a] - 0.5 * (shape[a] - 1) as f64 * GRID_SPACING_MM;
    }
    Grid::axis_aligned(shape, GRID_SPACING_MM, origin)
}

/// Pull chain from template world to timepoint world: latent deformation,
/// then latent rigid.
pub fn template_to_timepoint(rigid: &RigidLog, deformation: Option<&DisplacementField>) -> TransformChain {
    let mut chain = TransformChain::identity();
    if let Some(d) = deformation {
        chain.push(TransformStep::Deformation(d.clone()));
    }
    chain.push(TransformStep::Rigid(se3_exp(rigid)));
    chain
}

/// Integrated latent deformations, checked against the template grid.
pub(crate) fn latent_deformations(
    svfs: Option<&[Svf]>,
    n: usize,
    grid: Option<&Grid>,
) -> Result<Vec<Option<DisplacementField>>> {
    let Some(svfs) = svfs else {
        return Ok(vec![None; n]);
    };
    if svfs.len() != n {
        return Err(Error::MissingLatentTransform(format!(
            "{} latent fields for {n} timepoints",
            svfs.len()
        )));
    }
    svfs.par_iter()
        .map(|v| {
            if let Some(g) = grid {
                g.ensure_matches(v.grid(), "latent field vs template grid")?;
            }
            svf_exp(v, Direction::Forward).map(Some)
        })
        .collect()
}

/// Median for odd counts, midpoint of the two middle values for even.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Tissue mask of a timepoint: its own mask, else labels > 0, else
/// non-zero intensity.
pub fn timepoint_mask(tp: &TimepointData) -> Result<MaskVolume> {
    if let Some(m) = &tp.mask {
        return Ok(m.clone());
    }
    if let Some(l) = &tp.labels {
        let inside: Vec<bool> = l.labels().iter().map(|&v| v > 0).collect();
        return MaskVolume::from_binary(l.grid().clone(), &inside);
    }
    let inside: Vec<bool> = tp.image.data().iter().map(|&v| v != 0.0).collect();
    MaskVolume::from_binary(tp.image.grid().clone(), &inside)
}

fn fuse<F>(n_vox: usize, inputs: &[Vec<f64>], f: F) -> Vec<f64>
where
    F: Fn(&mut [f64]) -> f64 + Sync,
{
    (0..n_vox)
        .into_par_iter()
        .map_init(
            || vec![0.0; inputs.len()],
            |buf, i| {
                for (b, src) in buf.iter_mut().zip(inputs) {
                    *b = src[i];
                }
                f(buf)
            },
        )
        .collect()
}

/// Median intensity, mean mask and mean one-hot segmentation of all
/// timepoints resampled onto `grid`.
pub fn build_template(
    timepoints: &[TimepointData],
    latent_rigids: &[RigidLog],
    latent_svfs: Option<&[Svf]>,
    grid: &Grid,
) -> Result<SubjectTemplate> {
    let n = timepoints.len();
    if n == 0 {
        return Err(Error::InsufficientTimepoints { needed: 1, got: 0 });
    }
    if latent_rigids.len() != n {
        return Err(Error::MissingLatentTransform(format!(
            "{} latent rigids for {n} timepoints",
            latent_rigids.len()
        )));
    }
    let deformations = latent_deformations(latent_svfs, n, Some(grid))?;
    let chains: Vec<TransformChain> = latent_rigids
        .iter()
        .zip(&deformations)
        .map(|(r, d)| template_to_timepoint(r, d.as_ref()))
        .collect();

    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (tp, chain) in timepoints.iter().zip(&chains) {
        images.push(resample_image(&tp.image, grid, chain, 0.0)?.into_data());
        masks.push(resample_mask(&timepoint_mask(tp)?, grid, chain)?.probabilities().to_vec());
    }
    let intensity = Volume::new(grid.clone(), fuse(grid.len(), &images, median))?;
    let mask = MaskVolume::new(
        grid.clone(),
        fuse(grid.len(), &masks, |v| {
            v.sort_by(f64::total_cmp);
            (v.iter().sum::<f64>() / v.len() as f64).clamp(0.0, 1.0)
        }),
    )?;

    let labelled: Vec<(&LabelVolume, &TransformChain)> = timepoints
        .iter()
        .zip(&chains)
        .filter_map(|(tp, c)| tp.labels.as_ref().map(|l| (l, c)))
        .collect();
    let segmentation = if labelled.is_empty() {
        None
    } else {
        let table = labelled
            .iter()
            .fold(LabelTable::default(), |t, (l, _)| t.merged(l.table()));
        let ids = table.ids();
        let mut sums = vec![vec![0.0; grid.len()]; ids.len()];
        for (labels, chain) in &labelled {
            let own: Vec<i32> = ids
                .iter()
                .copied()
                .filter(|&l| labels.table().contains(l))
                .collect();
            let channels = resample_one_hot(labels, &own, grid, chain)?;
            for (id, ch) in own.iter().zip(channels) {
                let slot = ids.iter().position(|x| x == id).unwrap();
                sums[slot]
                    .par_iter_mut()
                    .zip(ch.data().par_iter())
                    .for_each(|(s, v)| *s += v);
            }
        }
        let out = argmax_labels(&sums, &ids);
        Some(LabelVolume::new(grid.clone(), out, table)?)
    };
    Ok(SubjectTemplate {
        intensity,
        mask,
        segmentation,
    })
}
