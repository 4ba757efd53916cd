//! MAP estimation of the latent transforms: a least-absolute-deviations
//! fit with a Laplace zero-sum prior, solved as a small linear program
//! once per rigid coordinate and once per voxel and coordinate for SVFs.

mod simplex;

use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{RigidLog, Svf, VectorField};
use crate::graph::IncidenceMatrix;

pub use simplex::{assemble_lp, LadSolver, LpStandardForm};

/// Default dilation (voxels) of the union brain mask bounding the SVF solve.
pub const MASK_DILATION: usize = 3;

/// One scalar L1 fit: observations `r` (one per row of `W`) and the prior
/// weight `ratio`.
#[derive(Clone, Debug, PartialEq)]
pub struct LadProblem {
    pub observations: Vec<f64>,
    pub incidence: IncidenceMatrix,
    pub ratio: f64,
}

impl LadProblem {
    pub fn new(observations: Vec<f64>, incidence: IncidenceMatrix, ratio: f64) -> Result<Self> {
        let p = Self {
            observations,
            incidence,
            ratio,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio.is_finite()) {
            return Err(Error::InvalidDesign(format!("ratio must be positive, got {}", self.ratio)));
        }
        if self.observations.len() != self.incidence.edges() {
            return Err(Error::InvalidDesign(format!(
                "{} observations for {} incidence rows",
                self.observations.len(),
                self.incidence.edges()
            )));
        }
        if self.observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign("non-finite observation".into()));
        }
        if self.incidence.nodes() == 0 {
            return Err(Error::InvalidDesign("no latent variables".into()));
        }
        Ok(())
    }

    /// `ratio * |sum t| + sum_k |r_k - (W t)_k|`.
    pub fn objective(&self, t: &[f64]) -> f64 {
        objective(&self.incidence, &self.observations, self.ratio, t)
    }

    pub fn solve(&self) -> Result<LadSolution> {
        solve_lad(self)
    }
}

fn objective(w: &IncidenceMatrix, r: &[f64], ratio: f64, t: &[f64]) -> f64 {
    let prior = ratio * t.iter().sum::<f64>().abs();
    prior
        + w.apply(t)
            .iter()
            .zip(r)
            .map(|(wt, r)| (r - wt).abs())
            .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LadSolution {
    pub latent: Vec<f64>,
    /// `D0` (prior) followed by one deviation per observation.
    pub deviations: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

impl LadSolution {
    fn from_latent(w: &IncidenceMatrix, r: &[f64], ratio: f64, latent: Vec<f64>, pivots: usize) -> Self {
        let mut deviations = Vec::with_capacity(r.len() + 1);
        deviations.push(ratio * latent.iter().sum::<f64>().abs());
        deviations.extend(w.apply(&latent).iter().zip(r).map(|(wt, r)| (r - wt).abs()));
        let objective = deviations.iter().sum();
        Self {
            latent,
            deviations,
            objective,
            pivots,
        }
    }
}

pub fn solve_lad(p: &LadProblem) -> Result<LadSolution> {
    LadSolver::new().solve(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidGraphSolution {
    pub latent: Vec<RigidLog>,
    /// Objective of each coordinate's fit (rotation xyz, translation xyz).
    pub objective: [f64; 6],
    pub pivots: usize,
}

/// Six independent fits, one per se(3) coordinate, sharing `W`.
pub fn solve_rigid_graph(
    observations: &[RigidLog],
    w: &IncidenceMatrix,
    ratio: f64,
) -> Result<RigidGraphSolution> {
    if let Some(k) = observations.iter().position(|o| !o.is_finite()) {
        return Err(Error::InvalidDesign(format!("observation {k} is not finite")));
    }
    let mut latent = vec![[0.0; 6]; w.nodes()];
    let mut obj = [0.0; 6];
    let mut pivots = 0;
    let mut solver = LadSolver::new();
    for c in 0..6 {
        let p = LadProblem::new(
            observations.iter().map(|o| o.to_array()[c]).collect(),
            w.clone(),
            ratio,
        )?;
        let s = solver.solve(&p)?;
        for (n, v) in s.latent.iter().enumerate() {
            latent[n][c] = *v;
        }
        obj[c] = s.objective;
        pivots += s.pivots;
    }
    Ok(RigidGraphSolution {
        latent: latent.into_iter().map(RigidLog::from_array).collect(),
        objective: obj,
        pivots,
    })
}

/// Per-voxel solve timing (microseconds for the three coordinate solves).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TimingSummary {
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl TimingSummary {
    fn from_samples(mut s: Vec<f64>) -> Self {
        if s.is_empty() {
            return Self::default();
        }
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
        Self {
            mean_us: s.iter().sum::<f64>() / s.len() as f64,
            median_us: at(0.5),
            p99_us: at(0.99),
            max_us: s[s.len() - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SvfSolveStats {
    pub voxels: usize,
    pub voxels_solved: usize,
    pub lp_solves: usize,
    pub total_pivots: usize,
    pub max_pivots: usize,
    /// Sum of the per-voxel objectives (all three coordinates).
    pub objective_sum: f64,
    pub timing: TimingSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvfGraphSolution {
    pub latent: Vec<Svf>,
    pub stats: SvfSolveStats,
}

struct VoxelResult {
    values: Vec<f64>,
    objective: f64,
    pivots: usize,
    max_pivots: usize,
    micros: f64,
}

/// Independent L1 fits at every voxel (within `mask`) and coordinate;
/// latent values outside the mask are zero.
///
/// Runs on the current rayon pool; the result does not depend on how the
/// voxels are partitioned.
pub fn solve_svf_graph(
    observations: &[Svf],
    w: &IncidenceMatrix,
    mask: Option<&[bool]>,
    ratio: f64,
) -> Result<SvfGraphSolution> {
    let Some(first) = observations.first() else {
        return Err(Error::InvalidDesign("no SVF observations".into()));
    };
    if observations.len() != w.edges() {
        return Err(Error::InvalidDesign(format!(
            "{} SVF observations for {} incidence rows",
            observations.len(),
            w.edges()
        )));
    }
    let grid = first.grid().clone();
    for (k, o) in observations.iter().enumerate() {
        grid.ensure_matches(o.grid(), &format!("observation {k}"))?;
        if !o.is_finite() {
            return Err(Error::NonFiniteField);
        }
    }
    if let Some(m) = mask {
        if m.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "mask has {} voxels, grid has {}",
                m.len(),
                grid.len()
            )));
        }
    }
    LadProblem::new(vec![0.0; w.edges()], w.clone(), ratio)?;

    let n = w.nodes();
    let k = w.edges();
    let results: Vec<Option<VoxelResult>> = (0..grid.len())
        .into_par_iter()
        .with_min_len(64)
        .map_init(
            || (LadSolver::new(), vec![0.0; k]),
            |(solver, r), v| -> Result<Option<VoxelResult>> {
                if mask.is_some_and(|m| !m[v]) {
                    return Ok(None);
                }
                let start = Instant::now();
                let mut values = vec![0.0; 3 * n];
                let mut obj = 0.0;
                let mut pivots = 0;
                let mut max_pivots = 0;
                for c in 0..3 {
                    for (slot, o) in r.iter_mut().zip(observations) {
                        *slot = o.values()[v][c];
                    }
                    let s = solver.solve_parts(w, r, ratio).map_err(|e| Error::VoxelSolve {
                        voxel: grid.coords(v),
                        coord: c,
                        source: Box::new(e),
                    })?;
                    for (node, t) in s.latent.iter().enumerate() {
                        values[3 * node + c] = *t;
                    }
                    obj += s.objective;
                    pivots += s.pivots;
                    max_pivots = max_pivots.max(s.pivots);
                }
                Ok(Some(VoxelResult {
                    values,
                    objective: obj,
                    pivots,
                    max_pivots,
                    micros: start.elapsed().as_secs_f64() * 1e6,
                }))
            },
        )
        .collect::<Result<_>>()?;

    let mut fields = vec![vec![Vector3::zeros(); grid.len()]; n];
    let mut stats = SvfSolveStats {
        voxels: grid.len(),
        ..Default::default()
    };
    let mut times = Vec::new();
    for (v, res) in results.into_iter().enumerate() {
        let Some(res) = res else { continue };
        for (node, f) in fields.iter_mut().enumerate() {
            f[v] = Vector3::new(
                res.values[3 * node],
                res.values[3 * node + 1],
                res.values[3 * node + 2],
            );
        }
        stats.voxels_solved += 1;
        stats.lp_solves += 3;
        stats.total_pivots += res.pivots;
        stats.max_pivots = stats.max_pivots.max(res.max_pivots);
        stats.objective_sum += res.objective;
        times.push(res.micros);
    }
    stats.timing = TimingSummary::from_samples(times);
    let latent = fields
        .into_iter()
        .map(|f| VectorField::new(grid.clone(), f).map(Svf::new))
        .collect::<Result<_>>()?;
    Ok(SvfGraphSolution { latent, stats })
}

/// Morphological dilation by a Euclidean ball of `radius` voxels.
pub fn dilate_mask(mask: &[bool], shape: [usize; 3], radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<[isize; 3]> = (-r..=r)
        .flat_map(|z| (-r..=r).flat_map(move |y| (-r..=r).map(move |x| [x, y, z])))
        .filter(|[x, y, z]| x * x + y * y + z * z <= r * r)
        .collect();
    let dims = shape.map(|n| n as isize);
    (0..mask.len())
        .into_par_iter()
        .map(|i| {
            if mask[i] {
                return true;
            }
            let c = [
                (i % shape[0]) as isize,
                ((i / shape[0]) % shape[1]) as isize,
                (i / (shape[0] * shape[1])) as isize,
            ];
            offsets.iter().any(|o| {
                let p = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                (0..3).all(|a| p[a] >= 0 && p[a] < dims[a])
                    && mask[(p[0] + dims[0] * (p[1] + dims[1] * p[2])) as usize]
            })
        })
        .collect()
}
