//! Group statistics and study-design formulas: symmetrised percent change,
//! sample size, voxelwise Welch t and Hotelling T², and FDR thresholding.

pub mod dist;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, VectorField};
use crate::volume_io::Volume;

pub use dist::{f_sf, normal_cdf, normal_quantile, student_t_two_sided};

/// Absolute symmetrised percent change between two volumes.
pub fn aspc(v1: f64, v2: f64) -> Result<f64> {
    let s = v1 + v2;
    if s == 0.0 || !s.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    Ok(100.0 * 2.0 * (v2 - v1).abs() / s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    /// One-sided type-I error rate.
    pub alpha: f64,
    pub power: f64,
    /// Effect size as a fraction of baseline per year.
    pub effect: f64,
    /// Timepoints per subject.
    pub timepoints: usize,
    /// Within-subject variance of acquisition times, years².
    pub time_variance: f64,
}

impl StudyDesign {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidDesign(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.power > 0.0 && self.power < 1.0) {
            return bad("power must lie in (0, 1)");
        }
        if self.effect == 0.0 || !self.effect.is_finite() {
            return bad("effect size must be finite and non-zero");
        }
        if self.timepoints < 2 {
            return bad("need at least two timepoints per subject");
        }
        if !(self.time_variance > 0.0 && self.time_variance.is_finite()) {
            return bad("time variance must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleSize {
    pub raw: f64,
    pub subjects: u64,
}

/// Subjects per arm needed to detect `design.effect` in a slope.
pub fn sample_size(design: &StudyDesign, sigma: f64, rho: f64) -> Result<SampleSize> {
    design.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidDesign("sigma must be positive".into()));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidDesign("rho must lie in [0, 1)".into()));
    }
    let z = normal_quantile(1.0 - design.alpha) + normal_quantile(design.power);
    let raw = 2.0 * z * z * sigma * sigma * (1.0 - rho)
        / (design.timepoints as f64 * design.time_variance * design.effect * design.effect);
    Ok(SampleSize {
        raw,
        subjects: raw.ceil() as u64,
    })
}

/// Sample size of method `a` as a percentage of method `b`'s.
pub fn sample_size_reduction(sigma_a: f64, rho_a: f64, sigma_b: f64, rho_b: f64) -> Result<f64> {
    let den = sigma_b * sigma_b * (1.0 - rho_b);
    if den == 0.0 || !den.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    Ok(100.0 * sigma_a * sigma_a * (1.0 - rho_a) / den)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch two-sample t-test on scalars.
pub fn welch_t(a: &[f64], b: &[f64]) -> WelchResult {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let diff = ma - mb;
    if se2 == 0.0 {
        let df = (a.len() + b.len() - 2) as f64;
        return if diff == 0.0 {
            WelchResult { t: 0.0, df, p: 1.0 }
        } else {
            WelchResult {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    WelchResult {
        t,
        df,
        p: student_t_two_sided(t, df),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTestMaps {
    pub t: Volume,
    pub p: Volume,
    pub df: Volume,
}

fn shared_grid<'a>(grids: impl Iterator<Item = &'a Grid>, what: &str) -> Result<Grid> {
    let mut it = grids;
    let first = it
        .next()
        .ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?
        .clone();
    for g in it {
        first.ensure_matches(g, what)?;
    }
    Ok(first)
}

fn check_mask(mask: Option<&[bool]>, grid: &Grid) -> Result<()> {
    match mask {
        Some(m) if m.len() != grid.len() => Err(Error::GridMismatch(format!(
            "mask of {} voxels for a grid of {}",
            m.len(),
            grid.len()
        ))),
        _ => Ok(()),
    }
}

/// Welch t per voxel inside `mask`; outside, t = 0 and p = 1.
pub fn voxelwise_ttest(a: &[Volume], b: &[Volume], mask: Option<&[bool]>) -> Result<TTestMaps> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: g.len() });
        }
    }
    let grid = shared_grid(a.iter().chain(b).map(Volume::grid), "voxelwise_ttest")?;
    check_mask(mask, &grid)?;
    let res: Vec<WelchResult> = (0..grid.len())
        .into_par_iter()
        .map_init(
            || (vec![0.0; a.len()], vec![0.0; b.len()]),
            |(xa, xb), i| {
                if mask.is_some_and(|m| !m[i]) {
                    return WelchResult { t: 0.0, df: 0.0, p: 1.0 };
                }
                for (x, v) in xa.iter_mut().zip(a) {
                    *x = v.data()[i];
                }
                for (x, v) in xb.iter_mut().zip(b) {
                    *x = v.data()[i];
                }
                welch_t(xa, xb)
            },
        )
        .collect();
    Ok(TTestMaps {
        t: Volume::new(grid.clone(), res.iter().map(|r| r.t).collect())?,
        p: Volume::new(grid.clone(), res.iter().map(|r| r.p).collect())?,
        df: Volume::new(grid, res.iter().map(|r| r.df).collect())?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HotellingResult {
    pub t2: f64,
    pub p: f64,
    /// Rank of the pooled covariance; the test runs in that subspace.
    pub rank: usize,
}

/// Relative eigenvalue cut-off for the pooled covariance rank.
const RANK_TOL: f64 = 1e-10;

/// Two-sample Hotelling T² with pooled covariance. A rank-deficient
/// covariance is handled by its pseudo-inverse with the F degrees of
/// freedom taken from the rank; rank 0 gives T² = 0, p = 1.
pub fn hotelling(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> HotellingResult {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mean = |x: &[Vector3<f64>]| x.iter().sum::<Vector3<f64>>() / x.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let scatter = |x: &[Vector3<f64>], m: &Vector3<f64>| {
        x.iter()
            .map(|v| (v - m) * (v - m).transpose())
            .sum::<Matrix3<f64>>()
    };
    let pooled = (scatter(a, &ma) + scatter(b, &mb)) / (n1 + n2 - 2.0);
    let eig = SymmetricEigen::new(pooled);
    let top = eig.eigenvalues.amax();
    let d = ma - mb;
    let mut quad = 0.0;
    let mut rank = 0;
    for k in 0..3 {
        let lambda = eig.eigenvalues[k];
        if top > 0.0 && lambda > RANK_TOL * top {
            let proj = eig.eigenvectors.column(k).dot(&d);
            quad += proj * proj / lambda;
            rank += 1;
        }
    }
    if rank == 0 {
        return HotellingResult { t2: 0.0, p: 1.0, rank };
    }
    let t2 = n1 * n2 / (n1 + n2) * quad;
    let p = rank as f64;
    let d2 = n1 + n2 - p - 1.0;
    let f = t2 * d2 / (p * (n1 + n2 - 2.0));
    HotellingResult {
        t2,
        p: f_sf(f, p, d2),
        rank,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HotellingMaps {
    pub t2: Volume,
    pub p: Volume,
    /// Voxels whose pooled covariance was not full rank.
    pub singular: Vec<bool>,
}

/// Hotelling T² per voxel on vector fields; outside the mask T² = 0, p = 1.
pub fn hotelling_t2(a: &[VectorField], b: &[VectorField], mask: Option<&[bool]>) -> Result<HotellingMaps> {
    for g in [a, b] {
        if g.len() < 4 {
            return Err(Error::InsufficientSamples { needed: 4, got: g.len() });
        }
    }
    let grid = shared_grid(a.iter().chain(b).map(VectorField::grid), "hotelling_t2")?;
    check_mask(mask, &grid)?;
    let res: Vec<HotellingResult> = (0..grid.len())
        .into_par_iter()
        .map_init(
            || (vec![Vector3::zeros(); a.len()], vec![Vector3::zeros(); b.len()]),
            |(xa, xb), i| {
                if mask.is_some_and(|m| !m[i]) {
                    return HotellingResult { t2: 0.0, p: 1.0, rank: 3 };
                }
                for (x, v) in xa.iter_mut().zip(a) {
                    *x = v.values()[i];
                }
                for (x, v) in xb.iter_mut().zip(b) {
                    *x = v.values()[i];
                }
                hotelling(xa, xb)
            },
        )
        .collect();
    Ok(HotellingMaps {
        t2: Volume::new(grid.clone(), res.iter().map(|r| r.t2).collect())?,
        p: Volume::new(grid, res.iter().map(|r| r.p).collect())?,
        singular: res.iter().map(|r| r.rank < 3).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FdrResult {
    /// Largest p-value declared significant; 0 when none is.
    pub threshold: f64,
    pub significant: Vec<bool>,
}

/// Benjamini-Hochberg step-up at rate `q`. NaN p-values never pass.
pub fn fdr_bh(pvals: &[f64], q: f64) -> FdrResult {
    let m = pvals.len();
    let mut sorted: Vec<f64> = pvals.iter().copied().filter(|p| !p.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut threshold = 0.0;
    let mut any = false;
    for (i, &p) in sorted.iter().enumerate() {
        if p <= q * (i + 1) as f64 / m as f64 {
            threshold = p;
            any = true;
        }
    }
    let significant = pvals.iter().map(|&p| any && p <= threshold).collect();
    FdrResult {
        threshold,
        significant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspc_values() {
        assert_eq!(aspc(500.0, 500.0).unwrap(), 0.0);
        assert!((aspc(100.0, 102.0).unwrap() - 400.0 / 202.0).abs() < 1e-12);
        assert!(matches!(aspc(1.0, -1.0), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn reduction_values() {
        assert!((sample_size_reduction(2.0, 0.3, 2.0, 0.3).unwrap() - 100.0).abs() < 1e-12);
        assert!((sample_size_reduction(1.0, 0.9, 1.0, 0.8).unwrap() - 50.0).abs() < 1e-9);
        assert!(matches!(sample_size_reduction(1.0, 0.5, 1.0, 1.0), Err(Error::ZeroDenominator)));
    }

    fn design() -> StudyDesign {
        StudyDesign {
            alpha: 0.05,
            power: 0.8,
            effect: 0.5,
            timepoints: 2,
            time_variance: 0.25,
        }
    }

    #[test]
    fn sample_size_scaling() {
        let a = sample_size(&design(), 1.0, 0.5).unwrap();
        let b = sample_size(&design(), 2.0, 0.5).unwrap();
        assert!((b.raw - 4.0 * a.raw).abs() < 1e-12 * b.raw);
        assert_eq!(a.subjects, 50);
        assert!(sample_size(&design(), 1.0, 1.0 - 1e-12).unwrap().raw < 1e-9);
        assert!(sample_size(&design(), 1.0, 1.0).is_err());
        assert!(sample_size(&StudyDesign { timepoints: 1, ..design() }, 1.0, 0.5).is_err());
    }

    #[test]
    fn fdr_worked_example() {
        let r = fdr_bh(&[0.001, 0.02, 0.8], 0.05);
        assert_eq!(r.threshold, 0.02);
        assert_eq!(r.significant, vec![true, true, false]);
        let none = fdr_bh(&[1.0; 5], 0.05);
        assert_eq!(none.threshold, 0.0);
        assert!(none.significant.iter().all(|s| !s));
    }

    #[test]
    fn identical_groups_give_null_statistics() {
        let g = Grid::identity([2, 2, 1]);
        let vols: Vec<Volume> = (0..4)
            .map(|s| Volume::from_fn(g.clone(), |[i, j, _]| (i + j + s) as f64))
            .collect();
        let r = voxelwise_ttest(&vols, &vols, None).unwrap();
        assert!(r.t.data().iter().all(|&t| t == 0.0));
        assert!(r.p.data().iter().all(|&p| p == 1.0));
        let fields: Vec<VectorField> = (0..5)
            .map(|s| VectorField::from_fn(g.clone(), move |[i, j, _]| Vector3::new(s as f64, (i * s) as f64, (j + s * s) as f64)))
            .collect();
        let h = hotelling_t2(&fields, &fields, None).unwrap();
        assert!(h.t2.data().iter().all(|&t| t.abs() < 1e-12));
        assert!(h.p.data().iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn too_few_samples() {
        let g = Grid::identity([1, 1, 1]);
        let v = vec![Volume::zeros(g.clone())];
        assert!(matches!(
            voxelwise_ttest(&v, &v, None),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
        let f = vec![VectorField::zeros(g); 3];
        assert!(matches!(hotelling_t2(&f, &f, None), Err(Error::InsufficientSamples { .. })));
    }
}
