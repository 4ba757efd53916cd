//! Stationary subject trajectories: a voxelwise linear model of the latent
//! velocity fields over time, its exponential at arbitrary times, image
//! prediction and transport to another template.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::sample::sample_vector;
use crate::geometry::{
    displacement_jacobian, svf_exp, Direction, DisplacementField, Grid, Svf, VectorField,
};
use crate::volume_io::{resample_image, TransformChain, TransformStep, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FitMethod {
    /// Closed-form least squares.
    #[default]
    LeastSquares,
    /// Least absolute deviations; the optimum passes through two samples.
    LeastAbsolute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryModel {
    /// Offset to the template origin; stored, never applied.
    pub intercept: Svf,
    /// Velocity per year.
    pub slope: Svf,
    /// Mean absolute residual per voxel over timepoints and components.
    pub residual: Volume,
}

impl TrajectoryModel {
    pub fn grid(&self) -> &Grid {
        self.slope.grid()
    }
}

fn line_ols(t: &[f64], y: &[f64], tbar: f64, stt: f64) -> (f64, f64) {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let sty: f64 = t.iter().zip(y).map(|(a, b)| (a - tbar) * (b - ybar)).sum();
    let slope = sty / stt;
    (ybar - slope * tbar, slope)
}

fn abs_residual(t: &[f64], y: &[f64], c: f64, s: f64) -> f64 {
    t.iter().zip(y).map(|(a, b)| (b - c - s * a).abs()).sum()
}

/// Best L1 line: some optimum interpolates two samples with distinct
/// times, so all such pairs are tried. Ties keep the first pair.
fn line_lad(t: &[f64], y: &[f64]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            if t[i] == t[j] {
                continue;
            }
            let s = (y[j] - y[i]) / (t[j] - t[i]);
            let c = y[i] - s * t[i];
            let e = abs_residual(t, y, c, s);
            if e < best.0 {
                best = (e, c, s);
            }
        }
    }
    (best.1, best.2)
}

pub fn fit_trajectory(latent_svfs: &[Svf], times: &[f64], method: FitMethod) -> Result<TrajectoryModel> {
    let n = latent_svfs.len();
    if n < 2 {
        return Err(Error::InsufficientTimepoints { needed: 2, got: n });
    }
    if times.len() != n {
        return Err(Error::InvalidDesign(format!("{} times for {n} fields", times.len())));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidDesign("non-finite acquisition time".into()));
    }
    let grid = latent_svfs[0].grid().clone();
    for v in &latent_svfs[1..] {
        grid.ensure_matches(v.grid(), "fit_trajectory")?;
    }
    let tbar = times.iter().sum::<f64>() / n as f64;
    let stt: f64 = times.iter().map(|t| (t - tbar).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::DegenerateTimes);
    }
    let fits: Vec<(Vector3<f64>, Vector3<f64>, f64)> = (0..grid.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |y, i| {
                let mut c = Vector3::zeros();
                let mut s = Vector3::zeros();
                let mut res = 0.0;
                for a in 0..3 {
                    for (slot, v) in y.iter_mut().zip(latent_svfs) {
                        *slot = v.values()[i][a];
                    }
                    let (ca, sa) = match method {
                        FitMethod::LeastSquares => line_ols(times, y, tbar, stt),
                        FitMethod::LeastAbsolute => line_lad(times, y),
                    };
                    c[a] = ca;
                    s[a] = sa;
                    res += abs_residual(times, y, ca, sa);
                }
                (c, s, res / (3 * n) as f64)
            },
        )
        .collect();
    let intercept = fits.iter().map(|f| f.0).collect();
    let slope = fits.iter().map(|f| f.1).collect();
    let residual = fits.iter().map(|f| f.2).collect();
    Ok(TrajectoryModel {
        intercept: Svf::new(VectorField::new(grid.clone(), intercept)?),
        slope: Svf::new(VectorField::new(grid.clone(), slope)?),
        residual: Volume::new(grid, residual)?,
    })
}

/// Deformation `exp(t·slope)`, or its inverse.
pub fn evaluate_trajectory(model: &TrajectoryModel, t: f64, direction: Direction) -> Result<DisplacementField> {
    if !t.is_finite() {
        return Err(Error::InvalidDesign(format!("time {t} is not finite")));
    }
    svf_exp(&model.slope.scaled(t), direction)
}

/// Template intensity moved to time `t`: `Z(exp(−t·slope)(y))`.
pub fn predict_image(template: &Volume, model: &TrajectoryModel, t: f64) -> Result<Volume> {
    template.grid().ensure_matches(model.grid(), "predict_image")?;
    let back = evaluate_trajectory(model, t, Direction::Inverse)?;
    let chain = TransformChain::new(vec![TransformStep::Deformation(back)]);
    resample_image(template, template.grid(), &chain, 0.0)
}

/// Pushforward of a subject field `v` into population space.
///
/// `warp` lives on the population grid and `exp(warp)` maps population
/// points to subject-template points. The transported field is
/// `(I + Du)⁻¹ v(ψ(y))` with vectors re-expressed in population voxel
/// units.
pub fn transport_svf(v: &Svf, warp: &Svf, population: &Grid) -> Result<Svf> {
    population.ensure_matches(warp.grid(), "transport_svf warp")?;
    let psi = svf_exp(warp, Direction::Forward)?;
    transport_by_deformation(v, &psi)
}

/// As [`transport_svf`] with the population → subject map given directly
/// as a displacement field on the population grid.
pub fn transport_by_deformation(v: &Svf, psi: &DisplacementField) -> Result<Svf> {
    if !v.is_finite() || !psi.is_finite() {
        return Err(Error::NonFiniteField);
    }
    let pop = psi.grid().clone();
    let subj = v.grid();
    let to_pop_units: Matrix3<f64> = pop
        .linear()
        .try_inverse()
        .ok_or_else(|| Error::GridMismatch("singular population affine".into()))?
        * subj.linear();
    let shape = subj.shape();
    let out = VectorField::from_fn(pop.clone(), |c| {
        let i = pop.index(c[0], c[1], c[2]);
        let y = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        let world = pop.voxel_to_world(&(y + psi.values()[i]));
        let x = subj.world_to_voxel(&world);
        let value = to_pop_units * sample_vector(v.values(), shape, &x);
        let jac = displacement_jacobian(psi.field(), c);
        jac.try_inverse().map_or(Vector3::repeat(f64::NAN), |j| j * value)
    });
    if !out.is_finite() {
        return Err(Error::NonFiniteField);
    }
    Ok(Svf::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_displacements;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_field(grid: &Grid, seed: u64, amp: f64) -> Svf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef: Vec<f64> = (0..9).map(|_| rng.random_range(-amp..amp)).collect();
        Svf::from_fn(grid.clone(), move |[i, j, k]| {
            let (x, y, z) = (i as f64 * 0.3, j as f64 * 0.2, k as f64 * 0.25);
            Vector3::new(
                coef[0] * x.sin() + coef[1] * y.cos() + coef[2],
                coef[3] * (x + z).cos() + coef[4] * y + coef[5],
                coef[6] * (y * z).sin() + coef[7] * x + coef[8],
            )
        })
    }

    #[test]
    fn two_point_line() {
        let g = Grid::identity([4, 4, 4]);
        let v = smooth_field(&g, 1, 1.0);
        let m = fit_trajectory(&[Svf::zeros(g.clone()), v.clone()], &[0.0, 1.0], FitMethod::LeastSquares).unwrap();
        for (a, b) in m.slope.values().iter().zip(v.values()) {
            assert!((a - b).norm() < 1e-14);
        }
        assert!(m.intercept.max_norm() < 1e-14);
    }

    #[test]
    fn exact_linear_data_recovered() {
        let g = Grid::identity([6, 5, 4]);
        let c = smooth_field(&g, 2, 2.0);
        let v = smooth_field(&g, 3, 1.0);
        let times = [0.0, 0.4, 1.7, 2.1, 5.3];
        let svfs: Vec<Svf> = times
            .iter()
            .map(|&t| {
                let vals = c.values().iter().zip(v.values()).map(|(a, b)| a + b * t).collect();
                Svf::new(VectorField::new(g.clone(), vals).unwrap())
            })
            .collect();
        for method in [FitMethod::LeastSquares, FitMethod::LeastAbsolute] {
            let m = fit_trajectory(&svfs, &times, method).unwrap();
            for i in 0..g.len() {
                assert!((m.slope.values()[i] - v.values()[i]).norm() < 1e-10);
                assert!((m.intercept.values()[i] - c.values()[i]).norm() < 1e-10);
            }
            assert!(m.residual.data().iter().all(|&r| (0.0..1e-10).contains(&r)));
        }
    }

    #[test]
    fn constant_fields_have_zero_slope() {
        let g = Grid::identity([3, 3, 3]);
        let c = smooth_field(&g, 4, 1.0);
        let m = fit_trajectory(&[c.clone(), c.clone(), c.clone()], &[0.0, 1.0, 3.0], FitMethod::LeastSquares).unwrap();
        assert!(m.slope.max_norm() < 1e-14);
        for (a, b) in m.intercept.values().iter().zip(c.values()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn fit_errors() {
        let g = Grid::identity([2, 2, 2]);
        let z = Svf::zeros(g);
        assert!(matches!(
            fit_trajectory(&[z.clone()], &[0.0], FitMethod::LeastSquares),
            Err(Error::InsufficientTimepoints { .. })
        ));
        assert!(matches!(
            fit_trajectory(&[z.clone(), z], &[1.0, 1.0], FitMethod::LeastSquares),
            Err(Error::DegenerateTimes)
        ));
    }

    #[test]
    fn l1_fit_ignores_outlier() {
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [0.0, 2.0, 4.0, 100.0, 8.0];
        assert_eq!(line_lad(&t, &y), (0.0, 2.0));
    }

    #[test]
    fn zero_time_is_identity() {
        let g = Grid::identity([5, 5, 5]);
        let m = fit_trajectory(
            &[Svf::zeros(g.clone()), smooth_field(&g, 5, 1.0)],
            &[0.0, 1.0],
            FitMethod::LeastSquares,
        )
        .unwrap();
        let d = evaluate_trajectory(&m, 0.0, Direction::Forward).unwrap();
        assert_eq!(d.max_norm(), 0.0);
        let img = Volume::from_fn(g.clone(), |[i, j, k]| (i + 2 * j + 3 * k) as f64);
        let p = predict_image(&img, &m, 0.0).unwrap();
        assert!(p.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn forward_then_backward_is_identity() {
        let g = Grid::identity([16, 16, 16]);
        let m = fit_trajectory(
            &[Svf::zeros(g.clone()), smooth_field(&g, 6, 0.3)],
            &[0.0, 1.0],
            FitMethod::LeastSquares,
        )
        .unwrap();
        let f = evaluate_trajectory(&m, 1.3, Direction::Forward).unwrap();
        let b = evaluate_trajectory(&m, 1.3, Direction::Inverse).unwrap();
        let id = compose_displacements(&f, &b).unwrap();
        for i in 0..g.len() {
            if g.boundary_distance(i) >= 3 {
                assert!(id.values()[i].norm() < 0.1);
            }
        }
    }

    #[test]
    fn linear_field_volume_change() {
        let g = Grid::identity([21, 21, 21]);
        let slope = Svf::from_fn(g.clone(), |[i, j, k]| Vector3::new(i as f64 - 10.0, j as f64 - 10.0, k as f64 - 10.0) * 0.05);
        let m = TrajectoryModel {
            intercept: Svf::zeros(g.clone()),
            slope,
            residual: Volume::zeros(g.clone()),
        };
        let d = evaluate_trajectory(&m, 1.0, Direction::Forward).unwrap();
        let jac = crate::geometry::jacobian_determinant(&d);
        for i in 0..g.len() {
            if g.boundary_distance(i) >= 5 {
                assert!((jac.data()[i] - 0.15f64.exp()).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn identity_warp_leaves_field_unchanged() {
        let g = Grid::identity([6, 6, 6]);
        let v = smooth_field(&g, 7, 1.0);
        let out = transport_svf(&v, &Svf::zeros(g.clone()), &g).unwrap();
        for (a, b) in out.values().iter().zip(v.values()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn translation_warp_shifts_without_rotating() {
        let g = Grid::identity([10, 10, 10]);
        let v = Svf::from_fn(g.clone(), |[i, j, k]| Vector3::new(i as f64, 0.5 * j as f64, -(k as f64)));
        let psi = DisplacementField::from_fn(g.clone(), |_| Vector3::new(2.0, 0.0, -1.0));
        let out = transport_by_deformation(&v, &psi).unwrap();
        let y = [3usize, 4, 5];
        let expect = Vector3::new(5.0, 2.0, -4.0);
        assert!((out.values()[g.index(y[0], y[1], y[2])] - expect).norm() < 1e-12);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g = Grid::identity([4, 4, 4]);
        let h = Grid::identity([5, 4, 4]);
        assert!(matches!(
            transport_svf(&Svf::zeros(g.clone()), &Svf::zeros(g), &h),
            Err(Error::GridMismatch(_))
        ));
    }
}
