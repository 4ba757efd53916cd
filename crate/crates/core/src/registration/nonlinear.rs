//! Log-domain SSD registration (demons-style force, Gaussian-regularised
//! velocity, coarse-to-fine pyramid).
//!
//! The returned SVF `v` satisfies `target(exp(v)(x)) ≈ reference(x)` on
//! the reference grid, i.e. `exp(v)` maps reference points to the
//! corresponding target points (voxel units).

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::sample::{sample_scalar, sample_vector};
use crate::geometry::smooth::smooth_vectors;
use crate::geometry::{svf_exp, Boundary, Direction, Grid, Svf, VectorField};
use crate::volume_io::Volume;

/// Tuning knobs; sigmas are in voxels of the current pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearParams {
    pub update_sigma: f64,
    pub field_sigma: f64,
    pub step: f64,
    pub iterations: usize,
    pub levels: usize,
}

impl Default for NonlinearParams {
    fn default() -> Self {
        Self {
            update_sigma: 2.0,
            field_sigma: 1.0,
            step: 1.0,
            iterations: 100,
            levels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearReport {
    pub initial_ssd: f64,
    pub final_ssd: f64,
    pub accepted_steps: usize,
    pub levels_used: usize,
}

const MIN_LEVEL_EXTENT: usize = 8;
const MIN_STEP: f64 = 1e-3;

/// Sum of squared differences.
pub fn ssd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn downsample(data: &[f64], shape: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let out_shape = shape.map(|n| n.div_ceil(2));
    let mut out = vec![0.0; out_shape.iter().product()];
    out.par_chunks_mut(out_shape[0] * out_shape[1])
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..out_shape[1] {
                for i in 0..out_shape[0] {
                    let mut acc = 0.0;
                    for c in 0..8 {
                        let x = (2 * i + (c & 1)).min(shape[0] - 1);
                        let y = (2 * j + ((c >> 1) & 1)).min(shape[1] - 1);
                        let z = (2 * k + ((c >> 2) & 1)).min(shape[2] - 1);
                        acc += data[x + shape[0] * (y + shape[1] * z)];
                    }
                    slab[i + out_shape[0] * j] = acc / 8.0;
                }
            }
        });
    (out, out_shape)
}

fn upsample(v: &[Vector3<f64>], coarse: [usize; 3], fine: [usize; 3]) -> Vec<Vector3<f64>> {
    let n = fine.iter().product();
    (0..n)
        .into_par_iter()
        .map(|idx| {
            let x = idx % fine[0];
            let y = (idx / fine[0]) % fine[1];
            let z = idx / (fine[0] * fine[1]);
            let p = Vector3::new(x as f64, y as f64, z as f64).map(|c| (c - 0.5) / 2.0);
            sample_vector(v, coarse, &p) * 2.0
        })
        .collect()
}

fn gradient(data: &[f64], shape: [usize; 3]) -> Vec<Vector3<f64>> {
    let n = data.len();
    let strides = [1, shape[0], shape[0] * shape[1]];
    (0..n)
        .into_par_iter()
        .map(|idx| {
            let c = [
                idx % shape[0],
                (idx / shape[0]) % shape[1],
                idx / (shape[0] * shape[1]),
            ];
            let mut g = Vector3::zeros();
            for a in 0..3 {
                if shape[a] < 2 {
                    continue;
                }
                let lo = if c[a] == 0 { 0 } else { c[a] - 1 };
                let hi = (c[a] + 1).min(shape[a] - 1);
                let base = idx - c[a] * strides[a];
                g[a] = (data[base + hi * strides[a]] - data[base + lo * strides[a]]) / (hi - lo) as f64;
            }
            g
        })
        .collect()
}

/// Target pulled back through `exp(v)` onto the reference lattice.
fn warp(target: &[f64], shape: [usize; 3], v: &[Vector3<f64>]) -> Result<Vec<f64>> {
    let grid = Grid::identity(shape);
    let field = Svf::new(VectorField::new(grid, v.to_vec())?);
    let phi = svf_exp(&field, Direction::Forward)?;
    Ok(phi
        .values()
        .par_iter()
        .enumerate()
        .map(|(idx, u)| {
            let p = Vector3::new(
                (idx % shape[0]) as f64,
                ((idx / shape[0]) % shape[1]) as f64,
                (idx / (shape[0] * shape[1])) as f64,
            ) + u;
            sample_scalar(target, shape, &p, Boundary::Clamp)
        })
        .collect())
}

struct Level {
    shape: [usize; 3],
    reference: Vec<f64>,
    target: Vec<f64>,
}

fn optimise(level: &Level, v: &mut Vec<Vector3<f64>>, params: &NonlinearParams) -> Result<usize> {
    let shape = level.shape;
    let grad_ref = gradient(&level.reference, shape);
    let mut warped = warp(&level.target, shape, v)?;
    let mut cost = ssd(&warped, &level.reference);
    let mut step = params.step;
    let mut accepted = 0;
    for _ in 0..params.iterations {
        if step < MIN_STEP || cost == 0.0 {
            break;
        }
        let grad_w = gradient(&warped, shape);
        let update: Vec<Vector3<f64>> = (0..warped.len())
            .into_par_iter()
            .map(|i| {
                let e = warped[i] - level.reference[i];
                let g = 0.5 * (grad_w[i] + grad_ref[i]);
                let denom = g.norm_squared() + e * e;
                if denom < 1e-12 {
                    Vector3::zeros()
                } else {
                    g * (-step * e / denom)
                }
            })
            .collect();
        let update = smooth_vectors(&update, shape, params.update_sigma);
        let summed: Vec<Vector3<f64>> = v.iter().zip(&update).map(|(a, b)| a + b).collect();
        let candidate = smooth_vectors(&summed, shape, params.field_sigma);
        let cand_warped = warp(&level.target, shape, &candidate)?;
        let cand_cost = ssd(&cand_warped, &level.reference);
        if cand_cost < cost {
            *v = candidate;
            warped = cand_warped;
            cost = cand_cost;
            accepted += 1;
        } else {
            step *= 0.5;
        }
    }
    Ok(accepted)
}

/// Registers `target` to `reference` (same grid, intensities already on a
/// common scale). The final SSD never exceeds the identity SSD.
pub fn register_nonlinear_ssd(
    reference: &Volume,
    target: &Volume,
    params: &NonlinearParams,
) -> Result<(Svf, NonlinearReport)> {
    reference
        .grid()
        .ensure_matches(target.grid(), "register_nonlinear_ssd")?;
    if reference.data().iter().chain(target.data()).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteIntensities);
    }
    let full = reference.grid().shape();

    let mut pyramid = vec![Level {
        shape: full,
        reference: reference.data().to_vec(),
        target: target.data().to_vec(),
    }];
    while pyramid.len() < params.levels.max(1) {
        let last = pyramid.last().expect("non-empty");
        let (r, shape) = downsample(&last.reference, last.shape);
        if shape.iter().any(|&n| n < MIN_LEVEL_EXTENT) {
            break;
        }
        let (t, _) = downsample(&last.target, last.shape);
        pyramid.push(Level {
            shape,
            reference: r,
            target: t,
        });
    }

    let initial_ssd = ssd(reference.data(), target.data());
    let levels_used = pyramid.len();
    let mut accepted_steps = 0;
    let mut v: Vec<Vector3<f64>> = vec![Vector3::zeros(); pyramid[levels_used - 1].len()];
    for l in (0..levels_used).rev() {
        let level = &pyramid[l];
        if l == 0 && levels_used > 1 {
            // coarse estimates only seed the finest level if they help
            let seeded = ssd(&warp(&level.target, full, &v)?, &level.reference);
            if seeded >= initial_ssd {
                v.iter_mut().for_each(|x| *x = Vector3::zeros());
            }
        }
        accepted_steps += optimise(level, &mut v, params)?;
        if l > 0 {
            v = upsample(&v, level.shape, pyramid[l - 1].shape);
        }
    }

    let final_ssd = ssd(&warp(target.data(), full, &v)?, reference.data());
    let svf = Svf::new(VectorField::new(reference.grid().clone(), v)?);
    Ok((
        svf,
        NonlinearReport {
            initial_ssd,
            final_ssd,
            accepted_steps,
            levels_used,
        },
    ))
}

impl Level {
    fn len(&self) -> usize {
        self.reference.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::smooth::smooth_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(grid: &Grid) -> Volume {
        let s = grid.shape();
        let c = Vector3::new(s[0] as f64, s[1] as f64, s[2] as f64) / 2.0;
        Volume::from_fn(grid.clone(), |[i, j, k]| {
            let p = Vector3::new(i as f64, j as f64, k as f64);
            let a = (-(p - c).norm_squared() / 40.0).exp();
            let b = (-(p - c - Vector3::new(5.0, -3.0, 2.0)).norm_squared() / 12.0).exp();
            a + 0.7 * b
        })
    }

    fn smooth_svf(grid: &Grid, max_norm: f64, seed: u64) -> Svf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Vector3<f64>> = (0..grid.len())
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let sm = smooth_vectors(&raw, grid.shape(), 4.0);
        let m = sm.iter().map(|v| v.norm()).fold(0.0, f64::max);
        Svf::new(VectorField::new(grid.clone(), sm.iter().map(|v| v * (max_norm / m)).collect()).unwrap())
    }

    #[test]
    fn self_registration_is_near_zero() {
        let g = Grid::identity([24, 24, 24]);
        let img = blobs(&g);
        let (v, rep) = register_nonlinear_ssd(&img, &img, &NonlinearParams::default()).unwrap();
        assert!(v.max_norm() < 0.05);
        assert_eq!(rep.final_ssd, 0.0);
    }

    #[test]
    fn constant_images_give_zero_field() {
        let g = Grid::identity([16, 16, 16]);
        let a = Volume::from_fn(g.clone(), |_| 3.0);
        let b = Volume::from_fn(g.clone(), |_| 1.0);
        let (v, _) = register_nonlinear_ssd(&a, &b, &NonlinearParams::default()).unwrap();
        assert_eq!(v.max_norm(), 0.0);
    }

    #[test]
    fn recovers_synthetic_warp() {
        let g = Grid::identity([32, 32, 32]);
        let reference = blobs(&g);
        let v = smooth_svf(&g, 1.5, 11);
        // target(exp(v)(x)) = reference(x)  =>  target = reference ∘ exp(-v)
        let inv = svf_exp(&v, Direction::Inverse).unwrap();
        let target = Volume::new(
            g.clone(),
            (0..g.len())
                .map(|i| {
                    let [x, y, z] = g.coords(i);
                    let p = Vector3::new(x as f64, y as f64, z as f64) + inv.values()[i];
                    sample_scalar(reference.data(), g.shape(), &p, Boundary::Clamp)
                })
                .collect(),
        )
        .unwrap();
        let (_, rep) = register_nonlinear_ssd(&reference, &target, &NonlinearParams::default()).unwrap();
        assert!(rep.final_ssd <= 0.1 * rep.initial_ssd, "{rep:?}");
    }

    #[test]
    fn never_increases_ssd_on_noise() {
        let g = Grid::identity([16, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
        let a = Volume::new(g.clone(), smooth_scalar(&a, g.shape(), 1.0)).unwrap();
        let b = Volume::new(g.clone(), b).unwrap();
        let (_, rep) = register_nonlinear_ssd(&a, &b, &NonlinearParams::default()).unwrap();
        assert!(rep.final_ssd <= rep.initial_ssd);
    }

    #[test]
    fn upsampling_doubles_constant_field() {
        let v = vec![Vector3::new(1.0, -0.5, 0.25); 4 * 4 * 4];
        let up = upsample(&v, [4, 4, 4], [8, 8, 8]);
        assert!(up.iter().all(|u| (u - Vector3::new(2.0, -1.0, 0.5)).norm() < 1e-12));
    }
}
