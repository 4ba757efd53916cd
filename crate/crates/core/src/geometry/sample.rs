//! Trilinear interpolation on voxel lattices.

use nalgebra::Vector3;

/// Out-of-bounds policy for interpolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Boundary {
    /// Coordinates are clamped to the lattice (deformation fields).
    Clamp,
    /// Corners outside the lattice contribute this value (images).
    Fill(f64),
}

impl Default for Boundary {
    fn default() -> Self {
        Boundary::Fill(0.0)
    }
}

#[derive(Clone, Copy)]
struct Axis {
    lo: isize,
    hi: isize,
    frac: f64,
}

#[inline]
fn axis(c: f64, n: usize, clamp: bool) -> Axis {
    let last = n as isize - 1;
    if clamp {
        let c = c.clamp(0.0, last as f64);
        let lo = c.floor() as isize;
        if lo >= last {
            Axis {
                lo: last,
                hi: last,
                frac: 0.0,
            }
        } else {
            Axis {
                lo,
                hi: lo + 1,
                frac: c - lo as f64,
            }
        }
    } else {
        let lo = c.floor();
        Axis {
            lo: lo as isize,
            hi: lo as isize + 1,
            frac: c - lo,
        }
    }
}

/// Eight corner `(flat index or None, weight)` pairs.
#[inline]
pub(crate) fn corners(shape: [usize; 3], p: &Vector3<f64>, clamp: bool) -> [(Option<usize>, f64); 8] {
    let ax = [
        axis(p.x, shape[0], clamp),
        axis(p.y, shape[1], clamp),
        axis(p.z, shape[2], clamp),
    ];
    let mut out = [(None, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut w = 1.0;
        let mut idx = [0isize; 3];
        for a in 0..3 {
            if c >> a & 1 == 0 {
                idx[a] = ax[a].lo;
                w *= 1.0 - ax[a].frac;
            } else {
                idx[a] = ax[a].hi;
                w *= ax[a].frac;
            }
        }
        let inside = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < shape[a]);
        let flat = inside.then(|| {
            idx[0] as usize + shape[0] * (idx[1] as usize + shape[1] * idx[2] as usize)
        });
        *slot = (flat, w);
    }
    out
}

/// Interpolates a scalar lattice at a continuous voxel coordinate.
#[inline]
pub fn sample_scalar(data: &[f64], shape: [usize; 3], p: &Vector3<f64>, boundary: Boundary) -> f64 {
    match boundary {
        Boundary::Clamp => {
            if !p.iter().all(|v| v.is_finite()) {
                return 0.0;
            }
            corners(shape, p, true)
                .iter()
                .map(|&(i, w)| if w == 0.0 { 0.0 } else { w * data[i.unwrap()] })
                .sum()
        }
        Boundary::Fill(fill) => {
            if !p.iter().all(|v| v.is_finite()) {
                return fill;
            }
            corners(shape, p, false)
                .iter()
                .map(|&(i, w)| {
                    if w == 0.0 {
                        0.0
                    } else {
                        w * i.map_or(fill, |i| data[i])
                    }
                })
                .sum()
        }
    }
}

/// Interpolates a vector lattice with edge clamping.
#[inline]
pub fn sample_vector(data: &[Vector3<f64>], shape: [usize; 3], p: &Vector3<f64>) -> Vector3<f64> {
    if !p.iter().all(|v| v.is_finite()) {
        return Vector3::zeros();
    }
    let mut acc = Vector3::zeros();
    for (i, w) in corners(shape, p, true) {
        if w != 0.0 {
            acc += data[i.unwrap()] * w;
        }
    }
    acc
}

/// Samples a scalar lattice at many points.
pub fn trilinear_sample(
    data: &[f64],
    shape: [usize; 3],
    points: &[Vector3<f64>],
    boundary: Boundary,
) -> Vec<f64> {
    points
        .iter()
        .map(|p| sample_scalar(data, shape, p, boundary))
        .collect()
}

/// Samples a vector lattice at many points (edge-clamped).
pub fn trilinear_sample_vectors(
    data: &[Vector3<f64>],
    shape: [usize; 3],
    points: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    points.iter().map(|p| sample_vector(data, shape, p)).collect()
}
