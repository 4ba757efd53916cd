use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A regular voxel lattice with its voxel-to-world affine (mm).
///
/// Voxel storage order is x-fastest: `index = i + nx * (j + ny * k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    shape: [usize; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
    spacing: Vector3<f64>,
}

impl Grid {
    pub fn new(shape: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::GridMismatch(format!("empty grid shape {shape:?}")));
        }
        let inverse = affine
            .try_inverse()
            .ok_or_else(|| Error::GridMismatch("affine is not invertible".into()))?;
        let linear = affine.fixed_view::<3, 3>(0, 0);
        let spacing = Vector3::new(
            linear.column(0).norm(),
            linear.column(1).norm(),
            linear.column(2).norm(),
        );
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::GridMismatch("spacing must be positive".into()));
        }
        Ok(Self {
            shape,
            affine,
            inverse,
            spacing,
        })
    }

    /// Unit-spaced grid whose voxel coordinates coincide with world coordinates.
    pub fn identity(shape: [usize; 3]) -> Self {
        Self::new(shape, Matrix4::identity()).expect("identity affine is valid")
    }

    /// Axis-aligned grid with isotropic spacing and the given world origin for voxel (0,0,0).
    pub fn axis_aligned(shape: [usize; 3], spacing: f64, origin: Vector3<f64>) -> Result<Self> {
        let mut affine = Matrix4::identity() * spacing;
        affine[(3, 3)] = 1.0;
        affine.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin);
        Self::new(shape, affine)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Matrix4<f64> {
        &self.inverse
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.affine.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn spacing(&self) -> Vector3<f64> {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.shape[0] * (j + self.shape[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn voxel_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.affine * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
    }

    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.inverse * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
    }

    /// World positions of the eight corner voxel centres.
    pub fn corners_world(&self) -> [Vector3<f64>; 8] {
        let hi = [
            (self.shape[0] - 1) as f64,
            (self.shape[1] - 1) as f64,
            (self.shape[2] - 1) as f64,
        ];
        let mut out = [Vector3::zeros(); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let p = Vector3::new(
                if c & 1 == 0 { 0.0 } else { hi[0] },
                if c & 2 == 0 { 0.0 } else { hi[1] },
                if c & 4 == 0 { 0.0 } else { hi[2] },
            );
            *slot = self.voxel_to_world(&p);
        }
        out
    }

    /// Same shape and affine within `1e-9`.
    pub fn matches(&self, other: &Grid) -> bool {
        self.shape == other.shape && (self.affine - other.affine).amax() <= 1e-9
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    /// Voxel distance from the nearest grid face.
    pub fn boundary_distance(&self, index: usize) -> usize {
        let c = self.coords(index);
        (0..3)
            .map(|a| c[a].min(self.shape[a] - 1 - c[a]))
            .min()
            .unwrap_or(0)
    }
}

/// Plain serialisable description of a [`Grid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub shape: [usize; 3],
    /// Row-major 4x4 voxel-to-world matrix.
    pub affine: [[f64; 4]; 4],
}

impl From<&Grid> for GridSpec {
    fn from(g: &Grid) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (r, row) in affine.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = g.affine[(r, c)];
            }
        }
        Self {
            shape: g.shape,
            affine,
        }
    }
}

impl TryFrom<&GridSpec> for Grid {
    type Error = Error;
    fn try_from(s: &GridSpec) -> Result<Grid> {
        let mut m = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                m[(r, c)] = s.affine[r][c];
            }
        }
        Grid::new(s.shape, m)
    }
}
