//! Dense vector fields: stationary velocity fields and displacements.
//!
//! Vectors are stored in voxel units of the field's own grid. A
//! displacement `u` represents the point map `x -> x + u(x)`.

use std::ops::Deref;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::grid::Grid;
use super::sample::sample_vector;
use crate::error::{Error, Result};
use crate::volume_io::Volume;

/// Minimum number of squaring steps in [`svf_exp`].
pub const MIN_SQUARINGS: u32 = 4;

/// Largest per-voxel step (voxels) allowed before squaring starts.
pub const MAX_INITIAL_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    values: Vec<Vector3<f64>>,
}

impl VectorField {
    pub fn new(grid: Grid, values: Vec<Vector3<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} vectors for a grid of {} voxels",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let values = vec![Vector3::zeros(); grid.len()];
        Self { grid, values }
    }

    /// Builds a field by evaluating `f` at every voxel coordinate.
    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> Vector3<f64> + Sync) -> Self {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|i| f(grid.coords(i)))
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Vector3<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Vector3<f64>> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Edge-clamped trilinear sample at a continuous voxel coordinate.
    pub fn sample(&self, p: &Vector3<f64>) -> Vector3<f64> {
        sample_vector(&self.values, self.grid.shape(), p)
    }

    /// Single coordinate as a flat scalar array.
    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[axis]).collect()
    }
}

/// Stationary velocity field: the log-domain generator of a diffeomorphism.
#[derive(Clone, Debug, PartialEq)]
pub struct Svf(VectorField);

/// Integrated deformation, stored as displacement from the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(VectorField);

macro_rules! field_newtype {
    ($name:ident) => {
        impl $name {
            pub fn new(field: VectorField) -> Self {
                Self(field)
            }

            pub fn zeros(grid: Grid) -> Self {
                Self(VectorField::zeros(grid))
            }

            pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> Vector3<f64> + Sync) -> Self {
                Self(VectorField::from_fn(grid, f))
            }

            pub fn field(&self) -> &VectorField {
                &self.0
            }

            pub fn field_mut(&mut self) -> &mut VectorField {
                &mut self.0
            }

            pub fn into_field(self) -> VectorField {
                self.0
            }
        }

        impl Deref for $name {
            type Target = VectorField;
            fn deref(&self) -> &VectorField {
                &self.0
            }
        }
    };
}

field_newtype!(Svf);
field_newtype!(DisplacementField);

impl Svf {
    pub fn scaled(&self, s: f64) -> Svf {
        Svf(self.0.scaled(s))
    }
}

impl DisplacementField {
    pub fn identity(grid: Grid) -> Self {
        Self::zeros(grid)
    }

    /// Image of voxel coordinate `p` under the map `x -> x + u(x)`.
    pub fn map_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p + self.sample(p)
    }
}

/// `(outer ∘ inner)(x) = inner(x) + outer(x + inner(x))`, edge-clamped.
pub fn compose_displacements(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    outer
        .grid()
        .ensure_matches(inner.grid(), "compose_displacements")?;
    Ok(DisplacementField(compose_unchecked(&outer.0, &inner.0)))
}

fn compose_unchecked(outer: &VectorField, inner: &VectorField) -> VectorField {
    let grid = inner.grid.clone();
    let shape = grid.shape();
    let plane = shape[0] * shape[1];
    let mut values = vec![Vector3::zeros(); grid.len()];
    values
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..shape[1] {
                for i in 0..shape[0] {
                    let local = i + shape[0] * j;
                    let u = inner.values[local + k * plane];
                    let p = Vector3::new(i as f64, j as f64, k as f64) + u;
                    slab[local] = u + sample_vector(&outer.values, shape, &p);
                }
            }
        });
    VectorField { grid, values }
}

/// Number of squarings so that `max_norm / 2^s < 0.5` voxel, at least 4.
pub fn squaring_steps(max_norm: f64) -> u32 {
    let mut s = MIN_SQUARINGS;
    while max_norm / 2f64.powi(s as i32) >= MAX_INITIAL_STEP {
        s += 1;
    }
    s
}

/// Direction of integration for [`svf_exp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Inverse => -1.0,
        }
    }
}

/// Exponential of an SVF by scaling and squaring.
///
/// `Direction::Inverse` integrates `-v`, which is the inverse deformation.
pub fn svf_exp(v: &Svf, direction: Direction) -> Result<DisplacementField> {
    if !v.is_finite() {
        return Err(Error::NonFiniteField);
    }
    let steps = squaring_steps(v.max_norm());
    let mut u = v.0.scaled(direction.sign() / 2f64.powi(steps as i32));
    for _ in 0..steps {
        u = compose_unchecked(&u, &u);
    }
    Ok(DisplacementField(u))
}

/// Jacobian matrix `I + du/dx` of the map `x -> x + u(x)` at one voxel,
/// in voxel units (central differences, one-sided at the faces).
pub fn displacement_jacobian(field: &VectorField, c: [usize; 3]) -> Matrix3<f64> {
    let grid = field.grid();
    let shape = grid.shape();
    let mut jac = Matrix3::identity();
    for axis in 0..3 {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let (lo, hi) = if c[axis] == 0 {
            (0, 1)
        } else if c[axis] == n - 1 {
            (n - 2, n - 1)
        } else {
            (c[axis] - 1, c[axis] + 1)
        };
        let mut a = c;
        let mut b = c;
        a[axis] = lo;
        b[axis] = hi;
        let d = (field.values[grid.index(b[0], b[1], b[2])]
            - field.values[grid.index(a[0], a[1], a[2])])
            / (hi - lo) as f64;
        for row in 0..3 {
            jac[(row, axis)] += d[row];
        }
    }
    jac
}

/// Determinant of the deformation Jacobian at every voxel.
///
/// With displacements in voxel units the determinant is invariant to the
/// grid spacing, so the map is directly a relative volume change: values
/// above 1 are expansion, below 1 contraction.
pub fn jacobian_determinant(phi: &DisplacementField) -> Volume {
    let grid = phi.grid().clone();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| displacement_jacobian(phi.field(), grid.coords(i)).determinant())
        .collect();
    Volume::new(grid, data).expect("shape matches grid")
}
