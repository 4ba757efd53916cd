//! Rigid motions and their Lie-algebra parameterisation.
//!
//! A [`RigidLog`] `(q, d)` is the 6-vector generator of a rigid motion:
//! `q` is the rotation axis scaled by the angle, `d` the translation
//! generator. The exponential and logarithm use the closed forms of SE(3);
//! composition in the log-domain is the first-order BCH truncation.

use std::ops::{Add, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for orthonormality and determinant checks.
pub const RIGID_TOLERANCE: f64 = 1e-9;

/// Below this angle the closed forms are replaced by Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-5;

/// Rotations at or beyond `PI - NEAR_PI_MARGIN` have no stable axis.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// A proper rigid motion `x -> U x + t` in world coordinates (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NotARigidTransform("non-finite entries".into()));
        }
        let orth = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        if orth > RIGID_TOLERANCE {
            return Err(Error::NotARigidTransform(format!(
                "rotation is not orthonormal (max |UU^T - I| = {orth:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > RIGID_TOLERANCE {
            return Err(Error::NotARigidTransform(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Builds a transform from a homogeneous 4x4 matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.fixed_view::<1, 4>(3, 0);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > RIGID_TOLERANCE
        {
            return Err(Error::NotARigidTransform(
                "last row must be (0, 0, 0, 1)".into(),
            ));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Lie-algebra coordinates `(q, d)` of a rigid motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidLog {
    /// Rotation generator: axis times angle (radians).
    pub rotation: Vector3<f64>,
    /// Translation generator (mm).
    pub translation: Vector3<f64>,
}

impl RigidLog {
    pub fn zero() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Packs as `[qx, qy, qz, dx, dy, dz]`.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rotation.x,
            self.rotation.y,
            self.rotation.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            rotation: Vector3::new(a[0], a[1], a[2]),
            translation: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn angle(&self) -> f64 {
        self.rotation.norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rotation: self.rotation * s,
            translation: self.translation * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Add for RigidLog {
    type Output = RigidLog;
    fn add(self, rhs: RigidLog) -> RigidLog {
        RigidLog {
            rotation: self.rotation + rhs.rotation,
            translation: self.translation + rhs.translation,
        }
    }
}

impl Sub for RigidLog {
    type Output = RigidLog;
    fn sub(self, rhs: RigidLog) -> RigidLog {
        RigidLog {
            rotation: self.rotation - rhs.rotation,
            translation: self.translation - rhs.translation,
        }
    }
}

impl Neg for RigidLog {
    type Output = RigidLog;
    fn neg(self) -> RigidLog {
        RigidLog {
            rotation: -self.rotation,
            translation: -self.translation,
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `(sin φ/φ, (1 - cos φ)/φ², (φ - sin φ)/φ³)`.
fn exp_coefficients(phi: f64) -> (f64, f64, f64) {
    if phi < SMALL_ANGLE {
        let p2 = phi * phi;
        (1.0 - p2 / 6.0, 0.5 - p2 / 24.0, 1.0 / 6.0 - p2 / 120.0)
    } else {
        let p2 = phi * phi;
        let half = (0.5 * phi).sin();
        (
            phi.sin() / phi,
            2.0 * half * half / p2,
            (phi - phi.sin()) / (p2 * phi),
        )
    }
}

/// The left Jacobian `V` with `t = V d`.
pub fn translation_jacobian(q: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = exp_coefficients(q.norm());
    let qm = skew(q);
    Matrix3::identity() + qm * b + qm * qm * c
}

pub fn se3_exp(v: &RigidLog) -> RigidTransform {
    let phi = v.rotation.norm();
    let (a, b, c) = exp_coefficients(phi);
    let qm = skew(&v.rotation);
    let q2 = qm * qm;
    let rotation = Matrix3::identity() + qm * a + q2 * b;
    let jac = Matrix3::identity() + qm * b + q2 * c;
    RigidTransform {
        rotation,
        translation: jac * v.translation,
    }
}

pub fn se3_log(m: &RigidTransform) -> Result<RigidLog> {
    let u = &m.rotation;
    let w = Vector3::new(u[(2, 1)] - u[(1, 2)], u[(0, 2)] - u[(2, 0)], u[(1, 0)] - u[(0, 1)]);
    let sin_phi = 0.5 * w.norm();
    let cos_phi = 0.5 * (u.trace() - 1.0);
    let phi = sin_phi.atan2(cos_phi);
    if phi >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(Error::RotationNearPi { angle: phi });
    }

    let p2 = phi * phi;
    let (factor, q2_coeff) = if phi < SMALL_ANGLE {
        (0.5 * (1.0 + p2 / 6.0), 1.0 / 12.0 + p2 / 720.0)
    } else {
        let half = 0.5 * phi;
        (
            phi / (2.0 * sin_phi),
            (1.0 - half * half.cos() / half.sin()) / p2,
        )
    };
    let q = w * factor;
    let qm = skew(&q);
    let inv_jac = Matrix3::identity() - qm * 0.5 + qm * qm * q2_coeff;
    Ok(RigidLog {
        rotation: q,
        translation: inv_jac * m.translation,
    })
}

/// First-order BCH composition: the sum of generators.
///
/// Exact only when the generators commute; this is the algebra the
/// latent-transform model is built on.
pub fn log_compose(a: &RigidLog, b: &RigidLog) -> RigidLog {
    *a + *b
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    /// Rodrigues rotation built from axis/angle, independent of `se3_exp`.
    fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let kkt = k * k.transpose();
        Matrix3::identity() * angle.cos() + kx * angle.sin() + kkt * (1.0 - angle.cos())
    }

    /// Numerical integral of exp(sQ) over s in [0, 1] (Simpson rule).
    fn quadrature_jacobian(q: Vector3<f64>) -> Matrix3<f64> {
        let n = 2000;
        let h = 1.0 / n as f64;
        let phi = q.norm();
        let mut acc = Matrix3::zeros();
        for i in 0..=n {
            let s = i as f64 * h;
            let r = if phi == 0.0 {
                Matrix3::identity()
            } else {
                rodrigues(q, s * phi)
            };
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += r * w;
        }
        acc * (h / 3.0)
    }

    fn random_log(rng: &mut ChaCha8Rng, max_angle: f64) -> RigidLog {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let d = Vector3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        );
        RigidLog::new(axis * angle, d)
    }

    #[test]
    fn log_of_identity_is_zero() {
        let v = se3_log(&RigidTransform::identity()).unwrap();
        assert_eq!(v, RigidLog::zero());
    }

    #[test]
    fn pure_translation_log() {
        let m = RigidTransform::translation_only(Vector3::new(5.0, -2.0, 1.0));
        let v = se3_log(&m).unwrap();
        assert_eq!(v.rotation, Vector3::zeros());
        assert_abs_diff_eq!(v.translation, Vector3::new(5.0, -2.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn round_trip_at_angle_point_seven() {
        let axis = Vector3::new(0.3, -0.8, 0.5).normalize();
        let m = RigidTransform::new(rodrigues(axis, 0.7), Vector3::new(3.0, 4.0, -1.0)).unwrap();
        let back = se3_exp(&se3_log(&m).unwrap());
        assert_abs_diff_eq!(back.to_matrix(), m.to_matrix(), epsilon = 1e-9);
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&RigidLog::zero()), RigidTransform::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let v = RigidLog::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros());
        let m = se3_exp(&v);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(*m.rotation(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(*m.rotation(), rodrigues(Vector3::z(), FRAC_PI_2), epsilon = 1e-15);
        assert_eq!(*m.translation(), Vector3::zeros());
    }

    #[test]
    fn translation_matches_quadrature() {
        let q = Vector3::new(0.0, 0.0, FRAC_PI_2);
        let v = RigidLog::new(q, Vector3::new(1.0, 0.0, 0.0));
        let m = se3_exp(&v);
        let expected = quadrature_jacobian(q) * Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(*m.translation(), expected, epsilon = 1e-10);
        // closed form: (sin φ/φ, (1 - cos φ)/φ, 0)
        assert_abs_diff_eq!(m.translation().x, 2.0 / std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_quadrature_for_random_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let v = random_log(&mut rng, 3.0);
            assert_abs_diff_eq!(
                translation_jacobian(&v.rotation),
                quadrature_jacobian(v.rotation),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn small_angles_are_continuous() {
        for &phi in &[0.0, 1e-9, 9.9e-6, 1.01e-5, 1e-4] {
            let v = RigidLog::new(Vector3::new(phi, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0));
            let back = se3_log(&se3_exp(&v)).unwrap();
            assert_abs_diff_eq!(back.rotation, v.rotation, epsilon = 1e-14);
            assert_abs_diff_eq!(back.translation, v.translation, epsilon = 1e-12);
        }
    }

    #[test]
    fn near_pi_is_rejected() {
        let m = se3_exp(&RigidLog::new(
            Vector3::new(0.0, std::f64::consts::PI - 1e-8, 0.0),
            Vector3::zeros(),
        ));
        assert!(matches!(se3_log(&m), Err(Error::RotationNearPi { .. })));
    }

    #[test]
    fn rejects_reflections_and_shears() {
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            RigidTransform::new(reflect, Vector3::zeros()),
            Err(Error::NotARigidTransform(_))
        ));
        let mut shear = Matrix3::identity();
        shear[(0, 1)] = 0.1;
        assert!(RigidTransform::new(shear, Vector3::zeros()).is_err());
    }

    #[test]
    fn inverse_is_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = random_log(&mut rng, 3.0);
            let inv = se3_exp(&-v);
            let expected = se3_exp(&v).to_matrix().try_inverse().unwrap();
            assert_abs_diff_eq!(inv.to_matrix(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn additive_composition_commuting_translations() {
        let a = RigidLog::from_array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = RigidLog::from_array([0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let sum = log_compose(&a, &b);
        assert_eq!(sum.to_array(), [0.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
        let exact = se3_log(&se3_exp(&a).compose(&se3_exp(&b))).unwrap();
        assert_abs_diff_eq!(exact.translation, sum.translation, epsilon = 1e-14);
        assert_eq!(log_compose(&RigidLog::zero(), &RigidLog::zero()), RigidLog::zero());
    }

    #[test]
    fn additive_composition_gap_is_small_for_noncommuting_rotations() {
        let a = RigidLog::new(Vector3::new(0.0, 0.0, 0.3), Vector3::zeros());
        let b = RigidLog::new(Vector3::new(0.3, 0.0, 0.0), Vector3::zeros());
        let exact = se3_log(&se3_exp(&a).compose(&se3_exp(&b))).unwrap();
        let approx = log_compose(&a, &b);
        let gap = (exact.rotation - approx.rotation).amax();
        // leading BCH correction is 0.5 [a, b] = 0.5 * 0.09 = 0.045
        assert!(gap > 1e-3 && gap < 0.05, "gap = {gap}");
    }
}
