//! Rigid-body algebra shared by every other module.
//!
//! Rotations are stored as unit quaternions and renormalized after every
//! composition, so arbitrarily long kinematic chains stay orthonormal.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("matrix is not a proper rotation (orthonormality error {0:.3e}, det {1:.6})")]
    NotARotation(f64, f64),
    #[error("zero-length direction vector")]
    ZeroDirection,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A proper 3D rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    /// A zero axis yields the identity.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        match Unit::try_new(*axis, 1e-300) {
            Some(unit) => Self(UnitQuaternion::from_axis_angle(&unit, angle)),
            None => Self::identity(),
        }
    }

    /// Rotation vector (axis scaled by angle) to rotation.
    pub fn from_scaled_axis(v: &Vec3) -> Self {
        Self(UnitQuaternion::from_scaled_axis(*v))
    }

    /// Accepts a 3x3 matrix only if it is orthonormal with determinant +1
    /// within 1e-9.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, GeomError> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::NonFinite("rotation matrix"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeomError::NotARotation(ortho, det));
        }
        let rot = Rotation3::from_matrix_unchecked(*m);
        Ok(Self(UnitQuaternion::from_rotation_matrix(&rot)))
    }

    /// Rotation whose columns are the given orthonormal basis vectors.
    pub fn from_basis(x: &Vec3, y: &Vec3, z: &Vec3) -> Result<Self, GeomError> {
        Self::from_matrix(&Matrix3::from_columns(&[*x, *y, *z]))
    }

    pub fn from_quaternion_wxyz(q: [f64; 4]) -> Result<Self, GeomError> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::NonFinite("quaternion"));
        }
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        if quat.norm() < 1e-12 {
            return Err(GeomError::ZeroDirection);
        }
        Ok(Self(UnitQuaternion::from_quaternion(quat)))
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    /// Fixed-axis roll/pitch/yaw: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    pub fn to_rpy(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        let mut q = self.0 * other.0;
        q.renormalize();
        Self(q)
    }

    /// Rotation vector (axis * angle), angle in [0, pi].
    pub fn scaled_axis(&self) -> Vec3 {
        self.0.scaled_axis()
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// Angle of the relative rotation between `self` and `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.0.angle_to(&other.0)
    }
}

/// Rigid transform `p -> R p + t`, translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Pose from position and fixed-axis roll/pitch/yaw (radians).
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            Rotation::from_rpy(rpy[0], rpy[1], rpy[2]),
            Vec3::new(xyz[0], xyz[1], xyz[2]),
        )
    }

    /// `self ∘ other`: maps points through `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn invert(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            rotation: inv,
            translation: -inv.apply(&self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    /// Rotates a free vector (no translation).
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.apply(v)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Translation distance and rotation angle to `other`.
    pub fn distance_to(&self, other: &RigidTransform) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|x| x.is_finite()) && self.rotation.quaternion_wxyz().iter().all(|x| x.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    translation: [f64; 3],
    quaternion_wxyz: [f64; 4],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformRepr {
            translation: self.translation.into(),
            quaternion_wxyz: self.rotation.quaternion_wxyz(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(d)?;
        let rotation = Rotation::from_quaternion_wxyz(repr.quaternion_wxyz).map_err(serde::de::Error::custom)?;
        Ok(Self::new(rotation, repr.translation.into()))
    }
}

/// Half-line with a unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self, GeomError> {
        let n = direction.norm();
        if !n.is_finite() || !origin.iter().all(|x| x.is_finite()) {
            return Err(GeomError::NonFinite("ray"));
        }
        if n < 1e-300 {
            return Err(GeomError::ZeroDirection);
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Minimal rotation taking unit vector `a` onto unit vector `b`.
///
/// Antiparallel inputs rotate by pi about the coordinate axis least aligned
/// with `a` (ties go to the lower index), projected perpendicular to `a`.
pub fn rotation_between(a: &Vec3, b: &Vec3) -> Rotation {
    let cross = a.cross(b);
    let s = cross.norm();
    let c = a.dot(b);
    if s > 1e-12 {
        return Rotation::from_axis_angle(&(cross / s), s.atan2(c));
    }
    if c > 0.0 {
        return Rotation::identity();
    }
    let mut idx = 0;
    for i in 1..3 {
        if a[i].abs() < a[idx].abs() {
            idx = i;
        }
    }
    let e = Vec3::ith(idx, 1.0);
    let axis = e - a * a.dot(&e);
    Rotation::from_axis_angle(&axis, std::f64::consts::PI)
}

/// Any unit vector perpendicular to `v`, chosen deterministically.
pub fn any_perpendicular(v: &Vec3) -> Vec3 {
    let mut idx = 0;
    for i in 1..3 {
        if v[i].abs() < v[idx].abs() {
            idx = i;
        }
    }
    let e = Vec3::ith(idx, 1.0);
    (e - v * v.dot(&e)).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn arb_unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
            .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (arb_unit(), -3.2f64..3.2, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0).prop_map(|(axis, angle, x, y, z)| {
            RigidTransform::new(Rotation::from_axis_angle(&axis, angle), Vec3::new(x, y, z))
        })
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = RigidTransform::new(Rotation::from_rpy(0.3, -0.2, 1.1), Vec3::new(1.0, 2.0, 3.0));
        let c = t.compose(&RigidTransform::identity());
        let (dt, dr) = c.distance_to(&t);
        assert!(dt < 1e-15 && dr < 1e-12);
        let (dt, dr) = t.compose(&t.invert()).distance_to(&RigidTransform::identity());
        assert!(dt < 1e-12 && dr < 1e-12);
    }

    #[test]
    fn double_quarter_turn() {
        let r = RigidTransform::from_rotation(Rotation::rot_z(FRAC_PI_2));
        let p = r.compose(&r).apply(&Vec3::x());
        assert!(close(&p, &Vec3::new(-1.0, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn apply_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidTransform::identity().apply(&p), p);
        let r = RigidTransform::from_rotation(Rotation::rot_z(FRAC_PI_2));
        assert!(close(&r.apply(&Vec3::x()), &Vec3::y(), 1e-15));
        let t = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(t.apply(&Vec3::x()), Vec3::new(1.0, 0.0, 5.0));
    }

    #[test]
    fn rotation_between_examples() {
        let a = Vec3::new(0.0, 0.6, 0.8);
        assert!(rotation_between(&a, &a).angle() < 1e-15);
        let r = rotation_between(&Vec3::x(), &Vec3::y());
        assert!((r.angle() - FRAC_PI_2).abs() < 1e-15);
        assert!(close(&r.scaled_axis().normalize(), &Vec3::z(), 1e-15));
    }

    #[test]
    fn rotation_between_antiparallel_is_deterministic() {
        let a = Vec3::new(1.0, 0.0, 0.0);
        let r = rotation_between(&a, &-a);
        assert!(close(&r.apply(&a), &-a, 1e-15));
        // y is the first axis with the smallest |a_i|
        assert!(close(&r.scaled_axis().normalize().abs(), &Vec3::y(), 1e-15));
        let a = Vec3::new(0.3, -0.5, 0.1).normalize();
        let r = rotation_between(&a, &-a);
        assert!(close(&r.apply(&a), &-a, 1e-12));
        assert_eq!(r, rotation_between(&a, &-a));
    }

    #[test]
    fn from_matrix_rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(Rotation::from_matrix(&m), Err(GeomError::NotARotation(..))));
        let m = Rotation::from_rpy(0.1, 0.2, 0.3).matrix();
        assert!(Rotation::from_matrix(&m).is_ok());
    }

    #[test]
    fn ten_thousand_compositions_stay_orthonormal() {
        let step = Rotation::from_rpy(0.123, -0.456, 0.789);
        let mut acc = Rotation::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&step);
        }
        let m = acc.matrix();
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        assert!(ortho < 1e-9);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ray_normalizes() {
        let r = Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.0, -3.0)).unwrap();
        assert_eq!(r.direction, Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(Ray::new(Vec3::zeros(), Vec3::zeros()), Err(GeomError::ZeroDirection));
    }

    #[test]
    fn transform_json_round_trip() {
        let t = RigidTransform::new(Rotation::from_rpy(0.3, -0.2, 1.1), Vec3::new(0.1, 0.2, 0.3));
        let s = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert_eq!(back.translation, t.translation);
        assert_eq!(back.rotation.quaternion_wxyz(), t.rotation.quaternion_wxyz());
    }

    proptest! {
        #[test]
        fn inverse_properties(t in arb_transform()) {
            let (dt, dr) = t.compose(&t.invert()).distance_to(&RigidTransform::identity());
            prop_assert!(dt < 1e-12 && dr < 1e-12);
            let (dt, dr) = t.invert().invert().distance_to(&t);
            prop_assert!(dt < 1e-12 && dr < 1e-12);
        }

        #[test]
        fn apply_distributes_over_compose(a in arb_transform(), b in arb_transform(),
                                          x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let p = Vec3::new(x, y, z);
            prop_assert!(close(&a.compose(&b).apply(&p), &a.apply(&b.apply(&p)), 1e-10));
        }

        #[test]
        fn composition_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let (dt, dr) = a.compose(&b).compose(&c).distance_to(&a.compose(&b.compose(&c)));
            prop_assert!(dt < 1e-9 && dr < 1e-9);
        }

        #[test]
        fn rotation_between_maps_a_to_b(a in arb_unit(), b in arb_unit()) {
            let r = rotation_between(&a, &b);
            prop_assert!(close(&r.apply(&a), &b, 1e-10));
        }

        #[test]
        fn perpendicular_is_unit_and_orthogonal(v in arb_unit()) {
            let p = any_perpendicular(&v);
            prop_assert!((p.norm() - 1.0).abs() < 1e-12);
            prop_assert!(p.dot(&v).abs() < 1e-12);
        }
    }
}
