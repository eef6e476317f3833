//! Rigid world-to-camera transforms and se(3) tangent algebra.

use crate::{Error, Result};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// World-to-camera rigid transform: `xc = R * x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// se(3) increment ordered (translation x,y,z, rotation x,y,z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTangent(pub [f64; 6]);

impl PoseTangent {
    pub fn zero() -> Self {
        PoseTangent([0.0; 6])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Skew-symmetric cross-product matrix: `hat(w) * v == w x v`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Pose {
            rotation,
            translation,
        };
        if !pose.is_valid(1e-9) {
            return Err(Error::InvalidArgument(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        Ok(pose)
    }

    /// Quaternion is (w, x, y, z); normalized internally.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidArgument("degenerate quaternion".into()));
        }
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0] / norm,
            q[1] / norm,
            q[2] / norm,
            q[3] / norm,
        ));
        Ok(Pose {
            rotation: *quat.to_rotation_matrix().matrix(),
            translation,
        })
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        err < tol * 10.0 && (r.determinant() - 1.0).abs() < tol * 10.0
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Camera-to-world rotation of a direction.
    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Projects the rotation back onto SO(3) after accumulated updates.
    pub fn reorthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u_flip = u;
            u_flip.column_mut(2).scale_mut(-1.0);
            r = u_flip * vt;
        }
        self.rotation = r;
    }
}

/// Exponential map from se(3) to SE(3); exact identity at `xi = 0`.
pub fn se3_exp(xi: &PoseTangent) -> Result<Pose> {
    if !xi.is_finite() {
        return Err(Error::NonFinite("pose tangent"));
    }
    let v = Vector3::new(xi.0[0], xi.0[1], xi.0[2]);
    let w = Vector3::new(xi.0[3], xi.0[4], xi.0[5]);
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(&w);
    let k2 = k * k;

    // Rodrigues coefficients with series fallbacks near zero.
    let (a, b, c) = if theta < 1e-5 {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };

    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v_mat = Matrix3::identity() + k * b + k2 * c;
    Ok(Pose {
        rotation,
        translation: v_mat * v,
    })
}

/// Left-composed tangent update: `exp(xi) * pose`. The caller owns the
/// contract of resetting `xi` to zero after applying it.
pub fn apply_tangent(xi: &PoseTangent, pose: &Pose) -> Result<Pose> {
    Ok(se3_exp(xi)?.compose(pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    /// Rodrigues rotation of a vector about a unit axis, written out directly.
    fn rodrigues(axis: Vector3<f64>, angle: f64, p: Vector3<f64>) -> Vector3<f64> {
        p * angle.cos() + axis.cross(&p) * angle.sin() + axis * (axis.dot(&p)) * (1.0 - angle.cos())
    }

    #[test]
    fn exp_of_zero_is_exact_identity() {
        let p = se3_exp(&PoseTangent::zero()).unwrap();
        assert_eq!(p.rotation, Matrix3::identity());
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn quarter_turn_about_z_rotates_x_to_y() {
        let p = se3_exp(&PoseTangent([0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2])).unwrap();
        let got = p.transform(&Vector3::new(1.0, 0.0, 0.0));
        let want = rodrigues(Vector3::z(), FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(got, want, epsilon = 1e-12);
        assert_relative_eq!(got, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rotation_angle_matches_tangent_norm() {
        let w = Vector3::new(0.3, -0.4, 0.5);
        let p = se3_exp(&PoseTangent([0.0, 0.0, 0.0, w.x, w.y, w.z])).unwrap();
        let trace = p.rotation.trace();
        let angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert_relative_eq!(angle, w.norm(), epsilon = 1e-9);
    }

    #[test]
    fn exp_composes_with_its_inverse_to_identity() {
        let xi = PoseTangent([0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let neg = PoseTangent([-0.1, 0.2, -0.3, -0.4, 0.5, -0.6]);
        let p = se3_exp(&xi).unwrap().compose(&se3_exp(&neg).unwrap());
        assert!((p.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(p.translation.norm() < 1e-9);
    }

    #[test]
    fn non_finite_tangent_is_rejected() {
        assert!(se3_exp(&PoseTangent([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn apply_zero_tangent_preserves_pose() {
        let pose = se3_exp(&PoseTangent([0.3, 0.1, -0.2, 0.2, 0.1, 0.4])).unwrap();
        let out = apply_tangent(&PoseTangent::zero(), &pose).unwrap();
        assert_eq!(out.rotation, pose.rotation);
        assert_eq!(out.translation, pose.translation);
    }

    #[test]
    fn translation_only_tangent_on_identity() {
        let out = apply_tangent(&PoseTangent([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &Pose::identity())
            .unwrap();
        assert_relative_eq!(out.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn commuting_translation_steps_compose_to_one_big_step() {
        let pose = se3_exp(&PoseTangent([0.0, 0.0, 0.0, 0.1, 0.2, 0.3])).unwrap();
        let step = PoseTangent([0.25, -0.5, 0.125, 0.0, 0.0, 0.0]);
        let mut seq = pose.clone();
        for _ in 0..4 {
            seq = apply_tangent(&step, &seq).unwrap();
        }
        let big = apply_tangent(&PoseTangent([1.0, -2.0, 0.5, 0.0, 0.0, 0.0]), &pose).unwrap();
        assert_relative_eq!(seq.translation, big.translation, epsilon = 1e-12);
        assert!((seq.rotation - big.rotation).norm() < 1e-12);
    }

    #[test]
    fn small_angle_expansion_is_second_order() {
        let v = Vector3::new(0.6, -0.8, 0.2).normalize();
        let mut prev_ratio = None;
        for &eps in &[1e-2, 1e-3, 1e-4] {
            let p = se3_exp(&PoseTangent([0.0, 0.0, 0.0, eps * v.x, eps * v.y, eps * v.z]))
                .unwrap();
            let first_order = Matrix3::identity() + hat(&(v * eps));
            let err = (p.rotation - first_order).norm();
            let ratio = err / (eps * eps);
            // The ratio err / eps^2 stays bounded by the same constant.
            if let Some(prev) = prev_ratio {
                assert!((ratio / prev as f64) < 2.0, "ratio {ratio} vs {prev}");
            }
            assert!(ratio < 1.0);
            prev_ratio = Some(ratio);
        }
    }

    #[test]
    fn reorthonormalize_repairs_drift() {
        let mut pose = se3_exp(&PoseTangent([0.0, 0.0, 0.0, 0.2, 0.3, 0.1])).unwrap();
        pose.rotation[(0, 0)] += 1e-6;
        pose.reorthonormalize();
        assert!(pose.is_valid(1e-9));
    }
}
