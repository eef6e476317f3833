//! Camera models, rigid poses and their analytic Jacobians.

mod camera;
mod pose;

pub use camera::{CameraKind, CameraModel, Projection, INTRINSIC_PARAMS};
pub use pose::{apply_tangent, hat, se3_exp, Pose, PoseTangent};

use nalgebra::{Matrix2x3, Matrix3, Matrix6x3, Vector3};

/// 2x6 Jacobian of projected pixel coordinates w.r.t. a left-composed
/// se(3) increment on the pose, ordered (translation, rotation).
///
/// With the increment applied as `exp(xi) * pose`, the camera-space point
/// moves as `xc + v + w x xc` to first order, so the translation block is
/// the projection Jacobian itself and the rotation block chains through
/// `-hat(xc)`.
pub fn pose_point_jacobian(
    camera: &CameraModel,
    pose: &Pose,
    x_world: &Vector3<f64>,
) -> Option<nalgebra::Matrix2x6<f64>> {
    let xc = pose.transform(x_world);
    let j_proj: Matrix2x3<f64> = camera.projection_jacobian(&xc)?;
    let mut j = nalgebra::Matrix2x6::<f64>::zeros();
    let j_rot = j_proj * (-hat(&xc));
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_proj);
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_rot);
    Some(j)
}

/// 3x6 Jacobian of the camera-space point w.r.t. the same increment,
/// transposed for gradient accumulation: returns d(xc)/d(xi) as 6x3.
pub fn point_tangent_jacobian_t(xc: &Vector3<f64>) -> Matrix6x3<f64> {
    let mut j = Matrix6x3::<f64>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-hat(xc)).transpose());
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Vector2, Vector3};

    fn test_camera() -> CameraModel {
        CameraModel::pinhole(640, 480, 320.0, 300.0, 320.0, 240.0, [0.05, -0.02, 0.001, 0.0])
            .unwrap()
    }

    /// Central finite differences of the projection through se3_exp at xi = 0.
    fn pose_jacobian_fd(
        camera: &CameraModel,
        pose: &Pose,
        x: &Vector3<f64>,
        h: f64,
    ) -> nalgebra::Matrix2x6<f64> {
        let mut j = nalgebra::Matrix2x6::<f64>::zeros();
        for k in 0..6 {
            let mut xi = PoseTangent::zero();
            xi.0[k] = h;
            let plus = apply_tangent(&xi, pose).unwrap();
            xi.0[k] = -h;
            let minus = apply_tangent(&xi, pose).unwrap();
            let Projection { uv: up, .. } = camera.project(&plus.transform(x)).unwrap();
            let Projection { uv: um, .. } = camera.project(&minus.transform(x)).unwrap();
            let d: Vector2<f64> = (up - um) / (2.0 * h);
            j[(0, k)] = d.x;
            j[(1, k)] = d.y;
        }
        j
    }

    #[test]
    fn translation_columns_match_projection_jacobian() {
        let camera = test_camera();
        let pose = se3_exp(&PoseTangent([0.2, -0.1, 0.3, 0.1, 0.2, -0.05])).unwrap();
        let x = Vector3::new(0.4, -0.2, 3.0);
        let xc = pose.transform(&x);
        let jp = camera.projection_jacobian(&xc).unwrap();
        let j = pose_point_jacobian(&camera, &pose, &x).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_relative_eq!(j[(r, c)], jp[(r, c)], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn pose_jacobian_matches_finite_differences() {
        let camera = test_camera();
        let mut rng = crate::rng::key_bits(11, crate::rng::Stream::Noise, 0, 0);
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for trial in 0..100 {
            let pose = se3_exp(&PoseTangent([
                next(),
                next(),
                next(),
                next() * 0.8,
                next() * 0.8,
                next() * 0.8,
            ]))
            .unwrap();
            let x = Vector3::new(next() * 2.0, next() * 2.0, 3.0 + next());
            let xc = pose.transform(&x);
            if xc.z < 0.5 {
                continue;
            }
            let j = pose_point_jacobian(&camera, &pose, &x).unwrap();
            let fd = pose_jacobian_fd(&camera, &pose, &x, 1e-5);
            for r in 0..2 {
                for c in 0..6 {
                    let denom = fd[(r, c)].abs().max(1e-7 / 1e-4);
                    assert!(
                        (j[(r, c)] - fd[(r, c)]).abs() / denom < 1e-4,
                        "trial {trial} entry ({r},{c}): analytic {} vs fd {}",
                        j[(r, c)],
                        fd[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn on_axis_rotation_column_matches_finite_differences() {
        let camera = CameraModel::pinhole(100, 100, 100.0, 100.0, 50.0, 50.0, [0.0; 4]).unwrap();
        let pose = Pose::identity();
        let x = Vector3::new(0.0, 0.0, 2.0);
        let j = pose_point_jacobian(&camera, &pose, &x).unwrap();
        let fd = pose_jacobian_fd(&camera, &pose, &x, 1e-6);
        for r in 0..2 {
            for c in 0..6 {
                assert!((j[(r, c)] - fd[(r, c)]).abs() < 1e-4, "({r},{c})");
            }
        }
        // On the optical axis a roll about z moves nothing.
        assert_relative_eq!(j[(0, 5)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(j[(1, 5)], 0.0, epsilon = 1e-12);
    }
}
