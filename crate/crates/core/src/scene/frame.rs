//! Per-frame state: pose, camera reference, and capture metadata.

use crate::geometry::Pose;
use nalgebra::Vector3;

/// Capture metadata used to initialize per-frame exposure values.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Exif {
    pub f_number: f64,
    pub exposure_time: f64,
    pub iso: f64,
}

impl Exif {
    /// Photographic exposure value: log2(F^2 / t) + log2(S / 100).
    pub fn exposure_value(&self) -> f64 {
        (self.f_number * self.f_number / self.exposure_time).log2() + (self.iso / 100.0).log2()
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: usize,
    /// Index into the scene's camera list.
    pub camera_id: usize,
    /// World-to-camera transform.
    pub pose: Pose,
    pub exif: Exif,
}

/// World-to-camera pose for a camera at `center` looking at `target`, using
/// the +z-forward, +y-down image convention.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let forward = (target - center).normalize();
    let down_hint = if forward.y.abs() < 0.99 {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let right = down_hint.cross(&forward).normalize();
    let down = forward.cross(&right);
    let rotation = nalgebra::Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let translation = -rotation * center;
    Pose { rotation, translation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_from_origin_along_z_is_identity() {
        let p = look_at(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 5.0));
        assert_relative_eq!(p.rotation, nalgebra::Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(p.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn look_at_maps_target_onto_optical_axis() {
        let c = Vector3::new(0.3, -0.2, 0.5);
        let t = Vector3::new(0.0, 0.0, 3.0);
        let pose = look_at(&c, &t);
        assert!(pose.is_valid(1e-9));
        let xc = pose.transform(&t);
        assert_relative_eq!(xc.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(xc.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(xc.z, (t - c).norm(), epsilon = 1e-12);
        // Camera center maps to the camera-space origin.
        assert_relative_eq!(pose.transform(&c).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exposure_value_matches_hand_computation() {
        let e = Exif { f_number: 2.0, exposure_time: 0.01, iso: 100.0 };
        // log2(4 / 0.01) = log2(400)
        assert_relative_eq!(e.exposure_value(), 400f64.log2(), epsilon = 1e-12);
        let e2 = Exif { f_number: 2.0, exposure_time: 0.01, iso: 200.0 };
        assert_relative_eq!(e2.exposure_value(), 400f64.log2() + 1.0, epsilon = 1e-12);
    }
}
