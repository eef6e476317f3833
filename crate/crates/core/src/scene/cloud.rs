//! Point cloud storage: positions, optional normals, per-point descriptor
//! vectors, and world-space radii.

use crate::{Error, Result};
use nalgebra::Vector3;

/// Interpretation of stored descriptor values. Logarithmic storage keeps
/// high-dynamic-range scenes well conditioned; values are mapped through
/// exp when they enter the rendering pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorSpace {
    Linear,
    Logarithmic,
}

/// Scenes whose radiance ratio exceeds this are stored logarithmically.
pub const LOG_SPACE_RATIO: f64 = 400.0;

/// Linear values are clamped here when converting out of log space; the
/// derivative is zeroed past the clamp.
pub const LINEAR_CLAMP: f64 = 1e30;

/// Picks the descriptor space from the scene's max/min radiance ratio.
/// The threshold is strict: exactly 400 stays linear.
pub fn choose_descriptor_space(radiance_ratio: f64) -> DescriptorSpace {
    assert!(radiance_ratio >= 1.0, "radiance ratio must be >= 1");
    if radiance_ratio > LOG_SPACE_RATIO {
        DescriptorSpace::Logarithmic
    } else {
        DescriptorSpace::Linear
    }
}

/// Maps one stored descriptor value to linear radiance, returning the value
/// and its derivative w.r.t. the stored value.
#[inline]
pub fn descriptor_to_linear(d: f64, space: DescriptorSpace) -> (f64, f64) {
    match space {
        DescriptorSpace::Linear => (d, 1.0),
        DescriptorSpace::Logarithmic => {
            let v = d.exp();
            if v > LINEAR_CLAMP {
                (LINEAR_CLAMP, 0.0)
            } else {
                (v, v)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Row-major N x dim.
    pub descriptors: Vec<f64>,
    pub descriptor_dim: usize,
    pub world_radii: Vec<f64>,
    pub descriptor_space: DescriptorSpace,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        let d = self.descriptor_dim;
        &self.descriptors[i * d..(i + 1) * d]
    }

    pub fn descriptor_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.descriptor_dim;
        &mut self.descriptors[i * d..(i + 1) * d]
    }

    /// Checks the structural invariants: matching lengths, unit normals,
    /// positive radii, no non-finite values.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.descriptor_dim == 0 {
            return Err(Error::InvalidArgument("descriptor_dim must be >= 1".into()));
        }
        if self.descriptors.len() != n * self.descriptor_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} descriptor values for {} points of dim {}",
                self.descriptors.len(),
                n,
                self.descriptor_dim
            )));
        }
        if self.world_radii.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} radii for {} points",
                self.world_radii.len(),
                n
            )));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} normals for {} points",
                    normals.len(),
                    n
                )));
            }
            for nv in normals {
                if !nv.iter().all(|c| c.is_finite()) {
                    return Err(Error::NonFinite("point normal"));
                }
                if (nv.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "normal {:?} is not unit length",
                        nv
                    )));
                }
            }
        }
        for p in &self.positions {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite("point position"));
            }
        }
        if !self.descriptors.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("point descriptor"));
        }
        for &r in &self.world_radii {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!("world radius {r} must be > 0")));
            }
        }
        Ok(())
    }

    /// Rebuilds the cloud with point `perm[new] = old` ordering.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        assert_eq!(perm.len(), self.len());
        let d = self.descriptor_dim;
        let mut descriptors = Vec::with_capacity(self.descriptors.len());
        for &old in perm {
            descriptors.extend_from_slice(self.descriptor(old));
        }
        PointCloud {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| perm.iter().map(|&i| ns[i]).collect()),
            descriptors,
            descriptor_dim: d,
            world_radii: perm.iter().map(|&i| self.world_radii[i]).collect(),
            descriptor_space: self.descriptor_space,
        }
    }
}

/// Axis-aligned bounds of a position set. Empty input yields a zero box at
/// the origin.
pub fn bounding_box(positions: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if positions.is_empty() {
        return (Vector3::zeros(), Vector3::zeros());
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn space_choice_uses_strict_threshold() {
        assert_eq!(choose_descriptor_space(1.0), DescriptorSpace::Linear);
        assert_eq!(choose_descriptor_space(400.0), DescriptorSpace::Linear);
        assert_eq!(choose_descriptor_space(400.0001), DescriptorSpace::Logarithmic);
        // An 8.7-stop range comfortably exceeds the threshold.
        assert_eq!(choose_descriptor_space(426.67), DescriptorSpace::Logarithmic);
    }

    #[test]
    fn descriptor_to_linear_values() {
        assert_eq!(descriptor_to_linear(0.5, DescriptorSpace::Linear), (0.5, 1.0));
        assert_eq!(descriptor_to_linear(0.0, DescriptorSpace::Logarithmic).0, 1.0);
        let (v, _) = descriptor_to_linear(426.67f64.ln(), DescriptorSpace::Logarithmic);
        assert_relative_eq!(v, 426.67, max_relative = 1e-4);
    }

    #[test]
    fn descriptor_to_linear_clamps_with_zero_gradient() {
        let (v, dv) = descriptor_to_linear(100.0, DescriptorSpace::Logarithmic);
        assert_eq!(v, LINEAR_CLAMP);
        assert_eq!(dv, 0.0);
    }

    #[test]
    fn log_space_derivative_matches_finite_differences() {
        let h = 1e-6;
        for &d in &[-3.0, -0.5, 0.0, 1.2, 4.0] {
            let (_, dv) = descriptor_to_linear(d, DescriptorSpace::Logarithmic);
            let fd = (descriptor_to_linear(d + h, DescriptorSpace::Logarithmic).0
                - descriptor_to_linear(d - h, DescriptorSpace::Logarithmic).0)
                / (2.0 * h);
            assert_relative_eq!(dv, fd, max_relative = 1e-6);
        }
    }

    fn tiny_cloud() -> PointCloud {
        PointCloud {
            positions: vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 1.0)],
            normals: Some(vec![Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, -1.0)]),
            descriptors: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            descriptor_dim: 3,
            world_radii: vec![0.5, 0.5],
            descriptor_space: DescriptorSpace::Linear,
        }
    }

    #[test]
    fn validate_accepts_consistent_cloud() {
        tiny_cloud().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_data() {
        let mut c = tiny_cloud();
        c.world_radii[1] = 0.0;
        assert!(c.validate().is_err());

        let mut c = tiny_cloud();
        c.normals.as_mut().unwrap()[0] *= 1.5;
        assert!(c.validate().is_err());

        let mut c = tiny_cloud();
        c.descriptors[2] = f64::NAN;
        assert!(c.validate().is_err());

        let mut c = tiny_cloud();
        c.descriptors.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn permutation_moves_all_attributes_together() {
        let c = tiny_cloud();
        let p = c.permuted(&[1, 0]);
        assert_eq!(p.positions[0], c.positions[1]);
        assert_eq!(p.descriptor(0), c.descriptor(1));
        assert_eq!(p.descriptor(1), c.descriptor(0));
        assert_eq!(p.world_radii[0], c.world_radii[1]);
    }
}
