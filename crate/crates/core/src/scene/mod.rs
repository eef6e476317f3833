//! Scene container and its building blocks: point cloud, environment map,
//! render-target pyramid, radius estimation, Morton reordering, and
//! synthetic scene generation.

pub mod cloud;
pub mod env;
pub mod frame;
pub mod morton;
pub mod pyramid;
pub mod radii;
pub mod synth;

pub use cloud::{
    bounding_box, choose_descriptor_space, descriptor_to_linear, DescriptorSpace, PointCloud,
};
pub use env::EnvironmentMap;
pub use frame::{look_at, Exif, Frame};
pub use morton::{morton_reorder, DEFAULT_BLOCK_SIZE};
pub use pyramid::{layer_dims, ImagePyramid, PyramidLayer};
pub use radii::{estimate_world_radii, DEFAULT_NEIGHBORS};
pub use synth::{synth_scene, SynthShape, SynthSpec};

use crate::geometry::CameraModel;
use crate::{Error, Result};

/// Everything a render needs: geometry, appearance, cameras, and frames.
#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: PointCloud,
    pub env: EnvironmentMap,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        if self.env.dim != self.cloud.descriptor_dim {
            return Err(Error::ShapeMismatch(format!(
                "environment dim {} vs descriptor dim {}",
                self.env.dim, self.cloud.descriptor_dim
            )));
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidArgument("scene has no cameras".into()));
        }
        for f in &self.frames {
            if f.camera_id >= self.cameras.len() {
                return Err(Error::InvalidArgument(format!(
                    "frame {} references camera {} of {}",
                    f.id,
                    f.camera_id,
                    self.cameras.len()
                )));
            }
            if !f.pose.is_valid(1e-6) {
                return Err(Error::InvalidArgument(format!(
                    "frame {} pose is not a rigid transform",
                    f.id
                )));
            }
        }
        Ok(())
    }

    pub fn camera_for(&self, frame: &Frame) -> &CameraModel {
        &self.cameras[frame.camera_id]
    }
}
