//! On-disk formats: point clouds, HDR and LDR images, camera tables,
//! scene manifests, and training checkpoints.

mod cameras;
mod checkpoint;
mod config;
mod pfm;
mod ply;
mod png;

pub use cameras::{load_cameras, load_poses, save_cameras, save_poses};
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{load_scene, save_scene, ManifestEntry, SceneConfig};
pub use pfm::{load_pfm, save_pfm, PfmImage};
pub use ply::{load_ply, save_ply, PlyFormat};
pub use png::{load_png, save_png};
