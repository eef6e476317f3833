//! Scene manifest: one JSON file binding the point cloud, environment
//! planes, camera and pose tables, per-frame metadata, and run settings.
//!
//! Environment textures with more than three channels are stored as a
//! sequence of PFM planes of up to three channels each, concatenated in
//! channel order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{load_cameras, load_pfm, load_ply, save_cameras, save_pfm, save_ply};
use crate::io::{load_poses, save_poses, PfmImage, PlyFormat};
use crate::optim::OptimConfig;
use crate::raster::RasterConfig;
use crate::scene::{EnvironmentMap, Exif, Frame, Scene};
use crate::{Error, Result};

pub const DEFAULT_ENV_HEIGHT: usize = 16;

/// One captured frame: image path (if ground truth exists on disk),
/// camera and pose table references, and exposure metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: Option<String>,
    pub camera_id: usize,
    pub pose_id: usize,
    pub exif: Exif,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub name: String,
    pub cloud: String,
    pub cameras: String,
    pub poses: String,
    /// PFM planes covering `env_dim` channels in order.
    #[serde(default)]
    pub environment: Vec<String>,
    #[serde(default)]
    pub env_dim: usize,
    pub frames: Vec<ManifestEntry>,
    #[serde(default)]
    pub raster: RasterConfig,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Config("manifest lists no frames".into()));
        }
        self.raster.validate()?;
        self.optim.validate()?;
        Ok(())
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a scene from its manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_scene(config_path: &Path) -> Result<(Scene, SceneConfig)> {
    let text = fs::read_to_string(config_path)?;
    let config: SceneConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
    config.validate()?;
    let base = config_path.parent().unwrap_or(Path::new("."));

    let cloud = load_ply(&resolve(base, &config.cloud))?;
    let cameras = load_cameras(&resolve(base, &config.cameras))?;
    if cameras.is_empty() {
        return Err(Error::Config("camera table is empty".into()));
    }
    let poses = load_poses(&resolve(base, &config.poses))?;

    let dim = cloud.descriptor_dim;
    let env = if config.environment.is_empty() {
        EnvironmentMap::new(DEFAULT_ENV_HEIGHT, dim, &vec![0.0; dim])?
    } else {
        let mut planes = Vec::new();
        for rel in &config.environment {
            planes.push(load_pfm(&resolve(base, rel))?);
        }
        let (w, h) = (planes[0].width, planes[0].height);
        if planes.iter().any(|p| p.width != w || p.height != h) {
            return Err(Error::Config("environment planes disagree on dimensions".into()));
        }
        let stored = config.env_dim.max(1);
        let mut texels = vec![0.0; w * h * dim];
        let mut ch_base = 0usize;
        for plane in &planes {
            for px in 0..w * h {
                for c in 0..plane.channels {
                    let ch = ch_base + c;
                    // Extra stored channels beyond the cloud's descriptor
                    // dim are dropped; missing ones stay zero.
                    if ch < stored && ch < dim {
                        texels[px * dim + ch] = plane.data[px * plane.channels + c];
                    }
                }
            }
            ch_base += plane.channels;
        }
        EnvironmentMap::from_texels(h, dim, texels)?
    };

    let mut frames = Vec::with_capacity(config.frames.len());
    for (id, entry) in config.frames.iter().enumerate() {
        if entry.camera_id >= cameras.len() {
            return Err(Error::Config(format!(
                "frame {id} references camera {} of {}",
                entry.camera_id,
                cameras.len()
            )));
        }
        let pose = poses.get(entry.pose_id).ok_or_else(|| {
            Error::Config(format!("frame {id} references pose {} of {}", entry.pose_id, poses.len()))
        })?;
        frames.push(Frame { id, camera_id: entry.camera_id, pose: pose.clone(), exif: entry.exif });
    }

    let scene = Scene { cloud, env, cameras, frames };
    scene.validate()?;
    Ok((scene, config))
}

/// Writes a scene as a manifest directory: cloud, tables, environment
/// planes, and `scene.json`. Returns the manifest path. The `images`
/// slot of each frame entry is left to the caller (None by default).
pub fn save_scene(
    scene: &Scene,
    dir: &Path,
    name: &str,
    raster: &RasterConfig,
    optim: &OptimConfig,
    image_names: Option<&[String]>,
) -> Result<PathBuf> {
    scene.validate()?;
    fs::create_dir_all(dir)?;
    save_ply(&scene.cloud, &dir.join("cloud.ply"), PlyFormat::BinaryLittleEndian)?;
    save_cameras(&scene.cameras, &dir.join("cameras.txt"))?;
    let poses: Vec<_> = scene.frames.iter().map(|f| f.pose.clone()).collect();
    save_poses(&poses, &dir.join("poses.txt"))?;

    let env = &scene.env;
    let mut environment = Vec::new();
    let mut ch_base = 0usize;
    let mut plane_idx = 0usize;
    while ch_base < env.dim {
        let take = (env.dim - ch_base).min(3);
        let channels = if take == 1 { 1 } else { 3 };
        let mut data = vec![0.0; env.width * env.height * channels];
        for px in 0..env.width * env.height {
            for c in 0..take {
                data[px * channels + c] = env.texels[px * env.dim + ch_base + c];
            }
        }
        let rel = format!("env_{plane_idx}.pfm");
        save_pfm(&PfmImage::new(env.width, env.height, channels, data)?, &dir.join(&rel))?;
        environment.push(rel);
        ch_base += take;
        plane_idx += 1;
    }

    let frames = scene
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| ManifestEntry {
            image: image_names.and_then(|ns| ns.get(i).cloned()),
            camera_id: f.camera_id,
            pose_id: i,
            exif: f.exif,
        })
        .collect();
    let config = SceneConfig {
        name: name.to_string(),
        cloud: "cloud.ply".into(),
        cameras: "cameras.txt".into(),
        poses: "poses.txt".into(),
        environment,
        env_dim: env.dim,
        frames,
        raster: raster.clone(),
        optim: optim.clone(),
    };
    let path = dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(&config).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(path)
}
