//! Synthetic scene generation for tests, benchmarks, and the closed-loop
//! refinement pipeline. Everything is a pure function of the spec's seed.

use super::cloud::{DescriptorSpace, PointCloud};
use super::env::EnvironmentMap;
use super::frame::{look_at, Exif, Frame};
use super::radii::{estimate_world_radii, DEFAULT_NEIGHBORS};
use super::Scene;
use crate::geometry::CameraModel;
use crate::rng::{key_uniform, Stream};
use crate::{Error, Result};
use nalgebra::Vector3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthShape {
    /// Textured square facing the cameras.
    Plane,
    /// Unit sphere with outward normals.
    Sphere,
    /// Two parallel walls 0.5% apart in depth, exercising the fuzzy depth
    /// test: blended at alpha = 0.01, occluded at alpha = 0.
    WallPair,
    /// Flat square with a broadband texture: one low-frequency octave
    /// spanning the whole face plus fine detail, so image alignment has
    /// a wide monotone basin and sharp local structure at once.
    Mural,
}

impl SynthShape {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(SynthShape::Plane),
            "sphere" => Ok(SynthShape::Sphere),
            "wallpair" => Ok(SynthShape::WallPair),
            "mural" => Ok(SynthShape::Mural),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape '{other}' (expected plane, sphere, wallpair, or mural)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub shape: SynthShape,
    pub count: usize,
    pub descriptor_space: DescriptorSpace,
    pub descriptor_dim: usize,
    pub seed: u64,
    pub num_frames: usize,
    pub width: u32,
    pub height: u32,
    pub env_height: usize,
    /// Half-extent of the generated shape in world units. Shrinking it
    /// turns the default room-scale geometry into a tabletop object.
    pub extent: f64,
    /// Focal length override in pixels; None picks a wide default from
    /// the image size. Long lenses magnify pose error on the sensor.
    pub focal: Option<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shape: SynthShape::Plane,
            count: 2000,
            descriptor_space: DescriptorSpace::Linear,
            descriptor_dim: 4,
            seed: 0,
            num_frames: 6,
            width: 128,
            height: 128,
            env_height: 16,
            extent: 1.0,
            focal: None,
        }
    }
}

/// Separation between the wall-pair depths, as a fraction of the near
/// depth. Half the default fuzzy threshold, so both walls blend.
pub const WALL_SEPARATION: f64 = 0.005;

const WALL_NEAR_Z: f64 = 2.0;

/// Maps a texture parameter in [0,1] to linear radiance. Logarithmic scenes
/// span a 1:500 range so the descriptor-space heuristic picks log storage.
fn radiance(t: f64, space: DescriptorSpace) -> f64 {
    let t = t.clamp(0.0, 1.0);
    match space {
        DescriptorSpace::Linear => 0.05 + 0.9 * t,
        DescriptorSpace::Logarithmic => 0.05 * 500f64.powf(t),
    }
}

/// Encodes linear radiance into the cloud's descriptor space.
fn encode(v: f64, space: DescriptorSpace) -> f64 {
    match space {
        DescriptorSpace::Linear => v,
        DescriptorSpace::Logarithmic => v.ln(),
    }
}

fn plane_texture(u: f64, v: f64) -> [f64; 3] {
    [
        0.5 + 0.5 * (std::f64::consts::TAU * 3.0 * u).sin() * (std::f64::consts::TAU * 2.0 * v).cos(),
        0.5 + 0.5 * (std::f64::consts::TAU * 2.0 * u + 1.0).sin(),
        0.5 + 0.5 * (std::f64::consts::TAU * 3.0 * v).cos(),
    ]
}

fn mural_texture(u: f64, v: f64) -> [f64; 3] {
    let t = std::f64::consts::TAU;
    [
        0.5 + 0.32 * (t * (u + 0.4 * v)).sin() + 0.18 * (t * 6.0 * u).sin() * (t * 5.0 * v).cos(),
        0.5 + 0.32 * (t * (0.3 * u + v) + 1.1).cos() + 0.18 * (t * 5.0 * u + 0.7).sin(),
        0.5 + 0.32 * (t * (u - v) + 2.3).sin() + 0.18 * (t * 6.0 * v + 1.9).cos(),
    ]
}

fn sphere_texture(dir: &Vector3<f64>) -> [f64; 3] {
    [
        0.5 + 0.5 * (4.0 * dir.x).sin() * (3.0 * dir.y).cos(),
        0.5 + 0.5 * (3.0 * dir.y + 1.0).sin(),
        0.5 + 0.5 * (4.0 * dir.z).cos(),
    ]
}

pub fn synth_scene(spec: &SynthSpec) -> Result<Scene> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument("point count must be >= 1".into()));
    }
    if spec.descriptor_dim == 0 {
        return Err(Error::InvalidArgument("descriptor_dim must be >= 1".into()));
    }
    if spec.num_frames == 0 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    let d = spec.descriptor_dim;
    let space = spec.descriptor_space;
    let mut positions = Vec::with_capacity(spec.count);
    let mut normals = Vec::with_capacity(spec.count);
    let mut descriptors = Vec::with_capacity(spec.count * d);

    let mut push_descriptor = |i: usize, color: [f64; 3]| {
        for ch in 0..d {
            if ch < 3 {
                descriptors.push(encode(radiance(color[ch], space), space));
            } else {
                // Auxiliary channels start as small zero-mean noise.
                let u1 = key_uniform(spec.seed, Stream::Noise, i as u64, ch as u64).max(1e-12);
                let u2 = key_uniform(spec.seed, Stream::Noise, i as u64, (ch + 97) as u64);
                let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                descriptors.push(0.01 * g);
            }
        }
    };

    let e = spec.extent;
    if !(e > 0.0) {
        return Err(Error::InvalidArgument("extent must be > 0".into()));
    }
    for i in 0..spec.count {
        let a = key_uniform(spec.seed, Stream::Noise, i as u64, 1_000_000);
        let b = key_uniform(spec.seed, Stream::Noise, i as u64, 1_000_001);
        match spec.shape {
            SynthShape::Plane => {
                positions.push(Vector3::new(e * (a * 2.0 - 1.0), e * (b * 2.0 - 1.0), WALL_NEAR_Z));
                normals.push(Vector3::new(0.0, 0.0, 1.0));
                push_descriptor(i, plane_texture(a, b));
            }
            SynthShape::Mural => {
                positions.push(Vector3::new(e * (a * 2.0 - 1.0), e * (b * 2.0 - 1.0), WALL_NEAR_Z));
                normals.push(Vector3::new(0.0, 0.0, 1.0));
                push_descriptor(i, mural_texture(a, b));
            }
            SynthShape::Sphere => {
                let z = a * 2.0 - 1.0;
                let phi = std::f64::consts::TAU * b;
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let dir = Vector3::new(rho * phi.cos(), rho * phi.sin(), z);
                positions.push(Vector3::new(0.0, 0.0, 3.0) + e * dir);
                normals.push(dir);
                push_descriptor(i, sphere_texture(&dir));
            }
            SynthShape::WallPair => {
                let near = i % 2 == 0;
                let z = if near { WALL_NEAR_Z } else { WALL_NEAR_Z * (1.0 + WALL_SEPARATION) };
                positions.push(Vector3::new(e * (a * 2.0 - 1.0), e * (b * 2.0 - 1.0), z));
                normals.push(Vector3::new(0.0, 0.0, 1.0));
                let color = if near {
                    [0.8, 0.3 + 0.2 * (std::f64::consts::TAU * 3.0 * a).sin(), 0.15]
                } else {
                    [0.15, 0.3, 0.8]
                };
                push_descriptor(i, color);
            }
        }
    }

    // Radius estimation needs neighbors; tiny clouds fall back to a fixed
    // fraction of the scene scale.
    let world_radii = if spec.count > DEFAULT_NEIGHBORS {
        estimate_world_radii(&positions, DEFAULT_NEIGHBORS)?
    } else {
        vec![0.05; spec.count]
    };

    let cloud = PointCloud {
        positions,
        normals: Some(normals),
        descriptors,
        descriptor_dim: d,
        world_radii,
        descriptor_space: space,
    };
    cloud.validate()?;

    // Latitude-graded sky with a mild longitudinal modulation.
    let mut env = EnvironmentMap::new(spec.env_height.max(1), d, &vec![0.0; d])?;
    for v in 0..env.height {
        for u in 0..env.width {
            let dir = env.texel_direction(u, v);
            let t = 0.25 + 0.45 * (0.5 - 0.5 * dir.y) + 0.05 * (3.0 * dir.x).sin();
            let base = [t, t * 0.85, (t * 1.15).min(1.0)];
            let idx = (v * env.width + u) * d;
            for ch in 0..d.min(3) {
                // Environment texels always hold linear radiance.
                env.texels[idx + ch] = radiance(base[ch], space);
            }
        }
    }

    let f = spec.focal.unwrap_or(0.9 * spec.width.min(spec.height) as f64);
    let camera = CameraModel::pinhole(
        spec.width,
        spec.height,
        f,
        f,
        spec.width as f64 / 2.0,
        spec.height as f64 / 2.0,
        [0.0; 4],
    )?;

    let target = match spec.shape {
        SynthShape::Sphere => Vector3::new(0.0, 0.0, 3.0),
        _ => Vector3::new(0.0, 0.0, WALL_NEAR_Z),
    };
    let frames = (0..spec.num_frames)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / spec.num_frames.max(2) as f64;
            let center = Vector3::new(0.12 * theta.cos(), 0.12 * theta.sin(), -0.05 * (i % 3) as f64);
            Frame {
                id: i,
                camera_id: 0,
                pose: look_at(&center, &target),
                exif: Exif {
                    f_number: 2.8,
                    exposure_time: 0.01 * 2f64.powf(0.4 * ((i % 3) as f64 - 1.0)),
                    iso: 100.0,
                },
            }
        })
        .collect();

    Ok(Scene {
        cloud,
        env,
        cameras: vec![camera],
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_scene() {
        let spec = SynthSpec { count: 300, ..SynthSpec::default() };
        let a = synth_scene(&spec).unwrap();
        let b = synth_scene(&spec).unwrap();
        assert_eq!(a.cloud.positions, b.cloud.positions);
        assert_eq!(a.cloud.descriptors, b.cloud.descriptors);
        assert_eq!(a.env.texels, b.env.texels);
        let c = synth_scene(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.cloud.positions, c.cloud.positions);
    }

    #[test]
    fn sphere_normals_are_outward_unit() {
        let spec = SynthSpec { shape: SynthShape::Sphere, count: 500, ..SynthSpec::default() };
        let scene = synth_scene(&spec).unwrap();
        let center = Vector3::new(0.0, 0.0, 3.0);
        for (p, n) in scene.cloud.positions.iter().zip(scene.cloud.normals.as_ref().unwrap()) {
            assert!((n.norm() - 1.0).abs() < 1e-9);
            let outward = (p - center).normalize();
            assert!(n.dot(&outward) > 0.999, "normal {n:?} not outward at {p:?}");
        }
    }

    #[test]
    fn wall_pair_has_two_depths_within_fuzzy_band() {
        let spec = SynthSpec { shape: SynthShape::WallPair, count: 400, ..SynthSpec::default() };
        let scene = synth_scene(&spec).unwrap();
        let mut depths: Vec<f64> = scene.cloud.positions.iter().map(|p| p.z).collect();
        depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (near, far) = (depths[0], depths[depths.len() - 1]);
        assert_eq!(near, WALL_NEAR_Z);
        assert!((far / near - 1.0 - WALL_SEPARATION).abs() < 1e-12);
        // Inside the 1% fuzzy band, outside the 0% band.
        assert!(far <= 1.01 * near);
        assert!(far > near);
    }

    #[test]
    fn log_mode_scene_spans_large_radiance_range() {
        let spec = SynthSpec {
            descriptor_space: DescriptorSpace::Logarithmic,
            count: 500,
            ..SynthSpec::default()
        };
        let scene = synth_scene(&spec).unwrap();
        // Stored values are logs; radiance ratio = exp(max - min) over the
        // color channels.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..scene.cloud.len() {
            for ch in 0..3 {
                let v = scene.cloud.descriptor(i)[ch];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        assert!((hi - lo).exp() > 400.0);
        // Environment texels stay linear (all positive, not log-scale).
        assert!(scene.env.texels.iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn scene_passes_validation() {
        for shape in [SynthShape::Plane, SynthShape::Sphere, SynthShape::WallPair] {
            let spec = SynthSpec { shape, count: 200, ..SynthSpec::default() };
            let scene = synth_scene(&spec).unwrap();
            scene.validate().unwrap();
            assert_eq!(scene.frames.len(), 6);
        }
    }

    #[test]
    fn unknown_shape_string_is_rejected() {
        assert!(SynthShape::parse("cube").is_err());
        assert_eq!(SynthShape::parse("wallpair").unwrap(), SynthShape::WallPair);
    }
}
