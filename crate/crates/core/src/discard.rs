//! Stochastic point discarding.
//!
//! Dense regions project many points into one pixel; discarding thins them
//! so per-pixel blend counts stay roughly uniform. A point survives iff
//!
//!   r_screen / sqrt(1 - beta) > 1 / gamma
//!
//! with beta uniform in [0, 1], which gives P(keep) = min(1, gamma^2 *
//! r_screen^2): large splats always render, subpixel splats render with
//! probability proportional to their area.

use crate::geometry::{CameraKind, CameraModel};
use crate::rng::{key_uniform, Stream};
use nalgebra::Vector3;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DiscardConfig {
    pub gamma: f64,
    pub enabled: bool,
    pub seed: u64,
}

impl Default for DiscardConfig {
    fn default() -> Self {
        DiscardConfig { gamma: 1.5, enabled: true, seed: 0 }
    }
}

impl DiscardConfig {
    pub fn disabled() -> Self {
        DiscardConfig { enabled: false, ..DiscardConfig::default() }
    }
}

/// Screen-space radius in pixels of a world-space radius at camera-space
/// position `xc`, for pyramid layer `l`.
///
/// The pinhole case is the similar-triangles ratio with the averaged focal
/// length. The fisheye case scales by the local projection Jacobian's
/// spectral norm, a rough approximation consistent with the pinhole one on
/// the optical axis.
pub fn screen_radius(r_world: f64, xc: &Vector3<f64>, camera: &CameraModel, layer: usize) -> f64 {
    let scale = 1.0 / (1u64 << layer) as f64;
    match camera.kind {
        CameraKind::PinholeDistorted => {
            let f_eff = 0.5 * (camera.fx + camera.fy);
            r_world * f_eff / xc.z * scale
        }
        CameraKind::FisheyeEquidistant => match camera.projection_jacobian(xc) {
            Some(j) => {
                let jtj = j.transpose() * j;
                // Largest singular value of the 2x3 Jacobian.
                let spectral = jtj
                    .symmetric_eigenvalues()
                    .iter()
                    .fold(0.0f64, |m, &e| m.max(e.max(0.0)))
                    .sqrt();
                r_world * spectral * scale
            }
            None => 0.0,
        },
    }
}

/// Literal survival test. `beta = 1` keeps the point: the left side is
/// r / 0 = +inf.
pub fn keep_point(r_screen: f64, beta: f64, gamma: f64) -> bool {
    debug_assert!((0.0..=1.0).contains(&beta));
    debug_assert!(gamma > 0.0);
    if beta >= 1.0 {
        return true;
    }
    r_screen / (1.0 - beta).sqrt() > 1.0 / gamma
}

/// Closed form of the survival probability under uniform beta.
pub fn keep_probability(r_screen: f64, gamma: f64) -> f64 {
    debug_assert!(r_screen >= 0.0);
    (gamma * gamma * r_screen * r_screen).min(1.0)
}

/// The per-point uniform draw, keyed by (seed, point id, frame id) so one
/// decision is shared by every layer of a frame and by the forward and
/// backward passes.
pub fn point_beta(seed: u64, point_id: usize, frame_id: usize) -> f64 {
    key_uniform(seed, Stream::Discard, point_id as u64, frame_id as u64)
}

/// Combined decision used by the rasterizer. Beta is drawn once per
/// (point, frame) and tested against each layer's radius. Radii halve as
/// layers coarsen, so survival is nested: a point kept at a coarse layer is
/// kept at every finer one.
pub fn survives(
    cfg: &DiscardConfig,
    r_world: f64,
    xc: &Vector3<f64>,
    camera: &CameraModel,
    layer: usize,
    point_id: usize,
    frame_id: usize,
) -> bool {
    if !cfg.enabled {
        return true;
    }
    let r = screen_radius(r_world, xc, camera, layer);
    keep_point(r, point_beta(cfg.seed, point_id, frame_id), cfg.gamma)
}
