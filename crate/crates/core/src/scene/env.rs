//! Equirectangular environment map over the unit sphere.
//!
//! Texels always store linear radiance regardless of the point cloud's
//! descriptor space, so lookups feed directly into blending.

use crate::{Error, Result};
use nalgebra::Vector3;

#[derive(Clone, Debug)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// Row-major height x width x dim.
    pub texels: Vec<f64>,
}

/// One bilinear tap: flat pixel index (not scaled by dim) and its weight.
pub type EnvTap = (usize, f64);

impl EnvironmentMap {
    pub fn new(height: usize, dim: usize, fill: &[f64]) -> Result<Self> {
        if height == 0 || dim == 0 {
            return Err(Error::InvalidArgument("environment map must be non-empty".into()));
        }
        if fill.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "fill has {} channels, map has {}",
                fill.len(),
                dim
            )));
        }
        let width = 2 * height;
        let mut texels = Vec::with_capacity(width * height * dim);
        for _ in 0..width * height {
            texels.extend_from_slice(fill);
        }
        Ok(EnvironmentMap { width, height, dim, texels })
    }

    pub fn from_texels(height: usize, dim: usize, texels: Vec<f64>) -> Result<Self> {
        let width = 2 * height;
        if texels.len() != width * height * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} texel values for {}x{}x{}",
                texels.len(),
                height,
                width,
                dim
            )));
        }
        if !texels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("environment texel"));
        }
        Ok(EnvironmentMap { width, height, dim, texels })
    }

    pub fn texel(&self, pixel: usize) -> &[f64] {
        &self.texels[pixel * self.dim..(pixel + 1) * self.dim]
    }

    /// The four bilinear taps for a unit direction. Longitude wraps,
    /// latitude clamps at the poles. Weights are nonnegative and sum to 1,
    /// which makes the lookup linear in the texels.
    pub fn lookup_taps(&self, dir: &Vector3<f64>) -> [EnvTap; 4] {
        debug_assert!((dir.norm() - 1.0).abs() < 1e-6, "direction must be unit");
        let lon = dir.x.atan2(dir.z);
        let lat = dir.y.clamp(-1.0, 1.0).acos();
        let uf = (lon + std::f64::consts::PI) / std::f64::consts::TAU * self.width as f64 - 0.5;
        let vf = lat / std::f64::consts::PI * self.height as f64 - 0.5;

        let u0 = uf.floor();
        let v0 = vf.floor();
        let fu = uf - u0;
        let fv = vf - v0;
        let w = self.width as isize;
        let h = self.height as isize;
        let wrap_u = |u: isize| -> usize { u.rem_euclid(w) as usize };
        let clamp_v = |v: isize| -> usize { v.clamp(0, h - 1) as usize };
        let (u0, v0) = (u0 as isize, v0 as isize);

        let idx = |u: isize, v: isize| clamp_v(v) * self.width + wrap_u(u);
        [
            (idx(u0, v0), (1.0 - fu) * (1.0 - fv)),
            (idx(u0 + 1, v0), fu * (1.0 - fv)),
            (idx(u0, v0 + 1), (1.0 - fu) * fv),
            (idx(u0 + 1, v0 + 1), fu * fv),
        ]
    }

    /// Interpolated descriptor for a unit direction, written into `out`.
    pub fn lookup_into(&self, dir: &Vector3<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        out.fill(0.0);
        for (pixel, w) in self.lookup_taps(dir) {
            for (o, t) in out.iter_mut().zip(self.texel(pixel)) {
                *o += w * t;
            }
        }
    }

    pub fn lookup(&self, dir: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(dir, &mut out);
        out
    }

    /// Direction at the center of texel (u, v); inverse of the lookup
    /// mapping, useful for synthesizing maps analytically.
    pub fn texel_direction(&self, u: usize, v: usize) -> Vector3<f64> {
        let lon = (u as f64 + 0.5) / self.width as f64 * std::f64::consts::TAU
            - std::f64::consts::PI;
        let lat = (v as f64 + 0.5) / self.height as f64 * std::f64::consts::PI;
        Vector3::new(lat.sin() * lon.sin(), lat.cos(), lat.sin() * lon.cos())
    }
}
