//! Forward multi-resolution one-pixel point rasterizer.
//!
//! Each layer renders in three passes over the surviving points: a depth
//! prepass that records the per-pixel minimum depth, an accumulation pass
//! that averages the linearized descriptors of every point within the fuzzy
//! depth band, and a finalize pass that fills empty pixels from the
//! environment map.
//!
//! Two accumulation strategies share the surrounding passes: a fast path
//! using relaxed atomic adds (order-dependent at the ulp level), and a
//! deterministic path that sorts fragments into a canonical order before a
//! sequential sum, making the output a pure function of the point SET, not
//! its storage order or the thread count.

use crate::discard::{keep_point, screen_radius, DiscardConfig};
use crate::geometry::{CameraModel, Pose};
use crate::scene::{descriptor_to_linear, layer_dims, Frame, ImagePyramid, PyramidLayer, Scene};
use crate::Result;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering::Relaxed};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Pyramid depth L; layer l renders at 1/2^l scale.
    pub num_layers: usize,
    /// Fuzzy depth threshold: a fragment blends iff z <= (1+alpha)*min_z.
    pub alpha_depth: f64,
    pub normal_culling: bool,
    /// The normal test keeps points whose rotated normal has positive dot
    /// with the view direction. Flipping accommodates clouds whose normals
    /// point toward the scanner instead.
    pub flip_normals: bool,
    pub deterministic: bool,
    pub seed: u64,
    pub discard: DiscardConfig,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            num_layers: 4,
            alpha_depth: 0.01,
            normal_culling: true,
            flip_normals: false,
            deterministic: true,
            seed: 0,
            discard: DiscardConfig::default(),
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(crate::Error::InvalidArgument("need at least one layer".into()));
        }
        if !(self.alpha_depth >= 0.0) {
            return Err(crate::Error::InvalidArgument(format!(
                "alpha_depth {} must be >= 0",
                self.alpha_depth
            )));
        }
        if !(self.discard.gamma > 0.0) {
            return Err(crate::Error::InvalidArgument(format!(
                "gamma {} must be > 0",
                self.discard.gamma
            )));
        }
        Ok(())
    }
}

/// Result of projecting one point into one pyramid layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerProjection {
    /// Nearest-integer pixel, possibly out of bounds.
    pub pixel: (i64, i64),
    /// Continuous layer-l coordinates (layer-0 uv scaled by 1/2^l).
    pub uv: Vector2<f64>,
    pub z: f64,
}

/// Rounds half-away-from-zero, the tie rule used for pixel assignment.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Projects a world point into layer `l`. `None` means behind-camera.
pub fn project_to_layer(
    camera: &CameraModel,
    pose: &Pose,
    x: &Vector3<f64>,
    layer: usize,
) -> Option<LayerProjection> {
    let xc = pose.transform(x);
    let p = camera.project(&xc)?;
    let scale = 1.0 / (1u64 << layer) as f64;
    let uv = p.uv * scale;
    Some(LayerProjection {
        pixel: (round_half_away(uv.x) as i64, round_half_away(uv.y) as i64),
        uv,
        z: p.z,
    })
}

#[inline]
pub fn in_bounds(pixel: (i64, i64), width: usize, height: usize) -> bool {
    pixel.0 >= 0 && pixel.1 >= 0 && (pixel.0 as usize) < width && (pixel.1 as usize) < height
}

/// Strict normal test: keep iff (R n) . (xc / |xc|) > 0, optionally flipped.
/// A zero dot product is culled either way.
#[inline]
pub fn normal_test(rn: &Vector3<f64>, xc: &Vector3<f64>, flip: bool) -> bool {
    let d = rn.dot(xc) / xc.norm();
    if flip {
        -d > 0.0
    } else {
        d > 0.0
    }
}

/// Fuzzy depth acceptance; boundary equality passes.
#[inline]
pub fn fuzzy_depth_pass(z: f64, min_z: f64, alpha: f64) -> bool {
    z <= (1.0 + alpha) * min_z
}

/// Per-frame precomputation shared by every layer and by the backward
/// pass: camera-space positions, layer-0 projections, visibility after the
/// normal test, linearized descriptors, and the per-point discard draw.
pub struct PreparedFrame {
    pub xc: Vec<Vector3<f64>>,
    pub uv0: Vec<Vector2<f64>>,
    pub z: Vec<f64>,
    /// Projectable and not normal-culled; discard is layer-dependent and
    /// tested separately.
    pub visible: Vec<bool>,
    /// N x dim linearized descriptor values.
    pub lin: Vec<f64>,
    /// Layer-0 screen radius; halves per layer.
    pub r0: Vec<f64>,
    /// Per-point uniform discard draw, shared across layers.
    pub beta: Vec<f64>,
}

pub fn prepare_frame(scene: &Scene, frame: &Frame, cfg: &RasterConfig) -> PreparedFrame {
    let n = scene.cloud.len();
    let d = scene.cloud.descriptor_dim;
    let camera = scene.camera_for(frame);
    let pose = &frame.pose;
    let space = scene.cloud.descriptor_space;

    let mut xc = vec![Vector3::zeros(); n];
    let mut uv0 = vec![Vector2::zeros(); n];
    let mut z = vec![0.0; n];
    let mut visible = vec![false; n];
    let mut lin = vec![0.0; n * d];
    let mut r0 = vec![0.0; n];
    let mut beta = vec![0.0; n];

    (
        xc.par_iter_mut(),
        uv0.par_iter_mut(),
        z.par_iter_mut(),
        visible.par_iter_mut(),
        lin.par_chunks_mut(d),
        r0.par_iter_mut(),
        beta.par_iter_mut(),
    )
        .into_par_iter()
        .enumerate()
        .for_each(|(i, (xc_i, uv_i, z_i, vis_i, lin_i, r0_i, beta_i))| {
            let pc = pose.transform(&scene.cloud.positions[i]);
            *xc_i = pc;
            let Some(p) = camera.project(&pc) else {
                return;
            };
            *uv_i = p.uv;
            *z_i = p.z;
            if cfg.normal_culling {
                if let Some(normals) = &scene.cloud.normals {
                    let rn = pose.rotate(&normals[i]);
                    if !normal_test(&rn, &pc, cfg.flip_normals) {
                        return;
                    }
                }
            }
            *vis_i = true;
            for (o, &v) in lin_i.iter_mut().zip(scene.cloud.descriptor(i)) {
                *o = descriptor_to_linear(v, space).0;
            }
            if cfg.discard.enabled {
                *r0_i = screen_radius(scene.cloud.world_radii[i], &pc, camera, 0);
                *beta_i = crate::discard::point_beta(cfg.discard.seed, i, frame.id);
            }
        });

    PreparedFrame { xc, uv0, z, visible, lin, r0, beta }
}

impl PreparedFrame {
    /// Discard decision for point `i` at layer `l`; `visible` must already
    /// hold.
    #[inline]
    pub fn survives_discard(&self, cfg: &RasterConfig, i: usize, layer: usize) -> bool {
        if !cfg.discard.enabled {
            return true;
        }
        let r = self.r0[i] / (1u64 << layer) as f64;
        keep_point(r, self.beta[i], cfg.discard.gamma)
    }

    /// Pixel of point `i` at layer `l` if it lands inside a w x h image.
    #[inline]
    pub fn pixel_at(&self, i: usize, layer: usize, width: usize, height: usize) -> Option<usize> {
        let scale = 1.0 / (1u64 << layer) as f64;
        let px = round_half_away(self.uv0[i].x * scale) as i64;
        let py = round_half_away(self.uv0[i].y * scale) as i64;
        if in_bounds((px, py), width, height) {
            Some(py as usize * width + px as usize)
        } else {
            None
        }
    }
}

/// One surviving (point, pixel) pair inside the fuzzy depth band.
#[derive(Clone, Copy, Debug)]
pub struct Fragment {
    pub pixel: u32,
    pub point: u32,
    pub z: f64,
}

/// Compares fragments by (pixel, depth bits, descriptor bits, point id).
/// Depth is positive, so its bit pattern orders like the value. Any two
/// fragments equal under the first three keys contribute identical values,
/// which makes the sequential per-pixel sum invariant to input permutation.
fn canonical_cmp(a: &Fragment, b: &Fragment, lin: &[f64], dim: usize) -> Ordering {
    a.pixel
        .cmp(&b.pixel)
        .then_with(|| a.z.to_bits().cmp(&b.z.to_bits()))
        .then_with(|| {
            let sa = &lin[a.point as usize * dim..][..dim];
            let sb = &lin[b.point as usize * dim..][..dim];
            for (x, y) in sa.iter().zip(sb) {
                match x.to_bits().cmp(&y.to_bits()) {
                    Ordering::Equal => {}
                    o => return o,
                }
            }
            Ordering::Equal
        })
        .then_with(|| a.point.cmp(&b.point))
}

/// Depth prepass: per-pixel minimum depth over surviving points, +inf where
/// none. Atomic integer minimum on the depth's bit pattern is exact and
/// order-free, so parallel and sequential prepasses agree bitwise.
pub fn depth_prepass(
    prepared: &PreparedFrame,
    cfg: &RasterConfig,
    layer: usize,
    width: usize,
    height: usize,
) -> Vec<f64> {
    let minz: Vec<AtomicU64> = (0..width * height)
        .map(|_| AtomicU64::new(f64::INFINITY.to_bits()))
        .collect();
    (0..prepared.xc.len()).into_par_iter().for_each(|i| {
        if !prepared.visible[i] || !prepared.survives_discard(cfg, i, layer) {
            return;
        }
        if let Some(pix) = prepared.pixel_at(i, layer, width, height) {
            minz[pix].fetch_min(prepared.z[i].to_bits(), Relaxed);
        }
    });
    minz.into_iter().map(|a| f64::from_bits(a.into_inner())).collect()
}

/// Fragments passing the fuzzy depth test at `layer`, in canonical order.
pub fn collect_fragments(
    prepared: &PreparedFrame,
    cfg: &RasterConfig,
    layer: usize,
    width: usize,
    height: usize,
    min_z: &[f64],
    dim: usize,
) -> Vec<Fragment> {
    let mut frags: Vec<Fragment> = (0..prepared.xc.len())
        .into_par_iter()
        .filter_map(|i| {
            if !prepared.visible[i] || !prepared.survives_discard(cfg, i, layer) {
                return None;
            }
            let pix = prepared.pixel_at(i, layer, width, height)?;
            let z = prepared.z[i];
            if !fuzzy_depth_pass(z, min_z[pix], cfg.alpha_depth) {
                return None;
            }
            Some(Fragment { pixel: pix as u32, point: i as u32, z })
        })
        .collect();
    frags.par_sort_unstable_by(|a, b| canonical_cmp(a, b, &prepared.lin, dim));
    frags
}

fn atomic_add_f64(cell: &AtomicU64, v: f64) {
    let mut cur = cell.load(Relaxed);
    loop {
        let new = (f64::from_bits(cur) + v).to_bits();
        match cell.compare_exchange_weak(cur, new, Relaxed, Relaxed) {
            Ok(_) => return,
            Err(c) => cur = c,
        }
    }
}

/// Renders one layer. The environment fill uses the ray through each empty
/// pixel's center, expressed in world coordinates.
pub fn render_layer(
    scene: &Scene,
    frame: &Frame,
    cfg: &RasterConfig,
    prepared: &PreparedFrame,
    layer: usize,
) -> Result<PyramidLayer> {
    let camera = scene.camera_for(frame);
    let (width, height) = layer_dims(camera.width as usize, camera.height as usize, layer);
    let d = scene.cloud.descriptor_dim;
    let min_z = depth_prepass(prepared, cfg, layer, width, height);

    let mut out = PyramidLayer::new(width, height, d);
    out.min_z = min_z;

    if cfg.deterministic {
        let frags = collect_fragments(prepared, cfg, layer, width, height, &out.min_z, d);
        let mut i = 0;
        while i < frags.len() {
            let pix = frags[i].pixel as usize;
            let mut j = i;
            let mut acc = vec![0.0f64; d];
            while j < frags.len() && frags[j].pixel as usize == pix {
                let src = &prepared.lin[frags[j].point as usize * d..][..d];
                for (a, &s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
                j += 1;
            }
            let count = (j - i) as u32;
            out.counts[pix] = count;
            for (ch, a) in acc.iter().enumerate() {
                out.data[pix * d + ch] = a / count as f64;
            }
            i = j;
        }
    } else {
        let sums: Vec<AtomicU64> = (0..width * height * d).map(|_| AtomicU64::new(0)).collect();
        let counts: Vec<AtomicU32> = (0..width * height).map(|_| AtomicU32::new(0)).collect();
        (0..prepared.xc.len()).into_par_iter().for_each(|i| {
            if !prepared.visible[i] || !prepared.survives_discard(cfg, i, layer) {
                return;
            }
            let Some(pix) = prepared.pixel_at(i, layer, width, height) else {
                return;
            };
            if !fuzzy_depth_pass(prepared.z[i], out.min_z[pix], cfg.alpha_depth) {
                return;
            }
            counts[pix].fetch_add(1, Relaxed);
            for ch in 0..d {
                atomic_add_f64(&sums[pix * d + ch], prepared.lin[i * d + ch]);
            }
        });
        for (pix, c) in counts.into_iter().enumerate() {
            let c = c.into_inner();
            out.counts[pix] = c;
            if c > 0 {
                for ch in 0..d {
                    out.data[pix * d + ch] =
                        f64::from_bits(sums[pix * d + ch].load(Relaxed)) / c as f64;
                }
            }
        }
    }

    // Background pass: empty pixels sample the environment along the
    // world-frame ray through the pixel center.
    let scale = (1u64 << layer) as f64;
    let pose = &frame.pose;
    let bg: Result<Vec<(usize, Vec<f64>)>> = (0..width * height)
        .into_par_iter()
        .filter(|&pix| out.counts[pix] == 0)
        .map(|pix| {
            let (u, v) = (pix % width, pix / width);
            let uv0 = Vector2::new(u as f64 * scale, v as f64 * scale);
            let dir_cam = camera.unproject(&uv0)?;
            let dir_world = pose.inverse_rotate(&dir_cam);
            Ok((pix, scene.env.lookup(&dir_world)))
        })
        .collect();
    for (pix, val) in bg? {
        out.data[pix * d..(pix + 1) * d].copy_from_slice(&val);
    }
    Ok(out)
}

/// Renders the full pyramid for one frame.
pub fn render_pyramid(scene: &Scene, frame: &Frame, cfg: &RasterConfig) -> Result<ImagePyramid> {
    cfg.validate()?;
    scene.validate()?;
    let prepared = prepare_frame(scene, frame, cfg);
    let layers: Result<Vec<PyramidLayer>> = (0..cfg.num_layers)
        .map(|l| render_layer(scene, frame, cfg, &prepared, l))
        .collect();
    Ok(ImagePyramid { layers: layers? })
}

/// Brute-force per-pixel reference renderer: for every pixel, iterate all
/// points, apply the bounds, normal, discard, and fuzzy depth tests, and
/// average in the same canonical order as the deterministic path. Used by
/// equivalence tests; quadratic and unashamed of it.
#[doc(hidden)]
pub fn render_layer_bruteforce(
    scene: &Scene,
    frame: &Frame,
    cfg: &RasterConfig,
    layer: usize,
) -> Result<PyramidLayer> {
    let camera = scene.camera_for(frame);
    let (width, height) = layer_dims(camera.width as usize, camera.height as usize, layer);
    let d = scene.cloud.descriptor_dim;
    let pose = &frame.pose;
    let space = scene.cloud.descriptor_space;
    let mut out = PyramidLayer::new(width, height, d);

    // Independent projection per point (not reusing prepare_frame).
    struct Cand {
        pixel: usize,
        point: usize,
        z: f64,
        lin: Vec<f64>,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for (i, x) in scene.cloud.positions.iter().enumerate() {
        let Some(proj) = project_to_layer(camera, pose, x, layer) else {
            continue;
        };
        if !in_bounds(proj.pixel, width, height) {
            continue;
        }
        if cfg.normal_culling {
            if let Some(normals) = &scene.cloud.normals {
                let rn = pose.rotate(&normals[i]);
                let xc = pose.transform(x);
                if !normal_test(&rn, &xc, cfg.flip_normals) {
                    continue;
                }
            }
        }
        if cfg.discard.enabled {
            let xc = pose.transform(x);
            let r = screen_radius(scene.cloud.world_radii[i], &xc, camera, layer);
            let beta = crate::discard::point_beta(cfg.discard.seed, i, frame.id);
            if !keep_point(r, beta, cfg.discard.gamma) {
                continue;
            }
        }
        cands.push(Cand {
            pixel: proj.pixel.1 as usize * width + proj.pixel.0 as usize,
            point: i,
            z: proj.z,
            lin: scene.cloud.descriptor(i).iter().map(|&v| descriptor_to_linear(v, space).0).collect(),
        });
    }

    for pix in 0..width * height {
        let mut here: Vec<&Cand> = cands.iter().filter(|c| c.pixel == pix).collect();
        let min_z = here.iter().map(|c| c.z).fold(f64::INFINITY, f64::min);
        out.min_z[pix] = min_z;
        here.retain(|c| fuzzy_depth_pass(c.z, min_z, cfg.alpha_depth));
        here.sort_by(|a, b| {
            a.z.to_bits().cmp(&b.z.to_bits()).then_with(|| {
                for (x, y) in a.lin.iter().zip(&b.lin) {
                    match x.to_bits().cmp(&y.to_bits()) {
                        Ordering::Equal => {}
                        o => return o,
                    }
                }
                a.point.cmp(&b.point)
            })
        });
        out.counts[pix] = here.len() as u32;
        if here.is_empty() {
            let scale = (1u64 << layer) as f64;
            let (u, v) = (pix % width, pix / width);
            let dir_cam = camera.unproject(&Vector2::new(u as f64 * scale, v as f64 * scale))?;
            let dir_world = pose.inverse_rotate(&dir_cam);
            let val = scene.env.lookup(&dir_world);
            out.data[pix * d..(pix + 1) * d].copy_from_slice(&val);
        } else {
            for ch in 0..d {
                let sum: f64 = here.iter().map(|c| c.lin[ch]).sum();
                out.data[pix * d + ch] = sum / here.len() as f64;
            }
        }
    }
    Ok(out)
}
