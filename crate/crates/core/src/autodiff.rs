//! Backward pass of the point rasterizer.
//!
//! Texture and environment gradients flow through the blend directly. The
//! rounding step has no derivative, so structural gradients (positions,
//! pose, intrinsics) are approximated by one-pixel finite differences
//! evaluated on ghost geometry: a dropout split hides a fraction of the
//! points from the forward image, and only those hidden points probe how
//! the image would change if they moved. Render-set points therefore carry
//! texture gradients and zero structural gradient; ghost points carry
//! structural gradients and zero texture gradient.
//!
//! All accumulation runs in canonical order (fragments sorted, points by
//! index), so gradients are deterministic for a given split.

use nalgebra::{Vector2, Vector3};

use crate::geometry::{pose_point_jacobian, PoseTangent, INTRINSIC_PARAMS};
use crate::raster::{
    collect_fragments, in_bounds, prepare_frame, render_layer, round_half_away, PreparedFrame,
    RasterConfig,
};
use crate::rng::{key_uniform, Stream};
use crate::scene::{descriptor_to_linear, Frame, ImagePyramid, PyramidLayer, Scene};
use crate::{Error, Result};

pub const DEFAULT_DROPOUT_RATE: f64 = 0.25;

/// Dropout partition of the point cloud for one optimizer step.
#[derive(Clone, Debug)]
pub struct GhostSplit {
    pub render_set: Vec<usize>,
    pub ghost_set: Vec<usize>,
    /// Per-point ghost flag, indexable by point id.
    pub ghost: Vec<bool>,
    pub dropout_rate: f64,
    pub seed: u64,
}

/// Samples each point independently into the ghost set with probability
/// `rho`, reproducibly from the seed.
pub fn ghost_split(n: usize, rho: f64, seed: u64) -> Result<GhostSplit> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("dropout rate {rho} outside [0, 1)")));
    }
    let mut render_set = Vec::new();
    let mut ghost_set = Vec::new();
    let mut ghost = vec![false; n];
    for i in 0..n {
        if key_uniform(seed, Stream::Ghost, i as u64, 0) < rho {
            ghost[i] = true;
            ghost_set.push(i);
        } else {
            render_set.push(i);
        }
    }
    Ok(GhostSplit { render_set, ghost_set, ghost, dropout_rate: rho, seed })
}

/// Which parameter groups the backward pass fills; frozen groups stay zero.
#[derive(Clone, Copy, Debug)]
pub struct BackwardConfig {
    /// Signed central difference (forward minus backward shift, halved).
    /// The unsigned average of the two one-sided terms is kept selectable
    /// for comparison; it vanishes on linear intensity ramps.
    pub signed_central: bool,
    pub texture: bool,
    pub structural: bool,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        BackwardConfig { signed_central: true, texture: true, structural: true }
    }
}

/// Saved forward state for one frame: point preparation over the full
/// cloud, the render-set visibility actually used for the image, and the
/// rendered pyramid.
pub struct RenderState {
    pub prepared: PreparedFrame,
    /// Visibility of ghost points (projectable, not culled). Render-set
    /// entries are false here; `prepared.visible` holds the render set.
    pub ghost_visible: Vec<bool>,
    pub pyramid: ImagePyramid,
}

/// Forward render restricted to the render set of `split`. Ghost points
/// never touch the image; masking them by visibility keeps point ids and
/// hence the canonical blend order stable.
pub fn render_forward(
    scene: &Scene,
    frame: &Frame,
    cfg: &RasterConfig,
    split: Option<&GhostSplit>,
) -> Result<RenderState> {
    cfg.validate()?;
    let mut prepared = prepare_frame(scene, frame, cfg);
    let mut ghost_visible = vec![false; scene.cloud.len()];
    if let Some(split) = split {
        if split.ghost.len() != scene.cloud.len() {
            return Err(Error::ShapeMismatch(format!(
                "split over {} points, cloud has {}",
                split.ghost.len(),
                scene.cloud.len()
            )));
        }
        for &g in &split.ghost_set {
            ghost_visible[g] = prepared.visible[g];
            prepared.visible[g] = false;
        }
    }
    let layers: Result<Vec<PyramidLayer>> = (0..cfg.num_layers)
        .map(|l| render_layer(scene, frame, cfg, &prepared, l))
        .collect();
    Ok(RenderState { prepared, ghost_visible, pyramid: ImagePyramid { layers: layers? } })
}

/// Per-frame gradients. Texture and environment gradients live in
/// descriptor space; structural gradients are loss per meter / per radian /
/// per intrinsic unit.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// N x D, descriptor space.
    pub d_tau: Vec<f64>,
    /// Environment texels, H x W x D.
    pub d_env: Vec<f64>,
    pub d_x: Vec<Vector3<f64>>,
    pub d_pose: PoseTangent,
    pub d_intrinsics: [f64; INTRINSIC_PARAMS],
}

impl GradientBundle {
    pub fn zeros(points: usize, dim: usize, env_texels: usize) -> Self {
        GradientBundle {
            d_tau: vec![0.0; points * dim],
            d_env: vec![0.0; env_texels * dim],
            d_x: vec![Vector3::zeros(); points],
            d_pose: PoseTangent::zero(),
            d_intrinsics: [0.0; INTRINSIC_PARAMS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.d_tau.iter().all(|v| v.is_finite())
            && self.d_env.iter().all(|v| v.is_finite())
            && self.d_x.iter().all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
            && self.d_pose.0.iter().all(|v| v.is_finite())
            && self.d_intrinsics.iter().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("gradient bundle"))
        }
    }
}

/// Intensity change a point with linearized descriptor `tau` would induce
/// at a neighboring pixel, per descriptor channel.
///
/// Four cases: an empty pixel takes the point's value over the environment;
/// a point fully behind the pixel's depth band changes nothing; a point
/// fully in front replaces the pixel; a point inside the fuzzy band joins
/// the blend, shifting the mean.
pub fn induced_change(
    tau: &[f64],
    pixel_value: &[f64],
    z: f64,
    min_z: f64,
    blend_count: u32,
    alpha: f64,
    delta: &mut [f64],
) {
    if blend_count == 0 {
        for ((d, &t), &i) in delta.iter_mut().zip(tau).zip(pixel_value) {
            *d = t - i;
        }
    } else if z > (1.0 + alpha) * min_z {
        delta.fill(0.0);
    } else if z * (1.0 + alpha) < min_z {
        for ((d, &t), &i) in delta.iter_mut().zip(tau).zip(pixel_value) {
            *d = t - i;
        }
    } else {
        let n = blend_count as f64;
        for ((d, &t), &i) in delta.iter_mut().zip(tau).zip(pixel_value) {
            *d = (n * i + t) / (n + 1.0) - i;
        }
    }
}

/// Image-space gradient of the loss w.r.t. a point's continuous layer
/// coordinates, from one-pixel virtual shifts contracted with the adjoint.
#[derive(Clone, Copy, Debug, Default)]
pub struct SpatialGrad {
    pub gu: f64,
    pub gv: f64,
}

/// One-sided term: adjoint at the shifted pixel dotted with the induced
/// change there. Out-of-bounds shifts contribute nothing.
fn shift_term(
    tau: &[f64],
    z: f64,
    pixel: (i64, i64),
    layer: &PyramidLayer,
    adjoint: &[f64],
    alpha: f64,
    delta: &mut [f64],
) -> f64 {
    if !in_bounds(pixel, layer.width, layer.height) {
        return 0.0;
    }
    let idx = pixel.1 as usize * layer.width + pixel.0 as usize;
    let dim = layer.dim;
    induced_change(
        tau,
        &layer.data[idx * dim..(idx + 1) * dim],
        z,
        layer.min_z[idx],
        layer.counts[idx],
        alpha,
        delta,
    );
    delta.iter().zip(&adjoint[idx * dim..(idx + 1) * dim]).map(|(d, a)| d * a).sum()
}

/// Central-difference spatial gradient for a ghost point at `pixel`.
pub fn spatial_gradient(
    tau: &[f64],
    z: f64,
    pixel: (i64, i64),
    layer: &PyramidLayer,
    adjoint: &[f64],
    alpha: f64,
    signed_central: bool,
) -> SpatialGrad {
    let mut delta = vec![0.0; layer.dim];
    let (u, v) = pixel;
    let tp = shift_term(tau, z, (u + 1, v), layer, adjoint, alpha, &mut delta);
    let tm = shift_term(tau, z, (u - 1, v), layer, adjoint, alpha, &mut delta);
    let tq = shift_term(tau, z, (u, v + 1), layer, adjoint, alpha, &mut delta);
    let tn = shift_term(tau, z, (u, v - 1), layer, adjoint, alpha, &mut delta);
    if signed_central {
        SpatialGrad { gu: 0.5 * (tp - tm), gv: 0.5 * (tq - tn) }
    } else {
        SpatialGrad { gu: 0.5 * (tp + tm), gv: 0.5 * (tq + tn) }
    }
}

/// Texture and environment gradients from the render set.
///
/// d_tau follows the blend mean (adjoint / count per contributing pixel)
/// through the descriptor linearization; d_env routes background-pixel
/// adjoints onto the bilinear environment taps.
pub fn backprop_texture_env(
    scene: &Scene,
    frame: &Frame,
    cfg: &RasterConfig,
    state: &RenderState,
    adjoint: &[Vec<f64>],
    bundle: &mut GradientBundle,
) -> Result<()> {
    let camera = scene.camera_for(frame);
    let dim = scene.cloud.descriptor_dim;
    let space = scene.cloud.descriptor_space;
    check_adjoint(state, adjoint)?;

    for (l, layer) in state.pyramid.layers.iter().enumerate() {
        let adj = &adjoint[l];
        let frags = collect_fragments(
            &state.prepared,
            cfg,
            l,
            layer.width,
            layer.height,
            &layer.min_z,
            dim,
        );
        let mut i = 0;
        while i < frags.len() {
            let pix = frags[i].pixel as usize;
            let mut j = i;
            while j < frags.len() && frags[j].pixel as usize == pix {
                j += 1;
            }
            let count = (j - i) as f64;
            debug_assert_eq!(layer.counts[pix] as usize, j - i);
            for f in &frags[i..j] {
                let p = f.point as usize;
                let desc = scene.cloud.descriptor(p);
                for ch in 0..dim {
                    let dlin = descriptor_to_linear(desc[ch], space).1;
                    bundle.d_tau[p * dim + ch] += adj[pix * dim + ch] / count * dlin;
                }
            }
            i = j;
        }

        // Background pixels: the forward filled them from the environment
        // along the pixel-center ray; the gradient lands on the same taps.
        let scale = (1u64 << l) as f64;
        for pix in 0..layer.width * layer.height {
            if layer.counts[pix] != 0 {
                continue;
            }
            let (u, v) = (pix % layer.width, pix / layer.width);
            let uv0 = Vector2::new(u as f64 * scale, v as f64 * scale);
            let dir = frame.pose.inverse_rotate(&camera.unproject(&uv0)?);
            for (texel, w) in scene.env.lookup_taps(&dir) {
                for ch in 0..dim {
                    bundle.d_env[texel * dim + ch] += w * adj[pix * dim + ch];
                }
            }
        }
    }
    Ok(())
}

/// Structural gradients for the points in `structural_set`: spatial
/// gradients per layer, scaled back to base-layer pixel units, chained
/// through the projection and pose Jacobians, averaged over layers.
/// Normally the set holds the ghost points; passing rendered points
/// instead evaluates the same one-pixel shifts against an image that
/// already contains them.
pub fn backprop_structural(
    scene: &Scene,
    frame: &Frame,
    cfg: &RasterConfig,
    bwd: &BackwardConfig,
    state: &RenderState,
    structural_set: &[usize],
    adjoint: &[Vec<f64>],
    bundle: &mut GradientBundle,
) -> Result<()> {
    let camera = scene.camera_for(frame);
    let pose = &frame.pose;
    let dim = scene.cloud.descriptor_dim;
    check_adjoint(state, adjoint)?;

    let inv_layers = 1.0 / cfg.num_layers as f64;
    for (l, layer) in state.pyramid.layers.iter().enumerate() {
        let adj = &adjoint[l];
        let scale = 1.0 / (1u64 << l) as f64;
        for &g in structural_set {
            let seen = state.ghost_visible[g] || state.prepared.visible[g];
            if !seen || !state.prepared.survives_discard(cfg, g, l) {
                continue;
            }
            let uv = state.prepared.uv0[g] * scale;
            let pixel = (round_half_away(uv.x) as i64, round_half_away(uv.y) as i64);
            if !in_bounds(pixel, layer.width, layer.height) {
                continue;
            }
            let tau = &state.prepared.lin[g * dim..(g + 1) * dim];
            let z = state.prepared.z[g];
            let sg = spatial_gradient(tau, z, pixel, layer, adj, cfg.alpha_depth, bwd.signed_central);
            // Layer-l coordinates are base coordinates over 2^l.
            let g0 = Vector2::new(sg.gu * scale, sg.gv * scale) * inv_layers;
            if g0 == Vector2::zeros() {
                continue;
            }
            let xc = state.prepared.xc[g];
            let Some(j_proj) = camera.projection_jacobian(&xc) else {
                continue;
            };
            let grad_xc = j_proj.transpose() * g0;
            bundle.d_x[g] += pose.inverse_rotate(&grad_xc);
            if let Some(j_pose) = pose_point_jacobian(camera, pose, &scene.cloud.positions[g]) {
                let gp = j_pose.transpose() * g0;
                for k in 0..6 {
                    bundle.d_pose.0[k] += gp[k];
                }
            }
            if let Some(j_int) = camera.intrinsics_jacobian(&xc) {
                let gi = j_int.transpose() * g0;
                for k in 0..INTRINSIC_PARAMS {
                    bundle.d_intrinsics[k] += gi[k];
                }
            }
        }
    }
    Ok(())
}

fn check_adjoint(state: &RenderState, adjoint: &[Vec<f64>]) -> Result<()> {
    if adjoint.len() != state.pyramid.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} adjoint layers for {} pyramid layers",
            adjoint.len(),
            state.pyramid.layers.len()
        )));
    }
    for (a, l) in adjoint.iter().zip(&state.pyramid.layers) {
        if a.len() != l.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "adjoint len {} vs layer data len {}",
                a.len(),
                l.data.len()
            )));
        }
    }
    Ok(())
}

/// Full backward pass for one frame. Adjoints are dL/d(layer data), one
/// buffer per pyramid layer.
pub fn backward_frame(
    scene: &Scene,
    frame: &Frame,
    cfg: &RasterConfig,
    bwd: &BackwardConfig,
    state: &RenderState,
    split: &GhostSplit,
    adjoint: &[Vec<f64>],
) -> Result<GradientBundle> {
    let mut bundle = GradientBundle::zeros(
        scene.cloud.len(),
        scene.cloud.descriptor_dim,
        scene.env.width * scene.env.height,
    );
    if bwd.texture {
        backprop_texture_env(scene, frame, cfg, state, adjoint, &mut bundle)?;
    }
    if bwd.structural {
        backprop_structural(scene, frame, cfg, bwd, state, &split.ghost_set, adjoint, &mut bundle)?;
    }
    bundle.validate()?;
    Ok(bundle)
}
