//! Pull-push reconstruction of a dense HDR image from the sparse render
//! pyramid.
//!
//! Every rasterized layer contributes validity-weighted observations at its
//! own resolution. A pull phase aggregates them toward the coarsest level, a
//! push phase fills holes back down, and an affine head maps descriptors to
//! radiance. The whole map is linear in the descriptor values for a fixed
//! sparsity pattern, so the backward pass is its exact transpose.

use rayon::prelude::*;

use crate::scene::ImagePyramid;
use crate::{Error, Result};

pub const DEFAULT_VALIDITY_EPSILON: f64 = 1e-6;

/// Learnable descriptor-to-radiance map: `rgb = weight * x + bias`.
#[derive(Clone, Debug)]
pub struct AffineHead {
    pub dim: usize,
    /// Row-major 3 x dim.
    pub weight: Vec<f64>,
    pub bias: [f64; 3],
}

impl AffineHead {
    /// Initial head selects the leading descriptor channels; when the
    /// descriptor has fewer than three channels the last one is repeated.
    pub fn select_rgb(dim: usize) -> Self {
        let mut weight = vec![0.0; 3 * dim];
        for ch in 0..3 {
            weight[ch * dim + ch.min(dim - 1)] = 1.0;
        }
        AffineHead { dim, weight, bias: [0.0; 3] }
    }

    pub fn apply(&self, x: &[f64]) -> [f64; 3] {
        let mut out = self.bias;
        for ch in 0..3 {
            let row = &self.weight[ch * self.dim..(ch + 1) * self.dim];
            out[ch] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.weight.len() != 3 * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "head weight len {} for dim {}",
                self.weight.len(),
                self.dim
            )));
        }
        if !self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("reconstruction head"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructConfig {
    /// Weights at or below this floor count as empty.
    pub validity_epsilon: f64,
    pub head: AffineHead,
}

impl ReconstructConfig {
    pub fn new(dim: usize) -> Self {
        ReconstructConfig {
            validity_epsilon: DEFAULT_VALIDITY_EPSILON,
            head: AffineHead::select_rgb(dim),
        }
    }
}

/// One fill level in premultiplied form: `sums = value * weight`.
///
/// Keeping the product rather than the value makes pull a plain 2x2 mean and
/// keeps every operation linear in the observed values.
#[derive(Clone, Debug)]
pub struct FillGrid {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub sums: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FillGrid {
    pub fn from_observations(
        values: &[f64],
        weights: &[f64],
        width: usize,
        height: usize,
        dim: usize,
    ) -> Result<Self> {
        if values.len() != width * height * dim || weights.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "observations disagree with {width}x{height}x{dim}"
            )));
        }
        let sums = values
            .chunks(dim)
            .zip(weights)
            .flat_map(|(px, &w)| px.iter().map(move |v| v * w))
            .collect();
        Ok(FillGrid { width, height, dim, sums, weights: weights.to_vec() })
    }

    fn zeros(width: usize, height: usize, dim: usize) -> Self {
        FillGrid {
            width,
            height,
            dim,
            sums: vec![0.0; width * height * dim],
            weights: vec![0.0; width * height],
        }
    }

    /// De-premultiplied value, zero where the pixel is empty.
    pub fn value(&self, idx: usize, ch: usize) -> f64 {
        let w = self.weights[idx];
        if w > 0.0 {
            self.sums[idx * self.dim + ch] / w
        } else {
            0.0
        }
    }

    /// Aggregates 2x2 child blocks one level coarser. The parent value is the
    /// validity-weighted average of its children and the parent weight is the
    /// mean child weight, clamped to 1. Blocks whose total weight is at or
    /// below `eps` stay empty.
    pub fn pull(&self, eps: f64) -> FillGrid {
        let cw = self.width.div_ceil(2);
        let ch_ = self.height.div_ceil(2);
        let dim = self.dim;
        let mut out = FillGrid::zeros(cw, ch_, dim);
        out.sums
            .par_chunks_mut(cw * dim)
            .zip(out.weights.par_chunks_mut(cw))
            .enumerate()
            .for_each(|(cy, (srow, wrow))| {
                let mut acc = vec![0.0f64; dim];
                for cx in 0..cw {
                    let mut wsum = 0.0;
                    let mut n = 0usize;
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for dy in 0..2usize {
                        let fy = cy * 2 + dy;
                        if fy >= self.height {
                            continue;
                        }
                        for dx in 0..2usize {
                            let fx = cx * 2 + dx;
                            if fx >= self.width {
                                continue;
                            }
                            let fi = fy * self.width + fx;
                            wsum += self.weights[fi];
                            n += 1;
                            for d in 0..dim {
                                acc[d] += self.sums[fi * dim + d];
                            }
                        }
                    }
                    if wsum > eps {
                        // Mean of premultiplied sums equals weight * weighted
                        // average, so no division is needed here.
                        let inv = 1.0 / n as f64;
                        for d in 0..dim {
                            srow[cx * dim + d] = acc[d] * inv;
                        }
                        wrow[cx] = (wsum * inv).min(1.0);
                    }
                }
            });
        out
    }

    /// Adds another observation grid at the same resolution. Values combine
    /// as a weighted mean; the weight saturates at 1.
    pub fn merge(&mut self, other: &FillGrid) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.dim != other.dim {
            return Err(Error::ShapeMismatch(format!(
                "merge {}x{} with {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        for i in 0..self.weights.len() {
            let wsum = self.weights[i] + other.weights[i];
            let scale = if wsum > 1.0 { 1.0 / wsum } else { 1.0 };
            for d in 0..self.dim {
                let s = self.sums[i * self.dim + d] + other.sums[i * self.dim + d];
                self.sums[i * self.dim + d] = s * scale;
            }
            self.weights[i] = wsum.min(1.0);
        }
        Ok(())
    }

    /// Promotes every non-empty pixel to full validity. Applied at the
    /// coarsest level so the push phase propagates values, not deficits.
    pub fn saturate(&mut self, eps: f64) {
        for i in 0..self.weights.len() {
            let w = self.weights[i];
            if w > eps {
                let inv = 1.0 / w;
                for d in 0..self.dim {
                    self.sums[i * self.dim + d] *= inv;
                }
                self.weights[i] = 1.0;
            } else {
                self.weights[i] = 0.0;
                for d in 0..self.dim {
                    self.sums[i * self.dim + d] = 0.0;
                }
            }
        }
    }

    /// Fills `fine` from this (coarser) grid: each fine pixel keeps its own
    /// contribution and tops up the remaining validity with the bilinearly
    /// upsampled coarse fill. Fully valid fine pixels pass through unchanged.
    pub fn push_into(&self, fine: &FillGrid) -> Result<FillGrid> {
        if self.width != fine.width.div_ceil(2)
            || self.height != fine.height.div_ceil(2)
            || self.dim != fine.dim
        {
            return Err(Error::ShapeMismatch(format!(
                "push {}x{} into {}x{}",
                self.width, self.height, fine.width, fine.height
            )));
        }
        let dim = self.dim;
        let mut out = FillGrid::zeros(fine.width, fine.height, dim);
        out.sums
            .par_chunks_mut(fine.width * dim)
            .zip(out.weights.par_chunks_mut(fine.width))
            .enumerate()
            .for_each(|(fy, (srow, wrow))| {
                let mut up_s = vec![0.0f64; dim];
                for fx in 0..fine.width {
                    let fi = fy * fine.width + fx;
                    let wf = fine.weights[fi];
                    let taps = bilinear_taps(fx, fy, self.width, self.height);
                    let mut up_w = 0.0;
                    up_s.iter_mut().for_each(|s| *s = 0.0);
                    for &(ci, tw) in &taps {
                        up_w += tw * self.weights[ci];
                        for d in 0..dim {
                            up_s[d] += tw * self.sums[ci * dim + d];
                        }
                    }
                    let gap = 1.0 - wf;
                    for d in 0..dim {
                        srow[fx * dim + d] = fine.sums[fi * dim + d] + gap * up_s[d];
                    }
                    wrow[fx] = wf + gap * up_w;
                }
            });
        Ok(out)
    }
}

/// Bilinear footprint of fine pixel (fx, fy) in the next coarser grid, taps
/// clamped at the border. Weights sum to 1.
pub fn bilinear_taps(fx: usize, fy: usize, cw: usize, ch: usize) -> [(usize, f64); 4] {
    let xc = (fx as f64 + 0.5) / 2.0 - 0.5;
    let yc = (fy as f64 + 0.5) / 2.0 - 0.5;
    let x0f = xc.floor();
    let y0f = yc.floor();
    let tx = xc - x0f;
    let ty = yc - y0f;
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let x0 = clamp(x0f, cw);
    let x1 = clamp(x0f + 1.0, cw);
    let y0 = clamp(y0f, ch);
    let y1 = clamp(y0f + 1.0, ch);
    [
        (y0 * cw + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * cw + x1, tx * (1.0 - ty)),
        (y1 * cw + x0, (1.0 - tx) * ty),
        (y1 * cw + x1, tx * ty),
    ]
}

/// Forward reconstruction with every intermediate the transpose pass needs.
pub struct Reconstruction {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// Dense radiance image, row-major h x w x 3.
    pub hdr: Vec<f64>,
    /// Descriptor image after hole filling and background composition.
    pub composed: Vec<f64>,
    /// Per-level observation grids, post merge with the pulled aggregate.
    states: Vec<FillGrid>,
    /// Per-level merge rescale factors (weight saturation).
    merge_scale: Vec<Vec<f64>>,
    /// Per-level filled grids from the push phase, `filled[0]` finest.
    filled: Vec<FillGrid>,
}

fn observation_grids(pyramid: &ImagePyramid) -> Result<Vec<FillGrid>> {
    let base = &pyramid.layers[0];
    let mut grids = Vec::with_capacity(pyramid.layers.len());
    for (l, layer) in pyramid.layers.iter().enumerate() {
        let expect = (base.width.div_ceil(1 << l), base.height.div_ceil(1 << l));
        if (layer.width, layer.height) != expect || layer.dim != base.dim {
            return Err(Error::ShapeMismatch(format!(
                "layer {l} is {}x{}x{}, expected {}x{}x{}",
                layer.width, layer.height, layer.dim, expect.0, expect.1, base.dim
            )));
        }
        let weights: Vec<f64> =
            layer.counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();
        grids.push(FillGrid::from_observations(
            &layer.data,
            &weights,
            layer.width,
            layer.height,
            layer.dim,
        )?);
    }
    Ok(grids)
}

/// Fuses the pyramid into one dense HDR image.
///
/// Pull aggregates observations coarseward, merging each rasterized layer in
/// at its own level; push fills back down; pixels left without any geometry
/// support show the environment value already stored in the base layer.
pub fn reconstruct_hdr(pyramid: &ImagePyramid, cfg: &ReconstructConfig) -> Result<Reconstruction> {
    cfg.head.validate()?;
    if pyramid.layers.is_empty() {
        return Err(Error::InvalidArgument("empty pyramid".into()));
    }
    let dim = pyramid.dim();
    if cfg.head.dim != dim {
        return Err(Error::ShapeMismatch(format!(
            "head dim {} vs pyramid dim {}",
            cfg.head.dim, dim
        )));
    }
    let eps = cfg.validity_epsilon;
    let levels = pyramid.layers.len();

    let mut states = observation_grids(pyramid)?;
    let mut merge_scale = vec![Vec::new(); levels];
    for l in 1..levels {
        let pulled = states[l - 1].pull(eps);
        // Record the saturation rescale so the transpose pass can replay it.
        let mut scale = vec![1.0f64; pulled.weights.len()];
        for (i, s) in scale.iter_mut().enumerate() {
            let wsum = pulled.weights[i] + states[l].weights[i];
            if wsum > 1.0 {
                *s = 1.0 / wsum;
            }
        }
        states[l].merge(&pulled)?;
        merge_scale[l] = scale;
    }

    let mut filled = vec![FillGrid::zeros(0, 0, dim); levels];
    let mut top = states[levels - 1].clone();
    top.saturate(eps);
    filled[levels - 1] = top;
    for l in (0..levels - 1).rev() {
        filled[l] = filled[l + 1].push_into(&states[l])?;
    }

    let base = &pyramid.layers[0];
    let (width, height) = (base.width, base.height);
    let fin = &filled[0];
    let mut composed = vec![0.0; width * height * dim];
    composed
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(i, px)| {
            let gap = 1.0 - fin.weights[i];
            let env = if base.counts[i] == 0 { Some(&base.data[i * dim..(i + 1) * dim]) } else { None };
            for d in 0..dim {
                px[d] = fin.sums[i * dim + d];
                if let Some(env) = env {
                    px[d] += gap * env[d];
                }
            }
        });

    let head = &cfg.head;
    let mut hdr = vec![0.0; width * height * 3];
    hdr.par_chunks_mut(3)
        .zip(composed.par_chunks(dim))
        .for_each(|(out, x)| {
            out.copy_from_slice(&head.apply(x));
        });

    Ok(Reconstruction {
        width,
        height,
        dim,
        hdr,
        composed,
        states,
        merge_scale,
        filled,
    })
}

/// Gradients produced by the transpose pass.
pub struct ReconstructGrads {
    /// One gradient buffer per pyramid level, matching `layers[l].data`.
    pub layers: Vec<Vec<f64>>,
    pub head_weight: Vec<f64>,
    pub head_bias: [f64; 3],
}

impl Reconstruction {
    /// Exact adjoint of `reconstruct_hdr` for a fixed sparsity pattern.
    /// `adjoint` is dL/dhdr, row-major h x w x 3.
    pub fn backward(
        &self,
        pyramid: &ImagePyramid,
        cfg: &ReconstructConfig,
        adjoint: &[f64],
    ) -> Result<ReconstructGrads> {
        let dim = self.dim;
        let npx = self.width * self.height;
        if adjoint.len() != npx * 3 {
            return Err(Error::ShapeMismatch(format!(
                "adjoint len {} for {}x{}x3",
                adjoint.len(),
                self.width,
                self.height
            )));
        }
        let head = &cfg.head;

        let mut head_weight = vec![0.0; 3 * dim];
        let mut head_bias = [0.0; 3];
        let mut d_composed = vec![0.0; npx * dim];
        for i in 0..npx {
            let adj = &adjoint[i * 3..i * 3 + 3];
            let x = &self.composed[i * dim..(i + 1) * dim];
            for ch in 0..3 {
                head_bias[ch] += adj[ch];
                for d in 0..dim {
                    head_weight[ch * dim + d] += adj[ch] * x[d];
                    d_composed[i * dim + d] += adj[ch] * head.weight[ch * dim + d];
                }
            }
        }

        let levels = self.states.len();
        let base = &pyramid.layers[0];
        let mut d_layers: Vec<Vec<f64>> =
            pyramid.layers.iter().map(|l| vec![0.0; l.data.len()]).collect();

        // Background composition: composed = filled0 sums + gap * env.
        let fin = &self.filled[0];
        let mut d_filled = vec![0.0; npx * dim];
        for i in 0..npx {
            for d in 0..dim {
                let g = d_composed[i * dim + d];
                d_filled[i * dim + d] = g;
                if base.counts[i] == 0 {
                    d_layers[0][i * dim + d] += (1.0 - fin.weights[i]) * g;
                }
            }
        }

        // Push phase transpose, finest to coarsest.
        for l in 0..levels - 1 {
            let fine = &self.states[l];
            let coarse = &self.filled[l + 1];
            let mut d_coarse = vec![0.0; coarse.sums.len()];
            let mut d_state = vec![0.0; fine.sums.len()];
            for fy in 0..fine.height {
                for fx in 0..fine.width {
                    let fi = fy * fine.width + fx;
                    let gap = 1.0 - fine.weights[fi];
                    let taps = bilinear_taps(fx, fy, coarse.width, coarse.height);
                    for d in 0..dim {
                        let g = d_filled[fi * dim + d];
                        d_state[fi * dim + d] += g;
                        for &(ci, tw) in &taps {
                            d_coarse[ci * dim + d] += gap * tw * g;
                        }
                    }
                }
            }
            self.scatter_state_grad(l, &d_state, pyramid, cfg.validity_epsilon, &mut d_layers)?;
            d_filled = d_coarse;
        }

        // Coarsest saturation: sums were rescaled by 1/w where w > eps.
        let top = &self.states[levels - 1];
        let mut d_state = vec![0.0; top.sums.len()];
        for i in 0..top.weights.len() {
            let w = top.weights[i];
            if w > cfg.validity_epsilon {
                for d in 0..dim {
                    d_state[i * dim + d] = d_filled[i * dim + d] / w;
                }
            }
        }
        self.scatter_state_grad(levels - 1, &d_state, pyramid, cfg.validity_epsilon, &mut d_layers)?;

        Ok(ReconstructGrads { layers: d_layers, head_weight, head_bias })
    }

    /// Routes a gradient on the merged state at `level` into the rasterized
    /// observations at that level and, recursively via the pull transpose,
    /// into the finer states below it.
    fn scatter_state_grad(
        &self,
        level: usize,
        d_state: &[f64],
        pyramid: &ImagePyramid,
        eps: f64,
        d_layers: &mut [Vec<f64>],
    ) -> Result<()> {
        let dim = self.dim;
        let layer = &pyramid.layers[level];
        let scale = &self.merge_scale[level];
        // The merged sums are scale * (pulled + observed); both branches see
        // the same scaled gradient.
        let scaled: Vec<f64> = if scale.is_empty() {
            d_state.to_vec()
        } else {
            d_state
                .iter()
                .enumerate()
                .map(|(j, g)| g * scale[j / dim])
                .collect()
        };
        for (i, &c) in layer.counts.iter().enumerate() {
            if c > 0 {
                for d in 0..dim {
                    d_layers[level][i * dim + d] += scaled[i * dim + d];
                }
            }
        }
        if level == 0 {
            return Ok(());
        }
        // Pull transpose: parent sum is the mean of its children.
        let fine = &self.states[level - 1];
        let cw = fine.width.div_ceil(2);
        let mut d_fine = vec![0.0; fine.sums.len()];
        for cy in 0..fine.height.div_ceil(2) {
            for cx in 0..cw {
                let ci = cy * cw + cx;
                let mut children = [0usize; 4];
                let mut n = 0usize;
                let mut wsum = 0.0;
                for dy in 0..2usize {
                    let fy = cy * 2 + dy;
                    if fy >= fine.height {
                        continue;
                    }
                    for dx in 0..2usize {
                        let fx = cx * 2 + dx;
                        if fx >= fine.width {
                            continue;
                        }
                        let fi = fy * fine.width + fx;
                        children[n] = fi;
                        n += 1;
                        wsum += fine.weights[fi];
                    }
                }
                if wsum <= eps {
                    continue;
                }
                let inv = 1.0 / n as f64;
                for &fi in &children[..n] {
                    for d in 0..dim {
                        d_fine[fi * dim + d] += scaled[ci * dim + d] * inv;
                    }
                }
            }
        }
        self.scatter_state_grad(level - 1, &d_fine, pyramid, eps, d_layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{key_uniform, Stream};
    use crate::scene::PyramidLayer;
    use approx::assert_relative_eq;

    fn grid(values: &[f64], weights: &[f64], w: usize, h: usize, dim: usize) -> FillGrid {
        FillGrid::from_observations(values, weights, w, h, dim).unwrap()
    }

    fn rand01(seed: u64, i: u64) -> f64 {
        key_uniform(seed, Stream::Noise, i, 7)
    }

    /// Pyramid with prescribed counts and data, min_z kept consistent.
    fn synth_pyramid(
        width: usize,
        height: usize,
        dim: usize,
        levels: usize,
        fill: impl Fn(usize, usize) -> (u32, f64),
    ) -> ImagePyramid {
        let mut p = ImagePyramid::new(width, height, dim, levels).unwrap();
        for l in 0..levels {
            let layer = &mut p.layers[l];
            for i in 0..layer.width * layer.height {
                let (c, v) = fill(l, i);
                layer.counts[i] = c;
                layer.min_z[i] = if c > 0 { 1.0 } else { f64::INFINITY };
                for d in 0..dim {
                    layer.data[i * dim + d] = v + d as f64 * 0.01;
                }
            }
        }
        p
    }

    #[test]
    fn pull_keeps_fully_valid_constant() {
        let vals = vec![3.25; 8 * 8];
        let wts = vec![1.0; 64];
        let mut g = grid(&vals, &wts, 8, 8, 1);
        for _ in 0..3 {
            g = g.pull(1e-6);
            for i in 0..g.weights.len() {
                assert_eq!(g.weights[i], 1.0);
                assert_relative_eq!(g.value(i, 0), 3.25, epsilon = 1e-12);
            }
        }
        assert_eq!((g.width, g.height), (1, 1));
    }

    #[test]
    fn pull_single_valid_child() {
        let vals = vec![7.5, 0.0, 0.0, 0.0];
        let wts = vec![1.0, 0.0, 0.0, 0.0];
        let g = grid(&vals, &wts, 2, 2, 1).pull(1e-6);
        assert_eq!((g.width, g.height), (1, 1));
        assert_relative_eq!(g.weights[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(g.value(0, 0), 7.5, epsilon = 1e-12);
    }

    #[test]
    fn pull_preserves_mean_over_valid_region() {
        let vals: Vec<f64> = (0..64).map(|i| rand01(1, i)).collect();
        let wts = vec![1.0; 64];
        let g = grid(&vals, &wts, 8, 8, 1);
        let mean0 = vals.iter().sum::<f64>() / 64.0;
        let p = g.pull(1e-6);
        let mean1 = (0..16).map(|i| p.value(i, 0)).sum::<f64>() / 16.0;
        assert_relative_eq!(mean0, mean1, epsilon = 1e-13);
    }

    #[test]
    fn pull_gradients_match_fd() {
        let vals: Vec<f64> = (0..16).map(|i| 0.2 + rand01(2, i)).collect();
        let wts: Vec<f64> = (0..16).map(|i| 0.1 + 0.9 * rand01(3, i)).collect();
        let h = 1e-6;
        // Parent value is linear in each child value with slope w_c / sum w.
        for idx in [0usize, 1, 4, 5] {
            let parent_value = |delta: f64| {
                let mut v = vals.clone();
                v[idx] += delta;
                grid(&v, &wts, 4, 4, 1).pull(1e-9).value(0, 0)
            };
            let fd = (parent_value(h) - parent_value(-h)) / (2.0 * h);
            let wsum: f64 = wts[0] + wts[1] + wts[4] + wts[5];
            assert_relative_eq!(fd, wts[idx] / wsum, max_relative = 1e-6);
        }
        // Parent weight is linear in each child weight with slope 1/4.
        for child in [0usize, 1, 4, 5] {
            let parent_weight = |delta: f64| {
                let mut w = wts.clone();
                w[child] += delta;
                grid(&vals, &w, 4, 4, 1).pull(1e-9).weights[0]
            };
            let fd = (parent_weight(h) - parent_weight(-h)) / (2.0 * h);
            assert_relative_eq!(fd, 0.25, max_relative = 1e-6);
        }
    }

    #[test]
    fn push_is_identity_on_fully_valid_fine() {
        let fine_vals: Vec<f64> = (0..16).map(|i| rand01(4, i)).collect();
        let fine = grid(&fine_vals, &vec![1.0; 16], 4, 4, 1);
        let mut coarse = fine.pull(1e-6);
        coarse.saturate(1e-6);
        let filled = coarse.push_into(&fine).unwrap();
        for i in 0..16 {
            assert_eq!(filled.weights[i], 1.0);
            assert_relative_eq!(filled.value(i, 0), fine_vals[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn push_fills_isolated_hole_with_constant() {
        let c = 2.5;
        let mut wts = vec![1.0; 16];
        wts[5] = 0.0;
        let mut vals = vec![c; 16];
        vals[5] = -100.0;
        let fine = grid(&vals, &wts, 4, 4, 1);
        let mut coarse = fine.pull(1e-6);
        coarse.saturate(1e-6);
        let filled = coarse.push_into(&fine).unwrap();
        for i in 0..16 {
            assert_relative_eq!(filled.weights[i], 1.0, epsilon = 1e-12);
            assert_relative_eq!(filled.value(i, 0), c, epsilon = 1e-12);
        }
    }

    #[test]
    fn push_gradients_match_fd() {
        let h = 1e-6;
        let fine_w: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let fine_v: Vec<f64> = (0..16).map(|i| rand01(5, i)).collect();
        let coarse_v: Vec<f64> = (0..4).map(|i| rand01(6, i)).collect();
        let probe = |fv: &[f64], cv: &[f64]| -> f64 {
            let fine = grid(fv, &fine_w, 4, 4, 1);
            let coarse = grid(cv, &vec![1.0; 4], 2, 2, 1);
            let filled = coarse.push_into(&fine).unwrap();
            filled.sums.iter().enumerate().map(|(i, s)| (i as f64 + 1.0) * s).sum()
        };
        // Fine values: slope is (i+1) * w_i through the premultiplied sum.
        for i in [0usize, 3, 6] {
            let mut lo = fine_v.clone();
            let mut hi = fine_v.clone();
            lo[i] -= h;
            hi[i] += h;
            let fd = (probe(&hi, &coarse_v) - probe(&lo, &coarse_v)) / (2.0 * h);
            assert_relative_eq!(fd, (i as f64 + 1.0) * fine_w[i], max_relative = 1e-6);
        }
        // Coarse values: accumulate tap weights over uncovered fine pixels.
        for ci in 0..4usize {
            let mut lo = coarse_v.clone();
            let mut hi = coarse_v.clone();
            lo[ci] -= h;
            hi[ci] += h;
            let fd = (probe(&fine_v, &hi) - probe(&fine_v, &lo)) / (2.0 * h);
            let mut expect = 0.0;
            for fy in 0..4 {
                for fx in 0..4 {
                    let fi = fy * 4 + fx;
                    for (ti, tw) in bilinear_taps(fx, fy, 2, 2) {
                        if ti == ci {
                            expect += (fi as f64 + 1.0) * (1.0 - fine_w[fi]) * tw;
                        }
                    }
                }
            }
            assert_relative_eq!(fd, expect, max_relative = 1e-6);
        }
    }

    #[test]
    fn dense_base_layer_reduces_to_head() {
        let dim = 4;
        let p = synth_pyramid(8, 8, dim, 3, |l, i| (1, (l * 100 + i) as f64 * 0.01));
        let mut cfg = ReconstructConfig::new(dim);
        cfg.head.weight = (0..3 * dim).map(|i| rand01(8, i as u64) - 0.3).collect();
        cfg.head.bias = [0.1, -0.2, 0.05];
        let rec = reconstruct_hdr(&p, &cfg).unwrap();
        for i in 0..64 {
            let expect = cfg.head.apply(&p.layers[0].data[i * dim..(i + 1) * dim]);
            for ch in 0..3 {
                assert_relative_eq!(rec.hdr[i * 3 + ch], expect[ch], epsilon = 1e-12);
            }
        }

        // Coarse layers must not leak into a fully covered base layer.
        let mut q = p.clone();
        for l in 1..3 {
            for v in q.layers[l].data.iter_mut() {
                *v += 17.0;
            }
        }
        let rec2 = reconstruct_hdr(&q, &cfg).unwrap();
        assert_eq!(rec.hdr, rec2.hdr);
    }

    #[test]
    fn checkerboard_holes_fill_to_constant() {
        let dim = 2;
        let c = 1.75;
        let p = synth_pyramid(8, 8, dim, 3, |l, i| {
            if l > 0 {
                return (0, 0.0);
            }
            let (x, y) = (i % 8, i / 8);
            if (x + y) % 2 == 0 {
                (1, c)
            } else {
                (0, -50.0) // environment value that must not show through
            }
        });
        let cfg = ReconstructConfig::new(dim);
        let rec = reconstruct_hdr(&p, &cfg).unwrap();
        for i in 0..64 {
            for d in 0..dim.min(3) {
                assert_relative_eq!(rec.composed[i * dim + d], c + d as f64 * 0.01, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empty_regions_pass_environment_through() {
        let dim = 3;
        // Geometry only in the top-left 2x2 of an 8x8 base, two levels.
        let p = synth_pyramid(8, 8, dim, 2, |l, i| {
            if l > 0 {
                return (0, 0.0);
            }
            let (x, y) = (i % 8, i / 8);
            if x < 2 && y < 2 {
                (1, 5.0)
            } else {
                (0, 0.25) // environment radiance
            }
        });
        let cfg = ReconstructConfig::new(dim);
        let rec = reconstruct_hdr(&p, &cfg).unwrap();
        // Far corner has no geometry support anywhere in its pull footprint.
        let far = 7 * 8 + 7;
        for d in 0..dim {
            assert_relative_eq!(rec.composed[far * dim + d], 0.25 + d as f64 * 0.01, epsilon = 1e-12);
        }
        // Covered pixels keep their own value.
        for d in 0..dim {
            assert_relative_eq!(rec.composed[d], 5.0 + d as f64 * 0.01, epsilon = 1e-12);
        }
    }

    #[test]
    fn injected_coarse_observations_reach_base_holes() {
        let dim = 1;
        // Base layer empty, a single observation at level 1 fills everything
        // its push footprint touches.
        let p = synth_pyramid(4, 4, dim, 2, |l, i| {
            if l == 1 && i == 0 {
                (3, 9.0)
            } else {
                (0, 0.0)
            }
        });
        let cfg = ReconstructConfig::new(dim);
        let rec = reconstruct_hdr(&p, &cfg).unwrap();
        // Fine pixel (0,0) taps only coarse (0,0) after clamping.
        assert_relative_eq!(rec.composed[0], 9.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_in_descriptor_values_for_fixed_pattern() {
        let dim = 3;
        let pattern = |_l: usize, i: usize| ((i % 3 == 0) as u32, 0.0);
        let mut pa = synth_pyramid(8, 8, dim, 3, pattern);
        let mut pb = synth_pyramid(8, 8, dim, 3, pattern);
        let mut pc = synth_pyramid(8, 8, dim, 3, pattern);
        let (a, b) = (0.7, -0.3);
        let mut k = 0u64;
        for l in 0..3 {
            for j in 0..pa.layers[l].data.len() {
                let x = rand01(10, k);
                let y = rand01(11, k);
                k += 1;
                pa.layers[l].data[j] = x;
                pb.layers[l].data[j] = y;
                pc.layers[l].data[j] = a * x + b * y;
            }
        }
        let mut cfg = ReconstructConfig::new(dim);
        cfg.head.bias = [0.0; 3];
        let ra = reconstruct_hdr(&pa, &cfg).unwrap();
        let rb = reconstruct_hdr(&pb, &cfg).unwrap();
        let rc = reconstruct_hdr(&pc, &cfg).unwrap();
        for i in 0..rc.hdr.len() {
            assert_relative_eq!(rc.hdr[i], a * ra.hdr[i] + b * rb.hdr[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dim = 2;
        let levels = 3;
        let p = synth_pyramid(8, 8, dim, levels, |l, i| {
            let r = rand01(20 + l as u64, i as u64);
            let c = if r < 0.4 {
                0
            } else if r < 0.8 {
                1
            } else {
                2
            };
            (c, rand01(30 + l as u64, i as u64))
        });
        let mut cfg = ReconstructConfig::new(dim);
        cfg.head.weight = (0..3 * dim).map(|i| rand01(40, i as u64) - 0.4).collect();
        cfg.head.bias = [0.3, -0.1, 0.2];
        let adj: Vec<f64> = (0..8 * 8 * 3).map(|i| rand01(41, i as u64) - 0.5).collect();
        let loss = |p: &ImagePyramid, cfg: &ReconstructConfig| -> f64 {
            let rec = reconstruct_hdr(p, cfg).unwrap();
            rec.hdr.iter().zip(&adj).map(|(o, a)| o * a).sum()
        };

        let rec = reconstruct_hdr(&p, &cfg).unwrap();
        let grads = rec.backward(&p, &cfg, &adj).unwrap();

        let h = 1e-5;
        // Layer data entries across all levels, including empty pixels whose
        // gradient must be zero away from the base layer.
        for l in 0..levels {
            let n = p.layers[l].data.len();
            for j in (0..n).step_by(7) {
                let mut lo = p.clone();
                let mut hi = p.clone();
                lo.layers[l].data[j] -= h;
                hi.layers[l].data[j] += h;
                let fd = (loss(&hi, &cfg) - loss(&lo, &cfg)) / (2.0 * h);
                assert_relative_eq!(grads.layers[l][j], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
        // Head parameters.
        for j in 0..3 * dim {
            let mut lo = cfg.clone();
            let mut hi = cfg.clone();
            lo.head.weight[j] -= h;
            hi.head.weight[j] += h;
            let fd = (loss(&p, &hi) - loss(&p, &lo)) / (2.0 * h);
            assert_relative_eq!(grads.head_weight[j], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
        for ch in 0..3 {
            let mut lo = cfg.clone();
            let mut hi = cfg.clone();
            lo.head.bias[ch] -= h;
            hi.head.bias[ch] += h;
            let fd = (loss(&p, &hi) - loss(&p, &lo)) / (2.0 * h);
            assert_relative_eq!(grads.head_bias[ch], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn level_shape_mismatch_is_rejected() {
        let mut p = ImagePyramid::new(8, 8, 2, 2).unwrap();
        p.layers[1] = PyramidLayer::new(3, 3, 2);
        let cfg = ReconstructConfig::new(2);
        assert!(matches!(reconstruct_hdr(&p, &cfg), Err(Error::ShapeMismatch(_))));
        let q = ImagePyramid::new(8, 8, 2, 2).unwrap();
        let bad = ReconstructConfig::new(5);
        assert!(matches!(reconstruct_hdr(&q, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn head_select_rgb_padding() {
        let h3 = AffineHead::select_rgb(4);
        assert_eq!(h3.apply(&[1.0, 2.0, 3.0, 4.0]), [1.0, 2.0, 3.0]);
        let h1 = AffineHead::select_rgb(1);
        assert_eq!(h1.apply(&[0.6]), [0.6, 0.6, 0.6]);
    }
}
