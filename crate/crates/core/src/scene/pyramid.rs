//! Multi-resolution render target: one descriptor image per layer plus the
//! per-pixel statistics the rasterizer and its backward pass need.

use crate::{Error, Result};

/// Layer l has dimensions ceil(w / 2^l) x ceil(h / 2^l).
pub fn layer_dims(width: usize, height: usize, layer: usize) -> (usize, usize) {
    let s = 1usize << layer;
    (width.div_ceil(s), height.div_ceil(s))
}

#[derive(Clone, Debug)]
pub struct PyramidLayer {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// Row-major h x w x dim blended descriptors (environment values where
    /// no point landed).
    pub data: Vec<f64>,
    /// Surviving fragments per pixel; 0 marks background.
    pub counts: Vec<u32>,
    /// Depth-prepass minimum per pixel; +inf exactly where counts == 0.
    pub min_z: Vec<f64>,
}

impl PyramidLayer {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        PyramidLayer {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
            counts: vec![0; width * height],
            min_z: vec![f64::INFINITY; width * height],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (v * self.width + u) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn count(&self, u: usize, v: usize) -> u32 {
        self.counts[v * self.width + u]
    }

    pub fn is_background(&self, u: usize, v: usize) -> bool {
        self.count(u, v) == 0
    }

    /// Structural invariant check used by tests and debug paths.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height * self.dim
            || self.counts.len() != self.width * self.height
            || self.min_z.len() != self.width * self.height
        {
            return Err(Error::ShapeMismatch(format!(
                "layer buffers disagree with {}x{}x{}",
                self.width, self.height, self.dim
            )));
        }
        for (i, &c) in self.counts.iter().enumerate() {
            let z = self.min_z[i];
            if c == 0 && z != f64::INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} empty but min_z = {z}"
                )));
            }
            if c > 0 && !z.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} has {c} fragments but min_z = {z}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub layers: Vec<PyramidLayer>,
}

impl ImagePyramid {
    /// Allocates `num_layers` cleared layers for a base resolution.
    pub fn new(width: usize, height: usize, dim: usize, num_layers: usize) -> Result<Self> {
        if num_layers == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidArgument("pyramid needs >= 1 layer and nonzero base".into()));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let (w, h) = layer_dims(width, height, l);
                PyramidLayer::new(w, h, dim)
            })
            .collect();
        Ok(ImagePyramid { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }
}
