//! Differentiable physically-based tonemapper.
//!
//! HDR radiance passes through exposure, white balance, vignette, and a
//! learned camera response curve, in that order. Every stage has analytic
//! gradients for its parameters and its input, so per-image capture state
//! can be optimized jointly with the scene.

use crate::{Error, Result};
use rayon::prelude::*;

pub const CRF_CONTROL_POINTS: usize = 256;
pub const DEFAULT_LEAK_ALPHA: f64 = 0.01;
/// Weight of the curve's second-difference smoothness penalty.
pub const DEFAULT_CRF_SMOOTHNESS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponseMode {
    /// Clamp outside [0,1]; used when producing final images.
    Inference,
    /// Leak out-of-range values with nonzero slope so gradients can pull
    /// badly exposed pixels back into range.
    Training,
}

/// Per-channel camera response: K control values on a uniform grid over
/// [0,1], evaluated by linear interpolation. Endpoints stay pinned at 0 and
/// 1 and the values stay nondecreasing via `project`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrfCurve {
    pub values: Vec<f64>,
}

impl CrfCurve {
    /// Samples x^gamma; gamma = 0.45 approximates the sRGB encode and is
    /// the standard initialization.
    pub fn gamma_init(k: usize, gamma: f64) -> CrfCurve {
        assert!(k >= 2);
        let values = (0..k)
            .map(|i| (i as f64 / (k - 1) as f64).powf(gamma))
            .collect();
        CrfCurve { values }
    }

    /// Fixed filmic preset for inference-time swapping; not learnable.
    /// Shoulder-and-toe rational curve, normalized to pinned endpoints.
    pub fn filmic(k: usize) -> CrfCurve {
        assert!(k >= 2);
        let f = |x: f64| (x * (6.2 * x + 0.5)) / (x * (6.2 * x + 1.7) + 0.06);
        let top = f(1.0);
        let values = (0..k)
            .map(|i| f(i as f64 / (k - 1) as f64) / top)
            .collect();
        CrfCurve { values }
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// Segment index and barycentric weight for x in [0,1].
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let k = self.values.len();
        let s = x.clamp(0.0, 1.0) * (k - 1) as f64;
        let i = (s.floor() as usize).min(k - 2);
        (i, s - i as f64)
    }

    /// Curve value and slope at x in [0,1].
    #[inline]
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let (i, t) = self.locate(x);
        let (a, b) = (self.values[i], self.values[i + 1]);
        (a + t * (b - a), (b - a) * (self.values.len() - 1) as f64)
    }

    /// Control points touched at x and their interpolation weights, for the
    /// backward pass.
    #[inline]
    pub fn taps(&self, x: f64) -> [(usize, f64); 2] {
        let (i, t) = self.locate(x);
        [(i, 1.0 - t), (i + 1, t)]
    }

    /// Projects onto the constraint set: nondecreasing (pool adjacent
    /// violators, the L2-optimal monotone fit), values in [0,1], endpoints
    /// exactly 0 and 1.
    pub fn project(&mut self) {
        let v = &mut self.values;
        let n = v.len();
        // Pool-adjacent-violators with block bookkeeping.
        let mut means: Vec<f64> = Vec::with_capacity(n);
        let mut sizes: Vec<usize> = Vec::with_capacity(n);
        for i in 0..n {
            means.push(v[i]);
            sizes.push(1);
            while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
                let (mb, sb) = (means.pop().unwrap(), sizes.pop().unwrap());
                let (ma, sa) = (*means.last().unwrap(), *sizes.last().unwrap());
                let s = sa + sb;
                *means.last_mut().unwrap() = (ma * sa as f64 + mb * sb as f64) / s as f64;
                *sizes.last_mut().unwrap() = s;
            }
        }
        let mut out = Vec::with_capacity(n);
        for (m, s) in means.iter().zip(&sizes) {
            out.extend(std::iter::repeat(m.clamp(0.0, 1.0)).take(*s));
        }
        out[0] = 0.0;
        out[n - 1] = 1.0;
        *v = out;
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.values;
        if v.len() < 2 {
            return Err(Error::InvalidArgument("curve needs >= 2 control points".into()));
        }
        if v[0] != 0.0 || *v.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("curve endpoints must be 0 and 1".into()));
        }
        for w in v.windows(2) {
            if !(w[1] >= w[0]) {
                return Err(Error::InvalidArgument("curve must be nondecreasing".into()));
            }
        }
        if !v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("curve values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Second-difference smoothness penalty and its gradient:
    /// lambda * sum_i (v[i-1] - 2 v[i] + v[i+1])^2.
    pub fn smoothness(&self, lambda: f64) -> (f64, Vec<f64>) {
        let v = &self.values;
        let n = v.len();
        let mut penalty = 0.0;
        let mut grad = vec![0.0; n];
        for i in 1..n - 1 {
            let d = v[i - 1] - 2.0 * v[i] + v[i + 1];
            penalty += lambda * d * d;
            grad[i - 1] += 2.0 * lambda * d;
            grad[i] -= 4.0 * lambda * d;
            grad[i + 1] += 2.0 * lambda * d;
        }
        (penalty, grad)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vignette {
    pub a2: f64,
    pub a4: f64,
    pub a6: f64,
    /// Falloff center, normalized image coordinates in [0,1]^2.
    pub cx: f64,
    pub cy: f64,
}

impl Vignette {
    pub fn identity() -> Self {
        Vignette { a2: 0.0, a4: 0.0, a6: 0.0, cx: 0.5, cy: 0.5 }
    }

    /// Squared radius, normalized by the image diagonal so r <= 1 whenever
    /// both p and the center lie inside the unit square.
    #[inline]
    pub fn r2(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.cx;
        let dy = py - self.cy;
        (dx * dx + dy * dy) / 2.0
    }

    #[inline]
    pub fn factor(&self, px: f64, py: f64) -> f64 {
        let r2 = self.r2(px, py);
        1.0 + r2 * (self.a2 + r2 * (self.a4 + r2 * self.a6))
    }
}

/// All learnable capture state: per-frame exposure and white point, shared
/// vignette and response curves.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SensorParams {
    pub ev: Vec<f64>,
    pub white_point: Vec<[f64; 3]>,
    /// Initial green values; the projection step restores them, fixing the
    /// overall image brightness scale.
    pub green_init: Vec<f64>,
    pub vignette: Vignette,
    /// One curve per color channel.
    pub crf: Vec<CrfCurve>,
    pub leak_alpha: f64,
}

impl SensorParams {
    /// Identity exposure/WB/vignette with the standard gamma curve.
    pub fn identity(num_frames: usize, k: usize) -> SensorParams {
        SensorParams {
            ev: vec![0.0; num_frames],
            white_point: vec![[1.0; 3]; num_frames],
            green_init: vec![1.0; num_frames],
            vignette: Vignette::identity(),
            crf: (0..3).map(|_| CrfCurve::gamma_init(k, 0.45)).collect(),
            leak_alpha: DEFAULT_LEAK_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.white_point.len() != self.ev.len() || self.green_init.len() != self.ev.len() {
            return Err(Error::ShapeMismatch("per-frame parameter lengths differ".into()));
        }
        for wp in &self.white_point {
            if !wp.iter().all(|&c| c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("white point {wp:?} must be > 0")));
            }
        }
        if self.crf.len() != 3 {
            return Err(Error::ShapeMismatch(format!("{} response curves, need 3", self.crf.len())));
        }
        for c in &self.crf {
            c.validate()?;
        }
        if !(self.leak_alpha > 0.0) {
            return Err(Error::InvalidArgument("leak_alpha must be > 0".into()));
        }
        if !self.ev.iter().all(|e| e.is_finite()) {
            return Err(Error::NonFinite("exposure value"));
        }
        Ok(())
    }
}

/// Photographic exposure from capture metadata, relative to the dataset
/// mean so the average image needs no correction.
pub fn init_ev(f_number: f64, exposure_time: f64, iso: f64, mean_ev: f64) -> Result<f64> {
    if !(f_number > 0.0 && exposure_time > 0.0 && iso > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "EV inputs must be positive: f={f_number}, t={exposure_time}, S={iso}"
        )));
    }
    Ok((f_number * f_number / exposure_time).log2() + (iso / 100.0).log2() - mean_ev)
}

/// Brightness correction: one stop of EV halves the image. The derivative
/// w.r.t. EV is -ln(2) times the output.
#[inline]
pub fn apply_exposure(value: f64, ev: f64) -> f64 {
    value * (-ev).exp2()
}

/// Camera response in the requested mode. Training leaks out-of-range
/// values: alpha*x below zero, 1 + alpha - alpha/sqrt(x) above one, which
/// is continuous at both joints and bounded by 1 + alpha.
#[inline]
pub fn apply_response(curve: &CrfCurve, x: f64, alpha: f64, mode: ResponseMode) -> f64 {
    match mode {
        ResponseMode::Inference => {
            if x <= 0.0 {
                0.0
            } else if x >= 1.0 {
                1.0
            } else {
                curve.eval(x).0
            }
        }
        ResponseMode::Training => {
            if x < 0.0 {
                alpha * x
            } else if x > 1.0 {
                -alpha / x.sqrt() + alpha + 1.0
            } else {
                curve.eval(x).0
            }
        }
    }
}

/// Slope of `apply_response` at x (curve slope inside [0,1]).
#[inline]
pub fn response_slope(curve: &CrfCurve, x: f64, alpha: f64, mode: ResponseMode) -> f64 {
    match mode {
        ResponseMode::Inference => {
            if x <= 0.0 || x >= 1.0 {
                0.0
            } else {
                curve.eval(x).1
            }
        }
        ResponseMode::Training => {
            if x < 0.0 {
                alpha
            } else if x > 1.0 {
                0.5 * alpha * x.powf(-1.5)
            } else {
                curve.eval(x).1
            }
        }
    }
}

/// Normalized coordinates of a pixel center.
#[inline]
fn normalized_pixel(u: usize, v: usize, width: usize, height: usize) -> (f64, f64) {
    ((u as f64 + 0.5) / width as f64, (v as f64 + 0.5) / height as f64)
}

/// Maps a 3-channel HDR image through the full chain for one frame.
pub fn tonemap_forward(
    hdr: &[f64],
    width: usize,
    height: usize,
    frame: usize,
    p: &SensorParams,
    mode: ResponseMode,
) -> Result<Vec<f64>> {
    if hdr.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!(
            "{} values for {}x{}x3",
            hdr.len(),
            width,
            height
        )));
    }
    let ev = p.ev[frame];
    let wp = p.white_point[frame];
    let mut out = vec![0.0; hdr.len()];
    out.par_chunks_mut(width * 3)
        .enumerate()
        .for_each(|(v, row)| {
            for u in 0..width {
                let (px, py) = normalized_pixel(u, v, width, height);
                let vig = p.vignette.factor(px, py);
                for ch in 0..3 {
                    let x = hdr[(v * width + u) * 3 + ch];
                    let x = apply_exposure(x, ev) / wp[ch] * vig;
                    row[u * 3 + ch] = apply_response(&p.crf[ch], x, p.leak_alpha, mode);
                }
            }
        });
    Ok(out)
}

/// Gradients produced by `tonemap_backward`. Frame-level parameters are
/// scalars summed over the image; `crf` is per channel per control point.
#[derive(Clone, Debug)]
pub struct TonemapGrads {
    pub ev: f64,
    pub white: [f64; 3],
    /// (a2, a4, a6, cx, cy).
    pub vignette: [f64; 5],
    pub crf: Vec<Vec<f64>>,
    pub hdr: Vec<f64>,
}

/// Pulls an adjoint (dL/d output) back through the chain, producing
/// gradients for every parameter group and the HDR input. The green white
/// point is frozen: its gradient is identically zero.
pub fn tonemap_backward(
    hdr: &[f64],
    width: usize,
    height: usize,
    frame: usize,
    p: &SensorParams,
    mode: ResponseMode,
    adjoint: &[f64],
) -> Result<TonemapGrads> {
    if hdr.len() != width * height * 3 || adjoint.len() != hdr.len() {
        return Err(Error::ShapeMismatch("adjoint/image shape mismatch".into()));
    }
    let ev = p.ev[frame];
    let wp = p.white_point[frame];
    let k = p.crf[0].k();
    let mut g = TonemapGrads {
        ev: 0.0,
        white: [0.0; 3],
        vignette: [0.0; 5],
        crf: vec![vec![0.0; k]; 3],
        hdr: vec![0.0; hdr.len()],
    };
    let ln2 = std::f64::consts::LN_2;
    for v in 0..height {
        for u in 0..width {
            let (px, py) = normalized_pixel(u, v, width, height);
            let vig = p.vignette.factor(px, py);
            let r2 = p.vignette.r2(px, py);
            let dx = px - p.vignette.cx;
            let dy = py - p.vignette.cy;
            // d factor / d r2.
            let dfac_dr2 = p.vignette.a2 + r2 * (2.0 * p.vignette.a4 + r2 * 3.0 * p.vignette.a6);
            for ch in 0..3 {
                let idx = (v * width + u) * 3 + ch;
                let x0 = hdr[idx];
                let x1 = apply_exposure(x0, ev);
                let x2 = x1 / wp[ch];
                let x3 = x2 * vig;
                let a = adjoint[idx];
                let slope = response_slope(&p.crf[ch], x3, p.leak_alpha, mode);
                // CRF control points only receive gradient inside [0,1].
                if (0.0..=1.0).contains(&x3) {
                    for (ti, tw) in p.crf[ch].taps(x3) {
                        g.crf[ch][ti] += a * tw;
                    }
                }
                let d3 = a * slope;
                // Vignette parameters.
                g.vignette[0] += d3 * x2 * r2;
                g.vignette[1] += d3 * x2 * r2 * r2;
                g.vignette[2] += d3 * x2 * r2 * r2 * r2;
                g.vignette[3] += d3 * x2 * dfac_dr2 * (-dx);
                g.vignette[4] += d3 * x2 * dfac_dr2 * (-dy);
                let d2 = d3 * vig;
                if ch != 1 {
                    g.white[ch] += d2 * (-x1 / (wp[ch] * wp[ch]));
                }
                let d1 = d2 / wp[ch];
                g.ev += d1 * x1 * (-ln2);
                g.hdr[idx] = d1 * (-ev).exp2();
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn init_ev_examples() {
        assert_relative_eq!(init_ev(1.0, 1.0, 100.0, 0.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(
            init_ev(8.0, 1.0 / 125.0, 100.0, 0.0).unwrap(),
            8000f64.log2(),
            epsilon = 1e-9
        );
        assert_relative_eq!(init_ev(8.0, 1.0 / 125.0, 100.0, 0.0).unwrap(), 12.9658, epsilon = 1e-4);
        assert!(init_ev(0.0, 1.0, 100.0, 0.0).is_err());
        assert!(init_ev(1.0, -1.0, 100.0, 0.0).is_err());
    }

    #[test]
    fn stop_span_is_exponential() {
        // A span of s stops scales the linear output by exactly 2^s.
        let lo = apply_exposure(1.0, 8.7);
        let hi = apply_exposure(1.0, 0.0);
        assert_relative_eq!(hi / lo, 8.7f64.exp2(), max_relative = 1e-12);
        assert_relative_eq!(hi / lo, 415.8732, epsilon = 1e-3);
        // Round trip: a measured linear ratio maps back to its stop count.
        assert_relative_eq!(426.67f64.log2(), 8.737, epsilon = 1e-3);
        assert_relative_eq!(426.67f64.log2().exp2(), 426.67, max_relative = 1e-12);
    }

    #[test]
    fn exposure_examples_and_derivative() {
        assert_eq!(apply_exposure(0.8, 0.0), 0.8);
        assert_relative_eq!(apply_exposure(0.8, 1.0), 0.4, epsilon = 1e-12);
        let h = 1e-6;
        for &(x, ev) in &[(0.8, 1.0), (0.3, -2.0), (1.5, 0.25)] {
            let analytic = -std::f64::consts::LN_2 * apply_exposure(x, ev);
            let fd = (apply_exposure(x, ev + h) - apply_exposure(x, ev - h)) / (2.0 * h);
            assert_relative_eq!(analytic, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn vignette_examples() {
        let id = Vignette::identity();
        assert_eq!(id.factor(0.1, 0.9), 1.0);
        // Center at the origin, pixel at the far corner: r = 1 under the
        // diagonal normalization.
        let v = Vignette { a2: -0.5, a4: 0.0, a6: 0.0, cx: 0.0, cy: 0.0 };
        assert_relative_eq!(v.r2(1.0, 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(v.factor(1.0, 1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn response_curve_examples() {
        let c = CrfCurve::gamma_init(CRF_CONTROL_POINTS, 0.45);
        c.validate().unwrap();
        assert_relative_eq!(
            apply_response(&c, 0.5, 0.01, ResponseMode::Training),
            0.5f64.powf(0.45),
            epsilon = 1e-4
        );
        assert_relative_eq!(apply_response(&c, 0.5, 0.01, ResponseMode::Training), 0.7320, epsilon = 1e-3);
        // Leak arithmetic above 1.
        assert_relative_eq!(
            apply_response(&c, 4.0, 0.01, ResponseMode::Training),
            1.005,
            epsilon = 1e-12
        );
        // Bounded by 1 + alpha in the limit.
        let far = apply_response(&c, 1e12, 0.01, ResponseMode::Training);
        assert!(far < 1.01 && far > 1.0099);
        // Inference clamps.
        assert_eq!(apply_response(&c, -0.3, 0.01, ResponseMode::Inference), 0.0);
        assert_eq!(apply_response(&c, 4.0, 0.01, ResponseMode::Inference), 1.0);
    }

    #[test]
    fn training_response_is_continuous_at_joints() {
        let c = CrfCurve::gamma_init(64, 0.45);
        let eps = 1e-9;
        let below = apply_response(&c, -eps, 0.01, ResponseMode::Training);
        let at0 = apply_response(&c, 0.0, 0.01, ResponseMode::Training);
        let above1 = apply_response(&c, 1.0 + eps, 0.01, ResponseMode::Training);
        let at1 = apply_response(&c, 1.0, 0.01, ResponseMode::Training);
        assert!((below - at0).abs() < 1e-8);
        assert!((above1 - at1).abs() < 1e-8);
        // Bounded above by 1 + alpha everywhere.
        for i in -100..2000 {
            let x = i as f64 * 0.01;
            assert!(apply_response(&c, x, 0.01, ResponseMode::Training) <= 1.01);
        }
    }

    #[test]
    fn projection_restores_invariants() {
        let mut c = CrfCurve::gamma_init(16, 0.45);
        // Knock the curve out of shape.
        c.values[3] = 0.9;
        c.values[4] = 0.1;
        c.values[0] = -0.2;
        c.values[15] = 1.3;
        c.project();
        c.validate().unwrap();
        // PAV oracle on a hand-checked 5-point case.
        let mut c5 = CrfCurve { values: vec![0.0, 0.5, 0.3, 0.4, 1.0] };
        c5.project();
        assert_eq!(c5.values, vec![0.0, 0.4, 0.4, 0.4, 1.0]);
    }

    #[test]
    fn projection_is_identity_on_feasible_curves() {
        let mut c = CrfCurve::gamma_init(64, 0.45);
        let before = c.values.clone();
        c.project();
        assert_eq!(c.values, before);
    }

    #[test]
    fn smoothness_gradient_matches_fd() {
        let c = CrfCurve::gamma_init(12, 0.45);
        let lambda = 1e-3;
        let (_, grad) = c.smoothness(lambda);
        let h = 1e-6;
        for i in 0..12 {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp.values[i] += h;
            cm.values[i] -= h;
            let fd = (cp.smoothness(lambda).0 - cm.smoothness(lambda).0) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-8, "point {i}: {} vs {fd}", grad[i]);
        }
    }

    fn test_image(w: usize, h: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..w * h * 3)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                // Span below 0.. above 1 to exercise the leak regions.
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 1.6 - 0.1
            })
            .collect()
    }

    fn rich_params(frames: usize) -> SensorParams {
        let mut p = SensorParams::identity(frames, 32);
        p.ev[0] = 0.35;
        p.white_point[0] = [1.2, 1.0, 0.85];
        p.vignette = Vignette { a2: -0.3, a4: 0.08, a6: -0.01, cx: 0.45, cy: 0.55 };
        p
    }

    #[test]
    fn identity_params_reduce_to_gamma() {
        let p = SensorParams::identity(1, CRF_CONTROL_POINTS);
        // Piecewise-linear interpolation of x^0.45 undershoots between knots,
        // worst near zero where the curve is steepest.
        let hdr: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 97) as f64 / 96.0).collect();
        let out = tonemap_forward(&hdr, 16, 16, 0, &p, ResponseMode::Inference).unwrap();
        for (o, x) in out.iter().zip(&hdr) {
            assert_relative_eq!(*o, x.powf(0.45), epsilon = 2e-3);
        }
        // At the knots themselves the curve is exact.
        let k = CRF_CONTROL_POINTS;
        let nodes: Vec<f64> = (0..k * 3).map(|i| (i / 3) as f64 / (k - 1) as f64).collect();
        let node_out = tonemap_forward(&nodes, k, 1, 0, &p, ResponseMode::Inference).unwrap();
        for (o, x) in node_out.iter().zip(&nodes) {
            assert_relative_eq!(*o, x.powf(0.45), epsilon = 1e-12);
        }
    }

    #[test]
    fn white_balance_example_and_frozen_green() {
        let mut p = SensorParams::identity(1, 8);
        // Linear ramp curve isolates the white-balance arithmetic.
        p.crf = (0..3).map(|_| CrfCurve::gamma_init(8, 1.0)).collect();
        p.white_point[0] = [2.0, 1.0, 1.0];
        let hdr = vec![0.8, 0.5, 0.5];
        let out = tonemap_forward(&hdr, 1, 1, 0, &p, ResponseMode::Training).unwrap();
        assert_relative_eq!(out[0], 0.4, epsilon = 1e-9);
        assert_relative_eq!(out[1], 0.5, epsilon = 1e-9);
        assert_relative_eq!(out[2], 0.5, epsilon = 1e-9);

        let g = tonemap_backward(&hdr, 1, 1, 0, &p, ResponseMode::Training, &[1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(g.white[1], 0.0, "green white point is frozen");
        assert!(g.white[0] != 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (w, h) = (8, 8);
        let hdr = test_image(w, h, 21);
        let p = rich_params(2);
        let mode = ResponseMode::Training;
        // Scalar loss: weighted sum with fixed weights, so dL/dout is known.
        let weights: Vec<f64> = test_image(w, h, 99).iter().map(|v| v + 0.2).collect();
        let loss = |params: &SensorParams, image: &[f64]| -> f64 {
            tonemap_forward(image, w, h, 0, params, mode)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(o, wt)| o * wt)
                .sum()
        };
        let g = tonemap_backward(&hdr, w, h, 0, &p, mode, &weights).unwrap();
        let fh = 1e-6;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = fd.abs().max(1e-7 / 1e-4);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };

        let mut pp = p.clone();
        pp.ev[0] += fh;
        let mut pm = p.clone();
        pm.ev[0] -= fh;
        check(g.ev, (loss(&pp, &hdr) - loss(&pm, &hdr)) / (2.0 * fh), "ev");

        for ch in [0usize, 2] {
            let mut pp = p.clone();
            pp.white_point[0][ch] += fh;
            let mut pm = p.clone();
            pm.white_point[0][ch] -= fh;
            check(
                g.white[ch],
                (loss(&pp, &hdr) - loss(&pm, &hdr)) / (2.0 * fh),
                &format!("white[{ch}]"),
            );
        }

        for (vi, name) in ["a2", "a4", "a6", "cx", "cy"].iter().enumerate() {
            let tweak = |p: &SensorParams, d: f64| {
                let mut q = p.clone();
                match vi {
                    0 => q.vignette.a2 += d,
                    1 => q.vignette.a4 += d,
                    2 => q.vignette.a6 += d,
                    3 => q.vignette.cx += d,
                    _ => q.vignette.cy += d,
                }
                q
            };
            check(
                g.vignette[vi],
                (loss(&tweak(&p, fh), &hdr) - loss(&tweak(&p, -fh), &hdr)) / (2.0 * fh),
                name,
            );
        }

        // A spread of CRF control points on each channel.
        for ch in 0..3 {
            for i in [1usize, 7, 15, 30] {
                let mut pp = p.clone();
                pp.crf[ch].values[i] += fh;
                let mut pm = p.clone();
                pm.crf[ch].values[i] -= fh;
                check(
                    g.crf[ch][i],
                    (loss(&pp, &hdr) - loss(&pm, &hdr)) / (2.0 * fh),
                    &format!("crf[{ch}][{i}]"),
                );
            }
        }

        // Input image gradient on a sample of pixels.
        for idx in [0usize, 5, 50, 100, 191] {
            let mut ip = hdr.clone();
            ip[idx] += fh;
            let mut im = hdr.clone();
            im[idx] -= fh;
            check(
                g.hdr[idx],
                (loss(&p, &ip) - loss(&p, &im)) / (2.0 * fh),
                &format!("hdr[{idx}]"),
            );
        }
    }

    #[test]
    fn filmic_preset_is_a_valid_curve() {
        let c = CrfCurve::filmic(CRF_CONTROL_POINTS);
        c.validate().unwrap();
        // S-shaped: brighter than linear in the mid-tones.
        assert!(c.eval(0.5).0 > 0.5);
    }
}
