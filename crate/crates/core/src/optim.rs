//! First-order parameter updates: bias-corrected Adam per parameter
//! group, tangent-space pose steps, image losses, and post-step
//! feasibility projection.

use serde::{Deserialize, Serialize};

use crate::geometry::{apply_tangent, Pose, PoseTangent};
use crate::tonemap::SensorParams;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment decay and damping constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: ADAM_BETA1, beta2: ADAM_BETA2, epsilon: ADAM_EPSILON }
    }
}

/// Which parameter groups an optimization run may touch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezeFlags {
    pub texture: bool,
    pub environment: bool,
    pub position: bool,
    pub pose: bool,
    pub intrinsics: bool,
    pub sensor: bool,
    pub head: bool,
}

impl Default for FreezeFlags {
    fn default() -> Self {
        FreezeFlags {
            texture: false,
            environment: false,
            position: true,
            pose: false,
            intrinsics: false,
            sensor: false,
            head: false,
        }
    }
}

impl FreezeFlags {
    pub fn all_frozen() -> Self {
        FreezeFlags {
            texture: true,
            environment: true,
            position: true,
            pose: true,
            intrinsics: true,
            sensor: true,
            head: true,
        }
    }

    pub fn only_pose() -> Self {
        FreezeFlags { pose: false, ..Self::all_frozen() }
    }

    pub fn only_texture() -> Self {
        FreezeFlags { texture: false, environment: false, ..Self::all_frozen() }
    }
}

/// Learning rates and run shape. Rates are this project's tuned defaults.
/// Descriptors stored in log space train at a tenth of the linear rate;
/// positions use a small rate scaled by the scene diagonal, kept low
/// because position updates destabilize easily.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_texture: f64,
    /// Multiplier applied to `lr_texture` for log-space descriptors.
    pub log_texture_scale: f64,
    /// Per unit of scene bounding-box diagonal.
    pub lr_position: f64,
    pub lr_pose: f64,
    pub lr_intrinsics: f64,
    pub lr_sensor: f64,
    pub lr_head: f64,
    pub adam: AdamHyper,
    pub freeze: FreezeFlags,
    /// Curve smoothness penalty added to the response-curve gradient.
    pub crf_smoothness: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub loss: LossKind,
    /// Epoch-level learning-rate schedule over the run's epoch budget.
    pub lr_decay: LrDecay,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_texture: 2e-2,
            log_texture_scale: 0.1,
            lr_position: 1e-4,
            lr_pose: 1e-3,
            lr_intrinsics: 1e-3,
            lr_sensor: 2e-3,
            lr_head: 2e-3,
            adam: AdamHyper::default(),
            freeze: FreezeFlags::default(),
            crf_smoothness: crate::tonemap::DEFAULT_CRF_SMOOTHNESS,
            epochs: 100,
            dropout_rate: crate::autodiff::DEFAULT_DROPOUT_RATE,
            loss: LossKind::Mse,
            lr_decay: LrDecay::Cosine,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Constant,
    Cosine,
}

/// Per-epoch multiplier on every group's learning rate. Cosine anneals
/// from 1 toward 0 across the epoch budget so stochastic-gradient jitter
/// freezes out by the end of the run.
pub fn lr_scale(decay: LrDecay, epoch: usize, total_epochs: usize) -> f64 {
    match decay {
        LrDecay::Constant => 1.0,
        LrDecay::Cosine => {
            if total_epochs == 0 {
                return 1.0;
            }
            let t = (epoch as f64 / total_epochs as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_texture,
            self.log_texture_scale,
            self.lr_position,
            self.lr_pose,
            self.lr_intrinsics,
            self.lr_sensor,
            self.lr_head,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument("learning rates must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Adam first/second moments plus the step counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One in-place Adam update. A non-finite gradient skips the step
/// entirely, leaving parameters, moments and the counter untouched;
/// returns whether the step was applied.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<bool> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::ShapeMismatch(format!(
            "param {} / grad {} / state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..param.len() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * grad[i];
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + hyper.epsilon);
    }
    Ok(true)
}

/// Pose update in the tangent space: Adam produces an se(3) increment
/// from a zero tangent (moments persist across steps), the increment is
/// composed onto the pose, and the rotation is re-orthonormalized.
pub fn step_pose(
    pose: &Pose,
    grad: &PoseTangent,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(Pose, bool)> {
    let mut xi = [0.0f64; 6];
    let stepped = adam_step(&mut xi, &grad.0, state, lr, hyper)?;
    if !stepped || xi == [0.0; 6] {
        return Ok((pose.clone(), stepped));
    }
    let mut next = apply_tangent(&PoseTangent(xi), pose)?;
    next.reorthonormalize();
    Ok((next, true))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossKind> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "mse" | "l2" => Ok(LossKind::Mse),
            other => Err(Error::InvalidArgument(format!("unknown loss kind {other:?}"))),
        }
    }
}

pub struct LossResult {
    pub value: f64,
    /// dL/d pred, same shape as the inputs.
    pub adjoint: Vec<f64>,
}

/// Mean-reduced image loss and its exact adjoint.
pub fn loss(pred: &[f64], gt: &[f64], kind: LossKind) -> Result<LossResult> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("loss over {} vs {} values", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut adjoint = vec![0.0; pred.len()];
    match kind {
        LossKind::L1 => {
            for i in 0..pred.len() {
                let d = pred[i] - gt[i];
                value += d.abs();
                adjoint[i] = if d == 0.0 { 0.0 } else { d.signum() / n };
            }
        }
        LossKind::Mse => {
            for i in 0..pred.len() {
                let d = pred[i] - gt[i];
                value += d * d;
                adjoint[i] = 2.0 * d / n;
            }
        }
    }
    Ok(LossResult { value: value / n, adjoint })
}

pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio against a unit peak, capped at 99 dB.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    let mse = loss(pred, gt, LossKind::Mse)?.value;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Restores sensor feasibility after a gradient step: the green white
/// point returns to its initial value (fixing global brightness scale)
/// and each response curve is projected back to a monotone [0,1] curve
/// with pinned endpoints.
pub fn project_constraints(params: &mut SensorParams) {
    for (wp, &g) in params.white_point.iter_mut().zip(&params.green_init) {
        wp[1] = g;
    }
    for crf in &mut params.crf {
        crf.project();
    }
}
