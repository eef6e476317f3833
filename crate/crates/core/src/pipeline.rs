//! End-to-end refinement: render, reconstruct, tonemap, compare, push the
//! loss back through every stage, and update all unfrozen parameter
//! groups. Also evaluation, checkpointing, and the pose-noise recovery
//! experiment comparing ghost and direct structural gradients.

use std::io::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{
    backprop_structural, backward_frame, ghost_split, render_forward, BackwardConfig, GhostSplit,
    GradientBundle, RenderState,
};
use crate::geometry::{apply_tangent, Pose, PoseTangent, INTRINSIC_PARAMS};
use crate::io::{config_hash, Checkpoint};
use crate::optim::{
    adam_step, loss, lr_scale, project_constraints, psnr, step_pose, AdamState, LossKind,
    OptimConfig,
};
use crate::raster::RasterConfig;
use crate::reconstruct::{reconstruct_hdr, ReconstructConfig, Reconstruction};
use crate::rng::{key_bits, key_uniform, Stream};
use crate::scene::{bounding_box, DescriptorSpace, Scene};
use crate::tonemap::{
    init_ev, tonemap_backward, tonemap_forward, ResponseMode, SensorParams, TonemapGrads,
    CRF_CONTROL_POINTS,
};
use crate::{Error, Result};

pub const DEFAULT_TEST_FRACTION: f64 = 0.05;

/// Everything the optimizer can touch: scene geometry and appearance,
/// sensor model, and the descriptor-to-color head.
#[derive(Clone, Debug)]
pub struct Model {
    pub scene: Scene,
    pub sensor: SensorParams,
    pub recon: ReconstructConfig,
}

impl Model {
    /// Identity sensor and head; per-frame exposure initialized from the
    /// capture metadata, centered so exposure and texture brightness stay
    /// separable.
    pub fn new(scene: Scene) -> Result<Model> {
        let mut sensor = SensorParams::identity(scene.frames.len(), CRF_CONTROL_POINTS);
        let mean_ev = scene.frames.iter().map(|f| f.exif.exposure_value()).sum::<f64>()
            / scene.frames.len().max(1) as f64;
        for (slot, frame) in sensor.ev.iter_mut().zip(&scene.frames) {
            let e = &frame.exif;
            *slot = init_ev(e.f_number, e.exposure_time, e.iso, mean_ev)?;
        }
        let recon = ReconstructConfig::new(scene.cloud.descriptor_dim);
        Ok(Model { scene, sensor, recon })
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = bounding_box(&self.scene.cloud.positions);
        let d = (hi - lo).norm();
        if d > 0.0 {
            d
        } else {
            1.0
        }
    }

    pub fn frame_image_size(&self, frame_idx: usize) -> (usize, usize) {
        let cam = self.scene.camera_for(&self.scene.frames[frame_idx]);
        (cam.width as usize, cam.height as usize)
    }
}

/// Forward pass products for one frame.
pub struct FrameRender {
    pub state: RenderState,
    pub rec: Reconstruction,
    pub ldr: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

pub fn render_frame(
    model: &Model,
    frame_idx: usize,
    raster: &RasterConfig,
    split: Option<&GhostSplit>,
    mode: ResponseMode,
) -> Result<FrameRender> {
    let frame = &model.scene.frames[frame_idx];
    let (width, height) = model.frame_image_size(frame_idx);
    let state = render_forward(&model.scene, frame, raster, split)?;
    let rec = reconstruct_hdr(&state.pyramid, &model.recon)?;
    let ldr = tonemap_forward(&rec.hdr, width, height, frame_idx, &model.sensor, mode)?;
    Ok(FrameRender { state, rec, ldr, width, height })
}

/// Gradients of the image stages: sensor parameters, reconstruction head,
/// and the per-layer adjoints feeding the rasterizer backward pass.
pub struct ChainGrads {
    pub sensor: TonemapGrads,
    pub head_weight: Vec<f64>,
    pub head_bias: [f64; 3],
    pub layers: Vec<Vec<f64>>,
}

/// Pulls an LDR adjoint back to pyramid-layer adjoints.
pub fn backward_to_layers(
    model: &Model,
    frame_idx: usize,
    fr: &FrameRender,
    adjoint_ldr: &[f64],
    mode: ResponseMode,
) -> Result<ChainGrads> {
    let mut sensor = tonemap_backward(
        &fr.rec.hdr,
        fr.width,
        fr.height,
        frame_idx,
        &model.sensor,
        mode,
        adjoint_ldr,
    )?;
    let rg = fr.rec.backward(&fr.state.pyramid, &model.recon, &sensor.hdr)?;
    sensor.hdr = Vec::new();
    Ok(ChainGrads {
        sensor,
        head_weight: rg.head_weight,
        head_bias: rg.head_bias,
        layers: rg.layers,
    })
}

/// Complete per-step gradients for every parameter group.
pub struct FullGrads {
    pub raster: GradientBundle,
    pub sensor: TonemapGrads,
    pub head_weight: Vec<f64>,
    pub head_bias: [f64; 3],
}

pub struct StepOutcome {
    pub loss: f64,
    pub psnr: f64,
    pub grads: FullGrads,
}

/// One training forward/backward pass against a ground-truth LDR image.
pub fn frame_gradients(
    model: &Model,
    frame_idx: usize,
    raster: &RasterConfig,
    bwd: &BackwardConfig,
    split: &GhostSplit,
    gt_ldr: &[f64],
    kind: LossKind,
    mode: ResponseMode,
) -> Result<(FrameRender, StepOutcome)> {
    let fr = render_frame(model, frame_idx, raster, Some(split), mode)?;
    let lr = loss(&fr.ldr, gt_ldr, kind)?;
    if !lr.value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let quality = psnr(&fr.ldr, gt_ldr)?;
    let chain = backward_to_layers(model, frame_idx, &fr, &lr.adjoint, mode)?;
    let bundle = backward_frame(
        &model.scene,
        &model.scene.frames[frame_idx],
        raster,
        bwd,
        &fr.state,
        split,
        &chain.layers,
    )?;
    let grads = FullGrads {
        raster: bundle,
        sensor: chain.sensor,
        head_weight: chain.head_weight,
        head_bias: chain.head_bias,
    };
    Ok((fr, StepOutcome { loss: lr.value, psnr: quality, grads }))
}

/// Adam moments for every parameter group.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub texture: AdamState,
    pub environment: AdamState,
    pub position: AdamState,
    pub poses: Vec<AdamState>,
    pub intrinsics: Vec<AdamState>,
    pub ev: Vec<AdamState>,
    pub white: Vec<AdamState>,
    pub vignette: AdamState,
    pub crf: Vec<AdamState>,
    pub head_weight: AdamState,
    pub head_bias: AdamState,
}

impl OptimizerState {
    pub fn new(model: &Model) -> OptimizerState {
        let n = model.scene.cloud.len();
        let dim = model.scene.cloud.descriptor_dim;
        let frames = model.scene.frames.len();
        let k = model.sensor.crf[0].values.len();
        OptimizerState {
            texture: AdamState::new(n * dim),
            environment: AdamState::new(model.scene.env.texels.len()),
            position: AdamState::new(n * 3),
            poses: (0..frames).map(|_| AdamState::new(6)).collect(),
            intrinsics: (0..model.scene.cameras.len())
                .map(|_| AdamState::new(INTRINSIC_PARAMS))
                .collect(),
            ev: (0..frames).map(|_| AdamState::new(1)).collect(),
            white: (0..frames).map(|_| AdamState::new(3)).collect(),
            vignette: AdamState::new(5),
            crf: (0..3).map(|_| AdamState::new(k)).collect(),
            head_weight: AdamState::new(model.recon.head.weight.len()),
            head_bias: AdamState::new(3),
        }
    }
}

/// Applies one step of gradients to every unfrozen group, then projects
/// the sensor back to feasibility. `lr_mul` is the schedule multiplier
/// for this epoch.
pub fn apply_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    grads: &FullGrads,
    frame_idx: usize,
    cfg: &OptimConfig,
    lr_mul: f64,
) -> Result<()> {
    let hyper = &cfg.adam;
    let fz = &cfg.freeze;
    if !fz.texture {
        let lr = lr_mul
            * match model.scene.cloud.descriptor_space {
                DescriptorSpace::Linear => cfg.lr_texture,
                DescriptorSpace::Logarithmic => cfg.lr_texture * cfg.log_texture_scale,
            };
        adam_step(
            &mut model.scene.cloud.descriptors,
            &grads.raster.d_tau,
            &mut opt.texture,
            lr,
            hyper,
        )?;
    }
    if !fz.environment {
        adam_step(
            &mut model.scene.env.texels,
            &grads.raster.d_env,
            &mut opt.environment,
            lr_mul * cfg.lr_texture,
            hyper,
        )?;
    }
    if !fz.position {
        let lr = lr_mul * cfg.lr_position * model.diagonal();
        let mut flat: Vec<f64> = model
            .scene
            .cloud
            .positions
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect();
        let grad: Vec<f64> = grads.raster.d_x.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
        adam_step(&mut flat, &grad, &mut opt.position, lr, hyper)?;
        for (p, c) in model.scene.cloud.positions.iter_mut().zip(flat.chunks_exact(3)) {
            *p = nalgebra::Vector3::new(c[0], c[1], c[2]);
        }
    }
    if !fz.pose {
        let (next, _) = step_pose(
            &model.scene.frames[frame_idx].pose,
            &grads.raster.d_pose,
            &mut opt.poses[frame_idx],
            lr_mul * cfg.lr_pose,
            hyper,
        )?;
        model.scene.frames[frame_idx].pose = next;
    }
    if !fz.intrinsics {
        let cam_id = model.scene.frames[frame_idx].camera_id;
        let mut v = model.scene.cameras[cam_id].intrinsics_vec().to_vec();
        adam_step(
            &mut v,
            &grads.raster.d_intrinsics,
            &mut opt.intrinsics[cam_id],
            lr_mul * cfg.lr_intrinsics,
            hyper,
        )?;
        let arr: [f64; INTRINSIC_PARAMS] = v.try_into().unwrap();
        model.scene.cameras[cam_id].set_intrinsics_vec(&arr);
    }
    if !fz.sensor {
        adam_step(
            &mut model.sensor.ev[frame_idx..frame_idx + 1],
            &[grads.sensor.ev],
            &mut opt.ev[frame_idx],
            lr_mul * cfg.lr_sensor,
            hyper,
        )?;
        adam_step(
            &mut model.sensor.white_point[frame_idx],
            &grads.sensor.white,
            &mut opt.white[frame_idx],
            lr_mul * cfg.lr_sensor,
            hyper,
        )?;
        let vg = &mut model.sensor.vignette;
        let mut v = [vg.a2, vg.a4, vg.a6, vg.cx, vg.cy];
        adam_step(&mut v, &grads.sensor.vignette, &mut opt.vignette, lr_mul * cfg.lr_sensor, hyper)?;
        [vg.a2, vg.a4, vg.a6, vg.cx, vg.cy] = v;
        for ch in 0..3 {
            let curve = &mut model.sensor.crf[ch];
            let (_, smooth_grad) = curve.smoothness(cfg.crf_smoothness);
            let grad: Vec<f64> = grads.sensor.crf[ch]
                .iter()
                .zip(&smooth_grad)
                .map(|(a, b)| a + b)
                .collect();
            adam_step(&mut curve.values, &grad, &mut opt.crf[ch], lr_mul * cfg.lr_sensor, hyper)?;
        }
    }
    if !fz.head {
        adam_step(
            &mut model.recon.head.weight,
            &grads.head_weight,
            &mut opt.head_weight,
            lr_mul * cfg.lr_head,
            hyper,
        )?;
        adam_step(
            &mut model.recon.head.bias,
            &grads.head_bias,
            &mut opt.head_bias,
            lr_mul * cfg.lr_head,
            hyper,
        )?;
    }
    project_constraints(&mut model.sensor);
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct GradNorms {
    pub texture: f64,
    pub environment: f64,
    pub position: f64,
    pub pose: f64,
    pub intrinsics: f64,
    pub sensor: f64,
    pub head: f64,
}

impl GradNorms {
    fn of(g: &FullGrads) -> GradNorms {
        let position = g.raster.d_x.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        let sensor2 = g.sensor.ev * g.sensor.ev
            + g.sensor.white.iter().map(|v| v * v).sum::<f64>()
            + g.sensor.vignette.iter().map(|v| v * v).sum::<f64>()
            + g.sensor.crf.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        let head2 = g.head_weight.iter().map(|v| v * v).sum::<f64>()
            + g.head_bias.iter().map(|v| v * v).sum::<f64>();
        GradNorms {
            texture: l2(&g.raster.d_tau),
            environment: l2(&g.raster.d_env),
            position,
            pose: l2(&g.raster.d_pose.0),
            intrinsics: l2(&g.raster.d_intrinsics),
            sensor: sensor2.sqrt(),
            head: head2.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepStats {
    pub epoch: usize,
    pub step: usize,
    pub frame: usize,
    pub loss: f64,
    pub psnr: f64,
    pub grad: GradNorms,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_psnr: f64,
    pub steps: Vec<StepStats>,
}

/// Deterministic epoch-keyed permutation of the training order.
fn shuffled(frames: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = frames.to_vec();
    for i in (1..order.len()).rev() {
        let j = (key_bits(seed, Stream::Shuffle, epoch, i as u64) % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// One pass over the training frames: fresh dropout split per step, one
/// Adam update per parameter group per step.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    gt: &[Vec<f64>],
    train: &[usize],
    raster: &RasterConfig,
    cfg: &OptimConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if gt.len() != model.scene.frames.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth images for {} frames",
            gt.len(),
            model.scene.frames.len()
        )));
    }
    let bwd = BackwardConfig::default();
    let lr_mul = lr_scale(cfg.lr_decay, epoch, cfg.epochs);
    let order = shuffled(train, cfg.seed, epoch as u64);
    let mut steps = Vec::with_capacity(order.len());
    for (si, &frame_idx) in order.iter().enumerate() {
        let split_seed = key_bits(cfg.seed, Stream::Ghost, epoch as u64, si as u64);
        let split = ghost_split(model.scene.cloud.len(), cfg.dropout_rate, split_seed)?;
        let (_, out) = frame_gradients(
            model,
            frame_idx,
            raster,
            &bwd,
            &split,
            &gt[frame_idx],
            cfg.loss,
            ResponseMode::Training,
        )?;
        apply_step(model, opt, &out.grads, frame_idx, cfg, lr_mul)?;
        steps.push(StepStats {
            epoch,
            step: si,
            frame: frame_idx,
            loss: out.loss,
            psnr: out.psnr,
            grad: GradNorms::of(&out.grads),
        });
    }
    let n = steps.len().max(1) as f64;
    Ok(EpochStats {
        epoch,
        mean_loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
        mean_psnr: steps.iter().map(|s| s.psnr).sum::<f64>() / n,
        steps,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub l1: f64,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsTable {
    pub frames: Vec<FrameMetrics>,
    pub mean_l1: f64,
    pub mean_mse: f64,
    pub mean_psnr: f64,
}

/// Deterministic inference-mode evaluation; frames render in parallel.
pub fn evaluate(
    model: &Model,
    gt: &[Vec<f64>],
    frames: &[usize],
    raster: &RasterConfig,
) -> Result<MetricsTable> {
    let rows: Result<Vec<FrameMetrics>> = frames
        .par_iter()
        .map(|&frame_idx| {
            let fr = render_frame(model, frame_idx, raster, None, ResponseMode::Inference)?;
            let l1 = loss(&fr.ldr, &gt[frame_idx], LossKind::L1)?.value;
            let mse = loss(&fr.ldr, &gt[frame_idx], LossKind::Mse)?.value;
            let quality = psnr(&fr.ldr, &gt[frame_idx])?;
            Ok(FrameMetrics { frame: frame_idx, l1, mse, psnr: quality })
        })
        .collect();
    let frames = rows?;
    let n = frames.len().max(1) as f64;
    Ok(MetricsTable {
        mean_l1: frames.iter().map(|f| f.l1).sum::<f64>() / n,
        mean_mse: frames.iter().map(|f| f.mse).sum::<f64>() / n,
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        frames,
    })
}

/// Renders every frame in inference mode, the pipeline's own ground
/// truth for closed-loop experiments.
pub fn bake_ground_truth(model: &Model, raster: &RasterConfig) -> Result<Vec<Vec<f64>>> {
    (0..model.scene.frames.len())
        .into_par_iter()
        .map(|i| Ok(render_frame(model, i, raster, None, ResponseMode::Inference)?.ldr))
        .collect()
}

/// Seeded train/test partition; at least one test frame whenever more
/// than one frame exists.
pub fn split_train_test(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..n).collect();
    if n < 2 || fraction <= 0.0 {
        return (all, Vec::new());
    }
    let order = shuffled(&all, seed, u64::MAX);
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut test: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Digest of per-frame parameters (pose, exposure, white point); held
/// frames must keep theirs bit-identical through refinement.
pub fn frame_params_hash(model: &Model, frames: &[usize]) -> String {
    let mut bytes = Vec::new();
    for &i in frames {
        let pose = &model.scene.frames[i].pose;
        for r in 0..3 {
            for c in 0..3 {
                bytes.extend_from_slice(&pose.rotation[(r, c)].to_le_bytes());
            }
        }
        for c in 0..3 {
            bytes.extend_from_slice(&pose.translation[c].to_le_bytes());
        }
        bytes.extend_from_slice(&model.sensor.ev[i].to_le_bytes());
        for v in model.sensor.white_point[i] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    config_hash(&bytes)
}

/// Binds a checkpoint to the run settings that produced it.
pub fn run_config_hash(raster: &RasterConfig, optim: &OptimConfig) -> String {
    let blob = serde_json::json!({ "raster": raster, "optim": optim });
    config_hash(blob.to_string().as_bytes())
}

fn pack_adam(ckpt: &mut Checkpoint, name: &str, st: &AdamState) {
    ckpt.tensors.insert(format!("adam.{name}.m"), st.m.clone());
    ckpt.tensors.insert(format!("adam.{name}.v"), st.v.clone());
    ckpt.counters.insert(format!("adam.{name}.t"), st.t);
}

fn unpack_adam(ckpt: &Checkpoint, name: &str, st: &mut AdamState) -> Result<()> {
    let m = ckpt.tensor(&format!("adam.{name}.m"))?;
    let v = ckpt.tensor(&format!("adam.{name}.v"))?;
    if m.len() != st.m.len() || v.len() != st.v.len() {
        return Err(Error::ShapeMismatch(format!("adam state {name} has wrong length")));
    }
    st.m.copy_from_slice(m);
    st.v.copy_from_slice(v);
    st.t = ckpt.counter(&format!("adam.{name}.t"))?;
    Ok(())
}

/// Snapshot of every trainable tensor plus optimizer moments.
pub fn pack_checkpoint(
    model: &Model,
    opt: &OptimizerState,
    epoch: usize,
    cfg_hash: &str,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(epoch, cfg_hash.to_string());
    let t = &mut ckpt.tensors;
    t.insert("cloud.descriptors".into(), model.scene.cloud.descriptors.clone());
    t.insert(
        "cloud.positions".into(),
        model.scene.cloud.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    );
    t.insert("env.texels".into(), model.scene.env.texels.clone());
    let mut poses = Vec::with_capacity(model.scene.frames.len() * 12);
    for f in &model.scene.frames {
        for r in 0..3 {
            for c in 0..3 {
                poses.push(f.pose.rotation[(r, c)]);
            }
        }
        poses.extend([f.pose.translation.x, f.pose.translation.y, f.pose.translation.z]);
    }
    t.insert("frames.poses".into(), poses);
    t.insert(
        "cameras.intrinsics".into(),
        model.scene.cameras.iter().flat_map(|c| c.intrinsics_vec()).collect(),
    );
    t.insert("sensor.ev".into(), model.sensor.ev.clone());
    t.insert("sensor.white".into(), model.sensor.white_point.iter().flatten().copied().collect());
    t.insert("sensor.green_init".into(), model.sensor.green_init.clone());
    let vg = &model.sensor.vignette;
    t.insert("sensor.vignette".into(), vec![vg.a2, vg.a4, vg.a6, vg.cx, vg.cy]);
    t.insert(
        "sensor.crf".into(),
        model.sensor.crf.iter().flat_map(|c| c.values.iter().copied()).collect(),
    );
    t.insert("head.weight".into(), model.recon.head.weight.clone());
    t.insert("head.bias".into(), model.recon.head.bias.to_vec());

    pack_adam(&mut ckpt, "texture", &opt.texture);
    pack_adam(&mut ckpt, "environment", &opt.environment);
    pack_adam(&mut ckpt, "position", &opt.position);
    for (i, st) in opt.poses.iter().enumerate() {
        pack_adam(&mut ckpt, &format!("pose.{i}"), st);
    }
    for (i, st) in opt.intrinsics.iter().enumerate() {
        pack_adam(&mut ckpt, &format!("intrinsics.{i}"), st);
    }
    for (i, st) in opt.ev.iter().enumerate() {
        pack_adam(&mut ckpt, &format!("ev.{i}"), st);
    }
    for (i, st) in opt.white.iter().enumerate() {
        pack_adam(&mut ckpt, &format!("white.{i}"), st);
    }
    pack_adam(&mut ckpt, "vignette", &opt.vignette);
    for (ch, st) in opt.crf.iter().enumerate() {
        pack_adam(&mut ckpt, &format!("crf.{ch}"), st);
    }
    pack_adam(&mut ckpt, "head_weight", &opt.head_weight);
    pack_adam(&mut ckpt, "head_bias", &opt.head_bias);
    ckpt
}

/// Restores a checkpoint into a structurally matching model; shapes come
/// from the scene manifest, values from the checkpoint. Returns the epoch
/// to resume from.
pub fn unpack_checkpoint(
    ckpt: &Checkpoint,
    model: &mut Model,
    opt: &mut OptimizerState,
    expect_hash: &str,
) -> Result<usize> {
    if ckpt.config_hash != expect_hash {
        return Err(Error::Config(format!(
            "checkpoint was produced under a different configuration ({} vs {})",
            ckpt.config_hash, expect_hash
        )));
    }
    let take = |name: &str, len: usize| -> Result<&Vec<f64>> {
        let t = ckpt.tensor(name)?;
        if t.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: {} values, expected {len}",
                t.len()
            )));
        }
        Ok(t)
    };

    let n = model.scene.cloud.len();
    let dim = model.scene.cloud.descriptor_dim;
    model.scene.cloud.descriptors = take("cloud.descriptors", n * dim)?.clone();
    for (p, c) in model
        .scene
        .cloud
        .positions
        .iter_mut()
        .zip(take("cloud.positions", n * 3)?.chunks_exact(3))
    {
        *p = nalgebra::Vector3::new(c[0], c[1], c[2]);
    }
    model.scene.env.texels = take("env.texels", model.scene.env.texels.len())?.clone();
    let nf = model.scene.frames.len();
    let poses = take("frames.poses", nf * 12)?;
    for (f, chunk) in model.scene.frames.iter_mut().zip(poses.chunks_exact(12)) {
        let rotation = nalgebra::Matrix3::from_row_slice(&chunk[..9]);
        f.pose = Pose::new(rotation, nalgebra::Vector3::new(chunk[9], chunk[10], chunk[11]))?;
    }
    let ncam = model.scene.cameras.len();
    let intr = take("cameras.intrinsics", ncam * INTRINSIC_PARAMS)?;
    for (cam, chunk) in model.scene.cameras.iter_mut().zip(intr.chunks_exact(INTRINSIC_PARAMS)) {
        cam.set_intrinsics_vec(&chunk.try_into().unwrap());
    }
    model.sensor.ev = take("sensor.ev", nf)?.clone();
    for (wp, chunk) in model
        .sensor
        .white_point
        .iter_mut()
        .zip(take("sensor.white", nf * 3)?.chunks_exact(3))
    {
        *wp = [chunk[0], chunk[1], chunk[2]];
    }
    model.sensor.green_init = take("sensor.green_init", nf)?.clone();
    let vg = take("sensor.vignette", 5)?;
    model.sensor.vignette =
        crate::tonemap::Vignette { a2: vg[0], a4: vg[1], a6: vg[2], cx: vg[3], cy: vg[4] };
    let k = model.sensor.crf[0].values.len();
    let crf = take("sensor.crf", 3 * k)?;
    for (ch, curve) in model.sensor.crf.iter_mut().enumerate() {
        curve.values.copy_from_slice(&crf[ch * k..(ch + 1) * k]);
    }
    model.recon.head.weight = take("head.weight", model.recon.head.weight.len())?.clone();
    model.recon.head.bias = take("head.bias", 3)?.as_slice().try_into().unwrap();
    model.sensor.validate()?;

    unpack_adam(ckpt, "texture", &mut opt.texture)?;
    unpack_adam(ckpt, "environment", &mut opt.environment)?;
    unpack_adam(ckpt, "position", &mut opt.position)?;
    for i in 0..opt.poses.len() {
        unpack_adam(ckpt, &format!("pose.{i}"), &mut opt.poses[i])?;
    }
    for i in 0..opt.intrinsics.len() {
        unpack_adam(ckpt, &format!("intrinsics.{i}"), &mut opt.intrinsics[i])?;
    }
    for i in 0..opt.ev.len() {
        unpack_adam(ckpt, &format!("ev.{i}"), &mut opt.ev[i])?;
    }
    for i in 0..opt.white.len() {
        unpack_adam(ckpt, &format!("white.{i}"), &mut opt.white[i])?;
    }
    unpack_adam(ckpt, "vignette", &mut opt.vignette)?;
    for ch in 0..3 {
        unpack_adam(ckpt, &format!("crf.{ch}"), &mut opt.crf[ch])?;
    }
    unpack_adam(ckpt, "head_weight", &mut opt.head_weight)?;
    unpack_adam(ckpt, "head_bias", &mut opt.head_bias)?;
    Ok(ckpt.epoch)
}

#[derive(Clone, Debug, Default)]
pub struct RefineSettings {
    pub test_fraction: Option<f64>,
    /// Evaluate held frames every this many epochs; 0 evaluates only at
    /// the end.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RefineReport {
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    pub epochs: Vec<EpochStats>,
    pub test_history: Vec<(usize, MetricsTable)>,
    pub final_test: Option<MetricsTable>,
}

/// Multi-epoch refinement driver with train/test split, per-step JSON
/// logging, and per-epoch checkpoints.
pub fn refine(
    model: &mut Model,
    opt: &mut OptimizerState,
    gt: &[Vec<f64>],
    raster: &RasterConfig,
    cfg: &OptimConfig,
    settings: &RefineSettings,
    start_epoch: usize,
) -> Result<RefineReport> {
    let fraction = settings.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
    let (train, test) = split_train_test(model.scene.frames.len(), fraction, cfg.seed);
    let held_hash = frame_params_hash(model, &test);
    let cfg_hash = run_config_hash(raster, cfg);

    let mut log = match &settings.log_path {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let mut epochs = Vec::new();
    let mut test_history = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let stats = train_epoch(model, opt, gt, &train, raster, cfg, epoch)?;
        if let Some(f) = log.as_mut() {
            for s in &stats.steps {
                let line = serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(f, "{line}")?;
            }
        }
        if let Some(dir) = &settings.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let ckpt = pack_checkpoint(model, opt, epoch + 1, &cfg_hash);
            crate::io::save_checkpoint(&ckpt, &dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
        }
        if settings.eval_every != 0 && !test.is_empty() && (epoch + 1) % settings.eval_every == 0 {
            test_history.push((epoch + 1, evaluate(model, gt, &test, raster)?));
        }
        epochs.push(stats);
    }
    let final_test = if test.is_empty() {
        None
    } else {
        Some(evaluate(model, gt, &test, raster)?)
    };
    if frame_params_hash(model, &test) != held_hash {
        return Err(Error::Config("held-out frame parameters changed during refinement".into()));
    }
    Ok(RefineReport { train_frames: train, test_frames: test, epochs, test_history, final_test })
}

/// Standard normal deviate derived from the keyed counter RNG.
fn gaussian(seed: u64, a: u64, b: u64) -> f64 {
    let u1 = key_uniform(seed, Stream::Noise, a, 2 * b).max(1e-300);
    let u2 = key_uniform(seed, Stream::Noise, a, 2 * b + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gaussian pose perturbation: translation sigma in scene units, rotation
/// sigma in radians, applied per tangent axis.
pub fn noise_pose(pose: &Pose, sigma_t: f64, sigma_r: f64, seed: u64, tag: u64) -> Result<Pose> {
    let mut xi = [0.0f64; 6];
    for k in 0..3 {
        xi[k] = gaussian(seed, tag * 8 + k as u64, 0) * sigma_t;
        xi[k + 3] = gaussian(seed, tag * 8 + 4 + k as u64, 1) * sigma_r;
    }
    apply_tangent(&PoseTangent(xi), pose)
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Translation noise, scene units.
    pub sigma_t: f64,
    /// Rotation noise, degrees.
    pub sigma_r_deg: f64,
    /// Optimizer steps per frame.
    pub steps: usize,
    pub lr_pose: f64,
    pub dropout_rate: f64,
    pub seeds: Vec<u64>,
    /// Observation noise added to the baked ground truth.
    pub gt_noise_sigma: f64,
    pub loss: LossKind,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            sigma_t: 0.015,
            sigma_r_deg: 1.0,
            steps: 300,
            lr_pose: 2e-3,
            dropout_rate: 0.5,
            seeds: vec![1, 2, 3, 4, 5],
            gt_noise_sigma: 0.02,
            loss: LossKind::Mse,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationVariant {
    pub final_mean_loss: f64,
    pub aligned_fraction: f64,
    pub per_frame_rms: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationSeed {
    pub seed: u64,
    pub ghost_on: AblationVariant,
    pub ghost_off: AblationVariant,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub baseline_rms: Vec<f64>,
    pub runs: Vec<AblationSeed>,
    /// Seeds where the ghost variant's final mean loss was no worse.
    pub on_wins: usize,
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Clean inference render of one frame, the alignment measurement probe.
fn clean_ldr(model: &Model, frame_idx: usize, raster: &RasterConfig) -> Result<Vec<f64>> {
    Ok(render_frame(model, frame_idx, raster, None, ResponseMode::Inference)?.ldr)
}

/// Pose-recovery comparison: poses are noised, then optimized per frame
/// with structural gradients taken either from ghost points (hidden from
/// the render, measured at their would-be positions) or directly from the
/// rendered points. The dropout split itself runs in both arms so the
/// forward pass is identical; only the gradient source differs. Alignment
/// is judged by the clean-render RMS against noisy ground truth, relative
/// to the RMS at the true pose.
pub fn ghost_ablation(
    model: &Model,
    raster: &RasterConfig,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    let nframes = model.scene.frames.len();
    let npoints = model.scene.cloud.len();
    let sigma_r = cfg.sigma_r_deg.to_radians();

    // Noisy observations of the converged scene.
    let mut gt = bake_ground_truth(model, raster)?;
    for (fi, img) in gt.iter_mut().enumerate() {
        for (pi, v) in img.iter_mut().enumerate() {
            *v = (*v + gaussian(0xb5e, fi as u64, pi as u64) * cfg.gt_noise_sigma).clamp(0.0, 1.0);
        }
    }
    let baseline_rms: Vec<f64> = (0..nframes)
        .map(|fi| Ok(rms(&clean_ldr(model, fi, raster)?, &gt[fi])))
        .collect::<Result<_>>()?;

    let bwd = BackwardConfig { texture: false, ..BackwardConfig::default() };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut noised = Vec::with_capacity(nframes);
        for fi in 0..nframes {
            noised.push(noise_pose(
                &model.scene.frames[fi].pose,
                cfg.sigma_t,
                sigma_r,
                seed,
                fi as u64,
            )?);
        }
        let mut variants = Vec::new();
        for ghosts_on in [true, false] {
            let mut m = model.clone();
            for (fi, pose) in noised.iter().enumerate() {
                m.scene.frames[fi].pose = pose.clone();
            }
            for fi in 0..nframes {
                let mut state = AdamState::new(6);
                for step in 0..cfg.steps {
                    // Cosine decay: large early steps cover the noise
                    // radius, vanishing late steps let the pose settle.
                    let lr_t = cfg.lr_pose
                        * 0.5
                        * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
                    // The dropout stage runs in both arms; the toggle is
                    // only which half supplies the spatial gradients, so
                    // forward noise is identical across the comparison.
                    let s = key_bits(seed, Stream::Ghost, fi as u64, step as u64);
                    let split = ghost_split(npoints, cfg.dropout_rate, s)?;
                    let fr =
                        render_frame(&m, fi, raster, Some(&split), ResponseMode::Training)?;
                    let lr = loss(&fr.ldr, &gt[fi], cfg.loss)?;
                    let chain = backward_to_layers(&m, fi, &fr, &lr.adjoint, ResponseMode::Training)?;
                    let mut bundle = GradientBundle::zeros(
                        npoints,
                        m.scene.cloud.descriptor_dim,
                        m.scene.env.width * m.scene.env.height,
                    );
                    let set: &[usize] =
                        if ghosts_on { &split.ghost_set } else { &split.render_set };
                    backprop_structural(
                        &m.scene,
                        &m.scene.frames[fi],
                        raster,
                        &bwd,
                        &fr.state,
                        set,
                        &chain.layers,
                        &mut bundle,
                    )?;
                    let (next, _) = step_pose(
                        &m.scene.frames[fi].pose,
                        &bundle.d_pose,
                        &mut state,
                        lr_t,
                        &cfg_adam(),
                    )?;
                    m.scene.frames[fi].pose = next;
                }
            }
            let per_frame_rms: Vec<f64> = (0..nframes)
                .map(|fi| Ok(rms(&clean_ldr(&m, fi, raster)?, &gt[fi])))
                .collect::<Result<_>>()?;
            let aligned = per_frame_rms
                .iter()
                .zip(&baseline_rms)
                .filter(|(r, b)| **r < 2.0 * **b)
                .count();
            let final_mean_loss =
                per_frame_rms.iter().map(|r| r * r).sum::<f64>() / nframes as f64;
            variants.push(AblationVariant {
                final_mean_loss,
                aligned_fraction: aligned as f64 / nframes as f64,
                per_frame_rms,
            });
        }
        let ghost_off = variants.pop().unwrap();
        let ghost_on = variants.pop().unwrap();
        runs.push(AblationSeed { seed, ghost_on, ghost_off });
    }
    let on_wins = runs
        .iter()
        .filter(|r| r.ghost_on.final_mean_loss <= r.ghost_off.final_mean_loss)
        .count();
    Ok(AblationReport { baseline_rms, runs, on_wins })
}

fn cfg_adam() -> crate::optim::AdamHyper {
    crate::optim::AdamHyper::default()
}
