//! Distillation losses, the detection loss, and the teacher/student
//! training loops.
//!
//! The distillation scheme is two-staged around the fusion block: before
//! fusion each student branch is pulled toward the (frozen) teacher feature
//! in the regions the other agent does not cover; after fusion the fused
//! map is pulled toward the teacher inside the covered overlap. A dense
//! prediction-level term aligns head outputs at teacher-confident cells.

use serde::{Deserialize, Serialize};

use crate::dma::{build_bank, sample_and_inject, DmaProbs, InstanceBank};
use crate::error::{Error, Result};
use crate::geom::{invert, transform_points, BitMask2D, GridSpec};
use crate::nn::{sgd_step, Graph, Scalar, Tensor};
use crate::pipeline::{
    encode_targets, DetectorModel, FusionKind, HeadOutput, PillarConfig, StudentModel, Targets,
};
use crate::points::PointCloud;
use crate::seeding::derive_seed;
use crate::sim::{fuse_early, inject_pose_noise, PoseNoise, ScenePair};

mod masks;
pub use masks::{compute_masks, perception_rects, MaskMode, MaskSet};


// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// First-stage distillation: each branch matches the teacher feature on its
/// own non-overlap mask. The teacher tensor must be a constant (detached).
pub fn loss_da<'g, S: Scalar>(
    b_teacher: &Tensor<'g, S>,
    b_vehicle: &Tensor<'g, S>,
    b_infra: &Tensor<'g, S>,
    masks: &MaskSet,
) -> Result<Tensor<'g, S>> {
    debug_assert!(!b_teacher.needs_grad(), "teacher feature must be detached");
    let v = b_teacher.masked_l1(b_vehicle, &masks.non_overlap_vehicle)?;
    let i = b_teacher.masked_l1(b_infra, &masks.non_overlap_infra)?;
    v.add(&i)
}

/// Second-stage distillation: the fused map matches the teacher inside the
/// overlap region.
pub fn loss_f<'g, S: Scalar>(
    b_teacher: &Tensor<'g, S>,
    b_fused: &Tensor<'g, S>,
    masks: &MaskSet,
) -> Result<Tensor<'g, S>> {
    debug_assert!(!b_teacher.needs_grad(), "teacher feature must be detached");
    b_teacher.masked_l1(b_fused, &masks.overlap)
}

/// Teacher head outputs detached into plain data.
pub struct TeacherPredictions {
    /// `[H, W, 1]` post-sigmoid scores.
    pub scores: Vec<f64>,
    /// `[H, W, 8]` regression channels.
    pub reg: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl TeacherPredictions {
    pub fn from_head<S: Scalar>(head: &HeadOutput<'_, S>) -> Self {
        let shape = head.class_logits.shape();
        let (h, w) = (shape[0], shape[1]);
        let scores = head
            .class_logits
            .to_f64_vec()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        TeacherPredictions {
            scores,
            reg: head.reg.to_f64_vec(),
            height: h,
            width: w,
        }
    }
}

/// Dense prediction distillation over cells where the teacher is confident:
/// per-cell L1 between post-sigmoid class maps plus per-cell L1 between
/// regression maps, averaged over the K qualifying cells. Zero when K = 0.
pub fn loss_p<'g, S: Scalar>(
    graph: &'g Graph<S>,
    teacher: &TeacherPredictions,
    student: &HeadOutput<'g, S>,
    confidence_thr: f64,
) -> Result<Tensor<'g, S>> {
    let (h, w) = (teacher.height, teacher.width);
    let mut qualifying = BitMask2D::zeros(h, w);
    let mut k = 0usize;
    for i in 0..h {
        for j in 0..w {
            if teacher.scores[i * w + j] >= confidence_thr {
                qualifying.set(i, j, true);
                k += 1;
            }
        }
    }
    if k == 0 {
        return Ok(graph.scalar(0.0));
    }
    let rescale = (h * w) as f64 / k as f64;
    let t_scores = graph.constant_f64(&[h, w, 1], &teacher.scores);
    let t_reg = graph.constant_f64(&[h, w, crate::pipeline::REG_CHANNELS], &teacher.reg);
    let cls_term = student
        .class_logits
        .sigmoid()
        .masked_l1(&t_scores, &qualifying)?
        .scale(rescale);
    let reg_term = student
        .reg
        .masked_l1(&t_reg, &qualifying)?
        .scale(rescale);
    cls_term.add(&reg_term)
}

/// Detection loss: focal objectness against the center-cell assignment plus
/// L1 on the regression channels at positive cells, both normalized by the
/// positive count.
pub fn loss_detect<'g, S: Scalar>(
    graph: &'g Graph<S>,
    head: &HeadOutput<'g, S>,
    targets: &Targets,
) -> Result<Tensor<'g, S>> {
    let norm = 1.0 / targets.num_positive.max(1) as f64;
    let focal = head
        .class_logits
        .sigmoid_focal(&targets.class, 0.25, 2.0, norm)?;
    if targets.num_positive == 0 {
        return Ok(focal);
    }
    let shape = head.reg.shape().to_vec();
    let t_reg = graph.constant_f64(&shape, &targets.reg);
    let hw = (shape[0] * shape[1]) as f64;
    let reg = head
        .reg
        .masked_l1(&t_reg, &targets.positives)?
        .scale(hw * norm);
    focal.add(&reg)
}

/// The total objective: detection plus `lambda_kd` times the three
/// distillation terms.
pub fn total_loss<'g, S: Scalar>(
    detect: &Tensor<'g, S>,
    da: &Tensor<'g, S>,
    f: &Tensor<'g, S>,
    p: &Tensor<'g, S>,
    lambda_kd: f64,
) -> Result<Tensor<'g, S>> {
    detect.add(&da.add(f)?.add(p)?.scale(lambda_kd))
}

// ---------------------------------------------------------------------------
// training configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaSettings {
    pub enabled: bool,
    pub probs: DmaProbs,
    pub samples_per_scene: usize,
}

impl Default for DmaSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            probs: DmaProbs::default(),
            samples_per_scene: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak learning rate; cosine-decayed to zero over all steps.
    pub lr: f64,
    pub momentum: f64,
    pub lambda_kd: f64,
    pub tau_low: f64,
    pub tau_high: f64,
    pub dma: DmaSettings,
    pub mask_mode: MaskMode,
    pub seed: u64,
    /// Teacher score threshold for the prediction-level term.
    pub teacher_confidence: f64,
    /// Extra pose noise injected into reported poses during training.
    pub extra_pose_noise: PoseNoise,
    /// Use reported (noisy) poses wherever a deployed system would.
    pub use_reported_poses: bool,
    /// Detection score threshold used when decoding during evaluation.
    pub score_thr: f64,
    /// Rotated-NMS IoU threshold used when decoding.
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            momentum: 0.9,
            lambda_kd: 1.0,
            tau_low: 0.2,
            tau_high: 0.8,
            dma: DmaSettings::default(),
            mask_mode: MaskMode::Geometric,
            seed: 42,
            teacher_confidence: 0.3,
            extra_pose_noise: PoseNoise::NONE,
            use_reported_poses: true,
            score_thr: 0.3,
            nms_iou: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kd < 0.0 {
            return Err(Error::InvalidConfig("lambda_kd must be >= 0".into()));
        }
        if self.lr <= 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::InvalidConfig("bad optimizer settings".into()));
        }
        if !(0.0 < self.tau_low && self.tau_low < self.tau_high && self.tau_high < 1.0) {
            return Err(Error::InvalidConfig("bad domain thresholds".into()));
        }
        self.dma.probs.validate()?;
        Ok(())
    }
}

/// Which student ingredients are active (the ablation axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentVariant {
    pub dma: bool,
    pub pdd: bool,
    pub daf: bool,
}

impl StudentVariant {
    pub const FULL: StudentVariant = StudentVariant {
        dma: true,
        pdd: true,
        daf: true,
    };
    pub const BASELINE: StudentVariant = StudentVariant {
        dma: false,
        pdd: false,
        daf: false,
    };
}

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_detect: f64,
    pub loss_da: f64,
    pub loss_f: f64,
    pub loss_p: f64,
    pub total: f64,
}

pub fn write_train_log(path: &std::path::Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut out = String::from("epoch,step,loss_detect,loss_da,loss_f,loss_p,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.loss_detect, r.loss_da, r.loss_f, r.loss_p, r.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct TrainResult<M> {
    pub model: M,
    pub log: Vec<TrainLogRow>,
}

// ---------------------------------------------------------------------------
// shared training plumbing
// ---------------------------------------------------------------------------

/// Cosine decay from `lr` to 0 over `total` steps.
fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Seeded scene order for one epoch (Fisher-Yates on indices).
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::seeding::stream_rng(derive_seed(seed, 0xE0), epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Reported poses perturbed by training-time robustness noise.
fn with_extra_pose_noise(pair: &ScenePair, noise: PoseNoise, seed: u64) -> ScenePair {
    crate::sim::perturb_reported(pair, noise, derive_seed(seed, 0x17))
}

fn check_finite<S: Scalar>(loss: &Tensor<'_, S>, step: usize) -> Result<f64> {
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::Diverged {
            step,
            what: format!("loss = {v}"),
        });
    }
    Ok(v)
}

/// The per-scene model inputs after augmentation and frame handling.
struct StepInputs {
    teacher_cloud: PointCloud,
    vehicle_cloud: PointCloud,
    /// Already mapped into the vehicle frame by the reported pose.
    infra_cloud_vehicle: PointCloud,
    gt: Vec<crate::geom::Box3D>,
    pair: ScenePair,
}

#[allow(clippy::too_many_arguments)]
fn prepare_step_inputs(
    pair: &ScenePair,
    bank: Option<&InstanceBank>,
    cfg: &TrainConfig,
    pillar: &PillarConfig,
    dma_on: bool,
    epoch: usize,
    scene_idx: usize,
) -> Result<StepInputs> {
    let step_seed = derive_seed(cfg.seed, ((epoch as u64) << 32) ^ scene_idx as u64);
    let pair = with_extra_pose_noise(pair, cfg.extra_pose_noise, step_seed);
    let (teacher_cloud, vehicle_cloud, infra_cloud, gt) = match (dma_on, bank) {
        (true, Some(bank)) if !bank.is_empty() => {
            let aug = sample_and_inject(
                bank,
                &pair,
                cfg.dma.probs,
                cfg.dma.samples_per_scene,
                &pillar.grid,
                cfg.use_reported_poses,
                step_seed,
            )?;
            (
                aug.teacher_cloud,
                aug.vehicle_cloud,
                aug.infra_cloud,
                aug.gt_boxes,
            )
        }
        _ => (
            fuse_early(&pair, cfg.use_reported_poses),
            pair.vehicle.cloud.clone(),
            pair.infra.cloud.clone(),
            pair.gt_boxes.clone(),
        ),
    };
    let t_hat = if cfg.use_reported_poses {
        pair.infra_to_vehicle_reported()
    } else {
        pair.infra_to_vehicle_true()
    };
    let infra_cloud_vehicle = transform_points(&infra_cloud, &t_hat)?;
    Ok(StepInputs {
        teacher_cloud,
        vehicle_cloud,
        infra_cloud_vehicle,
        gt,
        pair,
    })
}

// ---------------------------------------------------------------------------
// teacher training
// ---------------------------------------------------------------------------

/// Train the early-fusion teacher on detection loss alone. Deterministic per
/// (dataset, config); epochs = 0 returns the initialization.
pub fn train_teacher<S: Scalar>(
    scenes: &[ScenePair],
    cfg: &TrainConfig,
    pillar: &PillarConfig,
) -> Result<TrainResult<DetectorModel<S>>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut model: DetectorModel<S> =
        DetectorModel::new(pillar.clone(), derive_seed(cfg.seed, 0x7E))?;
    let bank = if cfg.dma.enabled {
        Some(build_bank(scenes, cfg.tau_low, cfg.tau_high)?)
    } else {
        None
    };
    let feature_grid = pillar.feature_grid();
    let total_steps = cfg.epochs * scenes.len();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for &scene_idx in &epoch_order(scenes.len(), cfg.seed, epoch) {
            let inputs = prepare_step_inputs(
                &scenes[scene_idx],
                bank.as_ref(),
                cfg,
                pillar,
                cfg.dma.enabled,
                epoch,
                scene_idx,
            )?;
            let graph: Graph<S> = Graph::new();
            let sess = model.session(&graph, true);
            let fwd = model.forward(&sess, &inputs.teacher_cloud)?;
            let targets = encode_targets(&inputs.gt, &feature_grid);
            let loss = loss_detect(&graph, &fwd.head, &targets)?;
            let value = check_finite(&loss, step)?;
            let mut grads = graph.backward(&loss)?;
            let param_grads = sess.collect_grads(&mut grads);
            sgd_step(
                &mut model.store,
                &param_grads,
                cosine_lr(cfg.lr, step, total_steps),
                cfg.momentum,
            )?;
            log.push(TrainLogRow {
                epoch,
                step,
                loss_detect: value,
                loss_da: 0.0,
                loss_f: 0.0,
                loss_p: 0.0,
                total: value,
            });
            step += 1;
        }
    }
    Ok(TrainResult { model, log })
}

/// Train a per-agent detector on both agents' single clouds (two samples per
/// scene), for the no-fusion and late-fusion baselines.
pub fn train_single_agent<S: Scalar>(
    scenes: &[ScenePair],
    cfg: &TrainConfig,
    pillar: &PillarConfig,
) -> Result<TrainResult<DetectorModel<S>>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut model: DetectorModel<S> =
        DetectorModel::new(pillar.clone(), derive_seed(cfg.seed, 0x5A))?;
    let feature_grid = pillar.feature_grid();
    let total_steps = cfg.epochs * scenes.len() * 2;
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for &scene_idx in &epoch_order(scenes.len(), cfg.seed, epoch) {
            let pair = &scenes[scene_idx];
            let to_infra = invert(&pair.infra_to_vehicle_true());
            let samples: [(PointCloud, Vec<crate::geom::Box3D>); 2] = [
                (pair.vehicle.cloud.clone(), pair.gt_boxes.clone()),
                (
                    pair.infra.cloud.clone(),
                    pair.gt_boxes.iter().map(|b| b.transformed(&to_infra)).collect(),
                ),
            ];
            for (cloud, gt) in samples {
                let graph: Graph<S> = Graph::new();
                let sess = model.session(&graph, true);
                let fwd = model.forward(&sess, &cloud)?;
                let targets = encode_targets(&gt, &feature_grid);
                let loss = loss_detect(&graph, &fwd.head, &targets)?;
                let value = check_finite(&loss, step)?;
                let mut grads = graph.backward(&loss)?;
                let param_grads = sess.collect_grads(&mut grads);
                sgd_step(
                    &mut model.store,
                    &param_grads,
                    cosine_lr(cfg.lr, step, total_steps),
                    cfg.momentum,
                )?;
                log.push(TrainLogRow {
                    epoch,
                    step,
                    loss_detect: value,
                    loss_da: 0.0,
                    loss_f: 0.0,
                    loss_p: 0.0,
                    total: value,
                });
                step += 1;
            }
        }
    }
    Ok(TrainResult { model, log })
}

// ---------------------------------------------------------------------------
// student training
// ---------------------------------------------------------------------------

/// Train the two-branch student. The teacher is frozen throughout; its
/// features and predictions are produced on the same augmented scene and fed
/// to the distillation terms as constants.
pub fn train_student<S: Scalar>(
    scenes: &[ScenePair],
    teacher: &DetectorModel<S>,
    cfg: &TrainConfig,
    pillar: &PillarConfig,
    variant: StudentVariant,
) -> Result<TrainResult<StudentModel<S>>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let fusion = if variant.daf {
        FusionKind::Daf
    } else {
        FusionKind::Sum
    };
    let mut model: StudentModel<S> =
        StudentModel::new(pillar.clone(), fusion, derive_seed(cfg.seed, 0x57))?;
    let bank = if variant.dma {
        Some(build_bank(scenes, cfg.tau_low, cfg.tau_high)?)
    } else {
        None
    };
    let feature_grid = pillar.feature_grid();
    let total_steps = cfg.epochs * scenes.len();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for &scene_idx in &epoch_order(scenes.len(), cfg.seed, epoch) {
            let inputs = prepare_step_inputs(
                &scenes[scene_idx],
                bank.as_ref(),
                cfg,
                pillar,
                variant.dma,
                epoch,
                scene_idx,
            )?;

            // teacher pass, no gradients, on the same augmented scene
            let teacher_data = if variant.pdd {
                let tg: Graph<S> = Graph::new();
                let tsess = teacher.session(&tg, false);
                let tfwd = teacher.forward(&tsess, &inputs.teacher_cloud)?;
                Some((
                    crate::pipeline::detach(&tfwd.feature),
                    TeacherPredictions::from_head(&tfwd.head),
                ))
            } else {
                None
            };

            let graph: Graph<S> = Graph::new();
            let sess = model.session(&graph, true);
            let fwd = model.forward(&sess, &inputs.vehicle_cloud, &inputs.infra_cloud_vehicle)?;
            let targets = encode_targets(&inputs.gt, &feature_grid);
            let detect = loss_detect(&graph, &fwd.head, &targets)?;

            let (total, da_v, f_v, p_v) = match &teacher_data {
                Some((b_t_detached, t_preds)) => {
                    let b_t = crate::pipeline::attach(&graph, b_t_detached);
                    let masks = compute_masks(
                        &perception_rects(&inputs.pair, &feature_grid)?.0,
                        &perception_rects(&inputs.pair, &feature_grid)?.1,
                        &feature_grid,
                        &inputs.pair,
                        cfg.mask_mode,
                    )?;
                    let da = loss_da(&b_t, &fwd.b_vehicle, &fwd.b_infra, &masks)?;
                    let f = loss_f(&b_t, &fwd.b_fused, &masks)?;
                    let p = loss_p(&graph, t_preds, &fwd.head, cfg.teacher_confidence)?;
                    let total = total_loss(&detect, &da, &f, &p, cfg.lambda_kd)?;
                    (total, da.item(), f.item(), p.item())
                }
                None => (detect.clone(), 0.0, 0.0, 0.0),
            };

            let value = check_finite(&total, step)?;
            let mut grads = graph.backward(&total)?;
            let param_grads = sess.collect_grads(&mut grads);
            sgd_step(
                &mut model.store,
                &param_grads,
                cosine_lr(cfg.lr, step, total_steps),
                cfg.momentum,
            )?;
            log.push(TrainLogRow {
                epoch,
                step,
                loss_detect: detect.item(),
                loss_da: da_v,
                loss_f: f_v,
                loss_p: p_v,
                total: value,
            });
            step += 1;
        }
    }
    Ok(TrainResult { model, log })
}

/// Inference-grade student inputs for one scene: the infra cloud mapped by
/// the reported pose (matching what training saw).
pub fn student_inputs(pair: &ScenePair, use_reported: bool) -> Result<(PointCloud, PointCloud)> {
    let t = if use_reported {
        pair.infra_to_vehicle_reported()
    } else {
        pair.infra_to_vehicle_true()
    };
    Ok((
        pair.vehicle.cloud.clone(),
        transform_points(&pair.infra.cloud, &t)?,
    ))
}

/// Dense pillar occupancy of a cloud on a grid (helper for footprint masks).
pub(crate) fn occupancy_mask(cloud: &PointCloud, grid: &GridSpec) -> BitMask2D {
    let mut mask = BitMask2D::zeros(grid.height, grid.width);
    for p in cloud.iter() {
        if let Some((i, j)) = grid.cell_of(p[0], p[1]) {
            mask.set(i, j, true);
        }
    }
    mask
}
