//! Detection models: pillar BEV encoder, offset-corrected adaptive fusion,
//! and the anchor-free single-class head with box encoding/decoding.
//!
//! The teacher and the single-agent baseline are a [`DetectorModel`]
//! (encoder + head on one cloud). The [`StudentModel`] runs the shared
//! encoder over both agents' clouds, fuses with either the adaptive fusion
//! block or a plain sum, and decodes from the fused map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{nms, Box3D, GridSpec, BitMask2D};
use crate::nn::{Graph, Init, ParamId, ParamStore, Scalar, Session, Tensor};
use crate::points::PointCloud;

/// Raw features per pillar: point count, mean z, mean intensity,
/// mean in-cell x offset, mean in-cell y offset, occupancy.
pub const PILLAR_FEATURES: usize = 6;

/// Regression channels: dx, dy, z, log h, log w, log l, sin yaw, cos yaw.
pub const REG_CHANNELS: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PillarConfig {
    /// Pillar-resolution grid (before the encoder stride).
    pub grid: GridSpec,
    pub z_range: (f64, f64),
    /// Feature channels C.
    pub channels: usize,
    /// Overall encoder downsample, 1 or 2.
    pub stride: usize,
}

impl PillarConfig {
    /// Desk-scale default: 80 m x 40 m at 0.8 m cells, C = 32, stride 2,
    /// so features are 50 x 25 x 32.
    pub fn desk() -> Self {
        Self {
            grid: GridSpec::new((-40.0, 40.0), (-20.0, 20.0), [0.8, 0.8]).expect("valid grid"),
            z_range: (-3.5, 1.5),
            channels: 32,
            stride: 2,
        }
    }

    /// Production-scale layout (kept available, far too slow for tests):
    /// 200 m x 80 m at 0.4 m cells, C = 256.
    pub fn production() -> Self {
        Self {
            grid: GridSpec::new((-100.0, 100.0), (-40.0, 40.0), [0.4, 0.4])
                .expect("valid grid"),
            z_range: (-3.5, 1.5),
            channels: 256,
            stride: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::InvalidConfig(format!(
                "channels must be >= 8, got {}",
                self.channels
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::InvalidConfig(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if !(self.z_range.1 > self.z_range.0) {
            return Err(Error::InvalidConfig("empty z range".into()));
        }
        Ok(())
    }

    /// The grid the BEV features (and masks, and detections) live on.
    pub fn feature_grid(&self) -> GridSpec {
        self.grid.downsampled(self.stride).expect("stride >= 1")
    }

    /// Fixed per-channel input conditioning applied before the lift conv,
    /// bringing raw pillar statistics (counts can reach dozens) to O(1) so
    /// the multiplicative attention downstream stays numerically tame. A
    /// constant diagonal scale is exactly absorbable into the 1x1 lift
    /// kernel, so the encoder contract is unchanged.
    pub fn feature_scales(&self) -> [f64; PILLAR_FEATURES] {
        let z_mag = self.z_range.0.abs().max(self.z_range.1.abs()).max(1e-6);
        [
            1.0 / 16.0,
            1.0 / z_mag,
            1.0,
            2.0 / self.grid.cell_size[0],
            2.0 / self.grid.cell_size[1],
            1.0,
        ]
    }
}

/// Bin a cloud into per-pillar statistics. Points outside the grid's x/y
/// ranges or the z range are dropped; empty cells stay all-zero.
pub fn pillarize<S: Scalar>(cloud: &PointCloud, cfg: &PillarConfig) -> Vec<S> {
    let grid = &cfg.grid;
    let (h, w) = (grid.height, grid.width);
    let mut count = vec![0.0f64; h * w];
    let mut sums = vec![0.0f64; h * w * 4]; // z, intensity, dx, dy
    for p in cloud.iter() {
        if p[2] < cfg.z_range.0 || p[2] > cfg.z_range.1 {
            continue;
        }
        let Some((i, j)) = grid.cell_of(p[0], p[1]) else {
            continue;
        };
        let cell = i * w + j;
        let center = grid.cell_center(i, j);
        count[cell] += 1.0;
        sums[cell * 4] += p[2];
        sums[cell * 4 + 1] += p[3];
        sums[cell * 4 + 2] += p[0] - center[0];
        sums[cell * 4 + 3] += p[1] - center[1];
    }
    let mut out = vec![S::zero(); h * w * PILLAR_FEATURES];
    for cell in 0..h * w {
        let n = count[cell];
        if n == 0.0 {
            continue;
        }
        let base = cell * PILLAR_FEATURES;
        out[base] = S::from_f64(n);
        out[base + 1] = S::from_f64(sums[cell * 4] / n);
        out[base + 2] = S::from_f64(sums[cell * 4 + 1] / n);
        out[base + 3] = S::from_f64(sums[cell * 4 + 2] / n);
        out[base + 4] = S::from_f64(sums[cell * 4 + 3] / n);
        out[base + 5] = S::one();
    }
    out
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// A conv2d layer's parameter handles.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvLayer {
    fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::KaimingUniform {
                fan_in: k * k * cin,
            }
        };
        ConvLayer {
            kernel: store.add(&format!("{name}.kernel"), &[k, k, cin, cout], init),
            bias: store.add(&format!("{name}.bias"), &[cout], Init::Zeros),
            stride,
        }
    }

    pub fn apply<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        x: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        x.conv2d(&sess.param(self.kernel), &sess.param(self.bias), self.stride)
    }
}

/// The BEV encoder: 1x1 lift (6 -> C) + relu, then a strided 3x3 and a
/// second 3x3, each with relu. Both students run this exact parameter set.
#[derive(Debug, Clone)]
pub struct Encoder {
    lift: ConvLayer,
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    input_scales: [f64; PILLAR_FEATURES],
}

impl Encoder {
    fn register<S: Scalar>(store: &mut ParamStore<S>, cfg: &PillarConfig) -> Self {
        let c = cfg.channels;
        Encoder {
            lift: ConvLayer::register(store, "enc.lift", 1, PILLAR_FEATURES, c, 1, false),
            conv_a: ConvLayer::register(store, "enc.conv_a", 3, c, c, cfg.stride, false),
            conv_b: ConvLayer::register(store, "enc.conv_b", 3, c, c, 1, false),
            input_scales: cfg.feature_scales(),
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        pillars: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        let cells = pillars.len() / PILLAR_FEATURES;
        let mut scale = Vec::with_capacity(pillars.len());
        for _ in 0..cells {
            scale.extend(self.input_scales.iter().copied());
        }
        let scale = sess.graph.constant_f64(&pillars.shape().to_vec(), &scale);
        let x = pillars.mul(&scale)?;
        let x = self.lift.apply(sess, &x)?.relu();
        let x = self.conv_a.apply(sess, &x)?.relu();
        Ok(self.conv_b.apply(sess, &x)?.relu())
    }
}

/// Detection head: 3x3 trunk plus 1x1 class and regression branches.
#[derive(Debug, Clone)]
pub struct Head {
    trunk: ConvLayer,
    cls: ConvLayer,
    reg: ConvLayer,
}

/// Dense per-cell predictions on the feature grid.
pub struct HeadOutput<'g, S: Scalar> {
    /// `[H, W, 1]` objectness logits.
    pub class_logits: Tensor<'g, S>,
    /// `[H, W, 8]` box regression channels.
    pub reg: Tensor<'g, S>,
}

impl Head {
    fn register<S: Scalar>(store: &mut ParamStore<S>, cfg: &PillarConfig) -> Self {
        let c = cfg.channels;
        Head {
            trunk: ConvLayer::register(store, "head.trunk", 3, c, c, 1, false),
            cls: ConvLayer::register(store, "head.cls", 1, c, 1, 1, false),
            reg: ConvLayer::register(store, "head.reg", 1, c, REG_CHANNELS, 1, false),
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        feature: &Tensor<'g, S>,
    ) -> Result<HeadOutput<'g, S>> {
        let t = self.trunk.apply(sess, feature)?.relu();
        Ok(HeadOutput {
            class_logits: self.cls.apply(sess, &t)?,
            reg: self.reg.apply(sess, &t)?,
        })
    }
}

// ---------------------------------------------------------------------------
// domain-adaptive fusion
// ---------------------------------------------------------------------------

/// The adaptive fusion block: a zero-initialized offset head that warps the
/// infrastructure feature onto the vehicle grid, a per-domain softmax
/// attention, a spatial attention, and a 1x1 reduction back to C channels.
#[derive(Debug, Clone)]
pub struct DafBlock {
    offset: ConvLayer,
    da_a: ConvLayer,
    da_b: ConvLayer,
    da_c: ConvLayer,
    sa_a: ConvLayer,
    sa_b: ConvLayer,
    fuse: ConvLayer,
}

impl DafBlock {
    fn register<S: Scalar>(store: &mut ParamStore<S>, cfg: &PillarConfig) -> Self {
        let c = cfg.channels;
        DafBlock {
            // zero init: the warp starts as an exact identity
            offset: ConvLayer::register(store, "daf.offset", 3, 2 * c, 2, 1, true),
            da_a: ConvLayer::register(store, "daf.da_a", 3, 2 * c, 2 * c, 1, false),
            da_b: ConvLayer::register(store, "daf.da_b", 1, 2 * c, 2 * c, 1, false),
            da_c: ConvLayer::register(store, "daf.da_c", 1, 2 * c, 2 * c, 1, false),
            sa_a: ConvLayer::register(store, "daf.sa_a", 3, 2 * c, c, 1, false),
            sa_b: ConvLayer::register(store, "daf.sa_b", 5, c, 1, 1, false),
            fuse: ConvLayer::register(store, "daf.fuse", 1, 2 * c, c, 1, false),
        }
    }

    /// Predicted per-cell calibration offset, `[H, W, 2]` in cell units.
    /// Zero at initialization.
    pub fn offset<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        b_v: &Tensor<'g, S>,
        b_i: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        let cat = b_v.concat_axis(b_i, 2)?;
        self.offset.apply(sess, &cat)
    }

    /// Warp the infrastructure feature by the offset field.
    pub fn warp<'g, S: Scalar>(
        b_i: &Tensor<'g, S>,
        delta: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        b_i.bilinear_sample(delta)
    }

    /// Per-domain attention over the stacked features `[H, W, 2, C]`:
    /// a residual conv stack (3x3 then two 1x1, domains folded into
    /// channels) produces logits, softmax over the domain axis.
    pub fn domain_attention<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        b_cat: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        let [h, w, d, c] = four_dims(b_cat)?;
        let folded = b_cat.reshape(&[h, w, d * c])?;
        let y = self.da_a.apply(sess, &folded)?.relu();
        let y = self.da_b.apply(sess, &y)?.relu();
        let y = self.da_c.apply(sess, &y)?;
        let logits = folded.add(&y)?.reshape(&[h, w, d, c])?;
        logits.softmax_axis(2)
    }

    /// Spatial attention `[H, W]`: a two-conv path (kernel sizes 3 and 5)
    /// reducing channel and domain axes to one, plus the maximum over the
    /// channel and domain axes.
    pub fn spatial_attention<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        b_cat: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        let [h, w, d, c] = four_dims(b_cat)?;
        let folded = b_cat.reshape(&[h, w, d * c])?;
        let conv_path = self
            .sa_b
            .apply(sess, &self.sa_a.apply(sess, &folded)?.relu())?
            .reshape(&[h, w])?;
        let max_path = b_cat.max_last_axes(2)?;
        conv_path.add(&max_path)
    }

    /// Weight the stacked features by both attentions and reduce to C
    /// channels.
    pub fn fuse<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        b_cat: &Tensor<'g, S>,
        a_d: &Tensor<'g, S>,
        a_s: &Tensor<'g, S>,
    ) -> Result<Tensor<'g, S>> {
        let [h, w, d, c] = four_dims(b_cat)?;
        let weighted = a_d.spatial_mul(a_s)?.mul(b_cat)?;
        self.fuse.apply(sess, &weighted.reshape(&[h, w, d * c])?)
    }

    /// The whole block: offset, warp, stack, both attentions, fused output.
    pub fn forward<'g, S: Scalar>(
        &self,
        sess: &Session<'g, '_, S>,
        b_v: &Tensor<'g, S>,
        b_i: &Tensor<'g, S>,
    ) -> Result<(Tensor<'g, S>, Tensor<'g, S>)> {
        let delta = self.offset(sess, b_v, b_i)?;
        let b_i_warped = Self::warp(b_i, &delta)?;
        let shape = b_v.shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let b_cat = b_v
            .concat_axis(&b_i_warped, 2)?
            .reshape(&[h, w, 2, c])?;
        let a_d = self.domain_attention(sess, &b_cat)?;
        let a_s = self.spatial_attention(sess, &b_cat)?;
        let b_f = self.fuse(sess, &b_cat, &a_d, &a_s)?;
        Ok((b_f, delta))
    }
}

fn four_dims<S: Scalar>(t: &Tensor<'_, S>) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 || s[2] != 2 {
        return Err(Error::shape("daf", "[HxWx2xC]", format!("{s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

/// How the student combines the two branch features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Offset-corrected attention fusion.
    Daf,
    /// Plain elementwise sum of the branch features.
    Sum,
}

/// A single-cloud detector (the teacher, and the single-agent baseline).
pub struct DetectorModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub cfg: PillarConfig,
    enc: Encoder,
    head: Head,
}

pub struct DetectorForward<'g, S: Scalar> {
    pub feature: Tensor<'g, S>,
    pub head: HeadOutput<'g, S>,
}

impl<S: Scalar> DetectorModel<S> {
    pub fn new(cfg: PillarConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let enc = Encoder::register(&mut store, &cfg);
        let head = Head::register(&mut store, &cfg);
        Ok(Self {
            store,
            cfg,
            enc,
            head,
        })
    }

    pub fn session<'g>(&self, graph: &'g Graph<S>, trainable: bool) -> Session<'g, '_, S> {
        Session::new(graph, &self.store, trainable)
    }

    pub fn forward<'g>(
        &self,
        sess: &Session<'g, '_, S>,
        cloud: &PointCloud,
    ) -> Result<DetectorForward<'g, S>> {
        let grid = &self.cfg.grid;
        let pillars = sess.graph.constant(
            &[grid.height, grid.width, PILLAR_FEATURES],
            pillarize(cloud, &self.cfg),
        );
        let feature = self.enc.forward(sess, &pillars)?;
        let head = self.head.forward(sess, &feature)?;
        Ok(DetectorForward { feature, head })
    }
}

/// The two-branch intermediate-fusion model. One encoder parameter set
/// serves both branches; fusion is either the adaptive block or a plain sum.
pub struct StudentModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub cfg: PillarConfig,
    pub fusion: FusionKind,
    enc: Encoder,
    daf: Option<DafBlock>,
    head: Head,
}

pub struct StudentForward<'g, S: Scalar> {
    pub b_vehicle: Tensor<'g, S>,
    pub b_infra: Tensor<'g, S>,
    pub b_fused: Tensor<'g, S>,
    pub head: HeadOutput<'g, S>,
    /// Present when fusion is [`FusionKind::Daf`].
    pub offsets: Option<Tensor<'g, S>>,
}

impl<S: Scalar> StudentModel<S> {
    pub fn new(cfg: PillarConfig, fusion: FusionKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let enc = Encoder::register(&mut store, &cfg);
        let daf = match fusion {
            FusionKind::Daf => Some(DafBlock::register(&mut store, &cfg)),
            FusionKind::Sum => None,
        };
        let head = Head::register(&mut store, &cfg);
        Ok(Self {
            store,
            cfg,
            fusion,
            enc,
            daf,
            head,
        })
    }

    pub fn session<'g>(&self, graph: &'g Graph<S>, trainable: bool) -> Session<'g, '_, S> {
        Session::new(graph, &self.store, trainable)
    }

    /// Both clouds must already be expressed in the vehicle frame (the infra
    /// cloud mapped by the reported pose upstream).
    pub fn forward<'g>(
        &self,
        sess: &Session<'g, '_, S>,
        vehicle_cloud: &PointCloud,
        infra_cloud_vehicle_frame: &PointCloud,
    ) -> Result<StudentForward<'g, S>> {
        let grid = &self.cfg.grid;
        let shape = [grid.height, grid.width, PILLAR_FEATURES];
        let pillars_v = sess
            .graph
            .constant(&shape, pillarize(vehicle_cloud, &self.cfg));
        let pillars_i = sess
            .graph
            .constant(&shape, pillarize(infra_cloud_vehicle_frame, &self.cfg));
        let b_vehicle = self.enc.forward(sess, &pillars_v)?;
        let b_infra = self.enc.forward(sess, &pillars_i)?;
        let (b_fused, offsets) = match (&self.fusion, &self.daf) {
            (FusionKind::Daf, Some(daf)) => {
                let (b_f, delta) = daf.forward(sess, &b_vehicle, &b_infra)?;
                (b_f, Some(delta))
            }
            _ => (b_vehicle.add(&b_infra)?, None),
        };
        let head = self.head.forward(sess, &b_fused)?;
        Ok(StudentForward {
            b_vehicle,
            b_infra,
            b_fused,
            head,
            offsets,
        })
    }
}

// ---------------------------------------------------------------------------
// target encoding / decoding
// ---------------------------------------------------------------------------

/// Dense training targets for the head.
pub struct Targets {
    /// `[H, W, 1]` 0/1 objectness.
    pub class: Vec<f64>,
    /// `[H, W, 8]`, meaningful only at positive cells.
    pub reg: Vec<f64>,
    pub positives: BitMask2D,
    pub num_positive: usize,
    /// Boxes whose center fell outside the grid.
    pub dropped_outside: usize,
    /// Boxes whose center cell was already taken.
    pub dropped_collision: usize,
}

/// Center-cell assignment: each box marks the cell containing its center and
/// writes its regression targets there. Inverse of [`decode_detections`].
pub fn encode_targets(gt: &[Box3D], feature_grid: &GridSpec) -> Targets {
    let (h, w) = (feature_grid.height, feature_grid.width);
    let mut class = vec![0.0; h * w];
    let mut reg = vec![0.0; h * w * REG_CHANNELS];
    let mut positives = BitMask2D::zeros(h, w);
    let mut num_positive = 0;
    let mut dropped_outside = 0;
    let mut dropped_collision = 0;
    for b in gt {
        let Some((i, j)) = feature_grid.cell_of(b.x, b.y) else {
            dropped_outside += 1;
            continue;
        };
        if positives.get(i, j) {
            dropped_collision += 1;
            continue;
        }
        positives.set(i, j, true);
        num_positive += 1;
        class[i * w + j] = 1.0;
        let center = feature_grid.cell_center(i, j);
        let base = (i * w + j) * REG_CHANNELS;
        reg[base] = (b.x - center[0]) / feature_grid.cell_size[0];
        reg[base + 1] = (b.y - center[1]) / feature_grid.cell_size[1];
        reg[base + 2] = b.z;
        reg[base + 3] = b.h.ln();
        reg[base + 4] = b.w.ln();
        reg[base + 5] = b.l.ln();
        reg[base + 6] = b.yaw.sin();
        reg[base + 7] = b.yaw.cos();
    }
    Targets {
        class,
        reg,
        positives,
        num_positive,
        dropped_outside,
        dropped_collision,
    }
}

/// Cells whose objectness clears `score_thr` become boxes (cell center plus
/// the regressed offset, exp-transformed extents, atan2 yaw), then rotated
/// NMS. Returns (box, score) in kept order.
pub fn decode_detections(
    class_logits: &[f64],
    reg: &[f64],
    feature_grid: &GridSpec,
    score_thr: f64,
    nms_iou: f64,
) -> Result<Vec<(Box3D, f64)>> {
    let (h, w) = (feature_grid.height, feature_grid.width);
    if class_logits.len() != h * w || reg.len() != h * w * REG_CHANNELS {
        return Err(Error::shape(
            "decode_detections",
            format!("[{h}x{w}x1] and [{h}x{w}x{REG_CHANNELS}]"),
            format!("{} and {}", class_logits.len(), reg.len()),
        ));
    }
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            let score = 1.0 / (1.0 + (-class_logits[cell]).exp());
            if score < score_thr {
                continue;
            }
            let base = cell * REG_CHANNELS;
            let center = feature_grid.cell_center(i, j);
            let x = center[0] + reg[base] * feature_grid.cell_size[0];
            let y = center[1] + reg[base + 1] * feature_grid.cell_size[1];
            let z = reg[base + 2];
            let bh = reg[base + 3].exp();
            let bw = reg[base + 4].exp();
            let bl = reg[base + 5].exp();
            let yaw = reg[base + 6].atan2(reg[base + 7]);
            boxes.push(Box3D::new(x, y, z, bh, bw, bl, yaw));
            scores.push(score);
        }
    }
    let kept = nms(&boxes, &scores, nms_iou)?;
    Ok(kept.into_iter().map(|k| (boxes[k], scores[k])).collect())
}

// ---------------------------------------------------------------------------
// sidecar + persistence
// ---------------------------------------------------------------------------

/// Architecture metadata written next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub kind: ModelKind,
    pub pillar: PillarConfig,
    pub fusion: Option<FusionKind>,
    pub init_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Detector,
    Student,
}

/// Write `<stem>.dvck` and `<stem>.json`.
pub fn save_detector<S: Scalar>(model: &DetectorModel<S>, stem: &std::path::Path) -> Result<()> {
    crate::nn::save_checkpoint(&model.store, &stem.with_extension("dvck"))?;
    let sidecar = ModelSidecar {
        kind: ModelKind::Detector,
        pillar: model.cfg.clone(),
        fusion: None,
        init_seed: 0,
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn save_student<S: Scalar>(model: &StudentModel<S>, stem: &std::path::Path) -> Result<()> {
    crate::nn::save_checkpoint(&model.store, &stem.with_extension("dvck"))?;
    let sidecar = ModelSidecar {
        kind: ModelKind::Student,
        pillar: model.cfg.clone(),
        fusion: Some(model.fusion),
        init_seed: 0,
    };
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

fn read_sidecar(stem: &std::path::Path) -> Result<ModelSidecar> {
    let path = stem.with_extension("json");
    Ok(serde_json::from_str(&std::fs::read_to_string(&path).map_err(
        |e| Error::Checkpoint(format!("missing sidecar {}: {e}", path.display())),
    )?)?)
}

pub fn load_detector<S: Scalar>(stem: &std::path::Path) -> Result<DetectorModel<S>> {
    let sidecar = read_sidecar(stem)?;
    if sidecar.kind != ModelKind::Detector {
        return Err(Error::Checkpoint(format!(
            "expected a detector checkpoint at {}",
            stem.display()
        )));
    }
    let mut model = DetectorModel::new(sidecar.pillar, 0)?;
    crate::nn::load_checkpoint_into(&mut model.store, &stem.with_extension("dvck"))?;
    Ok(model)
}

pub fn load_student<S: Scalar>(stem: &std::path::Path) -> Result<StudentModel<S>> {
    let sidecar = read_sidecar(stem)?;
    if sidecar.kind != ModelKind::Student {
        return Err(Error::Checkpoint(format!(
            "expected a student checkpoint at {}",
            stem.display()
        )));
    }
    let fusion = sidecar.fusion.unwrap_or(FusionKind::Daf);
    let mut model = StudentModel::new(sidecar.pillar, fusion, 0)?;
    crate::nn::load_checkpoint_into(&mut model.store, &stem.with_extension("dvck"))?;
    Ok(model)
}

/// Detached copy of a tensor's values as an f64 vec plus shape, for feeding
/// one graph's outputs to another as constants.
pub fn detach<S: Scalar>(t: &Tensor<'_, S>) -> (Vec<usize>, Vec<f64>) {
    (t.shape().to_vec(), t.to_f64_vec())
}

/// Re-attach a detached value to a graph as a constant.
pub fn attach<'g, S: Scalar>(
    graph: &'g Graph<S>,
    (shape, data): &(Vec<usize>, Vec<f64>),
) -> Tensor<'g, S> {
    let vals: Vec<S> = data.iter().map(|v| S::from_f64(*v)).collect();
    graph.constant(shape, vals)
}
