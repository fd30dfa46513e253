//! Oriented 3D boxes, rotated BEV IoU, and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{polygon_intersection, OrientedRect, PoseSE3};
use crate::points::PointCloud;

/// Extents below this are treated as zero-area: IoU 0, never matched.
const DEGENERATE_EXTENT: f64 = 1e-6;

/// A 7-parameter upright oriented box: center, extents, heading.
///
/// `l` runs along the local heading (x) axis, `w` across it, `h` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    /// Heading about +z, normalized to (-pi, pi].
    pub yaw: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, h: f64, w: f64, l: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            h,
            w,
            l,
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.h, self.w, self.l, self.yaw]
    }

    pub fn is_degenerate(&self) -> bool {
        self.h <= DEGENERATE_EXTENT || self.w <= DEGENERATE_EXTENT || self.l <= DEGENERATE_EXTENT
    }

    /// BEV footprint: half extents (l/2, w/2) at the box heading.
    pub fn footprint(&self) -> Result<OrientedRect> {
        OrientedRect::new([self.x, self.y], [self.l * 0.5, self.w * 0.5], self.yaw)
    }

    /// The box under a rigid transform whose rotation is a pure yaw.
    /// Extents are preserved; center moves, heading adds the pose yaw.
    pub fn transformed(&self, pose: &PoseSE3) -> Box3D {
        let c = pose.apply([self.x, self.y, self.z]);
        Box3D::new(c[0], c[1], c[2], self.h, self.w, self.l, self.yaw + pose.yaw())
    }
}

/// Wrap an angle to (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = yaw % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// BEV-footprint intersection-over-union of two boxes (z and h ignored).
/// Degenerate footprints give 0.
pub fn rotated_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let pa = a.footprint().expect("non-degenerate").corners();
    let pb = b.footprint().expect("non-degenerate").corners();
    let inter = match polygon_intersection(&pa, &pb) {
        Some(p) => p.area(),
        None => return 0.0,
    };
    let union = pa.area() + pb.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS by descending score; ties break toward the lower original
/// index. A candidate is suppressed when its IoU with any kept box reaches
/// `iou_thr`. Returns kept indices in selection order.
pub fn nms(boxes: &[Box3D], scores: &[f64], iou_thr: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::op(
            "nms",
            format!("{} boxes but {} scores", boxes.len(), scores.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "nms scores".into(),
        });
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| rotated_iou(&boxes[i], &boxes[k]) >= iou_thr);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Indices of points whose coordinates, expressed in the box frame, satisfy
/// |x'| <= l/2, |y'| <= w/2, |z'| <= h/2.
pub fn points_in_box(cloud: &PointCloud, b: &Box3D) -> Vec<usize> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw, hh) = (b.l * 0.5, b.w * 0.5, b.h * 0.5);
    cloud
        .iter()
        .enumerate()
        .filter_map(|(idx, p)| {
            let dx = p[0] - b.x;
            let dy = p[1] - b.y;
            let dz = p[2] - b.z;
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            (lx.abs() <= hl && ly.abs() <= hw && dz.abs() <= hh).then_some(idx)
        })
        .collect()
}
