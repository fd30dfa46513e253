//! Exact BEV/3D geometry: pose transforms, convex polygon overlap, mask
//! rasterization, rotated IoU, and NMS.
//!
//! All operations here are pure and reentrant; values are freely shareable
//! across threads.

mod boxes;
mod polygon;
mod pose;
mod raster;

pub use boxes::{nms, normalize_yaw, points_in_box, rotated_iou, Box3D};
pub use polygon::{polygon_intersection, ConvexPolygon2D, OrientedRect};
pub use pose::{compose, invert, transform_points, PoseSE3};
pub use raster::{rasterize_mask, BitMask2D, GridSpec};

/// Tolerance for clipping, vertex merging, and boundary membership.
pub const GEOM_EPS: f64 = 1e-9;
