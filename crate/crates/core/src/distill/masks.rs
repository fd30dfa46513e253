//! Overlap and non-overlap masks guiding the two distillation stages.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geom::{
    polygon_intersection, rasterize_mask, transform_points, BitMask2D, GridSpec, OrientedRect,
};
use crate::sim::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// From the agents' perception rectangles: the overlap mask rasterizes
    /// the clipped intersection; the vehicle non-overlap is its complement.
    Geometric,
    /// From actual point footprints: a cell counts as covered by an agent
    /// when that agent has at least one return in it.
    Footprint,
}

/// The overlap mask M plus the two per-agent non-overlap masks.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub overlap: BitMask2D,
    pub non_overlap_vehicle: BitMask2D,
    pub non_overlap_infra: BitMask2D,
    pub mode: MaskMode,
}

/// The two agents' perception rectangles in the vehicle frame: the vehicle's
/// is the grid rectangle itself; the infrastructure's is the same rectangle
/// carried through the true infra-to-vehicle transform.
pub fn perception_rects(
    pair: &ScenePair,
    grid: &GridSpec,
) -> Result<(OrientedRect, OrientedRect)> {
    let center = [
        (grid.x_range.0 + grid.x_range.1) * 0.5,
        (grid.y_range.0 + grid.y_range.1) * 0.5,
    ];
    let half = [
        (grid.x_range.1 - grid.x_range.0) * 0.5,
        (grid.y_range.1 - grid.y_range.0) * 0.5,
    ];
    let vehicle = OrientedRect::new(center, half, 0.0)?;
    let t = pair.infra_to_vehicle_true();
    let c = t.apply([center[0], center[1], 0.0]);
    let infra = OrientedRect::new([c[0], c[1]], half, t.yaw())?;
    Ok((vehicle, infra))
}

/// Build the mask set at feature-grid resolution.
///
/// Geometric mode: `M = raster(A_v ∩ A_i)`, the vehicle non-overlap is the
/// exact complement of M over the grid, and the infra non-overlap is
/// `raster(A_i) AND NOT M`. Footprint mode: occupancy of each agent's
/// returns (infra mapped by the true pose); overlap = both occupied,
/// non-overlap = exactly one occupied.
pub fn compute_masks(
    vehicle_rect: &OrientedRect,
    infra_rect: &OrientedRect,
    grid: &GridSpec,
    pair: &ScenePair,
    mode: MaskMode,
) -> Result<MaskSet> {
    match mode {
        MaskMode::Geometric => {
            let pv = vehicle_rect.corners();
            let pi = infra_rect.corners();
            let inter = polygon_intersection(&pv, &pi);
            let overlap = rasterize_mask(inter.as_ref(), grid);
            let infra_cover = rasterize_mask(Some(&pi), grid);
            let non_overlap_vehicle = overlap.not();
            let non_overlap_infra = infra_cover.and(&overlap.not());
            Ok(MaskSet {
                overlap,
                non_overlap_vehicle,
                non_overlap_infra,
                mode,
            })
        }
        MaskMode::Footprint => {
            let o_v = super::occupancy_mask(&pair.vehicle.cloud, grid);
            let infra_in_vehicle =
                transform_points(&pair.infra.cloud, &pair.infra_to_vehicle_true())?;
            let o_i = super::occupancy_mask(&infra_in_vehicle, grid);
            Ok(MaskSet {
                overlap: o_v.and(&o_i),
                non_overlap_vehicle: o_v.and(&o_i.not()),
                non_overlap_infra: o_i.and(&o_v.not()),
                mode,
            })
        }
    }
}
