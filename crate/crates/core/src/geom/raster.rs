//! BEV grids and binary mask rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{ConvexPolygon2D, GEOM_EPS};

/// A regular BEV grid over closed x/y ranges. Rows index x, columns index y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Cell edge lengths (meters) along x and y.
    pub cell_size: [f64; 2],
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), cell_size: [f64; 2]) -> Result<Self> {
        if !(cell_size[0] > 0.0 && cell_size[1] > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell size must be positive, got {cell_size:?}"
            )));
        }
        if !(x_range.1 > x_range.0 && y_range.1 > y_range.0) {
            return Err(Error::InvalidGrid(format!(
                "empty range: x {x_range:?}, y {y_range:?}"
            )));
        }
        let height = ((x_range.1 - x_range.0) / cell_size[0]).round() as usize;
        let width = ((y_range.1 - y_range.0) / cell_size[1]).round() as usize;
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid("grid has zero cells".into()));
        }
        Ok(Self {
            x_range,
            y_range,
            cell_size,
            height,
            width,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Center of cell (i, j): row i along x, column j along y.
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.x_range.0 + (i as f64 + 0.5) * self.cell_size[0],
            self.y_range.0 + (j as f64 + 0.5) * self.cell_size[1],
        ]
    }

    /// Cell containing (x, y), or `None` when outside the ranges.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.x_range.0) / self.cell_size[0]).floor();
        let j = ((y - self.y_range.0) / self.cell_size[1]).floor();
        if i < 0.0 || j < 0.0 {
            return None;
        }
        let (i, j) = (i as usize, j as usize);
        if i >= self.height || j >= self.width {
            return None;
        }
        Some((i, j))
    }

    /// The same ranges at `stride`-times coarser cells.
    pub fn downsampled(&self, stride: usize) -> Result<GridSpec> {
        if stride == 0 {
            return Err(Error::InvalidGrid("stride must be >= 1".into()));
        }
        GridSpec::new(
            self.x_range,
            self.y_range,
            [
                self.cell_size[0] * stride as f64,
                self.cell_size[1] * stride as f64,
            ],
        )
    }
}

/// An H x W binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask2D {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl BitMask2D {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.width + j] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|b| *b)
    }

    pub fn and(&self, other: &BitMask2D) -> BitMask2D {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BitMask2D) -> BitMask2D {
        self.zip(other, |a, b| a || b)
    }

    pub fn not(&self) -> BitMask2D {
        BitMask2D {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &BitMask2D, f: impl Fn(bool, bool) -> bool) -> BitMask2D {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask shapes differ"
        );
        BitMask2D {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    /// Row-major 0/1 values, for feeding masks into the tensor engine.
    pub fn to_values<T: From<u8>>(&self) -> Vec<T> {
        self.bits.iter().map(|b| T::from(u8::from(*b))).collect()
    }
}

/// Rasterize a polygon onto a grid by the cell-center rule: cell (i, j) is 1
/// iff its center lies inside the polygon (boundary counts as inside within
/// [`GEOM_EPS`]). An empty polygon gives an all-zero mask.
pub fn rasterize_mask(poly: Option<&ConvexPolygon2D>, grid: &GridSpec) -> BitMask2D {
    let mut mask = BitMask2D::zeros(grid.height, grid.width);
    let Some(poly) = poly else {
        return mask;
    };
    for i in 0..grid.height {
        for j in 0..grid.width {
            if poly.contains(grid.cell_center(i, j), GEOM_EPS) {
                mask.set(i, j, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::OrientedRect;

    fn grid_8x8() -> GridSpec {
        GridSpec::new((0.0, 8.0), (0.0, 8.0), [1.0, 1.0]).unwrap()
    }

    #[test]
    fn grid_dims_follow_ranges() {
        let g = GridSpec::new((-40.0, 40.0), (-20.0, 20.0), [0.8, 0.8]).unwrap();
        assert_eq!((g.height, g.width), (100, 50));
        let f = g.downsampled(2).unwrap();
        assert_eq!((f.height, f.width), (50, 25));
    }

    #[test]
    fn cell_center_and_lookup_agree() {
        let g = grid_8x8();
        for i in 0..g.height {
            for j in 0..g.width {
                let c = g.cell_center(i, j);
                assert_eq!(g.cell_of(c[0], c[1]), Some((i, j)));
            }
        }
        assert_eq!(g.cell_of(8.0, 1.0), None);
        assert_eq!(g.cell_of(-0.001, 1.0), None);
    }

    #[test]
    fn full_cover_polygon_gives_all_ones() {
        let g = grid_8x8();
        let poly = OrientedRect::new([4.0, 4.0], [40.0, 40.0], 0.3)
            .unwrap()
            .corners();
        assert!(rasterize_mask(Some(&poly), &g).all());
    }

    #[test]
    fn empty_polygon_gives_all_zeros() {
        let g = grid_8x8();
        let m = rasterize_mask(None, &g);
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn half_plane_split_covers_half_the_cells() {
        // A rectangle covering exactly the x < 4 half of the 8x8 grid: the
        // boundary at x = 4 lies between cell centers, so exactly half the
        // cells light up.
        let g = grid_8x8();
        let poly = OrientedRect::new([2.0, 4.0], [2.0, 40.0], 0.0)
            .unwrap()
            .corners();
        let m = rasterize_mask(Some(&poly), &g);
        assert_eq!(m.count_ones(), g.num_cells() / 2);
        // direct per-cell oracle
        for i in 0..g.height {
            for j in 0..g.width {
                let c = g.cell_center(i, j);
                assert_eq!(m.get(i, j), poly.contains(c, 1e-9));
            }
        }
    }

    #[test]
    fn mask_boolean_algebra() {
        let mut a = BitMask2D::zeros(2, 2);
        a.set(0, 0, true);
        a.set(1, 1, true);
        let b = a.not();
        assert_eq!(a.and(&b).count_ones(), 0);
        assert!(a.or(&b).all());
        assert_eq!(a.count_ones(), 2);
    }
}
