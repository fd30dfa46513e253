//! Convex polygons and Sutherland-Hodgman clipping.

use crate::error::{Error, Result};
use crate::geom::GEOM_EPS;

/// A yaw-oriented rectangle in the BEV plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: [f64; 2],
    /// Half extents along the rectangle's local x and y axes, both > 0.
    pub half_extents: [f64; 2],
    pub yaw: f64,
}

impl OrientedRect {
    pub fn new(center: [f64; 2], half_extents: [f64; 2], yaw: f64) -> Result<Self> {
        if !(half_extents[0] > 0.0 && half_extents[1] > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rectangle half extents must be positive, got {half_extents:?}"
            )));
        }
        Ok(Self {
            center,
            half_extents,
            yaw,
        })
    }

    /// Corner polygon, counter-clockwise.
    pub fn corners(&self) -> ConvexPolygon2D {
        let (s, c) = self.yaw.sin_cos();
        let [hx, hy] = self.half_extents;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        let vertices = local
            .iter()
            .map(|&[x, y]| {
                [
                    self.center[0] + c * x - s * y,
                    self.center[1] + s * x + c * y,
                ]
            })
            .collect();
        ConvexPolygon2D { vertices }
    }

    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.half_extents[0] + tol && ly.abs() <= self.half_extents[1] + tol
    }
}

/// A convex polygon with counter-clockwise vertex order and no duplicate
/// consecutive vertices (within [`GEOM_EPS`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon2D {
    vertices: Vec<[f64; 2]>,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn dedup_loop(mut vertices: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(vertices.len());
    for v in vertices.drain(..) {
        if let Some(last) = out.last() {
            if (v[0] - last[0]).abs() < GEOM_EPS && (v[1] - last[1]).abs() < GEOM_EPS {
                continue;
            }
        }
        out.push(v);
    }
    while out.len() >= 2 {
        let first = out[0];
        let last = *out.last().unwrap();
        if (first[0] - last[0]).abs() < GEOM_EPS && (first[1] - last[1]).abs() < GEOM_EPS {
            out.pop();
        } else {
            break;
        }
    }
    out
}

impl ConvexPolygon2D {
    /// Validating constructor: merges near-duplicate consecutive vertices,
    /// then requires at least three vertices, CCW order, and convexity.
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        let vertices = dedup_loop(vertices);
        if vertices.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "polygon needs >= 3 distinct vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            let turn = cross(vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
            if turn < -GEOM_EPS {
                return Err(Error::InvalidConfig(format!(
                    "polygon is not convex CCW (turn {turn:e} at vertex {i})"
                )));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Shoelace area; non-negative for CCW polygons.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            acc += a[0] * b[1] - b[0] * a[1];
        }
        acc * 0.5
    }

    /// Point membership; the boundary counts as inside within `tol`.
    pub fn contains(&self, p: [f64; 2], tol: f64) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            if cross(self.vertices[i], self.vertices[(i + 1) % n], p) < -tol {
                return false;
            }
        }
        true
    }
}

/// Convex clip (Sutherland-Hodgman) of `a` against `b`. Returns `None` when
/// the intersection is empty or degenerates to fewer than three vertices
/// after merging vertices closer than [`GEOM_EPS`].
pub fn polygon_intersection(
    a: &ConvexPolygon2D,
    b: &ConvexPolygon2D,
) -> Option<ConvexPolygon2D> {
    let mut out = a.vertices.clone();
    let nb = b.vertices.len();
    for i in 0..nb {
        if out.len() < 3 {
            return None;
        }
        let p = b.vertices[i];
        let q = b.vertices[(i + 1) % nb];
        let input = std::mem::take(&mut out);
        let n = input.len();
        for j in 0..n {
            let s = input[j];
            let e = input[(j + 1) % n];
            let s_in = cross(p, q, s) >= -GEOM_EPS;
            let e_in = cross(p, q, e) >= -GEOM_EPS;
            if e_in {
                if !s_in {
                    out.push(line_intersect(s, e, p, q));
                }
                out.push(e);
            } else if s_in {
                out.push(line_intersect(s, e, p, q));
            }
        }
    }
    let out = dedup_loop(out);
    if out.len() < 3 {
        None
    } else {
        Some(ConvexPolygon2D { vertices: out })
    }
}

/// Intersection of segment (s, e) with the infinite line through (p, q).
/// Caller guarantees s and e straddle the line.
fn line_intersect(s: [f64; 2], e: [f64; 2], p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let d1 = cross(p, q, s);
    let d2 = cross(p, q, e);
    let t = d1 / (d1 - d2);
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream_rng;
    use rand::Rng;

    fn unit_square() -> ConvexPolygon2D {
        OrientedRect::new([0.5, 0.5], [0.5, 0.5], 0.0)
            .unwrap()
            .corners()
    }

    #[test]
    fn rect_rejects_nonpositive_extent() {
        assert!(OrientedRect::new([0.0, 0.0], [0.0, 1.0], 0.0).is_err());
        assert!(OrientedRect::new([0.0, 0.0], [1.0, -1.0], 0.0).is_err());
    }

    #[test]
    fn corners_are_ccw_with_expected_area() {
        let rect = OrientedRect::new([1.0, 2.0], [2.0, 0.5], 0.3).unwrap();
        let poly = rect.corners();
        assert!((poly.area() - 4.0).abs() < 1e-12);
        assert!(ConvexPolygon2D::new(poly.vertices().to_vec()).is_ok());
    }

    #[test]
    fn cw_polygon_rejected() {
        let cw = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(ConvexPolygon2D::new(cw).is_err());
    }

    #[test]
    fn self_intersection_keeps_area() {
        let sq = unit_square();
        let inter = polygon_intersection(&sq, &sq).unwrap();
        assert!((inter.area() - sq.area()).abs() < 1e-12);
    }

    #[test]
    fn shifted_square_overlap() {
        let a = unit_square();
        let b = OrientedRect::new([1.0, 0.5], [0.5, 0.5], 0.0)
            .unwrap()
            .corners();
        let inter = polygon_intersection(&a, &b).unwrap();
        assert!((inter.area() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn disjoint_squares_are_empty() {
        let a = unit_square();
        let b = OrientedRect::new([5.0, 5.0], [0.5, 0.5], 0.0)
            .unwrap()
            .corners();
        assert!(polygon_intersection(&a, &b).is_none());
    }

    /// Monte-Carlo membership oracle for intersection area: sample uniform
    /// points in a bounding box, count points inside both polygons.
    fn mc_intersection_area(
        a: &ConvexPolygon2D,
        b: &ConvexPolygon2D,
        samples: usize,
        seed: u64,
    ) -> (f64, f64) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in a.vertices().iter().chain(b.vertices()) {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let bbox_area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        let mut rng = stream_rng(seed, 917);
        let mut hits = 0usize;
        for _ in 0..samples {
            let p = [
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
            ];
            if a.contains(p, 0.0) && b.contains(p, 0.0) {
                hits += 1;
            }
        }
        let frac = hits as f64 / samples as f64;
        let sigma = (frac * (1.0 - frac) / samples as f64).sqrt() * bbox_area;
        (frac * bbox_area, sigma)
    }

    #[test]
    fn rotated_square_against_monte_carlo_oracle() {
        // Unit square vs the same square rotated 45 degrees about the center:
        // the overlap is a regular octagon of area 2(sqrt(2) - 1).
        let a = unit_square();
        let b = OrientedRect::new([0.5, 0.5], [0.5, 0.5], std::f64::consts::FRAC_PI_4)
            .unwrap()
            .corners();
        let inter = polygon_intersection(&a, &b).unwrap();
        let exact = 2.0 * (std::f64::consts::SQRT_2 - 1.0);
        assert!((inter.area() - exact).abs() < 1e-12);

        let (mc, sigma) = mc_intersection_area(&a, &b, 1_000_000, 4);
        assert!(
            (inter.area() - mc).abs() < 3.0 * sigma,
            "clip {} vs mc {} (sigma {})",
            inter.area(),
            mc,
            sigma
        );
    }

    fn random_rect(rng: &mut impl Rng) -> ConvexPolygon2D {
        OrientedRect::new(
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            [rng.random_range(0.3..2.5), rng.random_range(0.3..2.5)],
            rng.random_range(-3.2..3.2),
        )
        .unwrap()
        .corners()
    }

    #[test]
    fn intersection_is_symmetric_and_bounded() {
        let mut rng = stream_rng(21, 0);
        for _ in 0..200 {
            let a = random_rect(&mut rng);
            let b = random_rect(&mut rng);
            let ab = polygon_intersection(&a, &b).map_or(0.0, |p| p.area());
            let ba = polygon_intersection(&b, &a).map_or(0.0, |p| p.area());
            assert!((ab - ba).abs() < 1e-9, "asymmetric: {ab} vs {ba}");
            assert!(ab <= a.area().min(b.area()) + 1e-9);
        }
    }
}
