//! Rigid 3D transforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointCloud;

/// A rigid transform: rotation then translation, `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    /// Row-major orthonormal rotation matrix, det +1.
    pub rotation: [[f64; 3]; 3],
    /// Translation in meters.
    pub translation: [f64; 3],
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw_translation(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Build from parts, verifying orthonormality and det +1 (1e-9).
    pub fn try_new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        // max |(R^T R - I)| over entries
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - target).abs());
            }
        }
        if !(max_dev < 1e-9) {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal, max |R^T R - I| = {max_dev:e}"
            )));
        }
        let det = det3(r);
        if !((det - 1.0).abs() < 1e-9) {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected 1")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Planar heading: the angle the transformed +x axis makes in the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }

    /// As a 4x4 homogeneous matrix, row-major, flattened.
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Parse a row-major 4x4 homogeneous matrix; validates the pose.
    pub fn from_matrix4(m: &[f64; 16]) -> Result<Self> {
        let bottom = &m[12..16];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!(
                "bottom row {bottom:?} is not [0, 0, 0, 1]"
            )));
        }
        Self::try_new(
            [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
            [m[3], m[7], m[11]],
        )
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// `compose(a, b)` maps `x -> a(b(x))`.
pub fn compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                rotation[i][j] += a.rotation[i][k] * b.rotation[k][j];
            }
        }
    }
    PoseSE3 {
        rotation,
        translation: a.apply(b.translation),
    }
}

/// Group inverse: `compose(a, invert(a))` is the identity.
pub fn invert(a: &PoseSE3) -> PoseSE3 {
    let r = &a.rotation;
    let rt = [
        [r[0][0], r[1][0], r[2][0]],
        [r[0][1], r[1][1], r[2][1]],
        [r[0][2], r[1][2], r[2][2]],
    ];
    let t = a.translation;
    let neg = [
        -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
        -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
        -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
    ];
    PoseSE3 {
        rotation: rt,
        translation: neg,
    }
}

/// Map every point by `R p + t`; intensity is untouched.
///
/// Rejects non-finite input so frame bugs surface as diagnostics rather than
/// NaN grids downstream.
pub fn transform_points(cloud: &PointCloud, pose: &PoseSE3) -> Result<PointCloud> {
    if !cloud.is_finite() {
        return Err(Error::NonFinite {
            context: "transform_points input cloud".into(),
        });
    }
    let points = cloud
        .iter()
        .map(|p| {
            let q = pose.apply([p[0], p[1], p[2]]);
            [q[0], q[1], q[2], p[3]]
        })
        .collect();
    Ok(PointCloud::new(points))
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        compose(&self, &rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream_rng;
    use rand::Rng;

    fn random_pose(rng: &mut impl Rng) -> PoseSE3 {
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let t = [
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-2.0..2.0),
        ];
        PoseSE3::from_yaw_translation(yaw, t)
    }

    #[test]
    fn identity_transform_is_noop() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0, 0.7], [-4.0, 0.5, 0.0, 0.1]]);
        let out = transform_points(&cloud, &PoseSE3::identity()).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn pure_translation() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0, 0.5]]);
        let pose = PoseSE3::from_yaw_translation(0.0, [1.0, 2.0, 3.0]);
        let out = transform_points(&cloud, &pose).unwrap();
        assert_eq!(out.points[0], [1.0, 2.0, 3.0, 0.5]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let pose = PoseSE3::from_yaw_translation(std::f64::consts::FRAC_PI_2, [0.0; 3]);
        let q = pose.apply([1.0, 0.0, 0.0]);
        assert!((q[0] - 0.0).abs() < 1e-12);
        assert!((q[1] - 1.0).abs() < 1e-12);
        assert!((q[2] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_points() {
        let cloud = PointCloud::new(vec![[f64::NAN, 0.0, 0.0, 0.0]]);
        assert!(transform_points(&cloud, &PoseSE3::identity()).is_err());
    }

    #[test]
    fn invert_identity_is_identity() {
        let inv = invert(&PoseSE3::identity());
        assert_eq!(inv, PoseSE3::identity());
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let id = compose(&pose, &invert(&pose));
            for i in 0..3 {
                for j in 0..3 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((id.rotation[i][j] - target).abs() < 1e-9);
                }
                assert!(id.translation[i].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cloud_round_trips_through_inverse() {
        let mut rng = stream_rng(11, 1);
        let cloud = PointCloud::new(
            (0..200)
                .map(|_| {
                    [
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-20.0..20.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect(),
        );
        let pose = random_pose(&mut rng);
        let there = transform_points(&cloud, &pose).unwrap();
        let back = transform_points(&there, &invert(&pose)).unwrap();
        for (a, b) in cloud.iter().zip(back.iter()) {
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matrix4_round_trip() {
        let pose = PoseSE3::from_yaw_translation(0.7, [1.0, -2.0, 5.0]);
        let m = pose.to_matrix4();
        let back = PoseSE3::from_matrix4(&m).unwrap();
        assert_eq!(pose, back);
    }

    #[test]
    fn validate_rejects_scaled_rotation() {
        let mut r = PoseSE3::identity().rotation;
        r[0][0] = 1.1;
        assert!(PoseSE3::try_new(r, [0.0; 3]).is_err());
    }
}
