//! Deterministic two-agent synthetic LiDAR scenes.
//!
//! A vehicle and an infrastructure unit observe the same set of upright
//! cuboids from different viewpoints with different sensors. Points are
//! produced by casting an azimuth x elevation ray grid with first-hit
//! occlusion against the boxes and a ground plane at world z = 0, then
//! applying Gaussian range noise and per-point dropout. Everything is a pure
//! function of (spec, sensors, seed), so scenes can be generated in parallel
//! and regenerate bit-identically.

pub mod persist;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{
    compose, invert, rotated_iou, transform_points, Box3D, OrientedRect, PoseSE3,
};
use crate::points::PointCloud;
use crate::seeding::{sample_normal, stream_rng};

/// Ray-grid LiDAR model. Beams are elevation rows, azimuths sweep the fov.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub beams: usize,
    /// Horizontal field of view, radians, centered on the sensor's +x axis.
    pub fov: f64,
    pub azimuth_step: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Beam elevation angles span this range (radians; negative looks down).
    pub elevation_range: (f64, f64),
    /// Fraction of ground hits that produce a return.
    pub ground_keep_prob: f64,
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if self.beams < 1 {
            return Err(Error::InvalidConfig("sensor needs >= 1 beam".into()));
        }
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::TAU + 1e-12) {
            return Err(Error::InvalidConfig(format!("fov {} out of (0, 2pi]", self.fov)));
        }
        if self.azimuth_step <= 0.0 || self.max_range <= 0.0 {
            return Err(Error::InvalidConfig("azimuth_step and max_range must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "dropout_prob {} out of [0, 1)",
                self.dropout_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.ground_keep_prob) || self.range_noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("bad noise/ground parameters".into()));
        }
        Ok(())
    }

    /// Desk-scale stand-in for a low-resolution spinning vehicle LiDAR:
    /// 16 beams, full 360 degree sweep.
    pub fn vehicle_desk() -> Self {
        Self {
            beams: 16,
            fov: std::f64::consts::TAU,
            azimuth_step: std::f64::consts::TAU / 300.0,
            max_range: 70.0,
            range_noise_sigma: 0.02,
            dropout_prob: 0.05,
            elevation_range: (-15f64.to_radians(), 1f64.to_radians()),
            ground_keep_prob: 0.3,
        }
    }

    /// Desk-scale stand-in for a dense forward-looking road-side LiDAR:
    /// 64 beams over a 100 degree fov, mounted high and looking down.
    pub fn infra_desk() -> Self {
        Self {
            beams: 64,
            fov: 100f64.to_radians(),
            azimuth_step: 0.5f64.to_radians(),
            max_range: 70.0,
            range_noise_sigma: 0.02,
            dropout_prob: 0.05,
            // the 10-degree downward mount is folded into the beam fan
            elevation_range: (-24f64.to_radians(), -2f64.to_radians()),
            ground_keep_prob: 0.3,
        }
    }
}

/// Ranges for sampled cuboid extents (meters).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRanges {
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
}

/// How agent poses are drawn. The vehicle sits at the world origin (sensor at
/// `vehicle_height`); the infrastructure position is sampled and its heading
/// faces the origin up to a uniform jitter.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPoseSampler {
    pub vehicle_height: f64,
    pub infra_height: f64,
    pub infra_x_range: (f64, f64),
    pub infra_y_range: (f64, f64),
    pub infra_yaw_jitter: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNoise {
    /// Std-dev of the planar translation error, meters.
    pub sigma_t: f64,
    /// Std-dev of the yaw error, radians.
    pub sigma_yaw: f64,
}

impl PoseNoise {
    pub const NONE: PoseNoise = PoseNoise {
        sigma_t: 0.0,
        sigma_yaw: 0.0,
    };
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_objects: usize,
    pub size_ranges: SizeRanges,
    /// Object centers are drawn uniformly inside this world-frame rectangle.
    pub placement_center: [f64; 2],
    pub placement_half_extents: [f64; 2],
    pub placement_yaw: f64,
    pub pose_sampler: AgentPoseSampler,
    pub pose_noise: PoseNoise,
}

impl SceneSpec {
    pub fn desk() -> Self {
        Self {
            num_objects: 12,
            size_ranges: SizeRanges {
                length: (3.6, 4.8),
                width: (1.6, 2.0),
                height: (1.4, 1.8),
            },
            placement_center: [0.0, 0.0],
            placement_half_extents: [30.0, 15.0],
            placement_yaw: 0.0,
            pose_sampler: AgentPoseSampler {
                vehicle_height: 1.8,
                infra_height: 5.0,
                infra_x_range: (12.0, 30.0),
                infra_y_range: (-12.0, 12.0),
                infra_yaw_jitter: 0.35,
            },
            pose_noise: PoseNoise {
                sigma_t: 0.2,
                sigma_yaw: 1f64.to_radians(),
            },
        }
    }

    pub fn placement_region(&self) -> Result<OrientedRect> {
        OrientedRect::new(
            self.placement_center,
            self.placement_half_extents,
            self.placement_yaw,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.size_ranges;
        for (name, r) in [("length", s.length), ("width", s.width), ("height", s.height)] {
            if !(r.0 > 0.0 && r.1 >= r.0) {
                return Err(Error::InvalidConfig(format!("bad {name} range {r:?}")));
            }
        }
        if self.pose_noise.sigma_t < 0.0 || self.pose_noise.sigma_yaw < 0.0 {
            return Err(Error::InvalidConfig("negative pose noise sigma".into()));
        }
        self.placement_region()?;
        Ok(())
    }
}

/// One agent's view of a scene: its true pose (agent frame -> world), the
/// pose it reports (true pose composed with localization noise), and the
/// point cloud in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrame {
    pub pose: PoseSE3,
    pub reported_pose: PoseSE3,
    pub cloud: PointCloud,
}

/// A temporally synchronized pair of agent views plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: u64,
    pub vehicle: AgentFrame,
    pub infra: AgentFrame,
    /// Ground-truth boxes in the vehicle frame.
    pub gt_boxes: Vec<Box3D>,
    /// Objects dropped because rejection sampling could not place them.
    pub placement_shortfall: usize,
}

impl ScenePair {
    /// True infrastructure-to-vehicle transform.
    pub fn infra_to_vehicle_true(&self) -> PoseSE3 {
        compose(&invert(&self.vehicle.pose), &self.infra.pose)
    }

    /// Infrastructure-to-vehicle transform as the system would compute it
    /// from reported (noisy) poses.
    pub fn infra_to_vehicle_reported(&self) -> PoseSE3 {
        compose(
            &invert(&self.vehicle.reported_pose),
            &self.infra.reported_pose,
        )
    }
}

/// Perturb a pose with planar translation noise and yaw noise; z untouched.
/// The result is `pose` composed with the sampled noise transform.
pub fn inject_pose_noise(pose: &PoseSE3, sigma_t: f64, sigma_yaw: f64, seed: u64) -> PoseSE3 {
    let mut rng = stream_rng(seed, 0xB0);
    let dx = sample_normal(&mut rng, sigma_t);
    let dy = sample_normal(&mut rng, sigma_t);
    let dyaw = sample_normal(&mut rng, sigma_yaw);
    compose(pose, &PoseSE3::from_yaw_translation(dyaw, [dx, dy, 0.0]))
}

/// A copy of the scene whose reported infrastructure pose carries extra
/// localization noise on top of whatever the dataset already had. True poses
/// (and so ground truth) are untouched.
pub fn perturb_reported(pair: &ScenePair, noise: PoseNoise, seed: u64) -> ScenePair {
    if noise.sigma_t == 0.0 && noise.sigma_yaw == 0.0 {
        return pair.clone();
    }
    let mut out = pair.clone();
    out.infra.reported_pose =
        inject_pose_noise(&pair.infra.reported_pose, noise.sigma_t, noise.sigma_yaw, seed);
    out
}

/// Early fusion: the infrastructure cloud mapped into the vehicle frame and
/// concatenated after the vehicle cloud.
pub fn fuse_early(pair: &ScenePair, use_reported_pose: bool) -> PointCloud {
    let t = if use_reported_pose {
        pair.infra_to_vehicle_reported()
    } else {
        pair.infra_to_vehicle_true()
    };
    let mut out = pair.vehicle.cloud.clone();
    let infra = transform_points(&pair.infra.cloud, &t).expect("finite cloud");
    out.extend_from(&infra);
    out
}

// RNG stream ids within a scene seed.
const STREAM_PLACEMENT: u64 = 1;
const STREAM_VEHICLE_RAYS: u64 = 2;
const STREAM_INFRA_RAYS: u64 = 3;
const STREAM_INFRA_POSE: u64 = 4;
const STREAM_VEHICLE_NOISE: u64 = 5;
const STREAM_INFRA_NOISE: u64 = 6;

/// Generate one scene. Pure in (spec, sensors, seed).
pub fn generate_scene(
    spec: &SceneSpec,
    sensors: (&SensorModel, &SensorModel),
    seed: u64,
) -> Result<ScenePair> {
    spec.validate()?;
    sensors.0.validate()?;
    sensors.1.validate()?;

    let sampler = &spec.pose_sampler;
    let vehicle_pose =
        PoseSE3::from_yaw_translation(0.0, [0.0, 0.0, sampler.vehicle_height]);
    let infra_pose = {
        let mut rng = stream_rng(seed, STREAM_INFRA_POSE);
        let x = rng.random_range(sampler.infra_x_range.0..=sampler.infra_x_range.1);
        let y = rng.random_range(sampler.infra_y_range.0..=sampler.infra_y_range.1);
        let facing = (-y).atan2(-x);
        let yaw = facing
            + rng.random_range(-sampler.infra_yaw_jitter..=sampler.infra_yaw_jitter);
        PoseSE3::from_yaw_translation(yaw, [x, y, sampler.infra_height])
    };

    let (boxes_world, placement_shortfall) = place_objects(spec, seed)?;

    let vehicle_cloud = cast_rays(
        sensors.0,
        &vehicle_pose,
        &boxes_world,
        stream_rng(seed, STREAM_VEHICLE_RAYS),
    );
    let infra_cloud = cast_rays(
        sensors.1,
        &infra_pose,
        &boxes_world,
        stream_rng(seed, STREAM_INFRA_RAYS),
    );

    let noise = spec.pose_noise;
    let vehicle = AgentFrame {
        pose: vehicle_pose,
        reported_pose: inject_pose_noise(
            &vehicle_pose,
            noise.sigma_t,
            noise.sigma_yaw,
            crate::seeding::derive_seed(seed, STREAM_VEHICLE_NOISE),
        ),
        cloud: vehicle_cloud,
    };
    let infra = AgentFrame {
        pose: infra_pose,
        reported_pose: inject_pose_noise(
            &infra_pose,
            noise.sigma_t,
            noise.sigma_yaw,
            crate::seeding::derive_seed(seed, STREAM_INFRA_NOISE),
        ),
        cloud: infra_cloud,
    };

    // ground truth lives in the vehicle frame
    let to_vehicle = invert(&vehicle.pose);
    let gt_boxes = boxes_world
        .iter()
        .map(|b| b.transformed(&to_vehicle))
        .collect();

    Ok(ScenePair {
        scene_id: seed,
        vehicle,
        infra,
        gt_boxes,
        placement_shortfall,
    })
}

/// Rejection-place `num_objects` upright cuboids with zero pairwise BEV
/// overlap; 100 attempts per object before giving up on it.
fn place_objects(spec: &SceneSpec, seed: u64) -> Result<(Vec<Box3D>, usize)> {
    let mut rng = stream_rng(seed, STREAM_PLACEMENT);
    let region = spec.placement_region()?;
    let (ry_s, ry_c) = spec.placement_yaw.sin_cos();
    let mut placed: Vec<Box3D> = Vec::with_capacity(spec.num_objects);
    let mut shortfall = 0usize;
    for _ in 0..spec.num_objects {
        let mut accepted = false;
        for _attempt in 0..100 {
            let u = rng.random_range(-region.half_extents[0]..=region.half_extents[0]);
            let v = rng.random_range(-region.half_extents[1]..=region.half_extents[1]);
            let cx = region.center[0] + ry_c * u - ry_s * v;
            let cy = region.center[1] + ry_s * u + ry_c * v;
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let s = &spec.size_ranges;
            let l = rng.random_range(s.length.0..=s.length.1);
            let w = rng.random_range(s.width.0..=s.width.1);
            let h = rng.random_range(s.height.0..=s.height.1);
            let candidate = Box3D::new(cx, cy, h * 0.5, h, w, l, yaw);
            if placed.iter().all(|b| rotated_iou(b, &candidate) == 0.0) {
                placed.push(candidate);
                accepted = true;
                break;
            }
        }
        if !accepted {
            shortfall += 1;
        }
    }
    Ok((placed, shortfall))
}

/// Cast the sensor's ray grid from `pose` against boxes and ground, with the
/// nearest hit winning. Returns points in the sensor's own frame.
fn cast_rays(
    sensor: &SensorModel,
    pose: &PoseSE3,
    boxes_world: &[Box3D],
    mut rng: impl Rng,
) -> PointCloud {
    let n_az = ((sensor.fov / sensor.azimuth_step).round() as usize).max(1);
    let elevations: Vec<f64> = if sensor.beams == 1 {
        vec![(sensor.elevation_range.0 + sensor.elevation_range.1) * 0.5]
    } else {
        (0..sensor.beams)
            .map(|b| {
                sensor.elevation_range.0
                    + (sensor.elevation_range.1 - sensor.elevation_range.0) * b as f64
                        / (sensor.beams - 1) as f64
            })
            .collect()
    };
    let origin = pose.translation;
    let mut points = Vec::new();
    for &elev in &elevations {
        let (es, ec) = elev.sin_cos();
        for i in 0..n_az {
            let az = -sensor.fov * 0.5 + (i as f64 + 0.5) * sensor.fov / n_az as f64;
            let (as_, ac) = az.sin_cos();
            let d_local = [ec * ac, ec * as_, es];
            // rotation only: rays share the sensor origin
            let d_world = [
                pose.rotation[0][0] * d_local[0]
                    + pose.rotation[0][1] * d_local[1]
                    + pose.rotation[0][2] * d_local[2],
                pose.rotation[1][0] * d_local[0]
                    + pose.rotation[1][1] * d_local[1]
                    + pose.rotation[1][2] * d_local[2],
                pose.rotation[2][0] * d_local[0]
                    + pose.rotation[2][1] * d_local[1]
                    + pose.rotation[2][2] * d_local[2],
            ];
            let Some(hit) = first_hit(origin, d_world, boxes_world) else {
                continue;
            };
            if hit.range > sensor.max_range {
                continue;
            }
            if hit.is_ground && rng.random::<f64>() >= sensor.ground_keep_prob {
                continue;
            }
            if sensor.dropout_prob > 0.0 && rng.random::<f64>() < sensor.dropout_prob {
                continue;
            }
            let r = hit.range + sample_normal(&mut rng, sensor.range_noise_sigma);
            if r <= 0.05 || r > sensor.max_range {
                continue;
            }
            let intensity = 1.0 - 0.5 * (r / sensor.max_range);
            points.push([d_local[0] * r, d_local[1] * r, d_local[2] * r, intensity]);
        }
    }
    PointCloud::new(points)
}

struct Hit {
    range: f64,
    is_ground: bool,
}

/// Nearest intersection of a world-frame ray with the boxes or the ground
/// plane z = 0; `None` when the ray escapes.
fn first_hit(origin: [f64; 3], dir: [f64; 3], boxes: &[Box3D]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if dir[2] < -1e-12 {
        let t = -origin[2] / dir[2];
        if t > 1e-9 {
            best = Some(Hit {
                range: t,
                is_ground: true,
            });
        }
    }
    for b in boxes {
        if let Some(t) = ray_box_intersect(origin, dir, b) {
            if best.as_ref().is_none_or(|h| t < h.range) {
                best = Some(Hit {
                    range: t,
                    is_ground: false,
                });
            }
        }
    }
    best
}

/// Slab test against an upright oriented box; returns the entry distance.
fn ray_box_intersect(origin: [f64; 3], dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    // into the box frame (rotation about z only)
    let ox = origin[0] - b.x;
    let oy = origin[1] - b.y;
    let oz = origin[2] - b.z;
    let o = [c * ox + s * oy, -s * ox + c * oy, oz];
    let d = [
        c * dir[0] + s * dir[1],
        -s * dir[0] + c * dir[1],
        dir[2],
    ];
    let half = [b.l * 0.5, b.w * 0.5, b.h * 0.5];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let mut t0 = (-half[k] - o[k]) * inv;
        let mut t1 = (half[k] - o[k]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    (t_far > 1e-9 && t_near > 1e-9).then_some(t_near)
}
