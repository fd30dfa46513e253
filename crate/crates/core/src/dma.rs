//! Domain-mixing instance augmentation.
//!
//! Object point crops are harvested from training scenes with per-point
//! provenance (which agent saw them), labeled by the vehicle-side point
//! proportion, and re-injected into scenes at freshly sampled poses. The
//! same instance goes to the teacher and to both students so their data
//! distributions stay aligned.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{invert, points_in_box, rotated_iou, transform_points, Box3D, GridSpec};
use crate::points::PointCloud;
use crate::seeding::stream_rng;
use crate::sim::{fuse_early, ScenePair};

/// Which agent(s) an instance's points came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Mostly vehicle returns.
    Vehicle,
    /// Mostly infrastructure returns.
    Infra,
    /// A genuine mix of both.
    Fused,
}

/// Classify by the vehicle-side point proportion `r = n_v / (n_v + n_i)`:
/// `r < tau_low` is infrastructure, `r > tau_high` is vehicle, everything
/// else (boundaries included) is fused.
pub fn classify_domain(n_v: usize, n_i: usize, tau_low: f64, tau_high: f64) -> Result<Domain> {
    if n_v + n_i == 0 {
        return Err(Error::op("classify_domain", "instance has zero points"));
    }
    if !(0.0 < tau_low && tau_low < tau_high && tau_high < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "thresholds must satisfy 0 < tau_low < tau_high < 1, got ({tau_low}, {tau_high})"
        )));
    }
    let r = n_v as f64 / (n_v + n_i) as f64;
    Ok(if r < tau_low {
        Domain::Infra
    } else if r > tau_high {
        Domain::Vehicle
    } else {
        Domain::Fused
    })
}

/// One harvested object: its points split by provenance (both parts in the
/// vehicle frame of the source scene), the box, and the domain label.
#[derive(Debug, Clone)]
pub struct Instance {
    pub points_v: PointCloud,
    pub points_i: PointCloud,
    pub box3d: Box3D,
    pub n_v: usize,
    pub n_i: usize,
    pub domain: Domain,
}

/// Provenance-labeled instance bank. The partition over domains is
/// exhaustive and disjoint by construction.
#[derive(Debug, Clone)]
pub struct InstanceBank {
    pub instances: Vec<Instance>,
    pub tau_low: f64,
    pub tau_high: f64,
    by_domain: [Vec<usize>; 3],
}

fn domain_slot(d: Domain) -> usize {
    match d {
        Domain::Fused => 0,
        Domain::Vehicle => 1,
        Domain::Infra => 2,
    }
}

impl InstanceBank {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn count(&self, d: Domain) -> usize {
        self.by_domain[domain_slot(d)].len()
    }
}

/// Harvest instances from every GT box of every scene. Infrastructure clouds
/// are first mapped into the vehicle frame with the true pose; boxes whose
/// crops are empty on both sides are skipped.
pub fn build_bank(scenes: &[ScenePair], tau_low: f64, tau_high: f64) -> Result<InstanceBank> {
    let mut instances = Vec::new();
    let mut by_domain: [Vec<usize>; 3] = Default::default();
    for pair in scenes {
        let infra_in_vehicle =
            transform_points(&pair.infra.cloud, &pair.infra_to_vehicle_true())?;
        for b in &pair.gt_boxes {
            let idx_v = points_in_box(&pair.vehicle.cloud, b);
            let idx_i = points_in_box(&infra_in_vehicle, b);
            if idx_v.is_empty() && idx_i.is_empty() {
                continue;
            }
            let points_v =
                PointCloud::new(idx_v.iter().map(|&i| pair.vehicle.cloud.points[i]).collect());
            let points_i =
                PointCloud::new(idx_i.iter().map(|&i| infra_in_vehicle.points[i]).collect());
            let domain = classify_domain(points_v.len(), points_i.len(), tau_low, tau_high)?;
            let slot = domain_slot(domain);
            by_domain[slot].push(instances.len());
            instances.push(Instance {
                n_v: points_v.len(),
                n_i: points_i.len(),
                points_v,
                points_i,
                box3d: *b,
                domain,
            });
        }
    }
    Ok(InstanceBank {
        instances,
        tau_low,
        tau_high,
        by_domain,
    })
}

/// Sampling probabilities for (fused, vehicle, infra), summing to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaProbs {
    pub fused: f64,
    pub vehicle: f64,
    pub infra: f64,
}

impl DmaProbs {
    pub fn validate(&self) -> Result<()> {
        let s = self.fused + self.vehicle + self.infra;
        if (s - 1.0).abs() > 1e-9 || self.fused < 0.0 || self.vehicle < 0.0 || self.infra < 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "domain probabilities must be non-negative and sum to 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for DmaProbs {
    fn default() -> Self {
        Self {
            fused: 0.8,
            vehicle: 0.1,
            infra: 0.1,
        }
    }
}

/// One accepted injection, for bookkeeping.
#[derive(Debug, Clone)]
pub struct AcceptedInjection {
    pub bank_index: usize,
    pub box3d: Box3D,
    pub n_v: usize,
    pub n_i: usize,
}

/// A scene after instance injection, ready for the three models.
#[derive(Debug, Clone)]
pub struct AugmentedScene {
    /// Student vehicle input: original vehicle cloud + injected vehicle parts.
    pub vehicle_cloud: PointCloud,
    /// Student infrastructure input, in the infrastructure frame.
    pub infra_cloud: PointCloud,
    /// Teacher input: early-fused cloud + both injected parts, vehicle frame.
    pub teacher_cloud: PointCloud,
    pub gt_boxes: Vec<Box3D>,
    pub accepted: Vec<AcceptedInjection>,
}

/// Draw `n_samples` instances (category by `probs`, uniform within category)
/// and paste each at a collision-free pose inside the grid range. Every
/// accepted instance is added consistently to the teacher cloud (vehicle
/// frame) and to both student clouds (each in its own frame, true poses).
pub fn sample_and_inject(
    bank: &InstanceBank,
    pair: &ScenePair,
    probs: DmaProbs,
    n_samples: usize,
    grid: &GridSpec,
    use_reported_pose: bool,
    seed: u64,
) -> Result<AugmentedScene> {
    probs.validate()?;
    if bank.is_empty() && n_samples > 0 {
        return Err(Error::EmptyBank);
    }
    let mut rng = stream_rng(seed, 0xD3A);
    let mut vehicle_cloud = pair.vehicle.cloud.clone();
    let mut infra_cloud = pair.infra.cloud.clone();
    let mut teacher_cloud = fuse_early(pair, use_reported_pose);
    let mut gt_boxes = pair.gt_boxes.clone();
    let mut accepted = Vec::new();
    let vehicle_to_infra = invert(&pair.infra_to_vehicle_true());

    for _ in 0..n_samples {
        let Some(bank_index) = draw_instance(bank, probs, &mut rng) else {
            continue;
        };
        let inst = &bank.instances[bank_index];
        // up to 10 placement attempts, zero footprint overlap required
        let mut placed: Option<Box3D> = None;
        for _attempt in 0..10 {
            let x = rng.random_range(grid.x_range.0..grid.x_range.1);
            let y = rng.random_range(grid.y_range.0..grid.y_range.1);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let candidate = Box3D::new(
                x,
                y,
                inst.box3d.z,
                inst.box3d.h,
                inst.box3d.w,
                inst.box3d.l,
                yaw,
            );
            if gt_boxes.iter().all(|b| rotated_iou(b, &candidate) == 0.0) {
                placed = Some(candidate);
                break;
            }
        }
        let Some(new_box) = placed else {
            continue;
        };
        let moved_v = reposition(&inst.points_v, &inst.box3d, &new_box);
        let moved_i = reposition(&inst.points_i, &inst.box3d, &new_box);
        vehicle_cloud.extend_from(&moved_v);
        teacher_cloud.extend_from(&moved_v);
        teacher_cloud.extend_from(&moved_i);
        let moved_i_infra = transform_points(&moved_i, &vehicle_to_infra)?;
        infra_cloud.extend_from(&moved_i_infra);
        accepted.push(AcceptedInjection {
            bank_index,
            box3d: new_box,
            n_v: moved_v.len(),
            n_i: moved_i.len(),
        });
        gt_boxes.push(new_box);
    }
    Ok(AugmentedScene {
        vehicle_cloud,
        infra_cloud,
        teacher_cloud,
        gt_boxes,
        accepted,
    })
}

/// Category by probability, uniform within; empty categories fall back to
/// fused, then to the first non-empty one.
fn draw_instance(bank: &InstanceBank, probs: DmaProbs, rng: &mut impl Rng) -> Option<usize> {
    let u: f64 = rng.random();
    let want = if u < probs.fused {
        Domain::Fused
    } else if u < probs.fused + probs.vehicle {
        Domain::Vehicle
    } else {
        Domain::Infra
    };
    let mut order = vec![want];
    if want != Domain::Fused {
        order.push(Domain::Fused);
    }
    for d in [Domain::Vehicle, Domain::Infra] {
        if !order.contains(&d) {
            order.push(d);
        }
    }
    for d in order {
        let pool = &bank.by_domain[domain_slot(d)];
        if !pool.is_empty() {
            let k = rng.random_range(0..pool.len());
            return Some(pool[k]);
        }
    }
    None
}

/// Rigidly carry points from the old box pose to the new one: rotate about
/// the old center by the yaw delta, then translate. Heights ride along.
fn reposition(cloud: &PointCloud, old: &Box3D, new: &Box3D) -> PointCloud {
    let (s, c) = (new.yaw - old.yaw).sin_cos();
    PointCloud::new(
        cloud
            .iter()
            .map(|p| {
                let dx = p[0] - old.x;
                let dy = p[1] - old.y;
                [
                    c * dx - s * dy + new.x,
                    s * dx + c * dy + new.y,
                    p[2] - old.z + new.z,
                    p[3],
                ]
            })
            .collect(),
    )
}

/// Write the bank next to a training run for inspection: a JSON manifest and
/// one pair of "DVPC" point files per instance.
pub fn export_bank(bank: &InstanceBank, dir: &std::path::Path) -> Result<()> {
    #[derive(Serialize)]
    struct Entry {
        index: usize,
        domain: Domain,
        n_v: usize,
        n_i: usize,
        box3d: [f64; 7],
        points_v: String,
        points_i: String,
    }
    let mut entries = Vec::with_capacity(bank.len());
    for (index, inst) in bank.instances.iter().enumerate() {
        let fv = format!("instance_{index}_v.dvpc");
        let fi = format!("instance_{index}_i.dvpc");
        crate::points::save_dvpc(&dir.join(&fv), &inst.points_v)?;
        crate::points::save_dvpc(&dir.join(&fi), &inst.points_i)?;
        entries.push(Entry {
            index,
            domain: inst.domain,
            n_v: inst.n_v,
            n_i: inst.n_i,
            box3d: inst.box3d.to_array(),
            points_v: fv,
            points_i: fi,
        });
    }
    #[derive(Serialize)]
    struct Manifest {
        tau_low: f64,
        tau_high: f64,
        instances: Vec<Entry>,
    }
    let manifest = Manifest {
        tau_low: bank.tau_low,
        tau_high: bank.tau_high,
        instances: entries,
    };
    std::fs::write(
        dir.join("bank.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}
