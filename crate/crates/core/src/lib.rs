//! Two-agent collaborative bird's-eye-view object detection with
//! teacher-student feature distillation, end to end on synthetic LiDAR data.
//!
//! A vehicle and a road-side infrastructure unit each carry a different LiDAR
//! sensor and observe the same scene from different viewpoints. The crate
//! provides everything needed to train and evaluate a fused BEV detector on
//! that setup at desk scale:
//!
//! - [`geom`] — exact BEV/3D geometry: rigid transforms, convex polygon
//!   clipping, mask rasterization, rotated IoU, NMS.
//! - [`sim`] — a deterministic two-agent LiDAR scene simulator with per-agent
//!   sensor models, occlusion, and pose noise.
//! - [`dma`] — the domain-mixing instance bank and consistent teacher/student
//!   instance injection.
//! - [`nn`] — a small dense-tensor engine with reverse-mode autodiff, just the
//!   operators the pipeline needs, each checked against finite differences.
//! - [`pipeline`] — pillar BEV encoder, offset-corrected adaptive fusion,
//!   and the anchor-free detection head.
//! - [`distill`] — masked feature distillation losses, detection loss, and
//!   the two-phase teacher/student training loops.
//! - [`eval`] — average precision, the fusion-paradigm baseline suite, and
//!   the ablation runner.
//!
//! Everything is seeded and single-threaded where it matters: the same seeds
//! produce bit-identical checkpoints and reports.

pub mod dma;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod pipeline;
pub mod points;
pub mod seeding;
pub mod sim;

pub use error::{Error, Result};

// Keep the guide's code snippets compiling: every fenced Rust block in the
// book runs as a doctest of this crate.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(geometry, "../../../book/src/geometry.md");
    chapter!(simulator, "../../../book/src/simulator.md");
    chapter!(instance_mixing, "../../../book/src/instance-mixing.md");
    chapter!(tensor_engine, "../../../book/src/tensor-engine.md");
    chapter!(models_and_fusion, "../../../book/src/models-and-fusion.md");
    chapter!(distillation, "../../../book/src/distillation.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
}
