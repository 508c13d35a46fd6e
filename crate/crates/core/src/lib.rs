//! Differentiable ray tracer for reflective 2D Gaussian surfel scenes.
//!
//! A scene is two surfel sets: a *base* set carrying geometry, base color and
//! per-surfel blend weights, and an *environment* set hit only by reflected
//! rays. Rendering composites the base set along camera rays, mirrors each
//! ray about the composited surface normal, traces the environment set along
//! the reflected ray, and blends the two colors per pixel. The whole pipeline
//! has an analytic backward pass — including gradients for reflected-ray
//! origins and directions — validated against central finite differences, so
//! both sets optimize jointly from images.
//!
//! Module map:
//! - [`math`]: fixed-size `f64` linear algebra, quaternion frames + jacobians
//! - [`primitives`]: surfels, tangent transforms, triangle proxies, SH colors
//! - [`bvh`] / [`tracer`]: binned-SAH BVH and chunked k-buffer integration
//! - [`grad`]: front-to-back analytic backward pass for the tracer
//! - [`compose`]: the two-pass reflective pipeline, forward and backward
//! - [`loss`]: L1 + D-SSIM photometric loss and the two normal losses
//! - [`optim`]: optimizer, schedules, densification, the training driver
//! - [`camera`], [`imageio`], [`ply`], [`scene`], [`synth`], [`metrics`]:
//!   file formats, synthetic scenes and quality metrics

pub mod bvh;
pub mod camera;
pub mod compose;
pub mod grad;
pub mod imageio;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod ply;
pub mod primitives;
pub mod reference;
pub mod scene;
pub mod synth;
pub mod tracer;

pub use bvh::{build_bvh, next_chunk, Bvh, Hit, HitBuffer};
pub use math::{Vec3, vec3};
pub use primitives::{
    build_transform, eval_sh, gaussian_value, invert_to_local, surfel_normal, triangle_proxy,
    Gaussian2D, GaussianSet, SetKind, TangentTransform, TriangleProxy,
};
pub use tracer::{integrate_ray, render_rays, Ray, RaySample, RenderOptions};

/// Errors from geometry, tracing and gradient entry points.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("direction has norm {0}, expected unit length")]
    NonUnitDirection(f64),
    #[error("cannot build a BVH over an empty primitive set")]
    EmptyBvh,
    #[error("stale BVH: built at generation {bvh}, set is at {set}")]
    StaleGeneration { bvh: u64, set: u64 },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("frame was produced from different sets or options")]
    StaleFrame,
    #[error("{0}")]
    Invalid(String),
}
