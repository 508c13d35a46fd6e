//! Front-to-back volume integration of surfels along arbitrary rays, consuming
//! depth-sorted hit chunks from the BVH until the ray is exhausted or the
//! transmittance budget is spent.

use rayon::prelude::*;

use crate::bvh::{Bvh, Hit, HitBuffer};
use crate::math::{Vec3, QUAT_IDENTITY};
use crate::primitives::{eval_sh_unchecked, GaussianSet, SetKind};
use crate::CoreError;

/// Contributions with alpha below this are skipped outright; together with the
/// 3-sigma proxy cutoff this keeps low-opacity surfel silhouettes from
/// introducing jump discontinuities.
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
/// Upper clamp on per-hit alpha; keeps `1 - alpha` away from zero in the
/// backward recurrence.
pub const ALPHA_CLAMP: f64 = 0.999;

/// A ray with origin, unit direction, and near clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_min: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Ray {
        Ray {
            origin,
            dir,
            t_min: 0.0,
        }
    }
}

/// Tunables of a single integration pass.
#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    /// k-buffer capacity per traversal chunk.
    pub k: usize,
    /// Stop integrating once transmittance falls below this.
    pub transmittance_min: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            k: crate::bvh::DEFAULT_K,
            transmittance_min: 1e-4,
        }
    }
}

/// Per-ray accumulators of Eq.-style front-to-back compositing: color plus the
/// geometry payload (normal, position, depth, blend weight) needed by the
/// reflective second pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub color: [f64; 3],
    pub transmittance: f64,
    pub depth: f64,
    pub normal: Vec3,
    pub position: Vec3,
    pub blend: f64,
    pub alpha: f64,
}

impl RaySample {
    pub fn empty() -> RaySample {
        RaySample {
            color: [0.0; 3],
            transmittance: 1.0,
            depth: 0.0,
            normal: Vec3::ZERO,
            position: Vec3::ZERO,
            blend: 0.0,
            alpha: 0.0,
        }
    }
}

/// Everything the compositor needs from one accepted hit.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ShadedHit {
    pub prim: u32,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    pub gauss: f64,
    pub alpha: f64,
    /// True when alpha sits at [`ALPHA_CLAMP`] and carries no opacity gradient.
    pub clamped: bool,
    pub rgb: [f64; 3],
    pub x: Vec3,
    /// Camera-facing unit normal.
    pub normal: Vec3,
    /// +1/-1 flip applied to the geometric normal.
    pub flip: f64,
    pub blend: f64,
}

/// Evaluate one buffered hit against the activated geometry. `None` when the
/// contribution falls under [`ALPHA_SKIP`].
#[inline]
pub(crate) fn shade_hit(bvh: &Bvh, set: &GaussianSet, ray: &Ray, hit: Hit) -> Option<ShadedHit> {
    let geom = &bvh.geom[hit.prim as usize];
    let x = ray.origin + ray.dir * hit.t;
    let m = x - geom.center;
    let u = geom.tu.dot(m) * geom.inv_su;
    let v = geom.tv.dot(m) * geom.inv_sv;
    let gauss = (-(u * u + v * v) / 2.0).exp();
    let raw_alpha = geom.opacity * gauss;
    if raw_alpha < ALPHA_SKIP {
        return None;
    }
    let clamped = raw_alpha > ALPHA_CLAMP;
    let alpha = if clamped { ALPHA_CLAMP } else { raw_alpha };
    let rgb = eval_sh_unchecked(&set.sh[hit.prim as usize], ray.dir);
    let flip = if geom.normal.dot(ray.dir) > 0.0 {
        -1.0
    } else {
        1.0
    };
    let blend = if set.kind() == SetKind::Base {
        crate::math::sigmoid(set.raw_blends[hit.prim as usize])
    } else {
        0.0
    };
    Some(ShadedHit {
        prim: hit.prim,
        t: hit.t,
        u,
        v,
        gauss,
        alpha,
        clamped,
        rgb,
        x,
        normal: geom.normal * flip,
        flip,
        blend,
    })
}

/// Walk the ray chunk by chunk, invoking `visit` for every accepted hit in
/// global depth order with the transmittance *before* the hit. `visit`
/// returns the updated transmittance; traversal ends when it drops below the
/// threshold or the hits run out. Forward pass and backward replays share
/// this loop so they see bit-identical hit sequences.
pub(crate) fn walk_ray(
    bvh: &Bvh,
    set: &GaussianSet,
    ray: &Ray,
    opts: &RenderOptions,
    mut visit: impl FnMut(&ShadedHit, f64) -> f64,
) {
    debug_assert!(bvh.has_geom(), "integrate over a BVH built without geometry");
    let mut buf = HitBuffer::new(opts.k);
    let mut cursor = (ray.t_min, u32::MAX);
    let mut transmittance = 1.0;
    loop {
        bvh.collect_chunk(ray, cursor, &mut buf);
        if buf.is_empty() {
            return;
        }
        for &hit in buf.hits() {
            if let Some(shaded) = shade_hit(bvh, set, ray, hit) {
                transmittance = visit(&shaded, transmittance);
                if transmittance < opts.transmittance_min {
                    return;
                }
            }
        }
        if !buf.is_full() {
            return;
        }
        let last = *buf.hits().last().unwrap();
        cursor = (last.t, last.prim);
    }
}

/// Integrate all surfel contributions along a ray (volume rendering in
/// front-to-back order).
pub fn integrate_ray(bvh: &Bvh, set: &GaussianSet, ray: &Ray, opts: &RenderOptions) -> RaySample {
    let mut s = RaySample::empty();
    walk_ray(bvh, set, ray, opts, |hit, t_before| {
        let w = t_before * hit.alpha;
        for ch in 0..3 {
            s.color[ch] += w * hit.rgb[ch];
        }
        s.normal += hit.normal * w;
        s.position += hit.x * w;
        s.depth += hit.t * w;
        s.blend += hit.blend * w;
        s.alpha += w;
        let t_after = t_before * (1.0 - hit.alpha);
        s.transmittance = t_after;
        t_after
    });
    s
}

/// Element-wise [`integrate_ray`] over a batch; output order matches input.
/// Rays are independent, so parallel and sequential execution agree bitwise.
pub fn render_rays(
    bvh: &Bvh,
    set: &GaussianSet,
    rays: &[Ray],
    opts: &RenderOptions,
) -> Vec<RaySample> {
    if rays.len() < 64 {
        rays.iter().map(|r| integrate_ray(bvh, set, r, opts)).collect()
    } else {
        rays.par_iter()
            .map(|r| integrate_ray(bvh, set, r, opts))
            .collect()
    }
}

/// Guard shared by the backward entry points: the BVH must describe the set
/// exactly as the forward pass saw it.
pub(crate) fn check_generation(bvh: &Bvh, set: &GaussianSet) -> Result<(), CoreError> {
    match bvh.generation() {
        Some(g) if g == set.generation() => Ok(()),
        got => Err(CoreError::StaleGeneration {
            bvh: got.unwrap_or(0),
            set: set.generation(),
        }),
    }
}

/// Convenience constructor for tests and synthetic scenes: a surfel with the
/// identity frame at a center.
pub fn axis_aligned_surfel(center: Vec3) -> crate::primitives::Gaussian2D {
    crate::primitives::Gaussian2D {
        center,
        rotation: QUAT_IDENTITY,
        log_scales: [0.0, 0.0],
        raw_opacity: 0.0,
        sh_coeffs: [0.0; 27],
        raw_blend: None,
    }
}
