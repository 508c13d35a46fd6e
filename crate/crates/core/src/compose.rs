//! Two-pass reflective rendering: a base pass composites geometry, base color
//! and blend weight along camera rays; reflected rays spawned at the
//! composited surface then gather reflection color from the environment set;
//! the final image is the per-pixel convex blend of the two.
//!
//! The backward pass splits the image gradient along the same three paths and
//! routes the reflected-ray origin/direction gradients back into the base
//! pass through the surface position and the (renormalized) surface normal,
//! which is what couples environment appearance to base geometry.

use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::camera::CameraModel;
use crate::grad::{backward_rays, GradStore, RayGrad, SampleGrad};
use crate::math::{Vec3, Aabb};
use crate::primitives::GaussianSet;
use crate::tracer::{integrate_ray, Ray, RaySample, RenderOptions};
use crate::CoreError;

/// Thresholds of the reflective pass on top of the tracer options.
#[derive(Clone, Copy, Debug)]
pub struct ComposeOptions {
    pub render: RenderOptions,
    /// Reflected-ray origin offset along the surface normal, in units of the
    /// scene diagonal unless an absolute value is set.
    pub reflect_eps: Option<f64>,
    /// Spawn reflected rays only where accumulated alpha exceeds this.
    pub alpha_floor: f64,
    /// ... and where the composited blend weight exceeds this.
    pub beta_floor: f64,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions {
            render: RenderOptions::default(),
            reflect_eps: None,
            alpha_floor: 0.01,
            beta_floor: 0.001,
        }
    }
}

const EPS_DIAG_FACTOR: f64 = 1e-4;

/// Base-pass output: the per-pixel composited samples of the base set.
#[derive(Clone, Debug)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<RaySample>,
}

impl GBuffer {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Mirror `d_cam` about a unit normal. A zero normal (background sentinel)
/// yields no reflection.
pub fn reflect_direction(d_cam: Vec3, n: Vec3) -> Option<Vec3> {
    if n == Vec3::ZERO {
        return None;
    }
    Some(d_cam - n * (2.0 * d_cam.dot(n)))
}

/// Everything needed to recompute and differentiate one frame.
#[derive(Clone, Debug)]
pub struct ComposedFrame {
    pub width: usize,
    pub height: usize,
    pub gbuffer: GBuffer,
    /// Renormalized surface normals; zero where the base pass saw nothing.
    pub normal_unit: Vec<Vec3>,
    /// Reflection color per pixel (black where no ray was spawned).
    pub c_ref: Vec<[f64; 3]>,
    /// The reflected rays, recorded for the backward replay.
    pub refl_rays: Vec<Option<Ray>>,
    pub final_color: Vec<[f64; 3]>,
    /// Offset actually used for reflected-ray origins.
    pub eps_used: f64,
    pub opts: ComposeOptions,
    base_generation: u64,
    env_generation: Option<u64>,
}

impl ComposedFrame {
    pub fn final_image(&self) -> crate::imageio::Image {
        crate::imageio::Image::from_rgb_pixels(self.width, self.height, &self.final_color)
    }

    pub fn c_ref_image(&self) -> crate::imageio::Image {
        crate::imageio::Image::from_rgb_pixels(self.width, self.height, &self.c_ref)
    }

    pub fn c_base_image(&self) -> crate::imageio::Image {
        let pixels: Vec<[f64; 3]> = self.gbuffer.samples.iter().map(|s| s.color).collect();
        crate::imageio::Image::from_rgb_pixels(self.width, self.height, &pixels)
    }

    /// Alpha-normalized depth (zero where nothing was hit).
    pub fn depth_over_alpha(&self) -> Vec<f64> {
        self.gbuffer
            .samples
            .iter()
            .map(|s| if s.alpha > 0.0 { s.depth / s.alpha } else { 0.0 })
            .collect()
    }

    pub fn env_was_traced(&self) -> bool {
        self.env_generation.is_some()
    }
}

/// Base pass: composite the base set along all camera rays.
pub fn render_base(
    base_bvh: &Bvh,
    base: &GaussianSet,
    camera: &CameraModel,
    opts: &RenderOptions,
) -> GBuffer {
    let rays = camera.rays();
    let samples = crate::tracer::render_rays(base_bvh, base, &rays, opts);
    GBuffer {
        width: camera.width,
        height: camera.height,
        samples,
    }
}

fn renormalized_normals(gbuf: &GBuffer) -> Vec<Vec3> {
    gbuf.samples
        .iter()
        .map(|s| {
            let n = s.normal;
            let len = n.norm();
            if s.alpha > 0.0 && len > 1e-12 {
                n / len
            } else {
                Vec3::ZERO
            }
        })
        .collect()
}

/// Reflection pass: spawn a mirrored ray per qualifying pixel and integrate
/// the environment set along it.
pub fn render_reflection(
    env_bvh: &Bvh,
    env: &GaussianSet,
    gbuf: &GBuffer,
    normal_unit: &[Vec3],
    camera: &CameraModel,
    opts: &ComposeOptions,
    eps: f64,
) -> (Vec<[f64; 3]>, Vec<Option<Ray>>) {
    let rays = camera.rays();
    let spawned: Vec<Option<Ray>> = (0..gbuf.samples.len())
        .map(|i| {
            let s = &gbuf.samples[i];
            if s.alpha <= opts.alpha_floor || s.blend <= opts.beta_floor {
                return None;
            }
            let n = normal_unit[i];
            let dir = reflect_direction(rays[i].dir, n)?;
            Some(Ray::new(s.position + n * eps, dir))
        })
        .collect();
    let c_ref: Vec<[f64; 3]> = spawned
        .par_iter()
        .map(|maybe| match maybe {
            Some(ray) => integrate_ray(env_bvh, env, ray, &opts.render).color,
            None => [0.0; 3],
        })
        .collect();
    (c_ref, spawned)
}

/// Scene diagonal used for the default reflected-ray offset.
fn scene_diagonal(base_bvh: &Bvh, env_bvh: Option<&Bvh>) -> f64 {
    let mut b: Aabb = base_bvh.root_bounds();
    if let Some(e) = env_bvh {
        b.union(&e.root_bounds());
    }
    b.diagonal()
}

/// Full forward pipeline. With `env` absent (bootstrap phase, or the base-only
/// ablation) the final image is the base color alone and no blend is applied;
/// an *empty-but-present* environment set instead blends against black.
pub fn compose_frame(
    base_bvh: &Bvh,
    base: &GaussianSet,
    env: Option<(&Bvh, &GaussianSet)>,
    camera: &CameraModel,
    opts: &ComposeOptions,
) -> Result<ComposedFrame, CoreError> {
    crate::tracer::check_generation(base_bvh, base)?;
    if let Some((ebvh, eset)) = env {
        crate::tracer::check_generation(ebvh, eset)?;
    }
    let gbuffer = render_base(base_bvh, base, camera, &opts.render);
    let normal_unit = renormalized_normals(&gbuffer);
    let eps_used = opts
        .reflect_eps
        .unwrap_or_else(|| EPS_DIAG_FACTOR * scene_diagonal(base_bvh, env.map(|(b, _)| b)));

    let n_px = gbuffer.samples.len();
    let (c_ref, refl_rays) = match env {
        Some((ebvh, eset)) => {
            render_reflection(ebvh, eset, &gbuffer, &normal_unit, camera, opts, eps_used)
        }
        None => (vec![[0.0; 3]; n_px], vec![None; n_px]),
    };

    let final_color: Vec<[f64; 3]> = (0..n_px)
        .map(|i| {
            let s = &gbuffer.samples[i];
            if env.is_some() {
                let beta = s.blend;
                [
                    (1.0 - beta) * s.color[0] + beta * c_ref[i][0],
                    (1.0 - beta) * s.color[1] + beta * c_ref[i][1],
                    (1.0 - beta) * s.color[2] + beta * c_ref[i][2],
                ]
            } else {
                s.color
            }
        })
        .collect();

    Ok(ComposedFrame {
        width: camera.width,
        height: camera.height,
        gbuffer,
        normal_unit,
        c_ref,
        refl_rays,
        final_color,
        eps_used,
        opts: *opts,
        base_generation: base.generation(),
        env_generation: env.map(|(_, s)| s.generation()),
    })
}

/// Upstream gradients flowing into a composed frame.
#[derive(Clone, Debug, Default)]
pub struct FrameGrads {
    /// dL/d(final color), required.
    pub d_color: Vec<[f64; 3]>,
    /// dL/d(renormalized normal map), optional.
    pub d_normal_unit: Option<Vec<Vec3>>,
    /// dL/d(alpha-normalized depth map), optional.
    pub d_depth_over_alpha: Option<Vec<f64>>,
}

/// Backward pass of [`compose_frame`]: returns gradient stores for the base
/// set and (when traced) the environment set.
pub fn backward_frame(
    frame: &ComposedFrame,
    base_bvh: &Bvh,
    base: &GaussianSet,
    env: Option<(&Bvh, &GaussianSet)>,
    camera: &CameraModel,
    upstream: &FrameGrads,
) -> Result<(GradStore, Option<GradStore>), CoreError> {
    let n_px = frame.gbuffer.samples.len();
    if upstream.d_color.len() != n_px
        || frame.base_generation != base.generation()
        || frame.env_generation != env.map(|(_, s)| s.generation())
        || camera.width != frame.width
        || camera.height != frame.height
    {
        return Err(CoreError::StaleFrame);
    }
    crate::tracer::check_generation(base_bvh, base)?;
    if let Some((ebvh, eset)) = env {
        crate::tracer::check_generation(ebvh, eset)?;
    }

    // env pass first: reflected-ray gradients feed the base upstream
    let mut env_store = None;
    let mut refl_ray_grads: Vec<Option<RayGrad>> = vec![None; n_px];
    if let Some((ebvh, eset)) = env {
        let mut jobs: Vec<(Ray, SampleGrad)> = Vec::new();
        let mut job_px: Vec<usize> = Vec::new();
        for i in 0..n_px {
            if let Some(ray) = frame.refl_rays[i] {
                let beta = frame.gbuffer.samples[i].blend;
                let g = upstream.d_color[i];
                let up = SampleGrad {
                    color: [beta * g[0], beta * g[1], beta * g[2]],
                    ..SampleGrad::ZERO
                };
                jobs.push((ray, up));
                job_px.push(i);
            }
        }
        let (store, ray_grads) = backward_rays(ebvh, eset, &jobs, &frame.opts.render)?;
        for (slot, rg) in job_px.into_iter().zip(ray_grads) {
            refl_ray_grads[slot] = Some(rg);
        }
        env_store = Some(store);
    }

    // assemble base-pass upstream per pixel
    let rays = camera.rays();
    let env_present = env.is_some();
    let jobs: Vec<(Ray, SampleGrad)> = (0..n_px)
        .map(|i| {
            let s = &frame.gbuffer.samples[i];
            let g_final = upstream.d_color[i];
            let mut up = SampleGrad::ZERO;
            let mut d_normal_unit = upstream
                .d_normal_unit
                .as_ref()
                .map(|v| v[i])
                .unwrap_or(Vec3::ZERO);
            if env_present {
                let beta = s.blend;
                for ch in 0..3 {
                    up.color[ch] = (1.0 - beta) * g_final[ch];
                    up.blend += g_final[ch] * (frame.c_ref[i][ch] - s.color[ch]);
                }
                if let Some(rg) = refl_ray_grads[i] {
                    // origin = x + eps * n_hat; direction = mirror about n_hat
                    up.position += rg.d_origin;
                    d_normal_unit += rg.d_origin * frame.eps_used;
                    let n_hat = frame.normal_unit[i];
                    let d_cam = rays[i].dir;
                    let gd = rg.d_direction;
                    d_normal_unit +=
                        -2.0 * (d_cam * n_hat.dot(gd) + gd * d_cam.dot(n_hat));
                }
            } else {
                up.color = g_final;
            }
            // pull the unit-normal gradient back through the renormalization
            let n_comp = s.normal;
            let len = n_comp.norm();
            if s.alpha > 0.0 && len > 1e-12 && d_normal_unit != Vec3::ZERO {
                let n_hat = n_comp / len;
                up.normal += (d_normal_unit - n_hat * n_hat.dot(d_normal_unit)) / len;
            }
            if let Some(d_depth) = upstream.d_depth_over_alpha.as_ref() {
                // depth_map = depth / alpha
                if s.alpha > 0.0 && d_depth[i] != 0.0 {
                    up.depth += d_depth[i] / s.alpha;
                    up.alpha += -d_depth[i] * s.depth / (s.alpha * s.alpha);
                }
            }
            (rays[i], up)
        })
        .collect();

    let (base_store, _cam_ray_grads) = backward_rays(base_bvh, base, &jobs, &frame.opts.render)?;
    Ok((base_store, env_store))
}
