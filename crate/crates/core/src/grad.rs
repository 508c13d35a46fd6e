//! Analytic backward pass for the ray tracer.
//!
//! The forward pass is replayed front-to-back by re-casting the ray instead of
//! storing intersections: a first replay recovers the total upstream-weighted
//! contribution, the second reconstructs each transmittance and alpha
//! incrementally and keeps a running prefix so the suffix needed by
//! `dL/d(alpha_i)` is available without back-to-front storage. Transient state
//! is O(k) per ray.
//!
//! Gradients flow to every raw surfel parameter and to the ray origin and
//! direction through the plane-intersection depth `t = n.(v1 - o) / n.d`,
//! which is what lets reflection appearance drive base-set geometry.

use rayon::prelude::*;

use crate::bvh::Bvh;
use crate::math::{quat_frame_jacobian, quat_normalize_pullback, quat_normalized, Vec3};
use crate::primitives::{sh_basis, sh_basis_grad, GaussianSet, SetKind, SH_PER_CHANNEL};
use crate::tracer::{check_generation, walk_ray, Ray, RenderOptions};
use crate::CoreError;

/// Per-parameter gradient accumulators mirroring a [`GaussianSet`]'s raw
/// parameters, plus the densification statistics.
#[derive(Clone, Debug)]
pub struct GradStore {
    pub d_centers: Vec<Vec3>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_log_scales: Vec<[f64; 2]>,
    pub d_raw_opacities: Vec<f64>,
    pub d_sh: Vec<[f64; 27]>,
    /// Empty for env sets.
    pub d_raw_blends: Vec<f64>,
    /// Accumulated positional-gradient norms, each contribution scaled by half
    /// its intersection depth so distant surfels still densify.
    pub pos_grad_norm: Vec<f64>,
    pub hit_counts: Vec<u32>,
    /// Accumulated rendering weights (`T * alpha` per hit); ranks env surfels
    /// for cap pruning.
    pub weight_accum: Vec<f64>,
}

impl GradStore {
    pub fn zeros(set: &GaussianSet) -> GradStore {
        let n = set.len();
        GradStore {
            d_centers: vec![Vec3::ZERO; n],
            d_rotations: vec![[0.0; 4]; n],
            d_log_scales: vec![[0.0; 2]; n],
            d_raw_opacities: vec![0.0; n],
            d_sh: vec![[0.0; 27]; n],
            d_raw_blends: if set.kind() == SetKind::Base {
                vec![0.0; n]
            } else {
                Vec::new()
            },
            pos_grad_norm: vec![0.0; n],
            hit_counts: vec![0; n],
            weight_accum: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_centers.is_empty()
    }

    pub fn reset(&mut self) {
        self.d_centers.fill(Vec3::ZERO);
        self.d_rotations.fill([0.0; 4]);
        self.d_log_scales.fill([0.0; 2]);
        self.d_raw_opacities.fill(0.0);
        self.d_sh.fill([0.0; 27]);
        self.d_raw_blends.fill(0.0);
        self.pos_grad_norm.fill(0.0);
        self.hit_counts.fill(0);
        self.weight_accum.fill(0.0);
    }

    /// Merge another store of the same shape; reduction order is fixed by the
    /// caller so gradients stay reproducible.
    pub fn merge(&mut self, other: &GradStore) {
        debug_assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.d_centers[i] += other.d_centers[i];
            for c in 0..4 {
                self.d_rotations[i][c] += other.d_rotations[i][c];
            }
            for c in 0..2 {
                self.d_log_scales[i][c] += other.d_log_scales[i][c];
            }
            self.d_raw_opacities[i] += other.d_raw_opacities[i];
            for c in 0..27 {
                self.d_sh[i][c] += other.d_sh[i][c];
            }
            self.pos_grad_norm[i] += other.pos_grad_norm[i];
            self.hit_counts[i] += other.hit_counts[i];
            self.weight_accum[i] += other.weight_accum[i];
        }
        for i in 0..self.d_raw_blends.len() {
            self.d_raw_blends[i] += other.d_raw_blends[i];
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.d_centers.iter().all(|v| *v == Vec3::ZERO)
            && self.d_rotations.iter().all(|q| q.iter().all(|x| *x == 0.0))
            && self.d_log_scales.iter().all(|s| s.iter().all(|x| *x == 0.0))
            && self.d_raw_opacities.iter().all(|x| *x == 0.0)
            && self.d_sh.iter().all(|c| c.iter().all(|x| *x == 0.0))
            && self.d_raw_blends.iter().all(|x| *x == 0.0)
    }
}

/// Gradient of a scalar loss with respect to the traced ray.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayGrad {
    pub d_origin: Vec3,
    pub d_direction: Vec3,
}

impl RayGrad {
    pub const ZERO: RayGrad = RayGrad {
        d_origin: Vec3::ZERO,
        d_direction: Vec3::ZERO,
    };

    pub fn is_finite(&self) -> bool {
        self.d_origin.is_finite() && self.d_direction.is_finite()
    }
}

/// Upstream gradients for every composited output of [`crate::integrate_ray`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleGrad {
    pub color: [f64; 3],
    pub normal: Vec3,
    pub position: Vec3,
    pub depth: f64,
    pub blend: f64,
    pub alpha: f64,
}

impl SampleGrad {
    pub const ZERO: SampleGrad = SampleGrad {
        color: [0.0; 3],
        normal: Vec3::ZERO,
        position: Vec3::ZERO,
        depth: 0.0,
        blend: 0.0,
        alpha: 0.0,
    };

    pub fn scaled(&self, a: f64) -> SampleGrad {
        SampleGrad {
            color: [self.color[0] * a, self.color[1] * a, self.color[2] * a],
            normal: self.normal * a,
            position: self.position * a,
            depth: self.depth * a,
            blend: self.blend * a,
            alpha: self.alpha * a,
        }
    }
}

/// Gradients of the plane-intersection depth `t = n.(v1 - o) / (n.d)` with
/// respect to the ray origin and direction. A grazing denominator returns
/// zeros, matching the forward skip of edge-on surfels.
pub fn intersection_depth_grads(
    v1: Vec3,
    normal_tri: Vec3,
    origin: Vec3,
    dir: Vec3,
) -> (Vec3, Vec3) {
    let denom = normal_tri.dot(dir);
    if denom.abs() <= 1e-9 {
        return (Vec3::ZERO, Vec3::ZERO);
    }
    let t = normal_tri.dot(v1 - origin) / denom;
    let dt_do = -normal_tri / denom;
    let dt_dd = -normal_tri * (t / denom);
    (dt_do, dt_dd)
}

/// Record one hit's positional-gradient contribution for densification.
pub fn accumulate_densify_stats(
    grads: &mut GradStore,
    surfel_id: usize,
    position_grad: Vec3,
    t_hit: f64,
) {
    grads.pos_grad_norm[surfel_id] += position_grad.norm() * t_hit / 2.0;
    grads.hit_counts[surfel_id] += 1;
}

/// Backward pass of [`crate::integrate_ray`]: re-traverses the ray in forward
/// order, accumulates gradients for every surfel parameter into `grads`, and
/// returns the gradients with respect to the ray origin and direction.
///
/// Fails when the BVH no longer matches the set (the forward pass would not
/// be reproducible).
pub fn backward_ray(
    bvh: &Bvh,
    set: &GaussianSet,
    ray: &Ray,
    upstream: &SampleGrad,
    grads: &mut GradStore,
    opts: &RenderOptions,
) -> Result<RayGrad, CoreError> {
    check_generation(bvh, set)?;
    if upstream.color == [0.0; 3]
        && upstream.normal == Vec3::ZERO
        && upstream.position == Vec3::ZERO
        && upstream.depth == 0.0
        && upstream.blend == 0.0
        && upstream.alpha == 0.0
    {
        return Ok(RayGrad::ZERO);
    }

    // replay 1: total upstream-weighted contribution of all integrated hits
    let mut total = 0.0;
    walk_ray(bvh, set, ray, opts, |hit, t_before| {
        let w = t_before * hit.alpha;
        total += w * hit_payload(hit, upstream);
        t_before * (1.0 - hit.alpha)
    });

    // replay 2: per-hit adjoints with the running prefix
    let mut prefix = 0.0;
    let mut ray_grad = RayGrad::ZERO;
    let is_base = set.kind() == SetKind::Base;
    walk_ray(bvh, set, ray, opts, |hit, t_before| {
        let prim = hit.prim as usize;
        let geom = &bvh.geom[prim];
        let w = t_before * hit.alpha;
        let payload = hit_payload(hit, upstream);
        prefix += w * payload;
        let suffix = total - prefix;
        let alpha_bar = t_before * payload - suffix / (1.0 - hit.alpha);

        // direct upstream adjoints of this hit's composited quantities
        let c_bar = [
            w * upstream.color[0],
            w * upstream.color[1],
            w * upstream.color[2],
        ];
        let nhat_bar = upstream.normal * w;
        let mut x_bar = upstream.position * w;
        let mut t_bar = upstream.depth * w;

        // alpha = sigma * G, clamped: no opacity/response gradient when pinned
        let (sigma_bar, g_bar) = if hit.clamped {
            (0.0, 0.0)
        } else {
            (alpha_bar * hit.gauss, alpha_bar * geom.opacity)
        };

        // G = exp(-(u^2+v^2)/2)
        let u_bar = -hit.u * hit.gauss * g_bar;
        let v_bar = -hit.v * hit.gauss * g_bar;

        // u = t_u.(x - p) / s_u, v analogously
        let m = hit.x - geom.center;
        let m_bar = geom.tu * (u_bar * geom.inv_su) + geom.tv * (v_bar * geom.inv_sv);
        let tu_bar = m * (u_bar * geom.inv_su);
        let tv_bar = m * (v_bar * geom.inv_sv);
        let d_log_su = -u_bar * hit.u;
        let d_log_sv = -v_bar * hit.v;

        let mut p_bar = -m_bar;
        x_bar += m_bar;

        // x = o + t d
        t_bar += x_bar.dot(ray.dir);
        ray_grad.d_origin += x_bar;
        ray_grad.d_direction += x_bar * hit.t;

        // t = n.(p - o) / (n.d); triangle and surfel planes coincide
        let denom = geom.normal.dot(ray.dir);
        p_bar += geom.normal * (t_bar / denom);
        ray_grad.d_origin -= geom.normal * (t_bar / denom);
        ray_grad.d_direction -= geom.normal * (t_bar * hit.t / denom);
        let mut n_bar = m * (-t_bar / denom);

        // composited normal is the camera-facing unit column
        n_bar += nhat_bar * hit.flip;

        // SH color; the zero clamp gates each channel
        let basis = sh_basis(ray.dir);
        let basis_grad = sh_basis_grad(ray.dir);
        let sh = &set.sh[prim];
        let d_sh = &mut grads.d_sh[prim];
        for ch in 0..3 {
            if hit.rgb[ch] <= 0.0 {
                continue;
            }
            let cb = c_bar[ch];
            if cb == 0.0 {
                continue;
            }
            for k in 0..SH_PER_CHANNEL {
                d_sh[ch * SH_PER_CHANNEL + k] += cb * basis[k];
                ray_grad.d_direction += basis_grad[k] * (cb * sh[ch * SH_PER_CHANNEL + k]);
            }
        }

        // rotation: assemble frame-column adjoints, pull back through the
        // normalized quaternion to the raw one
        let q_raw = &set.rotations[prim];
        let qn = quat_normalized(q_raw);
        let jac = quat_frame_jacobian(&qn);
        let mut gqn = [0.0; 4];
        for (cmp, g) in gqn.iter_mut().enumerate() {
            *g = jac[cmp][0].dot(tu_bar) + jac[cmp][1].dot(tv_bar) + jac[cmp][2].dot(n_bar);
        }
        let gq = quat_normalize_pullback(q_raw, &gqn);
        for c in 0..4 {
            grads.d_rotations[prim][c] += gq[c];
        }

        grads.d_centers[prim] += p_bar;
        grads.d_log_scales[prim][0] += d_log_su;
        grads.d_log_scales[prim][1] += d_log_sv;
        let sigma = geom.opacity;
        grads.d_raw_opacities[prim] += sigma_bar * sigma * (1.0 - sigma);
        if is_base {
            let beta = hit.blend;
            grads.d_raw_blends[prim] += w * upstream.blend * beta * (1.0 - beta);
        }

        accumulate_densify_stats(grads, prim, p_bar, hit.t);
        grads.weight_accum[prim] += w;

        t_before * (1.0 - hit.alpha)
    });

    Ok(ray_grad)
}

/// Upstream-weighted payload of one hit: the scalar whose transmittance-
/// weighted sum over hits is the loss restricted to this ray.
#[inline]
fn hit_payload(hit: &crate::tracer::ShadedHit, g: &SampleGrad) -> f64 {
    g.color[0] * hit.rgb[0]
        + g.color[1] * hit.rgb[1]
        + g.color[2] * hit.rgb[2]
        + g.normal.dot(hit.normal)
        + g.position.dot(hit.x)
        + g.depth * hit.t
        + g.blend * hit.blend
        + g.alpha
}

/// Batched backward over many rays with deterministic reduction: rays are cut
/// into fixed-size blocks independent of thread count, each block accumulates
/// into its own store, and blocks merge in index order.
pub fn backward_rays(
    bvh: &Bvh,
    set: &GaussianSet,
    rays_upstream: &[(Ray, SampleGrad)],
    opts: &RenderOptions,
) -> Result<(GradStore, Vec<RayGrad>), CoreError> {
    check_generation(bvh, set)?;
    const BLOCK: usize = 2048;
    let blocks: Vec<(GradStore, Vec<RayGrad>)> = rays_upstream
        .par_chunks(BLOCK)
        .map(|chunk| {
            let mut store = GradStore::zeros(set);
            let mut ray_grads = Vec::with_capacity(chunk.len());
            for (ray, up) in chunk {
                let rg = backward_ray(bvh, set, ray, up, &mut store, opts)
                    .expect("generation checked above");
                ray_grads.push(rg);
            }
            (store, ray_grads)
        })
        .collect();
    let mut master = GradStore::zeros(set);
    let mut all_ray_grads = Vec::with_capacity(rays_upstream.len());
    for (store, rgs) in &blocks {
        master.merge(store);
        all_ray_grads.extend_from_slice(rgs);
    }
    Ok((master, all_ray_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{logit, vec3, QUAT_IDENTITY};
    use crate::primitives::{Gaussian2D, SH_C0};
    use crate::tracer::integrate_ray;

    fn simple_set() -> GaussianSet {
        let mut set = GaussianSet::new(SetKind::Env);
        let mut g = Gaussian2D {
            center: vec3(0.0, 0.0, 2.0),
            rotation: QUAT_IDENTITY,
            log_scales: [0.0, 0.0],
            raw_opacity: logit(0.3),
            sh_coeffs: [0.0; 27],
            raw_blend: None,
        };
        g.sh_coeffs[0] = 0.4;
        g.sh_coeffs[9] = -0.2;
        g.sh_coeffs[18] = 0.1;
        set.push(g);
        set
    }

    #[test]
    fn zero_upstream_yields_zero_gradients() {
        let set = simple_set();
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray::new(Vec3::ZERO, vec3(0.0, 0.0, 1.0));
        let mut grads = GradStore::zeros(&set);
        let rg = backward_ray(
            &bvh,
            &set,
            &ray,
            &SampleGrad::ZERO,
            &mut grads,
            &RenderOptions::default(),
        )
        .unwrap();
        assert_eq!(rg, RayGrad::ZERO);
        // densify stats still log the visit, parameter gradients stay zero
        assert!(grads.is_all_zero());
    }

    #[test]
    fn dc_color_gradient_closed_form() {
        // single surfel centered on the ray: dL/d(dc_red) = T * alpha * C0
        let set = simple_set();
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray::new(Vec3::ZERO, vec3(0.0, 0.0, 1.0));
        let sample = integrate_ray(&bvh, &set, &ray, &RenderOptions::default());
        let up = SampleGrad {
            color: [1.0, 0.0, 0.0],
            ..SampleGrad::ZERO
        };
        let mut grads = GradStore::zeros(&set);
        backward_ray(&bvh, &set, &ray, &up, &mut grads, &RenderOptions::default()).unwrap();
        let expect = sample.alpha * SH_C0; // T = 1 before the only hit
        assert!(
            (grads.d_sh[0][0] - expect).abs() < 1e-12,
            "{} vs {}",
            grads.d_sh[0][0],
            expect
        );
        assert_eq!(grads.d_sh[0][9], 0.0);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let set = simple_set();
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray::new(vec3(0.2, -0.3, 0.0), vec3(0.02, 0.01, 1.0).normalized());
        let up = SampleGrad {
            color: [0.3, -0.2, 0.5],
            normal: vec3(0.1, 0.2, -0.3),
            position: vec3(-0.4, 0.1, 0.2),
            depth: 0.7,
            blend: 0.0,
            alpha: -0.6,
        };
        let opts = RenderOptions::default();
        let mut g1 = GradStore::zeros(&set);
        let r1 = backward_ray(&bvh, &set, &ray, &up, &mut g1, &opts).unwrap();
        let mut g2 = GradStore::zeros(&set);
        let r2 = backward_ray(&bvh, &set, &ray, &up.scaled(2.5), &mut g2, &opts).unwrap();
        assert!((r2.d_origin - r1.d_origin * 2.5).norm() < 1e-12);
        assert!((r2.d_direction - r1.d_direction * 2.5).norm() < 1e-12);
        assert!((g2.d_centers[0] - g1.d_centers[0] * 2.5).norm() < 1e-12);
        for c in 0..27 {
            assert!((g2.d_sh[0][c] - g1.d_sh[0][c] * 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_generation_rejected() {
        let mut set = simple_set();
        let bvh = Bvh::build(&set).unwrap();
        set.bump_generation();
        let ray = Ray::new(Vec3::ZERO, vec3(0.0, 0.0, 1.0));
        let mut grads = GradStore::zeros(&set);
        let err = backward_ray(
            &bvh,
            &set,
            &ray,
            &SampleGrad::ZERO,
            &mut grads,
            &RenderOptions::default(),
        );
        assert!(matches!(err, Err(CoreError::StaleGeneration { .. })));
    }

    #[test]
    fn backward_visits_forward_hit_sequence() {
        // 30 jittered surfels; replays must see the same surfels in the same
        // order as the forward pass
        let mut set = GaussianSet::new(SetKind::Env);
        let mut state = 0x5eedu64;
        let mut rnd = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for i in 0..30 {
            let mut g = crate::tracer::axis_aligned_surfel(vec3(
                rnd() * 0.8 - 0.4,
                rnd() * 0.8 - 0.4,
                1.0 + i as f64 * 0.3 + rnd() * 0.1,
            ));
            g.raw_opacity = logit(0.05 + rnd() * 0.25);
            set.push(g);
        }
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray::new(Vec3::ZERO, vec3(0.0, 0.0, 1.0));
        let opts = RenderOptions {
            k: 4,
            ..Default::default()
        };
        let mut forward_ids = Vec::new();
        walk_ray(&bvh, &set, &ray, &opts, |hit, t| {
            forward_ids.push(hit.prim);
            t * (1.0 - hit.alpha)
        });
        let mut replay_ids = Vec::new();
        walk_ray(&bvh, &set, &ray, &opts, |hit, t| {
            replay_ids.push(hit.prim);
            t * (1.0 - hit.alpha)
        });
        assert!(!forward_ids.is_empty());
        assert_eq!(forward_ids, replay_ids);
    }

    #[test]
    fn depth_grads_axis_aligned_closed_form() {
        let n = vec3(0.0, 0.0, 1.0);
        let v1 = vec3(0.0, 0.0, 1.0);
        let (dt_do, dt_dd) = intersection_depth_grads(v1, n, Vec3::ZERO, vec3(0.0, 0.0, 1.0));
        assert!((dt_do - vec3(0.0, 0.0, -1.0)).norm() < 1e-15);
        // t = 1 here, so dt/dd = -n * t / (n.d) = (0,0,-1)
        assert!((dt_dd - vec3(0.0, 0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn depth_grads_sign_consistency() {
        // moving the origin toward the plane shortens t at rate -1
        let n = vec3(0.0, 0.0, 1.0);
        let v1 = vec3(0.0, 0.0, 1.0);
        let h = 1e-6;
        let t0 = n.dot(v1 - vec3(0.0, 0.0, h)) / 1.0;
        let t1 = n.dot(v1 - vec3(0.0, 0.0, -h)) / 1.0;
        assert!(((t0 - t1) / (2.0 * h) + 1.0).abs() < 1e-9);
        let (dt_do, _) = intersection_depth_grads(v1, n, Vec3::ZERO, vec3(0.0, 0.0, 1.0));
        assert!((dt_do.z + 1.0).abs() < 1e-15);
    }

    #[test]
    fn depth_grads_match_finite_differences_random() {
        let mut state = 0xabcdeu64;
        let mut rnd = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..200 {
            let n = vec3(rnd(), rnd(), rnd()).normalized();
            let v1 = vec3(rnd() * 4.0, rnd() * 4.0, rnd() * 4.0);
            let o = vec3(rnd() * 4.0, rnd() * 4.0, rnd() * 4.0);
            let d = vec3(rnd(), rnd(), rnd()).normalized();
            if n.dot(d).abs() < 0.1 {
                continue;
            }
            let t_of = |o: Vec3, d: Vec3| n.dot(v1 - o) / n.dot(d);
            let (dt_do, dt_dd) = intersection_depth_grads(v1, n, o, d);
            let h = 1e-6;
            for axis in 0..3 {
                let mut e = Vec3::ZERO;
                match axis {
                    0 => e.x = h,
                    1 => e.y = h,
                    _ => e.z = h,
                }
                let fd_o = (t_of(o + e, d) - t_of(o - e, d)) / (2.0 * h);
                let fd_d = (t_of(o, d + e) - t_of(o, d - e)) / (2.0 * h);
                assert!((fd_o - dt_do.axis(axis)).abs() < 1e-6 * (1.0 + fd_o.abs()));
                assert!((fd_d - dt_dd.axis(axis)).abs() < 1e-6 * (1.0 + fd_d.abs()));
            }
        }
    }

    #[test]
    fn depth_grads_grazing_returns_zero() {
        let n = vec3(0.0, 0.0, 1.0);
        let (a, b) = intersection_depth_grads(n, n, Vec3::ZERO, vec3(1.0, 0.0, 0.0));
        assert_eq!(a, Vec3::ZERO);
        assert_eq!(b, Vec3::ZERO);
    }

    #[test]
    fn densify_stats_depth_scaling() {
        let set = simple_set();
        let mut grads = GradStore::zeros(&set);
        accumulate_densify_stats(&mut grads, 0, vec3(1.0, 0.0, 0.0), 2.0);
        assert!((grads.pos_grad_norm[0] - 1.0).abs() < 1e-15);
        assert_eq!(grads.hit_counts[0], 1);
        accumulate_densify_stats(&mut grads, 0, Vec3::ZERO, 5.0);
        assert!((grads.pos_grad_norm[0] - 1.0).abs() < 1e-15);
        // equal gradient norms at t and 2t: second adds exactly twice
        let mut g2 = GradStore::zeros(&set);
        accumulate_densify_stats(&mut g2, 0, vec3(0.0, 0.3, 0.4), 1.0);
        let first = g2.pos_grad_norm[0];
        accumulate_densify_stats(&mut g2, 0, vec3(0.3, 0.0, 0.4), 2.0);
        assert!((g2.pos_grad_norm[0] - 3.0 * first).abs() < 1e-12);
    }
}
