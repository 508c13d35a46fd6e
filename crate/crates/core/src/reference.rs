//! Reference renderer: intersects every surfel, sorts hits globally, and
//! composites in one pass. No BVH, no chunking — this is the oracle the
//! traversal path is tested against, and the calibration pipeline for the
//! synthetic convergence scenes. O(n) per ray, so keep it away from hot loops.

use crate::math::{quat_to_frame, sigmoid};
use crate::primitives::{eval_sh_unchecked, GaussianSet, SetKind, PROXY_RADIUS};
use crate::tracer::{Ray, RaySample, RenderOptions, ALPHA_CLAMP, ALPHA_SKIP};

/// Integrate a ray against a set by exhaustive intersection and a global
/// depth sort, applying the same per-hit rules as the traced path.
pub fn integrate_ray_reference(set: &GaussianSet, ray: &Ray, opts: &RenderOptions) -> RaySample {
    let mut hits: Vec<(f64, u32)> = Vec::new();
    for i in 0..set.len() {
        let frame = quat_to_frame(&set.rotations[i]);
        let normal = frame[2];
        let denom = normal.dot(ray.dir);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = normal.dot(set.centers[i] - ray.origin) / denom;
        if t <= ray.t_min {
            continue;
        }
        let x = ray.origin + ray.dir * t;
        let m = x - set.centers[i];
        let su = set.log_scales[i][0].exp();
        let sv = set.log_scales[i][1].exp();
        let u = frame[0].dot(m) / su;
        let v = frame[1].dot(m) / sv;
        if u.abs() > PROXY_RADIUS || v.abs() > PROXY_RADIUS {
            continue;
        }
        hits.push((t, i as u32));
    }
    hits.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));

    let mut s = RaySample::empty();
    let mut transmittance = 1.0;
    for (t, prim) in hits {
        let i = prim as usize;
        let frame = quat_to_frame(&set.rotations[i]);
        let x = ray.origin + ray.dir * t;
        let m = x - set.centers[i];
        let u = frame[0].dot(m) / set.log_scales[i][0].exp();
        let v = frame[1].dot(m) / set.log_scales[i][1].exp();
        let gauss = (-(u * u + v * v) / 2.0).exp();
        let alpha = sigmoid(set.raw_opacities[i]) * gauss;
        if alpha < ALPHA_SKIP {
            continue;
        }
        let alpha = alpha.min(ALPHA_CLAMP);
        let rgb = eval_sh_unchecked(&set.sh[i], ray.dir);
        let normal = if frame[2].dot(ray.dir) > 0.0 {
            -frame[2]
        } else {
            frame[2]
        };
        let blend = if set.kind() == SetKind::Base {
            sigmoid(set.raw_blends[i])
        } else {
            0.0
        };
        let w = transmittance * alpha;
        for ch in 0..3 {
            s.color[ch] += w * rgb[ch];
        }
        s.normal += normal * w;
        s.position += x * w;
        s.depth += t * w;
        s.blend += blend * w;
        s.alpha += w;
        transmittance *= 1.0 - alpha;
        s.transmittance = transmittance;
        if transmittance < opts.transmittance_min {
            break;
        }
    }
    s
}

/// Largest absolute difference over all fields of two samples.
pub fn sample_max_abs_diff(a: &RaySample, b: &RaySample) -> f64 {
    let mut d: f64 = 0.0;
    for ch in 0..3 {
        d = d.max((a.color[ch] - b.color[ch]).abs());
    }
    d = d.max((a.transmittance - b.transmittance).abs());
    d = d.max((a.depth - b.depth).abs());
    d = d.max((a.normal - b.normal).norm());
    d = d.max((a.position - b.position).norm());
    d = d.max((a.blend - b.blend).abs());
    d = d.max((a.alpha - b.alpha).abs());
    d
}

/// Convenience: largest per-channel color difference between two samples.
pub fn color_max_abs_diff(a: &RaySample, b: &RaySample) -> f64 {
    let mut d: f64 = 0.0;
    for ch in 0..3 {
        d = d.max((a.color[ch] - b.color[ch]).abs());
    }
    d
}
