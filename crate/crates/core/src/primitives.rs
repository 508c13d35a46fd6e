//! 2D Gaussian surfels: the scene atom.
//!
//! A surfel is a planar Gaussian with two tangential axes, an opacity, a
//! degree-2 spherical-harmonics color per channel, and — for base-set surfels
//! — a blending weight mixing base and reflection color. Raw parameters are
//! stored unactivated (log scales, logit opacity/blend, unnormalized
//! quaternion) so the optimizer can move freely while activations keep the
//! invariants.

use crate::math::{quat_to_frame, sigmoid, vec3, Quat, Vec3};

/// Proxy half-width in sigma units: points with Gaussian response below
/// `exp(-r^2/2)` fall outside the two covering triangles.
pub const PROXY_RADIUS: f64 = 3.0;

/// Which of the two scene sets a collection belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    /// Geometry, base appearance and blend weights; hit by camera rays.
    Base,
    /// Environment set; hit only by reflected rays, carries no blend weight.
    Env,
}

/// One surfel, by value. Storage lives in [`GaussianSet`].
#[derive(Clone, Debug)]
pub struct Gaussian2D {
    pub center: Vec3,
    /// Raw quaternion `[w,x,y,z]`; normalized on activation. Columns 1,2 of
    /// the frame are the tangents, column 3 the surfel normal.
    pub rotation: Quat,
    /// Activated scales are `exp(log_scales)`, strictly positive.
    pub log_scales: [f64; 2],
    /// Activated opacity is `sigmoid(raw_opacity)`.
    pub raw_opacity: f64,
    /// Degree-2 SH, channel-major: `[R c0..c8, G c0..c8, B c0..c8]`.
    pub sh_coeffs: [f64; 27],
    /// Activated blend weight is `sigmoid(raw_blend)`; base sets only.
    pub raw_blend: Option<f64>,
}

impl Gaussian2D {
    pub fn scales(&self) -> [f64; 2] {
        [self.log_scales[0].exp(), self.log_scales[1].exp()]
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    pub fn blend(&self) -> Option<f64> {
        self.raw_blend.map(sigmoid)
    }
}

/// Array-of-attributes surfel collection plus its raw optimizable parameters.
///
/// The generation counter increments on every mutation; BVHs and frames
/// remember the generation they were built from so a stale backward replay is
/// rejected instead of silently producing wrong gradients.
#[derive(Clone, Debug)]
pub struct GaussianSet {
    kind: SetKind,
    pub centers: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 2]>,
    pub raw_opacities: Vec<f64>,
    pub sh: Vec<[f64; 27]>,
    /// Empty for env sets.
    pub raw_blends: Vec<f64>,
    generation: u64,
}

impl GaussianSet {
    pub fn new(kind: SetKind) -> Self {
        GaussianSet {
            kind,
            centers: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            raw_opacities: Vec::new(),
            sh: Vec::new(),
            raw_blends: Vec::new(),
            generation: 0,
        }
    }

    pub fn kind(&self) -> SetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Record that raw parameters changed; invalidates BVHs built earlier.
    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn push(&mut self, g: Gaussian2D) {
        debug_assert_eq!(self.kind == SetKind::Base, g.raw_blend.is_some());
        self.centers.push(g.center);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scales);
        self.raw_opacities.push(g.raw_opacity);
        self.sh.push(g.sh_coeffs);
        if let Some(b) = g.raw_blend {
            self.raw_blends.push(b);
        }
        self.generation += 1;
    }

    pub fn get(&self, i: usize) -> Gaussian2D {
        Gaussian2D {
            center: self.centers[i],
            rotation: self.rotations[i],
            log_scales: self.log_scales[i],
            raw_opacity: self.raw_opacities[i],
            sh_coeffs: self.sh[i],
            raw_blend: if self.kind == SetKind::Base {
                Some(self.raw_blends[i])
            } else {
                None
            },
        }
    }

    /// Remove the surfels at the given sorted, deduplicated indices.
    pub fn remove_indices(&mut self, sorted: &[usize]) {
        if sorted.is_empty() {
            return;
        }
        let mut keep = vec![true; self.len()];
        for &i in sorted {
            keep[i] = false;
        }
        let mut w = 0;
        for r in 0..self.len() {
            if keep[r] {
                self.centers[w] = self.centers[r];
                self.rotations[w] = self.rotations[r];
                self.log_scales[w] = self.log_scales[r];
                self.raw_opacities[w] = self.raw_opacities[r];
                self.sh[w] = self.sh[r];
                if self.kind == SetKind::Base {
                    self.raw_blends[w] = self.raw_blends[r];
                }
                w += 1;
            }
        }
        self.centers.truncate(w);
        self.rotations.truncate(w);
        self.log_scales.truncate(w);
        self.raw_opacities.truncate(w);
        self.sh.truncate(w);
        if self.kind == SetKind::Base {
            self.raw_blends.truncate(w);
        }
        self.generation += 1;
    }

    /// World-space bounds of all surfel proxies.
    pub fn proxy_bounds(&self) -> crate::math::Aabb {
        let mut b = crate::math::Aabb::EMPTY;
        for i in 0..self.len() {
            let proxy = triangle_proxy(&self.get(i), i as u32);
            for tri in &proxy.triangles {
                for v in tri {
                    b.grow(*v);
                }
            }
        }
        b
    }
}

/// The affine map from a surfel's local tangent plane `(u, v, 0, 1)` to world
/// homogeneous coordinates. Stored as its nontrivial columns.
#[derive(Clone, Copy, Debug)]
pub struct TangentTransform {
    /// First column: `s_u * t_u`.
    pub su_tu: Vec3,
    /// Second column: `s_v * t_v`.
    pub sv_tv: Vec3,
    /// Fourth column: the surfel center.
    pub center: Vec3,
}

impl TangentTransform {
    /// The full 4x4 matrix (third column zero, last row `0,0,0,1`).
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        [
            [self.su_tu.x, self.sv_tv.x, 0.0, self.center.x],
            [self.su_tu.y, self.sv_tv.y, 0.0, self.center.y],
            [self.su_tu.z, self.sv_tv.z, 0.0, self.center.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Map local plane coordinates to a world point.
    pub fn apply(&self, u: f64, v: f64) -> Vec3 {
        self.center + self.su_tu * u + self.sv_tv * v
    }

    /// Unit surfel normal (third frame column, unflipped).
    pub fn normal(&self) -> Vec3 {
        self.su_tu.cross(self.sv_tv).normalized()
    }
}

/// Two world-space triangles covering a surfel out to [`PROXY_RADIUS`] sigma.
#[derive(Clone, Debug)]
pub struct TriangleProxy {
    pub triangles: [[Vec3; 3]; 2],
    /// Index into the owning [`GaussianSet`].
    pub primitive_id: u32,
}

/// Build the tangent transform of a surfel.
pub fn build_transform(g: &Gaussian2D) -> TangentTransform {
    let [tu, tv, _n] = quat_to_frame(&g.rotation);
    let [su, sv] = g.scales();
    TangentTransform {
        su_tu: tu * su,
        sv_tv: tv * sv,
        center: g.center,
    }
}

/// Invert the tangent transform at a world point, returning `(u, v, w)`.
/// For points on the surfel plane `w` vanishes.
pub fn invert_to_local(t: &TangentTransform, x: Vec3) -> (f64, f64, f64) {
    let m = x - t.center;
    let u = t.su_tu.dot(m) / t.su_tu.norm_sq();
    let v = t.sv_tv.dot(m) / t.sv_tv.norm_sq();
    let w = t.normal().dot(m);
    (u, v, w)
}

/// Standard 2D Gaussian response at local coordinates.
pub fn gaussian_value(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) / 2.0).exp()
}

/// Triangle proxy of a surfel: the square `(±r, ±r)` in the tangent plane
/// pushed to world space and split along one diagonal.
pub fn triangle_proxy(g: &Gaussian2D, primitive_id: u32) -> TriangleProxy {
    let t = build_transform(g);
    let r = PROXY_RADIUS;
    let a = t.apply(-r, -r);
    let b = t.apply(r, -r);
    let c = t.apply(r, r);
    let d = t.apply(-r, r);
    TriangleProxy {
        triangles: [[a, b, c], [a, c, d]],
        primitive_id,
    }
}

/// Surfel normal flipped to face the viewer (`normal . view_dir < 0`).
/// An exactly edge-on view returns the unflipped normal.
pub fn surfel_normal(g: &Gaussian2D, view_dir: Vec3) -> Vec3 {
    let [_, _, n] = quat_to_frame(&g.rotation);
    if n.dot(view_dir) > 0.0 {
        -n
    } else {
        n
    }
}

// Real SH basis constants shared with predecessor splatting systems.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of SH basis functions per color channel (degree 2).
pub const SH_PER_CHANNEL: usize = 9;
/// Total SH coefficients per surfel (3 channels).
pub const SH_COEFFS: usize = 27;

/// Degree-2 real SH basis evaluated at a direction.
///
/// The basis is polynomial in the raw components; callers in the render path
/// pass unit directions, while the backward pass differentiates the
/// polynomials directly so the ray-direction gradient matches finite
/// differences of the implemented function.
pub fn sh_basis(d: Vec3) -> [f64; SH_PER_CHANNEL] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * z * z - x * x - y * y),
        SH_C2[3] * x * z,
        SH_C2[4] * (x * x - y * y),
    ]
}

/// Gradients of each basis function with respect to the direction components.
pub fn sh_basis_grad(d: Vec3) -> [Vec3; SH_PER_CHANNEL] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        Vec3::ZERO,
        vec3(0.0, -SH_C1, 0.0),
        vec3(0.0, 0.0, SH_C1),
        vec3(-SH_C1, 0.0, 0.0),
        vec3(SH_C2[0] * y, SH_C2[0] * x, 0.0),
        vec3(0.0, SH_C2[1] * z, SH_C2[1] * y),
        vec3(
            -2.0 * SH_C2[2] * x,
            -2.0 * SH_C2[2] * y,
            4.0 * SH_C2[2] * z,
        ),
        vec3(SH_C2[3] * z, 0.0, SH_C2[3] * x),
        vec3(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0),
    ]
}

/// Radiance of one channel before the offset and clamp.
#[inline]
pub fn sh_dot(coeffs: &[f64], basis: &[f64; SH_PER_CHANNEL]) -> f64 {
    let mut acc = 0.0;
    for (c, b) in coeffs.iter().zip(basis.iter()) {
        acc += c * b;
    }
    acc
}

/// Evaluate a surfel's RGB radiance toward a direction: per-channel SH dot
/// product plus the conventional 0.5 offset, clamped at zero from below.
///
/// Rejects directions that are not unit length within 1e-6.
pub fn eval_sh(sh_coeffs: &[f64; SH_COEFFS], dir: Vec3) -> Result<[f64; 3], crate::CoreError> {
    if (dir.norm() - 1.0).abs() > 1e-6 {
        return Err(crate::CoreError::NonUnitDirection(dir.norm()));
    }
    Ok(eval_sh_unchecked(sh_coeffs, dir))
}

/// As [`eval_sh`] without the unit-norm check; used inside the tracer where
/// the direction comes from a normalized source.
#[inline]
pub fn eval_sh_unchecked(sh_coeffs: &[f64; SH_COEFFS], dir: Vec3) -> [f64; 3] {
    let basis = sh_basis(dir);
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let raw = sh_dot(
            &sh_coeffs[ch * SH_PER_CHANNEL..(ch + 1) * SH_PER_CHANNEL],
            &basis,
        ) + 0.5;
        *out = raw.max(0.0);
    }
    rgb
}
