//! Small fixed-size linear algebra used throughout the renderer.
//!
//! Everything is `f64`: the backward pass is validated against central finite
//! differences at 1e-4 relative tolerance, which single precision cannot hold.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// 3-vector in world or camera space.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    /// Component-wise minimum.
    pub fn min(self, o: Vec3) -> Vec3 {
        vec3(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    /// Component-wise maximum.
    pub fn max(self, o: Vec3) -> Vec3 {
        vec3(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        vec3(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix, used for camera rotations.
pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    vec3(
        m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
        m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
        m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
    )
}

/// Multiply by the transpose (i.e. apply the inverse of an orthonormal matrix).
pub fn mat3_tmul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    vec3(
        m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
        m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
        m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z,
    )
}

/// Deviation of `m` from orthonormality: max abs error of `m * m^T - I`.
pub fn mat3_orthonormality_error(m: &Mat3) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut d = 0.0;
            for (ri, rj) in m[i].iter().zip(m[j].iter()) {
                d += ri * rj;
            }
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((d - target).abs());
        }
    }
    err
}

/// Unit quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalized(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Orthonormal frame of a quaternion, returned as the three matrix columns.
///
/// The input is normalized internally, so raw (optimizable) quaternions are
/// accepted. Columns are `(t_u, t_v, n)` of the rotation matrix.
pub fn quat_to_frame(q: &Quat) -> [Vec3; 3] {
    let [w, x, y, z] = quat_normalized(q);
    [
        vec3(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y + w * z),
            2.0 * (x * z - w * y),
        ),
        vec3(
            2.0 * (x * y - w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z + w * x),
        ),
        vec3(
            2.0 * (x * z + w * y),
            2.0 * (y * z - w * x),
            1.0 - 2.0 * (x * x + y * y),
        ),
    ]
}

/// Derivatives of the three frame columns with respect to the *normalized*
/// quaternion components, as `d[cmp][col]` for cmp in w,x,y,z.
pub fn quat_frame_jacobian(qn: &Quat) -> [[Vec3; 3]; 4] {
    let [w, x, y, z] = *qn;
    [
        // d/dw
        [
            vec3(0.0, 2.0 * z, -2.0 * y),
            vec3(-2.0 * z, 0.0, 2.0 * x),
            vec3(2.0 * y, -2.0 * x, 0.0),
        ],
        // d/dx
        [
            vec3(0.0, 2.0 * y, 2.0 * z),
            vec3(2.0 * y, -4.0 * x, 2.0 * w),
            vec3(2.0 * z, -2.0 * w, -4.0 * x),
        ],
        // d/dy
        [
            vec3(-4.0 * y, 2.0 * x, -2.0 * w),
            vec3(2.0 * x, 0.0, 2.0 * z),
            vec3(2.0 * w, 2.0 * z, -4.0 * y),
        ],
        // d/dz
        [
            vec3(-4.0 * z, 2.0 * w, 2.0 * x),
            vec3(-2.0 * w, -4.0 * z, 2.0 * y),
            vec3(2.0 * x, 2.0 * y, 0.0),
        ],
    ]
}

/// Pull a gradient with respect to the normalized quaternion back to the raw
/// quaternion through `q_hat = q / |q|`.
pub fn quat_normalize_pullback(q_raw: &Quat, grad_qn: &Quat) -> Quat {
    let n = quat_norm(q_raw);
    let qn = quat_normalized(q_raw);
    let dot = qn[0] * grad_qn[0] + qn[1] * grad_qn[1] + qn[2] * grad_qn[2] + qn[3] * grad_qn[3];
    [
        (grad_qn[0] - qn[0] * dot) / n,
        (grad_qn[1] - qn[1] * dot) / n,
        (grad_qn[2] - qn[2] * dot) / n,
        (grad_qn[3] - qn[3] * dot) / n,
    ]
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of `sigmoid`; input must lie strictly in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: vec3(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    pub fn of_points(points: impl IntoIterator<Item = Vec3>) -> Aabb {
        let mut b = Aabb::EMPTY;
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: Vec3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    pub fn union(&mut self, o: &Aabb) {
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        if self.min.x > self.max.x {
            0.0
        } else {
            (self.max - self.min).norm()
        }
    }

    pub fn surface_area(&self) -> f64 {
        if self.min.x > self.max.x {
            return 0.0;
        }
        let d = self.max - self.min;
        2.0 * (d.x * d.y + d.y * d.z + d.z * d.x)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Entry/exit parameters of a ray against the box (slab test).
    /// Returns `None` when the ray misses.
    pub fn ray_range(&self, origin: Vec3, inv_dir: Vec3) -> Option<(f64, f64)> {
        let t0 = vec3(
            (self.min.x - origin.x) * inv_dir.x,
            (self.min.y - origin.y) * inv_dir.y,
            (self.min.z - origin.z) * inv_dir.z,
        );
        let t1 = vec3(
            (self.max.x - origin.x) * inv_dir.x,
            (self.max.y - origin.y) * inv_dir.y,
            (self.max.z - origin.z) * inv_dir.z,
        );
        let lo = t0.min(t1);
        let hi = t0.max(t1);
        let t_enter = lo.x.max(lo.y).max(lo.z);
        let t_exit = hi.x.min(hi.y).min(hi.z);
        if t_enter <= t_exit {
            Some((t_enter, t_exit))
        } else {
            None
        }
    }
}
