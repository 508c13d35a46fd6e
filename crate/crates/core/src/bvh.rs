//! Binned-SAH bounding volume hierarchy over surfel triangle proxies, with a
//! chunked k-buffer query: repeated calls hand back the next k nearest hits
//! along a ray, deduplicated per surfel, in globally sorted depth order.

use crate::math::{vec3, Aabb, Vec3};
use crate::primitives::{triangle_proxy, GaussianSet, TriangleProxy};
use crate::tracer::Ray;
use crate::CoreError;

/// Default k-buffer capacity: the measured best trade-off between traversal
/// count and per-chunk sort work.
pub const DEFAULT_K: usize = 16;

const SAH_BINS: usize = 12;
const MAX_LEAF_TRIS: usize = 4;

/// One candidate intersection: plane depth plus owning surfel index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub prim: u32,
}

/// Fixed-capacity, depth-sorted buffer of the nearest hits past a cursor.
#[derive(Clone, Debug)]
pub struct HitBuffer {
    hits: Vec<Hit>,
    k: usize,
}

impl HitBuffer {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "k-buffer needs capacity of at least one");
        HitBuffer {
            hits: Vec::with_capacity(k),
            k,
        }
    }

    pub fn clear(&mut self) {
        self.hits.clear();
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.hits.len() == self.k
    }

    pub fn hits(&self) -> &[Hit] {
        &self.hits
    }

    /// Largest (t, prim) key currently kept; only meaningful when full.
    fn worst(&self) -> (f64, u32) {
        let last = self.hits.last().expect("worst() on empty buffer");
        (last.t, last.prim)
    }

    /// Insert keeping ascending (t, prim) order, one entry per surfel (the two
    /// proxy triangles share a plane, so duplicates carry the same depth up to
    /// rounding; the smaller one wins).
    fn insert(&mut self, hit: Hit) {
        if let Some(existing) = self.hits.iter_mut().find(|h| h.prim == hit.prim) {
            if hit.t < existing.t {
                existing.t = hit.t;
                self.hits.sort_by(cmp_hits);
            }
            return;
        }
        if self.is_full() {
            let (wt, wp) = self.worst();
            if (hit.t, hit.prim) >= (wt, wp) {
                return;
            }
            self.hits.pop();
        }
        let pos = self
            .hits
            .partition_point(|h| (h.t, h.prim) < (hit.t, hit.prim));
        self.hits.insert(pos, hit);
    }
}

fn cmp_hits(a: &Hit, b: &Hit) -> std::cmp::Ordering {
    (a.t, a.prim)
        .partial_cmp(&(b.t, b.prim))
        .expect("hit depths are finite")
}

#[derive(Clone, Copy, Debug)]
struct Triangle {
    v0: Vec3,
    v1: Vec3,
    v2: Vec3,
    prim: u32,
}

#[derive(Clone, Debug)]
struct Node {
    aabb: Aabb,
    /// Leaf when `count > 0`: triangles `order[start..start+count]`.
    start: u32,
    count: u32,
    left: u32,
    right: u32,
}

/// Activated per-surfel geometry snapshot used by the integrator, cached at
/// build time so the hot loop avoids quaternion and exponential work.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SurfelGeom {
    pub center: Vec3,
    pub tu: Vec3,
    pub tv: Vec3,
    pub normal: Vec3,
    pub inv_su: f64,
    pub inv_sv: f64,
    pub su: f64,
    pub sv: f64,
    pub opacity: f64,
}

/// BVH over triangle proxies, tied to the generation of the surfel set it was
/// built from when constructed via [`Bvh::build`].
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<Triangle>,
    order: Vec<u32>,
    n_prims: u32,
    generation: Option<u64>,
    /// One plane per surfel: (point, normal). Both proxy triangles report the
    /// depth from this shared equation, so duplicate hits carry bit-identical
    /// keys and the chunk cursor excludes them exactly once.
    planes: Vec<(Vec3, Vec3)>,
    pub(crate) geom: Vec<SurfelGeom>,
}

/// Build a BVH from bare triangle proxies. Rejects the empty set.
pub fn build_bvh(proxies: &[TriangleProxy]) -> Result<Bvh, CoreError> {
    if proxies.is_empty() {
        return Err(CoreError::EmptyBvh);
    }
    let mut tris = Vec::with_capacity(proxies.len() * 2);
    let mut n_prims = 0u32;
    for p in proxies {
        n_prims = n_prims.max(p.primitive_id + 1);
        for tri in &p.triangles {
            tris.push(Triangle {
                v0: tri[0],
                v1: tri[1],
                v2: tri[2],
                prim: p.primitive_id,
            });
        }
    }
    let mut planes = vec![(Vec3::ZERO, Vec3::ZERO); n_prims as usize];
    for p in proxies {
        let t0 = &p.triangles[0];
        let n = (t0[1] - t0[0]).cross(t0[2] - t0[0]);
        planes[p.primitive_id as usize] = (t0[0], n);
    }
    Ok(Bvh::from_triangles(tris, n_prims, None, planes, Vec::new()))
}

impl Bvh {
    /// Build from a surfel set, caching activated geometry for integration.
    pub fn build(set: &GaussianSet) -> Result<Bvh, CoreError> {
        if set.is_empty() {
            return Err(CoreError::EmptyBvh);
        }
        let mut tris = Vec::with_capacity(set.len() * 2);
        let mut geom = Vec::with_capacity(set.len());
        let mut planes = Vec::with_capacity(set.len());
        for i in 0..set.len() {
            let g = set.get(i);
            let proxy = triangle_proxy(&g, i as u32);
            for tri in &proxy.triangles {
                tris.push(Triangle {
                    v0: tri[0],
                    v1: tri[1],
                    v2: tri[2],
                    prim: i as u32,
                });
            }
            let frame = crate::math::quat_to_frame(&g.rotation);
            let [su, sv] = g.scales();
            planes.push((g.center, frame[2]));
            geom.push(SurfelGeom {
                center: g.center,
                tu: frame[0],
                tv: frame[1],
                normal: frame[2],
                inv_su: 1.0 / su,
                inv_sv: 1.0 / sv,
                su,
                sv,
                opacity: g.opacity(),
            });
        }
        Ok(Bvh::from_triangles(
            tris,
            set.len() as u32,
            Some(set.generation()),
            planes,
            geom,
        ))
    }

    fn from_triangles(
        tris: Vec<Triangle>,
        n_prims: u32,
        generation: Option<u64>,
        planes: Vec<(Vec3, Vec3)>,
        geom: Vec<SurfelGeom>,
    ) -> Bvh {
        let n = tris.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let bounds: Vec<Aabb> = tris
            .iter()
            .map(|t| Aabb::of_points([t.v0, t.v1, t.v2]))
            .collect();
        let centroids: Vec<Vec3> = bounds.iter().map(|b| b.center()).collect();
        let mut nodes = Vec::with_capacity(2 * n);
        let mut scratch = vec![0u32; n];
        build_node(
            &mut nodes,
            &mut order,
            &mut scratch,
            &bounds,
            &centroids,
            0,
            n,
        );
        Bvh {
            nodes,
            tris,
            order,
            n_prims,
            generation,
            planes,
            geom,
        }
    }

    pub fn generation(&self) -> Option<u64> {
        self.generation
    }

    /// Number of surfels this BVH indexes.
    pub fn primitive_count(&self) -> usize {
        self.n_prims as usize
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Bounds of the whole structure.
    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].aabb
    }

    pub(crate) fn has_geom(&self) -> bool {
        !self.geom.is_empty()
    }

    /// Gather the k nearest hits with key strictly beyond `cursor`, expressed
    /// as a (depth, primitive) pair so equal-depth ties at chunk boundaries
    /// are processed exactly once.
    pub(crate) fn collect_chunk(&self, ray: &Ray, cursor: (f64, u32), buf: &mut HitBuffer) {
        buf.clear();
        let inv_dir = vec3(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        // manual stack; near child first so full buffers prune aggressively
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            let Some((enter, exit)) = node.aabb.ray_range(ray.origin, inv_dir) else {
                continue;
            };
            if exit < cursor.0 || exit < 0.0 {
                continue;
            }
            if buf.is_full() && enter > buf.worst().0 {
                continue;
            }
            if node.count > 0 {
                for oi in node.start..node.start + node.count {
                    let tri = &self.tris[self.order[oi as usize] as usize];
                    let (pp, pn) = self.planes[tri.prim as usize];
                    let denom = pn.dot(ray.dir);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let t = pn.dot(pp - ray.origin) / denom;
                    if !t.is_finite() || (t, tri.prim) <= cursor {
                        continue;
                    }
                    if triangle_covers(tri, ray) {
                        buf.insert(Hit { t, prim: tri.prim });
                    }
                }
            } else {
                let l = node.left as usize;
                let r = node.right as usize;
                let dl = entry_dist(&self.nodes[l].aabb, ray.origin, inv_dir);
                let dr = entry_dist(&self.nodes[r].aabb, ray.origin, inv_dir);
                // push far child first so the near one is processed next
                if dl <= dr {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
    }

    /// Check that every triangle index appears exactly once across leaves and
    /// that leaf boxes contain their triangles. Test support.
    pub fn validate(&self) -> bool {
        let mut seen = vec![false; self.tris.len()];
        for node in &self.nodes {
            if node.count == 0 {
                continue;
            }
            for oi in node.start..node.start + node.count {
                let ti = self.order[oi as usize] as usize;
                if seen[ti] {
                    return false;
                }
                seen[ti] = true;
                let tri = &self.tris[ti];
                for v in [tri.v0, tri.v1, tri.v2] {
                    let eps = 1e-9;
                    if v.x < node.aabb.min.x - eps
                        || v.y < node.aabb.min.y - eps
                        || v.z < node.aabb.min.z - eps
                        || v.x > node.aabb.max.x + eps
                        || v.y > node.aabb.max.y + eps
                        || v.z > node.aabb.max.z + eps
                    {
                        return false;
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn entry_dist(aabb: &Aabb, origin: Vec3, inv_dir: Vec3) -> f64 {
    aabb.ray_range(origin, inv_dir)
        .map(|(t0, _)| t0)
        .unwrap_or(f64::INFINITY)
}

/// Möller–Trumbore coverage test with slightly inflated edges: hits on the
/// shared diagonal of a proxy land a couple of ulps outside both triangles
/// otherwise. Depth comes from the per-surfel plane, not from here.
fn triangle_covers(tri: &Triangle, ray: &Ray) -> bool {
    const BARY_EPS: f64 = 1e-9;
    let e1 = tri.v1 - tri.v0;
    let e2 = tri.v2 - tri.v0;
    let pv = ray.dir.cross(e2);
    let det = e1.dot(pv);
    if det.abs() < 1e-12 {
        return false;
    }
    let inv_det = 1.0 / det;
    let sv = ray.origin - tri.v0;
    let u = sv.dot(pv) * inv_det;
    if !(-BARY_EPS..=1.0 + BARY_EPS).contains(&u) {
        return false;
    }
    let qv = sv.cross(e1);
    let v = ray.dir.dot(qv) * inv_det;
    !(v < -BARY_EPS || u + v > 1.0 + BARY_EPS)
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    scratch: &mut [u32],
    bounds: &[Aabb],
    centroids: &[Vec3],
    start: usize,
    count: usize,
) -> u32 {
    let mut aabb = Aabb::EMPTY;
    let mut cbounds = Aabb::EMPTY;
    for &ti in &order[start..start + count] {
        aabb.union(&bounds[ti as usize]);
        cbounds.grow(centroids[ti as usize]);
    }
    let idx = nodes.len() as u32;
    nodes.push(Node {
        aabb,
        start: start as u32,
        count: count as u32,
        left: 0,
        right: 0,
    });
    if count <= MAX_LEAF_TRIS {
        return idx;
    }

    let split = find_sah_split(order, bounds, centroids, &cbounds, start, count);
    let mid = match split {
        Some((axis, threshold)) => {
            stable_partition(order, scratch, start, count, |ti| {
                centroids[ti as usize].axis(axis) < threshold
            })
        }
        None => start + count / 2,
    };
    let mid = if mid == start || mid == start + count {
        // degenerate centroid distribution: fall back to a median split
        start + count / 2
    } else {
        mid
    };

    let left = build_node(nodes, order, scratch, bounds, centroids, start, mid - start);
    let right = build_node(
        nodes,
        order,
        scratch,
        bounds,
        centroids,
        mid,
        start + count - mid,
    );
    let node = &mut nodes[idx as usize];
    node.count = 0;
    node.left = left;
    node.right = right;
    idx
}

/// Binned SAH over the centroid extent; returns the winning axis/threshold
/// when splitting beats keeping a leaf.
fn find_sah_split(
    order: &[u32],
    bounds: &[Aabb],
    centroids: &[Vec3],
    cbounds: &Aabb,
    start: usize,
    count: usize,
) -> Option<(usize, f64)> {
    let extent = cbounds.max - cbounds.min;
    let mut best: Option<(usize, f64, f64)> = None; // axis, threshold, cost
    for axis in 0..3 {
        let span = extent.axis(axis);
        if span < 1e-12 {
            continue;
        }
        let lo = cbounds.min.axis(axis);
        let mut bin_aabb = [Aabb::EMPTY; SAH_BINS];
        let mut bin_count = [0usize; SAH_BINS];
        for &ti in &order[start..start + count] {
            let c = centroids[ti as usize].axis(axis);
            let b = (((c - lo) / span * SAH_BINS as f64) as usize).min(SAH_BINS - 1);
            bin_aabb[b].union(&bounds[ti as usize]);
            bin_count[b] += 1;
        }
        // prefix/suffix sweep
        let mut left_aabb = Aabb::EMPTY;
        let mut left_count = 0usize;
        let mut left_cost = [0.0f64; SAH_BINS];
        let mut left_n = [0usize; SAH_BINS];
        for b in 0..SAH_BINS - 1 {
            left_aabb.union(&bin_aabb[b]);
            left_count += bin_count[b];
            left_cost[b] = left_aabb.surface_area() * left_count as f64;
            left_n[b] = left_count;
        }
        let mut right_aabb = Aabb::EMPTY;
        let mut right_count = 0usize;
        for b in (1..SAH_BINS).rev() {
            right_aabb.union(&bin_aabb[b]);
            right_count += bin_count[b];
            let n_left = left_n[b - 1];
            if n_left == 0 || right_count == 0 {
                continue;
            }
            let cost = left_cost[b - 1] + right_aabb.surface_area() * right_count as f64;
            if best.map_or(true, |(_, _, c)| cost < c) {
                let threshold = lo + span * b as f64 / SAH_BINS as f64;
                best = Some((axis, threshold, cost));
            }
        }
    }
    best.map(|(axis, threshold, _)| (axis, threshold))
}

/// Order-preserving partition so the build is deterministic for a fixed
/// input order.
fn stable_partition(
    order: &mut [u32],
    scratch: &mut [u32],
    start: usize,
    count: usize,
    pred: impl Fn(u32) -> bool,
) -> usize {
    let mut n_true = 0;
    let mut n_false = 0;
    for i in 0..count {
        let ti = order[start + i];
        if pred(ti) {
            order[start + n_true] = ti;
            n_true += 1;
        } else {
            scratch[n_false] = ti;
            n_false += 1;
        }
    }
    order[start + n_true..start + count].copy_from_slice(&scratch[..n_false]);
    start + n_true
}

/// The k nearest proxy hits with depth strictly beyond `after_depth` (and the
/// ray's near clip), one entry per surfel, sorted ascending. A buffer that
/// comes back under capacity means the ray is exhausted.
pub fn next_chunk(bvh: &Bvh, ray: &Ray, after_depth: f64) -> HitBuffer {
    let mut buf = HitBuffer::new(DEFAULT_K);
    let cursor = (after_depth.max(ray.t_min), u32::MAX);
    bvh.collect_chunk(ray, cursor, &mut buf);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{logit, QUAT_IDENTITY};
    use crate::primitives::{Gaussian2D, SetKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn surfel_at(center: Vec3) -> Gaussian2D {
        Gaussian2D {
            center,
            rotation: QUAT_IDENTITY,
            log_scales: [0.0, 0.0],
            raw_opacity: logit(0.5),
            sh_coeffs: [0.0; 27],
            raw_blend: None,
        }
    }

    fn set_of(surfels: Vec<Gaussian2D>) -> GaussianSet {
        let mut set = GaussianSet::new(SetKind::Env);
        for s in surfels {
            set.push(s);
        }
        set
    }

    #[test]
    fn rejects_empty() {
        assert!(matches!(build_bvh(&[]), Err(CoreError::EmptyBvh)));
    }

    #[test]
    fn single_surfel_leaf_bounds() {
        let g = surfel_at(Vec3::ZERO);
        let proxy = triangle_proxy(&g, 0);
        let bvh = build_bvh(std::slice::from_ref(&proxy)).unwrap();
        let root = bvh.root_bounds();
        let mut expect = Aabb::EMPTY;
        for tri in &proxy.triangles {
            for v in tri {
                expect.grow(*v);
            }
        }
        assert!((root.min - expect.min).norm() < 1e-12);
        assert!((root.max - expect.max).norm() < 1e-12);
    }

    #[test]
    fn two_surfels_root_is_union() {
        let a = triangle_proxy(&surfel_at(vec3(-20.0, 0.0, 0.0)), 0);
        let b = triangle_proxy(&surfel_at(vec3(20.0, 0.0, 0.0)), 1);
        let bvh = build_bvh(&[a.clone(), b.clone()]).unwrap();
        let mut expect = Aabb::EMPTY;
        for p in [&a, &b] {
            for tri in &p.triangles {
                for v in tri {
                    expect.grow(*v);
                }
            }
        }
        let root = bvh.root_bounds();
        assert!((root.min - expect.min).norm() < 1e-12);
        assert!((root.max - expect.max).norm() < 1e-12);
    }

    #[test]
    fn every_primitive_reachable_through_its_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut surfels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut g = surfel_at(vec3(
                rng.gen::<f64>() * 40.0 - 20.0,
                rng.gen::<f64>() * 40.0 - 20.0,
                rng.gen::<f64>() * 40.0 - 20.0,
            ));
            g.log_scales = [rng.gen::<f64>() * 0.4 - 2.0, rng.gen::<f64>() * 0.4 - 2.0];
            g.rotation = [
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ];
            surfels.push(g);
        }
        let set = set_of(surfels);
        let bvh = Bvh::build(&set).unwrap();
        assert!(bvh.validate());
        for i in 0..set.len() {
            let g = set.get(i);
            let n_dir = crate::math::quat_to_frame(&g.rotation)[2];
            let ray = Ray {
                origin: g.center - n_dir * 50.0,
                dir: n_dir,
                t_min: 0.0,
            };
            let mut cursor = (0.0, u32::MAX);
            let mut found = false;
            let mut buf = HitBuffer::new(DEFAULT_K);
            loop {
                bvh.collect_chunk(&ray, cursor, &mut buf);
                if buf.is_empty() {
                    break;
                }
                if buf.hits().iter().any(|h| h.prim == i as u32) {
                    found = true;
                    break;
                }
                if !buf.is_full() {
                    break;
                }
                let last = *buf.hits().last().unwrap();
                cursor = (last.t, last.prim);
            }
            assert!(found, "surfel {i} unreachable through its centroid");
        }
    }

    #[test]
    fn miss_gives_empty_buffer() {
        let set = set_of(vec![surfel_at(Vec3::ZERO)]);
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray {
            origin: vec3(100.0, 100.0, -10.0),
            dir: vec3(0.0, 0.0, 1.0),
            t_min: 0.0,
        };
        let buf = next_chunk(&bvh, &ray, 0.0);
        assert!(buf.is_empty());
    }

    #[test]
    fn single_hit_at_plane_depth() {
        let set = set_of(vec![surfel_at(vec3(0.0, 0.0, 5.0))]);
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: vec3(0.0, 0.0, 1.0),
            t_min: 0.0,
        };
        let buf = next_chunk(&bvh, &ray, 0.0);
        assert_eq!(buf.len(), 1);
        assert!((buf.hits()[0].t - 5.0).abs() < 1e-12);
        assert_eq!(buf.hits()[0].prim, 0);
    }

    #[test]
    fn stacked_surfels_chunk_in_three_pieces() {
        let mut surfels = Vec::new();
        for i in 0..40 {
            surfels.push(surfel_at(vec3(0.0, 0.0, 1.0 + i as f64 * 0.25)));
        }
        let set = set_of(surfels);
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: vec3(0.0, 0.0, 1.0),
            t_min: 0.0,
        };
        let mut sizes = Vec::new();
        let mut last_depth = 0.0;
        let mut after = 0.0;
        loop {
            let buf = next_chunk(&bvh, &ray, after);
            if buf.is_empty() {
                break;
            }
            sizes.push(buf.len());
            for h in buf.hits() {
                assert!(h.t > last_depth, "depth must increase across chunks");
                last_depth = h.t;
            }
            if !buf.is_full() {
                break;
            }
            after = last_depth;
        }
        assert_eq!(sizes, vec![16, 16, 8]);
    }

    #[test]
    fn duplicate_triangles_of_one_surfel_dedup() {
        // a ray through the proxy diagonal region still yields one hit
        let set = set_of(vec![surfel_at(vec3(0.0, 0.0, 2.0))]);
        let bvh = Bvh::build(&set).unwrap();
        let ray = Ray {
            origin: vec3(0.3, 0.3, 0.0),
            dir: vec3(0.0, 0.0, 1.0),
            t_min: 0.0,
        };
        let buf = next_chunk(&bvh, &ray, 0.0);
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn determinism_for_fixed_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let surfels: Vec<_> = (0..500)
            .map(|_| {
                surfel_at(vec3(
                    rng.gen::<f64>() * 10.0,
                    rng.gen::<f64>() * 10.0,
                    rng.gen::<f64>() * 10.0,
                ))
            })
            .collect();
        let set = set_of(surfels);
        let a = Bvh::build(&set).unwrap();
        let b = Bvh::build(&set).unwrap();
        assert_eq!(a.node_count(), b.node_count());
        assert_eq!(a.order, b.order);
    }
}
