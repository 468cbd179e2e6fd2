//! Bounding volume hierarchy over scene triangles.
//!
//! Binned surface-area-heuristic build, flat node array, stack traversal.
//! Every query must agree exactly with the brute-force scan; the tracer only
//! uses the tree to skip triangles that cannot beat the current candidate.

use super::{hit_distance, NearestHits, Ray, EPS_T};
use crate::scene::{Aabb, Triangle, Vec3};

const MAX_LEAF: usize = 4;
const BINS: usize = 16;
/// Boxes are padded so round-off in the slab test never culls a real hit.
const PAD: f64 = 1e-7;

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: first entry in `order`. Interior: index of the left child (right is `left + 1`).
    first: u32,
    /// Number of triangles for a leaf, zero for interior nodes.
    count: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

struct BuildItem {
    bounds: Aabb,
    centroid: Vec3,
}

impl Bvh {
    pub fn build(triangles: &[Triangle]) -> Self {
        if triangles.is_empty() {
            return Bvh::default();
        }
        let items: Vec<BuildItem> = triangles
            .iter()
            .map(|t| BuildItem {
                bounds: t.bounds(),
                centroid: t.centroid(),
            })
            .collect();
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = vec![Node {
            bounds: Aabb::empty(),
            first: 0,
            count: 0,
        }];
        build_node(&items, &mut order, &mut nodes, 0, 0, triangles.len());
        Bvh { nodes, order }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nearest hit with the same tie rule as the brute-force scan.
    pub(crate) fn nearest(&self, triangles: &[Triangle], ray: &Ray, acc: &mut NearestHits) {
        if self.nodes.is_empty() {
            return;
        }
        let inv = Vec3::new(safe_inv(ray.direction.x), safe_inv(ray.direction.y), safe_inv(ray.direction.z));
        if slab(&self.nodes[0].bounds, ray.origin, inv).is_none() {
            return;
        }
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(top) = stack.pop() {
            let node = &self.nodes[top as usize];
            if node.count > 0 {
                let start = node.first as usize;
                for &ti in &self.order[start..start + node.count as usize] {
                    if let Some((t, _, _)) = hit_distance(ray, &triangles[ti as usize]) {
                        acc.offer(t, ti as usize);
                    }
                }
                continue;
            }
            let left = node.first as usize;
            let limit = acc.limit();
            let hl = slab(&self.nodes[left].bounds, ray.origin, inv).filter(|&t| t <= limit);
            let hr = slab(&self.nodes[left + 1].bounds, ray.origin, inv).filter(|&t| t <= limit);
            match (hl, hr) {
                (Some(a), Some(b)) => {
                    // Push the farther child first so the nearer one is popped next.
                    let (near, far) = if a <= b { (left, left + 1) } else { (left + 1, left) };
                    stack.push(far as u32);
                    stack.push(near as u32);
                }
                (Some(_), None) => stack.push(left as u32),
                (None, Some(_)) => stack.push((left + 1) as u32),
                (None, None) => {}
            }
        }
    }
}

fn safe_inv(d: f64) -> f64 {
    // A finite reciprocal keeps the slab arithmetic free of 0 * inf.
    let d = if d.abs() < 1e-300 { 1e-300_f64.copysign(d) } else { d };
    1.0 / d
}

/// Entry distance of the ray into the box, if it enters at t >= EPS_T or starts inside.
#[inline]
fn slab(b: &Aabb, o: Vec3, inv: Vec3) -> Option<f64> {
    let tx1 = (b.min.x - o.x) * inv.x;
    let tx2 = (b.max.x - o.x) * inv.x;
    let ty1 = (b.min.y - o.y) * inv.y;
    let ty2 = (b.max.y - o.y) * inv.y;
    let tz1 = (b.min.z - o.z) * inv.z;
    let tz2 = (b.max.z - o.z) * inv.z;
    let tmin = tx1.min(tx2).max(ty1.min(ty2)).max(tz1.min(tz2));
    let tmax = tx1.max(tx2).min(ty1.max(ty2)).min(tz1.max(tz2));
    if tmax >= tmin && tmax >= EPS_T {
        Some(tmin)
    } else {
        None
    }
}

fn padded(mut b: Aabb) -> Aabb {
    let p = Vec3::new(PAD, PAD, PAD);
    b.min = b.min - p;
    b.max = b.max + p;
    b
}

fn build_node(items: &[BuildItem], order: &mut [u32], nodes: &mut Vec<Node>, node: usize, start: usize, end: usize) {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &i in &order[start..end] {
        let it = &items[i as usize];
        bounds = bounds.union(&it.bounds);
        cbounds.grow(it.centroid);
    }
    nodes[node].bounds = padded(bounds);
    let count = end - start;
    let make_leaf = |nodes: &mut Vec<Node>| {
        nodes[node].first = start as u32;
        nodes[node].count = count as u32;
    };
    if count <= MAX_LEAF {
        make_leaf(nodes);
        return;
    }

    let split = best_split(items, &order[start..end], &cbounds, &bounds);
    let mid = match split {
        Some((axis, pos)) => {
            let slice = &mut order[start..end];
            let mut lo = 0;
            for i in 0..slice.len() {
                if items[slice[i] as usize].centroid[axis] < pos {
                    slice.swap(i, lo);
                    lo += 1;
                }
            }
            start + lo
        }
        None => start,
    };
    let mid = if mid == start || mid == end {
        // No useful SAH split: fall back to a median split on the widest centroid axis.
        let e = cbounds.extent();
        let axis = if e.x >= e.y && e.x >= e.z { 0 } else if e.y >= e.z { 1 } else { 2 };
        let half = count / 2;
        order[start..end].select_nth_unstable_by(half, |&a, &b| {
            items[a as usize].centroid[axis]
                .total_cmp(&items[b as usize].centroid[axis])
                .then(a.cmp(&b))
        });
        start + half
    } else {
        mid
    };

    let left = nodes.len();
    let blank = Node {
        bounds: Aabb::empty(),
        first: 0,
        count: 0,
    };
    nodes.push(blank.clone());
    nodes.push(blank);
    nodes[node].first = left as u32;
    nodes[node].count = 0;
    build_node(items, order, nodes, left, start, mid);
    build_node(items, order, nodes, left + 1, mid, end);
}

/// Binned SAH; returns the split axis and centroid threshold when splitting beats a leaf.
fn best_split(items: &[BuildItem], idx: &[u32], cbounds: &Aabb, bounds: &Aabb) -> Option<(usize, f64)> {
    let parent_area = bounds.surface_area().max(f64::MIN_POSITIVE);
    let leaf_cost = idx.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for axis in 0..3 {
        let lo = cbounds.min[axis];
        let hi = cbounds.max[axis];
        if hi - lo <= 1e-12 {
            continue;
        }
        let scale = BINS as f64 / (hi - lo);
        let mut bin_bounds = [Aabb::empty(); BINS];
        let mut bin_count = [0usize; BINS];
        for &i in idx {
            let it = &items[i as usize];
            let b = (((it.centroid[axis] - lo) * scale) as usize).min(BINS - 1);
            bin_count[b] += 1;
            bin_bounds[b] = bin_bounds[b].union(&it.bounds);
        }
        for split in 1..BINS {
            let (mut lb, mut rb) = (Aabb::empty(), Aabb::empty());
            let (mut lc, mut rc) = (0usize, 0usize);
            for b in 0..split {
                lb = lb.union(&bin_bounds[b]);
                lc += bin_count[b];
            }
            for b in split..BINS {
                rb = rb.union(&bin_bounds[b]);
                rc += bin_count[b];
            }
            if lc == 0 || rc == 0 {
                continue;
            }
            let cost = 0.125 + (lb.surface_area() * lc as f64 + rb.surface_area() * rc as f64) / parent_area;
            if best.map_or(true, |(c, _, _)| cost < c) {
                best = Some((cost, axis, lo + split as f64 / scale));
            }
        }
    }
    best.filter(|&(c, _, _)| c < leaf_cost).map(|(_, a, p)| (a, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raytrace::nearest_hit_brute;
    use crate::scene::{generate_clutter_scene, SceneGenConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn every_triangle_appears_once_in_leaves() {
        let s = generate_clutter_scene(&SceneGenConfig::default()).unwrap();
        let bvh = Bvh::build(s.triangles());
        let mut seen = vec![0u32; s.triangles().len()];
        for n in &bvh.nodes {
            if n.count > 0 {
                for &i in &bvh.order[n.first as usize..(n.first + n.count) as usize] {
                    seen[i as usize] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn axis_aligned_rays_match_brute_force() {
        let s = generate_clutter_scene(&SceneGenConfig::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dirs = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, -1.0),
        ];
        for _ in 0..200 {
            let o = Vec3::new(rng.gen_range(0.2..7.8), rng.gen_range(0.2..17.8), rng.gen_range(0.1..2.4));
            for d in dirs {
                let ray = Ray::new(o, d);
                let a = crate::raytrace::nearest_hit(&s, &ray);
                let b = nearest_hit_brute(s.triangles(), &ray);
                assert_eq!(a.map(|h| (h.triangle_index, h.t.to_bits())), b.map(|h| (h.triangle_index, h.t.to_bits())));
            }
        }
    }
}
