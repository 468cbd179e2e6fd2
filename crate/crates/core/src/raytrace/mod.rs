//! Specular reverse ray tracing.
//!
//! A ray leaves a base station along an angle of departure, reflects
//! specularly off scene triangles up to `max_bounces` times, and every
//! transversal crossing of the plane `z = ue_plane_z` is recorded. A ray that
//! crosses the plane `m` times gives each crossing weight `1/m`.
//!
//! Numerical conventions:
//!
//! * hits closer than [`EPS_T`] are ignored and every reflected segment starts
//!   [`EPS_T`] along its new direction, so a ray never re-hits the triangle it
//!   just left;
//! * triangles are two-sided and the hit normal is flipped to face the ray;
//! * hits within [`TIE_T`] of the nearest are ties, won by the lowest index;
//! * a reflection with `|d·n| <` [`GRAZING`] terminates the ray;
//! * a crossing exactly at a path vertex belongs to the incoming segment.

pub mod bvh;

use crate::sampling::Angle;
use crate::scene::{BaseStation, Point2, Scene, Triangle, Vec3};

/// Minimum hit distance and reflected-segment offset, meters.
pub const EPS_T: f64 = 1e-6;
/// Hits whose distances differ by less than this are ties.
pub const TIE_T: f64 = 1e-9;
/// Reflections with `|d·n|` below this are degenerate.
pub const GRAZING: f64 = 1e-9;
/// Points closer than this to the UE plane are treated as lying on it.
pub const PLANE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray { origin, direction }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub triangle_index: usize,
    /// Unit normal oriented against the incoming ray.
    pub normal: Vec3,
    /// Barycentric weights of `v0`, `v1`, `v2`.
    pub barycentric: [f64; 3],
}

/// A weighted crossing of the UE plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub xy: Point2,
    pub weight: f64,
    /// Reflections before the crossing segment.
    pub bounce_count: u32,
    /// Distance travelled from the station to the crossing, meters.
    pub path_length: f64,
}

/// Which nearest-hit implementation the tracer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Bvh,
    BruteForce,
}

/// Möller–Trumbore; returns `(t, u, v)` with `t > EPS_T`.
#[inline]
pub(crate) fn hit_distance(ray: &Ray, tri: &Triangle) -> Option<(f64, f64, f64)> {
    let e1 = tri.v1 - tri.v0;
    let e2 = tri.v2 - tri.v0;
    let p = ray.direction.cross(e2);
    let det = e1.dot(p);
    // |det| = |d·n̂|·|e1×e2|; compare against the unnormalized area to stay scale free.
    if det * det <= 1e-24 * e1.norm_squared() * e2.norm_squared() {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - tri.v0;
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = ray.direction.dot(q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(q) * inv;
    if t > EPS_T {
        Some((t, u, v))
    } else {
        None
    }
}

fn make_hit(ray: &Ray, tri: &Triangle, index: usize, t: f64, u: f64, v: f64) -> Hit {
    let normal = if tri.normal.dot(ray.direction) > 0.0 {
        -tri.normal
    } else {
        tri.normal
    };
    Hit {
        t,
        point: ray.at(t),
        triangle_index: index,
        normal,
        barycentric: [1.0 - u - v, u, v],
    }
}

/// Intersects one ray with one triangle (either side).
///
/// The returned hit carries `triangle_index == 0`; mesh-level queries such as
/// [`nearest_hit`] fill in the real index.
pub fn intersect_ray_triangle(ray: &Ray, tri: &Triangle) -> Option<Hit> {
    hit_distance(ray, tri).map(|(t, u, v)| make_hit(ray, tri, 0, t, u, v))
}

/// Candidate set for the nearest-hit query.
///
/// Resolves to the lowest triangle index among hits within `TIE_T` of the
/// minimum distance, independent of the order hits are offered in.
pub(crate) struct NearestHits {
    t_min: f64,
    len: usize,
    cand: [(f64, usize); 16],
}

impl NearestHits {
    pub(crate) fn new() -> Self {
        NearestHits {
            t_min: f64::INFINITY,
            len: 0,
            cand: [(0.0, 0); 16],
        }
    }

    /// Distances beyond this cannot affect the result.
    #[inline]
    pub(crate) fn limit(&self) -> f64 {
        self.t_min + TIE_T
    }

    #[inline]
    pub(crate) fn offer(&mut self, t: f64, index: usize) {
        if t > self.limit() {
            return;
        }
        if t < self.t_min {
            self.t_min = t;
            let limit = self.limit();
            let mut kept = 0;
            for i in 0..self.len {
                if self.cand[i].0 <= limit {
                    self.cand[kept] = self.cand[i];
                    kept += 1;
                }
            }
            self.len = kept;
        }
        if self.len < self.cand.len() {
            self.cand[self.len] = (t, index);
            self.len += 1;
        } else if let Some(worst) = (0..self.len).max_by(|&a, &b| self.cand[a].1.cmp(&self.cand[b].1)) {
            // More than 16 simultaneous ties: keep the lowest indices.
            if index < self.cand[worst].1 {
                self.cand[worst] = (t, index);
            }
        }
    }

    pub(crate) fn best(&self) -> Option<usize> {
        let limit = self.limit();
        self.cand[..self.len]
            .iter()
            .filter(|c| c.0 <= limit)
            .map(|c| c.1)
            .min()
    }
}

fn resolve(ray: &Ray, triangles: &[Triangle], acc: &NearestHits) -> Option<Hit> {
    let index = acc.best()?;
    let tri = &triangles[index];
    let (t, u, v) = hit_distance(ray, tri)?;
    Some(make_hit(ray, tri, index, t, u, v))
}

/// Reference nearest hit: scans every triangle.
pub fn nearest_hit_brute(triangles: &[Triangle], ray: &Ray) -> Option<Hit> {
    let mut acc = NearestHits::new();
    for (i, tri) in triangles.iter().enumerate() {
        if let Some((t, _, _)) = hit_distance(ray, tri) {
            acc.offer(t, i);
        }
    }
    resolve(ray, triangles, &acc)
}

/// Nearest hit through the scene BVH. Identical to [`nearest_hit_brute`].
pub fn nearest_hit(scene: &Scene, ray: &Ray) -> Option<Hit> {
    let mut acc = NearestHits::new();
    scene.bvh().nearest(scene.triangles(), ray, &mut acc);
    resolve(ray, scene.triangles(), &acc)
}

pub fn nearest_hit_with(scene: &Scene, ray: &Ray, backend: Backend) -> Option<Hit> {
    match backend {
        Backend::Bvh => nearest_hit(scene, ray),
        Backend::BruteForce => nearest_hit_brute(scene.triangles(), ray),
    }
}

/// Grazing incidence: the reflected direction is numerically meaningless.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("degenerate reflection (|d·n| = {dot:e})")]
pub struct DegenerateReflection {
    pub dot: f64,
}

/// Mirror reflection `d − 2(d·n)n`.
pub fn reflect(direction: Vec3, normal: Vec3) -> Result<Vec3, DegenerateReflection> {
    let dn = direction.dot(normal);
    if dn.abs() < GRAZING {
        return Err(DegenerateReflection { dot: dn });
    }
    Ok((direction - normal * (2.0 * dn)).normalized())
}

/// A crossing before weights are assigned, plus the identity of its path family.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RawCrossing {
    pub xy: Point2,
    pub bounce_count: u32,
    pub path_length: f64,
    /// Hash of the planes reflected off before this crossing. Rays with the same
    /// signature cross the plane on the same smooth branch of the path map.
    pub signature: u64,
}

const SIGNATURE_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn extend_signature(sig: u64, plane: u32) -> u64 {
    (sig ^ plane as u64 ^ 0x9e37_79b9).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17)
}

/// Walks the specular polyline and reports every crossing of the UE plane.
pub(crate) fn trace_path(
    scene: &Scene,
    backend: Backend,
    origin: Vec3,
    direction: Vec3,
    max_bounces: u32,
    mut visit: impl FnMut(RawCrossing),
) {
    let h = scene.ue_plane_z();
    let mut ray = Ray::new(origin, direction);
    let mut travelled = 0.0;
    let mut signature = SIGNATURE_SEED;
    for bounce in 0..=max_bounces {
        let hit = nearest_hit_with(scene, &ray, backend);
        let da = ray.origin.z - h;
        if da.abs() > PLANE_TOL {
            let crossing_t = match hit {
                Some(ht) => {
                    let db = ht.point.z - h;
                    if db.abs() <= PLANE_TOL {
                        Some((ht.t, Some(ht.point)))
                    } else if (da > 0.0) != (db > 0.0) {
                        Some((-da / ray.direction.z, None))
                    } else {
                        None
                    }
                }
                None if ray.direction.z != 0.0 && (da > 0.0) != (ray.direction.z > 0.0) => {
                    Some((-da / ray.direction.z, None))
                }
                None => None,
            };
            if let Some((t, at_vertex)) = crossing_t {
                let p = at_vertex.unwrap_or_else(|| ray.at(t));
                visit(RawCrossing {
                    xy: p.xy(),
                    bounce_count: bounce,
                    path_length: travelled + t,
                    signature,
                });
            }
        }
        let Some(ht) = hit else { break };
        travelled += ht.t;
        if bounce == max_bounces {
            break;
        }
        let Ok(dir) = reflect(ray.direction, ht.normal) else {
            break;
        };
        signature = extend_signature(signature, scene.plane_id(ht.triangle_index));
        ray = Ray::new(ht.point + dir * EPS_T, dir);
        travelled += EPS_T;
    }
}

fn weighted(raw: Vec<RawCrossing>) -> Vec<Crossing> {
    let w = if raw.is_empty() { 0.0 } else { 1.0 / raw.len() as f64 };
    raw.into_iter()
        .map(|c| Crossing {
            xy: c.xy,
            weight: w,
            bounce_count: c.bounce_count,
            path_length: c.path_length,
        })
        .collect()
}

/// Traces one ray from an arbitrary origin and direction.
pub fn trace_ray(scene: &Scene, origin: Vec3, direction: Vec3, max_bounces: u32, backend: Backend) -> Vec<Crossing> {
    let mut raw = Vec::new();
    trace_path(scene, backend, origin, direction, max_bounces, |c| raw.push(c));
    weighted(raw)
}

/// Traces the ray leaving `station` along `aod`; crossings ordered by path length.
pub fn trace_reverse(scene: &Scene, station: &BaseStation, aod: Angle, max_bounces: u32) -> Vec<Crossing> {
    trace_ray(scene, station.position, aod.to_direction(), max_bounces, Backend::Bvh)
}
