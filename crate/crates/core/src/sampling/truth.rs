//! Ground-truth angle of arrival by reciprocity search.
//!
//! A dense, equal-area set of directions is traced once per station and every
//! crossing of the UE plane is stored in a spatial grid together with the
//! reflection sequence ("signature") that produced it. A query gathers the
//! nearest stored crossing of each signature around the UE, polishes each one
//! with damped Newton steps on the launch angle (following the same
//! signature), and returns the first-arriving path among those that reach the
//! UE.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::{Angle, SamplingError};
use crate::par;
use crate::raytrace::{self, Backend};
use crate::scene::{BaseStation, Point2, Rect2, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthOptions {
    /// Equal-area bands in cos(polar).
    pub n_polar: usize,
    pub n_azimuth: usize,
    pub max_bounces: u32,
    /// Maximum accepted distance between the path's crossing and the UE, meters.
    pub eps_hit: f64,
    /// Radius around the UE in which stored crossings seed the refinement.
    pub search_radius: f64,
    /// Upper bound on signatures refined per query, shortest path first.
    pub refine: usize,
    /// Paths this close to the UE are considered exact; the shortest wins.
    pub tie_distance: f64,
}

impl Default for TruthOptions {
    fn default() -> Self {
        TruthOptions {
            n_polar: 1000,
            n_azimuth: 2000,
            max_bounces: 5,
            eps_hit: 0.05,
            search_radius: 0.5,
            refine: 256,
            tie_distance: 1e-4,
        }
    }
}

impl TruthOptions {
    pub fn n_directions(&self) -> usize {
        self.n_polar * self.n_azimuth
    }
}

/// The propagation path selected as ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPath {
    /// Angle of arrival at the station.
    pub angle: Angle,
    pub path_length: f64,
    /// Distance between the path's crossing and the UE, meters.
    pub distance: f64,
    pub bounces: u32,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    x: f32,
    y: f32,
    path: f32,
    dir: u32,
    sig: u32,
}

/// Precomputed crossings of one station's dense direction set.
#[derive(Debug, Clone)]
pub struct ReciprocityIndex {
    station: BaseStation,
    opts: TruthOptions,
    rect: Rect2,
    cell: f64,
    nx: usize,
    ny: usize,
    offsets: Vec<u32>,
    entries: Vec<Entry>,
}

struct Probe {
    xy: Point2,
    path_length: f64,
    bounces: u32,
}

fn probe(scene: &Scene, station: &BaseStation, az: f64, polar: f64, sig: u32, max_bounces: u32) -> Option<Probe> {
    let dir = Angle::new(az, polar).to_direction();
    let mut out = None;
    raytrace::trace_path(scene, Backend::Bvh, station.position, dir, max_bounces, |c| {
        if out.is_none() && c.signature as u32 == sig {
            out = Some(Probe {
                xy: c.xy,
                path_length: c.path_length,
                bounces: c.bounce_count,
            });
        }
    });
    out
}

impl ReciprocityIndex {
    pub fn build(scene: &Scene, station: &BaseStation, opts: TruthOptions) -> Self {
        let rect = scene.floor_rect();
        let cell = (opts.search_radius).max(0.05);
        let nx = ((rect.width() / cell).ceil() as usize).max(1);
        let ny = ((rect.height() / cell).ceil() as usize).max(1);
        let n = opts.n_directions();
        let chunks = par::map_index_chunks(n, 4096, |range| {
            let mut out: Vec<(u32, Entry)> = Vec::new();
            for d in range {
                let (az, polar) = direction(&opts, d);
                let dir = Angle::new(az, polar).to_direction();
                raytrace::trace_path(scene, Backend::Bvh, station.position, dir, opts.max_bounces, |c| {
                    if rect.contains(c.xy) {
                        let cx = (((c.xy.x - rect.min.x) / cell) as usize).min(nx - 1);
                        let cy = (((c.xy.y - rect.min.y) / cell) as usize).min(ny - 1);
                        out.push((
                            (cy * nx + cx) as u32,
                            Entry {
                                x: c.xy.x as f32,
                                y: c.xy.y as f32,
                                path: c.path_length as f32,
                                dir: d as u32,
                                sig: c.signature as u32,
                            },
                        ));
                    }
                });
            }
            out
        });
        let mut offsets = vec![0u32; nx * ny + 1];
        for chunk in &chunks {
            for (c, _) in chunk {
                offsets[*c as usize + 1] += 1;
            }
        }
        for i in 0..nx * ny {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let total = offsets[nx * ny] as usize;
        let mut entries = vec![
            Entry {
                x: 0.0,
                y: 0.0,
                path: 0.0,
                dir: 0,
                sig: 0
            };
            total
        ];
        for chunk in chunks {
            for (c, e) in chunk {
                let slot = &mut fill[c as usize];
                entries[*slot as usize] = e;
                *slot += 1;
            }
        }
        ReciprocityIndex {
            station: *station,
            opts,
            rect,
            cell,
            nx,
            ny,
            offsets,
            entries,
        }
    }

    pub fn station(&self) -> &BaseStation {
        &self.station
    }

    pub fn options(&self) -> &TruthOptions {
        &self.opts
    }

    /// Stored crossings.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Finds the first-arriving path from the station to `ue`.
    pub fn query(&self, scene: &Scene, ue: Point2) -> Result<TruthPath, SamplingError> {
        let r = self.opts.search_radius;
        let r2 = r * r;
        let cx0 = ((ue.x - r - self.rect.min.x) / self.cell).floor().max(0.0) as usize;
        let cy0 = ((ue.y - r - self.rect.min.y) / self.cell).floor().max(0.0) as usize;
        let cx1 = (((ue.x + r - self.rect.min.x) / self.cell).floor().max(0.0) as usize).min(self.nx - 1);
        let cy1 = (((ue.y + r - self.rect.min.y) / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        // Nearest stored crossing per signature: (distance², dir, path length).
        let mut best: HashMap<u32, (f64, u32, f32)> = HashMap::new();
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let c = cy * self.nx + cx;
                for e in &self.entries[self.offsets[c] as usize..self.offsets[c + 1] as usize] {
                    let d2 = (e.x as f64 - ue.x).powi(2) + (e.y as f64 - ue.y).powi(2);
                    if d2 > r2 {
                        continue;
                    }
                    let slot = best.entry(e.sig).or_insert((f64::INFINITY, u32::MAX, 0.0));
                    if (d2, e.dir) < (slot.0, slot.1) {
                        *slot = (d2, e.dir, e.path);
                    }
                }
            }
        }
        let mut seeds: Vec<(f32, u32, u32)> = best.into_iter().map(|(sig, (_, dir, path))| (path, dir, sig)).collect();
        seeds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        seeds.truncate(self.opts.refine);

        // A seed within r of the UE cannot shorten its path by much more than r
        // once refined; beyond that margin no later seed can win.
        let margin = 2.0 * r + 0.01;
        let mut nearest: Option<f64> = None;
        let mut chosen: Option<TruthPath> = None;
        for &(path, dir, sig) in &seeds {
            if let Some(c) = &chosen {
                if c.distance <= self.opts.tie_distance && path as f64 - margin > c.path_length {
                    break;
                }
            }
            let Some(path) = self.refine(scene, ue, dir, sig) else {
                continue;
            };
            nearest = Some(nearest.map_or(path.distance, |n: f64| n.min(path.distance)));
            if path.distance > self.opts.eps_hit {
                continue;
            }
            chosen = match chosen {
                None => Some(path),
                Some(c) => Some(if self.prefer(&path, &c) { path } else { c }),
            };
        }
        chosen.ok_or(SamplingError::Unreachable {
            station: self.station.id,
            eps_hit: self.opts.eps_hit,
            nearest,
        })
    }

    /// Exact paths beat approximate ones; among exact paths the shortest wins,
    /// otherwise the nearest.
    fn prefer(&self, a: &TruthPath, b: &TruthPath) -> bool {
        let tie = self.opts.tie_distance;
        match (a.distance <= tie, b.distance <= tie) {
            (true, true) => a.path_length < b.path_length,
            (true, false) => true,
            (false, true) => false,
            (false, false) => a.distance < b.distance || (a.distance == b.distance && a.path_length < b.path_length),
        }
    }

    /// Damped Newton on the launch angle, keeping the reflection sequence fixed.
    fn refine(&self, scene: &Scene, ue: Point2, dir: u32, sig: u32) -> Option<TruthPath> {
        let st = &self.station;
        let mb = self.opts.max_bounces;
        let (mut az, mut pol) = direction(&self.opts, dir as usize);
        let mut cur = probe(scene, st, az, pol, sig, mb)?;
        let mut res = cur.xy.distance(ue);
        const H: f64 = 1e-7;
        for _ in 0..40 {
            if res < 1e-10 {
                break;
            }
            let fd = |daz: f64, dpol: f64| -> Option<(f64, f64)> {
                for s in [1.0, -1.0] {
                    if let Some(p) = probe(scene, st, az + s * daz, pol + s * dpol, sig, mb) {
                        return Some(((p.xy.x - cur.xy.x) / (s * H), (p.xy.y - cur.xy.y) / (s * H)));
                    }
                }
                None
            };
            let Some((ja_x, ja_y)) = fd(H, 0.0) else { break };
            let Some((jp_x, jp_y)) = fd(0.0, H) else { break };
            let det = ja_x * jp_y - jp_x * ja_y;
            if !det.is_finite() || det.abs() < 1e-300 {
                break;
            }
            let (rx, ry) = (ue.x - cur.xy.x, ue.y - cur.xy.y);
            let step_az = (rx * jp_y - jp_x * ry) / det;
            let step_pol = (ja_x * ry - rx * ja_y) / det;
            let mut lambda = 1.0;
            let mut improved = false;
            while lambda > 1e-4 {
                let (naz, npol) = (az + lambda * step_az, pol + lambda * step_pol);
                if let Some(p) = probe(scene, st, naz, npol, sig, mb) {
                    let nres = p.xy.distance(ue);
                    if nres < res {
                        az = naz;
                        pol = npol;
                        cur = p;
                        res = nres;
                        improved = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !improved {
                break;
            }
        }
        Some(TruthPath {
            angle: Angle::new(az, pol),
            path_length: cur.path_length,
            distance: res,
            bounces: cur.bounces,
        })
    }
}

/// Center of equal-area cell `d`: uniform in cos(polar) and azimuth.
fn direction(opts: &TruthOptions, d: usize) -> (f64, f64) {
    let i = d / opts.n_azimuth;
    let j = d % opts.n_azimuth;
    let u = 1.0 - (i as f64 + 0.5) * 2.0 / opts.n_polar as f64;
    let polar = u.clamp(-1.0, 1.0).acos().clamp(0.0, PI);
    let az = (j as f64 + 0.5) * TAU / opts.n_azimuth as f64;
    (az, polar)
}

/// One-off ground truth; builds a throwaway index. Reuse a
/// [`ReciprocityIndex`] when querying many UEs.
pub fn ground_truth_aoa(
    scene: &Scene,
    station: &BaseStation,
    ue: Point2,
    opts: &TruthOptions,
) -> Result<Angle, SamplingError> {
    ReciprocityIndex::build(scene, station, *opts)
        .query(scene, ue)
        .map(|p| p.angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raytrace::trace_reverse;
    use crate::scene::{box_triangles, generate_clutter_scene, Aabb, SceneGenConfig, Vec3};

    fn small() -> TruthOptions {
        TruthOptions {
            n_polar: 300,
            n_azimuth: 600,
            ..Default::default()
        }
    }

    #[test]
    fn los_matches_analytic_direction() {
        let s = generate_clutter_scene(&SceneGenConfig {
            clutter_count: 0,
            ..Default::default()
        })
        .unwrap();
        for st in s.stations() {
            let idx = ReciprocityIndex::build(&s, st, small());
            for ue in [Point2::new(2.0, 3.0), Point2::new(6.5, 14.0), Point2::new(4.0, 9.0)] {
                let p = idx.query(&s, ue).unwrap();
                let want = Angle::from_direction(Vec3::new(ue.x, ue.y, 0.0) - st.position);
                assert!(p.angle.separation(want) < 0.1f64.to_radians());
                assert_eq!(p.bounces, 0);
                assert!(p.distance < 1e-6);
                let direct = (Vec3::new(ue.x, ue.y, 0.0) - st.position).norm();
                assert!((p.path_length - direct).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn returned_angle_retraces_to_ue() {
        let s = generate_clutter_scene(&SceneGenConfig::default()).unwrap();
        let opts = small();
        let st = s.stations()[1];
        let idx = ReciprocityIndex::build(&s, &st, opts);
        let fps = s.obstacle_footprints();
        let mut checked = 0;
        for k in 0..20 {
            let ue = Point2::new(0.3 + 0.37 * k as f64, 0.5 + 0.85 * k as f64);
            if fps.iter().any(|r| r.contains(ue)) {
                continue;
            }
            if let Ok(p) = idx.query(&s, ue) {
                let c = trace_reverse(&s, &st, p.angle, opts.max_bounces);
                assert!(c.iter().any(|c| c.xy.distance(ue) <= opts.eps_hit), "ue {ue:?}");
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }

    #[test]
    fn boxed_in_ue_is_unreachable() {
        let mut tris = box_triangles(Vec3::ZERO, Vec3::new(8.0, 18.0, 2.5)).to_vec();
        // Closed box around the UE, resting on the floor.
        tris.extend_from_slice(&box_triangles(Vec3::new(3.0, 8.0, 0.0), Vec3::new(5.0, 10.0, 1.0)));
        let st = BaseStation {
            id: 0,
            position: Vec3::new(0.1, 0.1, 2.4),
        };
        let s = Scene::new(tris, vec![st], Aabb::new(Vec3::ZERO, Vec3::new(8.0, 18.0, 2.5)), 0.0);
        let err = ground_truth_aoa(&s, &st, Point2::new(4.0, 9.0), &small()).unwrap_err();
        assert!(matches!(err, SamplingError::Unreachable { station: 0, .. }));
    }

    #[test]
    fn directions_are_equal_area() {
        let o = small();
        let mut sum_z = 0.0;
        for d in 0..o.n_directions() {
            let (_, p) = direction(&o, d);
            sum_z += p.cos();
        }
        assert!(sum_z.abs() < 1e-6);
    }
}
