//! Digital twin: triangle soup, base stations, bounds and the UE elevation plane.
//!
//! A [`Scene`] is immutable once built. Construction also builds the BVH used
//! by the tracer and a coplanarity id per triangle, so a scene can be shared
//! freely between threads.

mod generate;
mod geometry;
mod io;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::raytrace::bvh::Bvh;

pub use generate::{generate_clutter_scene, SceneGenConfig};
pub(crate) use generate::in_free_space;
pub use geometry::{box_triangles, Aabb, Point2, Rect2, Triangle, Vec3, DEGENERATE_AREA};
pub use io::{load_scene, parse_scene, save_scene, scene_to_json, SceneFile, SCENE_FORMAT};

/// Tolerance used when checking containment and normal consistency.
pub const GEOMETRY_TOL: f64 = 1e-9;

/// Minimum triangle count for a valid scene.
pub const MIN_TRIANGLES: usize = 4;

/// SHA-256 of the canonical scene file.
pub type SceneHash = [u8; 32];

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported scene format {found} (expected {expected})")]
    Format { found: u32, expected: u32 },
    #[error("invalid scene: {report}")]
    Invalid { report: ValidationReport },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("placed {placed} of {requested} clutter boxes before running out of attempts")]
    ClutterPlacement { placed: usize, requested: usize },
}

/// A base station (receiver) at a fixed position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub id: u32,
    pub position: Vec3,
}

/// One violated scene invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewTriangles { count: usize },
    DegenerateTriangle { index: usize },
    NormalMismatch { index: usize },
    VertexOutOfBounds { index: usize },
    StationOutOfBounds { id: u32 },
    DuplicateStationId { id: u32 },
    UePlaneOutOfRange { z: f64 },
    InvalidBounds,
}

impl Violation {
    /// Triangle index the violation refers to, if any.
    pub fn triangle_index(&self) -> Option<usize> {
        match *self {
            Violation::DegenerateTriangle { index }
            | Violation::NormalMismatch { index }
            | Violation::VertexOutOfBounds { index } => Some(index),
            _ => None,
        }
    }

    /// Station id the violation refers to, if any.
    pub fn station_id(&self) -> Option<u32> {
        match *self {
            Violation::StationOutOfBounds { id } | Violation::DuplicateStationId { id } => Some(id),
            _ => None,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewTriangles { count } => {
                write!(f, "scene has {count} triangles, need at least {MIN_TRIANGLES}")
            }
            Violation::DegenerateTriangle { index } => write!(f, "triangle {index} is degenerate"),
            Violation::NormalMismatch { index } => {
                write!(f, "triangle {index} normal does not match its vertex winding")
            }
            Violation::VertexOutOfBounds { index } => {
                write!(f, "triangle {index} has a vertex outside the scene bounds")
            }
            Violation::StationOutOfBounds { id } => write!(f, "station {id} lies outside the scene bounds"),
            Violation::DuplicateStationId { id } => write!(f, "station id {id} is used more than once"),
            Violation::UePlaneOutOfRange { z } => write!(f, "ue_plane_z {z} is outside the scene height"),
            Violation::InvalidBounds => write!(f, "scene bounds are empty or not finite"),
        }
    }
}

/// Result of [`validate_scene`]; empty iff every invariant holds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn triangle_indices(&self) -> Vec<usize> {
        self.violations.iter().filter_map(Violation::triangle_index).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        let tris = self.triangle_indices();
        if !tris.is_empty() {
            write!(f, "offending triangles {tris:?}; ")?;
        }
        let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

/// The digital twin.
#[derive(Debug, Clone)]
pub struct Scene {
    triangles: Vec<Triangle>,
    stations: Vec<BaseStation>,
    bounds: Aabb,
    ue_plane_z: f64,
    plane_ids: Vec<u32>,
    bvh: Bvh,
}

impl Scene {
    /// Builds a scene without validating it; see [`validate_scene`].
    pub fn new(triangles: Vec<Triangle>, stations: Vec<BaseStation>, bounds: Aabb, ue_plane_z: f64) -> Self {
        let plane_ids = plane_ids(&triangles);
        let bvh = Bvh::build(&triangles);
        Scene {
            triangles,
            stations,
            bounds,
            ue_plane_z,
            plane_ids,
            bvh,
        }
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn stations(&self) -> &[BaseStation] {
        &self.stations
    }

    pub fn station(&self, id: u32) -> Option<&BaseStation> {
        self.stations.iter().find(|s| s.id == id)
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn ue_plane_z(&self) -> f64 {
        self.ue_plane_z
    }

    /// Extent of the UE plane (the xy footprint of the bounds).
    pub fn floor_rect(&self) -> Rect2 {
        self.bounds.footprint()
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Id shared by all triangles lying in the same plane.
    pub fn plane_id(&self, triangle: usize) -> u32 {
        self.plane_ids[triangle]
    }

    /// Footprints of closed boxes whose bottom face rests on the UE plane.
    ///
    /// Used to reject UE drops inside clutter. A box is recognized from 12
    /// consecutive triangles whose bounds form a non-flat box; the room shell
    /// (the box equal to the scene bounds) is skipped.
    pub fn obstacle_footprints(&self) -> Vec<Rect2> {
        let mut out = Vec::new();
        for chunk in self.triangles.chunks_exact(12) {
            let mut b = Aabb::empty();
            for t in chunk {
                for v in t.vertices() {
                    b.grow(v);
                }
            }
            let is_box = chunk.iter().flat_map(|t| t.vertices()).all(|v| {
                (0..3).all(|a| {
                    (v[a] - b.min[a]).abs() < GEOMETRY_TOL || (v[a] - b.max[a]).abs() < GEOMETRY_TOL
                })
            });
            let e = b.extent();
            let is_shell = (b.min - self.bounds.min).norm() < GEOMETRY_TOL && (b.max - self.bounds.max).norm() < GEOMETRY_TOL;
            if is_box && !is_shell && e.x > 0.0 && e.y > 0.0 && e.z > 0.0 && b.min.z <= self.ue_plane_z + GEOMETRY_TOL && b.max.z > self.ue_plane_z {
                out.push(b.footprint());
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> SceneHash {
        let json = scene_to_json(self);
        Sha256::digest(json.as_bytes()).into()
    }
}

fn plane_ids(triangles: &[Triangle]) -> Vec<u32> {
    let q = |v: f64| (v * 1e9).round() as i64;
    let mut ids: HashMap<[i64; 4], u32> = HashMap::new();
    triangles
        .iter()
        .map(|t| {
            let mut n = t.normal;
            let first = [n.x, n.y, n.z].into_iter().find(|c| c.abs() > 1e-12).unwrap_or(0.0);
            if first < 0.0 {
                n = -n;
            }
            let key = [q(n.x), q(n.y), q(n.z), q(n.dot(t.v0))];
            let next = ids.len() as u32;
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

/// Checks every scene invariant and returns the list of violations.
pub fn validate_scene(scene: &Scene) -> ValidationReport {
    let mut violations = Vec::new();
    let b = scene.bounds;
    let finite = [b.min, b.max].iter().all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite());
    if !finite || b.max.x <= b.min.x || b.max.y <= b.min.y || b.max.z <= b.min.z {
        violations.push(Violation::InvalidBounds);
    }
    if scene.triangles.len() < MIN_TRIANGLES {
        violations.push(Violation::TooFewTriangles {
            count: scene.triangles.len(),
        });
    }
    for (index, t) in scene.triangles.iter().enumerate() {
        let cross = (t.v1 - t.v0).cross(t.v2 - t.v0);
        if cross.norm() <= DEGENERATE_AREA {
            violations.push(Violation::DegenerateTriangle { index });
        } else {
            let expected = cross.normalized();
            if (t.normal - expected).norm() > GEOMETRY_TOL
                || (t.normal.norm() - 1.0).abs() > GEOMETRY_TOL
                || t.normal.dot(t.v1 - t.v0).abs() > GEOMETRY_TOL
            {
                violations.push(Violation::NormalMismatch { index });
            }
        }
        if !t.vertices().iter().all(|&v| b.contains(v, GEOMETRY_TOL)) {
            violations.push(Violation::VertexOutOfBounds { index });
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &scene.stations {
        if !seen.insert(s.id) {
            violations.push(Violation::DuplicateStationId { id: s.id });
        }
        if !b.contains(s.position, 0.0) {
            violations.push(Violation::StationOutOfBounds { id: s.id });
        }
    }
    let z = scene.ue_plane_z;
    if !(z >= b.min.z && z <= b.max.z) {
        violations.push(Violation::UePlaneOutOfRange { z });
    }
    ValidationReport { violations }
}
