//! Parameterized clutter scenes: a closed room plus non-overlapping boxes on
//! the floor, with four base stations in the top corners.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{box_triangles, Aabb, BaseStation, Point2, Rect2, Scene, SceneError, Vec3};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    /// Room extent along x, meters.
    pub width: f64,
    /// Room extent along y, meters.
    pub length: f64,
    /// Room extent along z, meters.
    pub height: f64,
    pub clutter_count: usize,
    /// Box side length range on the floor, meters.
    pub footprint: [f64; 2],
    /// Box height range, meters.
    pub clutter_height: [f64; 2],
    pub seed: u64,
    pub ue_plane_z: f64,
    /// Distance of each station from the two walls and the ceiling.
    pub station_inset: f64,
    /// Minimum clearance between boxes, walls and stations.
    pub min_gap: f64,
    /// Placement attempts per box before giving up.
    pub max_attempts: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            width: 8.0,
            length: 18.0,
            height: 2.5,
            clutter_count: 20,
            footprint: [0.5, 2.0],
            clutter_height: [0.5, 2.0],
            seed: 7,
            ue_plane_z: 0.0,
            station_inset: 0.1,
            min_gap: 0.05,
            max_attempts: 1000,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        let dims = [self.width, self.length, self.height];
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return bad("room dimensions must be positive");
        }
        let [fmin, fmax] = self.footprint;
        let [hmin, hmax] = self.clutter_height;
        if self.clutter_count > 0 {
            if !(fmin > 0.0 && fmin <= fmax) || fmax + 2.0 * self.min_gap > self.width.min(self.length) {
                return bad("clutter footprint range must be positive and fit inside the room");
            }
            if !(hmin > 0.0 && hmin <= hmax) || hmax >= self.height {
                return bad("clutter height range must be positive and below the ceiling");
            }
        }
        if !(self.station_inset > 0.0 && 2.0 * self.station_inset < self.width.min(self.length))
            || self.station_inset >= self.height
        {
            return bad("station inset must be positive and smaller than the room");
        }
        if !(self.ue_plane_z >= 0.0 && self.ue_plane_z <= self.height) {
            return bad("ue_plane_z must lie within the room height");
        }
        if self.min_gap < 0.0 || self.max_attempts == 0 {
            return bad("min_gap must be non-negative and max_attempts positive");
        }
        Ok(())
    }

    pub fn stations(&self) -> Vec<BaseStation> {
        let i = self.station_inset;
        let z = self.height - i;
        [
            (i, i),
            (self.width - i, i),
            (i, self.length - i),
            (self.width - i, self.length - i),
        ]
        .iter()
        .enumerate()
        .map(|(id, &(x, y))| BaseStation {
            id: id as u32,
            position: Vec3::new(x, y, z),
        })
        .collect()
    }
}

/// Builds the room shell (12 triangles) followed by `clutter_count` boxes
/// (12 triangles each). Pure function of the config.
pub fn generate_clutter_scene(config: &SceneGenConfig) -> Result<Scene, SceneError> {
    config.validate()?;
    let room_max = Vec3::new(config.width, config.length, config.height);
    let bounds = Aabb::new(Vec3::ZERO, room_max);
    let stations = config.stations();
    let mut rng = rng::substream(rng::derive(config.seed, &[tag::SCENE]), 0);
    let gap = config.min_gap;

    let mut boxes: Vec<Aabb> = Vec::with_capacity(config.clutter_count);
    for placed in 0..config.clutter_count {
        let mut ok = None;
        for _ in 0..config.max_attempts {
            let sx = rng.gen_range(config.footprint[0]..=config.footprint[1]);
            let sy = rng.gen_range(config.footprint[0]..=config.footprint[1]);
            let h = rng.gen_range(config.clutter_height[0]..=config.clutter_height[1]);
            let x = rng.gen_range(gap..=config.width - gap - sx);
            let y = rng.gen_range(gap..=config.length - gap - sy);
            let candidate = Aabb::new(Vec3::new(x, y, 0.0), Vec3::new(x + sx, y + sy, h));
            let rect = candidate.footprint();
            if boxes.iter().any(|b| b.footprint().overlaps(&rect, gap)) {
                continue;
            }
            let grown = Aabb::new(
                candidate.min - Vec3::new(gap, gap, gap),
                candidate.max + Vec3::new(gap, gap, gap),
            );
            if stations.iter().any(|s| grown.contains(s.position, 0.0)) {
                continue;
            }
            ok = Some(candidate);
            break;
        }
        match ok {
            Some(b) => boxes.push(b),
            None => {
                return Err(SceneError::ClutterPlacement {
                    placed,
                    requested: config.clutter_count,
                })
            }
        }
    }

    let mut triangles = box_triangles(Vec3::ZERO, room_max).to_vec();
    for b in &boxes {
        triangles.extend_from_slice(&box_triangles(b.min, b.max));
    }
    Ok(Scene::new(triangles, stations, bounds, config.ue_plane_z))
}

/// True if `p` lies on the UE plane outside every obstacle footprint.
pub(crate) fn in_free_space(p: Point2, obstacles: &[Rect2]) -> bool {
    !obstacles.iter().any(|r| r.contains(p))
}
