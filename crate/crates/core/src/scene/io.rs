//! Scene file format: UTF-8 JSON, one triangle per line.
//!
//! ```text
//! {
//!   "format": 1,
//!   "bounds": {"min":[0.0,0.0,0.0],"max":[8.0,18.0,2.5]},
//!   "ue_plane_z": 0.0,
//!   "stations": [
//!     {"id":0,"position":[0.1,0.1,2.4]}
//!   ],
//!   "triangles": [
//!     [x0,y0,z0,x1,y1,z1,x2,y2,z2]
//!   ]
//! }
//! ```
//!
//! Numbers are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every vertex bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_scene, Aabb, BaseStation, Scene, SceneError, Triangle};

pub const SCENE_FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub format: u32,
    pub bounds: Aabb,
    pub ue_plane_z: f64,
    pub stations: Vec<BaseStation>,
    pub triangles: Vec<[f64; 9]>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        SceneFile {
            format: SCENE_FORMAT,
            bounds: *s.bounds(),
            ue_plane_z: s.ue_plane_z(),
            stations: s.stations().to_vec(),
            triangles: s.triangles().iter().map(Triangle::to_flat).collect(),
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("scene values serialize")
}

/// Canonical text of a scene file.
pub fn scene_to_json(scene: &Scene) -> String {
    let f = SceneFile::from(scene);
    let mut out = String::with_capacity(64 + f.triangles.len() * 120);
    out.push_str("{\n");
    out.push_str(&format!("  \"format\": {},\n", f.format));
    out.push_str(&format!("  \"bounds\": {},\n", json(&f.bounds)));
    out.push_str(&format!("  \"ue_plane_z\": {},\n", json(&f.ue_plane_z)));
    let list = |items: Vec<String>| -> String {
        if items.is_empty() {
            "[]".to_string()
        } else {
            format!("[\n    {}\n  ]", items.join(",\n    "))
        }
    };
    out.push_str(&format!("  \"stations\": {},\n", list(f.stations.iter().map(json).collect())));
    out.push_str(&format!("  \"triangles\": {}\n", list(f.triangles.iter().map(json).collect())));
    out.push_str("}\n");
    out
}

/// Parses and validates scene text.
pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.format != SCENE_FORMAT {
        return Err(SceneError::Format {
            found: file.format,
            expected: SCENE_FORMAT,
        });
    }
    let triangles = file.triangles.iter().map(Triangle::from_flat).collect();
    let scene = Scene::new(triangles, file.stations, file.bounds, file.ue_plane_z);
    let report = validate_scene(&scene);
    if report.is_valid() {
        Ok(scene)
    } else {
        Err(SceneError::Invalid { report })
    }
}

/// Reads, parses and validates a scene file. Triangle order is preserved.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(&text)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    std::fs::write(path, scene_to_json(scene)).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{box_triangles, generate_clutter_scene, SceneGenConfig, Vec3, Violation};

    fn empty_room_text() -> String {
        let tris: Vec<String> = box_triangles(Vec3::ZERO, Vec3::new(8.0, 18.0, 2.5))
            .iter()
            .map(|t| json(&t.to_flat()))
            .collect();
        format!(
            r#"{{"format": 1,
"bounds": {{"min": [0, 0, 0], "max": [8, 18, 2.5]}},
"ue_plane_z": 0,
"stations": [{{"id": 0, "position": [0.1, 0.1, 2.4]}}, {{"id": 1, "position": [7.9, 0.1, 2.4]}},
             {{"id": 2, "position": [0.1, 17.9, 2.4]}}, {{"id": 3, "position": [7.9, 17.9, 2.4]}}],
"triangles": [{}]}}"#,
            tris.join(",\n")
        )
    }

    #[test]
    fn minimal_box_file_loads() {
        let s = parse_scene(&empty_room_text()).unwrap();
        assert_eq!(s.triangles().len(), 12);
        assert_eq!(s.stations().len(), 4);
    }

    #[test]
    fn degenerate_triangle_is_named() {
        let text = empty_room_text().replacen(
            "\"triangles\": [",
            "\"triangles\": [[0,0,0, 1,1,1, 2,2,2],",
            1,
        );
        match parse_scene(&text) {
            Err(SceneError::Invalid { report }) => {
                assert_eq!(report.violations, vec![Violation::DegenerateTriangle { index: 0 }]);
                assert!(report.to_string().contains("[0]"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\n\"format\": 1,\n\"bounds\": oops\n}";
        match parse_scene(text) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_or_wrong_format_is_rejected() {
        let no_format = empty_room_text().replacen("\"format\": 1,", "", 1);
        assert!(matches!(parse_scene(&no_format), Err(SceneError::Parse { .. })));
        let v2 = empty_room_text().replacen("\"format\": 1", "\"format\": 2", 1);
        assert!(matches!(parse_scene(&v2), Err(SceneError::Format { found: 2, .. })));
    }

    #[test]
    fn save_load_is_bit_exact() {
        let cfg = SceneGenConfig {
            clutter_count: 20,
            seed: 11,
            ..SceneGenConfig::default()
        };
        let s = generate_clutter_scene(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        save_scene(&s, &path).unwrap();
        let back = load_scene(&path).unwrap();
        let bits = |sc: &Scene| -> Vec<u64> {
            sc.triangles().iter().flat_map(|t| t.to_flat()).map(f64::to_bits).collect()
        };
        assert_eq!(bits(&s), bits(&back));
        assert_eq!(s.stations(), back.stations());
        assert_eq!(scene_to_json(&s), scene_to_json(&back));
        assert_eq!(s.content_hash(), back.content_hash());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_scene("/nonexistent/scene.json"), Err(SceneError::Io { .. })));
    }
}
