//! Offline density tables indexed by measured angle.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PDFT"  version:u32  scene_hash:[u8; 32]
//! repeated per station until end of file:
//!   station_id:u32  az_step_udeg:u32  polar_step_udeg:u32  n_rays:u32
//!   sigma_urad:u64  seed:u64
//!   n_polar × n_az cells, polar-major:
//!     k:u16, then k × [weight, mean_x, mean_y, cov_xx, cov_xy, cov_yy] as f64
//!     or k = 0 followed by a u8 reason code
//! ```

use std::ops::RangeInclusive;

use crate::density::{select_gmm, FitOptions, Gmm, GmmComponent};
use crate::par;
use crate::rng::{self, tag};
use crate::sampling::{launch_map_with, Angle, LaunchOptions, MeasurementModel, PointMap};
use crate::scene::{BaseStation, Point2, Scene, SceneHash};

pub const TABLE_MAGIC: [u8; 4] = *b"PDFT";
pub const TABLE_FORMAT_VERSION: u32 = 1;
/// Stored values per mixture component.
pub const VALUES_PER_COMPONENT: usize = 6;

const MICRO_DEG_FULL_TURN: u64 = 360_000_000;
const MICRO_DEG_HALF_TURN: u64 = 180_000_000;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("not a density table (magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported table format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("table scene hash {found} does not match scene hash {expected}")]
    SceneHash { found: String, expected: String },
    #[error("truncated table file at byte {0}")]
    Truncated(usize),
    #[error("invalid angle grid: azimuth step {az_udeg} µdeg, polar step {polar_udeg} µdeg")]
    Grid { az_udeg: u32, polar_udeg: u32 },
    #[error("unknown empty-cell reason code {0}")]
    Reason(u8),
    #[error("no table for station {0}")]
    MissingStation(u32),
    #[error("table for station {0} appears twice")]
    DuplicateStation(u32),
    #[error("table I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Regular angle grid; grid angles are `(i·az_step, j·polar_step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngleGrid {
    pub az_step_udeg: u32,
    pub polar_step_udeg: u32,
}

impl AngleGrid {
    pub fn new(az_step_udeg: u32, polar_step_udeg: u32) -> Result<Self, TableError> {
        let ok = |s: u32, span: u64| s > 0 && span % s as u64 == 0;
        if ok(az_step_udeg, MICRO_DEG_FULL_TURN) && ok(polar_step_udeg, MICRO_DEG_HALF_TURN) {
            Ok(AngleGrid {
                az_step_udeg,
                polar_step_udeg,
            })
        } else {
            Err(TableError::Grid {
                az_udeg: az_step_udeg,
                polar_udeg: polar_step_udeg,
            })
        }
    }

    pub fn from_degrees(az_step: f64, polar_step: f64) -> Result<Self, TableError> {
        Self::new((az_step * 1e6).round() as u32, (polar_step * 1e6).round() as u32)
    }

    pub fn n_az(&self) -> usize {
        (MICRO_DEG_FULL_TURN / self.az_step_udeg as u64) as usize
    }

    pub fn n_polar(&self) -> usize {
        (MICRO_DEG_HALF_TURN / self.polar_step_udeg as u64) as usize
    }

    pub fn n_cells(&self) -> usize {
        self.n_az() * self.n_polar()
    }

    fn az_step(&self) -> f64 {
        (self.az_step_udeg as f64 * 1e-6).to_radians()
    }

    fn polar_step(&self) -> f64 {
        (self.polar_step_udeg as f64 * 1e-6).to_radians()
    }

    /// Grid angle of `cell`.
    pub fn angle(&self, cell: usize) -> Angle {
        let (j, i) = (cell / self.n_az(), cell % self.n_az());
        Angle {
            azimuth: (i as f64 * self.az_step_udeg as f64 * 1e-6).to_radians(),
            polar: (j as f64 * self.polar_step_udeg as f64 * 1e-6).to_radians(),
        }
    }

    /// Nearest grid cell; exact halves round down, azimuth wraps, polar clamps.
    pub fn cell_of(&self, y: Angle) -> usize {
        let round_half_down = |x: f64| (x - 0.5).ceil();
        let n_az = self.n_az() as i64;
        let i = (round_half_down(y.azimuth / self.az_step()) as i64).rem_euclid(n_az);
        let j = (round_half_down(y.polar / self.polar_step()) as i64).clamp(0, self.n_polar() as i64 - 1);
        j as usize * self.n_az() + i as usize
    }

    /// `y` moved to its nearest grid angle.
    pub fn snap(&self, y: Angle) -> Angle {
        self.angle(self.cell_of(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyReason {
    /// No launched ray crossed the UE plane.
    EmptyMap = 0,
    /// Every mixture fit failed.
    FitFailed = 1,
    /// The cell was skipped by a partial build.
    NotBuilt = 2,
}

impl EmptyReason {
    fn from_code(c: u8) -> Result<Self, TableError> {
        match c {
            0 => Ok(EmptyReason::EmptyMap),
            1 => Ok(EmptyReason::FitFailed),
            2 => Ok(EmptyReason::NotBuilt),
            other => Err(TableError::Reason(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableCell {
    Model(Gmm),
    Empty(EmptyReason),
}

/// One station's table.
#[derive(Debug, Clone, PartialEq)]
pub struct PdfTable {
    pub station_id: u32,
    pub grid: AngleGrid,
    pub n_rays: u32,
    pub sigma_urad: u64,
    pub seed: u64,
    pub cells: Vec<TableCell>,
}

impl PdfTable {
    pub fn sigma(&self) -> f64 {
        self.sigma_urad as f64 * 1e-6
    }

    /// Number of stored mixture values, `6·k` per model.
    pub fn stored_parameters(&self) -> usize {
        self.cells
            .iter()
            .map(|c| match c {
                TableCell::Model(g) => VALUES_PER_COMPONENT * g.k(),
                TableCell::Empty(_) => 0,
            })
            .sum()
    }

    pub fn model_count(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c, TableCell::Model(_))).count()
    }
}

/// Constant-time nearest-cell lookup.
pub fn lookup(table: &PdfTable, y: Angle) -> &TableCell {
    &table.cells[table.grid.cell_of(y)]
}

/// All station tables for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TableFile {
    pub scene_hash: SceneHash,
    pub stations: Vec<PdfTable>,
}

impl TableFile {
    pub fn station(&self, id: u32) -> Option<&PdfTable> {
        self.stations.iter().find(|t| t.station_id == id)
    }

    pub fn load(path: impl AsRef<std::path::Path>, expected_hash: Option<&SceneHash>) -> Result<Self, TableError> {
        deserialize_table(&std::fs::read(path)?, expected_hash)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), TableError> {
        Ok(std::fs::write(path, serialize_table(self))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableBuildOptions {
    pub grid: AngleGrid,
    pub n_rays: usize,
    pub seed: u64,
    pub k_range: RangeInclusive<usize>,
    pub fit: FitOptions,
    pub launch: LaunchOptions,
    /// Build only these cells; the rest are marked [`EmptyReason::NotBuilt`].
    pub cells: Option<Vec<usize>>,
}

/// Ray key and fit seed for one table cell. Online estimation reuses these to
/// reproduce a table entry exactly.
pub fn cell_seeds(seed: u64, station_id: u32, cell: usize) -> (u64, u64) {
    let base = rng::derive(seed, &[tag::TABLE, station_id as u64, cell as u64]);
    (rng::derive(base, &[tag::RAYS]), rng::derive(base, &[tag::EM]))
}

/// Density of one station for a single measured angle: launch, then select a mixture.
pub fn fit_cell(
    scene: &Scene,
    station: &BaseStation,
    y: Angle,
    model: &MeasurementModel,
    n_rays: usize,
    ray_key: u64,
    fit_seed: u64,
    k_range: RangeInclusive<usize>,
    fit: &FitOptions,
    launch: &LaunchOptions,
) -> TableCell {
    let map = launch_map_with(scene, station, y, model, n_rays, ray_key, launch);
    fit_map(&map, fit_seed, k_range, fit)
}

/// Mixture selection for an already launched map, as stored in a table cell.
pub fn fit_map(map: &PointMap, fit_seed: u64, k_range: RangeInclusive<usize>, fit: &FitOptions) -> TableCell {
    if map.is_empty() {
        return TableCell::Empty(EmptyReason::EmptyMap);
    }
    let opts = FitOptions { seed: fit_seed, ..*fit };
    match select_gmm(map, k_range, &opts) {
        Ok(g) => TableCell::Model(g),
        Err(_) => TableCell::Empty(EmptyReason::FitFailed),
    }
}

pub fn build_table(scene: &Scene, station: &BaseStation, model: &MeasurementModel, opts: &TableBuildOptions) -> PdfTable {
    let n = opts.grid.n_cells();
    let wanted: Option<std::collections::BTreeSet<usize>> = opts.cells.as_ref().map(|c| c.iter().copied().collect());
    let cells = par::map_range(n, |cell| {
        if wanted.as_ref().is_some_and(|w| !w.contains(&cell)) {
            return TableCell::Empty(EmptyReason::NotBuilt);
        }
        let (ray_key, fit_seed) = cell_seeds(opts.seed, station.id, cell);
        fit_cell(
            scene,
            station,
            opts.grid.angle(cell),
            model,
            opts.n_rays,
            ray_key,
            fit_seed,
            opts.k_range.clone(),
            &opts.fit,
            &opts.launch,
        )
    });
    PdfTable {
        station_id: station.id,
        grid: opts.grid,
        n_rays: opts.n_rays as u32,
        sigma_urad: (model.sigma * 1e6).round() as u64,
        seed: opts.seed,
        cells,
    }
}

pub fn serialize_table(file: &TableFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TABLE_MAGIC);
    out.extend_from_slice(&TABLE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&file.scene_hash);
    for t in &file.stations {
        out.extend_from_slice(&t.station_id.to_le_bytes());
        out.extend_from_slice(&t.grid.az_step_udeg.to_le_bytes());
        out.extend_from_slice(&t.grid.polar_step_udeg.to_le_bytes());
        out.extend_from_slice(&t.n_rays.to_le_bytes());
        out.extend_from_slice(&t.sigma_urad.to_le_bytes());
        out.extend_from_slice(&t.seed.to_le_bytes());
        for c in &t.cells {
            match c {
                TableCell::Model(g) => {
                    out.extend_from_slice(&(g.k() as u16).to_le_bytes());
                    for comp in &g.components {
                        for v in [comp.weight, comp.mean.x, comp.mean.y, comp.cov[0], comp.cov[1], comp.cov[2]] {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                TableCell::Empty(r) => {
                    out.extend_from_slice(&0u16.to_le_bytes());
                    out.push(*r as u8);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], TableError> {
        let end = self.pos + N;
        let s = self.buf.get(self.pos..end).ok_or(TableError::Truncated(self.pos))?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }
    fn u16(&mut self) -> Result<u16, TableError> {
        self.take().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Result<u32, TableError> {
        self.take().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, TableError> {
        self.take().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64, TableError> {
        self.take().map(f64::from_le_bytes)
    }
}

fn hex(h: &SceneHash) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a table file; with `expected_hash`, rejects tables built for another scene.
pub fn deserialize_table(bytes: &[u8], expected_hash: Option<&SceneHash>) -> Result<TableFile, TableError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take()?;
    if magic != TABLE_MAGIC {
        return Err(TableError::Magic(magic));
    }
    let version = r.u32()?;
    if version != TABLE_FORMAT_VERSION {
        return Err(TableError::Version {
            found: version,
            expected: TABLE_FORMAT_VERSION,
        });
    }
    let scene_hash: SceneHash = r.take()?;
    if let Some(e) = expected_hash {
        if *e != scene_hash {
            return Err(TableError::SceneHash {
                found: hex(&scene_hash),
                expected: hex(e),
            });
        }
    }
    let mut stations: Vec<PdfTable> = Vec::new();
    while r.pos < bytes.len() {
        let station_id = r.u32()?;
        if stations.iter().any(|t| t.station_id == station_id) {
            return Err(TableError::DuplicateStation(station_id));
        }
        let grid = AngleGrid::new(r.u32()?, r.u32()?)?;
        let n_rays = r.u32()?;
        let sigma_urad = r.u64()?;
        let seed = r.u64()?;
        let mut cells = Vec::with_capacity(grid.n_cells());
        for _ in 0..grid.n_cells() {
            let k = r.u16()? as usize;
            if k == 0 {
                let [code] = r.take::<1>()?;
                cells.push(TableCell::Empty(EmptyReason::from_code(code)?));
                continue;
            }
            let mut comps = Vec::with_capacity(k);
            for _ in 0..k {
                let v = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
                comps.push(GmmComponent {
                    weight: v[0],
                    mean: Point2::new(v[1], v[2]),
                    cov: [v[3], v[4], v[5]],
                });
            }
            cells.push(TableCell::Model(Gmm::from_components(comps)));
        }
        stations.push(PdfTable {
            station_id,
            grid,
            n_rays,
            sigma_urad,
            seed,
            cells,
        });
    }
    Ok(TableFile { scene_hash, stations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_clutter_scene, SceneGenConfig};
    use std::f64::consts::PI;

    fn synthetic(grid: AngleGrid, station_id: u32) -> PdfTable {
        let cells = (0..grid.n_cells())
            .map(|i| {
                if i % 7 == 3 {
                    TableCell::Empty(EmptyReason::FitFailed)
                } else {
                    let k = 1 + i % 3;
                    TableCell::Model(Gmm::from_components(
                        (0..k)
                            .map(|j| GmmComponent {
                                weight: 1.0 / k as f64,
                                mean: Point2::new(i as f64 * 0.1 + j as f64, 0.3 / (1.0 + i as f64)),
                                cov: [0.1 + j as f64, 0.01, 0.2],
                            })
                            .collect(),
                    ))
                }
            })
            .collect();
        PdfTable {
            station_id,
            grid,
            n_rays: 1000,
            sigma_urad: 17453,
            seed: 99,
            cells,
        }
    }

    #[test]
    fn grid_arithmetic() {
        let g = AngleGrid::from_degrees(1.0, 1.0).unwrap();
        assert_eq!((g.n_az(), g.n_polar(), g.n_cells()), (360, 180, 64800));
        assert!(AngleGrid::from_degrees(7.0, 1.0).is_err());
        assert!(AngleGrid::new(0, 1).is_err());
        for cell in [0, 1, 359, 360, 12345, 64799] {
            assert_eq!(g.cell_of(g.angle(cell)), cell);
        }
    }

    #[test]
    fn lookup_rounds_half_down_and_wraps() {
        let g = AngleGrid::from_degrees(1.0, 1.0).unwrap();
        // Exactly between azimuth 10° and 11°: the lower cell.
        let mid = Angle {
            azimuth: 10.5f64.to_radians(),
            polar: 20f64.to_radians(),
        };
        assert_eq!(g.cell_of(mid) % 360, 10);
        let just_over = Angle {
            azimuth: 10.5000001f64.to_radians(),
            polar: 20f64.to_radians(),
        };
        assert_eq!(g.cell_of(just_over) % 360, 11);
        let near_turn = Angle {
            azimuth: 359.8f64.to_radians(),
            polar: 20f64.to_radians(),
        };
        assert_eq!(g.cell_of(near_turn) % 360, 0);
        let bottom = Angle { azimuth: 0.0, polar: PI };
        assert_eq!(g.cell_of(bottom) / 360, 179);
    }

    #[test]
    fn lookup_on_grid_returns_stored_model() {
        let g = AngleGrid::from_degrees(36.0, 18.0).unwrap();
        let t = synthetic(g, 2);
        for cell in 0..g.n_cells() {
            assert_eq!(lookup(&t, g.angle(cell)), &t.cells[cell]);
        }
    }

    #[test]
    fn empty_file_is_header_only() {
        let f = TableFile {
            scene_hash: [7; 32],
            stations: vec![],
        };
        let bytes = serialize_table(&f);
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[..4], b"PDFT");
        assert_eq!(deserialize_table(&bytes, Some(&[7; 32])).unwrap(), f);
    }

    #[test]
    fn round_trip_is_lossless() {
        let g = AngleGrid::from_degrees(36.0, 18.0).unwrap();
        assert_eq!(g.n_cells(), 100);
        let f = TableFile {
            scene_hash: [3; 32],
            stations: vec![synthetic(g, 0), synthetic(g, 5)],
        };
        let bytes = serialize_table(&f);
        let back = deserialize_table(&bytes, Some(&[3; 32])).unwrap();
        for (a, b) in f.stations.iter().zip(&back.stations) {
            assert_eq!((a.station_id, a.grid, a.n_rays, a.sigma_urad, a.seed), (b.station_id, b.grid, b.n_rays, b.sigma_urad, b.seed));
            for (ca, cb) in a.cells.iter().zip(&b.cells) {
                match (ca, cb) {
                    (TableCell::Model(x), TableCell::Model(y)) => {
                        for (p, q) in x.components.iter().zip(&y.components) {
                            assert_eq!(p.weight.to_bits(), q.weight.to_bits());
                            assert_eq!(p.mean, q.mean);
                            assert_eq!(p.cov.map(f64::to_bits), q.cov.map(f64::to_bits));
                        }
                    }
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
        assert_eq!(serialize_table(&back), bytes);
    }

    #[test]
    fn single_station_header_layout() {
        let g = AngleGrid::from_degrees(36.0, 18.0).unwrap();
        let bytes = serialize_table(&TableFile {
            scene_hash: [0xab; 32],
            stations: vec![synthetic(g, 9)],
        });
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), TABLE_FORMAT_VERSION);
        assert_eq!(&bytes[8..40], &[0xab; 32]);
        assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(bytes[44..48].try_into().unwrap()), 36_000_000);
        assert_eq!(u32::from_le_bytes(bytes[48..52].try_into().unwrap()), 18_000_000);
        assert_eq!(u32::from_le_bytes(bytes[52..56].try_into().unwrap()), 1000);
        assert_eq!(u64::from_le_bytes(bytes[56..64].try_into().unwrap()), 17453);
        assert_eq!(u64::from_le_bytes(bytes[64..72].try_into().unwrap()), 99);
        // First cell: k = 1 then six values.
        assert_eq!(u16::from_le_bytes(bytes[72..74].try_into().unwrap()), 1);
    }

    #[test]
    fn tampered_hash_and_version_are_rejected() {
        let f = TableFile {
            scene_hash: [1; 32],
            stations: vec![],
        };
        let mut bytes = serialize_table(&f);
        let err = deserialize_table(&bytes, Some(&[2; 32])).unwrap_err();
        assert!(err.to_string().contains(&"01".repeat(32)), "{err}");
        bytes[4] = 9;
        assert!(matches!(deserialize_table(&bytes, None), Err(TableError::Version { found: 9, .. })));
        assert!(matches!(deserialize_table(b"NOPE", None), Err(TableError::Magic(_))));
        let g = AngleGrid::from_degrees(36.0, 18.0).unwrap();
        let full = serialize_table(&TableFile {
            scene_hash: [1; 32],
            stations: vec![synthetic(g, 0)],
        });
        assert!(matches!(deserialize_table(&full[..full.len() - 3], None), Err(TableError::Truncated(_))));
    }

    #[test]
    fn build_is_deterministic_and_sparse() {
        let scene = generate_clutter_scene(&SceneGenConfig::default()).unwrap();
        let st = scene.stations()[0];
        let g = AngleGrid::from_degrees(36.0, 18.0).unwrap();
        let opts = TableBuildOptions {
            grid: g,
            n_rays: 200,
            seed: 5,
            k_range: 1..=3,
            fit: FitOptions::default(),
            launch: LaunchOptions::default(),
            cells: Some(vec![71, 72, 81, 3]),
        };
        let m = MeasurementModel::from_variance_deg2(1.0).unwrap();
        let a = build_table(&scene, &st, &m, &opts);
        let b = build_table(&scene, &st, &m, &opts);
        let hash = scene.content_hash();
        let fa = serialize_table(&TableFile { scene_hash: hash, stations: vec![a.clone()] });
        let fb = serialize_table(&TableFile { scene_hash: hash, stations: vec![b] });
        assert_eq!(fa, fb);
        assert_eq!(a.cells.iter().filter(|c| **c == TableCell::Empty(EmptyReason::NotBuilt)).count(), 96);
        assert!(a.model_count() >= 3);
        // Polar 0° points straight up: still reaches the floor after a bounce.
        for (i, c) in a.cells.iter().enumerate() {
            if let TableCell::Model(gm) = c {
                assert!([71, 72, 81, 3].contains(&i));
                assert_eq!(a.stored_parameters() % 6, 0);
                let s: f64 = gm.components.iter().map(|c| c.weight).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
