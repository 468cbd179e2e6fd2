//! Experiment driver: UE drops, measurement synthesis, the three estimators,
//! error statistics and timing.
//!
//! A run is a pure function of its [`ExperimentConfig`]. Every random draw
//! comes from a substream keyed by the master seed and the drop index, and all
//! parallel work is order preserving, so the report is byte-identical for any
//! thread count. Wall times are returned next to the report, never inside it.

mod bench;
mod stats;

pub use bench::{benchmark_raytrace, time_trace, TimingRow, TimingTable};
pub use stats::{cdf_csv, error_cdf, log_log_slope, quantile, Quantiles};

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{AddAssign, RangeInclusive};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{square_method, FitOptions, COV_FLOOR};
use crate::fusion::{
    argmax_position, build_table, cell_seeds, combine_with_dropout, deserialize_table, fit_map, lookup,
    posterior_grid, serialize_table, AngleGrid, EmptyReason, PdfTable, StationModel, TableBuildOptions, TableCell,
    TableError, TableFile, DEFAULT_RESOLUTION,
};
use crate::par;
use crate::rng::{self, tag};
use crate::sampling::{
    launch_map_with, Angle, LaunchOptions, MeasurementModel, PointMap, ReciprocityIndex, SamplingError, TruthOptions,
    DEFAULT_MAX_BOUNCES,
};
use crate::scene::{generate_clutter_scene, in_free_space, load_scene, Point2, Rect2, Scene, SceneError, SceneGenConfig};

/// Attempts per drop before it is recorded as skipped.
pub const MAX_RESAMPLE: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneSource {
    File(PathBuf),
    Generate(SceneGenConfig),
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Generate(SceneGenConfig::default())
    }
}

impl SceneSource {
    pub fn load(&self) -> Result<Scene, HarnessError> {
        Ok(match self {
            SceneSource::File(p) => load_scene(p)?,
            SceneSource::Generate(g) => generate_clutter_scene(g)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    GmmOnline,
    GmmTable,
    Square,
}

/// Angle grid and build parameters for table mode and for snapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSettings {
    pub az_step_deg: f64,
    pub polar_step_deg: f64,
    /// Rays per cell.
    pub n_rays: usize,
    pub seed: u64,
}

impl Default for TableSettings {
    fn default() -> Self {
        TableSettings {
            az_step_deg: 1.0,
            polar_step_deg: 1.0,
            n_rays: 100,
            seed: 1,
        }
    }
}

impl TableSettings {
    pub fn grid(&self) -> Result<AngleGrid, TableError> {
        AngleGrid::from_degrees(self.az_step_deg, self.polar_step_deg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub cov_floor: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            k_min: 1,
            k_max: 8,
            restarts: 3,
            max_iter: 200,
            tol: 1e-6,
            cov_floor: COV_FLOOR,
        }
    }
}

impl EmSettings {
    pub fn k_range(&self) -> RangeInclusive<usize> {
        self.k_min..=self.k_max
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            seed: 0,
            max_iter: self.max_iter,
            tol: self.tol,
            cov_floor: self.cov_floor,
            restarts: self.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSource,
    /// Measurement-error variance per angle component, squared degrees.
    pub sigma2_deg: f64,
    /// Rays per station for online maps.
    pub n_rays: usize,
    pub estimators: Vec<Estimator>,
    pub drops: usize,
    pub seed: u64,
    /// Posterior grid cell size, meters.
    pub resolution: f64,
    /// Prebuilt tables; when absent, table mode builds the cells it needs.
    pub table_path: Option<PathBuf>,
    pub table: TableSettings,
    /// Snap measured angles to the table grid before online estimation and
    /// use the table's per-cell seeds and ray count.
    pub snap_to_table: bool,
    pub square_size: f64,
    pub min_stations: usize,
    pub em: EmSettings,
    pub max_bounces: u32,
    pub truth: TruthOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene: SceneSource::default(),
            sigma2_deg: 1.0,
            n_rays: 100,
            estimators: vec![Estimator::GmmOnline, Estimator::Square],
            drops: 500,
            seed: 1,
            resolution: DEFAULT_RESOLUTION,
            table_path: None,
            table: TableSettings::default(),
            snap_to_table: false,
            square_size: 0.25,
            min_stations: 3,
            em: EmSettings::default(),
            max_bounces: DEFAULT_MAX_BOUNCES,
            truth: TruthOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.drops == 0 {
            return bad("drops must be at least 1");
        }
        if self.n_rays == 0 || self.table.n_rays == 0 {
            return bad("n_rays must be at least 1");
        }
        if !(self.sigma2_deg.is_finite() && self.sigma2_deg >= 0.0) {
            return bad("sigma2_deg must be finite and non-negative");
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return bad("resolution must be positive");
        }
        if !(self.square_size.is_finite() && self.square_size > 0.0) {
            return bad("square_size must be positive");
        }
        if self.min_stations == 0 {
            return bad("min_stations must be at least 1");
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required");
        }
        let em = &self.em;
        if em.k_min == 0 || em.k_min > em.k_max || em.k_max > 20 {
            return bad("em k range must satisfy 1 <= k_min <= k_max <= 20");
        }
        if em.restarts == 0 || !(em.tol.is_finite() && em.tol >= 0.0) || !(em.cov_floor > 0.0) {
            return bad("em restarts must be positive, tol non-negative and cov_floor positive");
        }
        if self.uses_table_grid() {
            self.table.grid()?;
        }
        let t = &self.truth;
        if t.n_polar == 0 || t.n_azimuth == 0 || !(t.eps_hit > 0.0) || !(t.search_radius > 0.0) || t.refine == 0 {
            return bad("truth options must be positive");
        }
        Ok(())
    }

    fn uses_table_grid(&self) -> bool {
        self.snap_to_table || (self.estimators.contains(&Estimator::GmmTable) && self.table_path.is_none())
    }

    fn wants(&self, e: Estimator) -> bool {
        self.estimators.contains(&e)
    }

    fn launch(&self) -> LaunchOptions {
        LaunchOptions {
            max_bounces: self.max_bounces,
            ..Default::default()
        }
    }
}

/// A scene plus its per-station ground-truth indexes, shared across runs.
pub struct PreparedScene {
    pub scene: Scene,
    pub obstacles: Vec<Rect2>,
    pub truth: Vec<ReciprocityIndex>,
    pub truth_options: TruthOptions,
    /// Wall seconds spent building the indexes.
    pub build_seconds: f64,
}

impl PreparedScene {
    pub fn new(scene: Scene, truth_options: TruthOptions) -> Self {
        let start = Instant::now();
        let truth = scene
            .stations()
            .iter()
            .map(|s| ReciprocityIndex::build(&scene, s, truth_options))
            .collect();
        PreparedScene {
            obstacles: scene.obstacle_footprints(),
            scene,
            truth,
            truth_options,
            build_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationMeasurement {
    pub station_id: u32,
    pub truth: Angle,
    pub measured: Angle,
    /// Length of the ground-truth path, meters.
    pub path_length: f64,
    pub bounces: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub station_id: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutcome {
    pub estimator: Estimator,
    pub position: Option<Point2>,
    /// Posterior cell or square index of the estimate.
    pub cell: Option<usize>,
    pub error_m: Option<f64>,
    pub failure: Option<String>,
    pub stations_used: Vec<u32>,
    pub excluded: Vec<Exclusion>,
}

impl EstimatorOutcome {
    fn failed(estimator: Estimator, reason: String, excluded: Vec<Exclusion>) -> Self {
        EstimatorOutcome {
            estimator,
            position: None,
            cell: None,
            error_m: None,
            failure: Some(reason),
            stations_used: Vec::new(),
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropResult {
    pub drop: usize,
    /// UE positions tried, including the accepted one.
    pub attempts: usize,
    pub ue: Point2,
    pub stations: Vec<StationMeasurement>,
    pub outcomes: Vec<EstimatorOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkippedDrop {
    pub drop: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    /// Drops that reached estimation (skipped drops excluded).
    pub drops: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// Over successful drops only.
    pub quantiles: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub scene_hash: String,
    pub drops: Vec<DropResult>,
    pub skipped: Vec<SkippedDrop>,
    pub summaries: Vec<EstimatorSummary>,
}

impl ExperimentReport {
    /// Errors of the successful drops of one estimator, in drop order.
    pub fn errors(&self, estimator: Estimator) -> Vec<f64> {
        self.outcomes(estimator).filter_map(|o| o.error_m).collect()
    }

    pub fn outcomes(&self, estimator: Estimator) -> impl Iterator<Item = &EstimatorOutcome> + '_ {
        self.drops
            .iter()
            .flat_map(move |d| d.outcomes.iter().filter(move |o| o.estimator == estimator))
    }

    pub fn summary(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == estimator)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Recomputes the per-estimator summaries from drop records.
pub fn summarize(drops: &[DropResult], estimators: &[Estimator]) -> Vec<EstimatorSummary> {
    let set: BTreeSet<Estimator> = estimators.iter().copied().collect();
    set.into_iter()
        .map(|e| {
            let outs: Vec<&EstimatorOutcome> = drops
                .iter()
                .flat_map(|d| d.outcomes.iter().filter(|o| o.estimator == e))
                .collect();
            let failures = outs.iter().filter(|o| o.failure.is_some()).count();
            let errors: Vec<f64> = outs.iter().filter_map(|o| o.error_m).collect();
            EstimatorSummary {
                estimator: e,
                drops: outs.len(),
                failures,
                failure_rate: if outs.is_empty() { 0.0 } else { failures as f64 / outs.len() as f64 },
                quantiles: Quantiles::of(&errors),
            }
        })
        .collect()
}

/// Wall seconds per stage, summed over drops.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub truth_s: f64,
    pub trace_s: f64,
    pub fit_s: f64,
    pub fuse_s: f64,
    pub table_s: f64,
}

impl AddAssign for StageTimes {
    fn add_assign(&mut self, o: Self) {
        self.truth_s += o.truth_s;
        self.trace_s += o.trace_s;
        self.fit_s += o.fit_s;
        self.fuse_s += o.fuse_s;
        self.table_s += o.table_s;
    }
}

pub struct RunOutput {
    pub report: ExperimentReport,
    pub times: StageTimes,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Drop {
    index: usize,
    attempts: usize,
    ue: Point2,
    stations: Vec<StationMeasurement>,
}

fn synthesize_drop(prep: &PreparedScene, model: &MeasurementModel, seed: u64, d: usize) -> Result<Drop, SkippedDrop> {
    let rect = prep.scene.floor_rect();
    let mut r = rng::substream(rng::derive(seed, &[tag::DROP]), d as u64);
    'attempt: for attempt in 1..=MAX_RESAMPLE {
        let ue = Point2::new(
            rect.min.x + r.gen::<f64>() * rect.width(),
            rect.min.y + r.gen::<f64>() * rect.height(),
        );
        if !in_free_space(ue, &prep.obstacles) {
            continue;
        }
        let mut stations = Vec::with_capacity(prep.truth.len());
        for (si, idx) in prep.truth.iter().enumerate() {
            let Ok(path) = idx.query(&prep.scene, ue) else {
                continue 'attempt;
            };
            let mut z = rng::substream(rng::derive(seed, &[tag::NOISE, d as u64]), si as u64);
            let (za, zp): (f64, f64) = (z.sample(StandardNormal), z.sample(StandardNormal));
            stations.push(StationMeasurement {
                station_id: idx.station().id,
                truth: path.angle,
                measured: model.perturb(path.angle, za, zp),
                path_length: path.path_length,
                bounces: path.bounces,
            });
        }
        return Ok(Drop {
            index: d,
            attempts: attempt,
            ue,
            stations,
        });
    }
    Err(SkippedDrop {
        drop: d,
        attempts: MAX_RESAMPLE,
    })
}

fn reason_name(r: EmptyReason) -> &'static str {
    match r {
        EmptyReason::EmptyMap => "empty_map",
        EmptyReason::FitFailed => "fit_failed",
        EmptyReason::NotBuilt => "not_built",
    }
}

/// Runs the configured estimators on one set of measurements.
struct Locator<'a> {
    scene: &'a Scene,
    cfg: &'a ExperimentConfig,
    model: MeasurementModel,
    snap: Option<AngleGrid>,
    tables: BTreeMap<u32, PdfTable>,
}

impl<'a> Locator<'a> {
    fn new(scene: &'a Scene, cfg: &'a ExperimentConfig, tables: BTreeMap<u32, PdfTable>) -> Result<Self, HarnessError> {
        Ok(Locator {
            scene,
            cfg,
            model: MeasurementModel::from_variance_deg2(cfg.sigma2_deg)?,
            snap: if cfg.snap_to_table { Some(cfg.table.grid()?) } else { None },
            tables,
        })
    }

    /// `key` separates the ray and fit seeds of different drops.
    fn estimate(&self, key: u64, measured: &[(u32, Angle)], times: &mut StageTimes) -> Vec<EstimatorOutcome> {
        let cfg = self.cfg;
        let mut out = Vec::new();
        let online = cfg.wants(Estimator::GmmOnline);
        let square = cfg.wants(Estimator::Square);
        if online || square {
            let mut maps = Vec::with_capacity(measured.len());
            let mut models = Vec::new();
            let mut excluded = Vec::new();
            for &(id, y) in measured {
                let st = self.scene.station(id).expect("measured station exists in scene");
                let (y, n, ray_key, fit_seed) = match &self.snap {
                    Some(grid) => {
                        let cell = grid.cell_of(y);
                        let (rk, fs) = cell_seeds(cfg.table.seed, id, cell);
                        (grid.angle(cell), cfg.table.n_rays, rk, fs)
                    }
                    None => (
                        y,
                        cfg.n_rays,
                        rng::derive(cfg.seed, &[tag::RAYS, key, id as u64]),
                        rng::derive(cfg.seed, &[tag::EM, key, id as u64]),
                    ),
                };
                let t = Instant::now();
                let map = launch_map_with(self.scene, st, y, &self.model, n, ray_key, &cfg.launch());
                times.trace_s += t.elapsed().as_secs_f64();
                if online {
                    let t = Instant::now();
                    match fit_map(&map, fit_seed, cfg.em.k_range(), &cfg.em.fit_options()) {
                        TableCell::Model(gmm) => models.push(StationModel { station_id: id, gmm }),
                        TableCell::Empty(r) => excluded.push(Exclusion {
                            station_id: id,
                            reason: reason_name(r).to_string(),
                        }),
                    }
                    times.fit_s += t.elapsed().as_secs_f64();
                }
                maps.push(map);
            }
            if online {
                out.push(self.fuse(Estimator::GmmOnline, models, excluded, times));
            }
            if square {
                out.push(self.square(&maps, times));
            }
        }
        if cfg.wants(Estimator::GmmTable) {
            let mut models = Vec::new();
            let mut excluded = Vec::new();
            let t = Instant::now();
            for &(id, y) in measured {
                match self.tables.get(&id).map(|tb| lookup(tb, y)) {
                    Some(TableCell::Model(g)) => models.push(StationModel {
                        station_id: id,
                        gmm: g.clone(),
                    }),
                    Some(TableCell::Empty(r)) => excluded.push(Exclusion {
                        station_id: id,
                        reason: reason_name(*r).to_string(),
                    }),
                    None => excluded.push(Exclusion {
                        station_id: id,
                        reason: "no_table".to_string(),
                    }),
                }
            }
            times.table_s += t.elapsed().as_secs_f64();
            out.push(self.fuse(Estimator::GmmTable, models, excluded, times));
        }
        out.sort_by_key(|o| o.estimator);
        out
    }

    fn fuse(
        &self,
        estimator: Estimator,
        models: Vec<StationModel>,
        mut excluded: Vec<Exclusion>,
        times: &mut StageTimes,
    ) -> EstimatorOutcome {
        let t = Instant::now();
        // Noise-free maps are point masses at the covariance floor; every
        // model would be dropped as ill-conditioned, so dropout is skipped.
        let kept: Vec<&StationModel> = if self.model.sigma == 0.0 {
            models.iter().collect()
        } else {
            match combine_with_dropout(&models) {
                Ok(c) => {
                    excluded.extend(c.dropped.iter().map(|&id| Exclusion {
                        station_id: id,
                        reason: "ill_conditioned".to_string(),
                    }));
                    c.kept
                }
                Err(e) => {
                    times.fuse_s += t.elapsed().as_secs_f64();
                    return EstimatorOutcome::failed(estimator, e.to_string(), excluded);
                }
            }
        };
        if kept.len() < 2 {
            times.fuse_s += t.elapsed().as_secs_f64();
            return EstimatorOutcome::failed(estimator, format!("{} usable models, need 2", kept.len()), excluded);
        }
        let gmms: Vec<&crate::density::Gmm> = kept.iter().map(|m| &m.gmm).collect();
        let res = posterior_grid(&gmms, self.scene.floor_rect(), self.cfg.resolution).and_then(|f| argmax_position(&f));
        times.fuse_s += t.elapsed().as_secs_f64();
        excluded.sort_by_key(|e| e.station_id);
        match res {
            Ok(est) => EstimatorOutcome {
                estimator,
                position: Some(est.position),
                cell: Some(est.cell),
                error_m: None,
                failure: None,
                stations_used: kept.iter().map(|m| m.station_id).collect(),
                excluded,
            },
            Err(e) => EstimatorOutcome::failed(estimator, e.to_string(), excluded),
        }
    }

    fn square(&self, maps: &[PointMap], times: &mut StageTimes) -> EstimatorOutcome {
        let t = Instant::now();
        let est = square_method(maps, self.scene.floor_rect(), self.cfg.square_size, self.cfg.min_stations);
        times.fuse_s += t.elapsed().as_secs_f64();
        match est {
            Some(e) => EstimatorOutcome {
                estimator: Estimator::Square,
                position: Some(e.position),
                cell: Some(e.square_index),
                error_m: None,
                failure: None,
                stations_used: maps.iter().map(|m| m.station_id).collect(),
                excluded: Vec::new(),
            },
            None => EstimatorOutcome::failed(
                Estimator::Square,
                format!("no square holds points from {} stations", self.cfg.min_stations),
                Vec::new(),
            ),
        }
    }
}

fn check_table(t: &PdfTable, model: &MeasurementModel) -> Result<(), HarnessError> {
    let want = (model.sigma * 1e6).round() as u64;
    if t.sigma_urad != want {
        return Err(HarnessError::Config(format!(
            "table for station {} was built with sigma {} urad, config needs {want}",
            t.station_id, t.sigma_urad
        )));
    }
    Ok(())
}

/// Loads the configured table file, checked against the scene hash and sigma.
pub fn load_tables(scene: &Scene, cfg: &ExperimentConfig) -> Result<BTreeMap<u32, PdfTable>, HarnessError> {
    let path = cfg
        .table_path
        .as_ref()
        .ok_or_else(|| HarnessError::Config("table estimator needs table_path".into()))?;
    let model = MeasurementModel::from_variance_deg2(cfg.sigma2_deg)?;
    let file = TableFile::load(path, Some(&scene.content_hash()))?;
    let mut out = BTreeMap::new();
    for st in scene.stations() {
        let t = file.station(st.id).ok_or(TableError::MissingStation(st.id))?;
        check_table(t, &model)?;
        out.insert(st.id, t.clone());
    }
    Ok(out)
}

/// Builds full (or, with `cells`, partial) tables for every station.
pub fn build_tables(
    scene: &Scene,
    cfg: &ExperimentConfig,
    cells: Option<&BTreeMap<u32, BTreeSet<usize>>>,
) -> Result<TableFile, HarnessError> {
    let model = MeasurementModel::from_variance_deg2(cfg.sigma2_deg)?;
    let grid = cfg.table.grid()?;
    let stations = scene
        .stations()
        .iter()
        .map(|st| {
            let opts = TableBuildOptions {
                grid,
                n_rays: cfg.table.n_rays,
                seed: cfg.table.seed,
                k_range: cfg.em.k_range(),
                fit: cfg.em.fit_options(),
                launch: cfg.launch(),
                cells: cells.map(|c| c.get(&st.id).map(|s| s.iter().copied().collect()).unwrap_or_default()),
            };
            build_table(scene, st, &model, &opts)
        })
        .collect();
    Ok(TableFile {
        scene_hash: scene.content_hash(),
        stations,
    })
}

fn tables_for_drops(scene: &Scene, cfg: &ExperimentConfig, drops: &[Drop]) -> Result<BTreeMap<u32, PdfTable>, HarnessError> {
    if cfg.table_path.is_some() {
        return load_tables(scene, cfg);
    }
    let grid = cfg.table.grid()?;
    let mut cells: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for d in drops {
        for m in &d.stations {
            cells.entry(m.station_id).or_default().insert(grid.cell_of(m.measured));
        }
    }
    let file = build_tables(scene, cfg, Some(&cells))?;
    // Round trip through the file format so table mode reads what a saved table holds.
    let hash = scene.content_hash();
    let file = deserialize_table(&serialize_table(&file), Some(&hash))?;
    Ok(file.stations.into_iter().map(|t| (t.station_id, t)).collect())
}

/// Builds the scene and its ground-truth indexes, then runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let prep = PreparedScene::new(cfg.scene.load()?, cfg.truth);
    let mut out = run_prepared(&prep, cfg)?;
    out.times.truth_s += prep.build_seconds;
    Ok(out)
}

/// Runs the experiment on an already prepared scene. The config's scene
/// source is echoed in the report but not reloaded.
pub fn run_prepared(prep: &PreparedScene, cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    if cfg.truth != prep.truth_options {
        return Err(HarnessError::Config("truth options differ from the prepared scene".into()));
    }
    if prep.scene.stations().len() < 2 {
        return Err(HarnessError::Config("at least two stations are required".into()));
    }
    let model = MeasurementModel::from_variance_deg2(cfg.sigma2_deg)?;
    let mut times = StageTimes::default();

    let t = Instant::now();
    let synthesized = par::map_range(cfg.drops, |d| synthesize_drop(prep, &model, cfg.seed, d));
    times.truth_s += t.elapsed().as_secs_f64();
    let mut drops = Vec::new();
    let mut skipped = Vec::new();
    for s in synthesized {
        match s {
            Ok(d) => drops.push(d),
            Err(s) => skipped.push(s),
        }
    }

    let tables = if cfg.wants(Estimator::GmmTable) {
        let t = Instant::now();
        let tb = tables_for_drops(&prep.scene, cfg, &drops)?;
        times.table_s += t.elapsed().as_secs_f64();
        tb
    } else {
        BTreeMap::new()
    };
    let locator = Locator::new(&prep.scene, cfg, tables)?;

    let results = par::map_slice(&drops, |d| {
        let mut tm = StageTimes::default();
        let measured: Vec<(u32, Angle)> = d.stations.iter().map(|m| (m.station_id, m.measured)).collect();
        let mut outcomes = locator.estimate(d.index as u64, &measured, &mut tm);
        for o in &mut outcomes {
            o.error_m = o.position.map(|p| p.distance(d.ue));
        }
        (
            DropResult {
                drop: d.index,
                attempts: d.attempts,
                ue: d.ue,
                stations: d.stations.clone(),
                outcomes,
            },
            tm,
        )
    });
    let mut records = Vec::with_capacity(results.len());
    for (r, tm) in results {
        times += tm;
        records.push(r);
    }
    let summaries = summarize(&records, &cfg.estimators);
    Ok(RunOutput {
        report: ExperimentReport {
            config: cfg.clone(),
            scene_hash: hex(&prep.scene.content_hash()),
            drops: records,
            skipped,
            summaries,
        },
        times,
    })
}

/// One measured angle for single-shot positioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleMeasurement {
    pub station_id: u32,
    pub azimuth_deg: f64,
    pub polar_deg: f64,
}

/// Positions one UE from one measurement per station with a single estimator.
pub fn locate(
    scene: &Scene,
    cfg: &ExperimentConfig,
    estimator: Estimator,
    measurements: &[AngleMeasurement],
) -> Result<EstimatorOutcome, HarnessError> {
    let mut cfg = cfg.clone();
    cfg.estimators = vec![estimator];
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    for m in measurements {
        if scene.station(m.station_id).is_none() || !seen.insert(m.station_id) {
            return Err(HarnessError::Config(format!("unknown or repeated station {}", m.station_id)));
        }
        if !(m.azimuth_deg.is_finite() && m.polar_deg.is_finite()) {
            return Err(HarnessError::Config("angles must be finite".into()));
        }
    }
    let tables = if estimator == Estimator::GmmTable {
        load_tables(scene, &cfg)?
    } else {
        BTreeMap::new()
    };
    let loc = Locator::new(scene, &cfg, tables)?;
    let measured: Vec<(u32, Angle)> = measurements
        .iter()
        .map(|m| (m.station_id, Angle::from_degrees(m.azimuth_deg, m.polar_deg)))
        .collect();
    let mut times = StageTimes::default();
    let out = loc.estimate(0, &measured, &mut times);
    Ok(out.into_iter().next().expect("one estimator requested"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub estimator: Estimator,
    pub n_rays: usize,
    pub drops: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub quantiles: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub sigma2_deg: f64,
    pub rows: Vec<ComparisonRow>,
    /// 90% quantile at the low ray count over the one at the high ray count.
    pub gmm_q90_ratio: Option<f64>,
    pub square_q90_ratio: Option<f64>,
}

impl ModeComparison {
    pub fn row(&self, estimator: Estimator, n_rays: usize) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n_rays == n_rays)
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<11} {:>7} {:>6} {:>6} {:>8} {:>8} {:>8}\n",
            "estimator", "n_rays", "drops", "FR", "q50_m", "q90_m", "q99_m"
        );
        for r in &self.rows {
            let q = |f: fn(&Quantiles) -> f64| r.quantiles.as_ref().map_or("-".to_string(), |q| format!("{:.3}", f(q)));
            s.push_str(&format!(
                "{:<11} {:>7} {:>6} {:>6.3} {:>8} {:>8} {:>8}\n",
                format!("{:?}", r.estimator).to_lowercase(),
                r.n_rays,
                r.drops,
                r.failure_rate,
                q(|q| q.q50),
                q(|q| q.q90),
                q(|q| q.q99)
            ));
        }
        s
    }
}

pub struct ComparisonRun {
    pub comparison: ModeComparison,
    pub low: RunOutput,
    pub high: RunOutput,
}

/// GMM online and the square baseline at a low and a high ray count on the
/// same drops and noise draws.
pub fn compare_modes(
    prep: &PreparedScene,
    base: &ExperimentConfig,
    n_low: usize,
    n_high: usize,
) -> Result<ComparisonRun, HarnessError> {
    let run = |n: usize| {
        let cfg = ExperimentConfig {
            n_rays: n,
            estimators: vec![Estimator::GmmOnline, Estimator::Square],
            snap_to_table: false,
            ..base.clone()
        };
        run_prepared(prep, &cfg)
    };
    let low = run(n_low)?;
    let high = run(n_high)?;
    let mut rows = Vec::new();
    for e in [Estimator::GmmOnline, Estimator::Square] {
        for (n, out) in [(n_low, &low), (n_high, &high)] {
            let s = out.report.summary(e).expect("estimator was run");
            rows.push(ComparisonRow {
                estimator: e,
                n_rays: n,
                drops: s.drops,
                failures: s.failures,
                failure_rate: s.failure_rate,
                quantiles: s.quantiles,
            });
        }
    }
    let ratio = |e: Estimator| -> Option<f64> {
        let a = low.report.summary(e)?.quantiles?.q90;
        let b = high.report.summary(e)?.quantiles?.q90;
        Some(a / b)
    };
    let comparison = ModeComparison {
        sigma2_deg: base.sigma2_deg,
        gmm_q90_ratio: ratio(Estimator::GmmOnline),
        square_q90_ratio: ratio(Estimator::Square),
        rows,
    };
    Ok(ComparisonRun { comparison, low, high })
}
