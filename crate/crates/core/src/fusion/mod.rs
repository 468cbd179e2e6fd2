//! Posterior over the UE plane from per-station densities.
//!
//! The posterior under a uniform prior is the product of the per-station
//! mixture densities. It is evaluated in log space on a regular grid of cell
//! centers and exponentiated after subtracting the maximum.

mod table;

pub use table::{
    build_table, cell_seeds, deserialize_table, fit_cell, fit_map, lookup, serialize_table, AngleGrid, EmptyReason,
    PdfTable, TableBuildOptions, TableCell, TableError, TableFile, TABLE_FORMAT_VERSION, TABLE_MAGIC,
    VALUES_PER_COMPONENT,
};

use serde::{Deserialize, Serialize};

use crate::density::{is_well_conditioned, Gmm};
use crate::par;
use crate::scene::{Point2, Rect2};

/// Default posterior grid resolution, meters.
pub const DEFAULT_RESOLUTION: f64 = 0.05;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("posterior has no support")]
    NoSupport,
    #[error("only {survivors} well-conditioned models (dropped stations {dropped:?}), need 2")]
    TooFewModels { survivors: usize, dropped: Vec<u32> },
    #[error("invalid posterior grid: {0}")]
    InvalidGrid(String),
}

/// Posterior values on a row-major grid of cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    pub rect: Rect2,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
    /// Unnormalized log posterior per cell.
    pub log_values: Vec<f64>,
    /// `exp(log_values − max)`; the peak cell is 1.
    pub values: Vec<f64>,
    pub max_log: f64,
}

impl ProbabilityField {
    /// Wraps precomputed log values laid out row-major over `nx × ny` cells.
    pub fn from_log_values(rect: Rect2, resolution: f64, nx: usize, ny: usize, log_values: Vec<f64>) -> Self {
        assert_eq!(log_values.len(), nx * ny);
        let max_log = log_values
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
        let values = log_values
            .iter()
            .map(|&l| if max_log.is_finite() && l.is_finite() { (l - max_log).exp() } else { 0.0 })
            .collect();
        ProbabilityField {
            rect,
            resolution,
            nx,
            ny,
            log_values,
            values,
            max_log,
        }
    }

    pub fn dims(rect: &Rect2, resolution: f64) -> (usize, usize) {
        (
            ((rect.width() / resolution).ceil() as usize).max(1),
            ((rect.height() / resolution).ceil() as usize).max(1),
        )
    }

    pub fn center(&self, ix: usize, iy: usize) -> Point2 {
        cell_center(&self.rect, self.resolution, ix, iy)
    }

    /// Row-major index of the cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: Point2) -> Option<usize> {
        if !self.rect.contains(p) {
            return None;
        }
        let ix = (((p.x - self.rect.min.x) / self.resolution) as usize).min(self.nx - 1);
        let iy = (((p.y - self.rect.min.y) / self.resolution) as usize).min(self.ny - 1);
        Some(iy * self.nx + ix)
    }

    /// Cells with a finite log value.
    pub fn support(&self) -> usize {
        self.log_values.iter().filter(|v| v.is_finite()).count()
    }
}

fn cell_center(rect: &Rect2, res: f64, ix: usize, iy: usize) -> Point2 {
    Point2::new(rect.min.x + (ix as f64 + 0.5) * res, rect.min.y + (iy as f64 + 0.5) * res)
}

/// Evaluates `∏ p_i(x)` at every cell center of a `resolution` grid over `rect`.
pub fn posterior_grid(models: &[&Gmm], rect: Rect2, resolution: f64) -> Result<ProbabilityField, FusionError> {
    if models.is_empty() {
        return Err(FusionError::InvalidGrid("no models".into()));
    }
    if !(resolution > 0.0 && rect.width() > 0.0 && rect.height() > 0.0) {
        return Err(FusionError::InvalidGrid(format!("resolution {resolution} over {rect:?}")));
    }
    let (nx, ny) = ProbabilityField::dims(&rect, resolution);
    let evals: Vec<LogDensity> = models.iter().map(|m| LogDensity::new(m)).collect();
    let rows = par::map_range(ny, |iy| {
        (0..nx)
            .map(|ix| {
                let c = cell_center(&rect, resolution, ix, iy);
                evals.iter().map(|e| e.eval(c)).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    Ok(ProbabilityField::from_log_values(rect, resolution, nx, ny, rows.concat()))
}

/// Mixture log density with per-component constants folded in.
pub(crate) struct LogDensity {
    terms: Vec<[f64; 6]>,
}

impl LogDensity {
    pub(crate) fn new(g: &Gmm) -> Self {
        let terms = g
            .components
            .iter()
            .map(|c| {
                let det = crate::density::determinant(&c.cov);
                let k = c.weight.ln() - std::f64::consts::TAU.ln() - 0.5 * det.ln();
                [c.mean.x, c.mean.y, c.cov[2] / det, -c.cov[1] / det, c.cov[0] / det, k]
            })
            .collect();
        LogDensity { terms }
    }

    pub(crate) fn eval(&self, p: Point2) -> f64 {
        let mut m = f64::NEG_INFINITY;
        let mut s = 0.0;
        for t in &self.terms {
            let dx = p.x - t[0];
            let dy = p.y - t[1];
            let l = t[5] - 0.5 * (t[2] * dx * dx + 2.0 * t[3] * dx * dy + t[4] * dy * dy);
            if l > m {
                s = s * (m - l).exp() + 1.0;
                m = l;
            } else {
                s += (l - m).exp();
            }
        }
        m + s.ln()
    }
}

/// Which estimator produced a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Online,
    Table,
    SquareBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub position: Point2,
    /// Log posterior at the winning cell (unnormalized).
    pub log_value: f64,
    pub cell: usize,
    pub stations_used: Vec<u32>,
    pub mode: EstimateMode,
}

/// Maximum cell (lowest index on ties), refined by one Newton step on the
/// log values over its 3×3 neighborhood and clamped to the cell.
pub fn argmax_position(field: &ProbabilityField) -> Result<PositionEstimate, FusionError> {
    let mut best: Option<usize> = None;
    for (i, &v) in field.log_values.iter().enumerate() {
        if v.is_finite() && best.map_or(true, |b| v > field.log_values[b]) {
            best = Some(i);
        }
    }
    let cell = best.ok_or(FusionError::NoSupport)?;
    let (ix, iy) = (cell % field.nx, cell / field.nx);
    let c = field.center(ix, iy);
    let (dx, dy) = refine(field, ix, iy);
    let h = field.resolution / 2.0;
    let position = Point2::new(c.x + dx.clamp(-h, h), c.y + dy.clamp(-h, h));
    Ok(PositionEstimate {
        position: field.rect.clamp(position),
        log_value: field.log_values[cell],
        cell,
        stations_used: Vec::new(),
        mode: EstimateMode::Online,
    })
}

fn refine(field: &ProbabilityField, ix: usize, iy: usize) -> (f64, f64) {
    let f = |x: isize, y: isize| -> Option<f64> {
        let (x, y) = (ix as isize + x, iy as isize + y);
        if x < 0 || y < 0 || x >= field.nx as isize || y >= field.ny as isize {
            return None;
        }
        Some(field.log_values[y as usize * field.nx + x as usize]).filter(|v| v.is_finite())
    };
    let h = field.resolution;
    let f0 = field.log_values[iy * field.nx + ix];
    let axis = |a: Option<f64>, b: Option<f64>| -> Option<(f64, f64)> {
        let (a, b) = (a?, b?);
        Some(((b - a) / (2.0 * h), (a - 2.0 * f0 + b) / (h * h)))
    };
    let gx = axis(f(-1, 0), f(1, 0));
    let gy = axis(f(0, -1), f(0, 1));
    let cross = (|| Some((f(1, 1)? - f(1, -1)? - f(-1, 1)? + f(-1, -1)?) / (4.0 * h * h)))();
    if let (Some((gx, hxx)), Some((gy, hyy)), Some(hxy)) = (gx, gy, cross) {
        let det = hxx * hyy - hxy * hxy;
        if hxx < 0.0 && det > 0.0 {
            return (-(hyy * gx - hxy * gy) / det, -(hxx * gy - hxy * gx) / det);
        }
    }
    let step = |g: Option<(f64, f64)>| match g {
        Some((g, hh)) if hh < 0.0 => -g / hh,
        _ => 0.0,
    };
    (step(gx), step(gy))
}

/// A station's fitted density.
#[derive(Debug, Clone, PartialEq)]
pub struct StationModel {
    pub station_id: u32,
    pub gmm: Gmm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Combined<'a> {
    pub kept: Vec<&'a StationModel>,
    pub dropped: Vec<u32>,
}

/// Drops ill-conditioned models; at least two must survive.
pub fn combine_with_dropout(models: &[StationModel]) -> Result<Combined<'_>, FusionError> {
    let (kept, bad): (Vec<&StationModel>, Vec<&StationModel>) = models.iter().partition(|m| is_well_conditioned(&m.gmm));
    let dropped: Vec<u32> = bad.iter().map(|m| m.station_id).collect();
    if kept.len() < 2 {
        return Err(FusionError::TooFewModels {
            survivors: kept.len(),
            dropped,
        });
    }
    Ok(Combined { kept, dropped })
}
