//! Square-counting baseline.
//!
//! The plane is divided into squares; a square is eligible when points from at
//! least `min_stations` different stations fall in it, and the eligible square
//! with the most points wins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sampling::PointMap;
use crate::scene::{Point2, Rect2};

/// Per-square, per-station point counts over a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareGrid {
    pub rect: Rect2,
    pub size: f64,
    pub nx: usize,
    pub ny: usize,
    /// Occupied squares by row-major index; counts are parallel to the input maps.
    pub counts: BTreeMap<usize, Vec<u32>>,
}

impl SquareGrid {
    pub fn build(maps: &[PointMap], rect: Rect2, size: f64) -> Self {
        assert!(size > 0.0, "square size must be positive");
        let nx = ((rect.width() / size).ceil() as usize).max(1);
        let ny = ((rect.height() / size).ceil() as usize).max(1);
        let mut counts: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for (s, map) in maps.iter().enumerate() {
            for p in &map.points {
                let Some(idx) = Self::index_of(&rect, size, nx, ny, *p) else {
                    continue;
                };
                counts.entry(idx).or_insert_with(|| vec![0; maps.len()])[s] += 1;
            }
        }
        SquareGrid {
            rect,
            size,
            nx,
            ny,
            counts,
        }
    }

    fn index_of(rect: &Rect2, size: f64, nx: usize, ny: usize, p: Point2) -> Option<usize> {
        if !rect.contains(p) {
            return None;
        }
        let ix = (((p.x - rect.min.x) / size) as usize).min(nx - 1);
        let iy = (((p.y - rect.min.y) / size) as usize).min(ny - 1);
        Some(iy * nx + ix)
    }

    pub fn center(&self, idx: usize) -> Point2 {
        let (ix, iy) = (idx % self.nx, idx / self.nx);
        self.rect.clamp(Point2::new(
            self.rect.min.x + (ix as f64 + 0.5) * self.size,
            self.rect.min.y + (iy as f64 + 0.5) * self.size,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareEstimate {
    pub position: Point2,
    pub square_index: usize,
    pub count: u32,
    pub stations: usize,
}

/// Center of the best eligible square, or `None` when no square qualifies.
pub fn square_method(maps: &[PointMap], rect: Rect2, square_size: f64, min_stations: usize) -> Option<SquareEstimate> {
    let grid = SquareGrid::build(maps, rect, square_size);
    let mut best: Option<SquareEstimate> = None;
    for (&idx, counts) in &grid.counts {
        let stations = counts.iter().filter(|&&c| c > 0).count();
        if stations < min_stations {
            continue;
        }
        let total: u32 = counts.iter().sum();
        // Ascending index order: strict improvement keeps the lowest index on ties.
        if best.map_or(true, |b| total > b.count) {
            best = Some(SquareEstimate {
                position: grid.center(idx),
                square_index: idx,
                count: total,
                stations,
            });
        }
    }
    best
}
