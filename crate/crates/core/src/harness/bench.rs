//! Ray-tracing cost measurements over triangle count, ray count and bounces.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stats::log_log_slope;
use crate::raytrace::{self, Backend};
use crate::rng::{self, tag};
use crate::scene::{Scene, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    /// Triangle count.
    pub t: usize,
    pub n: usize,
    pub b: u32,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub backend: String,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    /// CSV with header `t,n,b,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,n,b,seconds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.t, r.n, r.b, r.seconds));
        }
        s
    }

    /// Log-log slope of time against `n`, averaged over the other axes' groups.
    pub fn slope_n(&self) -> Option<f64> {
        self.grouped_slope(|r| (r.t, r.b as usize), |r| r.n as f64)
    }

    pub fn slope_t(&self) -> Option<f64> {
        self.grouped_slope(|r| (r.n, r.b as usize), |r| r.t as f64)
    }

    /// Slope against `b + 1` (the number of traced segments).
    pub fn slope_b(&self) -> Option<f64> {
        self.grouped_slope(|r| (r.t, r.n), |r| r.b as f64 + 1.0)
    }

    fn grouped_slope(&self, key: impl Fn(&TimingRow) -> (usize, usize), x: impl Fn(&TimingRow) -> f64) -> Option<f64> {
        let mut groups: std::collections::BTreeMap<(usize, usize), Vec<(f64, f64)>> = Default::default();
        for r in &self.rows {
            groups.entry(key(r)).or_default().push((x(r), r.seconds));
        }
        let slopes: Vec<f64> = groups.values().filter_map(|g| log_log_slope(g)).collect();
        (!slopes.is_empty()).then(|| slopes.iter().sum::<f64>() / slopes.len() as f64)
    }
}

fn unit_directions(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng::substream(rng::derive(seed, &[tag::RAYS]), 0);
    (0..n)
        .map(|_| loop {
            let v = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            let l = v.norm();
            if l > 0.05 && l <= 1.0 {
                break v * (1.0 / l);
            }
        })
        .collect()
}

/// Traces `n` fixed random rays from the first station; returns wall seconds.
/// Runs on the calling thread so timings are not affected by scheduling.
pub fn time_trace(scene: &Scene, n: usize, b: u32, backend: Backend, seed: u64) -> f64 {
    let dirs = unit_directions(n, seed);
    let origin = scene.stations().first().map_or_else(|| scene.bounds().center(), |s| s.position);
    let start = Instant::now();
    let mut crossings = 0usize;
    for d in &dirs {
        raytrace::trace_path(scene, backend, origin, *d, b, |_| crossings += 1);
    }
    let s = start.elapsed().as_secs_f64();
    std::hint::black_box(crossings);
    s
}

/// Times every (scene, n, b) combination; each entry is the minimum of `repeats` runs.
pub fn benchmark_raytrace(scenes: &[Scene], ns: &[usize], bs: &[u32], backend: Backend, repeats: usize) -> TimingTable {
    let mut rows = Vec::new();
    for s in scenes {
        for &n in ns {
            for &b in bs {
                let seconds = (0..repeats.max(1))
                    .map(|r| time_trace(s, n, b, backend, r as u64))
                    .fold(f64::INFINITY, f64::min);
                rows.push(TimingRow {
                    t: s.triangles().len(),
                    n,
                    b,
                    seconds,
                });
            }
        }
    }
    TimingTable {
        backend: format!("{backend:?}").to_lowercase(),
        rows,
    }
}
