//! Weighted expectation-maximization for 2D Gaussian mixtures.

use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{aic, eigenvalues, Cov2, DensityError, Gmm, GmmComponent, COV_FLOOR};
use crate::par;
use crate::rng::{self, tag};
use crate::sampling::PointMap;
use crate::scene::Point2;

/// Points per parallel reduction chunk. Fixed so sums are schedule independent.
const CHUNK: usize = 2048;
/// Log-responsibilities further than this below the maximum are treated as zero.
const LOG_CUTOFF: f64 = -50.0;
/// Components whose share of the total weight falls below this are removed.
const DEAD_WEIGHT: f64 = 1e-12;
/// Least point weight a component of a multi-component fit may carry.
/// Crossing weights sum to one per ray, so a component below this explains
/// a single ray: a collapse onto isolated points rather than a cluster.
pub const MIN_SUPPORT: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence threshold on the log-likelihood gain per unit weight.
    pub tol: f64,
    pub cov_floor: f64,
    /// Independent initializations per component count in [`select_gmm`].
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            cov_floor: COV_FLOOR,
            restarts: 3,
        }
    }
}

/// Log-likelihood after each E-step of one fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub log_likelihoods: Vec<f64>,
}

/// Clamps eigenvalues to at least `floor`; below the floor in both
/// directions the result is exactly `floor·I`.
pub(crate) fn floor_cov(c: Cov2, floor: f64) -> Cov2 {
    let (lo, hi) = eigenvalues(&c);
    if !(lo.is_finite() && hi.is_finite()) || hi <= floor {
        return [floor, 0.0, floor];
    }
    if lo >= floor {
        return c;
    }
    // Eigenvector of the large eigenvalue.
    let (vx, vy) = if c[1].abs() > 0.0 {
        let (x, y) = (hi - c[2], c[1]);
        let n = (x * x + y * y).sqrt();
        (x / n, y / n)
    } else if c[0] >= c[2] {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    // floor·I + (hi − floor)·v vᵀ
    let d = hi - floor;
    [floor + d * vx * vx, d * vx * vy, floor + d * vy * vy]
}

struct Data<'a> {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ws: &'a [f64],
    /// The same points in Z-order, so E-step blocks are spatially compact.
    zx: Vec<f64>,
    zy: Vec<f64>,
    zw: Vec<f64>,
    total: f64,
}

fn spread_bits(v: u32) -> u64 {
    let mut x = v as u64 & 0xffff;
    x = (x | (x << 8)) & 0x00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333;
    (x | (x << 1)) & 0x5555_5555
}

impl<'a> Data<'a> {
    fn new(points: &[Point2], weights: &'a [f64]) -> Self {
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
        let (mut lo, mut hi) = (Point2::new(f64::INFINITY, f64::INFINITY), Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in points {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let span = (hi.x - lo.x).max(hi.y - lo.y);
        let q = if span > 0.0 { 65535.0 / span } else { 0.0 };
        let mut order: Vec<(u64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cx = ((p.x - lo.x) * q) as u32;
                let cy = ((p.y - lo.y) * q) as u32;
                (spread_bits(cx) | (spread_bits(cy) << 1), i)
            })
            .collect();
        order.sort_unstable();
        Data {
            zx: order.iter().map(|&(_, i)| xs[i]).collect(),
            zy: order.iter().map(|&(_, i)| ys[i]).collect(),
            zw: order.iter().map(|&(_, i)| weights[i]).collect(),
            xs,
            ys,
            ws: weights,
            total: weights.iter().sum(),
        }
    }

    fn len(&self) -> usize {
        self.xs.len()
    }
}

/// Precomputed Gaussian constants for the E-step.
#[derive(Clone, Copy)]
struct Kernel {
    mx: f64,
    my: f64,
    ixx: f64,
    ixy: f64,
    iyy: f64,
    /// ln π_j − ln 2π − ½ ln det Σ_j
    c: f64,
}

impl Kernel {
    fn new(comp: &GmmComponent) -> Self {
        let det = super::determinant(&comp.cov);
        Kernel {
            mx: comp.mean.x,
            my: comp.mean.y,
            ixx: comp.cov[2] / det,
            ixy: -comp.cov[1] / det,
            iyy: comp.cov[0] / det,
            c: comp.weight.ln() - std::f64::consts::TAU.ln() - 0.5 * det.ln(),
        }
    }

    #[inline]
    fn log(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mx;
        let dy = y - self.my;
        self.c - 0.5 * (self.ixx * dx * dx + 2.0 * self.ixy * dx * dy + self.iyy * dy * dy)
    }
}

/// Per-component sufficient statistics, shifted by the current means.
#[derive(Clone, Copy, Default)]
struct Stats {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

/// Points per block inside a chunk; rows of `k × BLOCK` log values stay in cache.
const BLOCK: usize = 64;

/// `exp(d)` for `d ≤ 0`, exactly zero below [`LOG_CUTOFF`]. Branch-free so the
/// block loops vectorize; agrees with `f64::exp` to a few ulp.
#[inline(always)]
fn exp_cut(d: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0; // 1.5·2⁵², rounds to an integer in the low bits
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = if d < LOG_CUTOFF { LOG_CUTOFF } else { d };
    let t = x * std::f64::consts::LOG2_E + MAGIC;
    let n = t - MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series to degree 13 on |r| ≤ ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = t.to_bits().wrapping_sub(MAGIC.to_bits());
    let scale = f64::from_bits(k.wrapping_add(1023) << 52);
    if d < LOG_CUTOFF {
        0.0
    } else {
        p * scale
    }
}

/// One E-step: log-likelihood and shifted statistics, reduced in chunk order.
fn e_step(data: &Data, comps: &[GmmComponent]) -> (f64, Vec<Stats>) {
    let k = comps.len();
    let kernels: Vec<Kernel> = comps.iter().map(Kernel::new).collect();
    let parts = par::map_index_chunks(data.len(), CHUNK, |range| {
        let mut ll = 0.0;
        let mut st = vec![Stats::default(); k];
        let mut rows = vec![0.0; k * BLOCK];
        let mut top = [0.0; BLOCK];
        let mut scale = [0.0; BLOCK];
        let mut live = vec![false; k];
        let mut start = range.start;
        while start < range.end {
            let end = (start + BLOCK).min(range.end);
            let b = end - start;
            let (xs, ys, ws) = (&data.zx[start..end], &data.zy[start..end], &data.zw[start..end]);
            let top = &mut top[..b];
            let scale = &mut scale[..b];
            top.fill(f64::NEG_INFINITY);
            for (kn, row) in kernels.iter().zip(rows.chunks_exact_mut(BLOCK)) {
                for (((v, m), &x), &y) in row[..b].iter_mut().zip(top.iter_mut()).zip(xs).zip(ys) {
                    *v = kn.log(x, y);
                    *m = if *v > *m { *v } else { *m };
                }
            }
            scale.fill(0.0);
            for (row, alive) in rows.chunks_exact_mut(BLOCK).zip(live.iter_mut()) {
                let row = &mut row[..b];
                let gap = row.iter().zip(top.iter()).fold(f64::NEG_INFINITY, |g, (&v, &m)| {
                    let d = v - m;
                    if d > g {
                        d
                    } else {
                        g
                    }
                });
                *alive = gap >= LOG_CUTOFF;
                if !*alive {
                    continue;
                }
                for ((v, &m), s) in row.iter_mut().zip(top.iter()).zip(scale.iter_mut()) {
                    *v = exp_cut(*v - m);
                    *s += *v;
                }
            }
            for ((s, &m), &w) in scale.iter_mut().zip(top.iter()).zip(ws) {
                ll += w * (m + s.ln());
                *s = w / *s;
            }
            for (((kn, acc), row), _) in kernels.iter().zip(st.iter_mut()).zip(rows.chunks_exact(BLOCK)).zip(&live).filter(|(_, &a)| a) {
                for (((&e, &s), &x), &y) in row[..b].iter().zip(scale.iter()).zip(xs).zip(ys) {
                    let r = e * s;
                    let dx = x - kn.mx;
                    let dy = y - kn.my;
                    acc.n += r;
                    acc.sx += r * dx;
                    acc.sy += r * dy;
                    acc.sxx += r * dx * dx;
                    acc.sxy += r * dx * dy;
                    acc.syy += r * dy * dy;
                }
            }
            start = end;
        }
        (ll, st)
    });
    let mut ll = 0.0;
    let mut st = vec![Stats::default(); k];
    for (l, s) in parts {
        ll += l;
        for (a, b) in st.iter_mut().zip(s) {
            a.n += b.n;
            a.sx += b.sx;
            a.sy += b.sy;
            a.sxx += b.sxx;
            a.sxy += b.sxy;
            a.syy += b.syy;
        }
    }
    (ll, st)
}

fn m_step(comps: &[GmmComponent], stats: &[Stats], total: f64, floor: f64) -> Vec<GmmComponent> {
    let mut out: Vec<GmmComponent> = comps
        .iter()
        .zip(stats)
        .filter(|(_, s)| s.n > DEAD_WEIGHT * total)
        .map(|(c, s)| {
            let ux = s.sx / s.n;
            let uy = s.sy / s.n;
            let cov = [
                s.sxx / s.n - ux * ux,
                s.sxy / s.n - ux * uy,
                s.syy / s.n - uy * uy,
            ];
            GmmComponent {
                weight: s.n,
                mean: Point2::new(c.mean.x + ux, c.mean.y + uy),
                cov: floor_cov(cov, floor),
            }
        })
        .collect();
    normalize_weights(&mut out);
    out
}

fn normalize_weights(comps: &mut [GmmComponent]) {
    let s: f64 = comps.iter().map(|c| c.weight).sum();
    for c in comps.iter_mut() {
        c.weight /= s;
    }
}

fn count_distinct_upto(points: &[Point2], weights: &[f64], limit: usize) -> usize {
    let mut keys: Vec<(u64, u64)> = points
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(p, _)| (p.x.to_bits(), p.y.to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len().min(limit)
}

/// Weighted k-means++ seeding, then hard-assignment covariances.
fn initialize(data: &Data, k: usize, seed: u64, floor: f64) -> Vec<GmmComponent> {
    let n = data.len();
    let mut rng = rng::substream(seed, 0);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(k);
    let mut d2 = vec![f64::INFINITY; n];
    if k == 1 {
        // Any seed gives the same single component; skip the draw.
        centers.push((0.0, 0.0));
    } else {
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, score: &dyn Fn(usize) -> f64| -> usize {
            let total: f64 = (0..n).map(score).sum();
            let mut u = rng.gen::<f64>() * total;
            let mut last = 0;
            for i in 0..n {
                let s = score(i);
                if s > 0.0 {
                    last = i;
                    if u < s {
                        return i;
                    }
                    u -= s;
                }
            }
            last
        };
        let first = pick(&mut rng, &|i| data.ws[i]);
        centers.push((data.xs[first], data.ys[first]));
        while centers.len() < k {
            let (cx, cy) = *centers.last().unwrap();
            for i in 0..n {
                let d = (data.xs[i] - cx).powi(2) + (data.ys[i] - cy).powi(2);
                d2[i] = d2[i].min(d);
            }
            let next = pick(&mut rng, &|i| data.ws[i] * d2[i]);
            centers.push((data.xs[next], data.ys[next]));
        }
    }

    let mut st = vec![[0.0f64; 6]; k];
    for i in 0..n {
        let (x, y, w) = (data.xs[i], data.ys[i], data.ws[i]);
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (j, &(cx, cy)) in centers.iter().enumerate() {
            let d = (x - cx).powi(2) + (y - cy).powi(2);
            if d < bd {
                bd = d;
                best = j;
            }
        }
        let s = &mut st[best];
        s[0] += w;
        s[1] += w * x;
        s[2] += w * y;
        s[3] += w * x * x;
        s[4] += w * x * y;
        s[5] += w * y * y;
    }
    let mut comps: Vec<GmmComponent> = st
        .iter()
        .filter(|s| s[0] > 0.0)
        .map(|s| {
            let mx = s[1] / s[0];
            let my = s[2] / s[0];
            let cov = [s[3] / s[0] - mx * mx, s[4] / s[0] - mx * my, s[5] / s[0] - my * my];
            GmmComponent {
                weight: s[0],
                mean: Point2::new(mx, my),
                cov: floor_cov(cov, floor),
            }
        })
        .collect();
    normalize_weights(&mut comps);
    comps
}

fn validate_input(points: &[Point2], weights: &[f64], k: usize) -> Result<(), DensityError> {
    assert_eq!(points.len(), weights.len());
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if k == 0 || positive < k {
        return Err(DensityError::TooFewPoints { n: positive, k });
    }
    if k > 1 {
        let distinct = count_distinct_upto(points, weights, k);
        if distinct < k {
            return Err(DensityError::Degenerate { distinct, k });
        }
    }
    Ok(())
}

fn run_em(data: &Data, mut comps: Vec<GmmComponent>, opts: &FitOptions, trace: &mut Option<&mut FitTrace>) -> Gmm {
    let mut prev = f64::NEG_INFINITY;
    let mut iter = 0;
    loop {
        let (ll, stats) = e_step(data, &comps);
        if let Some(t) = trace.as_deref_mut() {
            t.log_likelihoods.push(ll);
        }
        let converged = (ll - prev) < opts.tol * data.total;
        if converged || iter >= opts.max_iter {
            let k = comps.len();
            return Gmm {
                components: comps,
                log_likelihood: ll,
                aic: aic(k, ll),
            };
        }
        prev = ll;
        comps = m_step(&comps, &stats, data.total, opts.cov_floor);
        iter += 1;
    }
}

fn supported(g: Gmm, total: f64) -> Result<Gmm, DensityError> {
    if g.k() > 1 {
        for (index, c) in g.components.iter().enumerate() {
            let support = c.weight * total;
            if support < MIN_SUPPORT {
                return Err(DensityError::Unsupported { k: g.k(), index, support });
            }
        }
    }
    Ok(g)
}

/// Fits a `k`-component mixture to weighted points.
pub fn fit_points(points: &[Point2], weights: &[f64], k: usize, opts: &FitOptions) -> Result<Gmm, DensityError> {
    validate_input(points, weights, k)?;
    let data = Data::new(points, weights);
    let init = initialize(&data, k, opts.seed, opts.cov_floor);
    supported(run_em(&data, init, opts, &mut None), data.total)
}

/// Fits a `k`-component mixture to a crossing map, using `opts.seed` for the
/// initialization.
pub fn fit_gmm(map: &PointMap, k: usize, opts: &FitOptions) -> Result<Gmm, DensityError> {
    fit_points(&map.points, &map.weights, k, opts)
}

/// [`fit_gmm`] that also records the log-likelihood of every iteration.
pub fn fit_gmm_traced(map: &PointMap, k: usize, opts: &FitOptions) -> Result<(Gmm, FitTrace), DensityError> {
    validate_input(&map.points, &map.weights, k)?;
    let data = Data::new(&map.points, &map.weights);
    let init = initialize(&data, k, opts.seed, opts.cov_floor);
    let mut trace = FitTrace::default();
    let g = run_em(&data, init, opts, &mut Some(&mut trace));
    Ok((supported(g, data.total)?, trace))
}

/// Fits every `k` in `k_range` with `opts.restarts` initializations each and
/// returns the model with the lowest AIC; ties go to the smaller `k`.
pub fn select_gmm(map: &PointMap, k_range: RangeInclusive<usize>, opts: &FitOptions) -> Result<Gmm, DensityError> {
    select_points(&map.points, &map.weights, k_range, opts)
}

pub(crate) fn select_points(
    points: &[Point2],
    weights: &[f64],
    k_range: RangeInclusive<usize>,
    opts: &FitOptions,
) -> Result<Gmm, DensityError> {
    let (k0, k1) = (*k_range.start(), *k_range.end());
    if k0 == 0 || k0 > k1 || k1 > 20 {
        return Err(DensityError::InvalidRange(k0, k1));
    }
    let data = Data::new(points, weights);
    let restarts = opts.restarts.max(1);
    let jobs: Vec<(usize, usize)> = (k0..=k1).flat_map(|k| (0..restarts).map(move |r| (k, r))).collect();
    let results = par::map_slice(&jobs, |&(k, r)| {
        validate_input(points, weights, k)?;
        if k == 1 && r > 0 {
            // The single-component fit does not depend on the seed.
            return Ok(None);
        }
        let seed = if k0 == k1 && restarts == 1 {
            opts.seed
        } else {
            rng::derive(opts.seed, &[tag::EM, k as u64, r as u64])
        };
        let init = initialize(&data, k, seed, opts.cov_floor);
        supported(run_em(&data, init, opts, &mut None), data.total).map(Some)
    });
    let mut best: Option<Gmm> = None;
    let mut first_err = None;
    for (job, res) in jobs.iter().zip(results) {
        let g = match res {
            Ok(Some(g)) => g,
            Ok(None) => continue,
            Err(e) => {
                if first_err.is_none() && job.1 == 0 {
                    first_err = Some(e);
                }
                continue;
            }
        };
        best = match best {
            None => Some(g),
            Some(b) => {
                let better = if g.k() == b.k() {
                    g.log_likelihood > b.log_likelihood
                } else {
                    g.aic < b.aic
                };
                Some(if better { g } else { b })
            }
        };
    }
    best.ok_or_else(|| first_err.unwrap_or(DensityError::InvalidRange(k0, k1)))
}
