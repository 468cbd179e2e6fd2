//! Angle measurements, Monte Carlo ray launching and crossing maps.

mod truth;

pub use truth::{ground_truth_aoa, ReciprocityIndex, TruthOptions, TruthPath};

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::par;
use crate::raytrace::{self, Backend};
use crate::rng;
use crate::scene::{BaseStation, Point2, Scene, Vec3};

/// Default reflection budget for launched rays.
pub const DEFAULT_MAX_BOUNCES: u32 = 5;

/// Rays per parallel work item when building maps.
const RAY_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("angle density is undefined for sigma = 0")]
    ZeroSigma,
    #[error("invalid measurement model: sigma = {0}")]
    InvalidSigma(f64),
    #[error("station {station}: no propagation path reaches the UE within {eps_hit} m (nearest {nearest:?})")]
    Unreachable {
        station: u32,
        eps_hit: f64,
        nearest: Option<f64>,
    },
}

/// Azimuth in `[0, 2π)` and polar angle from +z in `[0, π]`, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angle {
    pub azimuth: f64,
    pub polar: f64,
}

/// Wraps into `[0, 2π)`.
pub fn wrap_azimuth(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Reflects into `[0, π]` at both ends.
pub fn reflect_polar(p: f64) -> f64 {
    let w = p.rem_euclid(TAU);
    if w > PI {
        TAU - w
    } else {
        w
    }
}

impl Angle {
    /// Normalizes out-of-range components: azimuth wraps, polar reflects.
    pub fn new(azimuth: f64, polar: f64) -> Self {
        Angle {
            azimuth: wrap_azimuth(azimuth),
            polar: reflect_polar(polar),
        }
    }

    pub fn from_degrees(azimuth: f64, polar: f64) -> Self {
        Angle::new(azimuth.to_radians(), polar.to_radians())
    }

    pub fn to_direction(self) -> Vec3 {
        let (sp, cp) = self.polar.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vec3::new(sp * ca, sp * sa, cp)
    }

    /// Inverse of [`Angle::to_direction`] for any nonzero vector.
    pub fn from_direction(d: Vec3) -> Self {
        let r = d.norm();
        let polar = (d.z / r).clamp(-1.0, 1.0).acos();
        let azimuth = if d.x == 0.0 && d.y == 0.0 { 0.0 } else { d.y.atan2(d.x) };
        Angle::new(azimuth, polar)
    }

    /// Signed azimuth difference `self − other` in `(−π, π]`.
    pub fn azimuth_delta(self, other: Angle) -> f64 {
        let d = (self.azimuth - other.azimuth).rem_euclid(TAU);
        if d > PI {
            d - TAU
        } else {
            d
        }
    }

    /// Great-circle angle between the two directions, radians.
    pub fn separation(self, other: Angle) -> f64 {
        let a = self.to_direction();
        let b = other.to_direction();
        a.cross(b).norm().atan2(a.dot(b))
    }
}

/// Independent Gaussian error with standard deviation `sigma` (radians) on
/// both angle components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub sigma: f64,
}

impl MeasurementModel {
    pub fn new(sigma: f64) -> Result<Self, SamplingError> {
        if sigma.is_finite() && sigma >= 0.0 {
            Ok(MeasurementModel { sigma })
        } else {
            Err(SamplingError::InvalidSigma(sigma))
        }
    }

    /// Builds the model from a variance in squared degrees.
    pub fn from_variance_deg2(sigma2_deg: f64) -> Result<Self, SamplingError> {
        if !(sigma2_deg.is_finite() && sigma2_deg >= 0.0) {
            return Err(SamplingError::InvalidSigma(sigma2_deg));
        }
        Self::new(sigma2_deg.sqrt().to_radians())
    }

    /// Applies `sigma`-scaled standard-normal draws to `y`.
    pub fn perturb(&self, y: Angle, z_azimuth: f64, z_polar: f64) -> Angle {
        if self.sigma == 0.0 {
            return y;
        }
        Angle::new(y.azimuth + self.sigma * z_azimuth, y.polar + self.sigma * z_polar)
    }
}

/// One noisy angle of departure around `y`.
pub fn sample_aod<R: Rng + ?Sized>(y: Angle, model: &MeasurementModel, rng: &mut R) -> Angle {
    let za: f64 = rng.sample(StandardNormal);
    let zp: f64 = rng.sample(StandardNormal);
    model.perturb(y, za, zp)
}

fn normal_pdf(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (TAU).sqrt())
}

/// Density of `theta` given the measurement `y`, on `[0, 2π) × [0, π]`.
///
/// Wrapped normal in azimuth and a normal folded at both poles in polar, each
/// summed over enough images to cover ±4σ.
pub fn angle_density(theta: Angle, y: Angle, model: &MeasurementModel) -> Result<f64, SamplingError> {
    let s = model.sigma;
    if s == 0.0 {
        return Err(SamplingError::ZeroSigma);
    }
    let images = (4.0 * s / TAU).ceil() as i64 + 1;
    let da = theta.azimuth_delta(y);
    let mut az = 0.0;
    let mut pol = 0.0;
    for k in -images..=images {
        let shift = TAU * k as f64;
        az += normal_pdf(da + shift, s);
        pol += normal_pdf(theta.polar - y.polar + shift, s) + normal_pdf(-theta.polar - y.polar + shift, s);
    }
    Ok(az * pol)
}

/// Weighted crossing points of one station's launched rays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMap {
    pub station_id: u32,
    pub measurement: Angle,
    pub points: Vec<Point2>,
    /// Crossing weights, parallel to `points`.
    pub weights: Vec<f64>,
    pub n_rays: usize,
    /// Crossings that fell outside the scene footprint and were dropped.
    pub discarded: usize,
}

impl PointMap {
    pub fn new(station_id: u32, measurement: Angle, points: Vec<Point2>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), weights.len());
        PointMap {
            station_id,
            measurement,
            n_rays: 0,
            points,
            weights,
            discarded: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaunchOptions {
    pub max_bounces: u32,
    pub backend: Backend,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        LaunchOptions {
            max_bounces: DEFAULT_MAX_BOUNCES,
            backend: Backend::Bvh,
        }
    }
}

/// Launches `n_rays` noisy rays from `station` around `y`.
///
/// Ray `i` draws its angle from `rng::substream(key, i)`, so the map does not
/// depend on how rays are split across threads.
pub fn launch_map(
    scene: &Scene,
    station: &BaseStation,
    y: Angle,
    model: &MeasurementModel,
    n_rays: usize,
    key: u64,
) -> PointMap {
    launch_map_with(scene, station, y, model, n_rays, key, &LaunchOptions::default())
}

pub fn launch_map_with(
    scene: &Scene,
    station: &BaseStation,
    y: Angle,
    model: &MeasurementModel,
    n_rays: usize,
    key: u64,
    opts: &LaunchOptions,
) -> PointMap {
    let rect = scene.floor_rect();
    let chunks = par::map_index_chunks(n_rays, RAY_CHUNK, |range| {
        let mut pts = Vec::new();
        let mut wts = Vec::new();
        let mut discarded = 0usize;
        let mut raw = Vec::with_capacity(8);
        for i in range {
            let mut r = rng::substream(key, i as u64);
            let aod = sample_aod(y, model, &mut r);
            raw.clear();
            raytrace::trace_path(
                scene,
                opts.backend,
                station.position,
                aod.to_direction(),
                opts.max_bounces,
                |c| raw.push(c),
            );
            let w = 1.0 / raw.len() as f64;
            for c in &raw {
                if rect.contains(c.xy) {
                    pts.push(c.xy);
                    wts.push(w);
                } else {
                    discarded += 1;
                }
            }
        }
        (pts, wts, discarded)
    });
    let total: usize = chunks.iter().map(|c| c.0.len()).sum();
    let mut map = PointMap {
        station_id: station.id,
        measurement: y,
        points: Vec::with_capacity(total),
        weights: Vec::with_capacity(total),
        n_rays,
        discarded: 0,
    };
    for (p, w, d) in chunks {
        map.points.extend(p);
        map.weights.extend(w);
        map.discarded += d;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_clutter_scene, SceneGenConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_room() -> Scene {
        generate_clutter_scene(&SceneGenConfig {
            clutter_count: 0,
            ..Default::default()
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn direction_round_trip(az in 0.0..TAU, polar in 1e-6..(PI - 1e-6)) {
            let a = Angle::new(az, polar);
            let b = Angle::from_direction(a.to_direction());
            prop_assert!(a.azimuth_delta(b).abs() < 1e-9);
            prop_assert!((a.polar - b.polar).abs() < 1e-9);
            prop_assert!((a.to_direction().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn normalization_stays_in_range(az in -100.0f64..100.0, polar in -100.0f64..100.0) {
            let a = Angle::new(az, polar);
            prop_assert!((0.0..TAU).contains(&a.azimuth));
            prop_assert!((0.0..=PI).contains(&a.polar));
        }

        #[test]
        fn density_is_even(d_az in -1.0f64..1.0, d_pol in -0.5f64..0.5, sigma in 0.001f64..0.5) {
            // Polar folding is symmetric only about the equator.
            let y = Angle::new(1.3, PI / 2.0);
            let m = MeasurementModel::new(sigma).unwrap();
            let plus = angle_density(Angle::new(y.azimuth + d_az, y.polar + d_pol), y, &m).unwrap();
            let minus = angle_density(Angle::new(y.azimuth - d_az, y.polar - d_pol), y, &m).unwrap();
            prop_assert!((plus - minus).abs() <= 1e-12 * plus.max(1.0));
        }
    }

    #[test]
    fn zero_sigma_returns_measurement() {
        let y = Angle::new(2.0, 1.0);
        let m = MeasurementModel::new(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_aod(y, &m, &mut rng), y);
        }
        assert_eq!(angle_density(y, y, &m), Err(SamplingError::ZeroSigma));
    }

    #[test]
    fn sample_means_are_unbiased() {
        let y = Angle::new(PI, PI / 2.0);
        let m = MeasurementModel::new(1f64.to_radians()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (mut sa, mut sp) = (0.0, 0.0);
        for _ in 0..n {
            let a = sample_aod(y, &m, &mut rng);
            sa += a.azimuth;
            sp += a.polar;
        }
        let bound = 3.0 * m.sigma / (n as f64).sqrt();
        assert!((sa / n as f64 - y.azimuth).abs() < bound);
        assert!((sp / n as f64 - y.polar).abs() < bound);
    }

    #[test]
    fn azimuth_wraps_near_zero() {
        let y = Angle::new(0.01, 1.0);
        let m = MeasurementModel::new(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut near_zero, mut near_tau, mut s, mut c) = (false, false, 0.0, 0.0);
        for _ in 0..10_000 {
            let a = sample_aod(y, &m, &mut rng);
            near_zero |= a.azimuth < 0.3;
            near_tau |= a.azimuth > TAU - 0.3;
            s += a.azimuth.sin();
            c += a.azimuth.cos();
        }
        assert!(near_zero && near_tau);
        let mean = f64::atan2(s, c);
        assert!((mean - 0.01).abs() < 0.03, "circular mean {mean}");
    }

    #[test]
    fn density_peaks_at_measurement() {
        let y = Angle::new(0.5, 2.0);
        let m = MeasurementModel::new(0.05).unwrap();
        let peak = angle_density(y, y, &m).unwrap();
        for (da, dp) in [(0.01, 0.0), (0.0, 0.01), (-0.02, 0.03), (1.0, 0.0)] {
            assert!(angle_density(Angle::new(y.azimuth + da, y.polar + dp), y, &m).unwrap() < peak);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let step = 0.1f64.to_radians();
        let na = (TAU / step).round() as usize;
        let np = (PI / step).round() as usize;
        for (y, sigma) in [
            (Angle::new(0.02, 0.03), 2f64.to_radians()),
            (Angle::new(3.0, 1.5), 1f64.to_radians()),
            (Angle::new(6.0, 3.1), 5f64.to_radians()),
        ] {
            let m = MeasurementModel::new(sigma).unwrap();
            let mut total = 0.0;
            for j in 0..=np {
                let wp = if j == 0 || j == np { 0.5 } else { 1.0 };
                let p = j as f64 * step;
                for i in 0..na {
                    // Periodic in azimuth: the trapezoid rule has equal weights.
                    total += wp * angle_density(Angle { azimuth: i as f64 * step, polar: p }, y, &m).unwrap();
                }
            }
            total *= step * step;
            assert!((total - 1.0).abs() < 1e-3, "integral {total} for {y:?}");
        }
    }

    #[test]
    fn single_noise_free_ray_matches_trace() {
        let s = empty_room();
        let st = s.stations()[0];
        let y = Angle::from_direction(Vec3::new(2.0, 3.0, -st.position.z));
        let m = MeasurementModel::new(0.0).unwrap();
        let map = launch_map(&s, &st, y, &m, 1, 9);
        let c = raytrace::trace_reverse(&s, &st, y, DEFAULT_MAX_BOUNCES);
        assert_eq!(map.points, c.iter().map(|c| c.xy).collect::<Vec<_>>());
        assert!((map.total_weight() - 1.0).abs() < 1e-12);
        assert_eq!(map.n_rays, 1);
    }

    #[test]
    fn map_mean_converges_to_noise_free_crossing() {
        let s = empty_room();
        let st = s.stations()[0];
        let opts = LaunchOptions {
            max_bounces: 0,
            ..Default::default()
        };
        let target = Point2::new(3.0, 5.0);
        let y = Angle::from_direction(Vec3::new(target.x - st.position.x, target.y - st.position.y, -st.position.z));
        let m = MeasurementModel::new(0.5f64.to_radians()).unwrap();
        let map = launch_map_with(&s, &st, y, &m, 10_000, 11, &opts);
        assert_eq!(map.len(), 10_000);
        let n = map.len() as f64;
        let mx = map.points.iter().map(|p| p.x).sum::<f64>() / n;
        let my = map.points.iter().map(|p| p.y).sum::<f64>() / n;
        let vx = map.points.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy = map.points.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mx - target.x).abs() < 3.0 * (vx / n).sqrt(), "x mean {mx}");
        assert!((my - target.y).abs() < 3.0 * (vy / n).sqrt(), "y mean {my}");
    }

    #[test]
    fn maps_are_deterministic_and_weight_bounded() {
        let s = generate_clutter_scene(&SceneGenConfig::default()).unwrap();
        let st = s.stations()[2];
        let y = Angle::new(5.5, 2.3);
        let m = MeasurementModel::new(1f64.to_radians()).unwrap();
        let a = launch_map(&s, &st, y, &m, 2000, 42);
        let b = launch_map(&s, &st, y, &m, 2000, 42);
        assert_eq!(a, b);
        assert!(a.total_weight() <= 2000.0 + 1e-9);
        assert!(a.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
        let c = crate::par::with_threads(3, || launch_map(&s, &st, y, &m, 2000, 42));
        assert_eq!(a, c);
    }
}
