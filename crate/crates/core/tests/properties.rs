use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use raypos::density::{fit_gmm, fit_gmm_traced, select_gmm, FitOptions};
use raypos::par;
use raypos::raytrace::{trace_ray, Backend};
use raypos::sampling::{launch_map, Angle, MeasurementModel, PointMap};
use raypos::scene::{generate_clutter_scene, scene_to_json, Point2, Scene, SceneGenConfig, Vec3};

fn scene() -> &'static Scene {
    static S: std::sync::OnceLock<Scene> = std::sync::OnceLock::new();
    S.get_or_init(|| generate_clutter_scene(&SceneGenConfig::default()).unwrap())
}

fn blobs(seed: u64, k: usize, n: usize) -> PointMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut ws = Vec::new();
    for _ in 0..k {
        let c = Point2::new(rng.gen_range(0.0..8.0), rng.gen_range(0.0..18.0));
        let s = rng.gen_range(0.05..1.0);
        for _ in 0..n {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            pts.push(Point2::new(c.x + s * a, c.y + s * b));
            ws.push(rng.gen_range(0.1..1.0));
        }
    }
    PointMap::new(0, Angle::new(0.0, 0.0), pts, ws)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crossing_weights_sum_to_one(st in 0usize..4, az in 0.0..std::f64::consts::TAU, pol in 0.01..3.13f64, b in 0u32..8) {
        let s = scene();
        let d = Angle::new(az, pol).to_direction();
        let cs = trace_ray(s, s.stations()[st].position, d, b, Backend::Bvh);
        let bf = trace_ray(s, s.stations()[st].position, d, b, Backend::BruteForce);
        prop_assert_eq!(&cs, &bf);
        if !cs.is_empty() {
            let sum: f64 = cs.iter().map(|c| c.weight).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn em_is_monotone_with_normalized_weights(seed in 0u64..1000, k_true in 1usize..4, k in 1usize..5) {
        let map = blobs(seed, k_true, 150);
        if let Ok((g, trace)) = fit_gmm_traced(&map, k, &FitOptions { seed, ..Default::default() }) {
            for w in trace.log_likelihoods.windows(2) {
                prop_assert!(w[1] - w[0] >= -1e-9 * w[0].abs().max(1.0));
            }
            let total: f64 = g.components.iter().map(|c| c.weight).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn translation_moves_means_only(seed in 0u64..1000, k in 1usize..4, dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let map = blobs(seed, k, 120);
        let moved = PointMap::new(
            0,
            map.measurement,
            map.points.iter().map(|p| Point2::new(p.x + dx, p.y + dy)).collect(),
            map.weights.clone(),
        );
        let opts = FitOptions { seed, ..Default::default() };
        if let (Ok(a), Ok(b)) = (fit_gmm(&map, k, &opts), fit_gmm(&moved, k, &opts)) {
            prop_assert_eq!(a.k(), b.k());
            for (ca, cb) in a.components.iter().zip(&b.components) {
                prop_assert!((ca.mean.x + dx - cb.mean.x).abs() <= 1e-9);
                prop_assert!((ca.mean.y + dy - cb.mean.y).abs() <= 1e-9);
                for i in 0..3 {
                    prop_assert!((ca.cov[i] - cb.cov[i]).abs() <= 1e-9 * ca.cov[i].abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn selected_aic_is_minimal(seed in 0u64..200, k_true in 1usize..4) {
        let map = blobs(seed, k_true, 100);
        let opts = FitOptions { seed, restarts: 2, ..Default::default() };
        let best = select_gmm(&map, 1..=4, &opts).unwrap();
        for k in 1..=4 {
            if let Ok(g) = select_gmm(&map, k..=k, &opts) {
                prop_assert!(best.aic <= g.aic);
            }
        }
    }

    #[test]
    fn map_weight_is_bounded_by_ray_count(seed in 0u64..1000, st in 0usize..4, az in 0.0..360.0f64, pol in 95.0..175.0f64) {
        let s = scene();
        let model = MeasurementModel::from_variance_deg2(1.0).unwrap();
        let map = launch_map(s, &s.stations()[st], Angle::from_degrees(az, pol), &model, 200, seed);
        let total: f64 = map.weights.iter().sum();
        prop_assert!(total <= 200.0 + 1e-9);
        prop_assert!(map.weights.iter().all(|w| *w > 0.0));
        let b = s.bounds();
        prop_assert!(map.points.iter().all(|p| p.x >= b.min.x && p.x <= b.max.x && p.y >= b.min.y && p.y <= b.max.y));
    }

    #[test]
    fn generation_is_pure(seed in 0u64..50, count in 0usize..25) {
        let cfg = SceneGenConfig { clutter_count: count, seed, ..Default::default() };
        let a = generate_clutter_scene(&cfg);
        let b = generate_clutter_scene(&cfg);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(scene_to_json(&a), scene_to_json(&b)),
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "generation outcome differs"),
        }
    }
}

#[test]
fn launch_map_ignores_thread_count() {
    let s = scene();
    let model = MeasurementModel::from_variance_deg2(1.0).unwrap();
    let y = Angle::from_degrees(200.0, 120.0);
    let one = par::with_threads(1, || launch_map(s, &s.stations()[1], y, &model, 5000, 9));
    let many = par::with_threads(3, || launch_map(s, &s.stations()[1], y, &model, 5000, 9));
    assert_eq!(one, many);
}

#[test]
fn room_shell_is_watertight() {
    let s = scene();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = *s.bounds();
    for _ in 0..10_000 {
        let o = Vec3::new(
            rng.gen_range(b.min.x + 0.01..b.max.x - 0.01),
            rng.gen_range(b.min.y + 0.01..b.max.y - 0.01),
            rng.gen_range(b.min.z + 0.01..b.max.z - 0.01),
        );
        let d = Angle::new(rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::PI));
        let ray = raypos::raytrace::Ray::new(o, d.to_direction());
        assert!(raypos::raytrace::nearest_hit(s, &ray).is_some());
    }
}
