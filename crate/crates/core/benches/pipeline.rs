use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use raypos::density::{select_gmm, FitOptions};
use raypos::harness::{run_prepared, Estimator, ExperimentConfig, PreparedScene};
use raypos::par;
use raypos::raytrace::{nearest_hit, nearest_hit_brute, Ray};
use raypos::sampling::{launch_map, Angle, MeasurementModel, TruthOptions};
use raypos::scene::{generate_clutter_scene, SceneGenConfig, Vec3};

/// Thread counts compared: one worker against the default pool.
const POOLS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn map_and_fit(c: &mut Criterion) {
    let scene = generate_clutter_scene(&SceneGenConfig::default()).unwrap();
    let model = MeasurementModel::from_variance_deg2(1.0).unwrap();
    let st = scene.stations()[0];
    let y = Angle::from_degrees(60.0, 125.0);
    let mut g = c.benchmark_group("map_and_fit");
    g.sample_size(10);
    for (name, threads) in POOLS {
        g.bench_function(BenchmarkId::new(name, 10_000), |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    let map = launch_map(&scene, &st, y, &model, 10_000, 1);
                    select_gmm(&map, 1..=8, &FitOptions::default())
                })
            })
        });
    }
    g.finish();
}

fn drops(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        drops: 8,
        n_rays: 1000,
        estimators: vec![Estimator::GmmOnline, Estimator::Square],
        truth: TruthOptions {
            n_polar: 300,
            n_azimuth: 600,
            ..Default::default()
        },
        ..Default::default()
    };
    let prep = PreparedScene::new(cfg.scene.load().unwrap(), cfg.truth);
    let mut g = c.benchmark_group("drops");
    g.sample_size(10);
    for (name, threads) in POOLS {
        g.bench_function(BenchmarkId::new(name, cfg.drops), |b| {
            b.iter(|| par::with_threads(threads, || run_prepared(&prep, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn nearest(c: &mut Criterion) {
    let scene = generate_clutter_scene(&SceneGenConfig {
        clutter_count: 100,
        footprint: [0.3, 0.8],
        ..Default::default()
    })
    .unwrap();
    let rays: Vec<Ray> = (0..1000)
        .map(|i| {
            let a = Angle::new(i as f64 * 0.37 % std::f64::consts::TAU, 0.1 + (i as f64 * 0.11) % 2.9);
            Ray::new(Vec3::new(4.0, 9.0, 1.2), a.to_direction())
        })
        .collect();
    let mut g = c.benchmark_group("nearest_hit_1212_triangles");
    g.bench_function("bvh", |b| b.iter(|| rays.iter().filter_map(|r| nearest_hit(&scene, r)).count()));
    g.bench_function("brute_force", |b| {
        b.iter(|| rays.iter().filter_map(|r| nearest_hit_brute(scene.triangles(), r)).count())
    });
    g.finish();
}

criterion_group!(benches, map_and_fit, drops, nearest);
criterion_main!(benches);
