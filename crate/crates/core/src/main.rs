use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use raypos::fusion::{EmptyReason, TableCell, TableFile};
use raypos::harness::{
    self, benchmark_raytrace, cdf_csv, compare_modes, error_cdf, AngleMeasurement, Estimator, ExperimentConfig,
    ExperimentReport, HarnessError, PreparedScene,
};
use raypos::par;
use raypos::raytrace::Backend;
use raypos::scene::{
    generate_clutter_scene, load_scene, parse_scene, scene_to_json, validate_scene, SceneError, SceneGenConfig,
};

#[derive(Parser)]
#[command(name = "raypos", version, about = "Angle-of-arrival positioning by reverse ray tracing")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or check scene files.
    #[command(subcommand)]
    Scene(SceneCmd),
    /// Build or inspect precomputed density tables.
    #[command(subcommand)]
    Table(TableCmd),
    /// Run an experiment and write the JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-stage wall times as JSON here.
        #[arg(long)]
        timings: Option<PathBuf>,
    },
    /// GMM online and square at two ray counts on the same drops.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        low: usize,
        #[arg(long, default_value_t = 10000)]
        high: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time ray tracing over triangle count, ray count and bounces.
    Bench {
        /// Box counts of the generated scenes.
        #[arg(long, value_delimiter = ',', default_value = "9,20,50,100")]
        clutter: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5")]
        b: Vec<u32>,
        #[arg(long, value_enum, default_value_t = BackendArg::Brute)]
        backend: BackendArg,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical error CDF of one estimator from a report.
    Cdf {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = EstimatorArg::GmmOnline)]
        estimator: EstimatorArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Position one UE from a JSON list of measured angles.
    Locate {
        #[arg(long)]
        config: PathBuf,
        /// `[{"station_id":0,"azimuth_deg":..,"polar_deg":..}, ...]`
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, value_enum, default_value_t = EstimatorArg::GmmOnline)]
        estimator: EstimatorArg,
    },
}

#[derive(Subcommand)]
enum SceneCmd {
    Gen {
        /// Generator settings as JSON; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        clutter: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Validate { path: PathBuf },
}

#[derive(Subcommand)]
enum TableCmd {
    /// Build full tables for every station of the configured scene.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect {
        path: PathBuf,
        /// Check the table against this scene's hash.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Brute,
    Bvh,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    GmmOnline,
    GmmTable,
    Square,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::GmmOnline => Estimator::GmmOnline,
            EstimatorArg::GmmTable => Estimator::GmmTable,
            EstimatorArg::Square => Estimator::Square,
        }
    }
}

/// Failure with its process exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn validation(msg: impl ToString) -> Self {
        Fail {
            code: 2,
            msg: msg.to_string(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Fail {
            code: 1,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

impl From<HarnessError> for Fail {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Io(_) | HarnessError::Scene(SceneError::Io { .. }) => 1,
            _ => 2,
        };
        Fail { code, msg: e.to_string() }
    }
}

impl From<SceneError> for Fail {
    fn from(e: SceneError) -> Self {
        let code = if matches!(e, SceneError::Io { .. }) { 1 } else { 2 };
        Fail { code, msg: e.to_string() }
    }
}

fn read(path: &Path) -> Result<String, Fail> {
    fs::read_to_string(path).map_err(|e| Fail::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Fail> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Fail::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Fail> {
    Ok(ExperimentConfig::from_json(&read(path)?)?)
}

fn print_summaries(report: &ExperimentReport) {
    eprintln!("{:<11} {:>6} {:>6} {:>8} {:>8} {:>8}", "estimator", "drops", "FR", "q50_m", "q90_m", "q99_m");
    for s in &report.summaries {
        let (a, b, c) = s.quantiles.map_or(("-".into(), "-".into(), "-".into()), |q| {
            (format!("{:.3}", q.q50), format!("{:.3}", q.q90), format!("{:.3}", q.q99))
        });
        eprintln!(
            "{:<11} {:>6} {:>6.3} {:>8} {:>8} {:>8}",
            format!("{:?}", s.estimator).to_lowercase(),
            s.drops,
            s.failure_rate,
            a,
            b,
            c
        );
    }
    if !report.skipped.is_empty() {
        eprintln!("{} drops skipped", report.skipped.len());
    }
}

fn scene_cmd(cmd: SceneCmd) -> Result<(), Fail> {
    match cmd {
        SceneCmd::Gen {
            config,
            clutter,
            seed,
            out,
        } => {
            let mut g = match &config {
                Some(p) => serde_json::from_str::<SceneGenConfig>(&read(p)?).map_err(Fail::validation)?,
                None => SceneGenConfig::default(),
            };
            if let Some(c) = clutter {
                g.clutter_count = c;
            }
            if let Some(s) = seed {
                g.seed = s;
            }
            let scene = generate_clutter_scene(&g)?;
            emit(out.as_deref(), &scene_to_json(&scene))?;
            eprintln!(
                "{} triangles, {} stations, hash {}",
                scene.triangles().len(),
                scene.stations().len(),
                harness::hex(&scene.content_hash())
            );
            Ok(())
        }
        SceneCmd::Validate { path } => {
            let scene = parse_scene(&read(&path)?)?;
            let report = validate_scene(&scene);
            if report.is_valid() {
                println!(
                    "ok: {} triangles, {} stations, hash {}",
                    scene.triangles().len(),
                    scene.stations().len(),
                    harness::hex(&scene.content_hash())
                );
                Ok(())
            } else {
                Err(Fail::validation(report))
            }
        }
    }
}

fn table_cmd(cmd: TableCmd) -> Result<(), Fail> {
    match cmd {
        TableCmd::Build { config, out } => {
            let cfg = load_config(&config)?;
            cfg.table.grid().map_err(Fail::validation)?;
            let scene = cfg.scene.load()?;
            let start = std::time::Instant::now();
            let file = harness::build_tables(&scene, &cfg, None)?;
            file.save(&out).map_err(|e| Fail { code: 1, msg: e.to_string() })?;
            eprintln!(
                "{} stations, {} models, {:.1} s",
                file.stations.len(),
                file.stations.iter().map(|t| t.model_count()).sum::<usize>(),
                start.elapsed().as_secs_f64()
            );
            Ok(())
        }
        TableCmd::Inspect { path, scene } => {
            let hash = match &scene {
                Some(p) => Some(load_scene(p)?.content_hash()),
                None => None,
            };
            let file = TableFile::load(&path, hash.as_ref()).map_err(Fail::validation)?;
            println!("scene hash {}", harness::hex(&file.scene_hash));
            for t in &file.stations {
                let mut empty: BTreeMap<&str, usize> = BTreeMap::new();
                let mut ks: BTreeMap<usize, usize> = BTreeMap::new();
                for c in &t.cells {
                    match c {
                        TableCell::Model(g) => *ks.entry(g.k()).or_default() += 1,
                        TableCell::Empty(r) => {
                            let name = match r {
                                EmptyReason::EmptyMap => "empty_map",
                                EmptyReason::FitFailed => "fit_failed",
                                EmptyReason::NotBuilt => "not_built",
                            };
                            *empty.entry(name).or_default() += 1;
                        }
                    }
                }
                println!(
                    "station {}: grid {}x{} ({} cells), n_rays {}, sigma {:.4} deg, seed {}",
                    t.station_id,
                    t.grid.n_az(),
                    t.grid.n_polar(),
                    t.grid.n_cells(),
                    t.n_rays,
                    t.sigma().to_degrees(),
                    t.seed
                );
                println!("  models {}, stored values {}", t.model_count(), t.stored_parameters());
                println!("  components {ks:?}");
                println!("  empty {empty:?}");
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Fail> {
    match cli.cmd {
        Cmd::Scene(c) => scene_cmd(c),
        Cmd::Table(c) => table_cmd(c),
        Cmd::Run { config, out, timings } => {
            let cfg = load_config(&config)?;
            let res = harness::run_experiment(&cfg)?;
            emit(out.as_deref(), &res.report.to_json())?;
            print_summaries(&res.report);
            if let Some(p) = timings {
                let text = serde_json::to_string_pretty(&res.times).expect("timings serialize");
                fs::write(&p, text).map_err(|e| Fail::io(&p, e))?;
            }
            Ok(())
        }
        Cmd::Compare { config, low, high, out } => {
            let cfg = load_config(&config)?;
            let prep = PreparedScene::new(cfg.scene.load()?, cfg.truth);
            let run = compare_modes(&prep, &cfg, low, high)?;
            eprint!("{}", run.comparison.to_table());
            let text = serde_json::to_string_pretty(&run.comparison).expect("comparison serializes");
            emit(out.as_deref(), &(text + "\n"))
        }
        Cmd::Bench {
            clutter,
            n,
            b,
            backend,
            repeats,
            out,
        } => {
            let scenes = clutter
                .iter()
                .map(|&c| {
                    let g = SceneGenConfig {
                        clutter_count: c,
                        footprint: if c > 20 { [0.3, 0.8] } else { [0.5, 2.0] },
                        ..Default::default()
                    };
                    generate_clutter_scene(&g)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let backend = match backend {
                BackendArg::Brute => Backend::BruteForce,
                BackendArg::Bvh => Backend::Bvh,
            };
            let table = benchmark_raytrace(&scenes, &n, &b, backend, repeats);
            emit(out.as_deref(), &table.to_csv())?;
            let fmt = |s: Option<f64>| s.map_or("-".to_string(), |v| format!("{v:.3}"));
            eprintln!(
                "slopes: n {}, t {}, b+1 {}",
                fmt(table.slope_n()),
                fmt(table.slope_t()),
                fmt(table.slope_b())
            );
            Ok(())
        }
        Cmd::Cdf { report, estimator, out } => {
            let r: ExperimentReport = serde_json::from_str(&read(&report)?).map_err(Fail::validation)?;
            let errors = r.errors(estimator.into());
            emit(out.as_deref(), &cdf_csv(&error_cdf(&errors)))
        }
        Cmd::Locate {
            config,
            measurements,
            estimator,
        } => {
            let cfg = load_config(&config)?;
            let ms: Vec<AngleMeasurement> =
                serde_json::from_str(&read(&measurements)?).map_err(Fail::validation)?;
            let scene = cfg.scene.load()?;
            let outcome = harness::locate(&scene, &cfg, estimator.into(), &ms)?;
            println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
            match outcome.failure {
                Some(f) => Err(Fail { code: 3, msg: f }),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    match par::with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
