//! Probabilistic indoor positioning from noisy angle-of-arrival (AoA) measurements.
//!
//! Each base station measures one uplink AoA. Rays are launched back into a
//! triangle-mesh digital twin along angles sampled from the measurement-error
//! distribution, and the points where they cross the known UE elevation plane
//! form a map. A Gaussian mixture is fitted to every map and the per-station
//! densities are multiplied into a position posterior whose maximum is the
//! estimate.
//!
//! Two operating modes are provided: online (launch and fit per measurement
//! set) and table (mixtures precomputed over an angle grid and looked up).
//! The square-counting estimator is included as a baseline.
//!
//! Module map:
//!
//! * [`scene`]: geometry, base stations, scene files, clutter generation.
//! * [`raytrace`]: ray/triangle intersection, BVH, specular reverse tracing.
//! * [`sampling`]: angles, measurement noise, Monte Carlo launch, ground truth.
//! * [`density`]: weighted EM for 2D mixtures, AIC selection, square baseline.
//! * [`fusion`]: posterior product, argmax, dropout, offline pdf tables.
//! * [`harness`]: experiment driver, statistics, benchmarks.

pub mod density;
pub mod fusion;
pub mod harness;
pub mod par;
pub mod raytrace;
pub mod rng;
pub mod sampling;
pub mod scene;

pub use density::{fit_gmm, gmm_pdf, is_well_conditioned, select_gmm, square_method, FitOptions, Gmm, GmmComponent};
pub use fusion::{argmax_position, combine_with_dropout, posterior_grid, PositionEstimate, ProbabilityField};
pub use raytrace::{intersect_ray_triangle, nearest_hit, reflect, trace_reverse, Crossing, Hit, Ray};
pub use sampling::{angle_density, launch_map, sample_aod, Angle, MeasurementModel, PointMap};
pub use scene::{BaseStation, Point2, Scene, Triangle, Vec3};
