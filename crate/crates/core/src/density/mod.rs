//! Densities over the UE plane: Gaussian mixtures fitted to crossing maps,
//! and the square-counting baseline.

mod em;
mod square;

pub use em::{fit_gmm, fit_gmm_traced, fit_points, select_gmm, FitOptions, FitTrace, MIN_SUPPORT};
pub use square::{square_method, SquareEstimate, SquareGrid};

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::scene::Point2;

/// Lower bound on covariance eigenvalues, m².
pub const COV_FLOOR: f64 = 1e-6;
/// Largest condition number accepted by [`is_well_conditioned`].
pub const MAX_CONDITION: f64 = 1e6;
/// Smallest determinant accepted by [`is_well_conditioned`], m⁴.
pub const MIN_DETERMINANT: f64 = 1e-10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("cannot fit {k} components to {n} weighted points")]
    TooFewPoints { n: usize, k: usize },
    #[error("degenerate fit: {distinct} distinct points for {k} components")]
    Degenerate { distinct: usize, k: usize },
    #[error("component {index} of a {k}-component fit carries only {support} of point weight")]
    Unsupported { k: usize, index: usize, support: f64 },
    #[error("invalid component count range {0}..={1}")]
    InvalidRange(usize, usize),
    #[error("invalid covariance {0:?}")]
    InvalidCovariance([f64; 3]),
}

/// Symmetric 2×2 covariance stored as `[xx, xy, yy]`.
pub type Cov2 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Point2,
    pub cov: Cov2,
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn eigenvalues(c: &Cov2) -> (f64, f64) {
    let tr = 0.5 * (c[0] + c[2]);
    let d = (0.25 * (c[0] - c[2]).powi(2) + c[1] * c[1]).sqrt();
    (tr - d, tr + d)
}

pub fn determinant(c: &Cov2) -> f64 {
    c[0] * c[2] - c[1] * c[1]
}

impl GmmComponent {
    /// `ln N(x; mean, cov)`; −∞ for a covariance that is not positive definite.
    pub fn log_pdf(&self, x: Point2) -> f64 {
        let det = determinant(&self.cov);
        if !(det > 0.0) {
            return f64::NEG_INFINITY;
        }
        let dx = x.x - self.mean.x;
        let dy = x.y - self.mean.y;
        let q = (self.cov[2] * dx * dx - 2.0 * self.cov[1] * dx * dy + self.cov[0] * dy * dy) / det;
        -0.5 * q - TAU.ln() - 0.5 * det.ln()
    }

    pub fn pdf(&self, x: Point2) -> f64 {
        self.log_pdf(x).exp()
    }
}

/// A fitted 2D Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub components: Vec<GmmComponent>,
    /// Weighted log-likelihood of the data the model was fitted to.
    pub log_likelihood: f64,
    pub aic: f64,
}

/// Free parameters of a `k`-component 2D mixture.
pub fn free_parameters(k: usize) -> usize {
    6 * k - 1
}

pub fn aic(k: usize, log_likelihood: f64) -> f64 {
    2.0 * free_parameters(k) as f64 - 2.0 * log_likelihood
}

impl Gmm {
    /// Wraps components that did not come from a fit. The likelihood is
    /// unknown and recorded as −∞ (AIC +∞).
    pub fn from_components(components: Vec<GmmComponent>) -> Self {
        Gmm {
            components,
            log_likelihood: f64::NEG_INFINITY,
            aic: f64::INFINITY,
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn log_pdf(&self, x: Point2) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_pdf(x))
            .collect();
        log_sum_exp(&logs)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mixture density at `x`.
pub fn gmm_pdf(model: &Gmm, x: Point2) -> f64 {
    model.components.iter().map(|c| c.weight * c.pdf(x)).sum()
}

/// False if any component is numerically degenerate.
pub fn is_well_conditioned(model: &Gmm) -> bool {
    model.components.iter().all(|c| {
        let (lo, hi) = eigenvalues(&c.cov);
        lo > 0.0 && hi / lo <= MAX_CONDITION && determinant(&c.cov) >= MIN_DETERMINANT
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn iso(mean: Point2, var: f64, weight: f64) -> GmmComponent {
        GmmComponent {
            weight,
            mean,
            cov: [var, 0.0, var],
        }
    }

    #[test]
    fn peak_value_of_isotropic_gaussian() {
        let m = Gmm::from_components(vec![iso(Point2::new(1.0, 2.0), 0.09, 1.0)]);
        let want = 1.0 / (2.0 * PI * 0.09);
        assert!((gmm_pdf(&m, Point2::new(1.0, 2.0)) - want).abs() < 1e-12 * want);
    }

    #[test]
    fn mixture_integrates_to_one() {
        let m = Gmm::from_components(vec![
            iso(Point2::new(0.0, 0.0), 0.04, 0.3),
            GmmComponent {
                weight: 0.7,
                mean: Point2::new(0.5, -0.2),
                cov: [0.05, 0.02, 0.03],
            },
        ]);
        // 40σ box around both components, midpoint rule.
        let h = 0.005;
        let (x0, x1, y0, y1) = (-4.0, 4.5, -4.2, 4.0);
        let nx = ((x1 - x0) / h) as usize;
        let ny = ((y1 - y0) / h) as usize;
        let mut total = 0.0;
        for j in 0..ny {
            for i in 0..nx {
                total += gmm_pdf(&m, Point2::new(x0 + (i as f64 + 0.5) * h, y0 + (j as f64 + 0.5) * h));
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn pdf_is_weighted_sum_and_log_agrees() {
        let comps = vec![
            iso(Point2::new(0.0, 0.0), 0.1, 0.25),
            iso(Point2::new(2.0, 1.0), 0.2, 0.75),
        ];
        let m = Gmm::from_components(comps.clone());
        let x = Point2::new(0.7, 0.4);
        let direct: f64 = comps
            .iter()
            .map(|c| {
                let d2 = x.distance_squared(c.mean);
                c.weight * (-d2 / (2.0 * c.cov[0])).exp() / (2.0 * PI * c.cov[0])
            })
            .sum();
        assert!((gmm_pdf(&m, x) - direct).abs() < 1e-14);
        assert!((m.log_pdf(x) - direct.ln()).abs() < 1e-12);
        // Far from all components the log density stays finite.
        assert!(m.log_pdf(Point2::new(500.0, 500.0)).is_finite());
    }

    #[test]
    fn conditioning_thresholds() {
        let good = Gmm::from_components(vec![iso(Point2::default(), 0.01, 1.0)]);
        assert!(is_well_conditioned(&good));
        let skinny = Gmm::from_components(vec![GmmComponent {
            weight: 1.0,
            mean: Point2::default(),
            cov: [1.0, 0.0, 1e-8],
        }]);
        assert!(!is_well_conditioned(&skinny));
        let tiny = Gmm::from_components(vec![iso(Point2::default(), COV_FLOOR, 1.0)]);
        assert!(!is_well_conditioned(&tiny));
    }

    #[test]
    fn aic_counts_free_parameters() {
        assert_eq!(free_parameters(1), 5);
        assert_eq!(free_parameters(7), 41);
        assert_eq!(aic(2, -10.0), 2.0 * 11.0 + 20.0);
    }
}
