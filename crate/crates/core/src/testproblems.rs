//! Small constrained problems with closed-form minimizers, shared by the
//! self-test command and the test suites.

use crate::derivatives::Real;
use crate::error::Result;
use crate::nlp::NlpProblem;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analytic {
    /// `(x-1)² + (y-2)²` on `x + y <= 1`.
    ProjectionOntoHalfplane,
    /// `x² + y²` on `x + y >= 1`.
    MinNormOnLineSide,
    /// `-x - y` on the unit disk.
    LinearOverDisk,
    /// `(x-3)²` with `x <= 2`.
    BoundActive1d,
    /// `x + 2y` on `[1,5] x [-2,3]`.
    BoxLinear,
    Rosenbrock,
    /// Hock-Schittkowski 22.
    Hs22,
    /// `x² + 2y² + 3z²` on `x + y + z = 1`.
    WeightedNormOnPlane,
    /// Hock-Schittkowski 35.
    Hs35,
    /// `-ln x - 2 ln y` on `x + y <= 1`.
    LogUtility,
}

const INF: f64 = f64::INFINITY;

impl Analytic {
    pub const ALL: [Analytic; 10] = [
        Analytic::ProjectionOntoHalfplane,
        Analytic::MinNormOnLineSide,
        Analytic::LinearOverDisk,
        Analytic::BoundActive1d,
        Analytic::BoxLinear,
        Analytic::Rosenbrock,
        Analytic::Hs22,
        Analytic::WeightedNormOnPlane,
        Analytic::Hs35,
        Analytic::LogUtility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Analytic::ProjectionOntoHalfplane => "projection_onto_halfplane",
            Analytic::MinNormOnLineSide => "min_norm_on_line_side",
            Analytic::LinearOverDisk => "linear_over_disk",
            Analytic::BoundActive1d => "bound_active_1d",
            Analytic::BoxLinear => "box_linear",
            Analytic::Rosenbrock => "rosenbrock",
            Analytic::Hs22 => "hs22",
            Analytic::WeightedNormOnPlane => "weighted_norm_on_plane",
            Analytic::Hs35 => "hs35",
            Analytic::LogUtility => "log_utility",
        }
    }

    pub fn start(self) -> Vec<f64> {
        match self {
            Analytic::ProjectionOntoHalfplane | Analytic::WeightedNormOnPlane => vec![0.0; self.dim()],
            Analytic::MinNormOnLineSide => vec![2.0, -1.0],
            Analytic::LinearOverDisk => vec![0.1, -0.3],
            Analytic::BoundActive1d => vec![0.0],
            Analytic::BoxLinear => vec![3.0, 0.0],
            Analytic::Rosenbrock => vec![-1.2, 1.0],
            Analytic::Hs22 => vec![2.0, 2.0],
            Analytic::Hs35 => vec![0.5, 0.5, 0.5],
            Analytic::LogUtility => vec![0.3, 0.3],
        }
    }

    pub fn minimizer(self) -> Vec<f64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Analytic::ProjectionOntoHalfplane => vec![0.0, 1.0],
            Analytic::MinNormOnLineSide => vec![0.5, 0.5],
            Analytic::LinearOverDisk => vec![r, r],
            Analytic::BoundActive1d => vec![2.0],
            Analytic::BoxLinear => vec![1.0, -2.0],
            Analytic::Rosenbrock | Analytic::Hs22 => vec![1.0, 1.0],
            Analytic::WeightedNormOnPlane => vec![6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0],
            Analytic::Hs35 => vec![4.0 / 3.0, 7.0 / 9.0, 4.0 / 9.0],
            Analytic::LogUtility => vec![1.0 / 3.0, 2.0 / 3.0],
        }
    }

    pub fn optimum(self) -> f64 {
        match self {
            Analytic::ProjectionOntoHalfplane => 2.0,
            Analytic::MinNormOnLineSide => 0.5,
            Analytic::LinearOverDisk => -std::f64::consts::SQRT_2,
            Analytic::BoundActive1d | Analytic::Hs22 => 1.0,
            Analytic::BoxLinear => -3.0,
            Analytic::Rosenbrock => 0.0,
            Analytic::WeightedNormOnPlane => 6.0 / 11.0,
            Analytic::Hs35 => 1.0 / 9.0,
            Analytic::LogUtility => -(1.0f64 / 3.0).ln() - 2.0 * (2.0f64 / 3.0).ln(),
        }
    }
}

impl NlpProblem for Analytic {
    fn dim(&self) -> usize {
        match self {
            Analytic::BoundActive1d => 1,
            Analytic::WeightedNormOnPlane | Analytic::Hs35 => 3,
            _ => 2,
        }
    }

    fn num_residuals(&self) -> usize {
        match self {
            Analytic::BoundActive1d | Analytic::BoxLinear | Analytic::Rosenbrock => 0,
            Analytic::Hs22 | Analytic::WeightedNormOnPlane => 2,
            _ => 1,
        }
    }

    fn lower_bounds(&self) -> Vec<f64> {
        match self {
            Analytic::BoxLinear => vec![1.0, -2.0],
            Analytic::Hs35 => vec![0.0; 3],
            Analytic::LogUtility => vec![0.05, 0.05],
            _ => vec![-INF; self.dim()],
        }
    }

    fn upper_bounds(&self) -> Vec<f64> {
        match self {
            Analytic::BoundActive1d => vec![2.0],
            Analytic::BoxLinear => vec![5.0, 3.0],
            _ => vec![INF; self.dim()],
        }
    }

    fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)> {
        let one = S::one();
        Ok(match self {
            Analytic::ProjectionOntoHalfplane => {
                ((z[0] - 1.0).sqr() + (z[1] - 2.0).sqr(), vec![z[0] + z[1] - 1.0])
            }
            Analytic::MinNormOnLineSide => (z[0].sqr() + z[1].sqr(), vec![one - z[0] - z[1]]),
            Analytic::LinearOverDisk => (-z[0] - z[1], vec![z[0].sqr() + z[1].sqr() - 1.0]),
            Analytic::BoundActive1d => ((z[0] - 3.0).sqr(), vec![]),
            Analytic::BoxLinear => (z[0] + z[1] * 2.0, vec![]),
            Analytic::Rosenbrock => ((one - z[0]).sqr() + (z[1] - z[0].sqr()).sqr() * 100.0, vec![]),
            Analytic::Hs22 => {
                ((z[0] - 2.0).sqr() + (z[1] - 1.0).sqr(), vec![z[0] + z[1] - 2.0, z[0].sqr() - z[1]])
            }
            Analytic::WeightedNormOnPlane => {
                let s = z[0] + z[1] + z[2] - 1.0;
                (z[0].sqr() + z[1].sqr() * 2.0 + z[2].sqr() * 3.0, vec![s, -s])
            }
            Analytic::Hs35 => {
                let f = -z[0] * 8.0 - z[1] * 6.0 - z[2] * 4.0
                    + z[0].sqr() * 2.0
                    + z[1].sqr() * 2.0
                    + z[2].sqr()
                    + z[0] * z[1] * 2.0
                    + z[0] * z[2] * 2.0
                    + 9.0;
                (f, vec![z[0] + z[1] + z[2] * 2.0 - 3.0])
            }
            Analytic::LogUtility => (-z[0].ln() - z[1].ln() * 2.0, vec![z[0] + z[1] - 1.0]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizers_are_feasible_and_values_match() {
        for p in Analytic::ALL {
            let x = p.minimizer();
            let (f, g) = p.evaluate(&x).unwrap();
            assert!((f - p.optimum()).abs() < 1e-12, "{}: {f} vs {}", p.name(), p.optimum());
            assert!(g.iter().all(|v| *v <= 1e-12), "{}", p.name());
            let (lo, hi) = (p.lower_bounds(), p.upper_bounds());
            assert!(x.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| l <= v && v <= h));
            assert_eq!(p.start().len(), p.dim());
        }
    }
}
