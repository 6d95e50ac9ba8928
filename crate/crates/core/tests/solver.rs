use ellmpc::nlp::{kkt_residual, solve, solve_warm, Forward, InnerMethod, NlpCallbacks, SolveStatus, SolverConfig};
use ellmpc::testproblems::Analytic;

fn tight(method: InnerMethod) -> SolverConfig {
    SolverConfig { kkt_tol: 1e-8, feas_tol: 1e-9, inner_method: method, ..SolverConfig::default() }
}

#[test]
fn analytic_problems_match_closed_forms() {
    for method in [InnerMethod::Structured, InnerMethod::Lbfgs] {
        for p in Analytic::ALL {
            let cb = Forward(p);
            let r = solve(&cb, &p.start(), &tight(method)).unwrap();
            assert_eq!(r.status, SolveStatus::Converged, "{} ({method:?})", p.name());
            let err = r.z_star.iter().zip(p.minimizer()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-5, "{} ({method:?}): {:?}", p.name(), r.z_star);
            assert!((r.objective - p.optimum()).abs() <= 1e-6, "{}", p.name());
            let k = kkt_residual(&cb, &r.z_star, &r.multipliers).unwrap();
            assert!(k.stationarity <= 1e-6 && k.violation <= 1e-6 && k.complementarity <= 1e-6, "{}: {k:?}", p.name());
        }
    }
}

#[test]
fn active_multipliers_are_positive_and_inactive_vanish() {
    let p = Analytic::ProjectionOntoHalfplane;
    let r = solve(&Forward(p), &p.start(), &tight(InnerMethod::Structured)).unwrap();
    // Gradient 2(z - (1,2)) = (-2,-2) at (0,1), so λ = 2.
    assert!((r.multipliers[0] - 2.0).abs() < 1e-5, "{:?}", r.multipliers);

    let p = Analytic::Rosenbrock;
    let r = solve(&Forward(p), &p.start(), &tight(InnerMethod::Structured)).unwrap();
    assert!(r.multipliers.is_empty());
}

#[test]
fn warm_start_at_the_solution_is_immediate() {
    let p = Analytic::Hs35;
    let cb = Forward(p);
    let cfg = tight(InnerMethod::Structured);
    let first = solve(&cb, &p.start(), &cfg).unwrap();
    let again = solve_warm(&cb, &first.z_star, Some(&first.multipliers), &cfg).unwrap();
    assert_eq!(again.status, SolveStatus::Converged);
    assert!(again.iterations.inner <= first.iterations.inner);
    assert!(again.iterations.outer <= 2, "{:?}", again.iterations);
}

#[test]
fn bad_config_is_rejected() {
    let p = Analytic::BoxLinear;
    let cfg = SolverConfig { penalty_growth: 1.0, ..SolverConfig::default() };
    assert!(solve(&Forward(p), &p.start(), &cfg).is_err());
    let cfg = SolverConfig { max_step: 0.0, ..SolverConfig::default() };
    assert!(solve(&Forward(p), &p.start(), &cfg).is_err());
}

#[test]
fn bounds_are_reported_as_trailing_rows() {
    let p = Analytic::BoxLinear;
    let cb = Forward(p);
    let r = solve(&cb, &p.start(), &tight(InnerMethod::Structured)).unwrap();
    assert_eq!(cb.num_residuals(), 0);
    assert_eq!(r.multipliers.len(), 4);
    // Lower bounds bind with multipliers equal to the cost slopes.
    assert!((r.multipliers[0] - 1.0).abs() < 1e-5 && (r.multipliers[1] - 2.0).abs() < 1e-5, "{:?}", r.multipliers);
}
