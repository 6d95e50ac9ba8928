//! Quick property suites run by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corridor::{CaseParams, Rk4Dynamics, StateRows, NU, NW, NX};
use crate::derivatives::{fd_check, VectorFn};
use crate::ellipsoid::{
    contains, log_volume, loewner_john_cut, partition_pair, sample_in_cut, Ellipsoid, Halfspace, SmoothingParams,
    SymPsdMatrix, MEMBERSHIP_TOL,
};
use crate::linalg::Mat;
use crate::nlp::{solve, Forward, NlpProblem, SolveStatus, SolverConfig};
use crate::testproblems::Analytic;
use crate::tube::{propagate_shape_f64, FeedbackGain, LinearizedDynamics, PropagationConfig, ZeroBound};

pub const SUITES: [&str; 4] = ["geometry", "propagation", "derivatives", "solver"];

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: bool,
    pub checks: usize,
    pub failures: usize,
    /// Largest observed error against the suite's tolerance.
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Suite whose results are deliberately corrupted, to exercise failure reporting.
    pub inject_fault: Option<String>,
}

struct Tally {
    checks: usize,
    failures: usize,
    max_error: f64,
    tolerance: f64,
}

impl Tally {
    fn new(tolerance: f64) -> Self {
        Tally { checks: 0, failures: 0, max_error: 0.0, tolerance }
    }

    fn record(&mut self, err: f64) {
        self.checks += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.max_error = self.max_error.max(err);
        if err > self.tolerance {
            self.failures += 1;
        }
    }

    fn fail(&mut self) {
        self.checks += 1;
        self.failures += 1;
        self.max_error = f64::INFINITY;
    }

    fn report(self, suite: &'static str) -> SuiteReport {
        SuiteReport {
            suite,
            passed: self.failures == 0 && self.checks > 0,
            checks: self.checks,
            failures: self.failures,
            max_error: self.max_error,
            tolerance: self.tolerance,
        }
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<SuiteReport> {
    let fault = |s: &str| if opts.inject_fault.as_deref() == Some(s) { 1e-2 } else { 0.0 };
    vec![
        geometry(fault("geometry")).report("geometry"),
        propagation(fault("propagation")).report("propagation"),
        derivatives(fault("derivatives")).report("derivatives"),
        solver(fault("solver")).report("solver"),
    ]
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
    let l = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    l.matmul_t(&l).add(&Mat::identity(n).scale(0.05))
}

fn geometry(fault: f64) -> Tally {
    let mut t = Tally::new(MEMBERSHIP_TOL);
    let p = SmoothingParams::default();
    let half = Halfspace::new(vec![1.0, 0.0], 0.0).expect("valid");
    match loewner_john_cut(&Ellipsoid::unit_ball(2), &half, &p, false) {
        Ok(e) => {
            let want = Mat::diag(&[4.0 / 9.0, 4.0 / 3.0]);
            t.record((e.center()[0] + 1.0 / 3.0).abs() + e.center()[1].abs() + fault);
            t.record(e.shape().as_mat().sub(&want).max_abs());
        }
        Err(_) => t.fail(),
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (i, n) in [2usize, 3, 7].into_iter().cycle().take(12).enumerate() {
        let Ok(shape) = SymPsdMatrix::new(random_spd(&mut rng, n)) else {
            t.fail();
            continue;
        };
        let center: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let Ok(ell) = Ellipsoid::new(shape, center) else {
            t.fail();
            continue;
        };
        let normal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = rng.random_range(-0.9..0.9);
        let qa = ell.shape().as_mat().mat_vec(&normal);
        let root = crate::linalg::dot(&normal, &qa).sqrt();
        let offset = crate::linalg::dot(&normal, ell.center()) - alpha * root;
        let Ok(hs) = Halfspace::new(normal, offset) else {
            t.fail();
            continue;
        };
        let (Ok(cut), Ok((a, b))) = (loewner_john_cut(&ell, &hs, &p, false), partition_pair(&ell, &hs, &p, false))
        else {
            t.fail();
            continue;
        };
        t.record((log_volume(&cut) - log_volume(&ell)).max(0.0));
        match sample_in_cut(&ell, &hs, 100 + i as u64, 500) {
            Ok(points) => {
                let outside = points.iter().filter(|x| !contains(&cut, x, MEMBERSHIP_TOL)).count();
                let uncovered = points.iter().filter(|x| !contains(&a, x, MEMBERSHIP_TOL) && !contains(&b, x, MEMBERSHIP_TOL)).count();
                t.record((outside + uncovered) as f64);
            }
            Err(_) => t.fail(),
        }
    }
    t
}

fn propagation(fault: f64) -> Tally {
    let mut t = Tally::new(1e-12);
    let lin = LinearizedDynamics {
        a: Mat::diag(&[0.5, 2.0]),
        b: Mat::zeros(2, 1),
        gamma: Mat::identity(2),
        next: vec![0.0; 2],
    };
    let p = Mat::identity(2);
    let k = FeedbackGain::zero(1, 2);
    let next = propagate_shape_f64(&p, &lin, &k, 0.1, &PropagationConfig::default(), &ZeroBound, &[0.0; 2], &[0.0]);
    let want = Mat::diag(&[0.25 + 0.01, 4.0 + 0.01]);
    t.record(next.sub(&want).max_abs() + fault);
    t.record((next[(0, 1)] - next[(1, 0)]).abs());
    // A rotation preserves the unit ball up to the disturbance term.
    let (c, s) = (0.6f64, 0.8f64);
    let rot = LinearizedDynamics { a: Mat::from_row_major(2, 2, vec![c, -s, s, c]), ..lin };
    let next = propagate_shape_f64(&p, &rot, &k, 0.0, &PropagationConfig::default(), &ZeroBound, &[0.0; 2], &[0.0]);
    t.record(next.sub(&Mat::identity(2)).max_abs());
    t
}

fn derivatives(fault: f64) -> Tally {
    let mut t = Tally::new(1e-6);
    let case = CaseParams::default();
    let dynamics = Rk4Dynamics { dt: case.dt, v_h: case.v_h };
    let rows = StateRows {
        width: NX + NU,
        y_bounds: case.y_bounds,
        v_bounds: case.v_bounds,
        omega_bounds: case.omega_bounds,
        delta_safe: case.delta_safe,
        terminal_v_max: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut z: Vec<f64> = (0..NX + NU + NW).map(|_| rng.random_range(-1.0..1.0)).collect();
        z[5] += 2.0;
        check_fd(&mut t, &dynamics, &z, fault);
        check_fd(&mut t, &rows, &z[..NX + NU], 0.0);
    }
    t
}

fn check_fd<F: VectorFn>(t: &mut Tally, f: &F, z: &[f64], fault: f64) {
    match fd_check(f, z, 1e-5) {
        Ok(r) => t.record(r.max_rel_error + fault),
        Err(_) => t.fail(),
    }
}

fn solver(fault: f64) -> Tally {
    let mut t = Tally::new(1e-5);
    let cfg = SolverConfig { kkt_tol: 1e-8, feas_tol: 1e-9, ..SolverConfig::default() };
    for p in Analytic::ALL {
        match solve(&Forward(p), &p.start(), &cfg) {
            Ok(r) if r.status == SolveStatus::Converged => {
                let err = r.z_star.iter().zip(p.minimizer()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                t.record(err + fault);
            }
            _ => t.fail(),
        }
        debug_assert_eq!(p.dim(), p.start().len());
    }
    t
}
