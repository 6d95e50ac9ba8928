use ellmpc::corridor::{build_case_ocp, initial_guess, CaseParams, Controller, Rk4Dynamics, StateRows, NU, NW, NX};
use ellmpc::derivatives::{fd_check, Real, VectorFn};
use ellmpc::nlp::NlpProblem;
use ellmpc::ocp::{transcribe, TubeOcpNlp};
use ellmpc::tube::ZeroBound;
use ellmpc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Objective followed by every residual, as one vector map.
struct Stacked<'a>(TubeOcpNlp<'a, ellmpc::corridor::CorridorModel, ZeroBound>);

impl VectorFn for Stacked<'_> {
    fn input_dim(&self) -> usize {
        self.0.dim()
    }
    fn output_dim(&self) -> usize {
        1 + self.0.num_residuals()
    }
    fn eval<S: Real>(&self, z: &[S]) -> Result<Vec<S>> {
        let (f, mut g) = self.0.evaluate(z)?;
        g.insert(0, f);
        Ok(g)
    }
}

fn random_state(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.random_range(-2.5..0.5),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(0.2..1.8),
        rng.random_range(-0.5..0.5),
        rng.random_range(0.5..3.5),
        rng.random_range(-0.5..0.5),
    ]
}

#[test]
fn model_functions_match_central_differences() {
    let p = CaseParams::default();
    let dynamics = Rk4Dynamics { dt: p.dt, v_h: p.v_h };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..8 {
        let mut z = random_state(&mut rng);
        z.extend((0..NU + NW).map(|_| rng.random_range(-0.5..0.5)));
        let r = fd_check(&dynamics, &z, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        for terminal in [None, Some(p.terminal_v_max)] {
            let rows = StateRows {
                width: NX + NU,
                y_bounds: p.y_bounds,
                v_bounds: p.v_bounds,
                omega_bounds: p.omega_bounds,
                delta_safe: p.delta_safe,
                terminal_v_max: terminal,
            };
            let r = fd_check(&rows, &z[..NX + NU], 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}

#[test]
fn transcribed_problems_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for c in Controller::ALL {
        let p = CaseParams::default().with_controller(c);
        let (spec, x0) = build_case_ocp(&p, &p.x_init).unwrap();
        let guess = initial_guess(&spec, &p, &x0).unwrap();
        let f = Stacked(transcribe(&spec, &x0).unwrap());
        for _ in 0..2 {
            let z: Vec<f64> = guess.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
            let r = fd_check(&f, &z, 1e-6).unwrap();
            assert!(r.passed, "{}: {r:?}", c.name());
        }
    }
}
