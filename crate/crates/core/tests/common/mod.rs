//! Fixtures shared by the integration targets.
#![allow(dead_code)]

use ellmpc::derivatives::{Real, VectorFn};
use ellmpc::ellipsoid::{Ellipsoid, SymPsdMatrix};
use ellmpc::linalg::{dot, Mat};
use ellmpc::nlp::NlpProblem;
use ellmpc::ocp::{
    extract_solution, shift_candidate, transcribe, GainMode, OcpModel, OcpSolution, OcpSpec, TerminalPolicy,
};
use ellmpc::tube::{DiscreteDynamics, GainMask};
use ellmpc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `x+ = 0.6 x + 0.5 u + w` in the plane.
pub struct Contracting;

impl VectorFn for Contracting {
    fn input_dim(&self) -> usize {
        6
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn eval<S: Real>(&self, z: &[S]) -> Result<Vec<S>> {
        Ok(vec![z[0] * 0.6 + z[2] * 0.5 + z[4], z[1] * 0.6 + z[3] * 0.5 + z[5]])
    }
}

/// `|x_i| <= bound`, plus `|u_i| <= 2` when the input is part of the argument.
pub struct BoxRows {
    pub with_input: bool,
    pub bound: f64,
}

impl VectorFn for BoxRows {
    fn input_dim(&self) -> usize {
        if self.with_input {
            4
        } else {
            2
        }
    }
    fn output_dim(&self) -> usize {
        if self.with_input {
            8
        } else {
            4
        }
    }
    fn eval<S: Real>(&self, z: &[S]) -> Result<Vec<S>> {
        let b = self.bound;
        let mut r = vec![z[0] - b, -z[0] - b, z[1] - b, -z[1] - b];
        if self.with_input {
            r.extend([z[2] - 2.0, -z[2] - 2.0, z[3] - 2.0, -z[3] - 2.0]);
        }
        Ok(r)
    }
}

pub struct AffineModel {
    dynamics: DiscreteDynamics<Contracting>,
    stage: BoxRows,
    terminal: BoxRows,
}

impl AffineModel {
    pub fn new() -> Self {
        AffineModel {
            dynamics: DiscreteDynamics::new(Contracting, 2, 2, 2).unwrap(),
            stage: BoxRows { with_input: true, bound: 3.0 },
            terminal: BoxRows { with_input: false, bound: 1.5 },
        }
    }
}

impl OcpModel for AffineModel {
    type Dynamics = Contracting;
    type Stage = BoxRows;
    type Terminal = BoxRows;
    fn dynamics(&self) -> &DiscreteDynamics<Contracting> {
        &self.dynamics
    }
    fn stage_constraints(&self) -> &BoxRows {
        &self.stage
    }
    fn terminal_constraints(&self) -> &BoxRows {
        &self.terminal
    }
    fn stage_cost<S: Real>(&self, _k: usize, x: &[S], u: &[S]) -> S {
        dot(x, x) + dot(u, u)
    }
    fn terminal_cost<S: Real>(&self, x: &[S]) -> S {
        dot(x, x)
    }
}

/// Outcome of one shift instance: worst residual before and after.
pub struct ShiftCase {
    pub prev_worst: f64,
    pub next_worst: f64,
}

/// Deadbeat feedback for [`Contracting`]: `0.6 I + 0.5 K = 0`.
pub const DEADBEAT: f64 = -1.2;

/// Draws random decision vectors until the tube OCP is feasible, realizes
/// one disturbance and evaluates the shifted candidate. With deadbeat gains
/// every shape matrix after the first step is `σ² I`, so the shifted tube
/// reproduces the old one. Under `u = -1.2 x` the terminal box `|x_i| <= 1.5`
/// is invariant and its inputs stay within `|u_i| <= 1.8`.
pub fn shift_instance(seed: u64, branching: usize) -> Result<ShiftCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = OcpSpec::new(AffineModel::new(), 6, branching, 0.3);
    spec.use_smoothing = false;
    spec.gain_mode = GainMode::Optimized(GainMask::full(2, 2));
    let layout = spec.layout()?;
    let deadbeat = Mat::identity(2).scale(DEADBEAT);
    let prev = loop {
        let x0 = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let mut z: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-0.6..0.6)).collect();
        for k in 1..spec.horizon {
            for g in 0..layout.groups(k) {
                layout.set_gain(&mut z, k, g, &deadbeat)?;
            }
        }
        for k in 1..=branching {
            for p in 0..layout.groups(k - 1) {
                let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                layout.set_cut(&mut z, k, p, &[t.cos(), t.sin()], 0.0);
            }
        }
        let nlp = transcribe(&spec, &x0)?;
        let sol = recentre(&nlp, z, &mut rng)?;
        if sol.max_residual() <= 0.0 {
            break sol;
        }
    };
    let w = {
        let r = 0.3 * rng.random::<f64>().sqrt();
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        [r * t.cos(), r * t.sin()]
    };
    let u0 = &prev.first_input;
    let x1: Vec<f64> = (0..2).map(|i| 0.6 * prev.x_init[i] + 0.5 * u0[i] + w[i]).collect();
    let policy = TerminalPolicy { gain: deadbeat, offset: vec![0.0, 0.0] };
    let z = shift_candidate(&prev, &x1, &spec, &policy)?;
    let nlp = transcribe(&spec, &x1)?;
    let (_, g) = nlp.evaluate::<f64>(&z)?;
    Ok(ShiftCase { prev_worst: prev.max_residual(), next_worst: g.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) })
}

/// Places every cut plane at a random depth in `[-0.8, 0.8]` of its set.
fn recentre<M: OcpModel>(
    nlp: &ellmpc::ocp::TubeOcpNlp<'_, M, ellmpc::tube::ZeroBound>,
    mut z: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<OcpSolution> {
    let layout = nlp.layout().clone();
    for k in 1..=layout.branching() {
        for p in 0..layout.groups(k - 1) {
            let sol = extract_solution(nlp, &z, None)?;
            let cut = &sol.tree.cuts[layout.cut_index(k, p)];
            let root = cut.shape.quad_form(&cut.normal).sqrt();
            let alpha: f64 = rng.random_range(-0.8..0.8);
            let b = dot(&cut.normal, &cut.state) - alpha * root;
            layout.set_cut(&mut z, k, p, &cut.normal.clone(), b);
        }
    }
    extract_solution(nlp, &z, None)
}

pub fn ellipsoid(center: &[f64], shape: &Mat<f64>) -> Ellipsoid {
    Ellipsoid::new(SymPsdMatrix::new(shape.clone()).unwrap(), center.to_vec()).unwrap()
}
