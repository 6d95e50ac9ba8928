//! Robot passing a human in a corridor: unicycle robot with acceleration and
//! angular-acceleration inputs, human walking at a known velocity plus a
//! bounded disturbance.
//!
//! State: `[r_x, r_y, r_theta, r_v, r_omega, h_x, h_y]`, input `[a, alpha]`,
//! disturbance `[w_x, w_y]` on the human velocity.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derivatives::{Real, VectorFn};
use crate::ellipsoid::SmoothingParams;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nlp::{solve_warm, Forward, InnerMethod, NlpProblem, SolveResult, SolveStatus, SolverConfig};
use crate::ocp::{
    extract_solution, select_side, shift_candidate, transcribe, DecisionLayout, GainMode, OcpModel, OcpSolution,
    OcpSolutionRecord, OcpSpec, TerminalPolicy,
};
use crate::tube::{DiscreteDynamics, GainMask, PropagationConfig};

pub const NX: usize = 7;
pub const NU: usize = 2;
pub const NW: usize = 2;

pub const RX: usize = 0;
pub const RY: usize = 1;
pub const THETA: usize = 2;
pub const V: usize = 3;
pub const OMEGA: usize = 4;
pub const HX: usize = 5;
pub const HY: usize = 6;

/// Guard inside the distance square root.
const DIST_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Controller {
    #[serde(rename = "single_tube_K0")]
    SingleTubeK0,
    #[serde(rename = "single_tube_Kopt")]
    SingleTubeKopt,
    #[serde(rename = "multistage_K0")]
    MultistageK0,
    #[serde(rename = "multistage_Kopt")]
    MultistageKopt,
}

impl Controller {
    pub const ALL: [Controller; 4] =
        [Controller::SingleTubeK0, Controller::SingleTubeKopt, Controller::MultistageK0, Controller::MultistageKopt];

    pub fn name(self) -> &'static str {
        match self {
            Controller::SingleTubeK0 => "single_tube_K0",
            Controller::SingleTubeKopt => "single_tube_Kopt",
            Controller::MultistageK0 => "multistage_K0",
            Controller::MultistageKopt => "multistage_Kopt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown controller '{s}' (expected one of {})",
                Self::ALL.map(|c| c.name()).join(", ")
            ))
        })
    }

    pub fn branching(self) -> usize {
        match self {
            Controller::SingleTubeK0 | Controller::SingleTubeKopt => 0,
            Controller::MultistageK0 | Controller::MultistageKopt => 1,
        }
    }

    pub fn optimizes_gains(self) -> bool {
        matches!(self, Controller::SingleTubeKopt | Controller::MultistageKopt)
    }

    /// Same tree with the gains fixed at zero.
    pub fn without_gains(self) -> Self {
        match self {
            Controller::SingleTubeKopt => Controller::SingleTubeK0,
            Controller::MultistageKopt => Controller::MultistageK0,
            c => c,
        }
    }
}

/// How the closed loop seeds the cut that the shifted solution lacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutWarmStart {
    /// Tangent placement from the shift construction.
    Tangent,
    /// Keep the shifted normal and move the plane through the predicted center.
    #[default]
    Recenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseParams {
    pub dt: f64,
    pub horizon: usize,
    pub v_h: [f64; 2],
    pub sigma_w: f64,
    pub delta_safe: f64,
    pub y_bounds: [f64; 2],
    pub v_bounds: [f64; 2],
    pub omega_bounds: [f64; 2],
    pub terminal_v_max: f64,
    pub q_diag: [f64; NX],
    pub r_diag: [f64; NU],
    pub v_ref: f64,
    pub x_init: [f64; NX],
    pub sim_steps: usize,
    pub controller: Controller,
    /// State columns both inputs may feed back on.
    pub feedback_columns: Vec<usize>,
    pub eps: f64,
    pub gain_regularization: f64,
    pub cut_margin: f64,
    pub smoothing: SmoothingParams,
    pub propagation: PropagationConfig,
    pub cut_warm_start: CutWarmStart,
    /// Solver for the zero-gain controllers.
    pub solver: SolverConfig,
    /// Solver for the gain-optimizing controllers, including their zero-gain
    /// initialization.
    pub gain_solver: SolverConfig,
    pub n_runs: usize,
    pub base_seed: u64,
}

impl Default for CaseParams {
    fn default() -> Self {
        CaseParams {
            dt: 0.5,
            horizon: 10,
            v_h: [-0.6, 0.0],
            sigma_w: 0.4,
            delta_safe: 0.3,
            y_bounds: [-1.3, 1.3],
            v_bounds: [0.0, 2.0],
            omega_bounds: [-1.0, 1.0],
            terminal_v_max: 0.01,
            q_diag: [50.0, 50.0, 0.0, 2.0, 0.0, 0.0, 0.0],
            r_diag: [2.0, 2.0],
            v_ref: 1.5,
            x_init: [-2.0, 0.0, 0.0, 1.6, 0.0, 3.5, 0.0],
            sim_steps: 16,
            controller: Controller::MultistageK0,
            feedback_columns: vec![HX, HY, V],
            eps: 1e-6,
            gain_regularization: 1e-3,
            cut_margin: 0.0,
            smoothing: SmoothingParams::default(),
            propagation: PropagationConfig::default(),
            cut_warm_start: CutWarmStart::default(),
            solver: SolverConfig {
                kkt_tol: 1e-4,
                feas_tol: 1e-6,
                max_outer: 25,
                max_inner: 400,
                inner_method: InnerMethod::Lbfgs,
                ..SolverConfig::default()
            },
            gain_solver: SolverConfig {
                kkt_tol: 1e-4,
                feas_tol: 1e-6,
                max_outer: 18,
                max_inner: 60,
                penalty_init: 100.0,
                inner_method: InnerMethod::Structured,
                ..SolverConfig::default()
            },
            n_runs: 50,
            base_seed: 0,
        }
    }
}

impl CaseParams {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: CaseParams = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dt > 0.0) || self.horizon < 2 {
            return bad("dt must be positive and horizon at least 2");
        }
        if !(self.sigma_w >= 0.0) || !(self.delta_safe >= 0.0) || !(self.eps > 0.0) {
            return bad("sigma_w and delta_safe must be >= 0, eps > 0");
        }
        for b in [self.y_bounds, self.v_bounds, self.omega_bounds] {
            if !(b[0] < b[1]) {
                return bad("bounds must satisfy lower < upper");
            }
        }
        if self.q_diag.iter().chain(&self.r_diag).any(|q| !(*q >= 0.0)) {
            return bad("cost weights must be >= 0");
        }
        if self.feedback_columns.iter().any(|&c| c >= NX) {
            return bad("feedback column out of range");
        }
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1");
        }
        if self.x_init.iter().chain(&self.v_h).any(|v| !v.is_finite()) {
            return bad("x_init and v_h must be finite");
        }
        self.solver.validate()?;
        self.gain_solver.validate()
    }

    /// Solver settings used by the configured controller.
    pub fn active_solver(&self) -> &SolverConfig {
        if self.controller.optimizes_gains() {
            &self.gain_solver
        } else {
            &self.solver
        }
    }

    pub fn with_controller(&self, controller: Controller) -> Self {
        CaseParams { controller, ..self.clone() }
    }
}

/// Right-hand side of the continuous-time model.
pub fn continuous_dynamics<S: Real>(x: &[S], u: &[S], w: &[S], v_h: [f64; 2]) -> [S; NX] {
    [
        x[V] * x[THETA].cos(),
        x[V] * x[THETA].sin(),
        x[OMEGA],
        u[0],
        u[1],
        w[0] + v_h[0],
        w[1] + v_h[1],
    ]
}

/// Classical RK4 with the input and disturbance held over the step.
pub fn rk4_step<S: Real>(x: &[S], u: &[S], w: &[S], dt: f64, v_h: [f64; 2]) -> [S; NX] {
    let shifted = |k: &[S; NX], h: f64| -> [S; NX] { std::array::from_fn(|i| x[i] + k[i] * h) };
    let k1 = continuous_dynamics(x, u, w, v_h);
    let k2 = continuous_dynamics(&shifted(&k1, dt / 2.0), u, w, v_h);
    let k3 = continuous_dynamics(&shifted(&k2, dt / 2.0), u, w, v_h);
    let k4 = continuous_dynamics(&shifted(&k3, dt), u, w, v_h);
    std::array::from_fn(|i| x[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0))
}

pub fn distance<S: Real>(x: &[S]) -> S {
    let dx = x[RX] - x[HX];
    let dy = x[RY] - x[HY];
    (dx * dx + dy * dy + DIST_GUARD).sqrt()
}

/// `Δ_safe - ‖p_r - p_h‖`, feasible iff `<= 0`.
pub fn safety_constraint<S: Real>(x: &[S], delta_safe: f64) -> S {
    -distance(x) + delta_safe
}

#[derive(Clone, Debug)]
pub struct Rk4Dynamics {
    pub dt: f64,
    pub v_h: [f64; 2],
}

impl VectorFn for Rk4Dynamics {
    fn input_dim(&self) -> usize {
        NX + NU + NW
    }
    fn output_dim(&self) -> usize {
        NX
    }
    fn eval<S: Real>(&self, z: &[S]) -> Result<Vec<S>> {
        Ok(rk4_step(&z[..NX], &z[NX..NX + NU], &z[NX + NU..], self.dt, self.v_h).to_vec())
    }
}

/// Box and safety rows on the state, optionally with the terminal speed row.
#[derive(Clone, Debug)]
pub struct StateRows {
    pub width: usize,
    pub y_bounds: [f64; 2],
    pub v_bounds: [f64; 2],
    pub omega_bounds: [f64; 2],
    pub delta_safe: f64,
    pub terminal_v_max: Option<f64>,
}

impl StateRows {
    pub const ROWS: usize = 7;
}

impl VectorFn for StateRows {
    fn input_dim(&self) -> usize {
        self.width
    }
    fn output_dim(&self) -> usize {
        Self::ROWS + usize::from(self.terminal_v_max.is_some())
    }
    fn eval<S: Real>(&self, x: &[S]) -> Result<Vec<S>> {
        let mut r = vec![
            x[RY] - self.y_bounds[1],
            -x[RY] + self.y_bounds[0],
            x[V] - self.v_bounds[1],
            -x[V] + self.v_bounds[0],
            x[OMEGA] - self.omega_bounds[1],
            -x[OMEGA] + self.omega_bounds[0],
            safety_constraint(x, self.delta_safe),
        ];
        if let Some(vmax) = self.terminal_v_max {
            r.push(x[V] - vmax);
        }
        Ok(r)
    }
}

/// Corridor OCP with the reference anchored at `anchor_x`.
#[derive(Clone, Debug)]
pub struct CorridorModel {
    dynamics: DiscreteDynamics<Rk4Dynamics>,
    stage: StateRows,
    terminal: StateRows,
    q: [f64; NX],
    r: [f64; NU],
    v_ref: f64,
    dt: f64,
    horizon: usize,
    anchor_x: f64,
}

impl CorridorModel {
    pub fn new(p: &CaseParams, anchor_x: f64) -> Result<Self> {
        let rows = |width, terminal_v_max| StateRows {
            width,
            y_bounds: p.y_bounds,
            v_bounds: p.v_bounds,
            omega_bounds: p.omega_bounds,
            delta_safe: p.delta_safe,
            terminal_v_max,
        };
        Ok(CorridorModel {
            dynamics: DiscreteDynamics::new(Rk4Dynamics { dt: p.dt, v_h: p.v_h }, NX, NU, NW)?,
            stage: rows(NX + NU, None),
            terminal: rows(NX, Some(p.terminal_v_max)),
            q: p.q_diag,
            r: p.r_diag,
            v_ref: p.v_ref,
            dt: p.dt,
            horizon: p.horizon,
            anchor_x,
        })
    }

    pub fn reference(&self, k: usize) -> [f64; NX] {
        let mut r = [0.0; NX];
        r[RX] = self.anchor_x + self.v_ref * k as f64 * self.dt;
        r[V] = self.v_ref;
        r
    }

    fn tracking<S: Real>(&self, k: usize, x: &[S]) -> S {
        let r = self.reference(k);
        let mut c = S::zero();
        for i in 0..NX {
            if self.q[i] != 0.0 {
                c += (x[i] - r[i]).sqr() * self.q[i];
            }
        }
        c
    }
}

impl OcpModel for CorridorModel {
    type Dynamics = Rk4Dynamics;
    type Stage = StateRows;
    type Terminal = StateRows;

    fn dynamics(&self) -> &DiscreteDynamics<Rk4Dynamics> {
        &self.dynamics
    }
    fn stage_constraints(&self) -> &StateRows {
        &self.stage
    }
    fn terminal_constraints(&self) -> &StateRows {
        &self.terminal
    }
    fn stage_cost<S: Real>(&self, k: usize, x: &[S], u: &[S]) -> S {
        let mut c = self.tracking(k, x);
        for (ui, ri) in u.iter().zip(&self.r) {
            c += ui.sqr() * *ri;
        }
        c
    }
    fn terminal_cost<S: Real>(&self, x: &[S]) -> S {
        self.tracking(self.horizon, x)
    }
}

pub fn gain_mask(p: &CaseParams) -> Result<GainMask> {
    GainMask::columns(NU, NX, &p.feedback_columns)
}

/// OCP at the current state, with the reference anchored at its robot x-position.
pub fn build_case_ocp(p: &CaseParams, x_now: &[f64]) -> Result<(OcpSpec<CorridorModel>, Vec<f64>)> {
    p.validate()?;
    if x_now.len() != NX {
        return Err(Error::DimensionMismatch(format!("state has length {}, expected {NX}", x_now.len())));
    }
    let model = CorridorModel::new(p, x_now[RX])?;
    let mut spec = OcpSpec::new(model, p.horizon, p.controller.branching(), p.sigma_w);
    spec.eps = p.eps;
    spec.smoothing = p.smoothing;
    spec.use_smoothing = true;
    spec.propagation = p.propagation;
    spec.gain_regularization = p.gain_regularization;
    spec.cut_margin = p.cut_margin;
    spec.gain_mode = if p.controller.optimizes_gains() { GainMode::Optimized(gain_mask(p)?) } else { GainMode::Zero };
    spec.validate()?;
    Ok((spec, x_now.to_vec()))
}

/// Disturbance for step `k` of the run with `seed`, uniform on the disk of radius `sigma`.
pub fn sample_disturbance_scaled(seed: u64, k: u64, sigma: f64) -> [f64; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let r = sigma * rng.random::<f64>().sqrt();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    [r * phi.cos(), r * phi.sin()]
}

/// Disturbance for step `k` with the default radius 0.4.
pub fn sample_disturbance(seed: u64, k: u64) -> [f64; 2] {
    sample_disturbance_scaled(seed, k, CaseParams::default().sigma_w)
}

/// Steering heuristic used for cold starts: brake evenly to rest and swing
/// out to `lane * 0.9` (lane 0 keeps the heading).
fn heuristic_input(x: &[f64], lane: f64, p: &CaseParams, steps_left: usize) -> [f64; 2] {
    let accel = -x[V] / (steps_left.max(1) as f64 * p.dt);
    let y_target = 0.9 * lane;
    let theta_des = (1.2 * (y_target - x[RY])).clamp(-0.6, 0.6);
    let omega_des = (1.5 * (theta_des - x[THETA])).clamp(-0.8, 0.8);
    let alpha = ((omega_des - x[OMEGA]) / p.dt).clamp(-2.0, 2.0);
    [accel, alpha]
}

/// Cold-start decision vector. In the single tube the robot swings to the
/// upper half; with a tree, the first cut splits the human's lateral
/// position through its predicted center and each child swings away from
/// the human's side.
pub fn initial_guess(spec: &OcpSpec<CorridorModel>, p: &CaseParams, x_init: &[f64]) -> Result<Vec<f64>> {
    let layout = spec.layout()?;
    let mut z = vec![0.0; layout.dim()];
    let nr = spec.branching;
    let lane_of = |k: usize, g: usize| -> f64 {
        if nr == 0 {
            1.0
        } else if k == 0 {
            0.0
        } else if layout.group_of(layout.scenarios_of(k, g).start, 1) == 0 {
            1.0
        } else {
            -1.0
        }
    };
    for s in 0..layout.scenarios() {
        let mut x = x_init.to_vec();
        for k in 0..spec.horizon {
            let g = layout.group_of(s, k);
            let u = heuristic_input(&x, lane_of(k, g), p, spec.horizon - k);
            if layout.scenarios_of(k, g).start == s {
                layout.set_input(&mut z, k, g, &u);
            }
            let u = layout.input(&z, k, g).to_vec();
            x = rk4_step(&x, &u, &[0.0, 0.0], p.dt, p.v_h).to_vec();
        }
    }
    // Cuts through the predicted center along the human's lateral axis.
    for k in 1..=nr {
        for parent in 0..layout.groups(k - 1) {
            layout.set_cut(&mut z, k, parent, &unit(HY), 0.0);
        }
    }
    recenter_cuts(spec, &layout, &mut z, x_init)?;
    Ok(z)
}

fn unit(i: usize) -> [f64; NX] {
    let mut e = [0.0; NX];
    e[i] = 1.0;
    e
}

/// Moves every cut plane through the center of the set it partitions.
fn recenter_cuts(spec: &OcpSpec<CorridorModel>, layout: &DecisionLayout, z: &mut [f64], x_init: &[f64]) -> Result<()> {
    for k in 1..=spec.branching {
        for parent in 0..layout.groups(k - 1) {
            let tree = crate::ocp::rollout::<f64, _, _>(spec, layout, z, x_init)?;
            let cut = &tree.cuts[layout.cut_index(k, parent)];
            let a = cut.normal.clone();
            let b = crate::linalg::dot(&a, &cut.state);
            layout.set_cut(z, k, parent, &a, b);
        }
    }
    Ok(())
}

/// Copies inputs and cuts between layouts of the same tree; gains start at zero.
pub fn embed(z: &[f64], from: &DecisionLayout, to: &DecisionLayout) -> Vec<f64> {
    let mut out = vec![0.0; to.dim()];
    for k in 0..from.horizon() {
        for g in 0..from.groups(k) {
            to.set_input(&mut out, k, g, from.input(z, k, g));
        }
    }
    for k in 1..=from.branching() {
        for p in 0..from.groups(k - 1) {
            let (a, b) = from.cut(z, k, p);
            to.set_cut(&mut out, k, p, a, b);
        }
    }
    out
}

pub struct CaseSolve {
    pub solution: OcpSolution,
    pub result: SolveResult,
}

impl CaseSolve {
    pub fn feasible(&self, feas_tol: f64) -> bool {
        self.result.max_violation <= feas_tol
    }
}

/// Solves the corridor OCP at `x_now` from `z0`.
pub fn solve_case(
    spec: &OcpSpec<CorridorModel>,
    x_now: &[f64],
    z0: &[f64],
    multipliers: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<CaseSolve> {
    let nlp = transcribe(spec, x_now)?;
    let cb = Forward(&nlp);
    let result = solve_warm(&cb, z0, multipliers, cfg)?;
    let solution = extract_solution(&nlp, &result.z_star, Some(&result))?;
    Ok(CaseSolve { solution, result })
}

impl<P: NlpProblem> NlpProblem for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn num_residuals(&self) -> usize {
        (**self).num_residuals()
    }
    fn lower_bounds(&self) -> Vec<f64> {
        (**self).lower_bounds()
    }
    fn upper_bounds(&self) -> Vec<f64> {
        (**self).upper_bounds()
    }
    fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)> {
        (**self).evaluate(z)
    }
    fn derivatives(&self, z: &[f64]) -> Option<Result<crate::nlp::Derivatives>> {
        (**self).derivatives(z)
    }
}

/// Solver settings that resume from a previous result's penalty.
pub fn continued(cfg: &SolverConfig, prev: &SolveResult) -> SolverConfig {
    SolverConfig { penalty_init: prev.penalty.clamp(cfg.penalty_init, cfg.penalty_max), ..cfg.clone() }
}

/// Cold solve at `x_now`. Gain-optimizing controllers start from the
/// solution with zero gains.
pub fn solve_cold(p: &CaseParams, x_now: &[f64]) -> Result<CaseSolve> {
    let (spec, x0) = build_case_ocp(p, x_now)?;
    if p.controller.optimizes_gains() {
        let base = CaseParams { solver: p.gain_solver.clone(), ..p.with_controller(p.controller.without_gains()) };
        let first = solve_cold(&base, x_now)?;
        let z0 = embed(&first.solution.z, &first.solution.layout, &spec.layout()?);
        let cfg = continued(&p.gain_solver, &first.result);
        return solve_case(&spec, &x0, &z0, Some(&first.result.multipliers), &cfg);
    }
    let z0 = initial_guess(&spec, p, &x0)?;
    solve_case(&spec, &x0, &z0, None, &p.solver)
}

/// Open-loop solve at the configured initial state.
pub fn open_loop(p: &CaseParams) -> Result<CaseSolve> {
    solve_cold(p, &p.x_init)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// Solver converged; its first input was applied.
    Converged,
    /// Solver stopped early at a feasible point; its first input was applied.
    Feasible,
    /// Infeasible result; the last feasible plan was applied.
    Fallback,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Converged => "converged",
            StepStatus::Feasible => "feasible",
            StepStatus::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub status: StepStatus,
    pub solver_status: SolveStatus,
    pub max_violation: f64,
    pub inner_iterations: usize,
    pub stage_cost: f64,
    pub min_distance: f64,
    pub solve_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub controller: Controller,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub final_distance: f64,
    /// Sum of stage costs over the simulated steps, no terminal term.
    pub closed_loop_cost: f64,
    /// Recorded states (including the final one) closer than `Δ_safe - 1e-6`.
    pub violations: usize,
    pub fallbacks: usize,
    pub mean_solve_time_s: f64,
    /// Per-solve predictions, kept on request.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solutions: Vec<OcpSolutionRecord>,
}

impl RunRecord {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.mean_solve_time_s = 0.0;
        for s in &mut r.steps {
            s.solve_time_s = 0.0;
        }
        for sol in &mut r.solutions {
            if let Some(d) = &mut sol.diagnostics {
                d.wall_time = 0.0;
            }
        }
        r
    }
}

/// Plan that may be replayed when a later solve fails.
struct Plan {
    solution: OcpSolution,
    solved_at: usize,
    side: Option<usize>,
}

impl Plan {
    /// Ancillary law of the stored plan `t - solved_at` steps later.
    fn input(&self, t: usize, x: &[f64]) -> Vec<f64> {
        let lay = &self.solution.layout;
        let k = t - self.solved_at;
        if k >= lay.horizon() {
            return vec![0.0; NU];
        }
        let s = self.side.map_or(0, |j| j << lay.branching().saturating_sub(1));
        let node = &self.solution.tree.steps[k][lay.group_of(s, k)];
        let dx: Vec<f64> = x.iter().zip(&node.state).map(|(a, b)| a - b).collect();
        let fb = node.gain.as_ref().map_or(vec![0.0; NU], |g| g.mat_vec(&dx));
        node.input.as_ref().expect("input").iter().zip(fb).map(|(u, f)| u + f).collect()
    }
}

/// Closed-loop simulation with the configured controller.
pub fn closed_loop_run(p: &CaseParams, seed: u64) -> Result<RunRecord> {
    closed_loop_run_with(p, seed, false)
}

pub fn closed_loop_run_with(p: &CaseParams, seed: u64, keep_solutions: bool) -> Result<RunRecord> {
    p.validate()?;
    let tol = p.active_solver().feas_tol;
    let mut x = p.x_init.to_vec();
    let mut steps = Vec::with_capacity(p.sim_steps);
    let mut solutions = Vec::new();
    let mut last: Option<(OcpSolution, Vec<f64>)> = None;
    let mut plan: Option<Plan> = None;
    let mut cost = 0.0;
    for t in 0..p.sim_steps {
        let (spec, _) = build_case_ocp(p, &x)?;
        let started = Instant::now();
        let warm = match &last {
            Some((prev, mult)) => warm_start(prev, &x, &spec)?.map(|z| (z, mult.clone())),
            None => None,
        };
        let solve = match warm {
            Some((z0, mult)) => solve_case(&spec, &x, &z0, Some(&mult), p.active_solver())?,
            None => solve_cold(p, &x)?,
        };
        let solve_time = started.elapsed().as_secs_f64();
        if let Some(pl) = &mut plan {
            if pl.side.is_none() && pl.solved_at + 1 == t {
                pl.side = select_side(&pl.solution, &x).ok();
            }
        }
        let (input, status) = if solve.feasible(tol) {
            let status =
                if solve.result.status == SolveStatus::Converged { StepStatus::Converged } else { StepStatus::Feasible };
            plan = Some(Plan { solution: solve.solution.clone(), solved_at: t, side: None });
            (solve.solution.first_input.clone(), status)
        } else {
            let u = match &plan {
                Some(pl) => pl.input(t, &x),
                None => solve.solution.first_input.clone(),
            };
            (u, StepStatus::Fallback)
        };
        let stage_cost = spec.model.stage_cost(0, &x, &input);
        cost += stage_cost;
        steps.push(StepRecord {
            step: t,
            time: t as f64 * p.dt,
            state: x.clone(),
            input: input.clone(),
            status,
            solver_status: solve.result.status,
            max_violation: solve.result.max_violation,
            inner_iterations: solve.result.iterations.inner,
            stage_cost,
            min_distance: distance(&x),
            solve_time_s: solve_time,
        });
        if keep_solutions {
            solutions.push(solve.solution.to_record()?);
        }
        let w = sample_disturbance_scaled(seed, t as u64, p.sigma_w);
        x = rk4_step(&x, &input, &w, p.dt, p.v_h).to_vec();
        last = Some((solve.solution, solve.result.multipliers));
    }
    let final_distance = distance(&x);
    let limit = p.delta_safe - 1e-6;
    let violations =
        steps.iter().filter(|s| s.min_distance < limit).count() + usize::from(final_distance < limit);
    let fallbacks = steps.iter().filter(|s| s.status == StepStatus::Fallback).count();
    let mean_solve_time_s = steps.iter().map(|s| s.solve_time_s).sum::<f64>() / steps.len().max(1) as f64;
    Ok(RunRecord {
        controller: p.controller,
        seed,
        steps,
        final_state: x,
        final_distance,
        closed_loop_cost: cost,
        violations,
        fallbacks,
        mean_solve_time_s,
        solutions,
    })
}

/// Shifted previous solution adapted to the corridor; `None` when the
/// observed state cannot be located in the previous prediction.
fn warm_start(prev: &OcpSolution, x: &[f64], spec: &OcpSpec<CorridorModel>) -> Result<Option<Vec<f64>>> {
    let policy = TerminalPolicy::constant(NX, vec![0.0; NU]);
    let mut z = match shift_candidate(prev, x, spec, &policy) {
        Ok(z) => z,
        Err(Error::NoSide(_)) | Err(Error::DegenerateDirection(_)) | Err(Error::Domain(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if spec.branching > 0 {
        let layout = spec.layout()?;
        // The tangent cut of the shift lies on a bound; restart it centrally.
        let k = spec.branching;
        for parent in 0..layout.groups(k - 1) {
            let (a, _) = layout.cut(prev.z.as_slice(), k, parent);
            let a = a.to_vec();
            layout.set_cut(&mut z, k, parent, &a, 0.0);
        }
        if recenter_cuts(spec, &layout, &mut z, x).is_err() {
            return Ok(None);
        }
    }
    Ok(Some(z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub controller: Controller,
    pub mean_cost: f64,
    pub violations: usize,
    pub mean_solve_time_s: f64,
    pub fallbacks: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub schema: u32,
    pub base_seed: u64,
    pub n_runs: usize,
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
}

impl BatchSummary {
    pub fn row(&self, c: Controller) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.controller == c)
    }

    pub fn without_timing(&self) -> BatchSummary {
        let mut b = self.clone();
        for r in &mut b.rows {
            r.mean_solve_time_s = 0.0;
        }
        b.runs = b.runs.iter().map(RunRecord::without_timing).collect();
        b
    }

    /// `controller,mean_cost,violations,mean_solve_time_s`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["controller", "mean_cost", "violations", "mean_solve_time_s"])?;
        for r in &self.rows {
            out.write_record([
                r.controller.name().to_string(),
                format!("{}", r.mean_cost),
                r.violations.to_string(),
                format!("{}", r.mean_solve_time_s),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs every controller over seeds `base_seed..base_seed + n_runs`.
pub fn batch_experiment(p: &CaseParams, controllers: &[Controller], n_runs: usize, base_seed: u64) -> Result<BatchSummary> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    p.validate()?;
    let jobs: Vec<(Controller, u64)> =
        controllers.iter().flat_map(|&c| (0..n_runs as u64).map(move |i| (c, base_seed + i))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(c, seed)| closed_loop_run(&p.with_controller(c), seed))
        .collect::<Result<Vec<_>>>()?;
    let rows = controllers
        .iter()
        .map(|&c| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.controller == c).collect();
            let n = mine.len() as f64;
            SummaryRow {
                controller: c,
                mean_cost: mine.iter().map(|r| r.closed_loop_cost).sum::<f64>() / n,
                violations: mine.iter().map(|r| r.violations).sum(),
                mean_solve_time_s: mine.iter().map(|r| r.mean_solve_time_s).sum::<f64>() / n,
                fallbacks: mine.iter().map(|r| r.fallbacks).sum(),
                runs: mine.len(),
            }
        })
        .collect();
    Ok(BatchSummary { schema: 1, base_seed, n_runs, rows, runs })
}

/// Trajectory CSV: `time, r_x, r_y, r_theta, r_v, r_omega, h_x, h_y, u_r_a,
/// u_r_alpha, min_distance, status`, one row per step plus the final state.
pub fn write_trajectory_csv<W: std::io::Write>(run: &RunRecord, dt: f64, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAJECTORY_COLUMNS)?;
    let fmt = |v: f64| format!("{v}");
    for s in &run.steps {
        let mut row = vec![fmt(s.time)];
        row.extend(s.state.iter().map(|v| fmt(*v)));
        row.extend(s.input.iter().map(|v| fmt(*v)));
        row.push(fmt(s.min_distance));
        row.push(s.status.as_str().to_string());
        out.write_record(&row)?;
    }
    let mut row = vec![fmt(run.steps.len() as f64 * dt)];
    row.extend(run.final_state.iter().map(|v| fmt(*v)));
    row.extend([String::new(), String::new(), fmt(run.final_distance), "final".to_string()]);
    out.write_record(&row)?;
    out.flush()?;
    Ok(())
}

pub const TRAJECTORY_COLUMNS: [&str; 12] =
    ["time", "r_x", "r_y", "r_theta", "r_v", "r_omega", "h_x", "h_y", "u_r_a", "u_r_alpha", "min_distance", "status"];

/// Nominal trajectories of every scenario, `scenario, step, time, states...`.
pub fn write_nominal_csv<W: std::io::Write>(sol: &OcpSolution, dt: f64, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["scenario".to_string(), "step".to_string(), "time".to_string()];
    header.extend(TRAJECTORY_COLUMNS[1..8].iter().map(|s| s.to_string()));
    header.extend(["u_r_a", "u_r_alpha"].map(String::from));
    out.write_record(&header)?;
    let lay = &sol.layout;
    for s in 0..lay.scenarios() {
        for (k, nodes) in sol.tree.steps.iter().enumerate() {
            let node = &nodes[lay.group_of(s, k)];
            let mut row = vec![s.to_string(), k.to_string(), format!("{}", k as f64 * dt)];
            row.extend(node.state.iter().map(|v| format!("{v}")));
            match &node.input {
                Some(u) => row.extend(u.iter().map(|v| format!("{v}"))),
                None => row.extend([String::new(), String::new()]),
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Gain matrix of node `(k, g)` as rows, for reporting.
pub fn gain_rows(sol: &OcpSolution, k: usize, g: usize) -> Vec<Vec<f64>> {
    sol.tree.steps[k][g].gain.as_ref().map_or_else(|| Mat::<f64>::zeros(NU, NX).to_rows(), |m| m.to_rows())
}
