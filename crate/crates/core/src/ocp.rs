//! Scenario-tree tube OCP: layout of the decision vector, rollout, sequential
//! transcription into an [`NlpProblem`] and the shifted candidate used for
//! warm starts and recursive-feasibility checks.
//!
//! Scenarios are numbered `0..2^n_r`. At step `k` they are grouped into
//! `2^min(k, n_r)` nodes; scenario `s` belongs to group
//! `s >> (n_r - min(k, n_r))`. Inputs and gains live once per node, so
//! scenarios with a common history share storage. The cut applied at step
//! `k <= n_r` to the node `(k-1, p)` sends `H(a, b)` to child `2p` and
//! `H(-a, -b)` to child `2p + 1`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::derivatives::{Dual, Real, VectorFn};
use crate::ellipsoid::{clip_psd, cut_kernel, membership_excess, AlphaMap, Ellipsoid, EllipsoidRecord, SmoothingParams, SymPsdMatrix};
use crate::error::{Error, Result};
use crate::linalg::{dot, lift_vec, Mat};
use crate::nlp::{Derivatives, NlpProblem, SolveResult, SolveStatus, NLP_CHUNK};
use crate::tube::{
    linearize, propagate_shape, tighten_stage, tighten_terminal, DiscreteDynamics, GainMask, NonlinearityBound,
    PropagationConfig, ZeroBound,
};

/// Tolerance for locating the observed state in the first predicted set.
pub const SIDE_TOL: f64 = 1e-6;

/// Dynamics, constraints and costs of a tube OCP.
pub trait OcpModel: Sync {
    type Dynamics: VectorFn;
    /// Rows `h(x, u) <= 0` on the stacked vector `[x, u]`.
    type Stage: VectorFn;
    /// Rows `h_N(x) <= 0`.
    type Terminal: VectorFn;

    fn dynamics(&self) -> &DiscreteDynamics<Self::Dynamics>;
    fn stage_constraints(&self) -> &Self::Stage;
    fn terminal_constraints(&self) -> &Self::Terminal;
    fn stage_cost<S: Real>(&self, k: usize, x: &[S], u: &[S]) -> S;
    fn terminal_cost<S: Real>(&self, x: &[S]) -> S;
}

#[derive(Clone, Debug, PartialEq)]
pub enum GainMode {
    Zero,
    Optimized(GainMask),
}

/// Positive weights `[scenario][step]` for steps `0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioWeights {
    values: Vec<Vec<f64>>,
}

impl ScenarioWeights {
    pub fn uniform(scenarios: usize, horizon: usize) -> Self {
        ScenarioWeights { values: vec![vec![1.0; horizon + 1]; scenarios] }
    }

    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().flatten().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidSpec("weights must be positive".into()));
        }
        Ok(ScenarioWeights { values })
    }

    pub fn get(&self, s: usize, k: usize) -> f64 {
        self.values[s][k]
    }
}

pub struct OcpSpec<M, B = ZeroBound> {
    pub model: M,
    pub horizon: usize,
    /// Branching depth `n_r`.
    pub branching: usize,
    pub sigma: f64,
    pub eps: f64,
    /// `None` means all weights equal 1.
    pub weights: Option<ScenarioWeights>,
    pub gain_mode: GainMode,
    pub bound: B,
    pub smoothing: SmoothingParams,
    /// Smoothed clamp of the cut depth; `false` uses the exact clamp.
    pub use_smoothing: bool,
    pub propagation: PropagationConfig,
    pub gain_regularization: f64,
    /// Adds `‖a‖ = 1` for every cut.
    pub normalize_cuts: bool,
    /// Keeps cuts inside `|alpha| <= 1 - cut_margin`; 0 allows tangent cuts.
    pub cut_margin: f64,
}

impl<M: OcpModel> OcpSpec<M, ZeroBound> {
    pub fn new(model: M, horizon: usize, branching: usize, sigma: f64) -> Self {
        OcpSpec {
            model,
            horizon,
            branching,
            sigma,
            eps: 1e-6,
            weights: None,
            gain_mode: GainMode::Zero,
            bound: ZeroBound,
            smoothing: SmoothingParams::default(),
            use_smoothing: true,
            propagation: PropagationConfig::default(),
            gain_regularization: 1e-3,
            normalize_cuts: true,
            cut_margin: 0.0,
        }
    }
}

impl<M: OcpModel, B: NonlinearityBound> OcpSpec<M, B> {
    pub fn with_bound<B2: NonlinearityBound>(self, bound: B2) -> OcpSpec<M, B2> {
        OcpSpec {
            model: self.model,
            horizon: self.horizon,
            branching: self.branching,
            sigma: self.sigma,
            eps: self.eps,
            weights: self.weights,
            gain_mode: self.gain_mode,
            bound,
            smoothing: self.smoothing,
            use_smoothing: self.use_smoothing,
            propagation: self.propagation,
            gain_regularization: self.gain_regularization,
            normalize_cuts: self.normalize_cuts,
            cut_margin: self.cut_margin,
        }
    }

    pub fn nx(&self) -> usize {
        self.model.dynamics().nx()
    }

    pub fn nu(&self) -> usize {
        self.model.dynamics().nu()
    }

    pub fn scenarios(&self) -> usize {
        1 << self.branching
    }

    pub fn weight(&self, s: usize, k: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w.get(s, k))
    }

    pub fn alpha_map(&self) -> AlphaMap {
        AlphaMap::new(self.smoothing, self.use_smoothing)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.branching >= self.horizon {
            return bad(format!("branching depth {} must be below the horizon {}", self.branching, self.horizon));
        }
        if self.branching > 16 {
            return bad("branching depth above 16 is not supported".into());
        }
        if !(self.sigma >= 0.0) || !(self.eps > 0.0) || !(self.gain_regularization >= 0.0) {
            return bad("sigma and gain_regularization must be >= 0 and eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.cut_margin) {
            return bad("cut_margin must lie in [0, 1)".into());
        }
        let (nx, nu) = (self.nx(), self.nu());
        if self.branching > 0 && nx < 2 {
            return bad("cuts need a state dimension of at least 2".into());
        }
        let m = &self.model;
        if m.stage_constraints().input_dim() != nx + nu || m.terminal_constraints().input_dim() != nx {
            return bad("constraint functions have the wrong input dimension".into());
        }
        if let GainMode::Optimized(mask) = &self.gain_mode {
            if mask.rows() != nu || mask.cols() != nx {
                return bad(format!("gain mask must be {nu}x{nx}"));
            }
        }
        if let Some(w) = &self.weights {
            if w.values.len() != self.scenarios() || w.values.iter().any(|r| r.len() != self.horizon + 1) {
                return bad("weights must be scenarios x (horizon + 1)".into());
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<DecisionLayout> {
        self.validate()?;
        let entries = match &self.gain_mode {
            GainMode::Zero => Vec::new(),
            GainMode::Optimized(mask) => mask.entries(),
        };
        Ok(DecisionLayout::new(self.horizon, self.branching, self.nx(), self.nu(), entries))
    }
}

/// Offsets of the free variables in the flat decision vector: all inputs
/// (step-major, then group), then masked gains for steps `>= 1`, then cuts
/// (normal followed by offset).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    horizon: usize,
    branching: usize,
    nx: usize,
    nu: usize,
    gain_entries: Vec<(usize, usize)>,
    inputs: Vec<Vec<usize>>,
    gains: Vec<Vec<Option<usize>>>,
    cuts: Vec<Vec<usize>>,
    dim: usize,
}

impl DecisionLayout {
    pub fn new(horizon: usize, branching: usize, nx: usize, nu: usize, gain_entries: Vec<(usize, usize)>) -> Self {
        let groups = |k: usize| 1usize << k.min(branching);
        let mut next = 0;
        let mut take = |len: usize| {
            let o = next;
            next += len;
            o
        };
        let mut inputs = Vec::with_capacity(horizon);
        for k in 0..horizon {
            inputs.push((0..groups(k)).map(|_| take(nu)).collect());
        }
        let mut gains = Vec::with_capacity(horizon);
        for k in 0..horizon {
            gains.push(
                (0..groups(k))
                    .map(|_| {
                        (k >= 1 && !gain_entries.is_empty())
                            .then(|| take(gain_entries.len()))
                    })
                    .collect(),
            );
        }
        let mut cuts = Vec::with_capacity(branching);
        for k in 1..=branching {
            cuts.push((0..groups(k - 1)).map(|_| take(nx + 1)).collect());
        }
        let dim = take(0);
        DecisionLayout { horizon, branching, nx, nu, gain_entries, inputs, gains, cuts, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn branching(&self) -> usize {
        self.branching
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nu(&self) -> usize {
        self.nu
    }
    pub fn scenarios(&self) -> usize {
        1 << self.branching
    }
    pub fn gain_entries(&self) -> &[(usize, usize)] {
        &self.gain_entries
    }

    pub fn groups(&self, k: usize) -> usize {
        1 << k.min(self.branching)
    }

    pub fn group_of(&self, s: usize, k: usize) -> usize {
        s >> (self.branching - k.min(self.branching))
    }

    /// Scenarios passing through node `(k, g)`.
    pub fn scenarios_of(&self, k: usize, g: usize) -> Range<usize> {
        let shift = self.branching - k.min(self.branching);
        (g << shift)..((g + 1) << shift)
    }

    pub fn num_cuts(&self) -> usize {
        (1 << self.branching) - 1
    }

    /// Position of the cut at step `k` below parent `p` in cut order.
    pub fn cut_index(&self, k: usize, p: usize) -> usize {
        (1 << (k - 1)) - 1 + p
    }

    pub fn input_range(&self, k: usize, g: usize) -> Range<usize> {
        let o = self.inputs[k][g];
        o..o + self.nu
    }

    /// Storage of `ū_k` seen from scenario `s`.
    pub fn scenario_input_range(&self, s: usize, k: usize) -> Range<usize> {
        self.input_range(k, self.group_of(s, k))
    }

    pub fn gain_range(&self, k: usize, g: usize) -> Option<Range<usize>> {
        self.gains[k][g].map(|o| o..o + self.gain_entries.len())
    }

    pub fn cut_range(&self, k: usize, p: usize) -> Range<usize> {
        let o = self.cuts[k - 1][p];
        o..o + self.nx + 1
    }

    pub fn gain_ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.gains.iter().flatten().flatten().map(move |&o| o..o + self.gain_entries.len())
    }

    pub fn input<'z, T>(&self, z: &'z [T], k: usize, g: usize) -> &'z [T] {
        &z[self.input_range(k, g)]
    }

    pub fn set_input(&self, z: &mut [f64], k: usize, g: usize, u: &[f64]) {
        z[self.input_range(k, g)].copy_from_slice(u);
    }

    /// Gain of node `(k, g)`; zero where the layout stores none.
    pub fn gain_matrix<S: Real>(&self, z: &[S], k: usize, g: usize) -> Mat<S> {
        let mut m = Mat::zeros(self.nu, self.nx);
        if let Some(r) = self.gain_range(k, g) {
            for (&(i, j), v) in self.gain_entries.iter().zip(&z[r]) {
                m[(i, j)] = *v;
            }
        }
        m
    }

    /// Writes the masked entries of `gain`; entries it cannot store must be zero.
    pub fn set_gain(&self, z: &mut [f64], k: usize, g: usize, gain: &Mat<f64>) -> Result<()> {
        let range = self.gain_range(k, g);
        for i in 0..self.nu {
            for j in 0..self.nx {
                let stored = range.is_some() && self.gain_entries.contains(&(i, j));
                if !stored && gain[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(format!("gain entry ({i}, {j}) at step {k} cannot be stored")));
                }
            }
        }
        if let Some(r) = range {
            for (slot, &(i, j)) in r.zip(&self.gain_entries) {
                z[slot] = gain[(i, j)];
            }
        }
        Ok(())
    }

    pub fn cut<'z, T: Copy>(&self, z: &'z [T], k: usize, p: usize) -> (&'z [T], T) {
        let r = self.cut_range(k, p);
        (&z[r.start..r.end - 1], z[r.end - 1])
    }

    pub fn set_cut(&self, z: &mut [f64], k: usize, p: usize, normal: &[f64], offset: f64) {
        let r = self.cut_range(k, p);
        z[r.start..r.end - 1].copy_from_slice(normal);
        z[r.end - 1] = offset;
    }
}

/// Node of the skeleton returned by [`build_tree`].
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInfo {
    pub step: usize,
    pub group: usize,
    pub scenarios: Range<usize>,
    /// Sum of the scenario weights passing through the node.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeSkeleton {
    pub steps: Vec<Vec<NodeInfo>>,
    /// `(step, parent)` of every cut in layout order.
    pub cuts: Vec<(usize, usize)>,
}

pub fn build_tree<M: OcpModel, B: NonlinearityBound>(spec: &OcpSpec<M, B>) -> Result<(TreeSkeleton, DecisionLayout)> {
    let layout = spec.layout()?;
    let steps = (0..=spec.horizon)
        .map(|k| {
            (0..layout.groups(k))
                .map(|g| {
                    let scenarios = layout.scenarios_of(k, g);
                    let weight = scenarios.clone().map(|s| spec.weight(s, k)).sum();
                    NodeInfo { step: k, group: g, scenarios, weight }
                })
                .collect()
        })
        .collect();
    let cuts = (1..=spec.branching).flat_map(|k| (0..layout.groups(k - 1)).map(move |p| (k, p))).collect();
    Ok((TreeSkeleton { steps, cuts }, layout))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode<S> {
    pub step: usize,
    pub group: usize,
    pub state: Vec<S>,
    pub shape: Mat<S>,
    /// Absent at the terminal step.
    pub input: Option<Vec<S>>,
    pub gain: Option<Mat<S>>,
}

/// A partition of the predicted set `E(P̃, x̃)` by `H(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CutNode<S> {
    pub step: usize,
    pub parent: usize,
    pub state: Vec<S>,
    pub shape: Mat<S>,
    pub normal: Vec<S>,
    pub offset: S,
    /// Depth of `H(a, b)`; the sibling sees `-alpha`.
    pub alpha: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree<S> {
    pub steps: Vec<Vec<TreeNode<S>>>,
    pub cuts: Vec<CutNode<S>>,
}

fn advance<S: Real, M: OcpModel, B: NonlinearityBound>(
    spec: &OcpSpec<M, B>,
    x: &[S],
    p: &Mat<S>,
    u: &[S],
    k: &Mat<S>,
) -> Result<(Vec<S>, Mat<S>)> {
    let lin = linearize(spec.model.dynamics(), x, u)?;
    let p_next = propagate_shape(p, &lin, k, spec.sigma, &spec.propagation, &spec.bound, x, u);
    Ok((lin.next, p_next))
}

fn split<S: Real, M: OcpModel, B: NonlinearityBound>(
    spec: &OcpSpec<M, B>,
    x: &[S],
    p: &Mat<S>,
    a: &[S],
    b: S,
) -> Result<((Vec<S>, Mat<S>), (Vec<S>, Mat<S>), S)> {
    let map = spec.alpha_map();
    let plus = cut_kernel(p, x, a, b, &map)?;
    let neg: Vec<S> = a.iter().map(|v| -*v).collect();
    let minus = cut_kernel(p, x, &neg, -b, &map)?;
    Ok(((plus.center, plus.shape), (minus.center, minus.shape), plus.alpha))
}

/// Forward simulation of nominal states and shape matrices for every node.
pub fn rollout<S: Real, M: OcpModel, B: NonlinearityBound>(
    spec: &OcpSpec<M, B>,
    layout: &DecisionLayout,
    z: &[S],
    x_init: &[f64],
) -> Result<ScenarioTree<S>> {
    rollout_with(spec, layout, z, x_init, None)
}

fn all_constant<S: Real>(v: &[S]) -> bool {
    v.iter().all(Real::is_constant)
}

fn lift_mat<S: Real>(m: &Mat<f64>) -> Mat<S> {
    Mat::from_fn(m.rows(), m.cols(), |i, j| S::cst(m[(i, j)]))
}

fn lift_node<S: Real>(x: &[f64], p: &Mat<f64>) -> (Vec<S>, Mat<S>) {
    (lift_vec(x), lift_mat(p))
}

/// Rollout that copies from `cache` (the same tree at `f64`) every node
/// whose own inputs carry no tangent.
fn rollout_with<S: Real, M: OcpModel, B: NonlinearityBound>(
    spec: &OcpSpec<M, B>,
    layout: &DecisionLayout,
    z: &[S],
    x_init: &[f64],
    cache: Option<&ScenarioTree<f64>>,
) -> Result<ScenarioTree<S>> {
    let nx = spec.nx();
    if z.len() != layout.dim() || x_init.len() != nx {
        return Err(Error::DimensionMismatch("decision vector or initial state has the wrong length".into()));
    }
    let mut steps: Vec<Vec<TreeNode<S>>> = Vec::with_capacity(spec.horizon + 1);
    let mut cuts = Vec::with_capacity(layout.num_cuts());
    let mut frontier = vec![(lift_vec::<S>(x_init), Mat::zeros(nx, nx))];
    for k in 0..spec.horizon {
        let mut nodes = Vec::with_capacity(frontier.len());
        let mut next = Vec::with_capacity(layout.groups(k + 1));
        for (g, (x, p)) in frontier.into_iter().enumerate() {
            let u = layout.input(z, k, g).to_vec();
            let gain = layout.gain_matrix(z, k, g);
            let cut = (k < spec.branching).then(|| layout.cut(z, k + 1, g));
            let frozen = cache.filter(|_| {
                all_constant(&x)
                    && all_constant(p.as_slice())
                    && all_constant(&u)
                    && all_constant(gain.as_slice())
                    && cut.is_none_or(|(a, b)| all_constant(a) && b.is_constant())
            });
            if let Some(c) = frozen {
                let child = &c.steps[k + 1];
                if let Some((a, b)) = cut {
                    let cn = &c.cuts[layout.cut_index(k + 1, g)];
                    let (cx, cp) = lift_node(&cn.state, &cn.shape);
                    cuts.push(CutNode { step: k + 1, parent: g, state: cx, shape: cp, normal: a.to_vec(), offset: b, alpha: S::cst(cn.alpha) });
                    next.push(lift_node(&child[2 * g].state, &child[2 * g].shape));
                    next.push(lift_node(&child[2 * g + 1].state, &child[2 * g + 1].shape));
                } else {
                    next.push(lift_node(&child[g].state, &child[g].shape));
                }
            } else {
                let (x1, p1) = advance(spec, &x, &p, &u, &gain)?;
                if let Some((a, b)) = cut {
                    let (plus, minus, alpha) = split(spec, &x1, &p1, a, b)?;
                    cuts.push(CutNode { step: k + 1, parent: g, state: x1, shape: p1, normal: a.to_vec(), offset: b, alpha });
                    next.push(plus);
                    next.push(minus);
                } else {
                    next.push((x1, p1));
                }
            }
            nodes.push(TreeNode { step: k, group: g, state: x, shape: p, input: Some(u), gain: Some(gain) });
        }
        steps.push(nodes);
        frontier = next;
    }
    let k = spec.horizon;
    steps.push(
        frontier
            .into_iter()
            .enumerate()
            .map(|(g, (state, shape))| TreeNode { step: k, group: g, state, shape, input: None, gain: None })
            .collect(),
    );
    Ok(ScenarioTree { steps, cuts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualKind {
    Stage { step: usize, group: usize, row: usize },
    Terminal { group: usize, row: usize },
    Placement { cut: usize, upper: bool },
    Normalization { cut: usize, upper: bool },
}

/// Sequentially transcribed OCP at a fixed initial state.
pub struct TubeOcpNlp<'a, M, B> {
    spec: &'a OcpSpec<M, B>,
    layout: DecisionLayout,
    skeleton: TreeSkeleton,
    x_init: Vec<f64>,
    kinds: Vec<ResidualKind>,
}

pub fn transcribe<'a, M: OcpModel, B: NonlinearityBound>(spec: &'a OcpSpec<M, B>, x_init: &[f64]) -> Result<TubeOcpNlp<'a, M, B>> {
    let (skeleton, layout) = build_tree(spec)?;
    if x_init.len() != spec.nx() {
        return Err(Error::DimensionMismatch(format!("initial state has length {}, expected {}", x_init.len(), spec.nx())));
    }
    let n_stage = spec.model.stage_constraints().output_dim();
    let n_term = spec.model.terminal_constraints().output_dim();
    let mut kinds = Vec::new();
    for k in 0..spec.horizon {
        for g in 0..layout.groups(k) {
            kinds.extend((0..n_stage).map(|row| ResidualKind::Stage { step: k, group: g, row }));
        }
    }
    for g in 0..layout.groups(spec.horizon) {
        kinds.extend((0..n_term).map(|row| ResidualKind::Terminal { group: g, row }));
    }
    for cut in 0..layout.num_cuts() {
        kinds.push(ResidualKind::Placement { cut, upper: true });
        kinds.push(ResidualKind::Placement { cut, upper: false });
    }
    if spec.normalize_cuts {
        for cut in 0..layout.num_cuts() {
            kinds.push(ResidualKind::Normalization { cut, upper: true });
            kinds.push(ResidualKind::Normalization { cut, upper: false });
        }
    }
    Ok(TubeOcpNlp { spec, layout, skeleton, x_init: x_init.to_vec(), kinds })
}

impl<'a, M: OcpModel, B: NonlinearityBound> TubeOcpNlp<'a, M, B> {
    pub fn spec(&self) -> &OcpSpec<M, B> {
        self.spec
    }
    pub fn layout(&self) -> &DecisionLayout {
        &self.layout
    }
    pub fn skeleton(&self) -> &TreeSkeleton {
        &self.skeleton
    }
    pub fn x_init(&self) -> &[f64] {
        &self.x_init
    }
    pub fn residual_kinds(&self) -> &[ResidualKind] {
        &self.kinds
    }

    /// Objective and residuals of an already rolled-out tree.
    pub fn assess<S: Real>(&self, tree: &ScenarioTree<S>, z: &[S]) -> Result<(S, Vec<S>)> {
        self.assess_with(tree, z, None)
    }

    /// Weighted cost and tightened rows of one node.
    fn node_terms<S: Real>(&self, node: &TreeNode<S>) -> Result<(S, Vec<S>)> {
        let spec = self.spec;
        let model = &spec.model;
        let weight = self.skeleton.steps[node.step][node.group].weight;
        match (&node.input, &node.gain) {
            (Some(u), Some(gain)) => Ok((
                model.stage_cost(node.step, &node.state, u) * weight,
                tighten_stage(model.stage_constraints(), &node.state, u, &node.shape, gain, &spec.bound, spec.eps)?,
            )),
            _ => Ok((
                model.terminal_cost(&node.state) * weight,
                tighten_terminal(model.terminal_constraints(), &node.state, &node.shape, &spec.bound, spec.eps)?,
            )),
        }
    }

    fn assess_with<S: Real>(&self, tree: &ScenarioTree<S>, z: &[S], cache: Option<&NodeCache>) -> Result<(S, Vec<S>)> {
        let spec = self.spec;
        let mut cost = S::zero();
        let mut res = Vec::with_capacity(self.kinds.len());
        for (k, nodes) in tree.steps.iter().enumerate() {
            for node in nodes {
                let frozen = all_constant(&node.state)
                    && all_constant(node.shape.as_slice())
                    && node.input.as_ref().is_none_or(|u| all_constant(u))
                    && node.gain.as_ref().is_none_or(|g| all_constant(g.as_slice()));
                match cache {
                    Some(c) if frozen => {
                        let (f, r) = &c.terms[k][node.group];
                        cost += S::cst(*f);
                        res.extend(r.iter().map(|v| S::cst(*v)));
                    }
                    _ => {
                        let (f, r) = self.node_terms(node)?;
                        cost += f;
                        res.extend(r);
                    }
                }
            }
        }
        for cut in &tree.cuts {
            let reach = 1.0 - spec.cut_margin;
            res.push(cut.alpha - reach);
            res.push(-cut.alpha - reach);
        }
        if spec.normalize_cuts {
            for cut in &tree.cuts {
                let sq = dot(&cut.normal, &cut.normal);
                res.push(sq - 1.0);
                res.push(-sq + 1.0);
            }
        }
        if spec.gain_regularization > 0.0 {
            let mut reg = S::zero();
            for r in self.layout.gain_ranges() {
                reg += dot(&z[r.clone()], &z[r]);
            }
            cost += reg * spec.gain_regularization;
        }
        Ok((cost, res))
    }
}

/// Values of a rollout at `f64`, reused by the derivative passes.
struct NodeCache {
    tree: ScenarioTree<f64>,
    /// `[step][group]` weighted cost and tightened rows.
    terms: Vec<Vec<(f64, Vec<f64>)>>,
}

impl<'a, M: OcpModel, B: NonlinearityBound> TubeOcpNlp<'a, M, B> {
    /// Decision indices ordered by the first step they influence.
    fn influence_order(&self) -> Vec<usize> {
        let lay = &self.layout;
        let mut order = Vec::with_capacity(lay.dim());
        for k in 0..self.spec.horizon {
            for g in 0..lay.groups(k) {
                order.extend(lay.input_range(k, g));
                if let Some(r) = lay.gain_range(k, g) {
                    order.extend(r);
                }
            }
            if k < self.spec.branching {
                for g in 0..lay.groups(k) {
                    order.extend(lay.cut_range(k + 1, g));
                }
            }
        }
        order
    }

    /// Objective, residuals and first derivatives. Each forward pass seeds
    /// `NLP_CHUNK` decision entries and skips the nodes they cannot reach.
    pub fn derivatives(&self, z: &[f64]) -> Result<Derivatives> {
        type D = Dual<f64, NLP_CHUNK>;
        let tree = rollout(self.spec, &self.layout, z, &self.x_init)?;
        let terms = tree
            .steps
            .iter()
            .map(|nodes| nodes.iter().map(|n| self.node_terms(n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let cache = NodeCache { tree, terms };
        let (objective, residuals) = self.assess_with(&cache.tree, z, None)?;
        let (n, m) = (z.len(), residuals.len());
        let mut gradient = vec![0.0; n];
        let mut jacobian = Mat::zeros(m, n);
        let order = self.influence_order();
        debug_assert_eq!(order.len(), n);
        let mut zd: Vec<D> = z.iter().map(|&v| D::constant(v)).collect();
        for chunk in order.chunks(NLP_CHUNK) {
            for (slot, &j) in chunk.iter().enumerate() {
                zd[j] = D::variable(z[j], slot);
            }
            let t = rollout_with(self.spec, &self.layout, &zd, &self.x_init, Some(&cache.tree))?;
            let (f, g) = self.assess_with(&t, &zd, Some(&cache))?;
            for (slot, &j) in chunk.iter().enumerate() {
                gradient[j] = f.eps[slot];
                for (i, gi) in g.iter().enumerate() {
                    jacobian[(i, j)] = gi.eps[slot];
                }
                zd[j] = D::constant(z[j]);
            }
        }
        Ok(Derivatives { objective, residuals, gradient, jacobian })
    }
}

impl<'a, M: OcpModel, B: NonlinearityBound> NlpProblem for TubeOcpNlp<'a, M, B> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn num_residuals(&self) -> usize {
        self.kinds.len()
    }

    fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)> {
        let tree = rollout(self.spec, &self.layout, z, &self.x_init)?;
        self.assess(&tree, z)
    }

    fn derivatives(&self, z: &[f64]) -> Option<Result<Derivatives>> {
        Some(TubeOcpNlp::derivatives(self, z))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub status: SolveStatus,
    pub kkt_stationarity: f64,
    pub max_violation: f64,
    pub complementarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_time: f64,
}

impl From<&SolveResult> for SolveDiagnostics {
    fn from(r: &SolveResult) -> Self {
        SolveDiagnostics {
            status: r.status,
            kkt_stationarity: r.kkt_stationarity,
            max_violation: r.max_violation,
            complementarity: r.complementarity,
            outer_iterations: r.iterations.outer,
            inner_iterations: r.iterations.inner,
            wall_time: r.wall_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution {
    pub layout: DecisionLayout,
    pub x_init: Vec<f64>,
    pub z: Vec<f64>,
    pub tree: ScenarioTree<f64>,
    /// `ū_0`, shared by all scenarios.
    pub first_input: Vec<f64>,
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub residual_kinds: Vec<ResidualKind>,
    pub diagnostics: Option<SolveDiagnostics>,
}

pub fn extract_solution<M: OcpModel, B: NonlinearityBound>(
    nlp: &TubeOcpNlp<'_, M, B>,
    z: &[f64],
    result: Option<&SolveResult>,
) -> Result<OcpSolution> {
    let tree = rollout(nlp.spec, &nlp.layout, z, &nlp.x_init)?;
    let (objective, residuals) = nlp.assess(&tree, z)?;
    Ok(OcpSolution {
        first_input: nlp.layout.input(z, 0, 0).to_vec(),
        layout: nlp.layout.clone(),
        x_init: nlp.x_init.clone(),
        z: z.to_vec(),
        tree,
        objective,
        residuals,
        residual_kinds: nlp.kinds.clone(),
        diagnostics: result.map(SolveDiagnostics::from),
    })
}

impl OcpSolution {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(f64::NEG_INFINITY, |m, &r| m.max(r))
    }

    /// Nominal states of scenario `s` for steps `0..=N`.
    pub fn scenario_states(&self, s: usize) -> Vec<Vec<f64>> {
        self.tree.steps.iter().enumerate().map(|(k, nodes)| nodes[self.layout.group_of(s, k)].state.clone()).collect()
    }

    pub fn node_ellipsoid(&self, k: usize, g: usize) -> Result<Ellipsoid> {
        let node = &self.tree.steps[k][g];
        ellipsoid_of(&node.state, &node.shape)
    }

    pub fn to_record(&self) -> Result<OcpSolutionRecord> {
        let mut nodes = Vec::new();
        for (k, step) in self.tree.steps.iter().enumerate() {
            for node in step {
                nodes.push(NodeRecord {
                    step: k,
                    group: node.group,
                    scenarios: self.layout.scenarios_of(k, node.group).collect(),
                    ellipsoid: ellipsoid_of(&node.state, &node.shape)?.into(),
                    input: node.input.clone(),
                    gain: node.gain.as_ref().map(|g| g.to_rows()),
                });
            }
        }
        let cuts = self
            .tree
            .cuts
            .iter()
            .map(|c| {
                Ok(CutRecord {
                    step: c.step,
                    parent: c.parent,
                    normal: c.normal.clone(),
                    offset: c.offset,
                    alpha: c.alpha,
                    predicted: ellipsoid_of(&c.state, &c.shape)?.into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OcpSolutionRecord {
            schema: 1,
            horizon: self.layout.horizon(),
            branching: self.layout.branching(),
            scenarios: self.layout.scenarios(),
            x_init: self.x_init.clone(),
            objective: self.objective,
            first_input: self.first_input.clone(),
            max_residual: self.max_residual(),
            diagnostics: self.diagnostics.clone(),
            nodes,
            cuts,
        })
    }
}

fn ellipsoid_of(center: &[f64], shape: &Mat<f64>) -> Result<Ellipsoid> {
    Ellipsoid::new(SymPsdMatrix::new(clip_psd(shape.symmetrize()))?, center.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub step: usize,
    pub group: usize,
    pub scenarios: Vec<usize>,
    pub ellipsoid: EllipsoidRecord,
    pub input: Option<Vec<f64>>,
    pub gain: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutRecord {
    pub step: usize,
    pub parent: usize,
    pub normal: Vec<f64>,
    pub offset: f64,
    pub alpha: f64,
    /// The set that is partitioned.
    pub predicted: EllipsoidRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSolutionRecord {
    pub schema: u32,
    pub horizon: usize,
    pub branching: usize,
    pub scenarios: usize,
    pub x_init: Vec<f64>,
    pub objective: f64,
    pub first_input: Vec<f64>,
    pub max_residual: f64,
    pub diagnostics: Option<SolveDiagnostics>,
    pub nodes: Vec<NodeRecord>,
    pub cuts: Vec<CutRecord>,
}

/// Terminal feedback `u = K_f x + ū_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalPolicy {
    pub gain: Mat<f64>,
    pub offset: Vec<f64>,
}

impl TerminalPolicy {
    pub fn constant(nx: usize, u: Vec<f64>) -> Self {
        TerminalPolicy { gain: Mat::zeros(u.len(), nx), offset: u }
    }

    pub fn input(&self, x: &[f64]) -> Vec<f64> {
        self.gain.mat_vec(x).iter().zip(&self.offset).map(|(a, b)| a + b).collect()
    }
}

/// Child of the first cut whose halfspace holds `x` (ties go to child 0).
pub fn select_side(prev: &OcpSolution, x: &[f64]) -> Result<usize> {
    let (center, shape) = match prev.tree.cuts.first() {
        Some(c) => (&c.state, &c.shape),
        None => {
            let n = &prev.tree.steps[1][0];
            (&n.state, &n.shape)
        }
    };
    let excess = membership_excess(&ellipsoid_of(center, shape)?, x);
    if excess > SIDE_TOL {
        return Err(Error::NoSide(excess));
    }
    Ok(match prev.tree.cuts.first() {
        Some(c) if dot(&c.normal, x) > c.offset => 1,
        _ => 0,
    })
}

/// Decision vector for the next sampling instant built from `prev`.
///
/// Every node inherits the input and gain of its predecessor in the chosen
/// branch, with the input moved along the ancillary law to the node's own
/// nominal state. The last step uses `policy`. Cuts are shifted by one step;
/// the one that has no predecessor is placed tangent, `α = 1`, along the
/// principal axis of the predicted set that gives the smallest worst residual.
pub fn shift_candidate<M: OcpModel, B: NonlinearityBound>(
    prev: &OcpSolution,
    observed_x: &[f64],
    spec: &OcpSpec<M, B>,
    policy: &TerminalPolicy,
) -> Result<Vec<f64>> {
    let layout = spec.layout()?;
    if layout != prev.layout {
        return Err(Error::InvalidSpec("previous solution was built for a different layout".into()));
    }
    if policy.gain.rows() != spec.nu() || policy.gain.cols() != spec.nx() || policy.offset.len() != spec.nu() {
        return Err(Error::DimensionMismatch("terminal policy has the wrong shape".into()));
    }
    let side = select_side(prev, observed_x)?;
    if spec.branching == 0 {
        return build_shift(prev, observed_x, spec, policy, side, &[]);
    }
    let nlp = transcribe(spec, observed_x)?;
    let parents = layout.groups(spec.branching - 1);
    let mut choice = vec![0usize; parents];
    let mut best_z = None;
    for p in 0..parents {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for c in 0..2 * spec.nx() {
            choice[p] = c;
            let Ok(z) = build_shift(prev, observed_x, spec, policy, side, &choice) else { continue };
            let Ok((_, g)) = nlp.evaluate::<f64>(&z) else { continue };
            let worst = g.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if best.as_ref().is_none_or(|b| worst < b.0) {
                best = Some((worst, c, z));
            }
        }
        let (_, c, z) = best.ok_or(Error::DegenerateDirection(0.0))?;
        choice[p] = c;
        best_z = Some(z);
    }
    Ok(best_z.expect("at least one parent"))
}

fn build_shift<M: OcpModel, B: NonlinearityBound>(
    prev: &OcpSolution,
    observed_x: &[f64],
    spec: &OcpSpec<M, B>,
    policy: &TerminalPolicy,
    side: usize,
    tangent: &[usize],
) -> Result<Vec<f64>> {
    let lay = &prev.layout;
    let (n, nr, nx) = (spec.horizon, spec.branching, spec.nx());
    let old_group = |k: usize, g: usize| -> usize {
        if nr == 0 {
            0
        } else if k < nr {
            (side << k) + g
        } else {
            (side << (nr - 1)) + (g >> 1)
        }
    };
    let mut z = vec![0.0; lay.dim()];
    let mut frontier = vec![(observed_x.to_vec(), Mat::zeros(nx, nx))];
    for k in 0..n {
        let mut next = Vec::with_capacity(lay.groups(k + 1));
        for (g, (x, p)) in frontier.iter().enumerate() {
            let (u, gain) = if k + 1 < n {
                let old = &prev.tree.steps[k + 1][old_group(k, g)];
                let (uo, ko) = (old.input.as_ref().expect("input"), old.gain.as_ref().expect("gain"));
                let dx: Vec<f64> = x.iter().zip(&old.state).map(|(a, b)| a - b).collect();
                let u: Vec<f64> = uo.iter().zip(ko.mat_vec(&dx)).map(|(a, b)| a + b).collect();
                (u, ko.clone())
            } else {
                (policy.input(x), policy.gain.clone())
            };
            lay.set_input(&mut z, k, g, &u);
            if lay.gain_range(k, g).is_some() {
                lay.set_gain(&mut z, k, g, &gain)?;
            }
            let used = lay.gain_matrix(&z, k, g);
            let (x1, p1) = advance(spec, x, p, &u, &used)?;
            if k < nr {
                let (a, b) = if k + 1 < nr {
                    let old = &prev.tree.cuts[lay.cut_index(k + 2, (side << k) + g)];
                    (old.normal.clone(), old.offset)
                } else {
                    tangent_cut(&x1, &p1, tangent[g])?
                };
                lay.set_cut(&mut z, k + 1, g, &a, b);
                let (plus, minus, _) = split(spec, &x1, &p1, &a, b)?;
                next.push(plus);
                next.push(minus);
            } else {
                next.push((x1, p1));
            }
        }
        frontier = next;
    }
    Ok(z)
}

/// Unit normal along principal axis `c / 2` (sign from `c % 2`) with `α = 1`.
fn tangent_cut(x: &[f64], p: &Mat<f64>, c: usize) -> Result<(Vec<f64>, f64)> {
    let (ev, vecs) = p.sym_eigen();
    let mut order: Vec<usize> = (0..ev.len()).collect();
    order.sort_by(|&i, &j| ev[j].total_cmp(&ev[i]).then(i.cmp(&j)));
    let idx = *order.get(c / 2).ok_or_else(|| Error::InvalidArgument("no such axis".into()))?;
    let top = ev[order[0]].max(0.0);
    if !(ev[idx] > 1e-12 * top.max(1e-300)) {
        return Err(Error::DegenerateDirection(ev[idx]));
    }
    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
    let a: Vec<f64> = (0..x.len()).map(|i| sign * vecs[(i, idx)]).collect();
    let b = dot(&a, x) - p.quad_form(&a).sqrt();
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tube::GainMask;

    /// Double-integrator-like affine system in the plane.
    struct Affine {
        dynamics: DiscreteDynamics<AffineMap>,
        stage: Box2,
        terminal: Box2,
    }

    struct AffineMap;
    impl VectorFn for AffineMap {
        fn input_dim(&self) -> usize {
            6
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn eval<S: Real>(&self, z: &[S]) -> Result<Vec<S>> {
            Ok(vec![z[0] + z[1] * 0.5 + z[2] + z[4], z[1] * 0.9 + z[3] + z[5]])
        }
    }

    /// `|x_i| <= 3` on the leading two coordinates.
    struct Box2(usize);
    impl VectorFn for Box2 {
        fn input_dim(&self) -> usize {
            self.0
        }
        fn output_dim(&self) -> usize {
            4
        }
        fn eval<S: Real>(&self, z: &[S]) -> Result<Vec<S>> {
            Ok(vec![z[0] - 3.0, -z[0] - 3.0, z[1] - 3.0, -z[1] - 3.0])
        }
    }

    impl OcpModel for Affine {
        type Dynamics = AffineMap;
        type Stage = Box2;
        type Terminal = Box2;
        fn dynamics(&self) -> &DiscreteDynamics<AffineMap> {
            &self.dynamics
        }
        fn stage_constraints(&self) -> &Box2 {
            &self.stage
        }
        fn terminal_constraints(&self) -> &Box2 {
            &self.terminal
        }
        fn stage_cost<S: Real>(&self, _k: usize, x: &[S], u: &[S]) -> S {
            dot(x, x) + dot(u, u)
        }
        fn terminal_cost<S: Real>(&self, x: &[S]) -> S {
            dot(x, x)
        }
    }

    fn model() -> Affine {
        Affine { dynamics: DiscreteDynamics::new(AffineMap, 2, 2, 2).unwrap(), stage: Box2(4), terminal: Box2(2) }
    }

    #[test]
    fn layout_examples() {
        let spec = OcpSpec::new(model(), 10, 0, 0.1);
        let (_, l) = build_tree(&spec).unwrap();
        assert_eq!((l.scenarios(), l.dim(), l.num_cuts()), (1, 20, 0));

        let spec = OcpSpec::new(model(), 10, 1, 0.1);
        let (sk, l) = build_tree(&spec).unwrap();
        assert_eq!(l.scenarios(), 2);
        assert_eq!(l.num_cuts(), 1);
        assert_eq!(l.cut_range(1, 0).len(), 3);
        assert_eq!(l.scenario_input_range(0, 0), l.scenario_input_range(1, 0));
        assert_ne!(l.scenario_input_range(0, 1), l.scenario_input_range(1, 1));
        assert_eq!(sk.steps[0][0].weight, 2.0);

        let spec = OcpSpec::new(model(), 10, 2, 0.1);
        let (_, l) = build_tree(&spec).unwrap();
        assert_eq!((l.scenarios(), l.num_cuts()), (4, 3));
        assert_eq!(l.scenario_input_range(0, 1), l.scenario_input_range(1, 1));
        assert_eq!(l.scenario_input_range(2, 1), l.scenario_input_range(3, 1));
        assert_ne!(l.scenario_input_range(1, 1), l.scenario_input_range(2, 1));
        assert!((0..4).all(|s| l.scenario_input_range(s, 0) == l.scenario_input_range(0, 0)));

        let spec = OcpSpec::new(model(), 3, 3, 0.1);
        assert!(matches!(build_tree(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn layout_is_a_bijection() {
        let mut spec = OcpSpec::new(model(), 5, 2, 0.1);
        spec.gain_mode = GainMode::Optimized(GainMask::full(2, 2));
        let l = spec.layout().unwrap();
        let mut hit = vec![0; l.dim()];
        for k in 0..5 {
            for g in 0..l.groups(k) {
                l.input_range(k, g).for_each(|i| hit[i] += 1);
                if let Some(r) = l.gain_range(k, g) {
                    r.for_each(|i| hit[i] += 1);
                }
            }
        }
        for k in 1..=2 {
            for p in 0..l.groups(k - 1) {
                l.cut_range(k, p).for_each(|i| hit[i] += 1);
            }
        }
        assert!(hit.iter().all(|&h| h == 1));
        assert!(l.gain_range(0, 0).is_none());
    }

    /// Enumerates the printed index sets (with the group index running over
    /// `0..2^k`) and checks every equality against the sharing map.
    #[test]
    fn index_sets_match_sharing_map() {
        for nr in 1..=2usize {
            let spec = OcpSpec::new(model(), 4, nr, 0.1);
            let l = spec.layout().unwrap();
            let mu = 1usize << nr;
            for k in 0..nr {
                let block = mu >> k;
                for i in 0..(1 << k) {
                    let base = block * i + 1;
                    for j in 1..block {
                        let (a, b) = (base - 1, base + j - 1);
                        assert_eq!(l.scenario_input_range(a, k), l.scenario_input_range(b, k), "nr={nr} k={k}");
                    }
                }
                let cls: std::collections::BTreeSet<_> = (0..mu).map(|s| l.scenario_input_range(s, k).start).collect();
                assert_eq!(cls.len(), 1 << k);
            }
            // Cut sign seen by scenario s at step k: + for even children.
            let sign = |s: usize, k: usize| if l.group_of(s, k) % 2 == 0 { 1 } else { -1 };
            for k in 1..nr {
                let block = mu >> k;
                for i in 0..(1 << k) {
                    let base = block * i + 1;
                    for j in (block + 1)..(mu >> (k - 1)) {
                        let other = base + j - 1;
                        if other <= mu {
                            assert_eq!(l.group_of(base - 1, k - 1), l.group_of(other - 1, k - 1));
                            assert_eq!(sign(base - 1, k), -sign(other - 1, k));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_rollout_has_closed_form_shapes() {
        let spec = OcpSpec::new(model(), 4, 0, 0.3);
        let l = spec.layout().unwrap();
        let z = vec![0.1; l.dim()];
        let tree = rollout::<f64, _, _>(&spec, &l, &z, &[0.0, 0.0]).unwrap();
        let a = Mat::from_row_major(2, 2, vec![1.0, 0.5, 0.0, 0.9]);
        let mut want = Mat::zeros(2, 2);
        let mut apow = Mat::identity(2);
        for k in 1..=4 {
            want = want.add(&apow.matmul_t(&apow).scale(0.09));
            apow = apow.matmul(&a);
            assert!(tree.steps[k][0].shape.sub(&want).max_abs() < 1e-14);
        }
    }

    #[test]
    fn shallow_side_follows_the_unpartitioned_tube() {
        let mut spec = OcpSpec::new(model(), 3, 1, 0.3);
        spec.use_smoothing = false;
        let l = spec.layout().unwrap();
        let mut z = vec![0.2; l.dim()];
        for k in 1..3 {
            let u = l.input(&z, k, 0).to_vec();
            l.set_input(&mut z, k, 1, &u);
        }
        // P̃_1 = 0.09 I and x̃_1 = (0.2, 0.2), so α = (0.2 - 0.44) / 0.3 = -0.8.
        l.set_cut(&mut z, 1, 0, &[1.0, 0.0], 0.44);
        let t = rollout::<f64, _, _>(&spec, &l, &z, &[0.0, 0.0]).unwrap();
        assert!((t.cuts[0].alpha + 0.8).abs() < 1e-12);
        let base = OcpSpec::new(model(), 3, 0, 0.3);
        let bl = base.layout().unwrap();
        let zb: Vec<f64> = (0..3).flat_map(|k| l.input(&z, k, 0).to_vec()).collect();
        let tb = rollout::<f64, _, _>(&base, &bl, &zb, &[0.0, 0.0]).unwrap();
        for k in 1..=3 {
            assert_eq!(t.steps[k][0].state, tb.steps[k][0].state);
            assert!(t.steps[k][0].shape.sub(&tb.steps[k][0].shape).max_abs() < 1e-15);
        }
        // The sibling sees α = 0.8 and is genuinely cut.
        assert!(t.steps[1][1].state[0] > 0.4);
    }

    #[test]
    fn central_cut_centers_are_mirror_images() {
        let spec = OcpSpec::new(model(), 2, 1, 0.3);
        let l = spec.layout().unwrap();
        let mut z = vec![0.0; l.dim()];
        l.set_cut(&mut z, 1, 0, &[0.0, 1.0], 0.0);
        let t = rollout::<f64, _, _>(&spec, &l, &z, &[0.0, 0.0]).unwrap();
        let (c0, c1) = (&t.steps[1][0].state, &t.steps[1][1].state);
        assert!((c0[1] + c1[1]).abs() < 1e-15 && c0[1] < 0.0);
        assert_eq!(c0[0], c1[0]);
    }

    #[test]
    fn residual_counts() {
        let spec = OcpSpec::new(model(), 10, 0, 0.1);
        let nlp = transcribe(&spec, &[0.0, 0.0]).unwrap();
        assert_eq!(nlp.num_residuals(), 10 * 4 + 4);
        let spec = OcpSpec::new(model(), 10, 1, 0.1);
        let nlp = transcribe(&spec, &[0.0, 0.0]).unwrap();
        assert_eq!(nlp.num_residuals(), 4 + 9 * 8 + 8 + 2 + 2);
    }

    #[test]
    fn solution_record_round_trips() {
        let spec = OcpSpec::new(model(), 3, 1, 0.1);
        let nlp = transcribe(&spec, &[0.5, 0.0]).unwrap();
        let mut z = vec![0.0; nlp.dim()];
        nlp.layout().set_cut(&mut z, 1, 0, &[1.0, 0.0], 0.6);
        let sol = extract_solution(&nlp, &z, None).unwrap();
        assert_eq!(sol.first_input, vec![0.0, 0.0]);
        let rec = sol.to_record().unwrap();
        let text = serde_json::to_string(&rec).unwrap();
        let back: OcpSolutionRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
        assert_eq!((rec.scenarios, rec.cuts.len()), (2, 1));
        for n in &back.nodes {
            Ellipsoid::try_from(n.ellipsoid.clone()).unwrap();
        }
    }

    #[test]
    fn observed_state_outside_prediction_has_no_side() {
        let spec = OcpSpec::new(model(), 3, 1, 0.1);
        let nlp = transcribe(&spec, &[0.0, 0.0]).unwrap();
        let mut z = vec![0.0; nlp.dim()];
        nlp.layout().set_cut(&mut z, 1, 0, &[1.0, 0.0], 0.0);
        let sol = extract_solution(&nlp, &z, None).unwrap();
        assert_eq!(select_side(&sol, &[0.0, 0.05]).unwrap(), 0);
        assert_eq!(select_side(&sol, &[0.05, 0.0]).unwrap(), 1);
        assert!(matches!(select_side(&sol, &[2.0, 0.0]), Err(Error::NoSide(_))));
    }

    #[test]
    fn cached_derivatives_match_dense_passes() {
        struct Dense<'a, 'b>(&'b TubeOcpNlp<'a, Affine, ZeroBound>);
        impl NlpProblem for Dense<'_, '_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn num_residuals(&self) -> usize {
                self.0.num_residuals()
            }
            fn evaluate<S: Real>(&self, z: &[S]) -> Result<(S, Vec<S>)> {
                self.0.evaluate(z)
            }
        }
        use crate::nlp::{Forward, NlpCallbacks};
        for (nr, gains) in [(0, false), (1, true), (2, true)] {
            let mut spec = OcpSpec::new(model(), 5, nr, 0.2);
            if gains {
                spec.gain_mode = GainMode::Optimized(GainMask::full(2, 2));
            }
            let nlp = transcribe(&spec, &[0.3, -0.2]).unwrap();
            let z: Vec<f64> = (0..nlp.dim()).map(|i| 0.1 * ((i * 7 % 11) as f64 - 5.0) / 5.0 + 0.05).collect();
            let fast = nlp.derivatives(&z).unwrap();
            let slow = Forward(Dense(&nlp)).eval_derivatives(&z).unwrap();
            assert_eq!(fast.objective, slow.objective);
            assert_eq!(fast.residuals, slow.residuals);
            let dg = fast.gradient.iter().zip(&slow.gradient).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(dg < 1e-12 && fast.jacobian.sub(&slow.jacobian).max_abs() < 1e-12, "n_r {nr}");
        }
    }
}
