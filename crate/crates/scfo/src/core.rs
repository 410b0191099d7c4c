//! Shared data model.
//!
//! Everything the other modules exchange lives here: the problem description,
//! measurement records, Lipschitz constants and their local refinements,
//! structural hints, noise assumptions, slack bookkeeping and the advice
//! returned to the caller.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies one of the functions tracked by the advisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FnId {
    /// The (experimental) cost.
    Cost,
    /// Experimental constraint `j`, zero based.
    Constraint(usize),
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type BallMaxFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// A constraint `g(u) <= 0` whose value can be computed without running an
/// experiment.
#[derive(Clone)]
pub struct NumericalConstraint {
    pub eval: ScalarFn,
    pub grad: VectorFn,
    /// Exact maximum, or an upper bound on it, of `g` over the Euclidean
    /// ball of the given radius around the given center.
    pub ball_max: BallMaxFn,
    /// False when `ball_max` is a sampled estimate rather than a bound.
    pub rigorous: bool,
}

impl NumericalConstraint {
    pub fn new(eval: ScalarFn, grad: VectorFn, ball_max: BallMaxFn) -> Self {
        Self { eval, grad, ball_max, rigorous: true }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        (self.eval)(u)
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        (self.grad)(u)
    }

    /// Maximum over the ball; radius zero always reduces to `value`.
    pub fn max_over_ball(&self, center: &[f64], radius: f64) -> f64 {
        if radius <= 0.0 {
            self.value(center)
        } else {
            (self.ball_max)(center, radius)
        }
    }
}

impl fmt::Debug for NumericalConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NumericalConstraint").field("rigorous", &self.rigorous).finish_non_exhaustive()
    }
}

/// Whether the cost is measured (experimental) or computable.
#[derive(Clone)]
pub enum CostKind {
    Experimental,
    Numerical { eval: ScalarFn, grad: VectorFn },
}

impl CostKind {
    pub fn is_experimental(&self) -> bool {
        matches!(self, CostKind::Experimental)
    }
}

impl fmt::Debug for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostKind::Experimental => f.write_str("Experimental"),
            CostKind::Numerical { .. } => f.write_str("Numerical"),
        }
    }
}

/// Dimensions, box and function inventory of an optimization problem.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub n_u: usize,
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    pub n_gp: usize,
    pub numerical_constraints: Vec<NumericalConstraint>,
    pub cost_kind: CostKind,
    /// Optional positive scale per constraint (experimental first, then
    /// numerical) used only by the minimax reference fallback.
    pub constraint_scale: Option<Vec<f64>>,
}

impl ProblemSpec {
    pub fn n_g(&self) -> usize {
        self.numerical_constraints.len()
    }

    /// Box shrunk by `delta` on every side.
    pub fn compressed_box(&self, delta: f64) -> (Vec<f64>, Vec<f64>) {
        (
            self.u_lower.iter().map(|l| l + delta).collect(),
            self.u_upper.iter().map(|u| u - delta).collect(),
        )
    }

    pub fn in_box(&self, u: &[f64], margin: f64) -> bool {
        u.iter()
            .zip(self.u_lower.iter().zip(&self.u_upper))
            .all(|(x, (l, h))| *x >= l + margin && *x <= h - margin)
    }
}

/// One experiment: where it was run, when, and what was observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub u: Vec<f64>,
    pub time: f64,
    pub cost_hat: Option<f64>,
    pub g_hat: Vec<f64>,
}

/// Bounds on a time derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeDerivative {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// A gradient estimate and the box assumed to contain the true gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub at_u: Vec<f64>,
    pub at_time: f64,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub time: Option<TimeDerivative>,
}

impl GradientEstimate {
    /// An exact gradient with a collapsed box.
    pub fn exact(at_u: Vec<f64>, at_time: f64, grad: Vec<f64>, dtau: Option<f64>) -> Self {
        Self {
            at_u,
            at_time,
            lower: grad.clone(),
            upper: grad.clone(),
            estimate: grad,
            time: dtau.map(|d| TimeDerivative { estimate: d, lower: d, upper: d }),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| l == u)
    }
}

/// Gradient estimates collected at one record, per function.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointGradients {
    pub cost: Option<GradientEstimate>,
    pub constraints: Vec<Option<GradientEstimate>>,
}

impl PointGradients {
    pub fn get(&self, f: FnId) -> Option<&GradientEstimate> {
        match f {
            FnId::Cost => self.cost.as_ref(),
            FnId::Constraint(j) => self.constraints.get(j).and_then(|g| g.as_ref()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Value intervals of every tracked function at one record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordIntervals {
    pub cost: Option<Interval>,
    pub constraints: Vec<Interval>,
}

impl RecordIntervals {
    pub fn get(&self, f: FnId) -> Option<Interval> {
        match f {
            FnId::Cost => self.cost,
            FnId::Constraint(j) => self.constraints.get(j).copied(),
        }
    }
}

/// Ordered experiment log. Times must never decrease.
#[derive(Clone, Debug, Default)]
pub struct History {
    records: Vec<Measurement>,
    gradients: Vec<Option<PointGradients>>,
    /// Filled by pretreatment, one entry per record.
    pub intervals: Vec<RecordIntervals>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: Measurement) -> Result<(), ScfoError> {
        self.push_with_gradients(m, None)
    }

    pub fn push_with_gradients(&mut self, m: Measurement, g: Option<PointGradients>) -> Result<(), ScfoError> {
        if !m.time.is_finite() {
            return Err(ScfoError::Dimension("record time must be finite".into()));
        }
        if let Some(last) = self.records.last() {
            if m.time < last.time {
                return Err(ScfoError::NonMonotoneTime { previous: last.time, time: m.time });
            }
            if m.u.len() != last.u.len() || m.g_hat.len() != last.g_hat.len() {
                return Err(ScfoError::Dimension("record shape differs from earlier records".into()));
            }
        }
        self.records.push(m);
        self.gradients.push(g);
        Ok(())
    }

    /// Drops cost measurements and cost gradients of records `0..upto`,
    /// for instance after the cost function was replaced.
    pub fn forget_cost(&mut self, upto: usize) {
        for k in 0..upto.min(self.records.len()) {
            self.records[k].cost_hat = None;
            if let Some(g) = self.gradients[k].as_mut() {
                g.cost = None;
            }
        }
    }

    pub fn records(&self) -> &[Measurement] {
        &self.records
    }

    pub fn gradients(&self) -> &[Option<PointGradients>] {
        &self.gradients
    }

    pub fn gradient(&self, k: usize, f: FnId) -> Option<&GradientEstimate> {
        self.gradients.get(k).and_then(|g| g.as_ref()).and_then(|g| g.get(f))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&Measurement> {
        self.records.last()
    }

    /// Measured value of `f` at record `k`; `None` for a computable cost.
    pub fn measured(&self, k: usize, f: FnId) -> Option<f64> {
        let r = &self.records[k];
        match f {
            FnId::Cost => r.cost_hat,
            FnId::Constraint(j) => r.g_hat.get(j).copied(),
        }
    }

    pub fn interval(&self, k: usize, f: FnId) -> Option<Interval> {
        self.intervals.get(k).and_then(|r| r.get(f))
    }
}

/// First-order constants of one function: per-input lower/upper derivative
/// bounds and bounds on the time derivative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnConstants {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub time_lower: f64,
    pub time_upper: f64,
}

impl FnConstants {
    pub fn symmetric(kappa: &[f64], kappa_tau: f64) -> Self {
        Self {
            lower: kappa.iter().map(|k| -k.abs()).collect(),
            upper: kappa.iter().map(|k| k.abs()).collect(),
            time_lower: -kappa_tau.abs(),
            time_upper: kappa_tau.abs(),
        }
    }

    /// Largest absolute derivative bound per input.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l.abs().max(u.abs())).collect()
    }

    /// Clamp every entry into the intervals of `global`.
    pub fn clamped_into(&self, global: &FnConstants) -> FnConstants {
        let c = |x: f64, lo: f64, hi: f64| if x.is_nan() { lo } else { x.clamp(lo, hi) };
        let d = |x: f64, lo: f64, hi: f64| if x.is_nan() { hi } else { x.clamp(lo, hi) };
        FnConstants {
            lower: self.lower.iter().zip(global.lower.iter().zip(&global.upper)).map(|(x, (l, h))| c(*x, *l, *h)).collect(),
            upper: self.upper.iter().zip(global.lower.iter().zip(&global.upper)).map(|(x, (l, h))| d(*x, *l, *h)).collect(),
            time_lower: c(self.time_lower, global.time_lower, global.time_upper),
            time_upper: d(self.time_upper, global.time_lower, global.time_upper),
        }
    }
}

/// Axis-aligned region of the decision space together with a time window.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
}

impl Region {
    /// Bounding box of a set of points over the given time window.
    pub fn bounding(points: &[&[f64]], t0: f64, t1: f64) -> Self {
        let n = points[0].len();
        let mut lower = vec![f64::INFINITY; n];
        let mut upper = vec![f64::NEG_INFINITY; n];
        for p in points {
            for i in 0..n {
                lower[i] = lower[i].min(p[i]);
                upper[i] = upper[i].max(p[i]);
            }
        }
        Self { lower, upper, t_min: t0.min(t1), t_max: t0.max(t1) }
    }

    /// Bounding box of the Euclidean ball of radius `r` around `c`.
    pub fn ball(c: &[f64], r: f64, t0: f64, t1: f64) -> Self {
        Self {
            lower: c.iter().map(|x| x - r).collect(),
            upper: c.iter().map(|x| x + r).collect(),
            t_min: t0.min(t1),
            t_max: t0.max(t1),
        }
    }
}

/// Supplies constants valid on a sub-region. Any entry may be returned as
/// an infinite or NaN value to mean "no refinement".
pub trait LocalLipschitz: Send + Sync {
    fn constants(&self, f: FnId, region: &Region) -> Option<FnConstants>;
}

/// Every Lipschitz-type constant the advisor uses.
#[derive(Clone)]
pub struct LipschitzSet {
    /// One entry per experimental constraint.
    pub constraints: Vec<FnConstants>,
    pub cost: FnConstants,
    pub m_lower: Vec<Vec<f64>>,
    pub m_upper: Vec<Vec<f64>>,
    pub local: Option<Arc<dyn LocalLipschitz>>,
}

impl fmt::Debug for LipschitzSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipschitzSet")
            .field("constraints", &self.constraints)
            .field("cost", &self.cost)
            .field("m_lower", &self.m_lower)
            .field("m_upper", &self.m_upper)
            .field("local", &self.local.is_some())
            .finish()
    }
}

impl LipschitzSet {
    pub fn function(&self, f: FnId) -> &FnConstants {
        match f {
            FnId::Cost => &self.cost,
            FnId::Constraint(j) => &self.constraints[j],
        }
    }

    pub fn function_mut(&mut self, f: FnId) -> &mut FnConstants {
        match f {
            FnId::Cost => &mut self.cost,
            FnId::Constraint(j) => &mut self.constraints[j],
        }
    }

    /// Constants for `f` over `region`: the provider's answer clamped into the
    /// global intervals, or the global constants when there is no provider.
    pub fn local_constants(&self, f: FnId, region: &Region) -> FnConstants {
        let global = self.function(f);
        match self.local.as_ref().and_then(|p| p.constants(f, region)) {
            Some(c) if c.lower.len() == global.lower.len() && c.upper.len() == global.upper.len() => c.clamped_into(global),
            _ => global.clone(),
        }
    }
}

/// Free-function form of [`LipschitzSet::local_constants`].
pub fn local_constants(lip: &LipschitzSet, f: FnId, region: &Region) -> FnConstants {
    lip.local_constants(f, region)
}

/// Index set with a time flag: which inputs a function is concave (or
/// convex) in, and whether it is so in time as well.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concavity {
    /// Zero-based input indices.
    pub indices: Vec<usize>,
    pub eta: bool,
}

impl Concavity {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(indices: &[usize], eta: bool) -> Self {
        Self { indices: indices.to_vec(), eta }
    }

    pub fn has(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn eta(&self) -> f64 {
        if self.eta {
            1.0
        } else {
            0.0
        }
    }
}

/// Declared concavity/convexity structure.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureInfo {
    /// Per experimental constraint.
    pub conc_g: Vec<Concavity>,
    pub conv_cost: Concavity,
    pub conc_cost: Concavity,
}

impl StructureInfo {
    pub fn none(n_gp: usize) -> Self {
        Self { conc_g: vec![Concavity::none(); n_gp], ..Default::default() }
    }

    /// Concavity declaration used for upper bounds of `f`.
    pub fn concave(&self, f: FnId) -> &Concavity {
        match f {
            FnId::Cost => &self.conc_cost,
            FnId::Constraint(j) => &self.conc_g[j],
        }
    }

    /// Convexity declaration used for lower bounds of `f`. Constraints carry
    /// none.
    pub fn convex(&self, f: FnId) -> Option<&Concavity> {
        match f {
            FnId::Cost => Some(&self.conv_cost),
            FnId::Constraint(_) => None,
        }
    }
}

/// Assumed distribution of measurement noise for one function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Three-sigma band.
    Gaussian { sigma: f64 },
    /// Distribution-free band holding with probability at least `p`.
    Chebyshev { mean: f64, sigma: f64, p: f64 },
    /// Noise known to lie in `[-half_width, half_width]`.
    Bounded { half_width: f64 },
}

impl NoiseKind {
    pub fn none() -> Self {
        NoiseKind::Bounded { half_width: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub cost: NoiseKind,
    pub constraints: Vec<NoiseKind>,
}

impl NoiseModel {
    pub fn uniform(kind: NoiseKind, n_gp: usize) -> Self {
        Self { cost: kind, constraints: vec![kind; n_gp] }
    }

    pub fn kind(&self, f: FnId) -> NoiseKind {
        match f {
            FnId::Cost => self.cost,
            FnId::Constraint(j) => self.constraints[j],
        }
    }
}

/// Slack parameters of one constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackSpec {
    pub d_max: f64,
    pub budget: f64,
    pub beta: f64,
}

impl SlackSpec {
    /// No slack at all.
    pub fn hard() -> Self {
        Self { d_max: 0.0, budget: 1.0, beta: 0.0 }
    }

    /// The largest reduction factor compatible with the budget.
    pub fn beta_bound(d_max: f64, budget: f64) -> f64 {
        (budget - d_max) / budget
    }

    pub fn with_largest_beta(d_max: f64, budget: f64) -> Self {
        let b = Self::beta_bound(d_max, budget);
        let beta = if b >= 1.0 { 0.0 } else { b };
        Self { d_max, budget, beta }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackPolicy {
    pub experimental: Vec<SlackSpec>,
    pub numerical: Vec<SlackSpec>,
}

impl SlackPolicy {
    pub fn hard(n_gp: usize, n_g: usize) -> Self {
        Self { experimental: vec![SlackSpec::hard(); n_gp], numerical: vec![SlackSpec::hard(); n_g] }
    }

    pub fn initial_state(&self) -> SlackState {
        SlackState {
            experimental: self.experimental.iter().map(|s| s.d_max).collect(),
            numerical: self.numerical.iter().map(|s| s.d_max).collect(),
        }
    }

    pub fn validate(&self, n_gp: usize, n_g: usize) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        if self.experimental.len() != n_gp {
            out.push(ValidationIssue::new("slacks.experimental", format!("expected {n_gp} entries, got {}", self.experimental.len())));
        }
        if self.numerical.len() != n_g {
            out.push(ValidationIssue::new("slacks.numerical", format!("expected {n_g} entries, got {}", self.numerical.len())));
        }
        let groups = [("experimental", &self.experimental), ("numerical", &self.numerical)];
        for (name, group) in groups {
            for (j, s) in group.iter().enumerate() {
                let field = format!("slacks.{name}[{j}]");
                if !(s.d_max >= 0.0) {
                    out.push(ValidationIssue::new(&field, "d_max must be nonnegative"));
                }
                if !(s.budget > 0.0) {
                    out.push(ValidationIssue::new(&field, "budget must be positive"));
                }
                if !(0.0..1.0).contains(&s.beta) {
                    out.push(ValidationIssue::new(&field, "beta must lie in [0, 1)"));
                }
                if s.budget > 0.0 && s.d_max >= 0.0 {
                    let bound = SlackSpec::beta_bound(s.d_max, s.budget);
                    if s.beta > bound + 1e-15 {
                        out.push(ValidationIssue::new(
                            &field,
                            format!("beta {} exceeds (d^S-d_max)/d^S = {}", s.beta, fmt_short(bound)),
                        ));
                    }
                }
            }
        }
        out
    }
}

fn fmt_short(x: f64) -> String {
    let s = format!("{x:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Current slacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackState {
    pub experimental: Vec<f64>,
    pub numerical: Vec<f64>,
}

/// Projection parameters. The same shape stores both the seeds and the
/// values currently in use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub eps_p: Vec<f64>,
    pub eps: Vec<f64>,
    pub delta_gp: Vec<f64>,
    pub delta_g: Vec<f64>,
    pub delta_phi: f64,
}

impl ProjectionParams {
    pub fn halved(&self) -> Self {
        let h = |v: &Vec<f64>| v.iter().map(|x| x * 0.5).collect();
        Self {
            eps_p: h(&self.eps_p),
            eps: h(&self.eps),
            delta_gp: h(&self.delta_gp),
            delta_g: h(&self.delta_g),
            delta_phi: self.delta_phi * 0.5,
        }
    }

    pub fn validate(&self, n_gp: usize, n_g: usize) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        for (name, v, n) in [
            ("projection.eps_p", &self.eps_p, n_gp),
            ("projection.eps", &self.eps, n_g),
            ("projection.delta_gp", &self.delta_gp, n_gp),
            ("projection.delta_g", &self.delta_g, n_g),
        ] {
            if v.len() != n {
                out.push(ValidationIssue::new(name, format!("expected {n} entries, got {}", v.len())));
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                out.push(ValidationIssue::new(name, "entries must be strictly positive"));
            }
        }
        if !(self.delta_phi > 0.0) {
            out.push(ValidationIssue::new("projection.delta_phi", "must be strictly positive"));
        }
        out
    }
}

/// How the reference point was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    /// Most recent robustly feasible record with cost dominance.
    Primary,
    /// Lowest-cost robustly feasible record (computable cost).
    NumericalCost,
    /// Fell back to the initial safe point.
    SafePoint,
    /// Fell back to the record with the smallest worst-case violation.
    Minimax,
}

/// Which reference branch fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceBranch {
    Primary,
    Fallback,
}

/// Which step branch fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepBranch {
    /// Gain from the full line search.
    LineSearch,
    /// Gain from the relaxed search without the between-experiment drift term.
    Relaxed,
    /// Both searches infeasible.
    ZeroGain,
    /// Step replaced by a random point on the excitation sphere.
    Excitation,
}

/// One of the eight reference-by-step branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub reference: ReferenceBranch,
    pub step: StepBranch,
}

impl Scenario {
    /// Roman numeral of the branch, `1..=8`.
    pub fn number(&self) -> usize {
        let r = match self.reference {
            ReferenceBranch::Primary => 0,
            ReferenceBranch::Fallback => 4,
        };
        let s = match self.step {
            StepBranch::LineSearch => 1,
            StepBranch::Relaxed => 2,
            StepBranch::ZeroGain => 3,
            StepBranch::Excitation => 4,
        };
        r + s
    }

    pub fn tag(&self) -> String {
        let r = match self.reference {
            ReferenceBranch::Primary => "primary",
            ReferenceBranch::Fallback => "fallback-u0",
        };
        let s = match self.step {
            StepBranch::LineSearch => "line-search",
            StepBranch::Relaxed => "relaxed",
            StepBranch::ZeroGain => "zero-gain",
            StepBranch::Excitation => "excitation",
        };
        format!("{r}/{s}")
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Diagnostics attached to each recommendation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdviceDiagnostics {
    pub reference_rule: ReferenceRule,
    pub target: Vec<f64>,
    pub projected_target: Vec<f64>,
    pub params: ProjectionParams,
    /// Robustness level used by the final projection.
    pub robustness: f64,
    pub projection_status: String,
    /// Slacks used to design this step.
    pub slacks: SlackState,
    pub excitation_overridden: bool,
    /// Iterations used by the first-order consistency check, per function.
    pub consistency_iterations: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Recommended next experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub u_next: Vec<f64>,
    pub k_star: usize,
    pub gain: f64,
    pub scenario: Scenario,
    pub diagnostics: AdviceDiagnostics,
}

/// A single validation finding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub field: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationErrors(pub Vec<ValidationIssue>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

impl ValidationErrors {
    pub fn mentions(&self, needle: &str) -> bool {
        self.0.iter().any(|i| i.message.contains(needle) || i.field.contains(needle))
    }
}

#[derive(Debug, Error)]
pub enum ScfoError {
    #[error("validation failed: {0}")]
    Invalid(ValidationErrors),
    #[error("history is empty")]
    EmptyHistory,
    #[error("record time {time} precedes previous time {previous}")]
    NonMonotoneTime { previous: f64, time: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl From<ValidationErrors> for ScfoError {
    fn from(e: ValidationErrors) -> Self {
        ScfoError::Invalid(e)
    }
}

fn check_matrix(out: &mut Vec<ValidationIssue>, field: &str, m: &[Vec<f64>], n: usize) {
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        out.push(ValidationIssue::new(field, format!("must be {n} x {n}")));
    }
}

/// Collects every inconsistency between the problem, the constants and the
/// structure declaration.
pub fn validate_problem(spec: &ProblemSpec, lip: &LipschitzSet, structure: &StructureInfo) -> Result<(), ValidationErrors> {
    let mut out = Vec::new();
    let n = spec.n_u;
    if n == 0 {
        out.push(ValidationIssue::new("n_u", "must be at least 1"));
    }
    if spec.u_lower.len() != n || spec.u_upper.len() != n {
        out.push(ValidationIssue::new("box", format!("bounds must have length {n}")));
    } else {
        for i in 0..n {
            if !(spec.u_lower[i] < spec.u_upper[i]) {
                out.push(ValidationIssue::new(format!("box[{i}]"), "lower bound must be strictly below upper bound"));
            }
        }
    }
    if lip.constraints.len() != spec.n_gp {
        out.push(ValidationIssue::new("lipschitz.constraints", format!("expected {} entries, got {}", spec.n_gp, lip.constraints.len())));
    }
    for (j, c) in lip.constraints.iter().enumerate() {
        let field = format!("lipschitz.constraints[{j}]");
        if c.lower.len() != n || c.upper.len() != n {
            out.push(ValidationIssue::new(&field, format!("derivative bounds must have length {n}")));
            continue;
        }
        for i in 0..n {
            if !(c.lower[i] < c.upper[i]) {
                out.push(ValidationIssue::new(format!("{field}[{i}]"), "strict inequality required between lower and upper constant"));
            }
        }
        if !(c.time_lower <= c.time_upper) {
            out.push(ValidationIssue::new(&field, "time constants must satisfy lower <= upper"));
        }
    }
    if spec.cost_kind.is_experimental() {
        let c = &lip.cost;
        if c.lower.len() != n || c.upper.len() != n {
            out.push(ValidationIssue::new("lipschitz.cost", format!("derivative bounds must have length {n}")));
        } else if (0..n).any(|i| !(c.lower[i] <= c.upper[i])) {
            out.push(ValidationIssue::new("lipschitz.cost", "lower constant above upper constant"));
        }
        if !(c.time_lower <= c.time_upper) {
            out.push(ValidationIssue::new("lipschitz.cost", "time constants must satisfy lower <= upper"));
        }
        check_matrix(&mut out, "lipschitz.m_lower", &lip.m_lower, n);
        check_matrix(&mut out, "lipschitz.m_upper", &lip.m_upper, n);
        if out.iter().all(|i| !i.field.starts_with("lipschitz.m_")) {
            for a in 0..n {
                for b in 0..n {
                    if !(lip.m_lower[a][b] <= lip.m_upper[a][b]) {
                        out.push(ValidationIssue::new(format!("lipschitz.m[{a}][{b}]"), "lower above upper"));
                    }
                }
            }
        }
    }
    if structure.conc_g.len() != spec.n_gp {
        out.push(ValidationIssue::new("structure.conc_g", format!("expected {} entries", spec.n_gp)));
    }
    let sets = structure
        .conc_g
        .iter()
        .enumerate()
        .map(|(j, c)| (format!("structure.conc_g[{j}]"), c))
        .chain([("structure.conv_cost".to_string(), &structure.conv_cost), ("structure.conc_cost".to_string(), &structure.conc_cost)]);
    for (field, c) in sets {
        if c.indices.iter().any(|&i| i >= n) {
            out.push(ValidationIssue::new(field, "index outside 0..n_u"));
        }
    }
    if let Some(scale) = &spec.constraint_scale {
        if scale.len() != spec.n_gp + spec.n_g() || scale.iter().any(|s| !(*s > 0.0)) {
            out.push(ValidationIssue::new("constraint_scale", "needs one positive entry per constraint"));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(out))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `max(lo * d, hi * d)`: worst linear term when the slope lies in `[lo, hi]`.
#[inline]
pub(crate) fn hi_term(lo: f64, hi: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    (lo * d).max(hi * d)
}

#[inline]
pub(crate) fn lo_term(lo: f64, hi: f64, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    (lo * d).min(hi * d)
}
