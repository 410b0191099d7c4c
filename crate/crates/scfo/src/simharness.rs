//! Simulated plants and the closed loop around the advisor.
//!
//! The built-in plants are two-input problems with two measured constraints
//! and one computable constraint. Time advances by one unit per experiment.
//! Measurements get Gaussian noise and gradient estimates get bounded
//! uniform errors scaled by the width of the Lipschitz intervals.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::advisor::{Advisor, AdvisorConfig, GradientOracle};
use crate::core::{
    CostKind, FnConstants, FnId, GradientEstimate, History, LipschitzSet, LocalLipschitz, Measurement, NoiseKind,
    NoiseModel, NumericalConstraint, PointGradients, ProblemSpec, ProjectionParams, Region, ScfoError, SlackPolicy,
    SlackSpec, StructureInfo, TimeDerivative, ValidationErrors, ValidationIssue,
};
use crate::core::Concavity;
use crate::geometry::SeparableQuadratic;
use crate::reference::FallbackRule;

/// `c0 + cuᵀu + ct τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub c0: f64,
    pub cu: Vec<f64>,
    pub ct: f64,
}

impl Affine {
    pub fn constant(c0: f64, n: usize) -> Self {
        Self { c0, cu: vec![0.0; n], ct: 0.0 }
    }

    pub fn eval(&self, u: &[f64], tau: f64) -> f64 {
        self.c0 + self.cu.iter().zip(u).map(|(c, x)| c * x).sum::<f64>() + self.ct * tau
    }

    /// Exact range over a region, attained at its corners.
    pub fn range(&self, r: &Region) -> (f64, f64) {
        let mut lo = self.c0;
        let mut hi = self.c0;
        for (i, c) in self.cu.iter().enumerate() {
            lo += (c * r.lower[i]).min(c * r.upper[i]);
            hi += (c * r.lower[i]).max(c * r.upper[i]);
        }
        lo += (self.ct * r.t_min).min(self.ct * r.t_max);
        hi += (self.ct * r.t_min).max(self.ct * r.t_max);
        (lo, hi)
    }
}

/// A simulated process.
pub trait Plant: Send + Sync {
    fn name(&self) -> String;
    fn n_u(&self) -> usize;
    fn n_gp(&self) -> usize;
    fn lower(&self) -> Vec<f64>;
    fn upper(&self) -> Vec<f64>;
    fn cost(&self, u: &[f64], tau: f64) -> f64;
    /// Input gradient and time derivative.
    fn cost_gradient(&self, u: &[f64], tau: f64) -> (Vec<f64>, f64);
    fn constraint(&self, j: usize, u: &[f64], tau: f64) -> f64;
    fn constraint_gradient(&self, j: usize, u: &[f64], tau: f64) -> (Vec<f64>, f64);
    fn numerical_constraints(&self) -> Vec<NumericalConstraint>;
    /// Derivatives (inputs first, then time) as affine functions valid on
    /// `region`, when they are affine there.
    fn affine_derivatives(&self, f: FnId, region: &Region) -> Option<Vec<Affine>>;

    fn value(&self, f: FnId, u: &[f64], tau: f64) -> f64 {
        match f {
            FnId::Cost => self.cost(u, tau),
            FnId::Constraint(j) => self.constraint(j, u, tau),
        }
    }

    fn gradient(&self, f: FnId, u: &[f64], tau: f64) -> (Vec<f64>, f64) {
        match f {
            FnId::Cost => self.cost_gradient(u, tau),
            FnId::Constraint(j) => self.constraint_gradient(j, u, tau),
        }
    }
}

/// Iteration after which the switching plant changes its cost.
pub const SWITCH_AFTER: f64 = 50.0;
/// Longest time horizon of the degrading plants.
pub const TAU_BAR: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinPlant {
    Static,
    /// The second constraint tightens with time.
    DegradingPlus,
    /// The second constraint relaxes with time.
    DegradingMinus,
    /// Static constraints, cost optimum in the interior.
    Unconstrained,
    /// Static plant whose cost is replaced after iteration 50.
    SwitchingCost,
}

/// All built-in plants.
pub fn builtin_plants() -> Vec<BuiltinPlant> {
    use BuiltinPlant::*;
    vec![Static, DegradingPlus, DegradingMinus, Unconstrained, SwitchingCost]
}

impl BuiltinPlant {
    pub fn is_degrading(self) -> bool {
        matches!(self, BuiltinPlant::DegradingPlus | BuiltinPlant::DegradingMinus)
    }

    /// Coefficient of `τ/500` in the first constraint.
    fn s1(self) -> f64 {
        if self.is_degrading() {
            1.0
        } else {
            0.0
        }
    }

    /// Coefficient of `τ/500` in the second constraint.
    fn s2(self) -> f64 {
        match self {
            BuiltinPlant::DegradingPlus => 1.0,
            BuiltinPlant::DegradingMinus => -1.0,
            _ => 0.0,
        }
    }

    /// Cost center `(a, b + c τ)`.
    fn center(self, tau: f64) -> (f64, f64, f64) {
        match self {
            BuiltinPlant::Static => (0.5, 0.4, 0.0),
            BuiltinPlant::DegradingPlus | BuiltinPlant::DegradingMinus => (0.5, 0.4 + tau / 500.0, 1.0 / 500.0),
            BuiltinPlant::Unconstrained => (0.2, 0.4, 0.0),
            BuiltinPlant::SwitchingCost => {
                if tau > SWITCH_AFTER {
                    (-0.25, 0.6, 0.0)
                } else {
                    (0.5, 0.4, 0.0)
                }
            }
        }
    }

    fn g1_quadratic() -> SeparableQuadratic {
        // -u1² - (u2 - 0.15)² + 0.01
        SeparableQuadratic::new(0.01 - 0.0225, vec![(-1.0, 0.0), (-1.0, 0.3)])
    }
}

impl Plant for BuiltinPlant {
    fn name(&self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    }

    fn n_u(&self) -> usize {
        2
    }

    fn n_gp(&self) -> usize {
        2
    }

    fn lower(&self) -> Vec<f64> {
        vec![-0.5, 0.0]
    }

    fn upper(&self) -> Vec<f64> {
        vec![0.5, 0.8]
    }

    fn cost(&self, u: &[f64], tau: f64) -> f64 {
        let (a, b, _) = self.center(tau);
        (u[0] - a).powi(2) + (u[1] - b).powi(2)
    }

    fn cost_gradient(&self, u: &[f64], tau: f64) -> (Vec<f64>, f64) {
        let (a, b, c) = self.center(tau);
        (vec![2.0 * (u[0] - a), 2.0 * (u[1] - b)], -2.0 * c * (u[1] - b))
    }

    fn constraint(&self, j: usize, u: &[f64], tau: f64) -> f64 {
        let t = tau / 500.0;
        match j {
            0 => -6.0 * u[0] * u[0] - (3.5 + self.s1() * t) * u[0] + u[1] - 0.6,
            1 => 2.0 * u[0] * u[0] + 0.5 * u[0] + u[1] - 0.75 + self.s2() * t,
            _ => panic!("constraint index {j} out of range"),
        }
    }

    fn constraint_gradient(&self, j: usize, u: &[f64], tau: f64) -> (Vec<f64>, f64) {
        match j {
            0 => (vec![-12.0 * u[0] - 3.5 - self.s1() * tau / 500.0, 1.0], -self.s1() * u[0] / 500.0),
            1 => (vec![4.0 * u[0] + 0.5, 1.0], self.s2() / 500.0),
            _ => panic!("constraint index {j} out of range"),
        }
    }

    fn numerical_constraints(&self) -> Vec<NumericalConstraint> {
        vec![Self::g1_quadratic().into_constraint()]
    }

    fn affine_derivatives(&self, f: FnId, region: &Region) -> Option<Vec<Affine>> {
        let aff = |c0: f64, cu: [f64; 2], ct: f64| Affine { c0, cu: cu.to_vec(), ct };
        match f {
            FnId::Constraint(0) => {
                let s = self.s1() / 500.0;
                Some(vec![aff(-3.5, [-12.0, 0.0], -s), Affine::constant(1.0, 2), aff(0.0, [-s, 0.0], 0.0)])
            }
            FnId::Constraint(1) => Some(vec![aff(0.5, [4.0, 0.0], 0.0), Affine::constant(1.0, 2), Affine::constant(self.s2() / 500.0, 2)]),
            FnId::Constraint(_) => None,
            FnId::Cost => {
                if *self == BuiltinPlant::SwitchingCost && region.t_min <= SWITCH_AFTER && region.t_max > SWITCH_AFTER {
                    return None;
                }
                let (a, b0, c) = self.center(region.t_min);
                let b0 = b0 - c * region.t_min;
                // d/du2 = 2u2 - 2(b0 + cτ); d/dτ = -2c(u2 - b0 - cτ)
                Some(vec![
                    aff(-2.0 * a, [2.0, 0.0], 0.0),
                    aff(-2.0 * b0, [0.0, 2.0], -2.0 * c),
                    aff(2.0 * c * b0, [0.0, -2.0 * c], 2.0 * c * c),
                ])
            }
        }
    }
}

/// Margin subtracted from lower and added to upper local constants.
pub const LOCAL_MARGIN: f64 = 1e-3;

/// Which derivatives the local provider refines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    /// Global constants only.
    None,
    /// The first-input derivative of both measured constraints.
    #[default]
    Constraints,
    /// Every affine derivative, cost included.
    All,
}

/// Local constants of a plant with affine derivatives: the exact derivative
/// range over the region widened by [`LOCAL_MARGIN`]. Entries that are not
/// refined are NaN, which callers map back to the global constants.
pub fn polynomial_local_lipschitz(plant: &dyn Plant, f: FnId, region: &Region, mode: LocalMode) -> Option<FnConstants> {
    if mode == LocalMode::None || (mode == LocalMode::Constraints && f == FnId::Cost) {
        return None;
    }
    let d = plant.affine_derivatives(f, region)?;
    let n = plant.n_u();
    let mut c = FnConstants { lower: vec![f64::NAN; n], upper: vec![f64::NAN; n], time_lower: f64::NAN, time_upper: f64::NAN };
    let refine = |i: usize| mode == LocalMode::All || i == 0;
    for (i, a) in d.iter().enumerate().take(n) {
        if refine(i) {
            let (lo, hi) = a.range(region);
            c.lower[i] = lo - LOCAL_MARGIN;
            c.upper[i] = hi + LOCAL_MARGIN;
        }
    }
    if mode == LocalMode::All {
        let (lo, hi) = d[n].range(region);
        c.time_lower = lo - LOCAL_MARGIN;
        c.time_upper = hi + LOCAL_MARGIN;
    }
    Some(c)
}

/// [`LocalLipschitz`] provider backed by [`polynomial_local_lipschitz`].
pub struct PolynomialLocal<P> {
    pub plant: P,
    pub mode: LocalMode,
}

impl<P: Plant> LocalLipschitz for PolynomialLocal<P> {
    fn constants(&self, f: FnId, region: &Region) -> Option<FnConstants> {
        polynomial_local_lipschitz(&self.plant, f, region, self.mode)
    }
}

fn fc(lower: [f64; 2], upper: [f64; 2], tl: f64, tu: f64) -> FnConstants {
    FnConstants { lower: lower.to_vec(), upper: upper.to_vec(), time_lower: tl, time_upper: tu }
}

/// Second-derivative bounds of the cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MPreset {
    /// Bounds that contain the true Hessian.
    #[default]
    Valid,
    /// Deliberately wrong bounds that underestimate the curvature.
    Bad,
}

/// Global constants for a built-in plant.
pub fn plant_constants(plant: BuiltinPlant, m: MPreset) -> LipschitzSet {
    let (t1, t2) = match plant {
        BuiltinPlant::DegradingPlus => ((-1e-3, 1e-3), (2e-3, 2e-3)),
        BuiltinPlant::DegradingMinus => ((-1e-3, 1e-3), (-2e-3, -2e-3)),
        _ => ((0.0, 0.0), (0.0, 0.0)),
    };
    let constraints = vec![fc([-10.0, 0.0], [3.0, 2.0], t1.0, t1.1), fc([-2.0, 0.0], [3.0, 2.0], t2.0, t2.1)];
    let cost = match plant {
        BuiltinPlant::Static => fc([-2.0, -0.8], [0.0, 0.8], 0.0, 0.0),
        BuiltinPlant::DegradingPlus | BuiltinPlant::DegradingMinus => fc([-2.0, -1.6], [0.0, 0.8], -4e-3, 4e-3),
        BuiltinPlant::Unconstrained => fc([-1.4, -0.8], [0.6, 0.8], 0.0, 0.0),
        BuiltinPlant::SwitchingCost => fc([-2.0, -1.2], [1.5, 0.8], 0.0, 0.0),
    };
    let (m_lower, m_upper) = match m {
        MPreset::Valid => (vec![vec![1.0, -1.0], vec![-1.0, 1.0]], vec![vec![3.0, 1.0], vec![1.0, 3.0]]),
        MPreset::Bad => (vec![vec![0.1, -2.0], vec![-2.0, 0.1]], vec![vec![0.5, -1.5], vec![-1.5, 0.5]]),
    };
    LipschitzSet { constraints, cost, m_lower, m_upper, local: None }
}

/// Concavity and convexity declared for the built-in plants.
pub fn plant_structure() -> StructureInfo {
    StructureInfo {
        conc_g: vec![Concavity::new(&[0, 1], false), Concavity::new(&[1], true)],
        conv_cost: Concavity::new(&[0, 1], true),
        conc_cost: Concavity::none(),
    }
}

/// Measurement noise applied by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation, shared by every measured function.
    pub sigma: f64,
    /// Redraw samples beyond three standard deviations.
    #[serde(default)]
    pub truncate: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.0, truncate: false }
    }
}

/// Stream identifiers of the per-function generators.
fn stream(f: FnId, gradient: bool) -> u64 {
    let base = match f {
        FnId::Cost => 0,
        FnId::Constraint(j) => 1 + j as u64,
    };
    if gradient {
        1000 + base
    } else {
        base
    }
}

fn substream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Gaussian measurement noise with one generator per function.
#[derive(Clone, Debug)]
pub struct NoiseGenerator {
    spec: NoiseSpec,
    cost: ChaCha8Rng,
    constraints: Vec<ChaCha8Rng>,
}

impl NoiseGenerator {
    pub fn new(seed: u64, n_gp: usize, spec: NoiseSpec) -> Self {
        Self {
            spec,
            cost: substream(seed, stream(FnId::Cost, false)),
            constraints: (0..n_gp).map(|j| substream(seed, stream(FnId::Constraint(j), false))).collect(),
        }
    }

    pub fn draw(&mut self, f: FnId) -> f64 {
        if self.spec.sigma == 0.0 {
            return 0.0;
        }
        let normal = Normal::new(0.0, self.spec.sigma).expect("finite sigma");
        let rng = match f {
            FnId::Cost => &mut self.cost,
            FnId::Constraint(j) => &mut self.constraints[j],
        };
        loop {
            let w = normal.sample(rng);
            if !self.spec.truncate || w.abs() <= 3.0 * self.spec.sigma {
                return w;
            }
        }
    }
}

/// Noisy measurement of every experimental function.
pub fn measure(plant: &dyn Plant, u: &[f64], tau: f64, noise: &mut NoiseGenerator) -> Measurement {
    let g_hat = (0..plant.n_gp()).map(|j| plant.constraint(j, u, tau) + noise.draw(FnId::Constraint(j))).collect();
    Measurement { u: u.to_vec(), time: tau, cost_hat: Some(plant.cost(u, tau) + noise.draw(FnId::Cost)), g_hat }
}

/// True derivatives plus uniform errors of size `α_σ (κ̄ - κ̲)`, with a box
/// of the same half-width around the estimate.
pub fn artificial_gradient<R: Rng + ?Sized>(
    plant: &dyn Plant,
    f: FnId,
    u: &[f64],
    tau: f64,
    alpha: f64,
    global: &FnConstants,
    rng: &mut R,
) -> GradientEstimate {
    let (g, gt) = plant.gradient(f, u, tau);
    let mut estimate = Vec::with_capacity(g.len());
    let mut lower = Vec::with_capacity(g.len());
    let mut upper = Vec::with_capacity(g.len());
    for (i, gi) in g.iter().enumerate() {
        let w = alpha * (global.upper[i] - global.lower[i]);
        let e = gi + w * rng.random_range(-1.0..=1.0);
        estimate.push(e);
        lower.push(e - w);
        upper.push(e + w);
    }
    let wt = alpha * (global.time_upper - global.time_lower);
    let et = gt + wt * rng.random_range(-1.0..=1.0);
    GradientEstimate {
        at_u: u.to_vec(),
        at_time: tau,
        estimate,
        lower,
        upper,
        time: Some(TimeDerivative { estimate: et, lower: et - wt, upper: et + wt }),
    }
}

/// Gradient oracle built on [`artificial_gradient`].
pub struct ArtificialOracle<P> {
    pub plant: P,
    pub alpha: f64,
    pub constants: LipschitzSet,
    cost: ChaCha8Rng,
    constraints: Vec<ChaCha8Rng>,
}

impl<P: Plant> ArtificialOracle<P> {
    pub fn new(plant: P, alpha: f64, constants: LipschitzSet, seed: u64) -> Self {
        let n_gp = plant.n_gp();
        Self {
            plant,
            alpha,
            constants,
            cost: substream(seed, stream(FnId::Cost, true)),
            constraints: (0..n_gp).map(|j| substream(seed, stream(FnId::Constraint(j), true))).collect(),
        }
    }
}

impl<P: Plant> GradientOracle for ArtificialOracle<P> {
    fn estimate(&mut self, u: &[f64], tau: f64) -> PointGradients {
        let cost = artificial_gradient(&self.plant, FnId::Cost, u, tau, self.alpha, &self.constants.cost, &mut self.cost);
        let constraints = (0..self.plant.n_gp())
            .map(|j| {
                let f = FnId::Constraint(j);
                Some(artificial_gradient(&self.plant, f, u, tau, self.alpha, &self.constants.constraints[j], &mut self.constraints[j]))
            })
            .collect();
        PointGradients { cost: Some(cost), constraints }
    }
}

/// Best point of a uniform `n × n` grid satisfying every constraint at
/// time `tau`.
pub fn grid_optimum(plant: &dyn Plant, tau: f64, n: usize) -> (Vec<f64>, f64) {
    let lo = plant.lower();
    let hi = plant.upper();
    let num = plant.numerical_constraints();
    let mut best = (lo.clone(), f64::INFINITY);
    let mut u = vec![0.0; 2];
    for a in 0..n {
        u[0] = lo[0] + (hi[0] - lo[0]) * a as f64 / (n - 1) as f64;
        for b in 0..n {
            u[1] = lo[1] + (hi[1] - lo[1]) * b as f64 / (n - 1) as f64;
            let c = plant.cost(&u, tau);
            if c >= best.1 {
                continue;
            }
            if (0..plant.n_gp()).all(|j| plant.constraint(j, &u, tau) <= 0.0) && num.iter().all(|g| g.value(&u) <= 0.0) {
                best = (u.clone(), c);
            }
        }
    }
    best
}

/// Slacks on the measured constraints with the largest admissible
/// reduction factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackConfig {
    pub d_max: f64,
    /// Violation budget per measured constraint.
    pub budgets: Vec<f64>,
}

/// One closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: BuiltinPlant,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    pub u0: Vec<f64>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Relative size of gradient errors; zero gives exact gradients.
    #[serde(default)]
    pub alpha_sigma: f64,
    #[serde(default)]
    pub delta_e: f64,
    #[serde(default)]
    pub local: LocalMode,
    #[serde(default)]
    pub m: MPreset,
    /// Replaces the preset cost constants.
    #[serde(default)]
    pub cost_constants: Option<FnConstants>,
    /// Declare the plant's concavity and convexity.
    #[serde(default = "yes")]
    pub structure: bool,
    #[serde(default)]
    pub slacks: Option<SlackConfig>,
    #[serde(default = "yes")]
    pub safeguard: bool,
    #[serde(default = "yes")]
    pub second_order_check: bool,
    #[serde(default)]
    pub excitation: bool,
    #[serde(default)]
    pub fallback: FallbackRule,
    /// Projection seeds; derived from the plant ranges when absent.
    #[serde(default)]
    pub projection: Option<ProjectionParams>,
}

fn yes() -> bool {
    true
}

impl ScenarioConfig {
    /// Configuration-level checks. Problem-level checks happen when the
    /// advisor is built.
    pub fn validate(&self) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let plant = self.plant;
        if self.iterations == 0 {
            out.push(ValidationIssue::new("iterations", "must be at least 1"));
        }
        if plant.is_degrading() && self.iterations as f64 > TAU_BAR + 1.0 {
            out.push(ValidationIssue::new("iterations", format!("degrading plants are only defined up to time {TAU_BAR}")));
        }
        if self.u0.len() != plant.n_u() {
            out.push(ValidationIssue::new("u0", format!("expected {} entries", plant.n_u())));
        } else if !self.u0.iter().zip(plant.lower().iter().zip(plant.upper())).all(|(x, (l, h))| *x >= *l && *x <= h) {
            out.push(ValidationIssue::new("u0", "must lie inside the box"));
        }
        if !(self.noise.sigma >= 0.0) || !self.noise.sigma.is_finite() {
            out.push(ValidationIssue::new("noise.sigma", "must be finite and nonnegative"));
        }
        let min_width = plant.lower().iter().zip(plant.upper()).map(|(l, h)| h - l).fold(f64::INFINITY, f64::min);
        if !(self.delta_e >= 0.0 && self.delta_e < 0.5 * min_width) {
            out.push(ValidationIssue::new("delta_e", "must be nonnegative and below half the smallest box width"));
        }
        if !(self.alpha_sigma >= 0.0) {
            out.push(ValidationIssue::new("alpha_sigma", "must be nonnegative"));
        }
        if let Some(s) = &self.slacks {
            if s.budgets.len() != plant.n_gp() {
                out.push(ValidationIssue::new("slacks.budgets", format!("expected {} entries", plant.n_gp())));
            }
        }
        out
    }

    fn horizon(&self) -> f64 {
        if self.plant.is_degrading() {
            TAU_BAR.min(self.iterations as f64)
        } else {
            0.0
        }
    }

    /// Seeds derived from function ranges over the box and the horizon.
    pub fn default_projection(&self) -> ProjectionParams {
        let p = self.plant;
        let (lo, hi) = (p.lower(), p.upper());
        let n = 41;
        let num = p.numerical_constraints();
        let mut gmin = vec![f64::INFINITY; p.n_gp()];
        let mut nmin = vec![f64::INFINITY; num.len()];
        let mut cmin = f64::INFINITY;
        for tau in [0.0, self.horizon()] {
            for a in 0..n {
                for b in 0..n {
                    let u = [
                        lo[0] + (hi[0] - lo[0]) * a as f64 / (n - 1) as f64,
                        lo[1] + (hi[1] - lo[1]) * b as f64 / (n - 1) as f64,
                    ];
                    for (j, m) in gmin.iter_mut().enumerate() {
                        *m = m.min(p.constraint(j, &u, tau));
                    }
                    for (c, m) in num.iter().zip(nmin.iter_mut()) {
                        *m = m.min(c.value(&u));
                    }
                    cmin = cmin.min(p.cost(&u, tau));
                }
            }
        }
        let seed = |m: f64| (-m).max(1e-3);
        let gp: Vec<f64> = gmin.iter().map(|m| seed(*m)).collect();
        let g: Vec<f64> = nmin.iter().map(|m| seed(*m)).collect();
        ProjectionParams {
            eps_p: gp.clone(),
            eps: g.clone(),
            delta_gp: gp,
            delta_g: g,
            delta_phi: (p.cost(&self.u0, 0.0) - cmin).max(1e-3),
        }
    }

    /// Problem, constants, structure and advisor settings for this run.
    pub fn build(&self) -> Result<(ProblemSpec, LipschitzSet, StructureInfo, AdvisorConfig), ScfoError> {
        let issues = self.validate();
        if !issues.is_empty() {
            return Err(ValidationErrors(issues).into());
        }
        let p = self.plant;
        let spec = ProblemSpec {
            n_u: p.n_u(),
            u_lower: p.lower(),
            u_upper: p.upper(),
            n_gp: p.n_gp(),
            numerical_constraints: p.numerical_constraints(),
            cost_kind: CostKind::Experimental,
            constraint_scale: None,
        };
        let mut lip = plant_constants(p, self.m);
        if let Some(c) = &self.cost_constants {
            lip.cost = c.clone();
        }
        if self.local != LocalMode::None {
            lip.local = Some(Arc::new(PolynomialLocal { plant: p, mode: self.local }));
        }
        let structure = if self.structure { plant_structure() } else { StructureInfo::none(p.n_gp()) };
        let noise_kind = NoiseKind::Gaussian { sigma: self.noise.sigma };
        let slacks = match &self.slacks {
            Some(s) => SlackPolicy {
                experimental: s.budgets.iter().map(|b| SlackSpec::with_largest_beta(s.d_max, *b)).collect(),
                numerical: vec![SlackSpec::hard(); spec.n_g()],
            },
            None => SlackPolicy::hard(spec.n_gp, spec.n_g()),
        };
        let config = AdvisorConfig {
            delta_e: self.delta_e,
            projection: self.projection.clone().unwrap_or_else(|| self.default_projection()),
            slacks,
            noise: NoiseModel::uniform(noise_kind, p.n_gp()),
            delta_r_min: 1e-6,
            safeguard: self.safeguard,
            second_order_check: self.second_order_check,
            fallback: self.fallback,
            excitation: self.excitation,
            seed: self.seed,
        };
        Ok((spec, lip, structure, config))
    }
}

/// One trajectory row: record `k` and the advice computed right after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub k: usize,
    pub tau: f64,
    pub u: Vec<f64>,
    pub cost_true: f64,
    pub cost_measured: f64,
    pub g_true: Vec<f64>,
    pub g_numerical: Vec<f64>,
    /// Slacks of the measured constraints in force at this record.
    pub slacks: Vec<f64>,
    pub gain: f64,
    pub k_star: usize,
    pub scenario: String,
}

/// Aggregates of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub plant: String,
    pub seed: u64,
    pub iterations: usize,
    pub final_cost: f64,
    /// Grid optimum at the final time.
    pub oracle_cost: f64,
    pub oracle_gap: f64,
    /// `Σ_k max(0, g_j(u_k, τ_k))` per measured constraint.
    pub violation_integrals: Vec<f64>,
    pub numerical_violation_integrals: Vec<f64>,
    /// Records where a measured constraint exceeded its slack.
    pub slack_exceedances: usize,
    pub scenario_counts: std::collections::BTreeMap<String, usize>,
    pub warnings: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub rows: Vec<TrajectoryRow>,
    pub summary: RunSummary,
}

/// Grid resolution of the oracle used in summaries.
pub const ORACLE_GRID: usize = 2001;

/// Runs the closed loop. Record `k` is taken at time `τ = k`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, ScfoError> {
    run_scenario_with(cfg, ORACLE_GRID)
}

/// [`run_scenario`] with a chosen oracle grid size (zero skips the oracle).
pub fn run_scenario_with(cfg: &ScenarioConfig, oracle_grid: usize) -> Result<RunOutcome, ScfoError> {
    let start = Instant::now();
    let (spec, lip, structure, config) = cfg.build()?;
    let plant = cfg.plant;
    let global = lip.clone();
    let mut advisor = Advisor::new(spec, lip, structure, config)?;
    let mut noise = NoiseGenerator::new(cfg.seed, plant.n_gp(), cfg.noise);
    let mut oracle = ArtificialOracle::new(plant, cfg.alpha_sigma, global, cfg.seed);
    let num = plant.numerical_constraints();
    let mut history = History::new();
    let mut rows = Vec::with_capacity(cfg.iterations);
    let mut u = cfg.u0.clone();
    let mut warnings = 0;
    let mut counts = std::collections::BTreeMap::new();
    let mut switched = false;
    for k in 0..cfg.iterations {
        let tau = k as f64;
        if plant == BuiltinPlant::SwitchingCost && tau > SWITCH_AFTER && !switched {
            history.forget_cost(k);
            switched = true;
        }
        let m = measure(&plant, &u, tau, &mut noise);
        let grads = oracle.estimate(&u, tau);
        let measured_cost = m.cost_hat.unwrap();
        history.push_with_gradients(m, Some(grads))?;
        let advice = advisor.advise(&mut history, &mut oracle, tau + 1.0, Some(tau + 2.0), None)?;
        warnings += advice.diagnostics.warnings.len();
        *counts.entry(advice.scenario.tag()).or_insert(0) += 1;
        rows.push(TrajectoryRow {
            k,
            tau,
            u: u.clone(),
            cost_true: plant.cost(&u, tau),
            cost_measured: measured_cost,
            g_true: (0..plant.n_gp()).map(|j| plant.constraint(j, &u, tau)).collect(),
            g_numerical: num.iter().map(|c| c.value(&u)).collect(),
            slacks: advisor.slack_trace()[k].experimental.clone(),
            gain: advice.gain,
            k_star: advice.k_star,
            scenario: advice.scenario.tag(),
        });
        u = advice.u_next;
    }
    let last = rows.last().expect("at least one iteration");
    let oracle_cost = if oracle_grid > 1 { grid_optimum(&plant, last.tau, oracle_grid).1 } else { f64::NAN };
    let integral = |vals: &dyn Fn(&TrajectoryRow) -> Vec<f64>, n: usize| -> Vec<f64> {
        (0..n).map(|j| rows.iter().map(|r| vals(r)[j].max(0.0)).sum()).collect()
    };
    let violation_integrals = integral(&|r| r.g_true.clone(), plant.n_gp());
    let numerical_violation_integrals = integral(&|r| r.g_numerical.clone(), num.len());
    let slack_exceedances = rows
        .iter()
        .map(|r| r.g_true.iter().zip(&r.slacks).filter(|(g, d)| g > d).count())
        .sum();
    let summary = RunSummary {
        plant: plant.name(),
        seed: cfg.seed,
        iterations: cfg.iterations,
        final_cost: last.cost_true,
        oracle_cost,
        oracle_gap: last.cost_true - oracle_cost,
        violation_integrals,
        numerical_violation_integrals,
        slack_exceedances,
        scenario_counts: counts,
        warnings,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { rows, summary })
}
