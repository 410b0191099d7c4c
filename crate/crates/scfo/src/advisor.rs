//! One full advice cycle: consistency checks, value intervals, slack update,
//! reference choice, target, projection, gain and optional excitation.
//!
//! The caller owns the [`History`] and must guarantee that record 0 was run
//! at a point whose `δ_e` ball is feasible and inside the compressed box.
//! That requirement cannot be verified from data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    norm, Advice, AdviceDiagnostics, CostKind, FnId, History, LipschitzSet, PointGradients, ProblemSpec,
    ProjectionParams, ReferenceBranch, Scenario, ScfoError, SlackPolicy, SlackState, StepBranch, StructureInfo,
    ValidationErrors, ValidationIssue,
};
use crate::core::NoiseModel;
use crate::pretreat::{
    compute_intervals, conservative_intervals, consistency_check_first_order_from, consistency_check_second_order_from,
    IntervalOptions, SecondOrder,
};
use crate::projection::{project_target, CostGradient, ProjectionInput};
use crate::reference::{select_reference, FallbackRule, ReferenceInput};
use crate::stepper::{
    excitation_override, max_gain_search, min_cost_gain_search, step_is_exciting, update_slacks, GainVariant,
    StepContext,
};

/// Supplies gradient estimates (with boxes) at a point and time.
pub trait GradientOracle {
    fn estimate(&mut self, u: &[f64], tau: f64) -> PointGradients;
}

impl<F: FnMut(&[f64], f64) -> PointGradients> GradientOracle for F {
    fn estimate(&mut self, u: &[f64], tau: f64) -> PointGradients {
        self(u, tau)
    }
}

/// Tuning of the advisor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvisorConfig {
    /// Excitation radius `δ_e`.
    pub delta_e: f64,
    /// Seeds of the projection parameters.
    pub projection: ProjectionParams,
    pub slacks: SlackPolicy,
    pub noise: NoiseModel,
    #[serde(default = "default_delta_r_min")]
    pub delta_r_min: f64,
    /// Apply the necessary cost-decrease test in the gain search.
    #[serde(default = "yes")]
    pub safeguard: bool,
    /// Run the second-order consistency check on `M`.
    #[serde(default = "yes")]
    pub second_order_check: bool,
    #[serde(default)]
    pub fallback: FallbackRule,
    /// Replace insufficiently exciting steps.
    #[serde(default)]
    pub excitation: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_delta_r_min() -> f64 {
    1e-6
}

fn yes() -> bool {
    true
}

impl AdvisorConfig {
    /// Configuration with hard constraints, no noise and default options.
    pub fn new(spec: &ProblemSpec, delta_e: f64, projection: ProjectionParams) -> Self {
        Self {
            delta_e,
            projection,
            slacks: SlackPolicy::hard(spec.n_gp, spec.n_g()),
            noise: NoiseModel::uniform(crate::core::NoiseKind::none(), spec.n_gp),
            delta_r_min: default_delta_r_min(),
            safeguard: true,
            second_order_check: true,
            fallback: FallbackRule::Auto,
            excitation: false,
            seed: 0,
        }
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Vec<ValidationIssue> {
        let mut out = Vec::new();
        let min_width = spec.u_lower.iter().zip(&spec.u_upper).map(|(l, u)| u - l).fold(f64::INFINITY, f64::min);
        if !(self.delta_e >= 0.0) {
            out.push(ValidationIssue::new("delta_e", "must be nonnegative"));
        } else if !(self.delta_e < 0.5 * min_width) {
            out.push(ValidationIssue::new("delta_e", "must be below half the smallest box width"));
        }
        if !(self.delta_r_min > 0.0) {
            out.push(ValidationIssue::new("delta_r_min", "must be strictly positive"));
        }
        if self.noise.constraints.len() != spec.n_gp {
            out.push(ValidationIssue::new("noise.constraints", format!("expected {} entries", spec.n_gp)));
        }
        out.extend(self.projection.validate(spec.n_gp, spec.n_g()));
        out.extend(self.slacks.validate(spec.n_gp, spec.n_g()));
        out
    }
}

/// Steepest-descent target from the reference, scaled to the box diagonal
/// and clipped to the box.
pub fn default_target(u_ref: &[f64], grad: &[f64], spec: &ProblemSpec) -> Vec<f64> {
    let g = norm(grad);
    if g == 0.0 || !g.is_finite() {
        return u_ref.to_vec();
    }
    let diag: Vec<f64> = spec.u_upper.iter().zip(&spec.u_lower).map(|(u, l)| u - l).collect();
    let lambda = norm(&diag) / g.max(1e-300);
    (0..u_ref.len()).map(|i| (u_ref[i] - lambda * grad[i]).clamp(spec.u_lower[i], spec.u_upper[i])).collect()
}

type ExcitationTest = Box<dyn Fn(&[f64], &[f64], f64) -> bool + Send + Sync>;

/// Advice session over one history.
pub struct Advisor {
    spec: ProblemSpec,
    lip: LipschitzSet,
    structure: StructureInfo,
    config: AdvisorConfig,
    rng: ChaCha8Rng,
    /// `slack_trace[k]` holds the slacks for record `k`.
    slack_trace: Vec<SlackState>,
    checked: usize,
    exciting: ExcitationTest,
}

impl std::fmt::Debug for Advisor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Advisor").field("lip", &self.lip).field("checked", &self.checked).finish()
    }
}

impl Advisor {
    pub fn new(spec: ProblemSpec, lip: LipschitzSet, structure: StructureInfo, config: AdvisorConfig) -> Result<Self, ScfoError> {
        let mut issues = match crate::core::validate_problem(&spec, &lip, &structure) {
            Ok(()) => Vec::new(),
            Err(e) => e.0,
        };
        issues.extend(config.validate(&spec));
        if !issues.is_empty() {
            return Err(ValidationErrors(issues).into());
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let slack_trace = vec![config.slacks.initial_state()];
        Ok(Self {
            spec,
            lip,
            structure,
            config,
            rng,
            slack_trace,
            checked: 0,
            exciting: Box::new(step_is_exciting),
        })
    }

    /// Replaces the test deciding whether a step is exciting enough.
    pub fn set_excitation_test(&mut self, test: ExcitationTest) {
        self.exciting = test;
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    /// Constants after all consistency widening so far.
    pub fn lipschitz(&self) -> &LipschitzSet {
        &self.lip
    }

    pub fn config(&self) -> &AdvisorConfig {
        &self.config
    }

    /// Slacks in force at each record processed so far, plus the next one.
    pub fn slack_trace(&self) -> &[SlackState] {
        &self.slack_trace
    }

    fn experimental_fns(&self) -> Vec<FnId> {
        let mut f: Vec<FnId> = (0..self.spec.n_gp).map(FnId::Constraint).collect();
        if self.spec.cost_kind.is_experimental() {
            f.push(FnId::Cost);
        }
        f
    }

    fn check_history(&self, history: &History) -> Result<(), ScfoError> {
        if history.is_empty() {
            return Err(ScfoError::EmptyHistory);
        }
        for (k, r) in history.records().iter().enumerate() {
            if r.u.len() != self.spec.n_u || r.g_hat.len() != self.spec.n_gp {
                return Err(ScfoError::Dimension(format!("record {k} has the wrong shape")));
            }
        }
        if self.spec.cost_kind.is_experimental() && history.last().unwrap().cost_hat.is_none() {
            return Err(ScfoError::Dimension("latest record lacks a cost measurement".into()));
        }
        Ok(())
    }

    /// Widens the constants for records added since the last call.
    fn pretreat(&mut self, history: &History, warnings: &mut Vec<String>) -> Vec<usize> {
        let mut iterations = Vec::new();
        for f in self.experimental_fns() {
            let bounds = conservative_intervals(history, &self.config.noise, f);
            let out = consistency_check_first_order_from(history, &bounds, self.lip.function(f), self.checked);
            if !out.converged {
                warnings.push(format!("first-order consistency for {f:?} stopped before every pair was consistent"));
            }
            iterations.push(out.iterations);
            *self.lip.function_mut(f) = out.constants;
        }
        if self.spec.cost_kind.is_experimental() && self.config.second_order_check {
            let bounds = conservative_intervals(history, &self.config.noise, FnId::Cost);
            let m = SecondOrder { m_lower: self.lip.m_lower.clone(), m_upper: self.lip.m_upper.clone() };
            let out = consistency_check_second_order_from(history, &bounds, &self.lip.cost, &m, self.checked);
            if !out.converged {
                warnings.push("second-order consistency stopped before every pair was consistent".to_string());
            }
            self.lip.m_lower = out.constants.m_lower;
            self.lip.m_upper = out.constants.m_upper;
        }
        self.checked = history.len();
        iterations
    }

    /// Applies the slack law to every record that has not been seen yet.
    fn advance_slacks(&mut self, history: &History) {
        while self.slack_trace.len() <= history.len() {
            let k = self.slack_trace.len() - 1;
            let u = &history.records()[k].u;
            let exp: Vec<f64> = history.intervals[k].constraints.iter().map(|i| i.upper).collect();
            let num: Vec<f64> = self.spec.numerical_constraints.iter().map(|c| c.value(u)).collect();
            let next = update_slacks(&self.slack_trace[k], &self.config.slacks, &exp, &num);
            self.slack_trace.push(next);
        }
    }

    /// Computes the next experiment.
    ///
    /// `tau_next` is the time of the next experiment and `tau_after` the
    /// time of the one after it, when known. `target` replaces the default
    /// steepest-descent target. Value intervals are written back into
    /// `history`.
    pub fn advise(
        &mut self,
        history: &mut History,
        oracle: &mut dyn GradientOracle,
        tau_next: f64,
        tau_after: Option<f64>,
        target: Option<&[f64]>,
    ) -> Result<Advice, ScfoError> {
        self.check_history(history)?;
        let tau_k = history.last().unwrap().time;
        if !(tau_next >= tau_k) || tau_after.is_some_and(|t| !(t >= tau_next)) {
            return Err(ScfoError::NonMonotoneTime { previous: tau_k, time: tau_next });
        }
        if let Some(t) = target {
            if t.len() != self.spec.n_u {
                return Err(ScfoError::Dimension("target has the wrong length".into()));
            }
        }
        let mut warnings = Vec::new();
        let consistency_iterations = self.pretreat(history, &mut warnings);
        let exp_cost = self.spec.cost_kind.is_experimental();
        history.intervals = compute_intervals(
            history,
            &self.lip,
            &self.structure,
            &self.config.noise,
            exp_cost,
            IntervalOptions { delta_r_min: self.config.delta_r_min, ..IntervalOptions::default() },
        );
        self.advance_slacks(history);
        let slacks = self.slack_trace[history.len()].clone();
        let delta_e = self.config.delta_e;

        let rin = ReferenceInput {
            history,
            spec: &self.spec,
            lip: &self.lip,
            structure: &self.structure,
            slacks: &slacks,
            delta_e,
            tau_next,
        };
        let choice = select_reference(&rin, self.config.fallback)?;
        warnings.extend(choice.warnings.iter().cloned());
        let k_star = choice.k_star;
        let u_ref = history.records()[k_star].u.clone();
        let backed = rin.backed_off(k_star);

        let grads = oracle.estimate(&u_ref, tau_next);
        let cost_grad = match &self.spec.cost_kind {
            CostKind::Experimental => match grads.cost.as_ref() {
                Some(g) => CostGradient::Experimental(g),
                None => return Err(ScfoError::Dimension("oracle returned no cost gradient".into())),
            },
            CostKind::Numerical { grad, .. } => CostGradient::Numerical(grad(&u_ref)),
        };
        let target = match target {
            Some(t) => t.to_vec(),
            None => {
                let g = match &cost_grad {
                    CostGradient::Experimental(g) => g.estimate.clone(),
                    CostGradient::Numerical(g) => g.clone(),
                };
                default_target(&u_ref, &g, &self.spec)
            }
        };
        let (lower, upper) = self.spec.compressed_box(delta_e);
        let numerical: Vec<(Vec<f64>, f64)> = self
            .spec
            .numerical_constraints
            .iter()
            .zip(&backed.numerical)
            .map(|(c, m)| (c.gradient(&u_ref), *m))
            .collect();
        let constraint_grads = (0..self.spec.n_gp).map(|j| grads.constraints.get(j).and_then(|g| g.as_ref())).collect();
        let pin = ProjectionInput {
            u_ref: &u_ref,
            target: &target,
            lower,
            upper,
            seeds: &self.config.projection,
            backed_off: &backed.experimental,
            constraint_grads,
            numerical,
            slacks: &slacks,
            cost: cost_grad,
        };
        let proj = project_target(&pin);

        let ctx = StepContext {
            history,
            spec: &self.spec,
            lip: &self.lip,
            structure: &self.structure,
            slacks: &slacks,
            delta_e,
            k_star,
            target: &proj.point,
            tau_next,
            tau_after,
            cost_box: proj.cost_box.as_ref().map(|(l, u)| (l.as_slice(), u.as_slice())),
            safeguard: self.config.safeguard,
        };
        let gain = if exp_cost { max_gain_search(&ctx) } else { min_cost_gain_search(&ctx) };
        let mut u_next = ctx.point(gain.gain);
        let mut overridden = false;
        if self.config.excitation && delta_e > 0.0 {
            if self.spec.in_box(&u_ref, delta_e) {
                let (u, o) = excitation_override(&u_next, &u_ref, delta_e, &mut self.rng, &*self.exciting);
                u_next = u;
                overridden = o;
            } else if !(self.exciting)(&u_next, &u_ref, delta_e) {
                warnings.push("reference outside the compressed box; excitation skipped".to_string());
            }
        }
        for (i, x) in u_next.iter_mut().enumerate() {
            *x = x.clamp(self.spec.u_lower[i], self.spec.u_upper[i]);
        }
        let step = if overridden {
            StepBranch::Excitation
        } else {
            match gain.variant {
                GainVariant::Full => StepBranch::LineSearch,
                GainVariant::Relaxed => StepBranch::Relaxed,
                GainVariant::Zero => StepBranch::ZeroGain,
            }
        };
        let reference = choice.branch;
        debug_assert!(matches!(reference, ReferenceBranch::Primary | ReferenceBranch::Fallback));
        Ok(Advice {
            u_next,
            k_star,
            gain: gain.gain,
            scenario: Scenario { reference, step },
            diagnostics: AdviceDiagnostics {
                reference_rule: choice.rule,
                target,
                projected_target: proj.point.clone(),
                params: proj.params.clone(),
                robustness: proj.robustness,
                projection_status: format!("{:?}", proj.status).to_lowercase(),
                slacks,
                excitation_overridden: overridden,
                consistency_iterations,
                warnings,
            },
        })
    }
}
