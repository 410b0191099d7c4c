//! Choice of the reference record that the next step is built from.
//!
//! The preferred reference is the most recent record that is robustly
//! feasible with back-offs (so that a ball of radius `δ_e` around it is safe
//! at the next experiment time), lies in the compressed box, and whose cost
//! lower bound does not exceed the smallest cost upper bound among the
//! feasible records. When no record qualifies a fallback is used.

use serde::{Deserialize, Serialize};

use crate::core::{
    hi_term, lo_term, FnId, History, ProblemSpec, ReferenceBranch, ReferenceRule, Region, ScfoError, SlackState,
    StructureInfo,
};
use crate::core::LipschitzSet;
use crate::geometry::{experimental_backoff, kappa_m};

/// What to do when no record passes the primary rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackRule {
    /// Always return record 0.
    SafePoint,
    /// Record with the smallest worst-case scaled violation.
    Minimax,
    /// Record 0 while it still satisfies its own backed-off conditions,
    /// otherwise the minimax record with a warning.
    #[default]
    Auto,
}

/// Inputs shared by every reference computation.
#[derive(Clone, Copy)]
pub struct ReferenceInput<'a> {
    pub history: &'a History,
    pub spec: &'a ProblemSpec,
    pub lip: &'a LipschitzSet,
    pub structure: &'a StructureInfo,
    /// Slacks for the next experiment.
    pub slacks: &'a SlackState,
    pub delta_e: f64,
    pub tau_next: f64,
}

/// Robust values at one candidate record.
#[derive(Clone, Debug, PartialEq)]
pub struct BackedOff {
    /// `ḡ + b` per experimental constraint.
    pub experimental: Vec<f64>,
    /// Ball maximum per computable constraint.
    pub numerical: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceChoice {
    pub k_star: usize,
    pub rule: ReferenceRule,
    pub branch: ReferenceBranch,
    /// Records that passed the robust feasibility test, in increasing order.
    pub feasible: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ReferenceInput<'_> {
    fn check(&self) -> Result<(), ScfoError> {
        if self.history.is_empty() {
            return Err(ScfoError::EmptyHistory);
        }
        if self.history.intervals.len() != self.history.len() {
            return Err(ScfoError::Dimension("value intervals have not been computed for every record".into()));
        }
        Ok(())
    }

    /// Back-off of experimental constraint `j` at record `k`.
    pub fn backoff(&self, k: usize, j: usize) -> f64 {
        let rec = &self.history.records()[k];
        let f = FnId::Constraint(j);
        let local = self.lip.local_constants(f, &Region::ball(&rec.u, self.delta_e, rec.time, self.tau_next));
        let grad = self.history.gradient(k, f);
        let conc = &self.structure.conc_g[j];
        let km = kappa_m(conc, &local, grad);
        experimental_backoff(
            conc.eta,
            grad.and_then(|g| g.time).map(|t| t.upper),
            local.time_upper,
            self.tau_next - rec.time,
            self.delta_e,
            &km,
        )
    }

    /// Robust values at record `k`.
    pub fn backed_off(&self, k: usize) -> BackedOff {
        let u = &self.history.records()[k].u;
        let experimental = (0..self.spec.n_gp)
            .map(|j| self.history.intervals[k].constraints[j].upper + self.backoff(k, j))
            .collect();
        let numerical = self.spec.numerical_constraints.iter().map(|c| c.max_over_ball(u, self.delta_e)).collect();
        BackedOff { experimental, numerical }
    }

    /// Robust feasibility of record `k` for the next experiment.
    pub fn is_feasible(&self, k: usize) -> bool {
        let u = &self.history.records()[k].u;
        if !self.spec.in_box(u, self.delta_e) {
            return false;
        }
        let b = self.backed_off(k);
        b.experimental.iter().zip(&self.slacks.experimental).all(|(g, d)| g <= d)
            && b.numerical.iter().zip(&self.slacks.numerical).all(|(g, d)| g <= d)
    }

    /// Worst scaled violation over back-off conditions and the compressed box.
    pub fn minimax_violation(&self, k: usize) -> f64 {
        let u = &self.history.records()[k].u;
        let b = self.backed_off(k);
        let scale = |i: usize| self.spec.constraint_scale.as_ref().map(|s| s[i]).unwrap_or(1.0);
        let n_gp = self.spec.n_gp;
        let mut worst = f64::NEG_INFINITY;
        for (j, (g, d)) in b.experimental.iter().zip(&self.slacks.experimental).enumerate() {
            worst = worst.max((g - d) / scale(j));
        }
        for (j, (g, d)) in b.numerical.iter().zip(&self.slacks.numerical).enumerate() {
            worst = worst.max((g - d) / scale(n_gp + j));
        }
        for i in 0..u.len() {
            worst = worst.max(self.spec.u_lower[i] + self.delta_e - u[i]);
            worst = worst.max(u[i] - self.spec.u_upper[i] + self.delta_e);
        }
        worst
    }

    /// Lower cost prediction of record `k` at time `tau`.
    pub fn cost_lower_at(&self, k: usize, tau: f64) -> f64 {
        let rec = &self.history.records()[k];
        let iv = self.history.intervals[k].cost.expect("cost intervals");
        let dt = tau - rec.time;
        let drift = match self.history.gradient(k, FnId::Cost).and_then(|g| g.time) {
            Some(t) if self.structure.conv_cost.eta => lo_term(t.lower, t.upper, dt),
            _ => {
                let c = self.lip.local_constants(FnId::Cost, &Region::bounding(&[&rec.u], rec.time, tau));
                lo_term(c.time_lower, c.time_upper, dt)
            }
        };
        iv.lower + drift
    }

    /// Upper cost prediction of record `k` at time `tau`.
    pub fn cost_upper_at(&self, k: usize, tau: f64) -> f64 {
        let rec = &self.history.records()[k];
        let iv = self.history.intervals[k].cost.expect("cost intervals");
        let dt = tau - rec.time;
        let drift = match self.history.gradient(k, FnId::Cost).and_then(|g| g.time) {
            Some(t) if self.structure.conc_cost.eta => hi_term(t.lower, t.upper, dt),
            _ => {
                let c = self.lip.local_constants(FnId::Cost, &Region::bounding(&[&rec.u], rec.time, tau));
                hi_term(c.time_lower, c.time_upper, dt)
            }
        };
        iv.upper + drift
    }

    pub fn feasible_set(&self) -> Vec<usize> {
        (0..self.history.len()).filter(|&k| self.is_feasible(k)).collect()
    }
}

/// Ties go to the larger index.
fn argmin_recent(values: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values {
        match best {
            Some((_, b)) if v > b => {}
            _ => best = Some((k, v)),
        }
    }
    best.map(|(k, _)| k)
}

/// Minimax fallback: record with the smallest worst violation.
pub fn minimax_fallback(input: &ReferenceInput<'_>) -> usize {
    argmin_recent((0..input.history.len()).map(|k| (k, input.minimax_violation(k)))).unwrap_or(0)
}

/// Chooses the reference record.
pub fn select_reference(input: &ReferenceInput<'_>, fallback: FallbackRule) -> Result<ReferenceChoice, ScfoError> {
    input.check()?;
    let feasible = input.feasible_set();
    let tau_k = input.history.last().unwrap().time;
    let primary = if feasible.is_empty() {
        None
    } else if let crate::core::CostKind::Numerical { eval, .. } = &input.spec.cost_kind {
        let recs = input.history.records();
        argmin_recent(feasible.iter().map(|&k| (k, eval(&recs[k].u)))).map(|k| (k, ReferenceRule::NumericalCost))
    } else {
        let measured: Vec<usize> = feasible.iter().copied().filter(|&k| input.history.measured(k, FnId::Cost).is_some()).collect();
        if measured.is_empty() {
            feasible.last().map(|&k| (k, ReferenceRule::Primary))
        } else {
            let best_upper = measured.iter().map(|&k| input.cost_upper_at(k, tau_k)).fold(f64::INFINITY, f64::min);
            measured
                .iter()
                .rev()
                .copied()
                .find(|&k| input.cost_lower_at(k, tau_k) <= best_upper)
                .map(|k| (k, ReferenceRule::Primary))
        }
    };
    if let Some((k_star, rule)) = primary {
        return Ok(ReferenceChoice { k_star, rule, branch: ReferenceBranch::Primary, feasible, warnings: Vec::new() });
    }
    let mut warnings = Vec::new();
    let (k_star, rule) = match fallback {
        FallbackRule::SafePoint => (0, ReferenceRule::SafePoint),
        FallbackRule::Minimax => (minimax_fallback(input), ReferenceRule::Minimax),
        FallbackRule::Auto => {
            if input.minimax_violation(0) <= 0.0 {
                (0, ReferenceRule::SafePoint)
            } else {
                warnings.push("initial point no longer satisfies its backed-off conditions; using minimax fallback".to_string());
                (minimax_fallback(input), ReferenceRule::Minimax)
            }
        }
    };
    Ok(ReferenceChoice { k_star, rule, branch: ReferenceBranch::Fallback, feasible, warnings })
}
