//! Filter gain, slack bookkeeping and the excitation override.
//!
//! The next point is `u_{k*} + K (ū* - u_{k*})`. The gain `K` is found by a
//! grid search over `[0, 1]` followed by bisection just above the largest
//! feasible grid point. A pure bisection would be unsound because the set
//! of admissible gains is a union of intervals in general.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{
    hi_term, lo_term, norm, CostKind, FnId, History, LipschitzSet, ProblemSpec, Region, SlackPolicy, SlackState,
    StructureInfo,
};
use crate::geometry::{kappa_m, random_unit};

/// Number of uniform grid points on `[0, 1]`.
pub const GRID_POINTS: usize = 1001;
/// Refinement steps after the grid scan.
pub const REFINE_STEPS: usize = 30;

/// Which gain search produced the step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainVariant {
    /// All conditions including the drift until the experiment after next.
    Full,
    /// Same without the drift term.
    Relaxed,
    /// Neither search admitted a gain.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainOutcome {
    pub gain: f64,
    pub variant: GainVariant,
}

/// Everything the gain search evaluates.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub history: &'a History,
    pub spec: &'a ProblemSpec,
    pub lip: &'a LipschitzSet,
    pub structure: &'a StructureInfo,
    /// Slacks allowed at the next experiment.
    pub slacks: &'a SlackState,
    pub delta_e: f64,
    pub k_star: usize,
    /// Projected target.
    pub target: &'a [f64],
    pub tau_next: f64,
    pub tau_after: Option<f64>,
    /// Tightened cost gradient box at the reference (measured cost only).
    pub cost_box: Option<(&'a [f64], &'a [f64])>,
    /// Whether the necessary cost-decrease test is applied.
    pub safeguard: bool,
}

/// Per-record linear bound of one constraint along the step.
#[derive(Clone, Debug)]
pub struct MarginTable {
    rows: Vec<MarginRow>,
}

#[derive(Clone, Debug)]
struct MarginRow {
    base: f64,
    at: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl MarginTable {
    /// Worst-case upper bound at `u`, minimized over all records.
    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for r in &self.rows {
            let mut v = r.base;
            for i in 0..u.len() {
                v += hi_term(r.lo[i], r.hi[i], u[i] - r.at[i]);
            }
            if v < best {
                best = v;
            }
        }
        best
    }
}

impl StepContext<'_> {
    pub fn u_ref(&self) -> &[f64] {
        &self.history.records()[self.k_star].u
    }

    /// Point reached with gain `k`.
    pub fn point(&self, k: f64) -> Vec<f64> {
        self.u_ref().iter().zip(self.target).map(|(r, t)| r + k * (t - r)).collect()
    }

    fn segment_region(&self, kb: usize) -> Region {
        let rec = &self.history.records()[kb];
        Region::bounding(&[&rec.u, self.u_ref(), self.target], rec.time, self.tau_next)
    }

    /// Linear bounds of experimental constraint `j` along the step, one per
    /// record, extrapolated to the next experiment time.
    pub fn margin_table(&self, j: usize) -> MarginTable {
        let f = FnId::Constraint(j);
        let conc = &self.structure.conc_g[j];
        let rows = (0..self.history.len())
            .map(|kb| {
                let rec = &self.history.records()[kb];
                let local = self.lip.local_constants(f, &self.segment_region(kb));
                let grad = self.history.gradient(kb, f);
                let dt = self.tau_next - rec.time;
                let drift = match grad.and_then(|g| g.time) {
                    Some(t) if conc.eta => hi_term(t.lower, t.upper, dt),
                    _ => hi_term(local.time_lower, local.time_upper, dt),
                };
                let (lo, hi) = (0..rec.u.len())
                    .map(|i| match grad {
                        Some(g) if conc.has(i) => (g.lower[i], g.upper[i]),
                        _ => (local.lower[i], local.upper[i]),
                    })
                    .unzip();
                MarginRow { base: self.history.intervals[kb].constraints[j].upper + drift, at: rec.u.clone(), lo, hi }
            })
            .collect();
        MarginTable { rows }
    }

    /// Drift until the experiment after next and the excitation term, both
    /// for a ball around `u`. Concavity information is not used here.
    fn ahead_terms(&self, j: usize, u: &[f64]) -> (f64, f64) {
        let t1 = self.tau_after.unwrap_or(self.tau_next);
        let local = self.lip.local_constants(FnId::Constraint(j), &Region::ball(u, self.delta_e, self.tau_next, t1));
        let km = kappa_m(&crate::core::Concavity::none(), &local, None);
        let drift = hi_term(local.time_lower, local.time_upper, t1 - self.tau_next);
        (drift, self.delta_e * norm(&km))
    }

    fn cost_tables(&self) -> Option<(MarginTable, f64)> {
        if !self.spec.cost_kind.is_experimental() {
            return None;
        }
        let recs = self.history.records();
        let u_ref = self.u_ref();
        let mut lower_rows = Vec::with_capacity(recs.len());
        let mut rhs = f64::INFINITY;
        for (kb, rec) in recs.iter().enumerate() {
            let iv = self.history.intervals[kb].cost.expect("cost intervals");
            let grad = self.history.gradient(kb, FnId::Cost);
            let dt = self.tau_next - rec.time;
            let local = self.lip.local_constants(FnId::Cost, &self.segment_region(kb));
            let conv = &self.structure.conv_cost;
            let drift_lo = match grad.and_then(|g| g.time) {
                Some(t) if conv.eta => lo_term(t.lower, t.upper, dt),
                _ => lo_term(local.time_lower, local.time_upper, dt),
            };
            // Stored with flipped sign so that MarginTable::eval gives
            // -max_k(lower prediction).
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..rec.u.len())
                .map(|i| match grad {
                    Some(g) if conv.has(i) => (-g.upper[i], -g.lower[i]),
                    _ => (-local.upper[i], -local.lower[i]),
                })
                .unzip();
            lower_rows.push(MarginRow { base: -(iv.lower + drift_lo), at: rec.u.clone(), lo, hi });

            let conc = &self.structure.conc_cost;
            let region = Region::bounding(&[&rec.u, u_ref], rec.time, self.tau_next);
            let lc = self.lip.local_constants(FnId::Cost, &region);
            let mut up = iv.upper
                + match grad.and_then(|g| g.time) {
                    Some(t) if conc.eta => hi_term(t.lower, t.upper, dt),
                    _ => hi_term(lc.time_lower, lc.time_upper, dt),
                };
            for i in 0..rec.u.len() {
                let d = u_ref[i] - rec.u[i];
                up += match grad {
                    Some(g) if conc.has(i) => hi_term(g.lower[i], g.upper[i], d),
                    _ => hi_term(lc.lower[i], lc.upper[i], d),
                };
            }
            rhs = rhs.min(up);
        }
        Some((MarginTable { rows: lower_rows }, rhs))
    }

    /// Sufficient-decrease test `A + K B <= 0` as the pair `(A, B)`.
    fn decrease_terms(&self) -> Option<(f64, f64)> {
        let (lo, hi) = self.cost_box?;
        let u_ref = self.u_ref();
        let d: Vec<f64> = self.target.iter().zip(u_ref).map(|(t, r)| t - r).collect();
        let a: f64 = (0..d.len()).map(|i| hi_term(lo[i], hi[i], d[i])).sum();
        let mut b = 0.0;
        for p in 0..d.len() {
            for q in 0..d.len() {
                b += hi_term(self.lip.m_lower[p][q], self.lip.m_upper[p][q], d[p] * d[q]);
            }
        }
        Some((a, 0.5 * b))
    }
}

/// Left side of the feasibility condition of experimental constraint `j`
/// at gain `k`.
pub fn feasibility_margin(ctx: &StepContext<'_>, j: usize, k: f64) -> f64 {
    ctx.margin_table(j).eval(&ctx.point(k))
}

struct Conditions<'a> {
    ctx: &'a StepContext<'a>,
    tables: Vec<MarginTable>,
    cost: Option<(MarginTable, f64)>,
    decrease: Option<(f64, f64)>,
}

impl<'a> Conditions<'a> {
    fn new(ctx: &'a StepContext<'a>, with_cost: bool) -> Self {
        let tables = (0..ctx.spec.n_gp).map(|j| ctx.margin_table(j)).collect();
        let cost = if with_cost && ctx.safeguard { ctx.cost_tables() } else { None };
        let decrease = if with_cost { ctx.decrease_terms() } else { None };
        Self { ctx, tables, cost, decrease }
    }

    fn holds(&self, k: f64, variant: GainVariant) -> bool {
        let ctx = self.ctx;
        if let Some((a, b)) = self.decrease {
            if a + k * b > 0.0 {
                return false;
            }
        }
        let u = ctx.point(k);
        for (j, t) in self.tables.iter().enumerate() {
            let d = ctx.slacks.experimental[j];
            let m = t.eval(&u);
            if m > d {
                return false;
            }
            let (drift, exc) = ctx.ahead_terms(j, &u);
            let extra = match variant {
                GainVariant::Full => drift + exc,
                _ => exc,
            };
            if m + extra > d {
                return false;
            }
        }
        for (c, d) in ctx.spec.numerical_constraints.iter().zip(&ctx.slacks.numerical) {
            if c.max_over_ball(&u, ctx.delta_e) > *d {
                return false;
            }
        }
        if let Some((lower, rhs)) = &self.cost {
            if -lower.eval(&u) > *rhs {
                return false;
            }
        }
        true
    }
}

fn largest_feasible(ok: &dyn Fn(f64) -> bool) -> Option<f64> {
    let step = 1.0 / (GRID_POINTS - 1) as f64;
    let kg = (0..GRID_POINTS).rev().map(|i| i as f64 * step).find(|&k| ok(k))?;
    if kg >= 1.0 {
        return Some(1.0);
    }
    let (mut lo, mut hi) = (kg, (kg + step).min(1.0));
    for _ in 0..REFINE_STEPS {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

/// Largest admissible gain for a measured cost, trying the full conditions
/// first, then the relaxed ones, then zero.
pub fn max_gain_search(ctx: &StepContext<'_>) -> GainOutcome {
    let cond = Conditions::new(ctx, true);
    if ctx.tau_after.is_some() {
        if let Some(gain) = largest_feasible(&|k| cond.holds(k, GainVariant::Full)) {
            return GainOutcome { gain, variant: GainVariant::Full };
        }
    }
    if let Some(gain) = largest_feasible(&|k| cond.holds(k, GainVariant::Relaxed)) {
        return GainOutcome { gain, variant: GainVariant::Relaxed };
    }
    GainOutcome { gain: 0.0, variant: GainVariant::Zero }
}

fn cost_minimizing(ok: &dyn Fn(f64) -> bool, phi: &dyn Fn(f64) -> f64) -> Option<f64> {
    let step = 1.0 / (GRID_POINTS - 1) as f64;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..GRID_POINTS {
        let k = i as f64 * step;
        if ok(k) {
            let v = phi(k);
            if best.is_none_or(|(_, b)| v <= b) {
                best = Some((k, v));
            }
        }
    }
    let (mut k, mut v) = best?;
    let mut h = step;
    for _ in 0..REFINE_STEPS {
        h *= 0.5;
        for cand in [k - h, k + h] {
            if (0.0..=1.0).contains(&cand) && ok(cand) {
                let c = phi(cand);
                if c < v {
                    k = cand;
                    v = c;
                }
            }
        }
    }
    Some(k)
}

/// Gain minimizing a computable cost along the step among admissible gains.
pub fn min_cost_gain_search(ctx: &StepContext<'_>) -> GainOutcome {
    let CostKind::Numerical { eval, .. } = &ctx.spec.cost_kind else {
        return max_gain_search(ctx);
    };
    let cond = Conditions::new(ctx, false);
    let phi = |k: f64| eval(&ctx.point(k));
    if ctx.tau_after.is_some() {
        if let Some(gain) = cost_minimizing(&|k| cond.holds(k, GainVariant::Full), &phi) {
            return GainOutcome { gain, variant: GainVariant::Full };
        }
    }
    if let Some(gain) = cost_minimizing(&|k| cond.holds(k, GainVariant::Relaxed), &phi) {
        return GainOutcome { gain, variant: GainVariant::Relaxed };
    }
    GainOutcome { gain: 0.0, variant: GainVariant::Zero }
}

/// Reduces every slack whose constraint may have been violated at the
/// latest experiment.
///
/// `experimental_upper` holds upper bounds of the experimental constraints
/// at the latest record and `numerical` the computed constraint values.
pub fn update_slacks(state: &SlackState, policy: &SlackPolicy, experimental_upper: &[f64], numerical: &[f64]) -> SlackState {
    let upd = |d: &[f64], specs: &[crate::core::SlackSpec], v: &[f64]| -> Vec<f64> {
        d.iter()
            .zip(specs)
            .zip(v)
            .map(|((d, s), v)| if *v > 0.0 { d * s.beta } else { *d })
            .collect()
    };
    SlackState {
        experimental: upd(&state.experimental, &policy.experimental, experimental_upper),
        numerical: upd(&state.numerical, &policy.numerical, numerical),
    }
}

/// Default test for a sufficiently exciting step: its length reaches `δ_e`.
pub fn step_is_exciting(u_next: &[f64], u_ref: &[f64], delta_e: f64) -> bool {
    let d: Vec<f64> = u_next.iter().zip(u_ref).map(|(a, b)| a - b).collect();
    norm(&d) >= delta_e
}

/// Replaces a step that fails `exciting` by a random point on the sphere of
/// radius `δ_e` around the reference. Returns the point and whether it was
/// replaced.
pub fn excitation_override<R: Rng + ?Sized>(
    u_next: &[f64],
    u_ref: &[f64],
    delta_e: f64,
    rng: &mut R,
    exciting: &dyn Fn(&[f64], &[f64], f64) -> bool,
) -> (Vec<f64>, bool) {
    if delta_e <= 0.0 || exciting(u_next, u_ref, delta_e) {
        return (u_next.to_vec(), false);
    }
    let dir = random_unit(rng, u_ref.len());
    (u_ref.iter().zip(dir).map(|(r, d)| r + delta_e * d).collect(), true)
}
