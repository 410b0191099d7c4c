//! Data pretreatment.
//!
//! Two jobs happen here before a reference point can be chosen. First, the
//! first- and second-order Lipschitz constants are widened until no pair of
//! past measurements contradicts them. Second, every past measurement gets a
//! lower and upper bound on the true function value, combining repeated
//! measurements at the same point and propagating tight bounds to
//! neighbouring records through the Lipschitz constants.

use crate::core::{
    hi_term, lo_term, FnConstants, FnId, History, Interval, LipschitzSet, NoiseKind, NoiseModel, RecordIntervals, Region,
    StructureInfo,
};

/// Additive noise band `(W_lower, W_upper)` for the average of `n` samples.
pub fn noise_band(kind: NoiseKind, n: usize) -> (f64, f64) {
    let root = (n.max(1) as f64).sqrt();
    match kind {
        NoiseKind::Gaussian { sigma } => {
            let h = 3.0 * sigma / root;
            (-h, h)
        }
        NoiseKind::Chebyshev { mean, sigma, p } => {
            let c = 1.0 / (1.0 - p).sqrt();
            let h = c * sigma / root;
            (mean - h, mean + h)
        }
        NoiseKind::Bounded { half_width } => (-half_width, half_width),
    }
}

/// Single-measurement bounds that do not depend on any Lipschitz constant.
pub fn conservative_intervals(history: &History, noise: &NoiseModel, f: FnId) -> Vec<Interval> {
    let (wl, wu) = noise_band(noise.kind(f), 1);
    (0..history.len())
        .map(|k| {
            let v = history.measured(k, f).unwrap_or(f64::NAN);
            Interval::new(v - wu, v - wl)
        })
        .collect()
}

/// Result of a consistency check.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyOutcome<T> {
    pub constants: T,
    /// Number of growth steps applied.
    pub iterations: usize,
    /// False when the iteration cap was reached with violations remaining,
    /// which happens when two records at the same point and time carry
    /// disjoint intervals.
    pub converged: bool,
}

/// Growth steps are stopped after this many rounds.
pub const CONSISTENCY_MAX_ROUNDS: usize = 50;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One round of the three-phase widening schedule applied to a list of
/// `(lower, upper)` pairs.
fn widen(pairs: &mut [(&mut f64, &mut f64)], a: usize) {
    for (lo, hi) in pairs.iter_mut() {
        if a <= 5 {
            **lo *= 2f64.powf(-sign(**lo));
            **hi *= 2f64.powf(sign(**hi));
        } else if a <= 10 {
            let m = lo.abs().max(hi.abs());
            **lo = -2.0 * m;
            **hi = 2.0 * m;
        } else {
            let s = 2f64.powi((a - 10) as i32);
            **lo *= s;
            **hi *= s;
        }
    }
}

fn widen_fn(c: &mut FnConstants, a: usize) {
    let mut pairs: Vec<(&mut f64, &mut f64)> = c.lower.iter_mut().zip(c.upper.iter_mut()).collect();
    pairs.push((&mut c.time_lower, &mut c.time_upper));
    widen(&mut pairs, a);
}

/// Records without a measurement of the function impose nothing.
fn unmeasured(bounds: &[Interval], k1: usize, k2: usize) -> bool {
    [bounds[k1], bounds[k2]].iter().any(|b| b.lower.is_nan() || b.upper.is_nan())
}

/// Whether the ordered pair `(k1, k2)` satisfies both first-order
/// consistency inequalities.
pub fn first_order_pair_holds(history: &History, bounds: &[Interval], c: &FnConstants, k1: usize, k2: usize) -> bool {
    if unmeasured(bounds, k1, k2) {
        return true;
    }
    let r1 = &history.records()[k1];
    let r2 = &history.records()[k2];
    let dt = r2.time - r1.time;
    let mut up = bounds[k1].upper + hi_term(c.time_lower, c.time_upper, dt);
    let mut down = bounds[k1].lower + lo_term(c.time_lower, c.time_upper, dt);
    for i in 0..r1.u.len() {
        let d = r2.u[i] - r1.u[i];
        up += hi_term(c.lower[i], c.upper[i], d);
        down += lo_term(c.lower[i], c.upper[i], d);
    }
    bounds[k2].lower <= up && bounds[k2].upper >= down
}

/// Every ordered pair violating the first-order inequalities.
pub fn first_order_violations(history: &History, bounds: &[Interval], c: &FnConstants) -> Vec<(usize, usize)> {
    let n = history.len();
    let mut out = Vec::new();
    for k1 in 0..n {
        for k2 in 0..n {
            if k1 != k2 && !first_order_pair_holds(history, bounds, c, k1, k2) {
                out.push((k1, k2));
            }
        }
    }
    out
}

/// Widens the first-order constants of `f` until every pair of records is
/// consistent with the κ-independent bounds `bounds`.
///
/// Widening never invalidates a pair that already holds, so only pairs that
/// failed (or involve records at index `from` and later) are rechecked.
pub fn consistency_check_first_order_from(
    history: &History,
    bounds: &[Interval],
    constants: &FnConstants,
    from: usize,
) -> ConsistencyOutcome<FnConstants> {
    let n = history.len();
    let mut c = constants.clone();
    let mut failing = Vec::new();
    for k1 in 0..n {
        for k2 in 0..n {
            if k1 != k2 && (k1 >= from || k2 >= from) && !first_order_pair_holds(history, bounds, &c, k1, k2) {
                failing.push((k1, k2));
            }
        }
    }
    let mut a = 1;
    while !failing.is_empty() {
        if a > CONSISTENCY_MAX_ROUNDS {
            return ConsistencyOutcome { constants: c, iterations: a - 1, converged: false };
        }
        widen_fn(&mut c, a);
        a += 1;
        failing.retain(|&(k1, k2)| !first_order_pair_holds(history, bounds, &c, k1, k2));
    }
    ConsistencyOutcome { constants: c, iterations: a - 1, converged: true }
}

/// First-order consistency check of one function against its conservative
/// single-measurement bounds.
pub fn consistency_check_first_order(
    history: &History,
    lip: &LipschitzSet,
    noise: &NoiseModel,
    f: FnId,
) -> ConsistencyOutcome<FnConstants> {
    let bounds = conservative_intervals(history, noise, f);
    consistency_check_first_order_from(history, &bounds, lip.function(f), 0)
}

/// Second-order constants of the cost.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrder {
    pub m_lower: Vec<Vec<f64>>,
    pub m_upper: Vec<Vec<f64>>,
}

/// Whether `(k1, k2)` satisfies the second-order inequalities. Pairs whose
/// first record has no cost gradient box are vacuously true.
pub fn second_order_pair_holds(
    history: &History,
    bounds: &[Interval],
    cost: &FnConstants,
    m: &SecondOrder,
    k1: usize,
    k2: usize,
) -> bool {
    let Some(g) = history.gradient(k1, FnId::Cost) else {
        return true;
    };
    if unmeasured(bounds, k1, k2) {
        return true;
    }
    let r1 = &history.records()[k1];
    let r2 = &history.records()[k2];
    let dt = r2.time - r1.time;
    let n = r1.u.len();
    let d: Vec<f64> = (0..n).map(|i| r2.u[i] - r1.u[i]).collect();
    let mut up = bounds[k1].upper + hi_term(cost.time_lower, cost.time_upper, dt);
    let mut down = bounds[k1].lower + lo_term(cost.time_lower, cost.time_upper, dt);
    for i in 0..n {
        up += hi_term(g.lower[i], g.upper[i], d[i]);
        down += lo_term(g.lower[i], g.upper[i], d[i]);
    }
    let mut qu = 0.0;
    let mut ql = 0.0;
    for a in 0..n {
        for b in 0..n {
            let p = d[a] * d[b];
            qu += hi_term(m.m_lower[a][b], m.m_upper[a][b], p);
            ql += lo_term(m.m_lower[a][b], m.m_upper[a][b], p);
        }
    }
    up += 0.5 * qu;
    down += 0.5 * ql;
    bounds[k2].lower <= up && bounds[k2].upper >= down
}

pub fn second_order_violations(history: &History, bounds: &[Interval], cost: &FnConstants, m: &SecondOrder) -> Vec<(usize, usize)> {
    let n = history.len();
    let mut out = Vec::new();
    for k1 in 0..n {
        for k2 in 0..n {
            if k1 != k2 && !second_order_pair_holds(history, bounds, cost, m, k1, k2) {
                out.push((k1, k2));
            }
        }
    }
    out
}

/// Widens `M` until every pair is consistent, with the cost's time
/// constants held at the values fixed by the first-order check.
pub fn consistency_check_second_order_from(
    history: &History,
    bounds: &[Interval],
    cost: &FnConstants,
    m: &SecondOrder,
    from: usize,
) -> ConsistencyOutcome<SecondOrder> {
    let n = history.len();
    let mut m = m.clone();
    let mut failing = Vec::new();
    for k1 in 0..n {
        for k2 in 0..n {
            if k1 != k2 && (k1 >= from || k2 >= from) && !second_order_pair_holds(history, bounds, cost, &m, k1, k2) {
                failing.push((k1, k2));
            }
        }
    }
    let mut a = 1;
    while !failing.is_empty() {
        if a > CONSISTENCY_MAX_ROUNDS {
            return ConsistencyOutcome { constants: m, iterations: a - 1, converged: false };
        }
        {
            let SecondOrder { m_lower, m_upper } = &mut m;
            let mut pairs: Vec<(&mut f64, &mut f64)> =
                m_lower.iter_mut().flatten().zip(m_upper.iter_mut().flatten()).collect();
            widen(&mut pairs, a);
        }
        a += 1;
        failing.retain(|&(k1, k2)| !second_order_pair_holds(history, bounds, cost, &m, k1, k2));
    }
    ConsistencyOutcome { constants: m, iterations: a - 1, converged: true }
}

/// Second-order consistency check of the cost using the gradient boxes
/// stored with each record.
pub fn consistency_check_second_order(history: &History, lip: &LipschitzSet, noise: &NoiseModel) -> ConsistencyOutcome<SecondOrder> {
    let bounds = conservative_intervals(history, noise, FnId::Cost);
    let m = SecondOrder { m_lower: lip.m_lower.clone(), m_upper: lip.m_upper.clone() };
    consistency_check_second_order_from(history, &bounds, &lip.cost, &m, 0)
}

/// Which subsets of a repeated-measurement group are tried.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[derive(Default)]
pub enum GroupPolicy {
    /// Single records and the complete group.
    #[default]
    SingletonsAndFull,
    /// Every nonempty subset when the group has at most `cap` members,
    /// otherwise singletons and the complete group.
    Exhaustive { cap: usize },
}


/// Settings for interval computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntervalOptions {
    pub delta_r_min: f64,
    pub groups: GroupPolicy,
}

impl Default for IntervalOptions {
    fn default() -> Self {
        Self { delta_r_min: 1e-6, groups: GroupPolicy::SingletonsAndFull }
    }
}

/// Intervals of one function plus the number of refinement sweeps used.
#[derive(Clone, Debug, PartialEq)]
pub struct FnIntervals {
    pub intervals: Vec<Interval>,
    pub sweeps: usize,
    /// Upper bound on sweeps implied by the widest starting interval.
    pub sweep_bound: usize,
}

/// Indices of records taken at exactly the same decision point, per record.
fn same_point_groups(history: &History) -> Vec<Vec<usize>> {
    let recs = history.records();
    let n = recs.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for k in 0..n {
        if owner[k].is_some() {
            continue;
        }
        let id = groups.len();
        let mut g = vec![k];
        owner[k] = Some(id);
        for k2 in k + 1..n {
            if owner[k2].is_none() && recs[k2].u == recs[k].u {
                owner[k2] = Some(id);
                g.push(k2);
            }
        }
        groups.push(g);
    }
    (0..n).map(|k| groups[owner[k].unwrap()].clone()).collect()
}

fn subsets(members: &[usize], policy: GroupPolicy) -> Vec<Vec<usize>> {
    let n = members.len();
    let exhaustive = matches!(policy, GroupPolicy::Exhaustive { cap } if n <= cap);
    if exhaustive {
        (1u64..(1u64 << n))
            .map(|mask| (0..n).filter(|b| mask & (1 << b) != 0).map(|b| members[b]).collect())
            .collect()
    } else {
        let mut out: Vec<Vec<usize>> = members.iter().map(|&k| vec![k]).collect();
        if n > 1 {
            out.push(members.to_vec());
        }
        out
    }
}

/// Relaxation settings used for the two bounds of `f`.
struct Sides<'a> {
    /// Used for upper bounds: concave index set and time flag.
    upper: &'a crate::core::Concavity,
    /// Used for lower bounds: convex index set and time flag, if any.
    lower: Option<&'a crate::core::Concavity>,
}

fn sides<'a>(structure: &'a StructureInfo, f: FnId) -> Sides<'a> {
    Sides { upper: structure.concave(f), lower: structure.convex(f) }
}

/// Lower and upper bounds of one function at every record.
///
/// When `trace` is given, the intervals after the repeated-measurement phase
/// and after every refinement sweep are appended to it.
pub fn intervals_for(
    history: &History,
    f: FnId,
    lip: &LipschitzSet,
    structure: &StructureInfo,
    noise: &NoiseModel,
    opts: IntervalOptions,
    mut trace: Option<&mut Vec<Vec<Interval>>>,
) -> FnIntervals {
    let recs = history.records();
    let n = recs.len();
    let n_u = recs.first().map(|r| r.u.len()).unwrap_or(0);
    let side = sides(structure, f);
    let eta_up = side.upper.eta();
    let eta_low = side.lower.map(|c| c.eta()).unwrap_or(0.0);
    let kind = noise.kind(f);
    let values: Vec<f64> = (0..n).map(|k| history.measured(k, f).unwrap_or(f64::NAN)).collect();

    // Repeated-measurement phase.
    let groups = same_point_groups(history);
    let mut iv = vec![Interval::new(f64::NEG_INFINITY, f64::INFINITY); n];
    for kb in 0..n {
        let tb = recs[kb].time;
        let gb = history.gradient(kb, f).and_then(|g| g.time);
        for set in subsets(&groups[kb], opts.groups) {
            let nn = set.len();
            let (wl, wu) = noise_band(kind, nn);
            // Offsets from the first member keep a group of equal values exact.
            let v0 = values[set[0]];
            let mut mean = 0.0;
            let mut corr_low = 0.0;
            let mut corr_up = 0.0;
            for &kt in &set {
                mean += values[kt] - v0;
                let dt = recs[kt].time - tb;
                if dt == 0.0 {
                    continue;
                }
                let local = lip.local_constants(f, &Region::bounding(&[&recs[kb].u, &recs[kt].u], tb, recs[kt].time));
                let ktau_hi = hi_term(local.time_lower, local.time_upper, dt);
                let ktau_lo = lo_term(local.time_lower, local.time_upper, dt);
                corr_low += match gb {
                    Some(t) if eta_up > 0.0 => hi_term(t.lower, t.upper, dt),
                    _ => ktau_hi,
                };
                corr_up += match (gb, eta_low > 0.0) {
                    (Some(t), true) => lo_term(t.lower, t.upper, dt),
                    _ => ktau_lo,
                };
            }
            let inv = 1.0 / nn as f64;
            let lower = v0 + mean * inv - corr_low * inv - wu;
            let upper = v0 + mean * inv - corr_up * inv - wl;
            if lower > iv[kb].lower {
                iv[kb].lower = lower;
            }
            if upper < iv[kb].upper {
                iv[kb].upper = upper;
            }
        }
    }
    if let Some(t) = trace.as_deref_mut() {
        t.push(iv.clone());
    }

    // Offsets of the propagation tests: upper(kb) <= upper(kt) + off_up[kb][kt]
    // and lower(kb) >= lower(kt) + off_low[kb][kt].
    let mut off_up = vec![0.0; n * n];
    let mut off_low = vec![0.0; n * n];
    for kb in 0..n {
        for kt in 0..n {
            if kb == kt {
                continue;
            }
            let (rb, rt) = (&recs[kb], &recs[kt]);
            let dt = rb.time - rt.time;
            let local = lip.local_constants(f, &Region::bounding(&[&rb.u, &rt.u], rb.time, rt.time));
            let g = history.gradient(kt, f);
            let gt = g.and_then(|g| g.time);
            let mut up = match gt {
                Some(t) if eta_up > 0.0 => hi_term(t.lower, t.upper, dt),
                _ => hi_term(local.time_lower, local.time_upper, dt),
            };
            let mut low = match (gt, eta_low > 0.0) {
                (Some(t), true) => lo_term(t.lower, t.upper, dt),
                _ => lo_term(local.time_lower, local.time_upper, dt),
            };
            for i in 0..n_u {
                let d = rb.u[i] - rt.u[i];
                up += match g {
                    Some(g) if side.upper.has(i) => hi_term(g.lower[i], g.upper[i], d),
                    _ => hi_term(local.lower[i], local.upper[i], d),
                };
                low += match (g, side.lower.map(|c| c.has(i)).unwrap_or(false)) {
                    (Some(g), true) => lo_term(g.lower[i], g.upper[i], d),
                    _ => lo_term(local.lower[i], local.upper[i], d),
                };
            }
            off_up[kb * n + kt] = up;
            off_low[kb * n + kt] = low;
        }
    }

    // Propagation phase.
    let widest = iv.iter().map(|i| i.width()).fold(0.0, f64::max);
    let sweep_bound = if widest.is_finite() && opts.delta_r_min > 0.0 {
        ((widest / opts.delta_r_min).ceil() as usize).max(1)
    } else {
        usize::MAX
    };
    let mut sweeps = 0;
    let mut delta_r = f64::INFINITY;
    while delta_r > opts.delta_r_min && sweeps < sweep_bound && n > 1 {
        delta_r = 0.0;
        for kb in 0..n {
            for kt in 0..n {
                if kt == kb {
                    continue;
                }
                let up = iv[kt].upper + off_up[kb * n + kt];
                let low = iv[kt].lower + off_low[kb * n + kt];
                delta_r = f64::max(delta_r, f64::max(low - iv[kb].lower, iv[kb].upper - up));
                if low > iv[kb].lower {
                    iv[kb].lower = low;
                }
                if up < iv[kb].upper {
                    iv[kb].upper = up;
                }
            }
        }
        sweeps += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.push(iv.clone());
        }
    }
    // Rounding can leave a collapsed interval crossed by an ulp.
    for i in iv.iter_mut() {
        if i.lower > i.upper {
            std::mem::swap(&mut i.lower, &mut i.upper);
        }
    }
    FnIntervals { intervals: iv, sweeps, sweep_bound }
}

/// Bounds for the cost (when measured) and every experimental constraint.
pub fn compute_intervals(
    history: &History,
    lip: &LipschitzSet,
    structure: &StructureInfo,
    noise: &NoiseModel,
    experimental_cost: bool,
    opts: IntervalOptions,
) -> Vec<RecordIntervals> {
    let n = history.len();
    let n_gp = lip.constraints.len();
    let mut out = vec![RecordIntervals { cost: None, constraints: Vec::with_capacity(n_gp) }; n];
    if experimental_cost {
        let c = intervals_for(history, FnId::Cost, lip, structure, noise, opts, None);
        for (k, iv) in c.intervals.into_iter().enumerate() {
            out[k].cost = Some(iv);
        }
    }
    for j in 0..n_gp {
        let c = intervals_for(history, FnId::Constraint(j), lip, structure, noise, opts, None);
        for (k, iv) in c.intervals.into_iter().enumerate() {
            out[k].constraints.push(iv);
        }
    }
    out
}
