//! Robust projection of the optimization target.
//!
//! The target is projected onto linearized descent and feasibility
//! half-spaces. Robustness to gradient error is obtained by requiring the
//! linearized conditions for every gradient inside a (possibly shrunk)
//! gradient box, which is expressed with one auxiliary slack variable per
//! function and input so that the problem stays a small convex QP.
//!
//! The QP solver is a dual active-set method (Goldfarb-Idnani) working on
//! the diagonally scaled problem, with the active-set projections recomputed
//! from a QR factorization at every step. Problems here have a few dozen
//! variables at most.

use nalgebra::{DMatrix, DVector};

use crate::core::{dot, GradientEstimate, ProjectionParams, SlackState};

/// Minimize `½ xᵀ diag(h) x + cᵀx` subject to `A x ≤ b` and `lower ≤ x ≤ upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hess_diag: Vec<f64>,
    pub linear: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// Projection of `t` onto `{A x ≤ b, lower ≤ x ≤ upper}`.
    pub fn projection(t: &[f64], a: Vec<Vec<f64>>, b: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            hess_diag: vec![2.0; t.len()],
            linear: t.iter().map(|x| -2.0 * x).collect(),
            a,
            b,
            lower,
            upper,
        }
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for (row, bi) in self.a.iter().zip(&self.b) {
            v = v.max(dot(row, x) - bi);
        }
        for i in 0..x.len() {
            v = v.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        v
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(i, xi)| 0.5 * self.hess_diag[i] * xi * xi + self.linear[i] * xi).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    /// The solver stopped but the point fails the feasibility check.
    Inaccurate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

/// Curvature levels substituted for zero Hessian entries (slack
/// variables), tried in order until the solution verifies.
pub const QP_REGULARIZATION: [f64; 3] = [1e-7, 1e-6, 1e-5];

struct Row {
    n: Vec<f64>,
    b: f64,
}

/// Solves a convex QP with diagonal Hessian.
///
/// Zero Hessian entries get a small curvature so that the dual method
/// applies. Variables with zero curvature only ever appear as slacks here.
/// A solution is accepted only if it satisfies every constraint to within
/// `1e-9 (1 + |b|)`; otherwise the next, larger curvature is tried, which
/// trades bias for conditioning. The bias is then removed by re-solving the
/// optimality conditions of the unregularized problem on the active set
/// found, keeping that point only if it is feasible with nonnegative
/// multipliers.
pub fn solve_qp(qp: &QpProblem, tol: f64) -> QpSolution {
    let mut last = None;
    for mu in QP_REGULARIZATION {
        let sol = solve_qp_regularized(qp, tol, mu);
        match sol.status {
            QpStatus::Optimal if verified(qp, &sol.x) => return polish(qp, mu, sol),
            QpStatus::Optimal => last = Some(QpSolution { status: QpStatus::Inaccurate, ..sol }),
            _ => last = Some(sol),
        }
        if !qp.hess_diag.iter().any(|h| *h < mu) {
            break;
        }
    }
    last.expect("at least one attempt")
}

fn polish(qp: &QpProblem, mu: f64, sol: QpSolution) -> QpSolution {
    let nv = qp.hess_diag.len();
    if !qp.hess_diag.iter().any(|h| *h < mu) {
        return sol;
    }
    let x = &sol.x;
    let near = |v: f64, b: f64| (v - b).abs() <= 1e-7 * (1.0 + b.abs());
    // Active rows as (row, rhs).
    let mut act: Vec<(Vec<f64>, f64)> = qp
        .a
        .iter()
        .zip(&qp.b)
        .filter(|(r, b)| near(dot(r, x), **b))
        .map(|(r, b)| (r.clone(), *b))
        .collect();
    for i in 0..nv {
        let mut e = vec![0.0; nv];
        if qp.upper[i].is_finite() && near(x[i], qp.upper[i]) {
            e[i] = 1.0;
            act.push((e, qp.upper[i]));
        } else if qp.lower[i].is_finite() && near(x[i], qp.lower[i]) {
            e[i] = -1.0;
            act.push((e, -qp.lower[i]));
        }
    }
    let k = act.len();
    let dim = nv + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for i in 0..nv {
        kkt[(i, i)] = qp.hess_diag[i];
        rhs[i] = -qp.linear[i];
    }
    for (j, (r, b)) in act.iter().enumerate() {
        for i in 0..nv {
            kkt[(i, nv + j)] = r[i];
            kkt[(nv + j, i)] = r[i];
        }
        rhs[nv + j] = *b;
    }
    let Ok(z) = kkt.svd(true, true).solve(&rhs, 1e-12) else { return sol };
    let cand: Vec<f64> = z.iter().take(nv).copied().collect();
    let multipliers_ok = z.iter().skip(nv).all(|l| *l >= -1e-8);
    let feasible = qp.a.iter().zip(&qp.b).all(|(r, b)| dot(r, &cand) - b <= 1e-10 * (1.0 + b.abs()))
        && (0..nv).all(|i| cand[i] >= qp.lower[i] - 1e-12 && cand[i] <= qp.upper[i] + 1e-12);
    if multipliers_ok && feasible {
        QpSolution { x: cand, ..sol }
    } else {
        sol
    }
}

fn verified(qp: &QpProblem, x: &[f64]) -> bool {
    let rows = qp.a.iter().zip(&qp.b).all(|(r, b)| dot(r, x) - b <= 1e-9 * (1.0 + b.abs()));
    let bounds = (0..x.len()).all(|i| {
        x[i] >= qp.lower[i] - 1e-9 * (1.0 + qp.lower[i].abs()) && x[i] <= qp.upper[i] + 1e-9 * (1.0 + qp.upper[i].abs())
    });
    rows && bounds
}

/// Goldfarb-Idnani dual active-set method on the scaled variable.
fn solve_qp_regularized(qp: &QpProblem, tol: f64, mu: f64) -> QpSolution {
    let n = qp.hess_diag.len();
    let scale: Vec<f64> = qp.hess_diag.iter().map(|h| 1.0 / h.max(mu).sqrt()).collect();

    // Rows in GI form nᵀy ≥ b over the scaled variable y with x = scale ⊙ y.
    let mut rows: Vec<Row> = Vec::with_capacity(qp.a.len() + 2 * n);
    let push = |n_raw: Vec<f64>, b_raw: f64, rows: &mut Vec<Row>| -> bool {
        let l = n_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if l == 0.0 {
            return b_raw <= tol;
        }
        rows.push(Row { n: n_raw.iter().map(|v| v / l).collect(), b: b_raw / l });
        true
    };
    let mut consistent = true;
    for (r, bi) in qp.a.iter().zip(&qp.b) {
        let nr: Vec<f64> = r.iter().zip(&scale).map(|(a, s)| -a * s).collect();
        consistent &= push(nr, -bi, &mut rows);
    }
    for i in 0..n {
        if qp.lower[i].is_finite() {
            let mut nr = vec![0.0; n];
            nr[i] = scale[i];
            consistent &= push(nr, qp.lower[i], &mut rows);
        }
        if qp.upper[i].is_finite() {
            let mut nr = vec![0.0; n];
            nr[i] = -scale[i];
            consistent &= push(nr, -qp.upper[i], &mut rows);
        }
    }
    let unscale = |y: &[f64]| -> Vec<f64> { y.iter().zip(&scale).map(|(y, s)| y * s).collect() };
    let mut y: Vec<f64> = qp.linear.iter().zip(&scale).map(|(c, s)| -c * s).collect();
    if !consistent {
        return QpSolution { x: unscale(&y), status: QpStatus::Infeasible, iterations: 0 };
    }

    let m = rows.len();
    let max_iter = 50 * (m + n) + 100;
    let mut active: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let mut chosen = None;
        let mut worst = -tol;
        for (i, r) in rows.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = dot(&r.n, &y) - r.b;
            if s < worst {
                worst = s;
                chosen = Some(i);
            }
        }
        let Some(p) = chosen else {
            return QpSolution { x: unscale(&y), status: QpStatus::Optimal, iterations };
        };
        let np = &rows[p].n;
        let mut lam_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return QpSolution { x: unscale(&y), status: QpStatus::IterationLimit, iterations };
            }
            let (z, r) = directions(&rows, &active, np, n);
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 1e-14 {
                    let v = lam[j] / rj;
                    if v < t1 {
                        t1 = v;
                        drop = Some(j);
                    }
                }
            }
            let zn = dot(&z, &z).sqrt();
            let s_p = dot(np, &y) - rows[p].b;
            let t2 = if zn > 1e-11 { -s_p / dot(&z, np) } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return QpSolution { x: unscale(&y), status: QpStatus::Infeasible, iterations };
            }
            for (l, rj) in lam.iter_mut().zip(&r) {
                *l -= t * rj;
            }
            lam_p += t;
            if t2.is_finite() {
                for (yi, zi) in y.iter_mut().zip(&z) {
                    *yi += t * zi;
                }
            }
            if t2 <= t1 {
                active.push(p);
                lam.push(lam_p);
                break;
            }
            let k = drop.expect("partial step has a blocking constraint");
            active.remove(k);
            lam.remove(k);
        }
    }
}

/// Primal direction `z = (I - N N⁺) n_p` and dual direction `r = N⁺ n_p`
/// for the active normals `N`.
fn directions(rows: &[Row], active: &[usize], np: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let q = active.len();
    if q == 0 {
        return (np.to_vec(), Vec::new());
    }
    let nm = DMatrix::from_fn(n, q, |i, j| rows[active[j]].n[i]);
    let qr = nm.qr();
    let qm = qr.q();
    let rm = qr.r();
    let v = DVector::from_column_slice(np);
    let qt = qm.transpose() * &v;
    let z = &v - &qm * &qt;
    let r = rm.solve_upper_triangular(&qt).unwrap_or_else(|| DVector::from_element(q, 0.0));
    (z.iter().copied().collect(), r.iter().copied().collect())
}

/// Feasibility witnesses must satisfy every inequality with at least this
/// much slack.
pub const LP_WITNESS_MARGIN: f64 = 1e-9;

/// Outcome of a feasibility test.
#[derive(Clone, Debug, PartialEq)]
pub struct LpFeasibility {
    pub feasible: bool,
    pub witness: Option<Vec<f64>>,
}

fn box_center(lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower
        .iter()
        .zip(upper)
        .map(|(l, u)| match (l.is_finite(), u.is_finite()) {
            (true, true) => 0.5 * (l + u),
            (true, false) => *l,
            (false, true) => *u,
            (false, false) => 0.0,
        })
        .collect()
}

/// Tests whether `{A x ≤ b, lower ≤ x ≤ upper}` has a point satisfying every
/// row of `A` with slack at least [`LP_WITNESS_MARGIN`]. The witness is the
/// point of the tightened set nearest to the box center.
pub fn lp_feasible(a: &[Vec<f64>], b: &[f64], lower: &[f64], upper: &[f64]) -> LpFeasibility {
    let center = box_center(lower, upper);
    if a.is_empty() {
        let feasible = lower.iter().zip(upper).all(|(l, u)| l <= u);
        return LpFeasibility { feasible, witness: feasible.then_some(center) };
    }
    let tightened: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(r, bi)| bi - LP_WITNESS_MARGIN * dot(r, r).sqrt().max(1.0))
        .collect();
    let qp = QpProblem::projection(&center, a.to_vec(), tightened, lower.to_vec(), upper.to_vec());
    let sol = solve_qp(&qp, 1e-12);
    if sol.status == QpStatus::Optimal && qp.max_violation(&sol.x) <= 1e-12 {
        LpFeasibility { feasible: true, witness: Some(sol.x) }
    } else {
        LpFeasibility { feasible: false, witness: None }
    }
}

/// Cost gradient information at the reference.
#[derive(Clone, Debug)]
pub enum CostGradient<'a> {
    /// Estimate and box for a measured cost.
    Experimental(&'a GradientEstimate),
    /// Exact gradient of a computable cost.
    Numerical(Vec<f64>),
}

/// Everything the projection needs, evaluated at the reference point.
#[derive(Clone, Debug)]
pub struct ProjectionInput<'a> {
    pub u_ref: &'a [f64],
    pub target: &'a [f64],
    /// Compressed box.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seeds: &'a ProjectionParams,
    /// Per experimental constraint: backed-off robust value at the reference
    /// and the gradient estimate used for its linearization.
    pub backed_off: &'a [f64],
    pub constraint_grads: Vec<Option<&'a GradientEstimate>>,
    /// Per computable constraint: gradient at the reference and ball maximum.
    pub numerical: Vec<(Vec<f64>, f64)>,
    /// Slacks for the step being designed.
    pub slacks: &'a SlackState,
    pub cost: CostGradient<'a>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionStatus {
    Projected,
    /// Descent requirement shrank below its floor; the reference is returned.
    Floor,
    /// The final robust QP failed; the reference is returned.
    SolverFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionOutcome {
    pub point: Vec<f64>,
    pub params: ProjectionParams,
    /// Robustness level used for the returned point.
    pub robustness: f64,
    /// Largest robustness level found feasible during bisection.
    pub p_lower: f64,
    pub halvings: usize,
    pub bisections: usize,
    pub status: ProjectionStatus,
    /// Tightened cost-gradient box at the final robustness level.
    pub cost_box: Option<(Vec<f64>, Vec<f64>)>,
}

/// Gradient box shrunk towards the estimate: `est + P (bound - est)`.
pub fn tightened_box(g: &GradientEstimate, p: f64) -> (Vec<f64>, Vec<f64>) {
    let lo = g.estimate.iter().zip(&g.lower).map(|(e, l)| e + p * (l - e)).collect();
    let hi = g.estimate.iter().zip(&g.upper).map(|(e, u)| e + p * (u - e)).collect();
    (lo, hi)
}

impl ProjectionInput<'_> {
    fn active_experimental(&self, params: &ProjectionParams) -> Vec<usize> {
        (0..self.backed_off.len())
            .filter(|&j| self.backed_off[j] >= -params.eps_p[j] + self.slacks.experimental[j])
            .filter(|&j| self.constraint_grads[j].is_some())
            .collect()
    }

    fn active_numerical(&self, params: &ProjectionParams) -> Vec<usize> {
        (0..self.numerical.len())
            .filter(|&j| self.numerical[j].1 >= -params.eps[j] + self.slacks.numerical[j])
            .collect()
    }

    fn cost_estimate(&self) -> &[f64] {
        match &self.cost {
            CostGradient::Experimental(g) => &g.estimate,
            CostGradient::Numerical(g) => g,
        }
    }

    /// Rows of the non-robust projection, over `u` only.
    pub fn nominal_rows(&self, params: &ProjectionParams) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for j in self.active_experimental(params) {
            let g = &self.constraint_grads[j].unwrap().estimate;
            a.push(g.clone());
            b.push(dot(g, self.u_ref) - params.delta_gp[j]);
        }
        for j in self.active_numerical(params) {
            let g = &self.numerical[j].0;
            a.push(g.clone());
            b.push(dot(g, self.u_ref) - params.delta_g[j]);
        }
        let g = self.cost_estimate();
        a.push(g.to_vec());
        b.push(dot(g, self.u_ref) - params.delta_phi);
        (a, b)
    }

    /// The robust slack QP at robustness level `p`. Variables are `u`
    /// followed by one block of `n_u` slacks per active experimental
    /// constraint and, for a measured cost, one block for the cost.
    pub fn robust_qp(&self, params: &ProjectionParams, p: f64) -> QpProblem {
        let n = self.u_ref.len();
        let exp = self.active_experimental(params);
        let num = self.active_numerical(params);
        let cost_box = match &self.cost {
            CostGradient::Experimental(g) => Some(tightened_box(g, p)),
            CostGradient::Numerical(_) => None,
        };
        let blocks = exp.len() + usize::from(cost_box.is_some());
        let nv = n + blocks * n;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let slack_block = |block: usize, lo: &[f64], hi: &[f64], delta: f64, a: &mut Vec<Vec<f64>>, b: &mut Vec<f64>| {
            let off = n + block * n;
            let mut sum = vec![0.0; nv];
            for i in 0..n {
                sum[off + i] = 1.0;
            }
            a.push(sum);
            b.push(-delta);
            for i in 0..n {
                for slope in [lo[i], hi[i]] {
                    let mut row = vec![0.0; nv];
                    row[i] = slope;
                    row[off + i] = -1.0;
                    a.push(row);
                    b.push(slope * self.u_ref[i]);
                }
            }
        };
        for (block, &j) in exp.iter().enumerate() {
            let (lo, hi) = tightened_box(self.constraint_grads[j].unwrap(), p);
            slack_block(block, &lo, &hi, params.delta_gp[j], &mut a, &mut b);
        }
        if let Some((lo, hi)) = &cost_box {
            slack_block(exp.len(), lo, hi, params.delta_phi, &mut a, &mut b);
        }
        for j in num {
            let g = &self.numerical[j].0;
            let mut row = vec![0.0; nv];
            row[..n].copy_from_slice(g);
            a.push(row);
            b.push(dot(g, self.u_ref) - params.delta_g[j]);
        }
        if let CostGradient::Numerical(g) = &self.cost {
            let mut row = vec![0.0; nv];
            row[..n].copy_from_slice(g);
            a.push(row);
            b.push(dot(g, self.u_ref) - params.delta_phi);
        }
        let mut hess = vec![0.0; nv];
        let mut linear = vec![0.0; nv];
        for i in 0..n {
            hess[i] = 2.0;
            linear[i] = -2.0 * self.target[i];
        }
        let mut lower = vec![f64::NEG_INFINITY; nv];
        let mut upper = vec![f64::INFINITY; nv];
        lower[..n].copy_from_slice(&self.lower);
        upper[..n].copy_from_slice(&self.upper);
        QpProblem { hess_diag: hess, linear, a, b, lower, upper }
    }

    fn boxes_degenerate(&self, params: &ProjectionParams) -> bool {
        let cost = match &self.cost {
            CostGradient::Experimental(g) => g.is_degenerate(),
            CostGradient::Numerical(_) => true,
        };
        cost && self.active_experimental(params).iter().all(|&j| self.constraint_grads[j].unwrap().is_degenerate())
    }
}

/// Relative tolerance passed to the QP solver by the projection.
pub const PROJECTION_QP_TOL: f64 = 1e-10;

fn clamp_box(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
}

/// Projects the target: shrink the projection parameters until the
/// non-robust problem is feasible, then bisect on the robustness level and
/// solve the robust QP at half the largest feasible level.
pub fn project_target(input: &ProjectionInput<'_>) -> ProjectionOutcome {
    let n = input.u_ref.len();
    let floor = input.seeds.delta_phi / 1024.0;
    let mut params = input.seeds.clone();
    let mut halvings = 0;
    let reference = |params: ProjectionParams, halvings: usize, status: ProjectionStatus| ProjectionOutcome {
        point: input.u_ref.to_vec(),
        params,
        robustness: 0.0,
        p_lower: 0.0,
        halvings,
        bisections: 0,
        status,
        cost_box: match &input.cost {
            CostGradient::Experimental(g) => Some((g.estimate.clone(), g.estimate.clone())),
            CostGradient::Numerical(_) => None,
        },
    };
    loop {
        let (a, b) = input.nominal_rows(&params);
        if lp_feasible(&a, &b, &input.lower, &input.upper).feasible {
            break;
        }
        if params.delta_phi < floor {
            return reference(params, halvings, ProjectionStatus::Floor);
        }
        params = params.halved();
        halvings += 1;
    }
    if params.delta_phi < floor {
        return reference(params, halvings, ProjectionStatus::Floor);
    }

    let (mut p_lo, mut p_hi) = (0.0_f64, 1.0_f64);
    let mut bisections = 0;
    let p_final = if input.boxes_degenerate(&params) {
        p_lo = 1.0;
        1.0
    } else {
        while p_hi - p_lo >= 0.01 {
            let p = 0.5 * (p_lo + p_hi);
            bisections += 1;
            let sol = solve_qp(&input.robust_qp(&params, p), PROJECTION_QP_TOL);
            if sol.status == QpStatus::Optimal {
                p_lo = p;
            } else {
                p_hi = p;
            }
        }
        0.5 * p_lo
    };
    let sol = solve_qp(&input.robust_qp(&params, p_final), PROJECTION_QP_TOL);
    if sol.status != QpStatus::Optimal {
        let mut out = reference(params, halvings, ProjectionStatus::SolverFailure);
        out.bisections = bisections;
        out.p_lower = p_lo;
        return out;
    }
    ProjectionOutcome {
        point: clamp_box(&sol.x[..n], &input.lower, &input.upper),
        params,
        robustness: p_final,
        p_lower: p_lo,
        halvings,
        bisections,
        status: ProjectionStatus::Projected,
        cost_box: match &input.cost {
            CostGradient::Experimental(g) => Some(tightened_box(g, p_final)),
            CostGradient::Numerical(_) => None,
        },
    }
}
