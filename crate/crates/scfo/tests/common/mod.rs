//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use scfo::{FnConstants, History, Measurement};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solves `m x = r` by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut m: Vec<Vec<f64>>, mut r: Vec<f64>) -> Option<Vec<f64>> {
    let n = r.len();
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))?;
        if m[p][c].abs() < 1e-12 {
            return None;
        }
        m.swap(c, p);
        r.swap(c, p);
        for i in c + 1..n {
            let f = m[i][c] / m[c][c];
            for j in c..n {
                m[i][j] -= f * m[c][j];
            }
            r[i] -= f * r[c];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (r[i] - s) / m[i][i];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All row/box inequalities in the form `row · x <= rhs`.
pub fn stacked(a: &[Vec<f64>], b: &[f64], lower: &[f64], upper: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = lower.len();
    let mut rows = a.to_vec();
    let mut rhs = b.to_vec();
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        if upper[i].is_finite() {
            rows.push(e.clone());
            rhs.push(upper[i]);
        }
        if lower[i].is_finite() {
            e[i] = -1.0;
            rows.push(e);
            rhs.push(-lower[i]);
        }
    }
    (rows, rhs)
}

fn subsets(m: usize, max: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, m: usize, max: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        f(cur);
        if cur.len() == max {
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, max, cur, f);
            cur.pop();
        }
    }
    rec(0, m, max, &mut Vec::new(), f);
}

/// Euclidean projection of `t` onto `{rows x <= rhs}` by enumerating active
/// sets of size at most `n` and keeping the best KKT-feasible candidate.
pub fn projection_by_enumeration(t: &[f64], rows: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = t.len();
    let m = rows.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    subsets(m, n, &mut |act| {
        // Minimize |x - t|² subject to rows[act] x = rhs[act]:
        // x = t - Aᵀλ with (A Aᵀ) λ = A t - b.
        let k = act.len();
        let lambda = if k == 0 {
            Some(vec![])
        } else {
            let g: Vec<Vec<f64>> = act.iter().map(|&i| act.iter().map(|&j| dot(&rows[i], &rows[j])).collect()).collect();
            let r: Vec<f64> = act.iter().map(|&i| dot(&rows[i], t) - rhs[i]).collect();
            solve_dense(g, r)
        };
        let Some(lambda) = lambda else { return };
        if lambda.iter().any(|l| *l < -1e-10) {
            return;
        }
        let mut x = t.to_vec();
        for (l, &i) in lambda.iter().zip(act) {
            for c in 0..n {
                x[c] -= l * rows[i][c];
            }
        }
        if rows.iter().zip(rhs).any(|(r, b)| dot(r, &x) > b + 1e-9) {
            return;
        }
        let d: f64 = x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    });
    best.map(|(_, x)| x)
}

/// Whether the polytope `{rows x <= rhs}` (bounded) is nonempty, decided by
/// enumerating its candidate vertices.
pub fn polytope_nonempty(rows: &[Vec<f64>], rhs: &[f64]) -> bool {
    let n = rows[0].len();
    let m = rows.len();
    let mut found = false;
    subsets(m, n, &mut |act| {
        if found || act.len() != n {
            return;
        }
        let a: Vec<Vec<f64>> = act.iter().map(|&i| rows[i].clone()).collect();
        let b: Vec<f64> = act.iter().map(|&i| rhs[i]).collect();
        if let Some(x) = solve_dense(a, b) {
            if rows.iter().zip(rhs).all(|(r, b)| dot(r, &x) <= b + 1e-12) {
                found = true;
            }
        }
    });
    found
}

/// Vertices of the box `[lo, hi]`.
pub fn vertices(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let n = lo.len();
    (0..1usize << n).map(|mask| (0..n).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect()).collect()
}

/// Random constants with `lower < upper` per input.
pub fn random_constants(r: &mut ChaCha8Rng, n: usize) -> FnConstants {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for _ in 0..n {
        let a: f64 = r.random_range(-3.0..1.0);
        lower.push(a);
        upper.push(a + r.random_range(0.1..3.0));
    }
    let tl: f64 = r.random_range(-0.05..0.0);
    FnConstants { lower, upper, time_lower: tl, time_upper: tl + r.random_range(0.0..0.05) }
}

/// History of `n` records of `f` at random points with unit time steps.
pub fn history_of(
    points: &[Vec<f64>],
    values: &[f64],
    constraints: &[Vec<f64>],
) -> History {
    let mut h = History::new();
    for (k, (u, v)) in points.iter().zip(values).enumerate() {
        h.push(Measurement { u: u.clone(), time: k as f64, cost_hat: Some(*v), g_hat: constraints[k].clone() }).unwrap();
    }
    h
}
