//! Constraint back-offs that keep a whole ball of radius `δ_e` feasible
//! around a reference point, so that any perturbation inside that ball is safe.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::core::{norm, Concavity, FnConstants, GradientEstimate, NumericalConstraint, ScalarFn, VectorFn};

/// Back-offs at one reference point.
#[derive(Clone, Debug, PartialEq)]
pub struct BackoffSet {
    pub experimental: Vec<f64>,
    pub numerical: Vec<f64>,
    pub bound: f64,
}

/// Per-input worst-case slope magnitude for a ball around a reference.
///
/// Inputs declared concave use the gradient box at the reference when one is
/// available; all other inputs, and concave inputs without a box, use the
/// larger absolute Lipschitz endpoint of `local`.
pub fn kappa_m(concave: &Concavity, local: &FnConstants, grad: Option<&GradientEstimate>) -> Vec<f64> {
    (0..local.lower.len())
        .map(|i| match grad {
            Some(g) if concave.has(i) => g.lower[i].abs().max(g.upper[i].abs()),
            _ => local.lower[i].abs().max(local.upper[i].abs()),
        })
        .collect()
}

/// Back-off of an experimental constraint.
///
/// `dtau_upper` is the upper bound of the time derivative at the reference;
/// it replaces the Lipschitz drift term when the function is declared
/// concave in time.
pub fn experimental_backoff(
    eta: bool,
    dtau_upper: Option<f64>,
    kappa_tau_upper: f64,
    dt: f64,
    delta_e: f64,
    kappa_m: &[f64],
) -> f64 {
    let drift = match (eta, dtau_upper) {
        (true, Some(d)) => d * dt,
        _ => kappa_tau_upper * dt,
    };
    drift + delta_e * norm(kappa_m)
}

/// Back-off of a computable constraint: how much its ball maximum exceeds
/// its value at the center.
pub fn numerical_backoff(c: &NumericalConstraint, center: &[f64], delta_e: f64) -> f64 {
    c.max_over_ball(center, delta_e) - c.value(center)
}

/// A function of the form `constant + Σ_i (a_i x_i² + b_i x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableQuadratic {
    pub constant: f64,
    /// `(a_i, b_i)` per coordinate.
    pub terms: Vec<(f64, f64)>,
}

impl SeparableQuadratic {
    pub fn new(constant: f64, terms: Vec<(f64, f64)>) -> Self {
        Self { constant, terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().zip(x).map(|((a, b), x)| a * x * x + b * x).sum::<f64>()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.terms.iter().zip(x).map(|((a, b), x)| 2.0 * a * x + b).collect()
    }

    /// Exact maximum over the axis-aligned box `[lo, hi]`.
    pub fn box_max(&self, lo: &[f64], hi: &[f64]) -> f64 {
        self.constant
            + self
                .terms
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| {
                    let q = |x: f64| a * x * x + b * x;
                    let mut m = q(lo[i]).max(q(hi[i]));
                    if a < 0.0 {
                        let v = -b / (2.0 * a);
                        if v > lo[i] && v < hi[i] {
                            m = m.max(q(v));
                        }
                    }
                    m
                })
                .sum::<f64>()
    }

    /// Converts into a computable constraint whose ball maximum is bounded by
    /// the maximum over the ball's bounding box.
    pub fn into_constraint(self) -> NumericalConstraint {
        let f = Arc::new(self);
        let (a, b, c) = (f.clone(), f.clone(), f);
        let eval: ScalarFn = Arc::new(move |u| a.eval(u));
        let grad: VectorFn = Arc::new(move |u| b.grad(u));
        NumericalConstraint::new(eval, grad, Arc::new(move |center, r| ball_max_box_bound(&c, center, r)))
    }
}

/// Upper bound on the maximum over the ball of radius `radius`, obtained by
/// maximizing over the ball's bounding box one coordinate at a time.
pub fn ball_max_box_bound(q: &SeparableQuadratic, center: &[f64], radius: f64) -> f64 {
    let lo: Vec<f64> = center.iter().map(|c| c - radius).collect();
    let hi: Vec<f64> = center.iter().map(|c| c + radius).collect();
    q.box_max(&lo, &hi)
}

/// Number of boundary samples used by [`sampled_ball_max`].
pub const BALL_SAMPLES: usize = 2000;

/// Non-rigorous estimate of the ball maximum from the center and a fixed
/// set of points on the sphere.
pub fn sampled_ball_max(eval: &dyn Fn(&[f64]) -> f64, center: &[f64], radius: f64) -> f64 {
    let mut best = eval(center);
    if radius <= 0.0 {
        return best;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba11);
    let mut p = vec![0.0; center.len()];
    for _ in 0..BALL_SAMPLES {
        let dir = random_unit(&mut rng, center.len());
        for i in 0..center.len() {
            p[i] = center[i] + radius * dir[i];
        }
        best = best.max(eval(&p));
    }
    best
}

/// Wraps value and gradient callbacks into a constraint whose ball maximum
/// is sampled. The result is flagged as non-rigorous.
pub fn sampled_constraint(eval: ScalarFn, grad: VectorFn) -> NumericalConstraint {
    let e = eval.clone();
    let mut c = NumericalConstraint::new(eval, grad, Arc::new(move |center, r| sampled_ball_max(&*e, center, r)));
    c.rigorous = false;
    c
}

/// Direction drawn uniformly from the unit sphere.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let l = norm(&v);
        if l > 1e-12 {
            return v.into_iter().map(|x| x / l).collect();
        }
    }
}

/// Point drawn uniformly from the closed ball.
pub fn random_in_ball<R: Rng + ?Sized>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let n = center.len();
    let dir = random_unit(rng, n);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    center.iter().zip(dir).map(|(c, d)| c + r * d).collect()
}
