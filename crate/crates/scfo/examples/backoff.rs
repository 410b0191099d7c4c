//! Safety margins around a reference point for a ball of radius `delta_e`.

use scfo::geometry::{
    ball_max_box_bound, experimental_backoff, kappa_m, numerical_backoff, sampled_ball_max, SeparableQuadratic,
};
use scfo::{Concavity, FnConstants};

fn main() {
    let delta_e = 0.02;
    let center = [0.1, 0.3];

    // Measured constraint with known slope bounds and a slow drift.
    let local = FnConstants { lower: vec![-4.7, 1.0], upper: vec![-4.0, 1.0], time_lower: 0.0, time_upper: 0.002 };
    let kappa = kappa_m(&Concavity::default(), &local, None);
    for dt in [0.0, 1.0, 10.0] {
        let b = experimental_backoff(false, None, local.time_upper, dt, delta_e, &kappa);
        println!("measured constraint, dt = {dt:>4}: back-off {b:.6}");
    }

    // Computable constraint: an exact box bound and a sampled estimate.
    let q = SeparableQuadratic::new(0.01, vec![(-1.0, 0.0), (-1.0, 0.3)]);
    let bound = ball_max_box_bound(&q, &center, delta_e);
    let eval = |x: &[f64]| q.eval(x);
    let sampled = sampled_ball_max(&eval, &center, delta_e);
    println!("quadratic at center {:.6}, box bound {bound:.6}, sampled {sampled:.6}", q.eval(&center));

    let c = q.into_constraint();
    println!("computable constraint back-off {:.6}", numerical_backoff(&c, &center, delta_e));
}
