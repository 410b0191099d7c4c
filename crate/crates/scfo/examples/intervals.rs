//! Turns noisy readings of a one-input function into guaranteed bounds.
//!
//! The assumed slope bound is deliberately too small. The consistency check
//! widens it until the data can be explained, then the interval propagation
//! tightens each record using its neighbours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scfo::pretreat::{compute_intervals, conservative_intervals, consistency_check_first_order, IntervalOptions};
use scfo::{FnConstants, FnId, History, LipschitzSet, Measurement, NoiseKind, NoiseModel, StructureInfo};

fn main() {
    let truth = |u: f64| -0.4 + 0.8 * u;
    let sigma = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut history = History::new();
    for (k, u) in [0.0, 0.1, 0.1, 0.25, 0.4, 0.5].into_iter().enumerate() {
        let noise = rng.random_range(-sigma..sigma);
        history
            .push(Measurement { u: vec![u], time: k as f64, cost_hat: None, g_hat: vec![truth(u) + noise] })
            .unwrap();
    }

    let guess = FnConstants { lower: vec![-0.3], upper: vec![0.3], time_lower: 0.0, time_upper: 0.0 };
    let mut lip = LipschitzSet {
        constraints: vec![guess.clone()],
        cost: guess,
        m_lower: vec![vec![0.0]],
        m_upper: vec![vec![0.0]],
        local: None,
    };
    let noise = NoiseModel::uniform(NoiseKind::Bounded { half_width: sigma }, 1);

    let check = consistency_check_first_order(&history, &lip, &noise, FnId::Constraint(0));
    println!(
        "slope bounds grown from [-0.3, 0.3] to [{}, {}] in {} rounds",
        check.constants.lower[0], check.constants.upper[0], check.iterations
    );
    lip.constraints[0] = check.constants;

    let raw = conservative_intervals(&history, &noise, FnId::Constraint(0));
    let refined = compute_intervals(&history, &lip, &StructureInfo::none(1), &noise, false, IntervalOptions::default());
    println!("{:>4} {:>6} {:>24} {:>24} {:>9}", "k", "u", "raw", "refined", "truth");
    for (k, m) in history.records().iter().enumerate() {
        let r = refined[k].constraints[0];
        println!(
            "{k:>4} {:>6.2} [{:>10.5}, {:>10.5}] [{:>10.5}, {:>10.5}] {:>9.5}",
            m.u[0], raw[k].lower, raw[k].upper, r.lower, r.upper, truth(m.u[0])
        );
    }
}
