//! Drives the advisor on a hand-written plant with one input.
//!
//! The plant is `cost = (u - 0.7)²` with the constraint `u - 0.5 ≤ 0`, both
//! measured with bounded noise. Gradients come from the model directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scfo::{
    Advisor, AdvisorConfig, CostKind, FnConstants, GradientEstimate, History, LipschitzSet, Measurement, NoiseKind,
    NoiseModel, PointGradients, ProblemSpec, ProjectionParams, StructureInfo,
};

const NOISE: f64 = 0.002;

fn cost(u: f64) -> f64 {
    (u - 0.7).powi(2)
}

fn constraint(u: f64) -> f64 {
    u - 0.5
}

fn main() {
    let spec = ProblemSpec {
        n_u: 1,
        u_lower: vec![-1.0],
        u_upper: vec![1.0],
        n_gp: 1,
        numerical_constraints: Vec::new(),
        cost_kind: CostKind::Experimental,
        constraint_scale: None,
    };
    let lip = LipschitzSet {
        constraints: vec![FnConstants { lower: vec![0.9], upper: vec![1.1], time_lower: 0.0, time_upper: 0.0 }],
        cost: FnConstants { lower: vec![-3.4], upper: vec![0.6], time_lower: 0.0, time_upper: 0.0 },
        m_lower: vec![vec![1.9]],
        m_upper: vec![vec![2.1]],
        local: None,
    };
    let params = ProjectionParams { eps_p: vec![0.05], eps: Vec::new(), delta_gp: vec![0.01], delta_g: Vec::new(), delta_phi: 0.01 };
    let mut config = AdvisorConfig::new(&spec, 0.01, params);
    config.noise = NoiseModel::uniform(NoiseKind::Bounded { half_width: NOISE }, 1);
    let mut advisor = Advisor::new(spec, lip, StructureInfo::none(1), config).unwrap();

    let mut oracle = |u: &[f64], tau: f64| PointGradients {
        cost: Some(GradientEstimate::exact(u.to_vec(), tau, vec![2.0 * (u[0] - 0.7)], Some(0.0))),
        constraints: vec![Some(GradientEstimate::exact(u.to_vec(), tau, vec![1.0], Some(0.0)))],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut history = History::new();
    let mut u = -0.6;
    for k in 0..25 {
        let t = k as f64;
        let m = Measurement {
            u: vec![u],
            time: t,
            cost_hat: Some(cost(u) + rng.random_range(-NOISE..NOISE)),
            g_hat: vec![constraint(u) + rng.random_range(-NOISE..NOISE)],
        };
        history.push(m).unwrap();
        let advice = advisor.advise(&mut history, &mut oracle, t + 1.0, Some(t + 2.0), None).unwrap();
        println!(
            "k={k:>2} u={u:+.5} g={:+.5} cost={:.5}  ref={:>2} gain={:.3} {}",
            constraint(u),
            cost(u),
            advice.k_star,
            advice.gain,
            advice.scenario.tag()
        );
        u = advice.u_next[0];
    }
    println!("final input {u:.5}, constrained optimum 0.5");
}
