//! Picks a reference record from a short history, then searches the largest
//! gain along the direction towards a target that keeps the next experiment
//! feasible.

use scfo::pretreat::{compute_intervals, IntervalOptions};
use scfo::reference::{select_reference, FallbackRule, ReferenceInput};
use scfo::stepper::{feasibility_margin, max_gain_search, StepContext};
use scfo::{
    CostKind, FnConstants, History, LipschitzSet, Measurement, NoiseKind, NoiseModel, ProblemSpec, SlackState,
    StructureInfo,
};

fn main() {
    let spec = ProblemSpec {
        n_u: 2,
        u_lower: vec![-1.0; 2],
        u_upper: vec![1.0; 2],
        n_gp: 1,
        numerical_constraints: Vec::new(),
        cost_kind: CostKind::Experimental,
        constraint_scale: None,
    };
    let g = FnConstants::symmetric(&[1.0, 1.0], 0.01);
    let lip = LipschitzSet {
        constraints: vec![g],
        cost: FnConstants::symmetric(&[2.0, 2.0], 0.0),
        m_lower: vec![vec![0.0; 2]; 2],
        m_upper: vec![vec![0.0; 2]; 2],
        local: None,
    };
    let structure = StructureInfo::none(1);
    let noise = NoiseModel::uniform(NoiseKind::none(), 1);

    let mut history = History::new();
    let data = [([0.0, 0.0], 1.0, -0.6), ([0.2, 0.1], 0.7, -0.4), ([0.35, 0.2], 0.5, -0.15)];
    for (k, (u, c, gv)) in data.iter().enumerate() {
        history.push(Measurement { u: u.to_vec(), time: k as f64, cost_hat: Some(*c), g_hat: vec![*gv] }).unwrap();
    }
    history.intervals = compute_intervals(&history, &lip, &structure, &noise, true, IntervalOptions::default());

    let slacks = SlackState { experimental: vec![0.0], numerical: Vec::new() };
    let delta_e = 0.02;
    let tau_next = data.len() as f64;
    let input = ReferenceInput { history: &history, spec: &spec, lip: &lip, structure: &structure, slacks: &slacks, delta_e, tau_next };
    let choice = select_reference(&input, FallbackRule::Auto).unwrap();
    println!("robustly feasible records {:?}, reference k* = {} ({:?})", choice.feasible, choice.k_star, choice.rule);

    let target = [0.9, 0.6];
    let ctx = StepContext {
        history: &history,
        spec: &spec,
        lip: &lip,
        structure: &structure,
        slacks: &slacks,
        delta_e,
        k_star: choice.k_star,
        target: &target,
        tau_next,
        tau_after: None,
        cost_box: None,
        safeguard: false,
    };
    for k in [0.0, 0.25, 0.5, 1.0] {
        println!("gain {k:>4}: worst-case constraint bound {:+.5}", feasibility_margin(&ctx, 0, k));
    }
    let gain = max_gain_search(&ctx);
    let u = ctx.point(gain.gain);
    println!("largest safe gain {:.6} ({:?}) -> next input [{:.5}, {:.5}]", gain.gain, gain.variant, u[0], u[1]);
}
