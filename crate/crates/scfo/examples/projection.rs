//! Projects a desired point onto the region where every linearized
//! constraint keeps its margin and every gradient in the cost box descends.

use scfo::projection::{lp_feasible, project_target, CostGradient, ProjectionInput};
use scfo::{GradientEstimate, ProjectionParams, SlackState};

fn main() {
    let u_ref = [0.0, 0.0];
    let target = [0.8, 0.6];

    // Cost gradient known only up to a box.
    let cost = GradientEstimate {
        at_u: u_ref.to_vec(),
        at_time: 0.0,
        estimate: vec![-1.0, -0.5],
        lower: vec![-1.4, -0.9],
        upper: vec![-0.6, 0.3],
        time: None,
    };
    // One constraint at -0.03, close enough to zero to enter the projection,
    // growing along the first input.
    let g = GradientEstimate::exact(u_ref.to_vec(), 0.0, vec![0.5, 0.1], None);

    let seeds = ProjectionParams { eps_p: vec![0.05], eps: Vec::new(), delta_gp: vec![0.02], delta_g: Vec::new(), delta_phi: 0.05 };
    let slacks = SlackState { experimental: vec![0.0], numerical: Vec::new() };
    let input = ProjectionInput {
        u_ref: &u_ref,
        target: &target,
        lower: vec![-1.0, -1.0],
        upper: vec![1.0, 1.0],
        seeds: &seeds,
        backed_off: &[-0.03],
        constraint_grads: vec![Some(&g)],
        numerical: Vec::new(),
        slacks: &slacks,
        cost: CostGradient::Experimental(&cost),
    };

    let (a, b) = input.nominal_rows(&seeds);
    let lp = lp_feasible(&a, &b, &input.lower, &input.upper);
    println!("nominal region nonempty: {} (witness {:?})", lp.feasible, lp.witness);

    let out = project_target(&input);
    println!("status      {:?}", out.status);
    println!("point       [{:.6}, {:.6}]", out.point[0], out.point[1]);
    println!("robustness  {:.4} (largest feasible {:.4})", out.robustness, out.p_lower);
    println!("halvings    {}  bisections {}", out.halvings, out.bisections);
    if let Some((lo, hi)) = &out.cost_box {
        println!("cost box    {lo:.4?} .. {hi:.4?}");
    }
}
