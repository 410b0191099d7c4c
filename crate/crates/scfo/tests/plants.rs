mod common;

use std::path::PathBuf;

use rand::Rng;
use scfo::simharness::{
    artificial_gradient, builtin_plants, measure, plant_constants, polynomial_local_lipschitz, run_scenario_with,
    BuiltinPlant, LocalMode, MPreset, NoiseGenerator, NoiseSpec, Plant, ScenarioConfig, LOCAL_MARGIN, SWITCH_AFTER,
    TAU_BAR,
};
use scfo::{FnId, Region};

use common::rng;

fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn fns() -> [FnId; 3] {
    [FnId::Cost, FnId::Constraint(0), FnId::Constraint(1)]
}

#[test]
fn first_constraint_at_origin() {
    assert!((BuiltinPlant::DegradingMinus.constraint(0, &[0.0, 0.0], 0.0) + 0.6).abs() < 1e-15);
}

#[test]
fn static_cost_vanishes_at_its_center() {
    assert_eq!(BuiltinPlant::Static.cost(&[0.5, 0.4], 0.0), 0.0);
}

#[test]
fn second_constraint_at_unconstrained_optimum() {
    assert!((BuiltinPlant::DegradingMinus.constraint(1, &[0.5, 0.4], 0.0) - 0.4).abs() < 1e-15);
}

#[test]
fn switching_plant_changes_cost_only() {
    let p = BuiltinPlant::SwitchingCost;
    let u = [0.1, 0.3];
    assert_eq!(p.cost(&u, SWITCH_AFTER), BuiltinPlant::Static.cost(&u, 0.0));
    assert_ne!(p.cost(&u, SWITCH_AFTER + 1.0), p.cost(&u, SWITCH_AFTER));
    for j in 0..2 {
        assert_eq!(p.constraint(j, &u, 0.0), p.constraint(j, &u, SWITCH_AFTER + 1.0));
    }
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-6;
    let mut r = rng(11);
    for plant in builtin_plants() {
        let (lo, hi) = (plant.lower(), plant.upper());
        for _ in 0..100 {
            let u: Vec<f64> = (0..2).map(|i| r.random_range(lo[i]..hi[i])).collect();
            let mut tau = r.random_range(0.0..TAU_BAR);
            if plant == BuiltinPlant::SwitchingCost && (tau - SWITCH_AFTER).abs() < 1.0 {
                tau += 2.0;
            }
            for f in fns() {
                let (g, gt) = plant.gradient(f, &u, tau);
                for i in 0..2 {
                    let (mut a, mut b) = (u.clone(), u.clone());
                    a[i] += h;
                    b[i] -= h;
                    let fd = (plant.value(f, &a, tau) - plant.value(f, &b, tau)) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-5, "{plant:?} {f:?} d/du{i}: {fd} vs {}", g[i]);
                }
                let fd = (plant.value(f, &u, tau + h) - plant.value(f, &u, tau - h)) / (2.0 * h);
                assert!((fd - gt).abs() < 1e-5, "{plant:?} {f:?} d/dtau: {fd} vs {gt}");
            }
        }
    }
}

#[test]
fn local_upper_bound_at_a_single_point() {
    let region = Region { lower: vec![0.1, 0.3], upper: vec![0.1, 0.3], t_min: 0.0, t_max: 0.0 };
    let c = polynomial_local_lipschitz(&BuiltinPlant::DegradingMinus, FnId::Constraint(0), &region, LocalMode::Constraints).unwrap();
    assert!((c.upper[0] + 4.699).abs() < 1e-12, "{}", c.upper[0]);
    assert!((c.lower[0] + 4.701).abs() < 1e-12);
    assert!(c.upper[1].is_nan() && c.time_upper.is_nan());
}

#[test]
fn local_bound_on_the_one_dimensional_slab() {
    // u₁ ∈ [0.1, 0.2] at τ = 0: the derivative is largest at u₁ = 0.1.
    let region = Region { lower: vec![0.1, 0.0], upper: vec![0.2, 0.8], t_min: 0.0, t_max: 0.0 };
    let c = polynomial_local_lipschitz(&BuiltinPlant::DegradingMinus, FnId::Constraint(0), &region, LocalMode::Constraints).unwrap();
    assert!((c.upper[0] - (-4.7 + LOCAL_MARGIN)).abs() < 1e-12);
}

#[test]
fn cost_is_not_refined_in_constraint_mode() {
    let region = Region::ball(&[0.0, 0.4], 0.1, 0.0, 1.0);
    assert!(polynomial_local_lipschitz(&BuiltinPlant::Static, FnId::Cost, &region, LocalMode::Constraints).is_none());
    assert!(polynomial_local_lipschitz(&BuiltinPlant::Static, FnId::Cost, &region, LocalMode::None).is_none());
}

#[test]
fn full_box_stays_within_global_constants() {
    for plant in builtin_plants() {
        let global = plant_constants(plant, MPreset::Valid);
        let horizon = if plant.is_degrading() { TAU_BAR } else { SWITCH_AFTER };
        let region = Region { lower: plant.lower(), upper: plant.upper(), t_min: 0.0, t_max: horizon };
        for f in fns() {
            let Some(c) = polynomial_local_lipschitz(&plant, f, &region, LocalMode::All) else { continue };
            let g = global.function(f);
            for i in 0..2 {
                assert!(c.lower[i] >= g.lower[i] - LOCAL_MARGIN, "{plant:?} {f:?} lower[{i}] {} < {}", c.lower[i], g.lower[i]);
                assert!(c.upper[i] <= g.upper[i] + LOCAL_MARGIN, "{plant:?} {f:?} upper[{i}] {} > {}", c.upper[i], g.upper[i]);
            }
            assert!(c.time_lower >= g.time_lower - LOCAL_MARGIN && c.time_upper <= g.time_upper + LOCAL_MARGIN);
        }
    }
}

#[test]
fn degenerate_region_has_margin_wide_bounds() {
    let region = Region { lower: vec![-0.2, 0.5], upper: vec![-0.2, 0.5], t_min: 7.0, t_max: 7.0 };
    for plant in builtin_plants() {
        for f in fns() {
            let c = polynomial_local_lipschitz(&plant, f, &region, LocalMode::All).unwrap();
            let (g, gt) = plant.gradient(f, &region.lower, 7.0);
            for i in 0..2 {
                assert!((c.upper[i] - c.lower[i] - 2.0 * LOCAL_MARGIN).abs() < 1e-12);
                assert!((c.upper[i] - LOCAL_MARGIN - g[i]).abs() < 1e-12);
            }
            assert!((c.time_upper - LOCAL_MARGIN - gt).abs() < 1e-12);
        }
    }
}

#[test]
fn local_bounds_bracket_sampled_derivatives() {
    let mut r = rng(12);
    for plant in builtin_plants() {
        let (lo, hi) = (plant.lower(), plant.upper());
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..2).map(|i| r.random_range(lo[i]..hi[i])).collect();
            let b: Vec<f64> = (0..2).map(|i| r.random_range(lo[i]..hi[i])).collect();
            let (t0, t1) = (r.random_range(0.0..TAU_BAR), r.random_range(0.0..TAU_BAR));
            let region = Region::bounding(&[&a, &b], t0, t1);
            let u: Vec<f64> = (0..2).map(|i| r.random_range(region.lower[i]..=region.upper[i])).collect();
            let tau = r.random_range(region.t_min..=region.t_max);
            for f in fns() {
                let Some(c) = polynomial_local_lipschitz(&plant, f, &region, LocalMode::All) else { continue };
                let (g, gt) = plant.gradient(f, &u, tau);
                for i in 0..2 {
                    assert!(c.lower[i] <= g[i] && g[i] <= c.upper[i], "{plant:?} {f:?} {i}");
                }
                assert!(c.time_lower <= gt && gt <= c.time_upper);
            }
        }
    }
}

#[test]
fn noiseless_measurement_is_exact() {
    let p = BuiltinPlant::DegradingPlus;
    let mut n = NoiseGenerator::new(3, 2, NoiseSpec::default());
    let m = measure(&p, &[0.1, 0.2], 5.0, &mut n);
    assert_eq!(m.cost_hat, Some(p.cost(&[0.1, 0.2], 5.0)));
    assert_eq!(m.g_hat, vec![p.constraint(0, &[0.1, 0.2], 5.0), p.constraint(1, &[0.1, 0.2], 5.0)]);
}

#[test]
fn noise_has_requested_variance() {
    let sigma = 0.01;
    let mut n = NoiseGenerator::new(4, 2, NoiseSpec { sigma, truncate: false });
    let draws: Vec<f64> = (0..100_000).map(|_| n.draw(FnId::Constraint(1))).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "variance ratio {}", var / (sigma * sigma));
    assert!(mean.abs() < 5.0 * sigma / (draws.len() as f64).sqrt());
}

#[test]
fn truncated_noise_stays_within_three_sigma() {
    let mut n = NoiseGenerator::new(5, 2, NoiseSpec { sigma: 0.02, truncate: true });
    assert!((0..50_000).all(|_| n.draw(FnId::Cost).abs() <= 0.06));
}

#[test]
fn noise_streams_are_reproducible_and_separate() {
    let spec = NoiseSpec { sigma: 1.0, truncate: false };
    let (mut a, mut b) = (NoiseGenerator::new(6, 2, spec), NoiseGenerator::new(6, 2, spec));
    let xa: Vec<f64> = (0..20).map(|_| a.draw(FnId::Cost)).collect();
    let xb: Vec<f64> = (0..20).map(|_| b.draw(FnId::Cost)).collect();
    assert_eq!(xa, xb);
    // Drawing from another function does not shift the cost stream.
    let mut c = NoiseGenerator::new(6, 2, spec);
    let xc: Vec<f64> = (0..20).map(|_| { c.draw(FnId::Constraint(0)); c.draw(FnId::Cost) }).collect();
    assert_eq!(xa, xc);
}

#[test]
fn zero_alpha_gives_exact_degenerate_box() {
    let p = BuiltinPlant::DegradingMinus;
    let lip = plant_constants(p, MPreset::Valid);
    let g = artificial_gradient(&p, FnId::Constraint(0), &[0.1, 0.2], 3.0, 0.0, &lip.constraints[0], &mut rng(1));
    assert_eq!(g.estimate, p.constraint_gradient(0, &[0.1, 0.2], 3.0).0);
    assert!(g.is_degenerate());
}

#[test]
fn gradient_box_half_width_scales_with_constant_range() {
    let p = BuiltinPlant::DegradingMinus;
    let lip = plant_constants(p, MPreset::Valid);
    let g = artificial_gradient(&p, FnId::Constraint(0), &[0.1, 0.2], 3.0, 0.05, &lip.constraints[0], &mut rng(2));
    assert!((0.5 * (g.upper[0] - g.lower[0]) - 0.65).abs() < 1e-12);
}

#[test]
fn gradient_boxes_contain_the_truth() {
    let mut r = rng(13);
    for plant in builtin_plants() {
        let lip = plant_constants(plant, MPreset::Valid);
        for _ in 0..2_000 {
            let u = [r.random_range(-0.5..0.5), r.random_range(0.0..0.8)];
            let tau = r.random_range(0.0..TAU_BAR);
            let alpha = r.random_range(0.0..0.3);
            for f in fns() {
                let g = artificial_gradient(&plant, f, &u, tau, alpha, lip.function(f), &mut r);
                let (truth, dt) = plant.gradient(f, &u, tau);
                for i in 0..2 {
                    assert!(g.lower[i] <= truth[i] + 1e-12 && truth[i] <= g.upper[i] + 1e-12);
                }
                let t = g.time.unwrap();
                assert!(t.lower <= dt + 1e-12 && dt <= t.upper + 1e-12);
            }
        }
    }
}

#[test]
fn ideal_run_reference_cost_never_increases() {
    let cfg = scenario("static_ideal");
    let run = run_scenario_with(&cfg, 0).unwrap();
    let plant = cfg.plant;
    let mut last = f64::INFINITY;
    for row in &run.rows {
        let c = plant.cost(&run.rows[row.k_star].u, 0.0);
        assert!(c <= last + 1e-12, "reference cost rose to {c} from {last} at {}", row.k);
        last = c;
    }
}

#[test]
fn ideal_run_accepted_steps_decrease_cost() {
    let cfg = scenario("static_ideal");
    let run = run_scenario_with(&cfg, 0).unwrap();
    let plant = cfg.plant;
    for pair in run.rows.windows(2) {
        let (row, next) = (&pair[0], &pair[1]);
        if row.scenario.ends_with("line-search") || row.scenario.ends_with("relaxed") {
            let before = plant.cost(&run.rows[row.k_star].u, next.tau);
            assert!(next.cost_true <= before + 1e-12, "step {} raised cost {} -> {}", row.k, before, next.cost_true);
        }
    }
}

#[test]
fn switching_run_logs_the_new_cost() {
    let cfg = scenario("switching_cost");
    let run = run_scenario_with(&cfg, 0).unwrap();
    for row in &run.rows {
        assert_eq!(row.cost_true, cfg.plant.cost(&row.u, row.tau));
    }
    assert_eq!(run.rows.len(), cfg.iterations);
}

#[test]
fn final_cost_spread_grows_with_gradient_error() {
    let base = scenario("degrading_minus");
    let mut variances = Vec::new();
    for alpha in [0.05, 0.15, 0.25] {
        let finals: Vec<f64> = (1..=20)
            .map(|seed| {
                let cfg = ScenarioConfig { seed, alpha_sigma: alpha, ..base.clone() };
                run_scenario_with(&cfg, 0).unwrap().summary.final_cost
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        variances.push(finals.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (finals.len() - 1) as f64);
    }
    assert!(variances.windows(2).all(|w| w[0] <= w[1]), "variances {variances:?}");
}
