mod common;

use proptest::prelude::*;
use rand::Rng;
use scfo::simharness::{
    run_scenario_with, ArtificialOracle, BuiltinPlant, LocalMode, MPreset, NoiseSpec, ScenarioConfig, SlackConfig,
};
use scfo::{
    default_target, Advisor, AdvisorConfig, CostKind, FallbackRule, FnConstants, GradientEstimate, History,
    LipschitzSet, Measurement, PointGradients, ProblemSpec, ProjectionParams, ReferenceBranch, ScfoError,
    StructureInfo, TimeDerivative,
};

use common::rng;

fn config(plant: BuiltinPlant, u0: [f64; 2]) -> ScenarioConfig {
    ScenarioConfig {
        plant,
        iterations: 10,
        seed: 1,
        u0: u0.to_vec(),
        noise: NoiseSpec::default(),
        alpha_sigma: 0.0,
        delta_e: 0.02,
        local: LocalMode::Constraints,
        m: MPreset::Valid,
        cost_constants: None,
        structure: true,
        slacks: None,
        safeguard: true,
        second_order_check: true,
        excitation: false,
        fallback: FallbackRule::Auto,
        projection: None,
    }
}

#[test]
fn first_step_from_initial_point() {
    // Robustly feasible with the δ_e = 0.02 back-off.
    let cfg = config(BuiltinPlant::Static, [-0.2, 0.05]);
    let (spec, lip, st, ac) = cfg.build().unwrap();
    let plant = cfg.plant;
    let mut oracle = ArtificialOracle::new(plant, 0.0, lip.clone(), 1);
    let mut adv = Advisor::new(spec.clone(), lip, st, ac).unwrap();
    let mut h = History::new();
    let m = scfo::simharness::measure(&plant, &cfg.u0, 0.0, &mut scfo::simharness::NoiseGenerator::new(1, 2, cfg.noise));
    h.push(m).unwrap();
    let a = adv.advise(&mut h, &mut oracle, 1.0, Some(2.0), None).unwrap();
    assert_eq!(a.k_star, 0);
    assert_eq!(a.scenario.reference, ReferenceBranch::Primary);
    assert!(a.gain.is_finite() && (0.0..=1.0).contains(&a.gain));
    assert!(spec.in_box(&a.u_next, 0.0));
    assert_eq!(h.intervals.len(), 1);
}

/// One input, one constraint `g = -0.1 + τ` that becomes infeasible fast.
fn drifting_problem(fallback: FallbackRule) -> (Advisor, History, f64) {
    let spec = ProblemSpec {
        n_u: 1,
        u_lower: vec![-1.0],
        u_upper: vec![1.0],
        n_gp: 1,
        numerical_constraints: Vec::new(),
        cost_kind: CostKind::Experimental,
        constraint_scale: None,
    };
    let c = FnConstants { lower: vec![-0.1], upper: vec![0.1], time_lower: 1.0, time_upper: 1.0 };
    let lip = LipschitzSet {
        constraints: vec![c.clone()],
        cost: FnConstants::symmetric(&[1.0], 0.0),
        m_lower: vec![vec![1.0]],
        m_upper: vec![vec![3.0]],
        local: None,
    };
    let delta_e = 0.05;
    let params = ProjectionParams { eps_p: vec![0.1], eps: Vec::new(), delta_gp: vec![0.1], delta_g: Vec::new(), delta_phi: 0.1 };
    let mut ac = AdvisorConfig::new(&spec, delta_e, params);
    ac.fallback = fallback;
    ac.excitation = true;
    let adv = Advisor::new(spec, lip, StructureInfo::none(1), ac).unwrap();
    let mut h = History::new();
    for (k, u) in [0.0, 0.3].iter().enumerate() {
        let t = k as f64;
        h.push(Measurement { u: vec![*u], time: t, cost_hat: Some(u * u), g_hat: vec![-0.1 + t] }).unwrap();
    }
    (adv, h, delta_e)
}

fn drifting_oracle(u: &[f64], tau: f64) -> PointGradients {
    let cost = GradientEstimate::exact(u.to_vec(), tau, vec![2.0 * u[0]], Some(0.0));
    let g = GradientEstimate {
        at_u: u.to_vec(),
        at_time: tau,
        estimate: vec![0.0],
        lower: vec![0.0],
        upper: vec![0.0],
        time: Some(TimeDerivative { estimate: 1.0, lower: 1.0, upper: 1.0 }),
    };
    PointGradients { cost: Some(cost), constraints: vec![Some(g)] }
}

#[test]
fn fast_drift_falls_back_to_initial_point() {
    let (mut adv, mut h, delta_e) = drifting_problem(FallbackRule::SafePoint);
    let a = adv.advise(&mut h, &mut drifting_oracle, 2.0, Some(3.0), None).unwrap();
    assert!(a.scenario.tag().starts_with("fallback-u0/"), "{}", a.scenario.tag());
    assert_eq!(a.k_star, 0);
    assert!((a.u_next[0] - h.records()[0].u[0]).abs() <= delta_e + 1e-12);
}

#[test]
fn fast_drift_with_auto_fallback_warns() {
    let (mut adv, mut h, _) = drifting_problem(FallbackRule::Auto);
    let a = adv.advise(&mut h, &mut drifting_oracle, 2.0, Some(3.0), None).unwrap();
    assert_eq!(a.scenario.reference, ReferenceBranch::Fallback);
    assert!(!a.diagnostics.warnings.is_empty());
}

#[test]
fn backwards_time_is_rejected() {
    let (mut adv, mut h, _) = drifting_problem(FallbackRule::Auto);
    let err = adv.advise(&mut h, &mut drifting_oracle, 0.5, None, None).unwrap_err();
    assert!(matches!(err, ScfoError::NonMonotoneTime { .. }));
}

#[test]
fn invalid_settings_are_all_reported() {
    let cfg = config(BuiltinPlant::Static, [-0.35, 0.1]);
    let (spec, lip, st, mut ac) = cfg.build().unwrap();
    ac.delta_e = 2.0;
    ac.projection.delta_phi = 0.0;
    ac.delta_r_min = -1.0;
    let err = Advisor::new(spec, lip, st, ac).unwrap_err();
    let ScfoError::Invalid(v) = err else { panic!("expected validation errors") };
    for needle in ["delta_e", "projection.delta_phi", "delta_r_min"] {
        assert!(v.mentions(needle), "{needle} missing from {v}");
    }
}

#[test]
fn zero_gradient_target_is_reference() {
    let spec = config(BuiltinPlant::Static, [0.0, 0.0]).build().unwrap().0;
    assert_eq!(default_target(&[0.1, 0.2], &[0.0, 0.0], &spec), vec![0.1, 0.2]);
}

#[test]
fn gradient_along_first_input_hits_lower_face() {
    let spec = config(BuiltinPlant::Static, [0.0, 0.0]).build().unwrap().0;
    let center: Vec<f64> = spec.u_lower.iter().zip(&spec.u_upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let t = default_target(&center, &[1.0, 0.0], &spec);
    assert_eq!(t, vec![spec.u_lower[0], center[1]]);
}

#[test]
fn identical_inputs_give_identical_advice() {
    let cfg = config(BuiltinPlant::DegradingMinus, [-0.35, 0.1]);
    let advise_once = || {
        let (spec, lip, st, ac) = cfg.build().unwrap();
        let mut oracle = ArtificialOracle::new(cfg.plant, 0.05, lip.clone(), 9);
        let mut adv = Advisor::new(spec, lip, st, ac).unwrap();
        let mut h = History::new();
        let mut noise = scfo::simharness::NoiseGenerator::new(9, 2, NoiseSpec { sigma: 0.01, truncate: false });
        let mut out = Vec::new();
        let mut u = cfg.u0.clone();
        for k in 0..4 {
            h.push(scfo::simharness::measure(&cfg.plant, &u, k as f64, &mut noise)).unwrap();
            let a = adv.advise(&mut h, &mut oracle, k as f64 + 1.0, Some(k as f64 + 2.0), None).unwrap();
            u = a.u_next.clone();
            out.push(a);
        }
        out
    };
    assert_eq!(advise_once(), advise_once());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn default_target_stays_in_box(g in prop::collection::vec(-100.0..100.0f64, 2), u in prop::collection::vec(-0.5..0.5f64, 2)) {
        let spec = config(BuiltinPlant::Static, [0.0, 0.0]).build().unwrap().0;
        let t = default_target(&u, &g, &spec);
        prop_assert!(spec.in_box(&t, 0.0));
    }

    #[test]
    fn short_runs_stay_in_box_with_known_scenarios(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let plants = scfo::simharness::builtin_plants();
        let plant = plants[r.random_range(0..plants.len())];
        let mut cfg = config(plant, [r.random_range(-0.4..-0.2), r.random_range(0.0..0.2)]);
        cfg.iterations = 6;
        cfg.seed = seed;
        cfg.noise.sigma = r.random_range(0.0..0.02);
        cfg.alpha_sigma = r.random_range(0.0..0.2);
        cfg.excitation = r.random::<bool>();
        if r.random::<bool>() {
            cfg.slacks = Some(SlackConfig { d_max: 0.2, budgets: vec![5.0, 10.0] });
        }
        let run = run_scenario_with(&cfg, 0).unwrap();
        let (lo, hi) = (scfo::simharness::Plant::lower(&plant), scfo::simharness::Plant::upper(&plant));
        let tags = [
            "primary/line-search", "primary/relaxed", "primary/zero-gain", "primary/excitation",
            "fallback-u0/line-search", "fallback-u0/relaxed", "fallback-u0/zero-gain", "fallback-u0/excitation",
        ];
        for row in &run.rows {
            for i in 0..2 {
                prop_assert!(row.u[i] >= lo[i] && row.u[i] <= hi[i]);
            }
            prop_assert!(row.k_star <= row.k);
            prop_assert!(tags.contains(&row.scenario.as_str()), "{}", row.scenario);
            prop_assert!(row.gain >= 0.0 && row.gain <= 1.0);
        }
    }
}
