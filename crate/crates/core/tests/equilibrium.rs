use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use ratingeq::equilibrium::*;
use ratingeq::model::{
    CostDistribution, EntryMeasure, Model, ModelParams, PayoffVariant, QualityType, RatingGrid, SalesGrid, StateSpace,
    TransitionKernel,
};
use ratingeq::uniqueness::{finite_difference_jacobian, stacked_residual};
use ratingeq::Error;

fn single_state(variant: PayoffVariant, beta: f64) -> Model {
    let params = ModelParams {
        theta_low: 0.0,
        theta_high: 1.0,
        alpha: 0.5,
        beta,
        payoff_variant: variant,
        entry_mass: 2.0,
        ..ModelParams::default()
    };
    let space = StateSpace::new(RatingGrid::new(vec![5.0]).unwrap(), SalesGrid::unit_buckets(1).unwrap());
    let kernel = TransitionKernel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
    let entry = EntryMeasure::general(vec![1.0], vec![1.0]).unwrap();
    Model::new(params, space, kernel, CostDistribution::Uniform01, entry).unwrap()
}

/// 2 ratings × 2 buckets at the estimated parameters with a shorter horizon.
fn small_model(beta: f64) -> Model {
    let params = ModelParams { beta, ..ModelParams::default() };
    let space = StateSpace::new(RatingGrid::new(vec![4.5, 5.0]).unwrap(), SalesGrid::unit_buckets(2).unwrap());
    Model::normal(params, space).unwrap()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn table3_default_grid() -> (Model, EquilibriumSolution) {
    let model = Model::normal(ModelParams::default(), StateSpace::default_grid()).unwrap();
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    (model, sol)
}

#[test]
fn flow_revenue_examples() {
    let b = Beliefs { theta_hat: vec![0.5, 0.0] };
    let p = ModelParams::default();
    assert_eq!(flow_revenue(&b, &p, 0), 0.5);
    let linear = ModelParams { demand_gamma0: 0.2, demand_gamma1: 2.0, ..p };
    assert!((flow_revenue(&b, &linear, 0) - 0.6).abs() < 1e-15);
    assert_eq!(flow_revenue(&b, &linear, 1), 0.0);
}

#[test]
fn expected_continuation_examples() {
    let u = CostDistribution::Uniform01;
    assert!((expected_continuation(&[0.8], &u, PayoffVariant::MainText)[0] - 0.4).abs() < 1e-15);
    assert!((expected_continuation(&[0.8], &u, PayoffVariant::SurvivalWeighted)[0] - 0.32).abs() < 1e-15);
    let n = CostDistribution::normal(0.386, 1.0).unwrap();
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let v = expected_continuation(&[0.386], &n, PayoffVariant::MainText)[0];
    assert!((v - 2.0 * phi0).abs() < 1e-14, "{v}");
}

#[test]
fn uniform_special_case_fixed_points() {
    let main = solve_equilibrium(&single_state(PayoffVariant::MainText, 0.9), &SolverOptions::default()).unwrap();
    for ty in QualityType::ALL {
        assert!((main.cutoffs.get(ty)[0] - 10.0 / 11.0).abs() < 1e-10);
    }
    let weighted =
        solve_equilibrium(&single_state(PayoffVariant::SurvivalWeighted, 0.9), &SolverOptions::default()).unwrap();
    let root = (1.0 - 0.1f64.sqrt()) / 0.9;
    for ty in QualityType::ALL {
        assert!((weighted.cutoffs.get(ty)[0] - root).abs() < 1e-10);
    }
    assert_eq!(main.beliefs.theta_hat[0], 0.5);
}

#[test]
fn myopic_cutoffs_equal_flow_revenue() {
    let model = small_model(0.0);
    let beliefs = Beliefs { theta_hat: vec![0.31, 0.4, 0.45, 0.52] };
    let cutoffs = CutoffProfile { by_type: [vec![0.7; 4], vec![-0.2; 4]] };
    let next = bellman_cutoff_update(&beliefs, &cutoffs, &model.kernel, &model.cost, &model.params);
    for ty in QualityType::ALL {
        assert_eq!(next.get(ty), &beliefs.theta_hat[..]);
    }
}

#[test]
fn mass_update_examples() {
    let model = small_model(0.9);
    let dead = CutoffProfile { by_type: [vec![-1e6; 4], vec![-1e6; 4]] };
    let big = MassDistribution { by_type: [vec![3.0; 4], vec![7.0; 4]] };
    let next = stationary_mass_update(&big, &dead, &model.kernel, &model.cost, &model.entry);
    assert_eq!(next.by_type, model.entry.by_type);

    let one = single_state(PayoffVariant::MainText, 0.9);
    let half = CutoffProfile { by_type: [vec![0.5], vec![0.5]] };
    let mut mu = MassDistribution::zeros(1);
    for _ in 0..200 {
        mu = stationary_mass_update(&mu, &half, &one.kernel, &one.cost, &one.entry);
    }
    assert!((mu.by_type[0][0] - 2.0).abs() < 1e-12);
}

#[test]
fn sellers_who_never_exit_are_reported_as_non_contraction() {
    let params = ModelParams { theta_low: 2.0, theta_high: 3.0, beta: 0.9, ..ModelParams::default() };
    let space = StateSpace::new(RatingGrid::new(vec![4.0, 5.0]).unwrap(), SalesGrid::unit_buckets(1).unwrap());
    let swap = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let kernel = TransitionKernel::new(swap.clone(), swap).unwrap();
    let entry = EntryMeasure::general(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
    let model = Model::new(params, space, kernel, CostDistribution::Uniform01, entry).unwrap();
    // One sweep from F ≡ 1 adds the full entry measure again: no contraction.
    let stay = CutoffProfile { by_type: [vec![2.0; 2], vec![2.0; 2]] };
    let mut mu = MassDistribution::zeros(2);
    for k in 1..=5 {
        mu = stationary_mass_update(&mu, &stay, &model.kernel, &model.cost, &model.entry);
        assert!((mu.by_type[0].iter().sum::<f64>() - k as f64).abs() < 1e-12);
    }
    let err = solve_equilibrium(&model, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonContraction(_)), "{err:?}");
}

#[test]
fn belief_examples() {
    let p = ModelParams::default();
    let equal = MassDistribution { by_type: [vec![2.0], vec![2.0]] };
    assert!((beliefs_from_masses(&equal, &p).unwrap().theta_hat[0] - 0.4125).abs() < 1e-15);
    let share = MassDistribution { by_type: [vec![0.767], vec![0.233]] };
    assert!((beliefs_from_masses(&share, &p).unwrap().theta_hat[0] - 0.352425).abs() < 1e-12);
    let pure = MassDistribution { by_type: [vec![0.0], vec![5.0]] };
    assert_eq!(beliefs_from_masses(&pure, &p).unwrap().theta_hat[0], 0.525);
    let empty = MassDistribution { by_type: [vec![1.0, 0.0], vec![1.0, 0.0]] };
    assert!(matches!(beliefs_from_masses(&empty, &p), Err(Error::UndefinedBelief { state: 1 })));
}

#[test]
fn table3_equilibrium_is_certified_by_one_extra_sweep() {
    let (model, sol) = table3_default_grid();
    assert!(sol.is_converged());
    assert!(sol.max_residual() <= 1e-10);
    let next_c = bellman_cutoff_update(&sol.beliefs, &sol.cutoffs, &model.kernel, &model.cost, &model.params);
    for ty in QualityType::ALL {
        assert!(sup_diff(next_c.get(ty), sol.cutoffs.get(ty)) <= 1e-10);
    }
    let next_m = stationary_mass_update(&sol.masses, &sol.cutoffs, &model.kernel, &model.cost, &model.entry);
    for ty in QualityType::ALL {
        for (a, b) in next_m.get(ty).iter().zip(sol.masses.get(ty)) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }
    // States no seller reaches carry zero mass and a sceptical belief; the
    // Bayes update is checked on every other state.
    let reached: Vec<usize> = (0..model.n_states()).filter(|i| !sol.off_path_states.contains(i)).collect();
    assert!(reached.contains(&model.space.entry_state()));
    let on_path = MassDistribution { by_type: sol.masses.by_type.clone().map(|v| reached.iter().map(|&i| v[i]).collect()) };
    let next_b = beliefs_from_masses(&on_path, &model.params).unwrap();
    for (k, &i) in reached.iter().enumerate() {
        assert!((next_b.theta_hat[k] - sol.beliefs.theta_hat[i]).abs() <= 1e-10);
    }
}

#[test]
fn table3_equilibrium_has_the_expected_shape() {
    let (model, sol) = table3_default_grid();
    let p = &model.params;
    for &t in &sol.beliefs.theta_hat {
        assert!((p.theta_low..=p.theta_high).contains(&t));
    }
    for i in 0..model.n_states() {
        assert!(sol.exit_prob[0][i] >= sol.exit_prob[1][i], "low types exit no less often, state {i}");
        assert!(sol.cutoffs.get(QualityType::High)[i] >= sol.cutoffs.get(QualityType::Low)[i]);
    }
    for i in 0..model.n_states() {
        let total = sol.masses.by_type[0][i] + sol.masses.by_type[1][i];
        assert_eq!(total > 0.0, !sol.off_path_states.contains(&i));
    }
}

#[test]
fn a_single_rating_point_makes_cutoffs_type_independent() {
    let space = StateSpace::new(RatingGrid::new(vec![5.0]).unwrap(), SalesGrid::estimation_buckets());
    let model = Model::normal(ModelParams::default(), space).unwrap();
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    assert_eq!(sol.cutoffs.get(QualityType::Low), sol.cutoffs.get(QualityType::High));
}

#[test]
fn general_solver_reproduces_the_four_state_closed_form() {
    for &(gamma, rho, beta) in &[(0.55, 0.1, 0.8), (0.7, 0.3, 0.3), (0.9, 0.1, 0.3), (0.65, 0.3, 0.5)] {
        let closed = solve_four_state_closed_form(gamma, rho, beta, [0.5, 0.5]).unwrap();
        let model = four_state_model(gamma, rho, beta, [0.5, 0.5]).unwrap();
        let general = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
        for ty in QualityType::ALL {
            assert!(sup_diff(closed.cutoffs.get(ty), general.cutoffs.get(ty)) < 1e-8, "cutoffs at {gamma}, {rho}, {beta}");
            assert!(sup_diff(closed.masses.get(ty), general.masses.get(ty)) < 1e-8, "masses at {gamma}, {rho}, {beta}");
        }
    }
}

#[test]
fn uninformative_four_state_ratings_have_no_price_spread() {
    let s = solve_four_state_closed_form(0.5, 0.3, 0.5, [0.5, 0.5]).unwrap();
    let b = &s.beliefs.theta_hat;
    // States are ordered (rating, level) with the low rating first.
    assert!((b[0] - b[2]).abs() < 1e-10 && (b[1] - b[3]).abs() < 1e-10);
}

#[test]
fn infeasible_four_state_inputs_are_reported() {
    assert!(matches!(solve_four_state_closed_form(0.95, 0.3, 0.95, [0.5, 0.5]), Err(Error::Infeasible(_))));
    assert!(solve_four_state_closed_form(0.4, 0.3, 0.5, [0.5, 0.5]).is_err());
    let model = four_state_model(0.95, 0.3, 0.95, [0.5, 0.5]).unwrap();
    assert!(solve_equilibrium(&model, &SolverOptions::default()).is_err());
}

#[test]
fn equilibrium_masses_respect_the_stationary_bound() {
    for beta in [0.5, 0.9, 0.99] {
        let model = small_model(beta);
        let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
        let bound = mass_upper_bound(&model, &sol.cutoffs);
        assert!(sol.masses.by_type.iter().flatten().all(|&m| m >= 0.0 && m <= bound));
    }
}

#[test]
fn fixed_point_matches_direct_root_finding_on_the_stacked_conditions() {
    let model = small_model(0.9);
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    let n = 2 * model.n_states();
    let mut x: Vec<f64> = sol.cutoffs.by_type.concat();
    x.extend(sol.masses.by_type.concat());
    let truth = x.clone();
    for (k, v) in x.iter_mut().enumerate() {
        *v *= if k % 2 == 0 { 1.05 } else { 0.96 };
    }
    for _ in 0..50 {
        let g = DVector::from_vec(stacked_residual(&model, &x[..n], &x[n..]));
        if g.amax() < 1e-13 {
            break;
        }
        let j = finite_difference_jacobian(&model, &x[..n], &x[n..], 1e-7);
        let dx = j.lu().solve(&g).unwrap();
        for (v, d) in x.iter_mut().zip(dx.iter()) {
            *v -= d;
        }
    }
    assert!(sup_diff(&x, &truth) < 1e-8, "{}", sup_diff(&x, &truth));
}

#[test]
fn bad_solver_options_are_rejected() {
    let model = small_model(0.9);
    let opts = SolverOptions { damping: 0.0, ..SolverOptions::default() };
    assert!(solve_equilibrium(&model, &opts).is_err());
    let opts = SolverOptions { max_iter: 1, tol: 1e-300, ..SolverOptions::default() };
    assert!(matches!(solve_equilibrium(&model, &opts), Err(Error::NonConvergence { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn entry_mass_scales_masses_and_nothing_else(lambda in 0.01f64..100.0, beta in 0.5f64..0.99) {
        let model = small_model(beta);
        let base = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
        let scaled = solve_equilibrium(&model.with_entry_scaled(lambda), &SolverOptions::default()).unwrap();
        prop_assert!(sup_diff(&base.beliefs.theta_hat, &scaled.beliefs.theta_hat) < 1e-9);
        for ty in QualityType::ALL {
            prop_assert!(sup_diff(base.cutoffs.get(ty), scaled.cutoffs.get(ty)) < 1e-9);
            for (a, b) in base.masses.get(ty).iter().zip(scaled.masses.get(ty)) {
                prop_assert!((lambda * a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn beliefs_stay_within_the_quality_range(masses in prop::collection::vec((0.0f64..1e6, 1e-9f64..1e6), 1..20)) {
        let p = ModelParams::default();
        let mu = MassDistribution {
            by_type: [masses.iter().map(|m| m.0).collect(), masses.iter().map(|m| m.1).collect()],
        };
        for t in beliefs_from_masses(&mu, &p).unwrap().theta_hat {
            prop_assert!((p.theta_low..=p.theta_high).contains(&t));
        }
    }

    #[test]
    fn higher_beliefs_weakly_raise_cutoffs(
        base in prop::collection::vec(0.3f64..0.525, 4),
        bump in prop::collection::vec(0.0f64..0.1, 4),
        c in prop::collection::vec(-1.0f64..3.0, 4),
        g1 in 0.0f64..1.0,
    ) {
        let mut model = small_model(0.95);
        model.params.demand_gamma1 = g1;
        let lo = Beliefs { theta_hat: base.clone() };
        let hi = Beliefs { theta_hat: base.iter().zip(&bump).map(|(a, b)| a + b).collect() };
        let cut = CutoffProfile { by_type: [c.clone(), c] };
        let a = bellman_cutoff_update(&lo, &cut, &model.kernel, &model.cost, &model.params);
        let b = bellman_cutoff_update(&hi, &cut, &model.kernel, &model.cost, &model.params);
        for ty in QualityType::ALL {
            for (x, y) in a.get(ty).iter().zip(b.get(ty)) {
                prop_assert!(y >= x);
            }
        }
    }

    #[test]
    fn solutions_are_deterministic_and_within_bounds(beta in 0.3f64..0.99, alpha in 0.05f64..0.95) {
        let mut model = small_model(beta);
        model.params.alpha = alpha;
        let model = Model::normal(model.params.clone(), model.space.clone()).unwrap();
        let a = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
        let b = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.is_converged());
        for &t in &a.beliefs.theta_hat {
            prop_assert!((model.params.theta_low..=model.params.theta_high).contains(&t));
        }
    }
}
