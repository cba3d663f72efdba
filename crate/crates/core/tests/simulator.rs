use std::collections::HashMap;

use ratingeq::equilibrium::{solve_equilibrium, EquilibriumSolution, SolverOptions};
use ratingeq::model::{Model, ModelParams, QualityType, StateSpace};
use ratingeq::simulator::*;

fn table3() -> (Model, EquilibriumSolution) {
    let model = Model::normal(ModelParams::default(), StateSpace::default_grid()).unwrap();
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    (model, sol)
}

/// A small model with frequent exits, so survival checks have bite.
fn exiting() -> (Model, EquilibriumSolution) {
    let params = ModelParams { beta: 0.98, ..ModelParams::default() };
    let model = Model::normal(params, StateSpace::estimation_grid()).unwrap();
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    (model, sol)
}

#[test]
fn panels_are_reproducible_across_thread_counts() {
    let (model, sol) = exiting();
    let cfg = SimulationConfig::new(300, 85, 42);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_panel(&sol, &model, &cfg).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, simulate_panel(&sol, &model, &cfg).unwrap());
    let other = simulate_panel(&sol, &model, &SimulationConfig::new(300, 85, 43)).unwrap();
    assert_ne!(a, other);
}

#[test]
fn panel_invariants_hold() {
    let (model, sol) = exiting();
    let panel = simulate_panel(&sol, &model, &SimulationConfig::new(500, 60, 7)).unwrap();
    panel.validate_against(&model.space).unwrap();
    let mut exits = 0;
    for v in &panel.vendors {
        assert!(!v.observations.is_empty());
        for (k, o) in v.observations.iter().enumerate() {
            assert_eq!(o.age as usize, k);
            assert_eq!(o.week, v.meta.entry_week + o.age);
            assert!(o.week <= 60);
            let last = k + 1 == v.observations.len();
            assert!(!o.exited_this_week || last);
            assert_eq!(o.price_obs.is_none(), o.exited_this_week);
        }
        assert_eq!(v.meta.censored, !v.exited());
        if v.meta.censored {
            assert_eq!(v.observations.last().unwrap().week, 60);
        } else {
            exits += 1;
        }
        assert_eq!(v.observations[0].state_index, model.space.entry_state());
    }
    assert!(exits > 50, "the test model should produce exits, got {exits}");
}

#[test]
fn all_high_entrants_when_alpha_is_one() {
    let params = ModelParams { alpha: 1.0 - 1e-12, ..ModelParams::default() };
    let model = Model::normal(params, StateSpace::estimation_grid()).unwrap();
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    let panel = simulate_panel(&sol, &model, &SimulationConfig::new(200, 20, 1)).unwrap();
    assert!(panel.vendors.iter().all(|v| v.meta.true_type == Some(QualityType::High)));
}

#[test]
fn vanishing_price_noise_reveals_beliefs() {
    let params = ModelParams { sigma_p: 1e-300, ..ModelParams::default() };
    let model = Model::normal(params, StateSpace::estimation_grid()).unwrap();
    let sol = solve_equilibrium(&model, &SolverOptions::default()).unwrap();
    let panel = simulate_panel(&sol, &model, &SimulationConfig::new(100, 30, 3)).unwrap();
    for o in panel.observations() {
        if let Some(p) = o.price_obs {
            assert_eq!(p, sol.beliefs.theta_hat[o.state_index]);
        }
    }
}

#[test]
fn survival_transitions_and_price_noise_match_the_model() {
    let (model, sol) = exiting();
    let panel = simulate_panel(&sol, &model, &SimulationConfig::new(4000, 85, 11)).unwrap();
    let mut visits: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    let mut moves: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut resid = Vec::new();
    for v in &panel.vendors {
        let ty = v.meta.true_type.unwrap().index();
        for (k, o) in v.observations.iter().enumerate() {
            let e = visits.entry((ty, o.state_index)).or_default();
            e.0 += 1;
            e.1 += usize::from(!o.exited_this_week);
            if let Some(p) = o.price_obs {
                resid.push(p.ln() - sol.beliefs.theta_hat[o.state_index].ln());
                if let Some(next) = v.observations.get(k + 1) {
                    *moves.entry((ty, o.state_index, next.state_index)).or_default() += 1;
                }
            }
        }
    }
    let mut checked = 0;
    for (&(ty, s), &(n, stay)) in &visits {
        if n < 200 {
            continue;
        }
        let p = sol.survival[ty][s];
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
        let freq = stay as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * se + 1e-12, "type {ty} state {s}: {freq} vs {p} (n = {n})");
        checked += 1;
    }
    assert!(checked >= 3, "only {checked} well-visited cells");
    let mut from: HashMap<(usize, usize), usize> = HashMap::new();
    for (&(ty, s, _), &c) in &moves {
        *from.entry((ty, s)).or_default() += c;
    }
    for (&(ty, s, t), &c) in &moves {
        let n = from[&(ty, s)];
        if c < 200 {
            continue;
        }
        let qt = if ty == 0 { QualityType::Low } else { QualityType::High };
        let p = model.kernel.prob(qt, s, t);
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
        assert!((c as f64 / n as f64 - p).abs() <= 4.0 * se, "transition {ty} {s}->{t}");
    }
    let n = resid.len() as f64;
    assert!(n >= 1e4);
    let mean = resid.iter().sum::<f64>() / n;
    let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sigma_p = model.params.sigma_p;
    assert!(mean.abs() <= 4.0 * sigma_p / n.sqrt());
    assert!((sd / sigma_p - 1.0).abs() < 0.05);
}

#[test]
fn table3_panel_roundtrips_through_csv() {
    let (model, sol) = table3();
    let panel = simulate_panel(&sol, &model, &SimulationConfig::new(200, 85, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_panel(&panel, &path).unwrap();
    let back = read_panel(&path).unwrap();
    assert_eq!(back.vendors.len(), panel.vendors.len());
    for (a, b) in panel.vendors.iter().zip(&back.vendors) {
        assert_eq!(a.meta, b.meta);
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x.price_obs, y.price_obs);
            assert_eq!(x.state_index, y.state_index);
            assert!((x.rating - y.rating).abs() < 5e-7);
            assert_eq!((x.vendor_id, x.week, x.age, x.sales_bucket, x.exited_this_week),
                       (y.vendor_id, y.week, y.age, y.sales_bucket, y.exited_this_week));
        }
    }
    back.validate_against(&model.space).unwrap();
    // Without the sidecar the metadata is reconstructed, minus the type.
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    let bare = read_panel(&path).unwrap();
    for (a, b) in panel.vendors.iter().zip(&bare.vendors) {
        assert_eq!((a.meta.entry_week, a.meta.censored), (b.meta.entry_week, b.meta.censored));
        assert_eq!(b.meta.true_type, None);
    }
    let m = empirical_moments(&back).unwrap();
    assert_eq!(m.n_observations, panel.n_observations());
}

#[test]
fn malformed_files_are_rejected_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let header = "vendor_id,week,age,state_index,rating,sales_bucket,price_obs,exited\n";
    std::fs::write(&path, header).unwrap();
    assert_eq!(read_panel(&path).unwrap().n_vendors(), 0);

    std::fs::write(&path, format!("{header}0,1,0,0,5.000000,0,0.5,0\n0,3,2,0,5.000000,0,0.5,0\n")).unwrap();
    match read_panel(&path) {
        Err(ratingeq::Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, format!("{header}0,1,0,0,5.000000,0,abc,0\n")).unwrap();
    assert!(matches!(read_panel(&path), Err(ratingeq::Error::Parse { line: 2, .. })));
    std::fs::write(&path, format!("{header}0,1,0,0,5.000000,0,,1\n0,2,1,0,5.000000,0,0.5,0\n")).unwrap();
    assert!(matches!(read_panel(&path), Err(ratingeq::Error::Parse { line: 3, .. })));
}
