use nalgebra::DMatrix;
use proptest::prelude::*;
use ratingeq::model::kernel::{sales_ladder, tauchen};
use ratingeq::model::{
    build_product_kernel, build_sales_kernel, build_tauchen_rating_kernel, validate_assumption_a1,
    validate_assumption_a2, CostDistribution, ModelParams, QualityType, RatingGrid, SalesGrid, StateSpace,
    TransitionKernel,
};

/// Composite Simpson rule with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

fn row_sums(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

fn stochastic_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), n).prop_map(move |rows| {
        let mut m = DMatrix::zeros(n, n);
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum::<f64>() + 1e-3;
            for (j, v) in r.iter().enumerate() {
                m[(i, j)] = v / s;
            }
            m[(i, i)] += 1e-3 / s;
        }
        m
    })
}

#[test]
fn tauchen_collapses_onto_the_target_in_the_deterministic_limit() {
    let grid = RatingGrid::evenly_spaced(3.0, 5.0, 11).unwrap();
    let m = tauchen(&grid, 0.0, 4.0, 1e-8).unwrap();
    let target = grid.points().iter().position(|&r| (r - 4.0).abs() < 1e-12).unwrap();
    for i in 0..m.nrows() {
        assert!(m[(i, target)] > 1.0 - 1e-12, "row {i}: {}", m[(i, target)]);
    }
}

#[test]
fn a_ceiling_above_the_grid_piles_mass_on_the_top_rating() {
    let p = ModelParams::default();
    let grid = RatingGrid::evenly_spaced(3.0, 5.0, 51).unwrap();
    let m = build_tauchen_rating_kernel(&p, &grid, QualityType::High).unwrap();
    let n = grid.len();
    let pts = grid.points();
    let mean = p.xi * 5.0 + (1.0 - p.xi) * p.rho_high;
    let lower = 0.5 * (pts[n - 2] + pts[n - 1]);
    let oracle = simpson(|x| normal_pdf(x, mean, p.sigma_r), lower, mean + 12.0 * p.sigma_r, 20_000);
    assert!(oracle > 0.99);
    assert!((m[(n - 1, n - 1)] - oracle).abs() < 1e-10, "{} vs {oracle}", m[(n - 1, n - 1)]);
}

#[test]
fn sales_ladder_examples() {
    assert_eq!(sales_ladder(0.0, 4), DMatrix::identity(4, 4));
    let det = sales_ladder(1.0, 3);
    assert_eq!(det, DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
    let p = ModelParams::default();
    let m = build_sales_kernel(&p, &SalesGrid::unit_buckets(3).unwrap()).unwrap();
    let want = DMatrix::from_row_slice(3, 3, &[0.707, 0.293, 0.0, 0.0, 0.707, 0.293, 0.0, 0.0, 1.0]);
    assert!((m - want).abs().max() < 1e-15);
    let bad = ModelParams { gamma_sales: 1.0, ..p };
    assert!(build_sales_kernel(&bad, &SalesGrid::unit_buckets(3).unwrap()).is_err());
}

#[test]
fn product_kernel_examples() {
    let id = build_product_kernel(&DMatrix::identity(3, 3), &DMatrix::identity(2, 2)).unwrap();
    assert_eq!(id, DMatrix::identity(6, 6));
    let r = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
    let s = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.0, 1.0]);
    let k = build_product_kernel(&r, &s).unwrap();
    let space = StateSpace::new(RatingGrid::new(vec![4.0, 5.0]).unwrap(), SalesGrid::unit_buckets(2).unwrap());
    let (from, to) = (space.index(0, 0), space.index(0, 1));
    assert!((k[(from, to)] - 0.27).abs() < 1e-15);
    let not_stochastic = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 0.8]);
    assert!(build_product_kernel(&not_stochastic, &s).is_err());
}

#[test]
fn state_space_index_map_is_a_bijection_with_entry_at_the_top_rating() {
    for space in [StateSpace::default_grid(), StateSpace::estimation_grid()] {
        assert_eq!(space.len(), space.n_ratings() * space.n_buckets());
        let mut seen = vec![false; space.len()];
        for r in 0..space.n_ratings() {
            for b in 0..space.n_buckets() {
                let i = space.index(r, b);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(space.coords(i), (r, b));
            }
        }
        assert_eq!(space.coords(space.entry_state()), (space.n_ratings() - 1, 0));
    }
    assert_eq!(StateSpace::default_grid().len(), 510);
    assert_eq!(StateSpace::estimation_grid().len(), 126);
}

#[test]
fn grids_reject_invalid_layouts() {
    assert!(RatingGrid::new(vec![]).is_err());
    assert!(RatingGrid::new(vec![4.0, 4.0]).is_err());
    assert!(RatingGrid::new(vec![5.0, 4.0]).is_err());
    assert!(RatingGrid::new(vec![5.0]).is_ok());
    assert!(SalesGrid::new(vec![1, 5]).is_err());
    assert!(SalesGrid::new(vec![0, 5, 5]).is_err());
    assert!(SalesGrid::new(vec![0, 1, 5]).is_ok());
}

#[test]
fn assumption_a1_examples() {
    let id = TransitionKernel::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3)).unwrap();
    assert!(!validate_assumption_a1(&id).holds);
    let full = DMatrix::from_element(3, 3, 1.0 / 3.0);
    assert!(validate_assumption_a1(&TransitionKernel::new(full.clone(), full).unwrap()).holds);
    let ladder = sales_ladder(0.293, 4);
    let report = validate_assumption_a1(&TransitionKernel::new(ladder.clone(), ladder).unwrap());
    assert!(!report.holds);
    assert!(!report.detail.is_empty());
    let p = ModelParams::default();
    let kernel = TransitionKernel::from_params(&p, &StateSpace::estimation_grid()).unwrap();
    assert!(!validate_assumption_a1(&kernel).holds, "absorbing top bucket makes the estimated kernel reducible");
}

#[test]
fn assumption_a2_examples() {
    let p = ModelParams::default();
    assert!(validate_assumption_a2(&p.normal_cost().unwrap(), &p, None).holds);
    assert!(validate_assumption_a2(&CostDistribution::Uniform01, &p, None).holds);
}

#[test]
fn uniform_truncated_mean_is_half_the_cutoff() {
    for k in 1..=100 {
        let c = k as f64 / 100.0;
        assert_eq!(CostDistribution::Uniform01.truncated_mean(c), c / 2.0);
    }
}

#[test]
fn normal_truncated_mean_matches_quadrature() {
    let (mean, sd) = (0.386, 1.0);
    let cost = CostDistribution::normal(mean, sd).unwrap();
    for &c in &[-3.0, -1.0, 0.0, 0.386, 1.0, 2.5, 6.0] {
        let lo = mean - 14.0 * sd;
        let mass = simpson(|x| normal_pdf(x, mean, sd), lo, c, 40_000);
        let first = simpson(|x| x * normal_pdf(x, mean, sd), lo, c, 40_000);
        let oracle = first / mass;
        assert!((cost.truncated_mean(c) - oracle).abs() < 1e-10, "c = {c}: {} vs {oracle}", cost.truncated_mean(c));
        assert!((cost.cdf(c) - mass).abs() < 1e-10);
    }
}

#[test]
fn normal_cost_law_rejects_a_non_positive_scale() {
    assert!(CostDistribution::normal(0.0, 0.0).is_err());
    assert!(CostDistribution::normal(0.0, -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tauchen_rows_are_stochastic(
        n in 2usize..30,
        xi in 0.0f64..0.99,
        rho in 2.0f64..7.0,
        sigma in 0.005f64..1.0,
    ) {
        let grid = RatingGrid::evenly_spaced(3.0, 5.0, n).unwrap();
        let m = tauchen(&grid, xi, rho, sigma).unwrap();
        prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for s in row_sums(&m) {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tauchen_conditional_mean_tracks_the_drift(
        n in 11usize..41,
        xi in 0.0f64..0.95,
        rho in 3.5f64..4.5,
        sigma in 0.01f64..0.2,
    ) {
        let grid = RatingGrid::evenly_spaced(3.0, 5.0, n).unwrap();
        let pts = grid.points();
        let width = pts[1] - pts[0];
        let m = tauchen(&grid, xi, rho, sigma).unwrap();
        for i in 1..n - 1 {
            let target = xi * pts[i] + (1.0 - xi) * rho;
            // Boundary cells are exempt: skip rows whose drift target lands near the edges.
            if target - 4.0 * sigma < pts[0] + width || target + 4.0 * sigma > pts[n - 1] - width {
                continue;
            }
            let mean: f64 = (0..n).map(|j| m[(i, j)] * pts[j]).sum();
            prop_assert!((mean - target).abs() <= width, "row {}: {} vs {}", i, mean, target);
        }
    }

    #[test]
    fn product_kernel_is_stochastic_and_marginalizes(r in stochastic_matrix(4), s in stochastic_matrix(3)) {
        let k = build_product_kernel(&r, &s).unwrap();
        let space = StateSpace::new(
            RatingGrid::evenly_spaced(4.0, 5.0, 4).unwrap(),
            SalesGrid::unit_buckets(3).unwrap(),
        );
        for total in row_sums(&k) {
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        for from in 0..space.len() {
            let (ri, si) = space.coords(from);
            for rj in 0..4 {
                let m: f64 = (0..3).map(|sj| k[(from, space.index(rj, sj))]).sum();
                prop_assert!((m - r[(ri, rj)]).abs() < 1e-12);
            }
            for sj in 0..3 {
                let m: f64 = (0..4).map(|rj| k[(from, space.index(rj, sj))]).sum();
                prop_assert!((m - s[(si, sj)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strictly_positive_kernels_satisfy_a1(m in stochastic_matrix(5)) {
        let positive = m.map(|v| 0.5 * v + 0.1);
        let kernel = TransitionKernel::new(positive.clone(), positive).unwrap();
        prop_assert!(validate_assumption_a1(&kernel).holds);
    }

    #[test]
    fn truncated_mean_never_exceeds_the_cutoff(c in -8.0f64..8.0, mean in -1.0f64..1.0, sd in 0.1f64..3.0) {
        let cost = CostDistribution::normal(mean, sd).unwrap();
        prop_assert!(cost.truncated_mean(c) <= c);
        prop_assert!(cost.truncated_mean(c) < mean + 1e-12);
        let u = CostDistribution::Uniform01;
        prop_assert!(u.truncated_mean(c) <= c.max(0.0));
    }

    #[test]
    fn normal_cdf_is_strictly_increasing(c in -6.0f64..6.0, dc in 1e-3f64..1.0) {
        let cost = CostDistribution::normal(0.386, 1.0).unwrap();
        prop_assert!(cost.cdf(c + dc) > cost.cdf(c));
        prop_assert!((cost.cdf(c) + cost.sf(c) - 1.0).abs() < 1e-15);
    }
}
