//! Oracles shared by several test targets.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ratingeq::equilibrium::EquilibriumSolution;
use ratingeq::estimation::LikelihoodInputs;
use ratingeq::model::{
    CostDistribution, EntryMeasure, Model, ModelParams, PayoffVariant, QualityType, RatingGrid, SalesGrid, StateSpace,
    TransitionKernel,
};
use ratingeq::simulator::PanelObservation;

/// Likelihood inputs given directly as numbers.
pub struct HandInputs {
    pub eta: [f64; 2],
    pub survival: [f64; 2],
    pub transition: [[f64; 2]; 2],
    pub price_density: [f64; 2],
    pub alpha: f64,
}

impl LikelihoodInputs for HandInputs {
    fn initial_prob(&self, _ty: QualityType, state: usize) -> f64 {
        self.eta[state]
    }
    fn survival(&self, _ty: QualityType, state: usize) -> f64 {
        self.survival[state]
    }
    fn exit(&self, _ty: QualityType, state: usize) -> f64 {
        1.0 - self.survival[state]
    }
    fn transition(&self, _ty: QualityType, from: usize, to: usize) -> f64 {
        self.transition[from][to]
    }
    fn log_price_density(&self, _price: f64, state: usize) -> f64 {
        self.price_density[state].ln()
    }
    fn high_share(&self) -> f64 {
        self.alpha
    }
}

/// Enter in state 0, survive (0.8) with price density 1.2, move to state 1
/// (0.5), exit there (0.3): likelihood 0.144.
pub fn hand_inputs() -> HandInputs {
    HandInputs {
        eta: [1.0, 0.0],
        survival: [0.8, 0.7],
        transition: [[0.5, 0.5], [0.0, 1.0]],
        price_density: [1.2, 0.9],
        alpha: 0.5,
    }
}

pub fn row(vendor_id: u64, age: u32, state: usize, price: Option<f64>, exited: bool) -> PanelObservation {
    PanelObservation {
        vendor_id,
        week: age + 1,
        age,
        state_index: state,
        rating: 5.0,
        sales_bucket: 0,
        price_obs: price,
        exited_this_week: exited,
    }
}

/// A 2 ratings × 2 buckets model in which sellers leave within a few weeks.
pub fn tiny_model() -> Model {
    let params = ModelParams { beta: 0.9, ..ModelParams::default() };
    let space = StateSpace::new(RatingGrid::new(vec![4.5, 5.0]).unwrap(), SalesGrid::unit_buckets(2).unwrap());
    Model::normal(params, space).unwrap()
}

/// The two vendor displays written out as plain products.
pub fn direct_vendor_likelihood(
    obs: &[PanelObservation],
    ty: QualityType,
    model: &Model,
    sol: &EquilibriumSolution,
) -> f64 {
    let t = ty.index();
    let p = &model.params;
    let phi = |price: f64, state: usize| {
        let mean = sol.beliefs.theta_hat[state];
        let z = (price / mean).ln() / p.sigma_p;
        (-0.5 * z * z).exp() / (price * p.sigma_p * (2.0 * std::f64::consts::PI).sqrt())
    };
    let share = if ty == QualityType::High { p.alpha } else { 1.0 - p.alpha };
    let eta = model.entry.by_type[t][obs[0].state_index] / (p.entry_mass * share);
    let mut l = eta;
    for (a, o) in obs.iter().enumerate() {
        if a > 0 {
            l *= model.kernel.matrix(ty)[(obs[a - 1].state_index, o.state_index)];
        }
        if o.exited_this_week {
            l *= sol.exit_prob[t][o.state_index];
        } else {
            l *= sol.survival[t][o.state_index] * phi(o.price_obs.unwrap(), o.state_index);
        }
    }
    l
}

/// Determinant by cofactor expansion along the first row.
pub fn cofactor_det(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)];
    }
    (0..n)
        .map(|j| {
            let minor = m.clone().remove_row(0).remove_column(j);
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * m[(0, j)] * cofactor_det(&minor)
        })
        .sum()
}

/// Every principal minor positive, by enumeration of index subsets.
pub fn exhaustive_p_matrix(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (1u32..(1 << n)).all(|mask| {
        let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]);
        cofactor_det(&sub) > 0.0
    })
}

/// A random instance with at most `max_states` states: normal costs, random
/// stochastic kernels and entry, random cutoffs and masses (stacked low type
/// first).
pub fn random_instance(seed: u64, max_states: usize) -> (Model, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_states);
    let stochastic = |rng: &mut ChaCha8Rng| {
        let mut m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
        for i in 0..n {
            let s = m.row(i).sum();
            m.row_mut(i).scale_mut(1.0 / s);
        }
        m
    };
    let kernel = TransitionKernel::new(stochastic(&mut rng), stochastic(&mut rng)).unwrap();
    let params = ModelParams {
        beta: rng.gen_range(0.3..0.99),
        payoff_variant: if rng.gen_bool(0.5) { PayoffVariant::MainText } else { PayoffVariant::SurvivalWeighted },
        ..ModelParams::default()
    };
    let space = StateSpace::new(RatingGrid::evenly_spaced(4.0, 5.0, n).unwrap(), SalesGrid::unit_buckets(1).unwrap());
    let low: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let high: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let entry = EntryMeasure::general(low, high).unwrap();
    let model = Model::new(params, space, kernel, CostDistribution::normal(0.386, 1.0).unwrap(), entry).unwrap();
    let cutoffs: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..2.0)).collect();
    let masses: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.2..5.0)).collect();
    (model, cutoffs, masses)
}
