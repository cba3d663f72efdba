//! Public state space: rating levels crossed with sales buckets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered rating levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingGrid {
    points: Vec<f64>,
}

impl RatingGrid {
    /// Grid from explicit points (strictly increasing, finite, non-empty).
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("rating grid needs at least one point".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("rating points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("rating points must be strictly increasing".into()));
        }
        Ok(RatingGrid { points })
    }

    /// `n` evenly spaced points on `[min, max]`, rounded to 6 decimals so
    /// that they survive a text round trip bit-for-bit.
    pub fn evenly_spaced(min: f64, max: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid("rating grid needs at least one point".into()));
        }
        if n == 1 {
            return Self::new(vec![max]);
        }
        if !(max > min) {
            return Err(Error::InvalidGrid(format!("empty rating range [{min}, {max}]")));
        }
        let step = (max - min) / (n - 1) as f64;
        let pts = (0..n)
            .map(|k| {
                let x = if k == n - 1 { max } else { min + k as f64 * step };
                (x * 1e6).round() / 1e6
            })
            .collect();
        Self::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[r_min, r_max]`.
    pub fn bounds(&self) -> [f64; 2] {
        [self.points[0], self.points[self.points.len() - 1]]
    }

    /// Index of the grid point nearest to `r`, and whether `r` had to be moved.
    pub fn snap(&self, r: f64) -> (usize, bool) {
        let mut best = 0;
        for (i, &p) in self.points.iter().enumerate() {
            if (p - r).abs() < (self.points[best] - r).abs() {
                best = i;
            }
        }
        (best, (self.points[best] - r).abs() > 1e-9)
    }
}

/// Half-open sales-count buckets `[e_k, e_{k+1})`, the last unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalesGrid {
    lower_edges: Vec<u64>,
}

impl SalesGrid {
    /// Buckets from their lower edges; the first must be 0.
    pub fn new(lower_edges: Vec<u64>) -> Result<Self> {
        if lower_edges.first() != Some(&0) {
            return Err(Error::InvalidGrid("sales buckets must start at 0".into()));
        }
        if lower_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("sales bucket edges must be strictly increasing".into()));
        }
        Ok(SalesGrid { lower_edges })
    }

    /// 0–1, 1–5, 5–10, 10–50, 50–100, 100–500, 500–1000, 1000–2000, 2000–5000, 5000+.
    pub fn default_buckets() -> Self {
        SalesGrid { lower_edges: vec![0, 1, 5, 10, 50, 100, 500, 1000, 2000, 5000] }
    }

    /// The coarse six-bucket grid used for estimation: 0–1, 1–10, 10–100, 100–1000, 1000–5000, 5000+.
    pub fn estimation_buckets() -> Self {
        SalesGrid { lower_edges: vec![0, 1, 10, 100, 1000, 5000] }
    }

    /// `k` buckets with edges 0, 1, 2, … (for small research models).
    pub fn unit_buckets(k: usize) -> Result<Self> {
        Self::new((0..k as u64).collect())
    }

    pub fn lower_edges(&self) -> &[u64] {
        &self.lower_edges
    }

    pub fn len(&self) -> usize {
        self.lower_edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower_edges.is_empty()
    }

    /// `(lower, upper)` of bucket `k`; `upper` is `None` for the last bucket.
    pub fn bucket(&self, k: usize) -> (u64, Option<u64>) {
        (self.lower_edges[k], self.lower_edges.get(k + 1).copied())
    }
}

/// Lexicographic product of ratings and buckets: `index = r·|buckets| + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    rating_grid: RatingGrid,
    sales_grid: SalesGrid,
}

impl StateSpace {
    pub fn new(rating_grid: RatingGrid, sales_grid: SalesGrid) -> Self {
        StateSpace { rating_grid, sales_grid }
    }

    /// 51 ratings on [3, 5] × ten sales buckets.
    pub fn default_grid() -> Self {
        Self::new(RatingGrid::evenly_spaced(3.0, 5.0, 51).expect("static grid"), SalesGrid::default_buckets())
    }

    /// 21 ratings on [3, 5] × six sales buckets.
    pub fn estimation_grid() -> Self {
        Self::new(RatingGrid::evenly_spaced(3.0, 5.0, 21).expect("static grid"), SalesGrid::estimation_buckets())
    }

    pub fn rating_grid(&self) -> &RatingGrid {
        &self.rating_grid
    }

    pub fn sales_grid(&self) -> &SalesGrid {
        &self.sales_grid
    }

    pub fn n_ratings(&self) -> usize {
        self.rating_grid.len()
    }

    pub fn n_buckets(&self) -> usize {
        self.sales_grid.len()
    }

    pub fn len(&self) -> usize {
        self.n_ratings() * self.n_buckets()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, rating_idx: usize, bucket: usize) -> usize {
        debug_assert!(rating_idx < self.n_ratings() && bucket < self.n_buckets());
        rating_idx * self.n_buckets() + bucket
    }

    /// `(rating index, bucket)` of a state index.
    pub fn coords(&self, state: usize) -> (usize, usize) {
        (state / self.n_buckets(), state % self.n_buckets())
    }

    pub fn rating(&self, state: usize) -> f64 {
        self.rating_grid.points()[self.coords(state).0]
    }

    pub fn bucket(&self, state: usize) -> usize {
        self.coords(state).1
    }

    /// Entry state ω₀: top rating, first sales bucket.
    pub fn entry_state(&self) -> usize {
        self.index(self.n_ratings() - 1, 0)
    }

    /// State index for an observed (rating, bucket) pair, if the rating is a grid point.
    pub fn lookup(&self, rating: f64, bucket: usize) -> Option<usize> {
        if bucket >= self.n_buckets() {
            return None;
        }
        let (r, moved) = self.rating_grid.snap(rating);
        if moved {
            None
        } else {
            Some(self.index(r, bucket))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_map_is_a_bijection() {
        let s = StateSpace::default_grid();
        assert_eq!(s.len(), 510);
        let mut seen = vec![false; s.len()];
        for r in 0..s.n_ratings() {
            for b in 0..s.n_buckets() {
                let i = s.index(r, b);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(s.coords(i), (r, b));
            }
        }
        assert_eq!(s.coords(s.entry_state()), (50, 0));
        assert_eq!(s.rating(s.entry_state()), 5.0);
    }

    #[test]
    fn grids_reject_invalid_layouts() {
        assert!(RatingGrid::new(vec![]).is_err());
        assert!(RatingGrid::new(vec![3.0, 3.0]).is_err());
        assert!(SalesGrid::new(vec![1, 5]).is_err());
        assert!(SalesGrid::new(vec![0, 5, 5]).is_err());
        assert_eq!(SalesGrid::default_buckets().bucket(9), (5000, None));
    }

    #[test]
    fn evenly_spaced_points_round_trip_through_six_decimals() {
        let g = RatingGrid::evenly_spaced(3.0, 5.0, 51).unwrap();
        for &p in g.points() {
            let s = format!("{p:.6}");
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), p.to_bits());
        }
        assert_eq!(g.bounds(), [3.0, 5.0]);
    }
}
