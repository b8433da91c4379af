use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_j = j * T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Validation(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Validation("grid needs at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `t_j`. The last node is exactly `T`.
    #[inline]
    pub fn time(&self, j: usize) -> f64 {
        if j == self.n_steps {
            self.horizon
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|j| self.time(j)).collect()
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            n_steps: self.n_steps * factor.max(1),
        }
    }

    /// Grid with `factor` times fewer steps, if `factor` divides the step count.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::Validation(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.n_steps
            )));
        }
        Ok(Self {
            horizon: self.horizon,
            n_steps: self.n_steps / factor,
        })
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps && self.horizon == other.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_uniform_and_pinned() {
        let g = TimeGrid::new(2.0, 7).unwrap();
        let t = g.times();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[7], 2.0);
        for w in t.windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - g.dt()).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 3).is_err());
    }

    #[test]
    fn coarsening_requires_divisor() {
        let g = TimeGrid::new(1.0, 500).unwrap();
        assert_eq!(g.coarsened(4).unwrap().n_steps(), 125);
        assert!(g.coarsened(3).is_err());
        assert_eq!(g.refined(2).n_steps(), 1000);
    }
}
