//! Uniform phenotype and time grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid on the phenotype interval [0, 1] with `num_cells + 1` nodes
/// `x_j = j / num_cells`, endpoints included.
///
/// Node `j < num_cells` stands for the cell `[x_j, x_{j+1})`; the rectangle
/// rule sums those nodes only, so the node at `x = 1` carries no mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeGrid {
    num_cells: usize,
}

impl PhenotypeGrid {
    pub fn new(num_cells: usize) -> Result<Self> {
        if num_cells < 2 {
            return Err(Error::InvalidParameter(format!(
                "phenotype grid needs at least 2 cells, got {num_cells}"
            )));
        }
        Ok(Self { num_cells })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_nodes(&self) -> usize {
        self.num_cells + 1
    }

    pub fn cell_width(&self) -> f64 {
        1.0 / self.num_cells as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 / self.num_cells as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.num_cells).map(|j| self.node(j)).collect()
    }

    /// Rectangle rule `h * sum_{j < N_x} values[j]`, summed in index order.
    pub fn rectangle(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.num_nodes());
        self.cell_width() * values[..self.num_cells].iter().sum::<f64>()
    }

    /// Rectangle rule of the pointwise product `weights * values`.
    pub fn weighted_rectangle(&self, weights: &[f64], values: &[f64]) -> f64 {
        let s: f64 = weights[..self.num_cells]
            .iter()
            .zip(&values[..self.num_cells])
            .map(|(w, v)| w * v)
            .sum();
        self.cell_width() * s
    }
}

/// Uniform time grid `t_i = i * T / N_t`, `i = 0..=N_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    num_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, num_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if num_steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs at least 2 steps, got {num_steps}"
            )));
        }
        Ok(Self { horizon, num_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.num_steps {
            self.horizon
        } else {
            i as f64 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.num_steps).map(|i| self.time(i)).collect()
    }

    /// Index of the grid node nearest to `t`, clamped to `[0, N_t]`.
    /// Exact half-way ties go to the later node.
    pub fn nearest_node(&self, t: f64) -> usize {
        let k = (t / self.step() + 0.5).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.num_steps)
        }
    }
}
