//! The three reference scenarios.

use serde::{Deserialize, Serialize};

use crate::continuation::{schedule_t60, schedule_t60_mixed, schedule_t80, ContinuationConfig, ContinuationSchedule};
use crate::direct::SolverOptions;
use crate::error::Result;
use crate::grid::{PhenotypeGrid, TimeGrid};
use crate::model::{sample_default_coefficients, InitialData, ModelParameters};
use crate::pmp::SwitchingSearchOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestCase {
    /// `T = 60`, terminal cost only.
    Horizon60,
    /// `T = 80`, stricter healthy threshold, smaller reduced bounds.
    Horizon80,
    /// `T = 60` without diffusion, half running cost.
    Mixed,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub params: ModelParameters,
    pub grid: PhenotypeGrid,
    pub time: TimeGrid,
    pub initial: InitialData,
    pub schedule: ContinuationSchedule,
}

impl Scenario {
    pub fn config(&self) -> ContinuationConfig {
        ContinuationConfig {
            params: self.params.clone(),
            grid: self.grid,
            time: self.time,
            initial: self.initial.clone(),
            solver: SolverOptions::default(),
            switching: SwitchingSearchOptions::default(),
        }
    }
}

impl TestCase {
    pub fn scenario(self) -> Result<Scenario> {
        let (horizon, nt, nx) = match self {
            TestCase::Horizon60 => (60.0, 500, 20),
            TestCase::Horizon80 => (80.0, 250, 12),
            TestCase::Mixed => (60.0, 100, 20),
        };
        let grid = PhenotypeGrid::new(nx)?;
        let time = TimeGrid::new(horizon, nt)?;
        let mut params = sample_default_coefficients(&grid);
        let schedule = match self {
            TestCase::Horizon60 => schedule_t60(),
            TestCase::Horizon80 => {
                params.theta_h = 0.75;
                params.u1_max0 = 0.7;
                params.u2_max0 = 3.5;
                schedule_t80()
            }
            TestCase::Mixed => {
                params.beta_h = 0.0;
                params.beta_c = 0.0;
                params.lambda0 = 0.5;
                schedule_t60_mixed(0.5)
            }
        };
        params.validate(&grid)?;
        Ok(Scenario {
            params,
            grid,
            time,
            initial: InitialData::reference(&grid),
            schedule,
        })
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "1" | "horizon60" | "t60" => Some(TestCase::Horizon60),
            "2" | "horizon80" | "t80" => Some(TestCase::Horizon80),
            "3" | "mixed" => Some(TestCase::Mixed),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_cfl;

    #[test]
    fn scenarios_are_valid_and_stable() {
        for tc in [TestCase::Horizon60, TestCase::Horizon80, TestCase::Mixed] {
            let s = tc.scenario().unwrap();
            assert!(check_cfl(&s.params, &s.grid, &s.time).passed, "{tc:?}");
            assert!(s.schedule.final_state().0.is_ones());
        }
    }

    #[test]
    fn reference_cfl_numbers() {
        let s = TestCase::Horizon60.scenario().unwrap();
        assert!((check_cfl(&s.params, &s.grid, &s.time).number - 0.048).abs() < 1e-15);
        let s = TestCase::Horizon80.scenario().unwrap();
        assert!((check_cfl(&s.params, &s.grid, &s.time).number - 0.04608).abs() < 1e-15);
    }
}
