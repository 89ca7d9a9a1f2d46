//! Ramp schedules over the continuation vector, each intermediate problem
//! warm-started from the previous solution.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::direct::{solve_ocp, ReducedProblem, SolveReport, SolverOptions};
use crate::error::{Error, Result};
use crate::forward::{ControlSchedule, StateTrajectory};
use crate::grid::{PhenotypeGrid, TimeGrid};
use crate::model::{apply_continuation, ContinuationVector, InitialData, ModelParameters};
use crate::pmp::{optimize_switching_times, SimplifiedProblem, SwitchingResult, SwitchingSearchOptions};

/// One ramp: move the named components to their targets, in `substeps`
/// equal increments, halving the increment on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RampStepRepr", into = "RampStepRepr")]
pub struct RampStep {
    pub targets: [Option<f64>; 6],
    pub lambda0: Option<f64>,
    pub substeps: usize,
    pub max_bisections: usize,
}

impl RampStep {
    pub fn new(assignments: &[(usize, f64)]) -> Self {
        let mut targets = [None; 6];
        for (i, v) in assignments {
            targets[*i] = Some(*v);
        }
        Self {
            targets,
            lambda0: None,
            substeps: 1,
            max_bisections: 6,
        }
    }

    pub fn objective(lambda0: f64) -> Self {
        Self {
            lambda0: Some(lambda0),
            ..Self::new(&[])
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.targets.iter().flatten().all(in_unit) || !self.lambda0.iter().all(in_unit) {
            return Err(Error::Config("ramp targets must lie in [0, 1]".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("ramp substeps must be at least 1".into()));
        }
        Ok(())
    }

    fn target_from(&self, from: &ContinuationVector) -> [f64; 6] {
        let mut to = from.components();
        for (t, v) in to.iter_mut().zip(&self.targets) {
            if let Some(v) = v {
                *t = *v;
            }
        }
        to
    }
}

/// Configuration form: `{"set": {"l2": 1.0, "lambda0": 0.5}, "substeps": 1}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RampStepRepr {
    set: BTreeMap<String, f64>,
    #[serde(default = "one")]
    substeps: usize,
    #[serde(default = "six")]
    max_bisections: usize,
}

fn one() -> usize {
    1
}

fn six() -> usize {
    6
}

impl TryFrom<RampStepRepr> for RampStep {
    type Error = Error;

    fn try_from(r: RampStepRepr) -> Result<Self> {
        let mut step = RampStep {
            substeps: r.substeps,
            max_bisections: r.max_bisections,
            ..RampStep::new(&[])
        };
        for (key, value) in r.set {
            match key.as_str() {
                "lambda0" => step.lambda0 = Some(value),
                k => {
                    let idx = k
                        .strip_prefix('l')
                        .and_then(|n| n.parse::<usize>().ok())
                        .filter(|n| (1..=6).contains(n))
                        .ok_or_else(|| Error::Config(format!("unknown ramp component '{k}'")))?;
                    step.targets[idx - 1] = Some(value);
                }
            }
        }
        step.validate()?;
        Ok(step)
    }
}

impl From<RampStep> for RampStepRepr {
    fn from(s: RampStep) -> Self {
        let mut set = BTreeMap::new();
        for (i, v) in s.targets.iter().enumerate() {
            if let Some(v) = v {
                set.insert(format!("l{}", i + 1), *v);
            }
        }
        if let Some(v) = s.lambda0 {
            set.insert("lambda0".into(), v);
        }
        RampStepRepr {
            set,
            substeps: s.substeps,
            max_bisections: s.max_bisections,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSchedule {
    pub name: String,
    pub steps: Vec<RampStep>,
}

impl ContinuationSchedule {
    /// Continuation vector and `lambda0` reached after every step, from zero.
    pub fn final_state(&self) -> (ContinuationVector, Option<f64>) {
        let mut lambda = ContinuationVector::zeros();
        let mut lambda0 = None;
        for s in &self.steps {
            lambda = ContinuationVector::new(s.target_from(&lambda)).expect("validated ramp");
            if s.lambda0.is_some() {
                lambda0 = s.lambda0;
            }
        }
        (lambda, lambda0)
    }

    pub fn targets_lambda0(&self) -> bool {
        self.steps.iter().any(|s| s.lambda0.is_some())
    }
}

/// `T = 60` reference ordering: coupling, diffusion and the healthy
/// constraint together, then the ratio constraint, then the dose bounds.
pub fn schedule_t60() -> ContinuationSchedule {
    use ContinuationVector as L;
    ContinuationSchedule {
        name: "t60".into(),
        steps: vec![
            RampStep::new(&[(L::INTERACTION, 1.0), (L::DIFFUSION, 1.0), (L::HEALTHY_CONSTRAINT, 1.0)]),
            RampStep::new(&[(L::RATIO_CONSTRAINT, 1.0)]),
            RampStep::new(&[(L::U1_LIFT, 1.0), (L::U2_LIFT, 1.0)]),
        ],
    }
}

/// `T = 80` reference ordering: coupling with the ratio constraint at three
/// quarters, the ratio constraint in full, then healthy constraint and dose
/// bounds together, diffusion last.
pub fn schedule_t80() -> ContinuationSchedule {
    use ContinuationVector as L;
    ContinuationSchedule {
        name: "t80".into(),
        steps: vec![
            RampStep::new(&[(L::INTERACTION, 1.0), (L::RATIO_CONSTRAINT, 0.75)]),
            RampStep::new(&[(L::RATIO_CONSTRAINT, 1.0)]),
            RampStep::new(&[(L::HEALTHY_CONSTRAINT, 1.0), (L::U1_LIFT, 1.0), (L::U2_LIFT, 1.0)]),
            RampStep::new(&[(L::DIFFUSION, 1.0)]),
        ],
    }
}

/// The `T = 60` ordering followed by a ramp of the objective weight.
pub fn schedule_t60_mixed(lambda0: f64) -> ContinuationSchedule {
    let mut s = schedule_t60();
    s.name = "t60-mixed".into();
    s.steps.push(RampStep::objective(lambda0));
    s
}

pub fn builtin_schedule(name: &str) -> Option<ContinuationSchedule> {
    match name {
        "t60" => Some(schedule_t60()),
        "t80" => Some(schedule_t80()),
        _ => None,
    }
}

/// Everything a schedule run needs.
#[derive(Debug, Clone)]
pub struct ContinuationConfig {
    /// Target parameters; `lambda0` is the objective weight to reach.
    pub params: ModelParameters,
    pub grid: PhenotypeGrid,
    pub time: TimeGrid,
    pub initial: InitialData,
    pub solver: SolverOptions,
    pub switching: SwitchingSearchOptions,
}

impl ContinuationConfig {
    pub fn problem(&self, lambda: &ContinuationVector, lambda0: f64) -> ReducedProblem {
        let mut params = apply_continuation(&self.params, lambda);
        params.lambda0 = lambda0;
        ReducedProblem::new(params, self.grid, self.time, self.initial.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Index of the ramp within the schedule.
    pub ramp: usize,
    pub lambda_before: ContinuationVector,
    pub lambda_after: ContinuationVector,
    pub lambda0_before: f64,
    pub lambda0_after: f64,
    /// Halvings of the ramp increment in force for this attempt.
    pub bisections: usize,
    pub accepted: bool,
    /// Whether clamping to the new dose bounds modified the warm start.
    pub warm_start_clamped: bool,
    pub report: SolveReport,
    pub wall_time_s: f64,
    pub controls: ControlSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schedule: String,
    pub seed: SwitchingResult,
    pub seed_controls: ControlSchedule,
    pub steps: Vec<StepRecord>,
    pub final_lambda: ContinuationVector,
    pub final_lambda0: f64,
    pub final_controls: ControlSchedule,
    pub final_cost: f64,
    pub aborted: bool,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub final_trajectory: Option<StateTrajectory>,
}

impl RunRecord {
    pub fn accepted_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.accepted)
    }

    pub fn total_bisections(&self) -> usize {
        self.steps.iter().filter(|s| !s.accepted).count()
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.report.inner_iterations).sum()
    }
}

fn interpolate(from: &[f64; 6], to: &[f64; 6], frac: f64) -> [f64; 6] {
    let mut out = *from;
    for k in 0..6 {
        out[k] = if frac >= 1.0 { to[k] } else { from[k] + frac * (to[k] - from[k]) };
    }
    out
}

/// Step 1: the switching-time optimum of the simplified problem, expanded
/// to a dose schedule at the reduced bounds.
pub fn seed(config: &ContinuationConfig) -> Result<(SwitchingResult, ControlSchedule)> {
    let simplified = SimplifiedProblem::new(&config.params, config.grid, config.time, &config.initial);
    let res = optimize_switching_times(&simplified, &config.switching)?;
    let controls = simplified.controls(&res.times);
    Ok((res, controls))
}

/// Runs the seed and then every ramp of `schedule`.
///
/// The objective weight starts at 0 (the seed minimizes `rho_C(T)`); if the
/// schedule never sets it and the configured weight is nonzero, a final
/// objective ramp is appended.
pub fn run_schedule(schedule: &ContinuationSchedule, config: &ContinuationConfig) -> Result<RunRecord> {
    let clock = Instant::now();
    for s in &schedule.steps {
        s.validate()?;
    }
    let mut steps = schedule.steps.clone();
    if !schedule.targets_lambda0() && config.params.lambda0 != 0.0 {
        steps.push(RampStep::objective(config.params.lambda0));
    }

    let (seed_result, seed_controls) = seed(config)?;
    let mut lambda = ContinuationVector::zeros();
    let mut lambda0 = 0.0;
    let mut controls = seed_controls.clone();
    let mut trajectory = None;
    let mut final_cost = seed_result.cost;
    let mut record = RunRecord {
        schedule: schedule.name.clone(),
        seed: seed_result,
        seed_controls,
        steps: Vec::new(),
        final_lambda: lambda,
        final_lambda0: lambda0,
        final_controls: controls.clone(),
        final_cost,
        aborted: false,
        wall_time_s: 0.0,
        final_trajectory: None,
    };

    for (ramp, step) in steps.iter().enumerate() {
        let start = lambda.components();
        let target = step.target_from(&lambda);
        let start0 = lambda0;
        let target0 = step.lambda0.unwrap_or(lambda0);
        let mut done = 0.0_f64;
        let mut increment = 1.0 / step.substeps as f64;
        let mut depth = 0;
        while done < 1.0 {
            let next = (done + increment).min(1.0);
            let lam_next = ContinuationVector::new(interpolate(&start, &target, next))?;
            let l0_next = if next >= 1.0 { target0 } else { start0 + next * (target0 - start0) };
            let problem = config.problem(&lam_next, l0_next);
            let warm = problem.project(&controls);
            let clamped = warm != controls;
            let attempt = Instant::now();
            let (solution, traj, report) = solve_ocp(&problem, &warm, &config.solver)?;
            let accepted = report.converged;
            record.steps.push(StepRecord {
                ramp,
                lambda_before: lambda,
                lambda_after: lam_next,
                lambda0_before: lambda0,
                lambda0_after: l0_next,
                bisections: depth,
                accepted,
                warm_start_clamped: clamped,
                report,
                wall_time_s: attempt.elapsed().as_secs_f64(),
                controls: solution.clone(),
            });
            if accepted {
                done = next;
                lambda = lam_next;
                lambda0 = l0_next;
                final_cost = record.steps.last().unwrap().report.cost;
                controls = solution;
                trajectory = Some(traj);
            } else {
                depth += 1;
                if depth > step.max_bisections {
                    record.aborted = true;
                    record.final_lambda = lambda;
                    record.final_lambda0 = lambda0;
                    record.final_controls = controls;
                    record.final_cost = final_cost;
                    record.final_trajectory = trajectory;
                    record.wall_time_s = clock.elapsed().as_secs_f64();
                    return Err(Error::ContinuationAborted {
                        ramp,
                        record: Box::new(record),
                    });
                }
                increment *= 0.5;
            }
        }
    }

    if trajectory.is_none() {
        // Empty schedule: the seed is the answer.
        let problem = config.problem(&lambda, lambda0);
        trajectory = Some(problem.rollout(&controls)?);
    }
    record.final_lambda = lambda;
    record.final_lambda0 = lambda0;
    record.final_controls = controls;
    record.final_cost = final_cost;
    record.final_trajectory = trajectory;
    record.wall_time_s = clock.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_default_coefficients;

    fn config(horizon: f64, nt: usize, nx: usize) -> ContinuationConfig {
        let grid = PhenotypeGrid::new(nx).unwrap();
        ContinuationConfig {
            params: sample_default_coefficients(&grid),
            grid,
            time: TimeGrid::new(horizon, nt).unwrap(),
            initial: InitialData::reference(&grid),
            solver: SolverOptions::default(),
            switching: SwitchingSearchOptions::default(),
        }
    }

    #[test]
    fn shipped_schedules_reach_all_ones() {
        for s in [schedule_t60(), schedule_t80()] {
            assert!(s.final_state().0.is_ones(), "{}", s.name);
        }
        assert_eq!(schedule_t60().steps.len(), 3);
        let t80 = schedule_t80();
        assert_eq!(t80.steps.last().unwrap().targets[ContinuationVector::DIFFUSION], Some(1.0));
        assert!(t80.steps[..3].iter().all(|s| s.targets[ContinuationVector::DIFFUSION].is_none()));
    }

    #[test]
    fn t80_first_step_sets_ratio_threshold_to_three_tenths() {
        let c = config(80.0, 250, 12);
        let s = schedule_t80();
        let lam = ContinuationVector::new(s.steps[0].target_from(&ContinuationVector::zeros())).unwrap();
        let p = c.problem(&lam, 0.0);
        assert!((p.params.theta_hc - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ramp_step_json_round_trip() {
        let json = r#"{"set": {"l2": 1.0, "l3": 0.75, "lambda0": 0.25}, "substeps": 3}"#;
        let step: RampStep = serde_json::from_str(json).unwrap();
        assert_eq!(step.targets[1], Some(1.0));
        assert_eq!(step.targets[2], Some(0.75));
        assert_eq!(step.lambda0, Some(0.25));
        assert_eq!(step.substeps, 3);
        let back: RampStep = serde_json::from_str(&serde_json::to_string(&step).unwrap()).unwrap();
        assert_eq!(back, step);
        assert!(serde_json::from_str::<RampStep>(r#"{"set": {"l7": 1.0}}"#).is_err());
        assert!(serde_json::from_str::<RampStep>(r#"{"set": {"l1": 2.0}}"#).is_err());
        assert!(serde_json::from_str::<RampStep>(r#"{"set": {}, "extra": 1}"#).is_err());
    }

    #[test]
    fn empty_schedule_returns_seed() {
        let c = config(20.0, 60, 8);
        let empty = ContinuationSchedule {
            name: "empty".into(),
            steps: vec![],
        };
        let rec = run_schedule(&empty, &c).unwrap();
        assert!(rec.steps.is_empty());
        assert_eq!(rec.final_controls, rec.seed_controls);
        assert_eq!(rec.final_cost, rec.seed.cost);
    }

    #[test]
    fn forced_failure_exercises_bisection_deterministically() {
        let mut c = config(20.0, 60, 8);
        c.solver.max_inner = 1;
        c.solver.max_outer = 1;
        let mut s = schedule_t60();
        s.steps[0].max_bisections = 3;
        let run = || match run_schedule(&s, &c) {
            Err(Error::ContinuationAborted { ramp, record }) => (ramp, record),
            other => panic!("expected abort, got {other:?}"),
        };
        let (ramp, a) = run();
        assert_eq!(ramp, 0);
        assert!(a.aborted);
        let depths: Vec<usize> = a.steps.iter().map(|s| s.bisections).collect();
        assert_eq!(depths, vec![0, 1, 2, 3]);
        // Each retry halves the distance travelled from the start.
        let l1: Vec<f64> = a.steps.iter().map(|s| s.lambda_after.get(0)).collect();
        assert_eq!(l1, vec![1.0, 0.5, 0.25, 0.125]);
        let (_, b) = run();
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.controls, y.controls);
            assert_eq!(x.lambda_after, y.lambda_after);
        }
    }
}
