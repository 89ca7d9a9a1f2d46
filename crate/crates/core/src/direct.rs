//! Direct solution of an intermediate problem in reduced form: the decision
//! vector holds the `2 N_t` dose values, the state is eliminated by the
//! forward scheme, and gradients come from an exact reverse sweep through
//! that scheme. Dose bounds are handled by projection, the two path
//! constraints by an augmented Lagrangian.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxmin::{self, BoxMinOptions, InnerMethod, Termination};
use crate::error::{Error, Result};
use crate::forward::{
    apply_laplacian_transpose, constraint_trace, objective, pressures, rollout,
    ControlSchedule, Population, StateTrajectory,
};
use crate::grid::{PhenotypeGrid, TimeGrid};
use crate::model::{InitialData, ModelParameters};

/// Form of the tumour-ratio constraint used inside the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioForm {
    /// `rho_H / (rho_H + rho_C) - theta >= 0`
    #[default]
    Ratio,
    /// `(1 - theta) rho_H - theta rho_C >= 0`
    Linearized,
}

/// A fixed intermediate problem with its effective data.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub params: ModelParameters,
    pub grid: PhenotypeGrid,
    pub time: TimeGrid,
    pub initial: InitialData,
    pub ratio_form: RatioForm,
}

impl ReducedProblem {
    pub fn new(params: ModelParameters, grid: PhenotypeGrid, time: TimeGrid, initial: InitialData) -> Self {
        Self {
            params,
            grid,
            time,
            initial,
            ratio_form: RatioForm::Ratio,
        }
    }

    pub fn dimension(&self) -> usize {
        2 * self.time.num_steps()
    }

    pub fn lambda0(&self) -> f64 {
        self.params.lambda0
    }

    /// Upper bounds of the decision vector.
    pub fn upper_bounds(&self) -> Vec<f64> {
        let nt = self.time.num_steps();
        let mut u = vec![self.params.u1_max; nt];
        u.extend(std::iter::repeat_n(self.params.u2_max, nt));
        u
    }

    pub fn project(&self, controls: &ControlSchedule) -> ControlSchedule {
        controls.clamped(self.params.u1_max, self.params.u2_max)
    }

    pub fn rollout(&self, controls: &ControlSchedule) -> Result<StateTrajectory> {
        rollout(&self.initial, controls, &self.params, &self.grid, &self.time)
    }

    /// Constraint values `(g_HC, g_H)` at every time node in the optimizer's
    /// form; the ratio form equals [`constraint_trace`].
    pub fn constraints(&self, traj: &StateTrajectory) -> (Vec<f64>, Vec<f64>) {
        match self.ratio_form {
            RatioForm::Ratio => {
                let t = constraint_trace(traj, &self.params);
                (t.c_hc, t.c_h)
            }
            RatioForm::Linearized => {
                let th = self.params.theta_hc;
                let ghc = traj
                    .rho_h
                    .iter()
                    .zip(&traj.rho_c)
                    .map(|(h, c)| (1.0 - th) * h - th * c)
                    .collect();
                let rho_h0 = traj.rho_h[0];
                let gh = traj.rho_h.iter().map(|h| h - self.params.theta_h * rho_h0).collect();
                (ghc, gh)
            }
        }
    }
}

/// Multipliers and penalty of the augmented Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugLagState {
    pub mu_hc: Vec<f64>,
    pub mu_h: Vec<f64>,
    pub penalty: f64,
    pub feas_tol: f64,
    pub grad_tol: f64,
}

impl AugLagState {
    pub fn new(num_steps: usize, penalty: f64, feas_tol: f64, grad_tol: f64) -> Self {
        Self {
            mu_hc: vec![0.0; num_steps + 1],
            mu_h: vec![0.0; num_steps + 1],
            penalty,
            feas_tol,
            grad_tol,
        }
    }

    /// `(rho/2) [max(0, mu/rho - g)^2 - (mu/rho)^2]` and its derivative in `g`.
    fn term(&self, mu: f64, g: f64) -> (f64, f64) {
        let r = self.penalty;
        let shifted = (mu / r - g).max(0.0);
        (0.5 * r * (shifted * shifted - (mu / r) * (mu / r)), -r * shifted)
    }

    /// First-order update `mu <- max(0, mu - rho g)`.
    pub fn update_multipliers(&mut self, g_hc: &[f64], g_h: &[f64]) {
        let r = self.penalty;
        for (mu, g) in self.mu_hc.iter_mut().zip(g_hc) {
            *mu = (*mu - r * g).max(0.0);
        }
        for (mu, g) in self.mu_h.iter_mut().zip(g_h) {
            *mu = (*mu - r * g).max(0.0);
        }
    }
}

/// Everything one forward/reverse pass produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Plain objective.
    pub cost: f64,
    /// Objective plus augmented-Lagrangian terms (equal to `cost` without them).
    pub value: f64,
    pub gradient: Vec<f64>,
    pub trajectory: StateTrajectory,
    pub g_hc: Vec<f64>,
    pub g_h: Vec<f64>,
}

impl Evaluation {
    pub fn max_violation(&self) -> f64 {
        self.g_hc.iter().chain(&self.g_h).fold(0.0_f64, |m, g| m.max(-g))
    }
}

/// Forward rollout, optional augmented-Lagrangian terms, and the exact
/// gradient of the resulting discrete value with respect to every dose.
pub fn evaluate(controls: &ControlSchedule, problem: &ReducedProblem, al: Option<&AugLagState>) -> Result<Evaluation> {
    let traj = problem.rollout(controls)?;
    let nt = problem.time.num_steps();
    let dt = problem.time.step();
    let lambda0 = problem.lambda0();
    let cost = objective(&traj, lambda0, &problem.time);
    let (g_hc, g_h) = problem.constraints(&traj);

    // Sensitivities of the value with respect to the masses at each node.
    let mut d_rho_h = vec![0.0; nt + 1];
    let mut d_rho_c = vec![0.0; nt + 1];
    for v in &mut d_rho_c[..nt] {
        *v = lambda0 * dt;
    }
    d_rho_c[nt] += 1.0 - lambda0;

    let mut value = cost;
    if let Some(al) = al {
        let th = problem.params.theta_hc;
        for i in 0..=nt {
            let (phi, dphi) = al.term(al.mu_hc[i], g_hc[i]);
            value += phi;
            let (rh, rc) = (traj.rho_h[i], traj.rho_c[i]);
            match problem.ratio_form {
                RatioForm::Ratio => {
                    let s = rh + rc;
                    if s > 0.0 {
                        d_rho_h[i] += dphi * rc / (s * s);
                        d_rho_c[i] -= dphi * rh / (s * s);
                    }
                }
                RatioForm::Linearized => {
                    d_rho_h[i] += dphi * (1.0 - th);
                    d_rho_c[i] -= dphi * th;
                }
            }
            let (phi, dphi) = al.term(al.mu_h[i], g_h[i]);
            value += phi;
            // rho_H(0) enters g_H but does not depend on the doses.
            d_rho_h[i] += dphi;
        }
    }

    let gradient = reverse_sweep(controls, problem, &traj, &d_rho_h, &d_rho_c);
    Ok(Evaluation {
        cost,
        value,
        gradient,
        trajectory: traj,
        g_hc,
        g_h,
    })
}

/// Reverse-mode differentiation of the forward scheme given the value's
/// sensitivity to `rho_H(t_i)` and `rho_C(t_i)`.
fn reverse_sweep(
    controls: &ControlSchedule,
    problem: &ReducedProblem,
    traj: &StateTrajectory,
    d_rho_h: &[f64],
    d_rho_c: &[f64],
) -> Vec<f64> {
    let params = &problem.params;
    let grid = &problem.grid;
    let nt = problem.time.num_steps();
    let dt = problem.time.step();
    let h = grid.cell_width();
    let nx = grid.num_cells();
    let m = grid.num_nodes();
    let pops = [Population::healthy(params), Population::cancer(params)];
    let states = [&traj.n_h, &traj.n_c];

    let mut grad = vec![0.0; 2 * nt];
    // adj[p][j] = d value / d n_p(t_{i+1}, x_j)
    let mut adj = [vec![0.0; m], vec![0.0; m]];
    for j in 0..nx {
        adj[0][j] = h * d_rho_h[nt];
        adj[1][j] = h * d_rho_c[nt];
    }
    let mut b = vec![0.0; m];
    let mut lt = vec![0.0; m];

    for i in (0..nt).rev() {
        let (u1, u2) = (controls.u1[i], controls.u2[i]);
        let (i_h, i_c) = pressures(params, traj.rho_h[i], traj.rho_c[i]);
        let press = [i_h, i_c];
        let mut d_press = [0.0; 2];
        let mut d_u1 = 0.0;
        let mut d_u2 = 0.0;
        for p in 0..2 {
            let pop = &pops[p];
            let cur = states[p].row(i);
            let next = states[p].row(i + 1);
            let damp = 1.0 / (1.0 + pop.alpha * u2);
            let d_damp = -pop.alpha * damp * damp;
            let a = &mut adj[p];
            for j in 0..m {
                b[j] = a[j] * pop.decay(j, press[p], u1, dt);
                let an = a[j] * next[j];
                d_press[p] -= an * dt * pop.death[j] / pop.competition(j, press[p], dt);
                d_u1 -= an * dt * pop.drug[j];
                d_u2 += b[j] * cur[j] * dt * pop.growth[j] * d_damp;
            }
            if pop.beta != 0.0 {
                apply_laplacian_transpose(&b, dt * pop.beta / (h * h), &mut lt);
            } else {
                lt.iter_mut().for_each(|v| *v = 0.0);
            }
            for j in 0..m {
                a[j] = b[j] * (1.0 + dt * pop.growth[j] * damp) + lt[j];
            }
        }
        let d_rh = d_press[0] * params.a_hh + d_press[1] * params.a_ch + d_rho_h[i];
        let d_rc = d_press[0] * params.a_hc + d_press[1] * params.a_cc + d_rho_c[i];
        for j in 0..nx {
            adj[0][j] += h * d_rh;
            adj[1][j] += h * d_rc;
        }
        grad[i] = d_u1;
        grad[nt + i] = d_u2;
    }
    grad
}

/// Plain objective and its exact discrete gradient (layout: `u1` then `u2`).
pub fn cost_and_gradient(controls: &ControlSchedule, problem: &ReducedProblem) -> Result<(f64, Vec<f64>)> {
    let e = evaluate(controls, problem, None)?;
    Ok((e.cost, e.gradient))
}

/// Augmented-Lagrangian value and its exact discrete gradient.
pub fn augmented_cost_and_gradient(
    controls: &ControlSchedule,
    problem: &ReducedProblem,
    al: &AugLagState,
) -> Result<(f64, Vec<f64>)> {
    let e = evaluate(controls, problem, Some(al))?;
    Ok((e.value, e.gradient))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub feas_tol: f64,
    pub grad_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub inner_method: InnerMethod,
    pub armijo_c: f64,
    pub max_halvings: usize,
    pub lbfgs_memory: usize,
    pub ratio_form: RatioForm,
    pub record_history: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e12,
            feas_tol: 1e-6,
            grad_tol: 1e-6,
            max_outer: 30,
            max_inner: 500,
            inner_method: InnerMethod::TwoMetricLbfgs,
            armijo_c: 1e-4,
            max_halvings: 60,
            lbfgs_memory: 10,
            ratio_form: RatioForm::Ratio,
            record_history: false,
        }
    }
}

impl SolverOptions {
    fn inner(&self, grad_tol: f64) -> BoxMinOptions {
        BoxMinOptions {
            method: self.inner_method,
            max_iterations: self.max_inner,
            grad_tol,
            armijo_c: self.armijo_c,
            max_halvings: self.max_halvings,
            memory: self.lbfgs_memory,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub outer: usize,
    pub inner: usize,
    pub cost: f64,
    pub violation: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub cost: f64,
    pub max_violation: f64,
    /// Scaled projected-gradient norm of the Lagrangian, see [`scaled_pg_norm`].
    pub pg_norm: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub evaluations: usize,
    pub line_search_failures: usize,
    pub final_penalty: f64,
    pub wall_time_s: f64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<HistoryRow>,
}

/// Projected-gradient norm measured per unit time:
/// `|| P(u - grad) - u ||_inf / dt`. Dividing by the step makes the
/// measure independent of `N_t`, since each dose acts for one step.
pub fn scaled_pg_norm(x: &[f64], grad: &[f64], upper: &[f64], dt: f64) -> f64 {
    boxmin::projected_gradient_norm(x, grad, upper) / dt
}

/// Minimizes the augmented objective for fixed multipliers.
pub fn solve_inner(
    problem: &ReducedProblem,
    al: &AugLagState,
    start: &ControlSchedule,
    opts: &SolverOptions,
) -> Result<(ControlSchedule, SolveReport)> {
    let clock = Instant::now();
    start.check(problem.time.num_steps(), problem.params.u1_max, problem.params.u2_max)?;
    let upper = problem.upper_bounds();
    let dt = problem.time.step();
    // Work in box-normalized variables v = u / u_max. Per coordinate the
    // projected-gradient term in u is at most max(s, 1/s) times the one in
    // v, so the inner tolerance is tightened by that factor.
    let scale: Vec<f64> = upper.iter().map(|u| if *u > 0.0 { *u } else { 1.0 }).collect();
    let spread = scale.iter().fold(1.0_f64, |m, s| m.max(*s).max(1.0 / s));
    let inner_opts = opts.inner(al.grad_tol * dt / spread);
    let unit: Vec<f64> = upper.iter().map(|u| if *u > 0.0 { 1.0 } else { 0.0 }).collect();
    let to_u = |v: &[f64]| -> Vec<f64> { v.iter().zip(&scale).map(|(v, s)| v * s).collect() };
    let v0: Vec<f64> = start.to_vector().iter().zip(&scale).map(|(u, s)| u / s).collect();
    let mut r = boxmin::minimize(
        |v| {
            let (f, g) = augmented_cost_and_gradient(&ControlSchedule::from_vector(&to_u(v)), problem, al)?;
            Ok((f, g.iter().zip(&scale).map(|(g, s)| g * s).collect()))
        },
        &v0,
        &unit,
        &inner_opts,
    )?;
    r.x = to_u(&r.x);
    r.x.iter_mut().zip(&upper).for_each(|(x, u)| *x = x.min(*u));
    r.gradient = r.gradient.iter().zip(&scale).map(|(g, s)| g / s).collect();
    let controls = ControlSchedule::from_vector(&r.x);
    let e = evaluate(&controls, problem, Some(al))?;
    let violation = e.max_violation();
    let pg = scaled_pg_norm(&r.x, &r.gradient, &upper, dt);
    Ok((
        controls,
        SolveReport {
            cost: e.cost,
            max_violation: violation,
            pg_norm: pg,
            inner_iterations: r.iterations,
            outer_iterations: 0,
            evaluations: r.evaluations + 1,
            line_search_failures: usize::from(r.termination == Termination::LineSearchFailure),
            final_penalty: al.penalty,
            wall_time_s: clock.elapsed().as_secs_f64(),
            converged: r.termination == Termination::Converged && violation <= al.feas_tol,
            history: Vec::new(),
        },
    ))
}

/// Outer augmented-Lagrangian loop for one intermediate problem.
///
/// Never fails on non-convergence: the report is flagged instead and the
/// best iterate returned.
pub fn solve_ocp(
    problem: &ReducedProblem,
    warm_start: &ControlSchedule,
    opts: &SolverOptions,
) -> Result<(ControlSchedule, StateTrajectory, SolveReport)> {
    let clock = Instant::now();
    let nt = problem.time.num_steps();
    let mut problem = problem.clone();
    problem.ratio_form = opts.ratio_form;
    let problem = &problem;
    if warm_start.len() != nt || warm_start.u2.len() != nt {
        return Err(Error::Dimension(format!("warm start must have {nt} entries per dose")));
    }
    let mut controls = problem.project(warm_start);
    let upper = problem.upper_bounds();
    let dt = problem.time.step();
    let mut al = AugLagState::new(nt, opts.initial_penalty, opts.feas_tol, opts.grad_tol);

    let initial = evaluate(&controls, problem, Some(&al))?;
    let mut prev_violation = initial.max_violation();
    let mut report = SolveReport {
        cost: initial.cost,
        max_violation: prev_violation,
        pg_norm: scaled_pg_norm(&controls.to_vector(), &initial.gradient, &upper, dt),
        inner_iterations: 0,
        outer_iterations: 0,
        evaluations: 1,
        line_search_failures: 0,
        final_penalty: al.penalty,
        wall_time_s: 0.0,
        converged: false,
        history: Vec::new(),
    };

    let mut last = initial;
    for outer in 0..opts.max_outer {
        let (next, inner) = solve_inner(problem, &al, &controls, opts)?;
        controls = next;
        report.inner_iterations += inner.inner_iterations;
        report.evaluations += inner.evaluations;
        report.line_search_failures += inner.line_search_failures;
        report.outer_iterations = outer + 1;
        last = evaluate(&controls, problem, Some(&al))?;
        let violation = last.max_violation();
        // The gradient of the augmented value equals the Lagrangian gradient
        // at the updated multipliers.
        let pg = scaled_pg_norm(&controls.to_vector(), &last.gradient, &upper, dt);
        if opts.record_history {
            report.history.push(HistoryRow {
                outer,
                inner: inner.inner_iterations,
                cost: last.cost,
                violation,
                grad_norm: pg,
            });
        }
        report.cost = last.cost;
        report.max_violation = violation;
        report.pg_norm = pg;
        if violation <= opts.feas_tol && pg <= opts.grad_tol {
            report.converged = true;
            break;
        }
        // A truncated inner solve resumes on the same subproblem.
        if inner.pg_norm > opts.grad_tol && inner.line_search_failures == 0 {
            continue;
        }
        al.update_multipliers(&last.g_hc, &last.g_h);
        if violation > opts.feas_tol && violation > 0.25 * prev_violation {
            al.penalty = (al.penalty * opts.penalty_growth).min(opts.max_penalty);
        }
        prev_violation = violation;
    }
    report.final_penalty = al.penalty;
    report.wall_time_s = clock.elapsed().as_secs_f64();
    Ok((controls, last.trajectory, report))
}
