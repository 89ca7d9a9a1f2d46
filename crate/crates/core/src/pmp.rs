//! The simplified problem: cancer cells only, no diffusion, no coupling and
//! no state constraints, cost `rho_C(T)`. Its optimal doses are bang-bang
//! with one switch each, from 0 to the maximum, so the search runs over the
//! pair of switching times.
//!
//! The adjoint and switching functions computed here certify that
//! structure numerically.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{apply_laplacian_transpose, rollout, ControlSchedule, Population, StateTrajectory};
use crate::grid::{PhenotypeGrid, TimeGrid};
use crate::model::{apply_continuation, ContinuationVector, InitialData, ModelParameters};

/// Switching times of `u1` and `u2` from 0 to their maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingTimes {
    pub t1: f64,
    pub t2: f64,
}

impl SwitchingTimes {
    pub fn new(t1: f64, t2: f64, time: &TimeGrid) -> Result<Self> {
        let horizon = time.horizon();
        for (name, t) in [("t1", t1), ("t2", t2)] {
            if !(0.0..=horizon).contains(&t) {
                return Err(Error::InvalidParameter(format!("{name} = {t} outside [0, {horizon}]")));
            }
        }
        Ok(Self { t1, t2 })
    }

    /// Switch node indices after snapping to the nearest grid node.
    pub fn snapped(&self, time: &TimeGrid) -> (usize, usize) {
        (time.nearest_node(self.t1), time.nearest_node(self.t2))
    }
}

/// Doses `u_k[i] = u_k_max` when `t_i >= t_k` (switch snapped to the nearest
/// node), 0 otherwise. A switch at `T` leaves that dose off on every interval.
pub fn controls_from_switches(sw: &SwitchingTimes, time: &TimeGrid, u1_max: f64, u2_max: f64) -> ControlSchedule {
    let (k1, k2) = sw.snapped(time);
    controls_from_indices(k1, k2, time.num_steps(), u1_max, u2_max)
}

fn controls_from_indices(k1: usize, k2: usize, nt: usize, u1_max: f64, u2_max: f64) -> ControlSchedule {
    ControlSchedule {
        u1: (0..nt).map(|i| if i >= k1 { u1_max } else { 0.0 }).collect(),
        u2: (0..nt).map(|i| if i >= k2 { u2_max } else { 0.0 }).collect(),
    }
}

/// Data of the simplified problem. Holds the parameters with every
/// continuation component at 0, so the competition term is `a_CC d_C rho_C`.
#[derive(Debug, Clone)]
pub struct SimplifiedProblem {
    pub params: ModelParameters,
    pub grid: PhenotypeGrid,
    pub time: TimeGrid,
    pub initial: InitialData,
}

impl SimplifiedProblem {
    /// Builds the simplified problem from the target parameters; the healthy
    /// population is dropped (its density is set to zero, a fixed point).
    pub fn new(params: &ModelParameters, grid: PhenotypeGrid, time: TimeGrid, initial: &InitialData) -> Self {
        let params = apply_continuation(params, &ContinuationVector::zeros());
        let initial = InitialData {
            n_h0: vec![0.0; grid.num_nodes()],
            rho_h0_target: 0.0,
            k_h0: None,
            ..initial.clone()
        };
        Self {
            params,
            grid,
            time,
            initial,
        }
    }

    pub fn u_max(&self) -> (f64, f64) {
        (self.params.u1_max, self.params.u2_max)
    }

    pub fn controls(&self, sw: &SwitchingTimes) -> ControlSchedule {
        let (a, b) = self.u_max();
        controls_from_switches(sw, &self.time, a, b)
    }

    fn cost_at(&self, k1: usize, k2: usize) -> Result<f64> {
        let (a, b) = self.u_max();
        let u = controls_from_indices(k1, k2, self.time.num_steps(), a, b);
        Ok(rollout(&self.initial, &u, &self.params, &self.grid, &self.time)?.final_rho_c())
    }
}

/// Rollout of the simplified problem under bang-bang doses; returns
/// `(rho_C(T), trajectory)`.
pub fn solve_ocp0_rollout(sw: &SwitchingTimes, problem: &SimplifiedProblem) -> Result<(f64, StateTrajectory)> {
    let u = problem.controls(sw);
    let traj = rollout(&problem.initial, &u, &problem.params, &problem.grid, &problem.time)?;
    Ok((traj.final_rho_c(), traj))
}

/// Per-step increments `(rho_C(t_{i+1}) - rho_C(t_i)) / dt` evaluated from
/// the update formula, i.e. the discrete running cost whose time sum
/// rebuilds `rho_C(T) - rho_C(0)`.
pub fn running_cost_terms(traj: &StateTrajectory, controls: &ControlSchedule, problem: &SimplifiedProblem) -> Vec<f64> {
    let nt = problem.time.num_steps();
    let dt = problem.time.step();
    let h = problem.grid.cell_width();
    let pop = Population::cancer(&problem.params);
    let m = problem.grid.num_nodes();
    let mut lap = vec![0.0; m];
    let mut next = vec![0.0; m];
    (0..nt)
        .map(|i| {
            let n = traj.n_c.row(i);
            let n = n.as_slice().unwrap();
            let pressure = problem.params.a_cc * traj.rho_c[i] + problem.params.a_ch * traj.rho_h[i];
            pop.advance(n, pressure, controls.u1[i], controls.u2[i], dt, h, &mut lap, &mut next);
            let change: f64 = next[..m - 1].iter().zip(&n[..m - 1]).map(|(a, b)| a - b).sum();
            h * change / dt
        })
        .collect()
}

/// Shifted costate `p + p0` on the space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    /// `(N_t + 1) x (N_x + 1)`
    pub p_tilde: Array2<f64>,
    pub p0: f64,
    /// `int d_C n_C p_tilde`, carried by its exact recursion rather than
    /// by quadrature, which loses all digits once it decays below the
    /// rounding level of the integrand.
    pub psi1: Vec<f64>,
}

/// Backward sweep for the shifted costate from `p_tilde(T) = p0`.
///
/// The local part is the exact reverse of one forward step; the nonlocal
/// coupling is taken implicitly at the new level, which gives the discrete
/// identities `psi1(t_i) = psi1(t_{i+1}) / (1 + dt a_CC int d_C n_C(t_i))`
/// and `phi(t_i) - phi(t_{i+1}) = -dt a_CC (int w n_C(t_i)) psi1(t_i)` for
/// every weight `w` when there is no diffusion. Both switching-function
/// properties of the continuous problem therefore hold exactly on the grid.
pub fn solve_adjoint(
    traj: &StateTrajectory,
    controls: &ControlSchedule,
    problem: &SimplifiedProblem,
    p0: f64,
) -> Result<AdjointTrajectory> {
    if !(p0 < 0.0) {
        return Err(Error::InvalidParameter(format!("p0 must be negative, got {p0}")));
    }
    let params = &problem.params;
    let grid = &problem.grid;
    let nt = problem.time.num_steps();
    let dt = problem.time.step();
    let h = grid.cell_width();
    let nx = grid.num_cells();
    let m = grid.num_nodes();
    let pop = Population::cancer(params);

    let death_mass = |i: usize| {
        let n = traj.n_c.row(i);
        h * (0..nx).map(|j| pop.death[j] * n[j]).sum::<f64>()
    };
    let k = dt * params.a_cc;
    let mut p = Array2::<f64>::zeros((nt + 1, m));
    p.row_mut(nt).fill(p0);
    let mut psi1 = vec![0.0; nt + 1];
    psi1[nt] = p0 * death_mass(nt);
    let mut b = vec![0.0; m];
    let mut lt = vec![0.0; m];
    for i in (0..nt).rev() {
        let (u1, u2) = (controls.u1[i], controls.u2[i]);
        let pressure = params.a_cc * traj.rho_c[i] + params.a_ch * traj.rho_h[i];
        let damp = 1.0 / (1.0 + pop.alpha * u2);
        {
            let next_p = p.row(i + 1);
            for j in 0..m {
                b[j] = next_p[j] * pop.decay(j, pressure, u1, dt);
            }
        }
        if pop.beta != 0.0 {
            apply_laplacian_transpose(&b, dt * pop.beta / (h * h), &mut lt);
        } else {
            lt.iter_mut().for_each(|v| *v = 0.0);
        }
        let n = traj.n_c.row(i);
        let mut row = p.row_mut(i);
        let mut weighted = 0.0;
        for j in 0..m {
            row[j] = b[j] * (1.0 + dt * pop.growth[j] * damp) + lt[j];
            if j < nx {
                weighted += pop.death[j] * n[j] * row[j];
            }
        }
        // Without diffusion the quadrature below equals the recursion.
        psi1[i] = if pop.beta == 0.0 {
            psi1[i + 1]
        } else {
            h * weighted
        } / (1.0 + k * death_mass(i));
        row.iter_mut().for_each(|v| *v -= k * psi1[i]);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i });
        }
    }
    Ok(AdjointTrajectory { p_tilde: p, p0, psi1 })
}

/// Structural checks on the switching functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    /// First node where `phi1 < 0`, if any.
    pub phi1_switch_node: Option<usize>,
    pub phi2_switch_node: Option<usize>,
    /// `max_i (phi1[i+1] - phi1[i]) / max |phi1|`, clipped below at 0.
    pub phi1_monotonicity_violation: f64,
    pub phi2_monotonicity_violation: f64,
    pub psi1_single_signed: bool,
    pub psi1_negative: bool,
    pub terminal_signs_negative: bool,
}

impl StructureReport {
    pub const MONOTONICITY_TOL: f64 = 1e-8;

    pub fn passed(&self) -> bool {
        self.phi1_monotonicity_violation <= Self::MONOTONICITY_TOL
            && self.psi1_single_signed
            && self.psi1_negative
            && self.terminal_signs_negative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingDiagnostics {
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub psi1: Vec<f64>,
    pub report: StructureReport,
}

fn monotonicity_violation(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    v.windows(2).map(|w| w[1] - w[0]).fold(0.0_f64, f64::max) / scale
}

/// `phi1 = int mu_C n_C p`, `phi2 = int r_C n_C p`, `psi1 = int d_C n_C p`
/// by the rectangle rule at every time node, plus the structure report.
pub fn switching_diagnostics(
    traj: &StateTrajectory,
    adjoint: &AdjointTrajectory,
    problem: &SimplifiedProblem,
) -> SwitchingDiagnostics {
    let grid = &problem.grid;
    let params = &problem.params;
    let nt = problem.time.num_steps();
    let mut phi1 = Vec::with_capacity(nt + 1);
    let mut phi2 = Vec::with_capacity(nt + 1);
    for i in 0..=nt {
        let np: Vec<f64> = traj
            .n_c
            .row(i)
            .iter()
            .zip(adjoint.p_tilde.row(i).iter())
            .map(|(n, p)| n * p)
            .collect();
        phi1.push(grid.weighted_rectangle(params.mu_c.values(), &np));
        phi2.push(grid.weighted_rectangle(params.r_c.values(), &np));
    }
    let psi1 = adjoint.psi1.clone();
    let first_negative = |v: &[f64]| v.iter().position(|x| *x < 0.0);
    let report = StructureReport {
        phi1_switch_node: first_negative(&phi1),
        phi2_switch_node: first_negative(&phi2),
        phi1_monotonicity_violation: monotonicity_violation(&phi1),
        phi2_monotonicity_violation: monotonicity_violation(&phi2),
        psi1_single_signed: psi1.iter().all(|v| *v < 0.0) || psi1.iter().all(|v| *v > 0.0),
        psi1_negative: psi1.iter().all(|v| *v < 0.0),
        terminal_signs_negative: phi1[nt] < 0.0 && phi2[nt] < 0.0,
    };
    SwitchingDiagnostics {
        phi1,
        phi2,
        psi1,
        report,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchingSearchOptions {
    /// Side of the exhaustive coarse lattice.
    pub lattice: usize,
    pub parallel: bool,
}

impl Default for SwitchingSearchOptions {
    fn default() -> Self {
        Self {
            lattice: 25,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingResult {
    pub times: SwitchingTimes,
    pub nodes: (usize, usize),
    pub cost: f64,
    pub evaluations: usize,
}

/// Candidate ordering: lower cost, then earlier `t1`, then earlier `t2`.
fn better(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}

/// Exhaustive coarse lattice over `(t1, t2)` followed by compass search on
/// the snapped objective, stopping once the poll step drops below `dt / 4`.
pub fn optimize_switching_times(problem: &SimplifiedProblem, opts: &SwitchingSearchOptions) -> Result<SwitchingResult> {
    let time = &problem.time;
    let nt = time.num_steps();
    let horizon = time.horizon();
    let k = opts.lattice.max(2);

    let mut nodes: Vec<usize> = (0..k)
        .map(|a| time.nearest_node(horizon * a as f64 / (k - 1) as f64))
        .collect();
    nodes.dedup();
    let pairs: Vec<(usize, usize)> = nodes
        .iter()
        .flat_map(|a| nodes.iter().map(move |b| (*a, *b)))
        .collect();
    let eval = |&(a, b): &(usize, usize)| (a, b, problem.cost_at(a, b).ok());
    let coarse: Vec<(usize, usize, Option<f64>)> = if opts.parallel {
        pairs.par_iter().map(eval).collect()
    } else {
        pairs.iter().map(eval).collect()
    };

    let mut memo: HashMap<(usize, usize), f64> = HashMap::new();
    let mut best: Option<(f64, usize, usize)> = None;
    for (a, b, c) in coarse {
        if let Some(c) = c {
            memo.insert((a, b), c);
            if best.is_none_or(|cur| better((c, a, b), cur)) {
                best = Some((c, a, b));
            }
        }
    }
    let Some(mut best) = best else {
        return Err(Error::AllRolloutsFailed);
    };
    let mut evaluations = memo.len();

    let dt = time.step();
    let mut t = (best.1 as f64 * dt, best.2 as f64 * dt);
    let mut poll = horizon / (k - 1) as f64;
    while poll >= 0.25 * dt {
        let mut improved: Option<((f64, usize, usize), (f64, f64))> = None;
        for (d1, d2) in [(-1.0, 0.0), (1.0, 0.0), (0.0, -1.0), (0.0, 1.0)] {
            let cand_t = (
                (t.0 + d1 * poll).clamp(0.0, horizon),
                (t.1 + d2 * poll).clamp(0.0, horizon),
            );
            let key = (time.nearest_node(cand_t.0), time.nearest_node(cand_t.1));
            let cost = match memo.get(&key) {
                Some(c) => Some(*c),
                None => {
                    let c = problem.cost_at(key.0, key.1).ok();
                    evaluations += 1;
                    if let Some(c) = c {
                        memo.insert(key, c);
                    }
                    c
                }
            };
            if let Some(c) = cost {
                let cand = (c, key.0, key.1);
                let reference = improved.map_or(best, |(b, _)| b);
                if c < best.0 && better(cand, reference) {
                    improved = Some((cand, cand_t));
                }
            }
        }
        match improved {
            Some((b, tt)) => {
                best = b;
                t = tt;
            }
            None => poll *= 0.5,
        }
    }

    let (cost, k1, k2) = best;
    debug_assert!(k1 <= nt && k2 <= nt);
    Ok(SwitchingResult {
        times: SwitchingTimes {
            t1: time.time(k1),
            t2: time.time(k2),
        },
        nodes: (k1, k2),
        cost,
        evaluations,
    })
}

/// Cost of every switch-node pair; the reference for small instances.
pub fn exhaustive_switching_costs(problem: &SimplifiedProblem) -> Result<Array2<f64>> {
    let nt = problem.time.num_steps();
    let rows: Vec<Vec<f64>> = (0..=nt)
        .into_par_iter()
        .map(|a| (0..=nt).map(|b| problem.cost_at(a, b)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((nt + 1, nt + 1), flat).expect("square lattice"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_default_coefficients, CoefficientField};

    fn problem(horizon: f64, nt: usize, nx: usize) -> SimplifiedProblem {
        let grid = PhenotypeGrid::new(nx).unwrap();
        let time = TimeGrid::new(horizon, nt).unwrap();
        let params = sample_default_coefficients(&grid);
        SimplifiedProblem::new(&params, grid, time, &InitialData::reference(&grid))
    }

    #[test]
    fn switch_snapping_edge_cases() {
        let time = TimeGrid::new(10.0, 20).unwrap();
        let u = controls_from_switches(&SwitchingTimes { t1: 0.0, t2: 10.0 }, &time, 1.0, 4.0);
        assert!(u.u1.iter().all(|v| *v == 1.0));
        assert!(u.u2.iter().all(|v| *v == 0.0));
        let u = controls_from_switches(&SwitchingTimes { t1: 5.0, t2: 5.1 }, &time, 1.0, 4.0);
        assert_eq!(u.u1.iter().filter(|v| **v == 0.0).count(), 10);
        assert_eq!(u.u2.iter().filter(|v| **v == 0.0).count(), 10);
        assert!(SwitchingTimes::new(-1.0, 2.0, &time).is_err());
    }

    #[test]
    fn zero_tumour_has_zero_cost() {
        let mut p = problem(10.0, 40, 8);
        p.initial.n_c0 = vec![0.0; 9];
        let (c, _) = solve_ocp0_rollout(&SwitchingTimes { t1: 3.0, t2: 4.0 }, &p).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn treating_beats_not_treating() {
        let p = problem(60.0, 500, 20);
        let always = solve_ocp0_rollout(&SwitchingTimes { t1: 0.0, t2: 0.0 }, &p).unwrap().0;
        let never = solve_ocp0_rollout(&SwitchingTimes { t1: 60.0, t2: 60.0 }, &p).unwrap().0;
        assert!(always < never, "{always} vs {never}");
    }

    #[test]
    fn integral_form_identity() {
        let p = problem(60.0, 300, 12);
        let sw = SwitchingTimes { t1: 31.0, t2: 17.0 };
        let (cost, traj) = solve_ocp0_rollout(&sw, &p).unwrap();
        let terms = running_cost_terms(&traj, &p.controls(&sw), &p);
        let rebuilt = traj.rho_c[0] + p.time.step() * terms.iter().sum::<f64>();
        assert!((rebuilt - cost).abs() <= 1e-10 * cost);
    }

    #[test]
    fn adjoint_terminal_value_and_flat_case() {
        // With no cancer cells the nonlocal term drops out and p_tilde solves
        // p' = -R p backward, i.e. p(t_i) = p0 prod_{k >= i} (1 + dt g) exp(-dt u1 mu).
        let mut p = problem(5.0, 50, 6);
        p.initial.n_c0 = vec![0.0; 7];
        p.params.mu_c = CoefficientField::constant(&p.grid, 0.3).unwrap();
        let sw = SwitchingTimes { t1: 2.0, t2: 1.0 };
        let u = p.controls(&sw);
        let (_, traj) = solve_ocp0_rollout(&sw, &p).unwrap();
        let adj = solve_adjoint(&traj, &u, &p, -1.0).unwrap();
        assert!(adj.p_tilde.row(50).iter().all(|v| *v == -1.0));
        let dt = p.time.step();
        for j in 0..7 {
            let mut expect = -1.0;
            for i in (0..50).rev() {
                let g = p.params.r_c[j] / (1.0 + p.params.alpha_c * u.u2[i]);
                expect *= (1.0 + dt * g) * (-dt * u.u1[i] * p.params.mu_c[j]).exp();
                assert!((adj.p_tilde[[i, j]] - expect).abs() <= 1e-12 * expect.abs());
            }
        }
        // Against the continuous solution -exp(int_0^T R) the error is first
        // order: u1 is on for the last 3 time units, u2 for the last 4.
        let gap = |nt: usize| {
            let mut p = problem(5.0, nt, 6);
            p.initial.n_c0 = vec![0.0; 7];
            let (u1m, u2m) = p.u_max();
            let (_, traj) = solve_ocp0_rollout(&sw, &p).unwrap();
            let adj = solve_adjoint(&traj, &p.controls(&sw), &p, -1.0).unwrap();
            let (r, mu) = (p.params.r_c[0], p.params.mu_c[0]);
            let exact = (r + 4.0 * r / (1.0 + p.params.alpha_c * u2m) - 3.0 * u1m * mu).exp();
            (adj.p_tilde[[0, 0]] + exact).abs() / exact
        };
        let (e1, e2) = (gap(200), gap(400));
        assert!(e1 < 0.2 && e2 < 0.6 * e1, "{e1} {e2}");
    }

    fn sensitivity_gap(nt: usize) -> f64 {
        // Perturbing n_C at t = 7.5 changes rho_C(T) by about
        // h * (p_tilde / p0) * delta, up to the first-order time error.
        let p = problem(20.0, nt, 8);
        let sw = SwitchingTimes { t1: 12.0, t2: 6.0 };
        let u = p.controls(&sw);
        let (base, traj) = solve_ocp0_rollout(&sw, &p).unwrap();
        let adj = solve_adjoint(&traj, &u, &p, -1.0).unwrap();
        let (i0, j0) = (3 * nt / 8, 3);
        let delta = 1e-6;
        let mut tail = p.clone();
        let mut init = traj.n_c.row(i0).to_vec();
        init[j0] += delta;
        tail.initial.n_c0 = init;
        tail.time = TimeGrid::new(p.time.step() * (nt - i0) as f64, nt - i0).unwrap();
        let tail_u = ControlSchedule {
            u1: u.u1[i0..].to_vec(),
            u2: u.u2[i0..].to_vec(),
        };
        let perturbed = rollout(&tail.initial, &tail_u, &tail.params, &tail.grid, &tail.time)
            .unwrap()
            .final_rho_c();
        let fd = (perturbed - base) / delta;
        let predicted = p.grid.cell_width() * adj.p_tilde[[i0, j0]] / adj.p0;
        ((fd - predicted) / fd).abs()
    }

    #[test]
    fn adjoint_approximates_sensitivity_to_first_order() {
        let coarse = sensitivity_gap(160);
        let fine = sensitivity_gap(320);
        let finer = sensitivity_gap(640);
        assert!(coarse < 0.1, "{coarse}");
        assert!(fine < 0.6 * coarse && finer < 0.6 * fine, "{coarse} {fine} {finer}");
    }

    #[test]
    fn brute_force_equivalence_small() {
        let p = problem(30.0, 40, 8);
        let res = optimize_switching_times(&p, &SwitchingSearchOptions::default()).unwrap();
        let all = exhaustive_switching_costs(&p).unwrap();
        let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(res.cost <= min + 1e-10, "{} vs {}", res.cost, min);
    }

    #[test]
    fn degenerate_horizon_is_insensitive() {
        let p = problem(1e-9, 2, 8);
        let all = exhaustive_switching_costs(&p).unwrap();
        let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(*c), b.max(*c)));
        assert!(hi - lo <= 10.0 * p.time.horizon() * p.initial.rho_c0_target);
        let res = optimize_switching_times(&p, &SwitchingSearchOptions::default()).unwrap();
        assert!((res.cost - lo).abs() <= 10.0 * p.time.horizon() * p.initial.rho_c0_target);
    }

    #[test]
    fn psi1_recursion_matches_quadrature() {
        let p = problem(60.0, 200, 12);
        let sw = SwitchingTimes { t1: 20.0, t2: 50.0 };
        let (_, traj) = solve_ocp0_rollout(&sw, &p).unwrap();
        let adj = solve_adjoint(&traj, &p.controls(&sw), &p, -1.0).unwrap();
        let h = p.grid.cell_width();
        for i in 0..=200 {
            let (mut sum, mut abs) = (0.0, 0.0);
            for j in 0..p.grid.num_cells() {
                let term = p.params.d_c[j] * traj.n_c[[i, j]] * adj.p_tilde[[i, j]];
                sum += h * term;
                abs += h * term.abs();
            }
            assert!((sum - adj.psi1[i]).abs() <= 1e-12 * abs, "{i}: {sum} vs {}", adj.psi1[i]);
        }
    }

    #[test]
    fn structure_holds_for_arbitrary_switches() {
        let p = problem(60.0, 200, 12);
        for (t1, t2) in [(0.0, 0.0), (20.0, 50.0), (45.0, 10.0), (60.0, 60.0)] {
            let sw = SwitchingTimes { t1, t2 };
            let (_, traj) = solve_ocp0_rollout(&sw, &p).unwrap();
            let adj = solve_adjoint(&traj, &p.controls(&sw), &p, -1.0).unwrap();
            let d = switching_diagnostics(&traj, &adj, &p);
            assert!(d.report.psi1_negative, "({t1}, {t2})");
            assert!(d.report.phi1_monotonicity_violation <= 1e-8, "({t1}, {t2}): {:?}", d.report);
            assert!(d.report.terminal_signs_negative);
        }
    }
}
