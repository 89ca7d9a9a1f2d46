//! Time stepping of the two-population nonlocal selection-mutation system.
//!
//! One step of size `dt` for a population with density `n` reads
//!
//! ```text
//! n'_j = (n_j (1 + dt g_j) + dt beta (L n)_j) exp(-dt u1 mu_j) / (1 + dt d_j I)
//! g_j  = r_j / (1 + alpha u2)
//! ```
//!
//! Growth is explicit, competition implicit, and the drug kill uses its
//! exact flow, so the log-density is affine in `u1` within a step.
//! The competition pressure `I` is frozen at the old time level. `L` is a
//! zero-flux finite-volume Laplacian on the cells `[x_j, x_{j+1})`,
//! `j < N_x`, so the rectangle-rule mass is conserved exactly by pure
//! diffusion; the endpoint node `x = 1` is relaxed towards its neighbour
//! with a mirror stencil and carries no mass.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PhenotypeGrid, TimeGrid};
use crate::model::{check_cfl, InitialData, ModelParameters};

/// Piecewise-constant doses, `u(t) = u[i]` on `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl ControlSchedule {
    pub fn constant(num_steps: usize, u1: f64, u2: f64) -> Self {
        Self {
            u1: vec![u1; num_steps],
            u2: vec![u2; num_steps],
        }
    }

    pub fn zeros(num_steps: usize) -> Self {
        Self::constant(num_steps, 0.0, 0.0)
    }

    pub fn len(&self) -> usize {
        self.u1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u1.is_empty()
    }

    /// Decision-vector layout: all `u1` values followed by all `u2` values.
    pub fn to_vector(&self) -> Vec<f64> {
        self.u1.iter().chain(&self.u2).copied().collect()
    }

    pub fn from_vector(v: &[f64]) -> Self {
        let n = v.len() / 2;
        Self {
            u1: v[..n].to_vec(),
            u2: v[n..].to_vec(),
        }
    }

    pub fn check(&self, num_steps: usize, u1_max: f64, u2_max: f64) -> Result<()> {
        if self.u1.len() != num_steps || self.u2.len() != num_steps {
            return Err(Error::Dimension(format!(
                "control schedule has lengths ({}, {}), expected {num_steps}",
                self.u1.len(),
                self.u2.len()
            )));
        }
        let ok = |u: &[f64], max: f64| u.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= max);
        if !ok(&self.u1, u1_max) || !ok(&self.u2, u2_max) {
            return Err(Error::InvalidParameter(format!(
                "controls must lie in [0, {u1_max}] x [0, {u2_max}]"
            )));
        }
        Ok(())
    }

    /// Clamps every entry to the box `[0, u1_max] x [0, u2_max]`.
    pub fn clamped(&self, u1_max: f64, u2_max: f64) -> Self {
        Self {
            u1: self.u1.iter().map(|v| v.clamp(0.0, u1_max)).collect(),
            u2: self.u2.iter().map(|v| v.clamp(0.0, u2_max)).collect(),
        }
    }
}

/// Densities at every time node together with their nonlocal functionals.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    /// `(N_t + 1) x (N_x + 1)`
    pub n_h: Array2<f64>,
    pub n_c: Array2<f64>,
    pub rho_h: Vec<f64>,
    pub rho_c: Vec<f64>,
    pub i_h: Vec<f64>,
    pub i_c: Vec<f64>,
}

impl StateTrajectory {
    pub fn num_steps(&self) -> usize {
        self.rho_c.len() - 1
    }

    pub fn final_rho_c(&self) -> f64 {
        self.rho_c[self.num_steps()]
    }
}

/// Healthy/cancer pressures `(I_H, I_C)` from the masses.
pub fn pressures(params: &ModelParameters, rho_h: f64, rho_c: f64) -> (f64, f64) {
    (
        params.a_hh * rho_h + params.a_hc * rho_c,
        params.a_cc * rho_c + params.a_ch * rho_h,
    )
}

/// Visits every nonzero of `h^2 L` as `(row, col, coefficient)`.
pub(crate) fn for_each_laplacian_entry(num_cells: usize, mut f: impl FnMut(usize, usize, f64)) {
    let last = num_cells - 1;
    f(0, 0, -1.0);
    f(0, 1, 1.0);
    for j in 1..last {
        f(j, j - 1, 1.0);
        f(j, j, -2.0);
        f(j, j + 1, 1.0);
    }
    f(last, last - 1, 1.0);
    f(last, last, -1.0);
    f(num_cells, last, 2.0);
    f(num_cells, num_cells, -2.0);
}

/// `out = scale * L n`
pub(crate) fn apply_laplacian(n: &[f64], scale: f64, out: &mut [f64]) {
    let num_cells = n.len() - 1;
    out.iter_mut().for_each(|o| *o = 0.0);
    for_each_laplacian_entry(num_cells, |row, col, c| out[row] += scale * c * n[col]);
}

/// `out = scale * L^T b`
pub(crate) fn apply_laplacian_transpose(b: &[f64], scale: f64, out: &mut [f64]) {
    let num_cells = b.len() - 1;
    out.iter_mut().for_each(|o| *o = 0.0);
    for_each_laplacian_entry(num_cells, |row, col, c| out[col] += scale * c * b[row]);
}

/// Coefficients of one population as seen by the stepping kernel.
#[derive(Clone, Copy)]
pub(crate) struct Population<'a> {
    pub growth: &'a [f64],
    pub death: &'a [f64],
    pub drug: &'a [f64],
    pub alpha: f64,
    pub beta: f64,
}

impl<'a> Population<'a> {
    pub fn healthy(p: &'a ModelParameters) -> Self {
        Self {
            growth: p.r_h.values(),
            death: p.d_h.values(),
            drug: p.mu_h.values(),
            alpha: p.alpha_h,
            beta: p.beta_h,
        }
    }

    pub fn cancer(p: &'a ModelParameters) -> Self {
        Self {
            growth: p.r_c.values(),
            death: p.d_c.values(),
            drug: p.mu_c.values(),
            alpha: p.alpha_c,
            beta: p.beta_c,
        }
    }

    /// Advances `n` by one step into `out`; `lap` is scratch of equal length.
    pub fn advance(
        &self,
        n: &[f64],
        pressure: f64,
        u1: f64,
        u2: f64,
        dt: f64,
        h: f64,
        lap: &mut [f64],
        out: &mut [f64],
    ) {
        let damp = 1.0 / (1.0 + self.alpha * u2);
        if self.beta != 0.0 {
            apply_laplacian(n, dt * self.beta / (h * h), lap);
        } else {
            lap.iter_mut().for_each(|l| *l = 0.0);
        }
        for j in 0..n.len() {
            let explicit = n[j] * (1.0 + dt * self.growth[j] * damp) + lap[j];
            out[j] = explicit * self.decay(j, pressure, u1, dt);
        }
    }

    /// Competition denominator `1 + dt d I` at node `j`.
    pub fn competition(&self, j: usize, pressure: f64, dt: f64) -> f64 {
        1.0 + dt * self.death[j] * pressure
    }

    /// Combined decay factor: exact drug flow over implicit competition.
    pub fn decay(&self, j: usize, pressure: f64, u1: f64, dt: f64) -> f64 {
        (-dt * u1 * self.drug[j]).exp() / self.competition(j, pressure, dt)
    }
}

/// One time step of both populations.
///
/// `index` only labels errors. Inputs must already satisfy the CFL
/// condition for the result to be non-negative.
#[allow(clippy::too_many_arguments)]
pub fn step(
    n_h: &[f64],
    n_c: &[f64],
    u1: f64,
    u2: f64,
    params: &ModelParameters,
    grid: &PhenotypeGrid,
    dt: f64,
    index: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = grid.num_nodes();
    if n_h.len() != m || n_c.len() != m {
        return Err(Error::Dimension(format!("densities must have {m} entries")));
    }
    let mut lap = vec![0.0; m];
    let mut out_h = vec![0.0; m];
    let mut out_c = vec![0.0; m];
    step_into(n_h, n_c, u1, u2, params, grid, dt, index, &mut lap, &mut out_h, &mut out_c)?;
    Ok((out_h, out_c))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step_into(
    n_h: &[f64],
    n_c: &[f64],
    u1: f64,
    u2: f64,
    params: &ModelParameters,
    grid: &PhenotypeGrid,
    dt: f64,
    index: usize,
    lap: &mut [f64],
    out_h: &mut [f64],
    out_c: &mut [f64],
) -> Result<()> {
    if !u1.is_finite() || !u2.is_finite() {
        return Err(Error::NonFinite { step: index });
    }
    let h = grid.cell_width();
    let rho_h = grid.rectangle(n_h);
    let rho_c = grid.rectangle(n_c);
    if !rho_h.is_finite() || !rho_c.is_finite() {
        return Err(Error::NonFinite { step: index });
    }
    let (i_h, i_c) = pressures(params, rho_h, rho_c);
    Population::healthy(params).advance(n_h, i_h, u1, u2, dt, h, lap, out_h);
    Population::cancer(params).advance(n_c, i_c, u1, u2, dt, h, lap, out_c);
    if out_h.iter().chain(out_c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: index });
    }
    Ok(())
}

/// Integrates the system over the whole time grid.
///
/// Refuses to run when the CFL test fails or the schedule has the wrong
/// length. The result is bitwise reproducible.
pub fn rollout(
    initial: &InitialData,
    controls: &ControlSchedule,
    params: &ModelParameters,
    grid: &PhenotypeGrid,
    time: &TimeGrid,
) -> Result<StateTrajectory> {
    check_cfl(params, grid, time).into_result()?;
    let nt = time.num_steps();
    let m = grid.num_nodes();
    if controls.u1.len() != nt || controls.u2.len() != nt {
        return Err(Error::Dimension(format!(
            "control schedule must have {nt} entries per dose"
        )));
    }
    if initial.n_h0.len() != m || initial.n_c0.len() != m {
        return Err(Error::Dimension(format!("initial densities must have {m} entries")));
    }
    let dt = time.step();
    let mut n_h = Array2::<f64>::zeros((nt + 1, m));
    let mut n_c = Array2::<f64>::zeros((nt + 1, m));
    n_h.row_mut(0).assign(&ndarray::ArrayView1::from(&initial.n_h0));
    n_c.row_mut(0).assign(&ndarray::ArrayView1::from(&initial.n_c0));
    let mut lap = vec![0.0; m];
    let mut next_h = vec![0.0; m];
    let mut next_c = vec![0.0; m];
    for i in 0..nt {
        {
            let cur_h = n_h.row(i);
            let cur_c = n_c.row(i);
            step_into(
                cur_h.as_slice().unwrap(),
                cur_c.as_slice().unwrap(),
                controls.u1[i],
                controls.u2[i],
                params,
                grid,
                dt,
                i,
                &mut lap,
                &mut next_h,
                &mut next_c,
            )?;
        }
        n_h.row_mut(i + 1).assign(&ndarray::ArrayView1::from(&next_h));
        n_c.row_mut(i + 1).assign(&ndarray::ArrayView1::from(&next_c));
    }
    Ok(finish_trajectory(n_h, n_c, params, grid))
}

pub(crate) fn finish_trajectory(
    n_h: Array2<f64>,
    n_c: Array2<f64>,
    params: &ModelParameters,
    grid: &PhenotypeGrid,
) -> StateTrajectory {
    let rho_h: Vec<f64> = n_h.rows().into_iter().map(|r| grid.rectangle(r.as_slice().unwrap())).collect();
    let rho_c: Vec<f64> = n_c.rows().into_iter().map(|r| grid.rectangle(r.as_slice().unwrap())).collect();
    let (i_h, i_c) = rho_h
        .iter()
        .zip(&rho_c)
        .map(|(h, c)| pressures(params, *h, *c))
        .unzip();
    StateTrajectory {
        n_h,
        n_c,
        rho_h,
        rho_c,
        i_h,
        i_c,
    }
}

/// `lambda0 * sum_{i < N_t} dt rho_C(t_i) + (1 - lambda0) rho_C(T)`.
pub fn objective(traj: &StateTrajectory, lambda0: f64, time: &TimeGrid) -> f64 {
    let nt = time.num_steps();
    let integral: f64 = time.step() * traj.rho_c[..nt].iter().sum::<f64>();
    lambda0 * integral + (1.0 - lambda0) * traj.rho_c[nt]
}

/// Ratio `rho_H / (rho_H + rho_C)`, taken as 1 when both masses vanish.
pub fn healthy_fraction(rho_h: f64, rho_c: f64) -> f64 {
    let total = rho_h + rho_c;
    if total > 0.0 {
        rho_h / total
    } else {
        1.0
    }
}

/// Pointwise state-constraint values; feasible means non-negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTrace {
    /// `rho_H / (rho_H + rho_C) - theta_HC`
    pub c_hc: Vec<f64>,
    /// `rho_H - theta_H rho_H(0)`
    pub c_h: Vec<f64>,
}

impl ConstraintTrace {
    pub fn max_violation(&self) -> f64 {
        self.c_hc
            .iter()
            .chain(&self.c_h)
            .fold(0.0_f64, |acc, c| acc.max(-c))
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

pub fn constraint_trace(traj: &StateTrajectory, params: &ModelParameters) -> ConstraintTrace {
    let rho_h0 = traj.rho_h[0];
    let c_hc = traj
        .rho_h
        .iter()
        .zip(&traj.rho_c)
        .map(|(h, c)| healthy_fraction(*h, *c) - params.theta_hc)
        .collect();
    let c_h = traj.rho_h.iter().map(|h| h - params.theta_h * rho_h0).collect();
    ConstraintTrace { c_hc, c_h }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_default_coefficients, CoefficientField};
    use proptest::prelude::*;

    fn reaction_free(grid: &PhenotypeGrid, beta: f64) -> ModelParameters {
        let zero = CoefficientField::constant(grid, 0.0).unwrap();
        ModelParameters {
            r_h: zero.clone(),
            r_c: zero.clone(),
            d_h: zero.clone(),
            d_c: zero.clone(),
            mu_h: zero.clone(),
            mu_c: zero,
            beta_h: beta,
            beta_c: beta,
            ..sample_default_coefficients(grid)
        }
    }

    fn flat(grid: &PhenotypeGrid, r: f64, d: f64) -> ModelParameters {
        let c = |v| CoefficientField::constant(grid, v).unwrap();
        ModelParameters {
            r_h: c(r),
            r_c: c(r),
            d_h: c(d),
            d_c: c(d),
            mu_h: c(0.0),
            mu_c: c(0.0),
            a_ch: 0.0,
            a_hc: 0.0,
            beta_h: 0.0,
            beta_c: 0.0,
            ..sample_default_coefficients(grid)
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let g = PhenotypeGrid::new(10).unwrap();
        let p = sample_default_coefficients(&g);
        let n_h = InitialData::reference(&g).n_h0;
        let (_, c) = step(&n_h, &vec![0.0; 11], 1.0, 2.0, &p, &g, 0.1, 0).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn laplacian_transpose_matches_dense_transpose() {
        let nx = 6;
        let mut dense = vec![vec![0.0; nx + 1]; nx + 1];
        for_each_laplacian_entry(nx, |r, c, v| dense[r][c] += v);
        let b: Vec<f64> = (0..=nx).map(|k| (k as f64 * 0.7).sin()).collect();
        let mut out = vec![0.0; nx + 1];
        apply_laplacian_transpose(&b, 1.0, &mut out);
        for k in 0..=nx {
            let expect: f64 = (0..=nx).map(|r| dense[r][k] * b[r]).sum();
            assert!((out[k] - expect).abs() < 1e-14);
        }
        // Column sums over the mass-carrying rows vanish: zero net flux.
        for k in 0..=nx {
            let s: f64 = (0..nx).map(|r| dense[r][k]).sum();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn pure_diffusion_conserves_mass() {
        let g = PhenotypeGrid::new(16).unwrap();
        let p = reaction_free(&g, 0.01);
        let n: Vec<f64> = g.nodes().iter().map(|x| 1.0 + (7.0 * x).sin().abs() * x).collect();
        let m0 = g.rectangle(&n);
        let (a, b) = step(&n, &n, 0.0, 0.0, &p, &g, 0.05, 0).unwrap();
        assert!((g.rectangle(&a) - m0).abs() <= 1e-14 * m0);
        assert!((g.rectangle(&b) - m0).abs() <= 1e-14 * m0);
    }

    #[test]
    fn flat_coefficients_follow_scalar_recursion() {
        let g = PhenotypeGrid::new(12).unwrap();
        let (r, d, dt) = (3.0, 0.5, 0.12);
        let p = ModelParameters { a_cc: 1.0, ..flat(&g, r, d) };
        let init = InitialData::reference(&g);
        let (_, c) = step(&init.n_h0, &init.n_c0, 0.0, 0.0, &p, &g, dt, 0).unwrap();
        let rho = init.rho_c0_target;
        let expect = rho * (1.0 + dt * r) / (1.0 + dt * d * rho);
        assert!((g.rectangle(&c) - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn rollout_follows_logistic_limit() {
        // With flat coefficients and no coupling, rho_C obeys the scalar
        // recursion exactly and tends to r/d like the logistic ODE.
        let g = PhenotypeGrid::new(8).unwrap();
        let (r, d) = (1.0, 0.5);
        let p = ModelParameters { a_cc: 1.0, ..flat(&g, r, d) };
        let t = TimeGrid::new(30.0, 3000).unwrap();
        let init = InitialData::reference(&g);
        let traj = rollout(&init, &ControlSchedule::zeros(3000), &p, &g, &t).unwrap();
        let dt = t.step();
        let mut rho = init.rho_c0_target;
        for i in 0..3000 {
            rho = rho * (1.0 + dt * r) / (1.0 + dt * d * rho);
            assert!((traj.rho_c[i + 1] - rho).abs() <= 1e-12 * rho);
        }
        let rho0 = init.rho_c0_target;
        let exact = |tt: f64| r / (d + (r / rho0 - d) * (-r * tt).exp());
        for i in [100, 500, 3000] {
            let tt = t.time(i);
            let err = (traj.rho_c[i] - exact(tt)).abs();
            assert!(err < 0.02 * exact(tt), "t = {tt}: {} vs {}", traj.rho_c[i], exact(tt));
        }
        assert!((traj.final_rho_c() - r / d).abs() < 1e-6);
    }

    #[test]
    fn zero_initial_data_stays_zero() {
        let g = PhenotypeGrid::new(10).unwrap();
        let t = TimeGrid::new(10.0, 50).unwrap();
        let p = sample_default_coefficients(&g);
        let init = InitialData::from_densities(&g, vec![0.0; 11], vec![0.0; 11]).unwrap();
        let traj = rollout(&init, &ControlSchedule::constant(50, 1.0, 1.0), &p, &g, &t).unwrap();
        assert!(traj.n_h.iter().chain(traj.n_c.iter()).all(|v| *v == 0.0));
        assert!(traj.rho_c.iter().all(|v| *v == 0.0));
        let trace = constraint_trace(&traj, &p);
        assert!(trace.c_hc.iter().all(|c| (*c - 0.6).abs() < 1e-15));
    }

    #[test]
    fn rollout_rejects_cfl_violation_and_bad_lengths() {
        let g = PhenotypeGrid::new(20).unwrap();
        let p = sample_default_coefficients(&g);
        let init = InitialData::reference(&g);
        // beta_h = 0.001, T = 60, N_x = 20: CFL = 24 / N_t.
        let t = TimeGrid::new(60.0, 40).unwrap();
        assert!(matches!(
            rollout(&init, &ControlSchedule::zeros(40), &p, &g, &t),
            Err(Error::Cfl { .. })
        ));
        let t = TimeGrid::new(60.0, 500).unwrap();
        assert!(matches!(
            rollout(&init, &ControlSchedule::zeros(499), &p, &g, &t),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_input_reports_step() {
        let g = PhenotypeGrid::new(4).unwrap();
        let p = sample_default_coefficients(&g);
        let mut n = vec![1.0; 5];
        n[2] = f64::NAN;
        assert!(matches!(step(&n, &n, 0.0, 0.0, &p, &g, 0.1, 7), Err(Error::NonFinite { step: 7 })));
    }

    #[test]
    fn objective_limits() {
        let g = PhenotypeGrid::new(4).unwrap();
        let t = TimeGrid::new(6.0, 3).unwrap();
        let p = sample_default_coefficients(&g);
        let n = Array2::from_elem((4, 5), 2.0);
        let traj = finish_trajectory(n.clone(), n, &p, &g);
        assert_eq!(objective(&traj, 0.0, &t), traj.final_rho_c());
        assert!((objective(&traj, 1.0, &t) - 2.0 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn constraint_trace_arithmetic() {
        let g = PhenotypeGrid::new(4).unwrap();
        let p = sample_default_coefficients(&g);
        let n = Array2::from_elem((3, 5), 1.0);
        let traj = finish_trajectory(n.clone(), n, &p, &g);
        let trace = constraint_trace(&traj, &p);
        assert!((trace.c_hc[1] - 0.1).abs() < 1e-15);
        assert!((trace.c_h[2] - 0.4).abs() < 1e-15);
        let zero = ModelParameters {
            theta_hc: 0.0,
            theta_h: 0.0,
            ..p
        };
        let trace = constraint_trace(&traj, &zero);
        assert!(trace.c_hc.iter().all(|c| *c > 0.0) && trace.c_h.iter().all(|c| *c > 0.0));
    }

    #[test]
    fn rollout_is_deterministic() {
        let g = PhenotypeGrid::new(20).unwrap();
        let t = TimeGrid::new(60.0, 500).unwrap();
        let p = sample_default_coefficients(&g);
        let init = InitialData::reference(&g);
        let u = ControlSchedule {
            u1: (0..500).map(|i| (i % 7) as f64 / 7.0).collect(),
            u2: (0..500).map(|i| (i % 3) as f64).collect(),
        };
        let a = rollout(&init, &u, &p, &g, &t).unwrap();
        let b = rollout(&init, &u, &p, &g, &t).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn step_preserves_positivity(
            nx in 2usize..30,
            seed in proptest::collection::vec(0.0f64..5.0, 62),
            u1 in 0.0f64..2.0,
            u2 in 0.0f64..5.0,
            cfl in 0.0f64..0.4999,
        ) {
            let g = PhenotypeGrid::new(nx).unwrap();
            let m = nx + 1;
            let dt = 0.1;
            let beta = cfl / (dt * (nx * nx) as f64);
            let p = ModelParameters { beta_h: beta, beta_c: beta, ..sample_default_coefficients(&g) };
            let n_h = &seed[..m];
            let n_c = &seed[31..31 + m];
            let (a, b) = step(n_h, n_c, u1, u2, &p, &g, dt, 0).unwrap();
            prop_assert!(a.iter().chain(&b).all(|v| *v >= 0.0));
        }
    }
}
