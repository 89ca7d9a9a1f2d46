//! Bound-constrained minimization on a box `[0, upper]` by projected
//! gradient steps with Armijo backtracking along the projection arc.
//!
//! The optional two-metric variant replaces the gradient on the free
//! variables by a limited-memory BFGS direction and keeps plain gradient
//! steps on the variables held at a bound.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMethod {
    ProjectedGradient,
    TwoMetricLbfgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxMinOptions {
    pub method: InnerMethod,
    pub max_iterations: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub max_halvings: usize,
    pub memory: usize,
    /// Step doublings tried after an unreduced first step is accepted.
    pub max_expansions: usize,
}

impl Default for BoxMinOptions {
    fn default() -> Self {
        Self {
            method: InnerMethod::TwoMetricLbfgs,
            max_iterations: 500,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            max_halvings: 60,
            memory: 10,
            max_expansions: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    IterationLimit,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct BoxMinResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub pg_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective value after each accepted iterate, starting point first.
    pub values: Vec<f64>,
}

pub fn project(x: &mut [f64], upper: &[f64]) {
    for (v, u) in x.iter_mut().zip(upper) {
        *v = v.clamp(0.0, *u);
    }
}

/// `|| P(x - g) - x ||_inf`
pub fn projected_gradient_norm(x: &[f64], g: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(upper)
        .map(|((x, g), u)| ((x - g).clamp(0.0, *u) - x).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(q: &mut [f64], history: &VecDeque<Pair>) {
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, q);
        q.iter_mut().zip(&p.y).for_each(|(q, y)| *q -= a * y);
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, q);
        q.iter_mut().zip(&p.s).for_each(|(q, s)| *q += (a - b) * s);
    }
}

/// Minimizes `f` over `0 <= x <= upper`. `f` returns value and gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], upper: &[f64], opts: &BoxMinOptions) -> Result<BoxMinResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, upper);
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut values = vec![fx];
    let mut history: VecDeque<Pair> = VecDeque::new();
    let width = inf_norm(upper).max(f64::MIN_POSITIVE);
    let mut bb_step: Option<f64> = None;
    let mut iterations = 0;
    let mut termination = Termination::IterationLimit;

    loop {
        let pg_norm = projected_gradient_norm(&x, &g, upper);
        if pg_norm <= opts.grad_tol {
            termination = Termination::Converged;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        let g_norm = inf_norm(&g);

        // Variables held at a bound with the gradient pushing outward.
        let eps = (1e-3 * width).min(pg_norm);
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= eps && g[i] > 0.0) || (x[i] >= upper[i] - eps && g[i] < 0.0))
            .collect();

        let fallback_scale = bb_step.unwrap_or(0.1 * width / g_norm);
        let mut d: Vec<f64>;
        let mut first_step = 1.0;
        match opts.method {
            InnerMethod::TwoMetricLbfgs if !history.is_empty() => {
                d = g.iter().zip(&active).map(|(g, a)| if *a { 0.0 } else { *g }).collect();
                two_loop(&mut d, &history);
                let gamma = {
                    let last = history.back().unwrap();
                    dot(&last.s, &last.y) / dot(&last.y, &last.y)
                };
                for i in 0..n {
                    d[i] = if active[i] { -gamma * g[i] } else { -d[i] };
                }
                if dot(&g, &d) >= 0.0 {
                    history.clear();
                    d = g.iter().map(|g| -g).collect();
                    first_step = fallback_scale;
                }
            }
            _ => {
                d = g.iter().map(|g| -g).collect();
                first_step = fallback_scale;
            }
        }

        let mut step = first_step;
        let mut accepted = None;
        let mut trial = vec![0.0; n];
        let mut best = vec![0.0; n];
        for _ in 0..=opts.max_halvings {
            for i in 0..n {
                trial[i] = (x[i] + step * d[i]).clamp(0.0, upper[i]);
            }
            let delta: Vec<f64> = trial.iter().zip(&x).map(|(t, x)| t - x).collect();
            let slope = dot(&g, &delta);
            if slope < 0.0 {
                let (ft, gt) = f(&trial)?;
                evaluations += 1;
                if ft <= fx + opts.armijo_c * slope {
                    best.copy_from_slice(&trial);
                    accepted = Some((ft, gt, delta));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((mut ft, mut gt, mut s)) = accepted else {
            termination = Termination::LineSearchFailure;
            break;
        };
        // A full first step may be far too short on nearly linear
        // coordinates; keep doubling along the projection arc while the
        // value keeps dropping.
        if step == first_step {
            for _ in 0..opts.max_expansions {
                step *= 2.0;
                for i in 0..n {
                    trial[i] = (x[i] + step * d[i]).clamp(0.0, upper[i]);
                }
                let delta: Vec<f64> = trial.iter().zip(&x).map(|(t, x)| t - x).collect();
                if delta == s {
                    break;
                }
                let slope = dot(&g, &delta);
                let (fe, ge) = f(&trial)?;
                evaluations += 1;
                if !(fe < ft && fe <= fx + opts.armijo_c * slope) {
                    break;
                }
                (ft, gt, s) = (fe, ge, delta);
                best.copy_from_slice(&trial);
            }
        }
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            bb_step = Some(dot(&s, &s) / sy);
            if opts.method == InnerMethod::TwoMetricLbfgs {
                history.push_back(Pair { s, y, rho: 1.0 / sy });
                if history.len() > opts.memory {
                    history.pop_front();
                }
            }
        } else {
            bb_step = None;
        }
        x = best;
        fx = ft;
        g = gt;
        values.push(fx);
        iterations += 1;
    }

    let pg_norm = projected_gradient_norm(&x, &g, upper);
    Ok(BoxMinResult {
        x,
        value: fx,
        gradient: g,
        pg_norm,
        iterations,
        evaluations,
        termination,
        values,
    })
}
