//! Numerical check of the tracking bound for proximal time-varying gradient
//! descent on synthetic problems with exact gradients.
//!
//! The continuous reference solves `eta * theta'(alpha) = -grad g(alpha, theta)`;
//! the discrete sequence takes steps of `step / eta` along a possibly biased
//! gradient. [`check_tracking_bound`] compares their deviation with the analytic
//! envelope `(C_h eta / C_L)(e^{C_L T / eta} - 1) step + (e^{C_L T / eta} - 1) eps / C_L`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, numeric, Result};

/// A family of objectives indexed by the drift variable `alpha`.
pub trait TimeVaryingProblem: Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn value(&self, alpha: f64, theta: &[f64]) -> f64;
    fn grad(&self, alpha: f64, theta: &[f64]) -> Vec<f64>;
    /// Gradient Lipschitz constant in `theta`, when known in closed form.
    fn lipschitz(&self) -> Option<f64>;
}

/// Synthetic problems with cheap exact gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    /// `g = <gradient, theta>`; zero gradient makes every point stationary.
    ConstantGradient { gradient: Vec<f64> },
    /// `g = |theta - target|^2 / 2`.
    ConstantQuadratic { target: Vec<f64> },
    /// `g = |theta - (start + velocity alpha)|^2 / 2`.
    MovingQuadratic { start: Vec<f64>, velocity: Vec<f64> },
    /// One-dimensional `g = (theta - (start + velocity alpha))^2 + amplitude sin(frequency theta)`.
    SinePerturbed {
        start: f64,
        velocity: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl Problem {
    pub fn sine_default() -> Self {
        Problem::SinePerturbed {
            start: 0.0,
            velocity: 1.0,
            amplitude: 0.3,
            frequency: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Problem::ConstantGradient { gradient } => !gradient.is_empty(),
            Problem::ConstantQuadratic { target } => !target.is_empty(),
            Problem::MovingQuadratic { start, velocity } => {
                !start.is_empty() && start.len() == velocity.len()
            }
            Problem::SinePerturbed { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(config(format!("malformed problem {self:?}")))
        }
    }
}

impl TimeVaryingProblem for Problem {
    fn name(&self) -> String {
        match self {
            Problem::ConstantGradient { .. } => "constant_gradient",
            Problem::ConstantQuadratic { .. } => "constant_quadratic",
            Problem::MovingQuadratic { .. } => "moving_quadratic",
            Problem::SinePerturbed { .. } => "sine_perturbed",
        }
        .into()
    }

    fn dim(&self) -> usize {
        match self {
            Problem::ConstantGradient { gradient } => gradient.len(),
            Problem::ConstantQuadratic { target } => target.len(),
            Problem::MovingQuadratic { start, .. } => start.len(),
            Problem::SinePerturbed { .. } => 1,
        }
    }

    fn value(&self, alpha: f64, theta: &[f64]) -> f64 {
        match self {
            Problem::ConstantGradient { gradient } => {
                gradient.iter().zip(theta).map(|(g, t)| g * t).sum()
            }
            Problem::ConstantQuadratic { target } => {
                0.5 * target
                    .iter()
                    .zip(theta)
                    .map(|(c, t)| (t - c).powi(2))
                    .sum::<f64>()
            }
            Problem::MovingQuadratic { start, velocity } => {
                0.5 * start
                    .iter()
                    .zip(velocity)
                    .zip(theta)
                    .map(|((s, v), t)| (t - s - v * alpha).powi(2))
                    .sum::<f64>()
            }
            Problem::SinePerturbed {
                start,
                velocity,
                amplitude,
                frequency,
            } => {
                (theta[0] - start - velocity * alpha).powi(2)
                    + amplitude * (frequency * theta[0]).sin()
            }
        }
    }

    fn grad(&self, alpha: f64, theta: &[f64]) -> Vec<f64> {
        match self {
            Problem::ConstantGradient { gradient } => gradient.clone(),
            Problem::ConstantQuadratic { target } => {
                theta.iter().zip(target).map(|(t, c)| t - c).collect()
            }
            Problem::MovingQuadratic { start, velocity } => theta
                .iter()
                .zip(start)
                .zip(velocity)
                .map(|((t, s), v)| t - s - v * alpha)
                .collect(),
            Problem::SinePerturbed {
                start,
                velocity,
                amplitude,
                frequency,
            } => {
                vec![
                    2.0 * (theta[0] - start - velocity * alpha)
                        + amplitude * frequency * (frequency * theta[0]).cos(),
                ]
            }
        }
    }

    fn lipschitz(&self) -> Option<f64> {
        match self {
            Problem::ConstantGradient { .. } => Some(0.0),
            Problem::ConstantQuadratic { .. } | Problem::MovingQuadratic { .. } => Some(1.0),
            Problem::SinePerturbed { .. } => None,
        }
    }
}

/// Perturbation added to every exact gradient; its norm never exceeds `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    Exact,
    /// A fixed bias of norm `eps` along the all-ones direction.
    ConstantBias {
        eps: f64,
    },
}

impl Noise {
    pub fn eps(&self) -> f64 {
        match self {
            Noise::Exact => 0.0,
            Noise::ConstantBias { eps } => *eps,
        }
    }

    fn perturb(&self, g: &mut [f64]) {
        if let Noise::ConstantBias { eps } = self {
            let b = eps / (g.len() as f64).sqrt();
            g.iter_mut().for_each(|v| *v += b);
        }
    }
}

const DIVERGENCE: f64 = 1e150;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(theta: &[f64], alpha: f64) -> Result<()> {
    if theta.iter().all(|v| v.is_finite()) && norm(theta) < DIVERGENCE {
        Ok(())
    } else {
        Err(numeric(format!("trajectory diverged at alpha = {alpha}")))
    }
}

/// Fine-grid solution of the limiting ODE with linear dense output.
#[derive(Clone, Debug, PartialEq)]
pub struct OdePath {
    pub h: f64,
    pub alphas: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    /// `theta'` at each node.
    pub rates: Vec<Vec<f64>>,
}

impl OdePath {
    pub fn sample(&self, alpha: f64) -> Vec<f64> {
        let last = self.alphas.len() - 1;
        let x = (alpha / self.h).clamp(0.0, last as f64);
        let j = (x.floor() as usize).min(last.saturating_sub(1));
        let w = x - j as f64;
        if last == 0 || w == 0.0 {
            return self.thetas[j].clone();
        }
        self.thetas[j]
            .iter()
            .zip(&self.thetas[j + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Half the largest finite-difference second derivative along the path.
    pub fn taylor_constant(&self) -> f64 {
        self.rates
            .windows(2)
            .map(|w| {
                norm(
                    &w[1]
                        .iter()
                        .zip(&w[0])
                        .map(|(b, a)| (b - a) / self.h)
                        .collect::<Vec<_>>(),
                )
            })
            .fold(0.0, f64::max)
            / 2.0
    }
}

/// Classical RK4 on `[0, horizon]` with step at most `max_step`.
pub fn ode_solve(
    problem: &dyn TimeVaryingProblem,
    theta0: &[f64],
    eta: f64,
    horizon: f64,
    max_step: f64,
) -> Result<OdePath> {
    if theta0.len() != problem.dim() {
        return Err(config("initial point has the wrong dimension"));
    }
    if !(eta > 0.0 && horizon >= 0.0 && max_step > 0.0) {
        return Err(config("ode_solve needs eta > 0, horizon >= 0, step > 0"));
    }
    let n = ((horizon / max_step) - 1e-9).ceil().max(1.0) as usize;
    let h = horizon / n as f64;
    let rate = |a: f64, th: &[f64]| -> Vec<f64> {
        problem.grad(a, th).into_iter().map(|g| -g / eta).collect()
    };
    let axpy = |x: &[f64], s: f64, d: &[f64]| -> Vec<f64> {
        x.iter().zip(d).map(|(a, b)| a + s * b).collect()
    };
    let mut theta = theta0.to_vec();
    let mut alphas = Vec::with_capacity(n + 1);
    let mut thetas = Vec::with_capacity(n + 1);
    let mut rates = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let a = j as f64 * h;
        check_finite(&theta, a)?;
        let k1 = rate(a, &theta);
        alphas.push(a);
        thetas.push(theta.clone());
        rates.push(k1.clone());
        if j == n {
            break;
        }
        let k2 = rate(a + h / 2.0, &axpy(&theta, h / 2.0, &k1));
        let k3 = rate(a + h / 2.0, &axpy(&theta, h / 2.0, &k2));
        let k4 = rate(a + h, &axpy(&theta, h, &k3));
        for d in 0..theta.len() {
            theta[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
    }
    Ok(OdePath {
        h,
        alphas,
        thetas,
        rates,
    })
}

/// Discrete iterates against the continuous reference at `alpha = k * step`,
/// for `k = 1..=floor(horizon / step)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingRun {
    pub step: f64,
    pub eta: f64,
    pub horizon: f64,
    pub eps: f64,
    pub sequence: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
    pub errors: Vec<f64>,
    /// Taylor remainder constant measured on the reference path.
    pub taylor: f64,
    /// Every point either sequence visited, including the start.
    pub visited: Vec<Vec<f64>>,
}

pub fn iteration_count(horizon: f64, step: f64) -> usize {
    (horizon / step + 1e-9).floor() as usize
}

pub fn proximal_sequence(
    problem: &dyn TimeVaryingProblem,
    theta0: &[f64],
    step: f64,
    eta: f64,
    horizon: f64,
    noise: Noise,
) -> Result<TrackingRun> {
    if !(step > 0.0) {
        return Err(config("step must be positive"));
    }
    let path = ode_solve(problem, theta0, eta, horizon, step / 10.0)?;
    let k_max = iteration_count(horizon, step);
    let mut theta = theta0.to_vec();
    let mut run = TrackingRun {
        step,
        eta,
        horizon,
        eps: noise.eps(),
        sequence: Vec::with_capacity(k_max),
        reference: Vec::with_capacity(k_max),
        errors: Vec::with_capacity(k_max),
        taylor: path.taylor_constant(),
        visited: path.thetas.clone(),
    };
    run.visited.push(theta.clone());
    for k in 0..k_max {
        let alpha = k as f64 * step;
        let mut g = problem.grad(alpha, &theta);
        noise.perturb(&mut g);
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= step / eta * gi;
        }
        let alpha_next = (k + 1) as f64 * step;
        check_finite(&theta, alpha_next)?;
        let reference = path.sample(alpha_next);
        run.errors.push(norm(
            &reference
                .iter()
                .zip(&theta)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        ));
        run.sequence.push(theta.clone());
        run.reference.push(reference);
        run.visited.push(theta.clone());
    }
    Ok(run)
}

/// Largest gradient difference quotient on a grid spanning the visited
/// interval (padded by 10%), over `alpha` in `[0, horizon]`. One-dimensional only.
pub fn estimate_lipschitz(
    problem: &dyn TimeVaryingProblem,
    visited: &[Vec<f64>],
    horizon: f64,
    grid: usize,
) -> Result<f64> {
    if problem.dim() != 1 {
        return Err(config(
            "grid Lipschitz estimate supports one-dimensional problems",
        ));
    }
    let lo = visited.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
    let hi = visited
        .iter()
        .map(|v| v[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.1 * (hi - lo).max(1.0);
    let (lo, hi) = (lo - pad, hi + pad);
    let dx = (hi - lo) / grid as f64;
    let mut best: f64 = 0.0;
    for s in 0..=10 {
        let alpha = horizon * s as f64 / 10.0;
        let mut prev = problem.grad(alpha, &[lo])[0];
        for j in 1..=grid {
            let g = problem.grad(alpha, &[lo + j as f64 * dx])[0];
            best = best.max((g - prev).abs() / dx);
            prev = g;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub max_error: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Tracking envelope with measured Taylor constant; `C_L = 0` uses the limit
/// `(e^{x T} - 1) / x -> T`.
pub fn check_tracking_bound(
    run: &TrackingRun,
    lipschitz: f64,
    eta: f64,
    horizon: f64,
    eps: f64,
) -> BoundCheck {
    let max_error = run.errors.iter().copied().fold(0.0, f64::max);
    let growth = if lipschitz > 0.0 {
        (lipschitz * horizon / eta).exp_m1() / lipschitz
    } else {
        horizon / eta
    };
    let bound = run.taylor * eta * growth * run.step + growth * eps;
    BoundCheck {
        max_error,
        bound,
        satisfied: max_error <= bound,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepProblem {
    #[serde(flatten)]
    pub problem: Problem,
    pub theta0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub problems: Vec<SweepProblem>,
    pub steps: Vec<f64>,
    #[serde(default = "one")]
    pub etas: Vec<f64>,
    #[serde(default = "zero")]
    pub epsilons: Vec<f64>,
    #[serde(default = "horizon")]
    pub horizon: f64,
    #[serde(default = "grid")]
    pub lipschitz_grid: usize,
}

fn one() -> Vec<f64> {
    vec![1.0]
}
fn zero() -> Vec<f64> {
    vec![0.0]
}
fn horizon() -> f64 {
    1.0
}
fn grid() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub problem: String,
    pub step: f64,
    pub eta: f64,
    pub eps: f64,
    pub max_error: f64,
    pub bound: f64,
    pub satisfied: bool,
    /// Ratio of this row's error to the previous row's when the step halved.
    pub ratio: Option<f64>,
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    for p in &cfg.problems {
        p.problem.validate()?;
    }
    let mut jobs = Vec::new();
    for (pi, _) in cfg.problems.iter().enumerate() {
        for &eta in &cfg.etas {
            for &eps in &cfg.epsilons {
                for &step in &cfg.steps {
                    jobs.push((pi, eta, eps, step));
                }
            }
        }
    }
    let mut rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(pi, eta, eps, step)| {
            let sp = &cfg.problems[pi];
            let noise = if eps > 0.0 {
                Noise::ConstantBias { eps }
            } else {
                Noise::Exact
            };
            let run = proximal_sequence(&sp.problem, &sp.theta0, step, eta, cfg.horizon, noise)?;
            let lip = match sp.problem.lipschitz() {
                Some(l) => l,
                None => {
                    estimate_lipschitz(&sp.problem, &run.visited, cfg.horizon, cfg.lipschitz_grid)?
                }
            };
            let c = check_tracking_bound(&run, lip, eta, cfg.horizon, eps);
            Ok(SweepRow {
                problem: sp.problem.name(),
                step,
                eta,
                eps,
                max_error: c.max_error,
                bound: c.bound,
                satisfied: c.satisfied,
                ratio: None,
            })
        })
        .collect::<Result<_>>()?;
    for j in 1..rows.len() {
        let (a, b) = (&rows[j - 1], &rows[j]);
        let same = a.problem == b.problem && a.eta == b.eta && a.eps == b.eps;
        if same && (b.step * 2.0 - a.step).abs() <= 1e-12 * a.step && a.max_error > 0.0 {
            rows[j].ratio = Some(rows[j].max_error / rows[j - 1].max_error);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "problem",
        "step",
        "eta",
        "eps",
        "max_error",
        "bound",
        "satisfied",
        "ratio",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.problem.clone(),
            r.step.to_string(),
            r.eta.to_string(),
            r.eps.to_string(),
            r.max_error.to_string(),
            r.bound.to_string(),
            r.satisfied.to_string(),
            r.ratio.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}
