//! Numerical schedule optimization by gradient ascent through unrolled
//! Euler training dynamics.
//!
//! The schedule is parameterized by knots, each holding the learning rate for
//! `knot_stride` consecutive Euler steps. Gradients are taken in function
//! space (divided by the knot duration) so that the outer step size does not
//! depend on `dt` or on the knot resolution.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::{ClosedLoop, ClosedLoopConfig};
use crate::dynamics::{check_divergence, BatchPlan, PerformanceProbe, Simulator};
use crate::error::{Error, Result};
use crate::model::{self, Weights};
use crate::reward::{cumulative_reward, RewardParams, Schedule};

const MAX_HALVINGS: usize = 20;
const CONVERGENCE_WINDOW: usize = 5;
const MAX_DECREASING_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    ReverseUnrolled,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaOptConfig {
    pub outer_steps: usize,
    /// Initial functional-gradient step size.
    pub outer_step_size: f64,
    /// Euler steps per schedule knot.
    pub knot_stride: usize,
    /// Relative objective change regarded as converged.
    pub rel_tol: f64,
    pub grad_mode: GradMode,
    /// Factor applied to the step size after each accepted step (1 disables growth).
    pub step_growth: f64,
    /// Relative perturbation for finite-difference gradients.
    pub fd_epsilon: f64,
}

impl Default for MetaOptConfig {
    fn default() -> Self {
        Self {
            outer_steps: 200,
            outer_step_size: 1.0,
            knot_stride: 1,
            rel_tol: 1e-8,
            grad_mode: GradMode::ReverseUnrolled,
            step_growth: 1.25,
            fd_epsilon: 1e-6,
        }
    }
}

impl MetaOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 {
            return Err(Error::Domain("outer_steps must be at least 1".into()));
        }
        if !(self.outer_step_size > 0.0 && self.outer_step_size.is_finite()) {
            return Err(Error::Domain(format!(
                "outer_step_size must be > 0, got {}",
                self.outer_step_size
            )));
        }
        if self.knot_stride == 0 {
            return Err(Error::Domain("knot_stride must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Domain(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return Err(Error::Domain(format!(
                "step_growth must be >= 1, got {}",
                self.step_growth
            )));
        }
        if !(self.fd_epsilon > 0.0) {
            return Err(Error::Domain("fd_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaOptStatus {
    /// Relative change stayed below `rel_tol`, or the projected gradient vanished.
    Converged,
    /// No step size down to `2⁻²⁰` of the current one improved the objective.
    Stalled,
    MaxIterations,
}

/// One accepted outer iteration (iteration 0 is the initial schedule).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub step_size: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub history: Vec<IterationRecord>,
    pub status: MetaOptStatus,
    pub rejected_steps: usize,
}

impl Diagnostics {
    pub fn objectives(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.objective).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,objective,step_size,grad_norm\n");
        for r in &self.history {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e}",
                r.iteration, r.objective, r.step_size, r.grad_norm
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct MetaOptResult {
    pub schedule: Schedule,
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

/// Forward pass with every pre-update weight vector retained.
struct Unrolled {
    weights: Vec<Vec<f64>>,
    objective: f64,
}

/// Evaluates the objective for knot values, keeping the states needed for
/// the reverse pass.
struct Problem<'s, 'a> {
    sim: &'s Simulator<'a>,
    params: &'s RewardParams,
    plan: BatchPlan,
    w0: Vec<f64>,
    reference: f64,
    steps: usize,
    stride: usize,
}

impl Problem<'_, '_> {
    fn knot_count(&self) -> usize {
        self.steps.div_ceil(self.stride)
    }

    fn expand(&self, knots: &[f64]) -> Vec<f64> {
        (0..self.steps).map(|i| knots[i / self.stride]).collect()
    }

    fn probe_loss(&self, step: usize, batch_loss: f64, w: &[f64]) -> Result<f64> {
        match (self.sim.options().probe, self.plan.is_full_batch()) {
            (PerformanceProbe::Full, false) => model::loss(self.sim.spec(), w, self.sim.data().full_batch())
                .map_err(|e| crate::dynamics::at_step(e, step)),
            _ => Ok(batch_loss),
        }
    }

    fn unroll(&self, knots: &[f64], keep: bool) -> Result<Unrolled> {
        let mu = self.expand(knots);
        let dt = self.params.dt();
        let alpha = self.sim.options().base_rate;
        let mut w = self.w0.clone();
        let mut weights = Vec::with_capacity(if keep { self.steps } else { 0 });
        let mut objective = 0.0;
        for (step, &m) in mu.iter().enumerate() {
            let (loss, grad) = self.sim.step_loss_and_gradient(&self.plan, step, &w)?;
            let probe = self.probe_loss(step, loss, &w)?;
            check_divergence(probe.max(loss), step)?;
            objective += dt * self.params.discount(step) * (self.reference - probe - self.params.effort_cost(m));
            if keep {
                weights.push(w.clone());
            }
            let scale = dt * (m + alpha);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= scale * gi;
            }
        }
        Ok(Unrolled { weights, objective })
    }

    fn objective(&self, knots: &[f64]) -> Result<f64> {
        Ok(self.unroll(knots, false)?.objective)
    }

    /// `∂R/∂μ_i` for every Euler step by reverse accumulation.
    ///
    /// With `a_i = ∂R/∂w_i` the adjoint obeys
    /// `a_i = −dt·c_i·∇L_probe(w_i) + (I − dt(μ_i+α)H_i)·a_{i+1}`, `a_N = 0`,
    /// and `∂R/∂μ_i = −2β·dt·c_i·μ_i − dt·a_{i+1}·∇L_i(w_i)`.
    fn step_gradient(&self, knots: &[f64], fwd: &Unrolled) -> Result<Vec<f64>> {
        let mu = self.expand(knots);
        let dt = self.params.dt();
        let alpha = self.sim.options().base_rate;
        let beta = self.params.beta();
        let full_probe = self.sim.options().probe == PerformanceProbe::Full && !self.plan.is_full_batch();
        let mut adj = vec![0.0; self.w0.len()];
        let mut out = vec![0.0; self.steps];
        for i in (0..self.steps).rev() {
            let w = &fwd.weights[i];
            let c = self.params.discount(i);
            let d = self.sim.step_derivatives(&self.plan, i, w, &adj)?;
            let hvp = d.hvp.expect("direction was supplied");
            let grad_dot_adj: f64 = d.gradient.iter().zip(&adj).map(|(g, a)| g * a).sum();
            out[i] = -2.0 * beta * dt * c * mu[i] - dt * grad_dot_adj;
            let probe_grad = if full_probe {
                model::loss_and_gradient(self.sim.spec(), w, self.sim.data().full_batch())
                    .map_err(|e| crate::dynamics::at_step(e, i))?
                    .1
            } else {
                d.gradient
            };
            let scale = dt * (mu[i] + alpha);
            for ((a, h), g) in adj.iter_mut().zip(&hvp).zip(&probe_grad) {
                *a = *a - scale * h - dt * c * g;
            }
        }
        Ok(out)
    }

    /// `∂R/∂knot_k`, the sum of the per-step derivatives inside the knot.
    fn knot_gradient(&self, knots: &[f64], fwd: &Unrolled) -> Result<Vec<f64>> {
        let per_step = self.step_gradient(knots, fwd)?;
        let mut out = vec![0.0; self.knot_count()];
        for (i, g) in per_step.iter().enumerate() {
            out[i / self.stride] += g;
        }
        Ok(out)
    }

    fn knot_gradient_fd(&self, knots: &[f64], rel_eps: f64) -> Result<Vec<f64>> {
        let mut probe = knots.to_vec();
        let mut out = Vec::with_capacity(knots.len());
        for k in 0..knots.len() {
            let h = rel_eps * knots[k].abs().max(1.0);
            probe[k] = knots[k] + h;
            let up = self.objective(&probe)?;
            probe[k] = knots[k] - h;
            let down = self.objective(&probe)?;
            probe[k] = knots[k];
            out.push((up - down) / (2.0 * h));
        }
        Ok(out)
    }

    fn knot_duration(&self, k: usize) -> f64 {
        let len = (self.steps - k * self.stride).min(self.stride);
        len as f64 * self.params.dt()
    }
}

fn build_problem<'s, 'a>(
    sim: &'s Simulator<'a>,
    w0: &Weights,
    params: &'s RewardParams,
    stride: usize,
) -> Result<Problem<'s, 'a>> {
    if w0.len() != sim.spec().param_count() {
        return Err(Error::Contract(format!(
            "model has {} parameters, initial weights have {}",
            sim.spec().param_count(),
            w0.len()
        )));
    }
    let steps = params.steps();
    Ok(Problem {
        sim,
        params,
        plan: sim.data().batch_plan(steps),
        w0: w0.as_slice().to_vec(),
        reference: sim.reference_loss(w0)?,
        steps,
        stride,
    })
}

/// Averages a per-step schedule into knots of `stride` steps.
fn to_knots(values: &[f64], stride: usize) -> Vec<f64> {
    values
        .chunks(stride)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Per-step derivatives `∂R/∂μ_i` of the cumulative reward, by reverse
/// accumulation through the unrolled dynamics.
pub fn schedule_gradient(sim: &Simulator, w0: &Weights, params: &RewardParams, sched: &Schedule) -> Result<Vec<f64>> {
    check_schedule(sched, params)?;
    let problem = build_problem(sim, w0, params, 1)?;
    let fwd = problem.unroll(sched.values(), true)?;
    problem.step_gradient(sched.values(), &fwd)
}

/// Central finite-difference counterpart of [`schedule_gradient`].
pub fn schedule_gradient_fd(
    sim: &Simulator,
    w0: &Weights,
    params: &RewardParams,
    sched: &Schedule,
    rel_eps: f64,
) -> Result<Vec<f64>> {
    check_schedule(sched, params)?;
    build_problem(sim, w0, params, 1)?.knot_gradient_fd(sched.values(), rel_eps)
}

fn check_schedule(sched: &Schedule, params: &RewardParams) -> Result<()> {
    if sched.len() != params.steps() {
        return Err(Error::Contract(format!(
            "schedule has {} steps, reward horizon has {}",
            sched.len(),
            params.steps()
        )));
    }
    if (sched.dt() - params.dt()).abs() > 1e-12 * params.dt() {
        return Err(Error::Contract(format!(
            "schedule dt {} differs from reward dt {}",
            sched.dt(),
            params.dt()
        )));
    }
    Ok(())
}

/// Projected gradient ascent on the cumulative internal reward over
/// nonnegative schedules, starting from `init`.
pub fn meta_optimize(
    sim: &Simulator,
    w0: &Weights,
    params: &RewardParams,
    init: &Schedule,
    cfg: &MetaOptConfig,
) -> Result<MetaOptResult> {
    cfg.validate()?;
    check_schedule(init, params)?;
    let problem = build_problem(sim, w0, params, cfg.knot_stride)?;
    let durations: Vec<f64> = (0..problem.knot_count()).map(|k| problem.knot_duration(k)).collect();

    let mut knots = to_knots(init.values(), cfg.knot_stride);
    let mut fwd = problem.unroll(&knots, cfg.grad_mode == GradMode::ReverseUnrolled)?;
    let mut objective = fwd.objective;
    let mut step = cfg.outer_step_size;
    let mut history = Vec::new();
    let mut rejected = 0;
    let mut small_changes = 0;
    let mut decreasing = 0;
    let mut status = MetaOptStatus::MaxIterations;

    for iteration in 0..cfg.outer_steps {
        let raw = match cfg.grad_mode {
            GradMode::ReverseUnrolled => problem.knot_gradient(&knots, &fwd)?,
            GradMode::FiniteDifference => problem.knot_gradient_fd(&knots, cfg.fd_epsilon)?,
        };
        let direction: Vec<f64> = raw.iter().zip(&durations).map(|(g, d)| g / d).collect();
        let grad_norm = projected_norm(&knots, &direction, &durations);
        history.push(IterationRecord {
            iteration,
            objective,
            step_size: step,
            grad_norm,
        });
        if grad_norm == 0.0 {
            status = MetaOptStatus::Converged;
            break;
        }

        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = knots
                .iter()
                .zip(&direction)
                .map(|(k, g)| (k + step * g).max(0.0))
                .collect();
            match problem.unroll(&trial, cfg.grad_mode == GradMode::ReverseUnrolled) {
                Ok(next) if next.objective > objective => {
                    accepted = Some((trial, next));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_numerical() => {}
                Err(e) => return Err(e),
            }
            rejected += 1;
            step *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            status = MetaOptStatus::Stalled;
            break;
        };

        if next.objective < objective {
            decreasing += 1;
            if decreasing >= MAX_DECREASING_STEPS {
                return Err(Error::NonConvergence {
                    iterations: iteration + 1,
                    history: history.iter().map(|r| r.objective).collect(),
                });
            }
        } else {
            decreasing = 0;
        }
        let change = (next.objective - objective).abs() / objective.abs().max(f64::MIN_POSITIVE);
        knots = trial;
        fwd = next;
        objective = fwd.objective;
        step *= cfg.step_growth;
        if change < cfg.rel_tol {
            small_changes += 1;
            if small_changes >= CONVERGENCE_WINDOW {
                status = MetaOptStatus::Converged;
                history.push(IterationRecord {
                    iteration: iteration + 1,
                    objective,
                    step_size: step,
                    grad_norm: f64::NAN,
                });
                break;
            }
        } else {
            small_changes = 0;
        }
    }
    if status == MetaOptStatus::MaxIterations {
        history.push(IterationRecord {
            iteration: cfg.outer_steps,
            objective,
            step_size: step,
            grad_norm: f64::NAN,
        });
    }

    Ok(MetaOptResult {
        schedule: Schedule::new(params.dt(), problem.expand(&knots))?,
        objective,
        diagnostics: Diagnostics {
            history,
            status,
            rejected_steps: rejected,
        },
    })
}

/// L2 norm (in function space) of the gradient after removing components that
/// push an active lower bound further down.
fn projected_norm(knots: &[f64], direction: &[f64], durations: &[f64]) -> f64 {
    knots
        .iter()
        .zip(direction)
        .zip(durations)
        .map(|((&k, &g), &d)| if k <= 0.0 && g <= 0.0 { 0.0 } else { g * g * d })
        .sum::<f64>()
        .sqrt()
}

/// Cumulative reward of the closed-loop controller driven with a fixed
/// final-performance estimate `p_hat`.
pub fn closed_loop_reward(sim: &Simulator, w0: &Weights, params: &RewardParams, p_hat: f64) -> Result<f64> {
    let cfg = ClosedLoopConfig::new(params.beta(), p_hat)?.with_alpha(sim.options().base_rate)?;
    let mut controller = ClosedLoop { config: cfg };
    let ep = sim.run_closed_loop(w0, &mut controller, params)?;
    cumulative_reward(&ep.trajectory, &ep.schedule, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub value: f64,
    pub reward: f64,
    pub evaluations: usize,
    /// Every `(P̂, reward)` pair evaluated, in evaluation order.
    pub samples: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// Golden-section search for the final-performance estimate that maximizes
/// the realized closed-loop reward over `[lo, hi]`.
pub fn calibrate_final_performance(
    sim: &Simulator,
    w0: &Weights,
    params: &RewardParams,
    interval: (f64, f64),
    tol: f64,
) -> Result<Calibration> {
    let (a, b) = interval;
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(Error::Domain(format!("invalid search interval [{a}, {b}]")));
    }
    if a < 0.0 {
        return Err(Error::Domain(format!("final performance must be >= 0, got {a}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    let mut evals: Vec<(f64, f64)> = Vec::new();
    let mut eval = |p: f64| -> Result<f64> {
        let r = match closed_loop_reward(sim, w0, params, p) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        evals.push((p, r));
        Ok(r)
    };
    if a == b {
        let reward = eval(a)?;
        return Ok(Calibration {
            value: a,
            reward,
            evaluations: 1,
            samples: evals,
            warnings: Vec::new(),
        });
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f_a = eval(a)?;
    let f_b = eval(b)?;
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    while hi - lo > tol * (b - a).max(f64::MIN_POSITIVE) {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = eval(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = eval(x2)?;
        }
    }
    drop(eval);

    let (value, reward) = evals
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, s| if s.1 > best.1 { s } else { best });
    let mut warnings = Vec::new();
    if !reward.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            message: "every calibration run diverged".into(),
        });
    }
    let interior_best = evals
        .iter()
        .filter(|(p, _)| *p != a && *p != b)
        .map(|s| s.1)
        .fold(f64::NEG_INFINITY, f64::max);
    if f_a >= interior_best || f_b >= interior_best {
        warnings.push(format!(
            "objective does not improve toward the interior of [{a}, {b}]; returning best sample {value}"
        ));
    }
    Ok(Calibration {
        value,
        reward,
        evaluations: evals.len(),
        samples: evals,
        warnings,
    })
}

/// Final-performance estimate that the closed-loop controller reproduces
/// exactly: the root of `F(P̂) − P̂`, where `F(P̂)` is the final full-data
/// performance reached when the controller is driven with `P̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfConsistent {
    pub value: f64,
    /// `F(value) − value`.
    pub residual: f64,
    pub evaluations: usize,
}

/// Solves `F(P̂) = P̂` by secant steps started from plain fixed-point
/// iterates, beginning at `P̂ = L(w₀)`, the largest reachable performance
/// for a nonnegative loss.
pub fn self_consistent_final_performance(
    sim: &Simulator,
    w0: &Weights,
    params: &RewardParams,
    rel_tol: f64,
    max_evals: usize,
) -> Result<SelfConsistent> {
    let realized = |p: f64| -> Result<f64> {
        let cfg = ClosedLoopConfig::new(params.beta(), p)?.with_alpha(sim.options().base_rate)?;
        let mut controller = ClosedLoop { config: cfg };
        Ok(sim.run_closed_loop(w0, &mut controller, params)?.final_performance)
    };
    let scale = sim.reference_loss(w0)?;
    if scale == 0.0 {
        return Ok(SelfConsistent {
            value: 0.0,
            residual: 0.0,
            evaluations: 0,
        });
    }
    let tol = rel_tol * scale;
    let mut x0 = scale;
    let mut g0 = realized(x0)? - x0;
    let mut evaluations = 1;
    let mut x1 = x0 + g0;
    loop {
        let g1 = realized(x1)? - x1;
        evaluations += 1;
        if g1.abs() <= tol || evaluations >= max_evals {
            return Ok(SelfConsistent {
                value: x1,
                residual: g1,
                evaluations,
            });
        }
        let slope = (g1 - g0) / (x1 - x0);
        // fall back to a plain fixed-point step when the secant is unusable
        let next = if slope.is_finite() && slope < 0.0 { x1 - g1 / slope } else { x1 + g1 };
        (x0, g0) = (x1, g1);
        x1 = next.clamp(0.0, scale);
    }
}
