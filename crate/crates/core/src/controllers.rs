//! Analytical learning-rate rules.
//!
//! * [`mu_closed_loop`]: state feedback `μ = √((P̂(T) − P(t))/β)`, optionally
//!   with a cost-free base rate `α`.
//! * [`solve_theta`] / [`mu_open_loop`]: the full schedule
//!   `μ(t) = θ·tan(σ²θ(T − t))` for a linear perceptron on isotropic inputs,
//!   with `θ = (σd/√(2β))·cos(σ²θT)`.
//! * [`mu_discounted_approx`]: leading-order schedule under discounting.
//! * [`make_profile`]: baseline strategy shapes.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Controller, Observation};
use crate::error::{ensure_finite, Error, Result};
use crate::reward::{RewardParams, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopConfig {
    pub beta: f64,
    /// Estimate of the final performance `P̂(T)`.
    pub final_performance: f64,
    /// Cost-free base rate `α`.
    #[serde(default)]
    pub alpha: f64,
    /// Treat a negative radicand (performance above the estimate) as zero.
    #[serde(default = "default_true")]
    pub clamp_negative: bool,
}

fn default_true() -> bool {
    true
}

impl ClosedLoopConfig {
    pub fn new(beta: f64, final_performance: f64) -> Result<Self> {
        let cfg = Self {
            beta,
            final_performance,
            alpha: 0.0,
            clamp_negative: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("beta", self.beta)?;
        ensure_finite("final performance estimate", self.final_performance)?;
        ensure_finite("alpha", self.alpha)?;
        if self.beta <= 0.0 {
            return Err(Error::Domain(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Domain(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Optimal learning rate given the current performance and an estimate of
/// the final one.
pub fn mu_closed_loop(performance: f64, cfg: &ClosedLoopConfig) -> Result<f64> {
    ensure_finite("performance", performance)?;
    cfg.validate()?;
    let gap = cfg.final_performance - performance;
    let radicand = if gap < 0.0 {
        if !cfg.clamp_negative {
            return Err(Error::Domain(format!(
                "performance {performance} exceeds the final-performance estimate {}",
                cfg.final_performance
            )));
        }
        0.0
    } else {
        gap / cfg.beta
    };
    let alpha = cfg.alpha;
    let mu = if alpha == 0.0 {
        radicand.sqrt()
    } else {
        (-alpha + (radicand + alpha * alpha).sqrt()).max(0.0)
    };
    // First integral of the optimal dynamics: β(μ² + 2αμ) + P = P̂(T).
    debug_assert!(
        gap < 0.0 || {
            let lhs = cfg.beta * (mu * mu + 2.0 * alpha * mu) + performance;
            (lhs - cfg.final_performance).abs()
                <= 1e-9 * (cfg.final_performance.abs() + performance.abs() + cfg.beta * alpha * alpha).max(1e-300)
        },
        "first integral violated"
    );
    Ok(mu)
}

/// [`mu_closed_loop`] as an online controller.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop {
    pub config: ClosedLoopConfig,
}

impl Controller for ClosedLoop {
    fn rate(&mut self, obs: &Observation) -> Result<f64> {
        mu_closed_loop(obs.performance, &self.config)
    }
}

/// A linear perceptron regression task on inputs `x ~ N(0, σ²I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptronTask {
    pub sigma2: f64,
    /// Initial distance `‖w* − w₀‖`.
    pub d: f64,
    pub beta: f64,
    pub horizon: f64,
}

impl PerceptronTask {
    pub fn new(sigma2: f64, d: f64, beta: f64, horizon: f64) -> Result<Self> {
        let task = Self {
            sigma2,
            d,
            beta,
            horizon,
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("d", self.d),
            ("beta", self.beta),
            ("horizon", self.horizon),
        ] {
            ensure_finite(name, v)?;
        }
        if self.sigma2 <= 0.0 || self.beta <= 0.0 || self.horizon <= 0.0 {
            return Err(Error::Domain(
                "sigma2, beta and horizon must be positive".into(),
            ));
        }
        if self.d < 0.0 {
            return Err(Error::Domain(format!("d must be >= 0, got {}", self.d)));
        }
        Ok(())
    }

    /// Amplitude `σd/√(2β)` of the self-consistency equation.
    pub fn amplitude(&self) -> f64 {
        self.sigma2.sqrt() * self.d / (2.0 * self.beta).sqrt()
    }

    /// Initial loss `σ²d²/2` of the ½-mean-squared-error objective.
    pub fn initial_loss(&self) -> f64 {
        0.5 * self.sigma2 * self.d * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopSolution {
    pub theta: f64,
    pub task: PerceptronTask,
}

impl OpenLoopSolution {
    pub fn schedule(&self, dt: f64, steps: usize) -> Result<Schedule> {
        let values = (0..steps)
            .map(|i| mu_open_loop(i as f64 * dt, self))
            .collect::<Result<Vec<_>>>()?;
        Schedule::new(dt, values)
    }

    pub fn initial_rate(&self) -> f64 {
        self.theta * (self.task.sigma2 * self.theta * self.task.horizon).tan()
    }
}

/// Residual of the self-consistency equation `θ − (σd/√(2β))·cos(σ²θT)`.
pub fn theta_residual(theta: f64, task: &PerceptronTask) -> f64 {
    theta - task.amplitude() * (task.sigma2 * theta * task.horizon).cos()
}

/// Smallest nonnegative root of the self-consistency equation, by bisection
/// on `[0, π/(2σ²T) − ε]`.
pub fn solve_theta(task: &PerceptronTask) -> Result<OpenLoopSolution> {
    task.validate()?;
    let edge = FRAC_PI_2 / (task.sigma2 * task.horizon);
    let (mut lo, mut hi) = (0.0, edge - 1e-9 * edge);
    let (f_lo, f_hi) = (theta_residual(lo, task), theta_residual(hi, task));
    if f_lo == 0.0 {
        return Ok(OpenLoopSolution { theta: 0.0, task: *task });
    }
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(Error::NoSignChange { lo, hi, f_lo, f_hi });
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let f = theta_residual(mid, task);
        if f.abs() <= 1e-12 || mid == lo || mid == hi {
            break;
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(OpenLoopSolution {
        theta: mid,
        task: *task,
    })
}

/// `θ·tan(σ²θ(T − t))` for `t ∈ [0, T]`.
pub fn mu_open_loop(t: f64, sol: &OpenLoopSolution) -> Result<f64> {
    ensure_finite("t", t)?;
    let horizon = sol.task.horizon;
    let slack = 1e-12 * horizon;
    if t < -slack || t > horizon + slack {
        return Err(Error::Domain(format!("t = {t} outside [0, {horizon}]")));
    }
    let remaining = (horizon - t).max(0.0);
    Ok(sol.theta * (sol.task.sigma2 * sol.theta * remaining).tan())
}

/// Replays the open-loop schedule by time.
#[derive(Debug, Clone, Copy)]
pub struct OpenLoop {
    pub solution: OpenLoopSolution,
}

impl Controller for OpenLoop {
    fn rate(&mut self, obs: &Observation) -> Result<f64> {
        mu_open_loop(obs.time, &self.solution)
    }
}

/// Leading-order discounted rate
/// `(1/(2β))·g² / (1/(T − t) − ½·ln γ)` with `g² = (dP/dw)²`.
pub fn mu_discounted_approx(grad_sq: f64, t: f64, params: &RewardParams) -> Result<f64> {
    discounted_rate(grad_sq, params.horizon() - t, params.beta(), params.gamma())
}

/// [`mu_discounted_approx`] in terms of the time remaining.
pub fn discounted_rate(grad_sq: f64, remaining: f64, beta: f64, gamma: f64) -> Result<f64> {
    ensure_finite("grad_sq", grad_sq)?;
    ensure_finite("remaining time", remaining)?;
    if grad_sq < 0.0 {
        return Err(Error::Domain(format!("grad_sq must be >= 0, got {grad_sq}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if beta <= 0.0 {
        return Err(Error::Domain(format!("beta must be > 0, got {beta}")));
    }
    if remaining < 0.0 {
        return Err(Error::Domain(format!("time lies {} past the horizon", -remaining)));
    }
    // Multiplied through by (T − t) so that t = T gives exactly zero.
    Ok(grad_sq * remaining / (2.0 * beta * (1.0 - 0.5 * gamma.ln() * remaining)))
}

/// Online controller evaluating [`mu_discounted_approx`] with the current gradient.
#[derive(Debug, Clone, Copy)]
pub struct DiscountedApprox {
    pub params: RewardParams,
}

impl Controller for DiscountedApprox {
    fn rate(&mut self, obs: &Observation) -> Result<f64> {
        mu_discounted_approx(obs.grad_sq, obs.time, &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Flat,
    RampUp,
    LearnThenRest,
}

/// Baseline schedule shapes with peak `scale`. `LearnThenRest` rescales
/// `shape_source` (normally a realized optimal schedule) to that peak.
pub fn make_profile(
    kind: ProfileKind,
    scale: f64,
    steps: usize,
    dt: f64,
    shape_source: Option<&Schedule>,
) -> Result<Schedule> {
    ensure_finite("scale", scale)?;
    if scale < 0.0 {
        return Err(Error::Domain(format!("profile scale must be >= 0, got {scale}")));
    }
    match kind {
        ProfileKind::Flat => Schedule::constant(dt, steps, scale),
        ProfileKind::RampUp => {
            let values = match steps {
                0 => Vec::new(),
                1 => vec![scale],
                n => (0..n).map(|i| scale * i as f64 / (n - 1) as f64).collect(),
            };
            Schedule::new(dt, values)
        }
        ProfileKind::LearnThenRest => {
            let source = shape_source.ok_or_else(|| {
                Error::Contract("learn-then-rest profile needs a source schedule".into())
            })?;
            if source.len() != steps {
                return Err(Error::Contract(format!(
                    "source schedule has {} steps, profile needs {steps}",
                    source.len()
                )));
            }
            let peak = source.peak();
            if peak == 0.0 {
                return Err(Error::Domain("cannot rescale an all-zero source schedule".into()));
            }
            if peak == scale {
                return Schedule::new(dt, source.values().to_vec());
            }
            let factor = scale / peak;
            Schedule::new(dt, source.values().iter().map(|v| v * factor).collect())
        }
    }
}
