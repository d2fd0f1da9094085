//! The internal-reward objective: performance minus a quadratic effort cost,
//! integrated over the episode with exponential discounting.
//!
//! Everything is discretized on the same grid as the explicit-Euler dynamics:
//! step `i` covers `[i·dt, (i+1)·dt)`, the learning rate is held constant over
//! the step and the integral is a left Riemann sum.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Tolerance on `horizon / dt` being a whole number of steps.
const STEP_COUNT_TOL: f64 = 1e-9;

/// Constants of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRewardParams", into = "RawRewardParams")]
pub struct RewardParams {
    beta: f64,
    gamma: f64,
    horizon: f64,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRewardParams {
    beta: f64,
    #[serde(default = "default_gamma")]
    gamma: f64,
    horizon: f64,
    dt: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl TryFrom<RawRewardParams> for RewardParams {
    type Error = Error;

    fn try_from(raw: RawRewardParams) -> Result<Self> {
        RewardParams::new(raw.beta, raw.gamma, raw.horizon, raw.dt)
    }
}

impl From<RewardParams> for RawRewardParams {
    fn from(p: RewardParams) -> Self {
        RawRewardParams {
            beta: p.beta,
            gamma: p.gamma,
            horizon: p.horizon,
            dt: p.dt,
        }
    }
}

impl RewardParams {
    pub fn new(beta: f64, gamma: f64, horizon: f64, dt: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("gamma", gamma), ("horizon", horizon), ("dt", dt)] {
            ensure_finite(name, v)?;
        }
        if beta <= 0.0 {
            return Err(Error::Domain(format!("beta must be > 0, got {beta}")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Domain(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if dt <= 0.0 {
            return Err(Error::Domain(format!("dt must be > 0, got {dt}")));
        }
        if horizon < dt {
            return Err(Error::Domain(format!("horizon {horizon} is shorter than dt {dt}")));
        }
        let ratio = horizon / dt;
        if (ratio - ratio.round()).abs() > STEP_COUNT_TOL * ratio.max(1.0) {
            return Err(Error::Domain(format!(
                "horizon / dt = {ratio} is not a whole number of steps"
            )));
        }
        Ok(Self {
            beta,
            gamma,
            horizon,
            dt,
        })
    }

    /// Parameters for an episode of `steps` Euler steps of size `dt`.
    pub fn with_steps(beta: f64, gamma: f64, steps: usize, dt: f64) -> Result<Self> {
        Self::new(beta, gamma, steps as f64 * dt, dt)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn with_beta(self, beta: f64) -> Result<Self> {
        Self::new(beta, self.gamma, self.horizon, self.dt)
    }

    pub fn with_gamma(self, gamma: f64) -> Result<Self> {
        Self::new(self.beta, gamma, self.horizon, self.dt)
    }

    /// Discount weight `γ^(i·dt)` of step `i`, computed as `exp(i·dt·ln γ)`.
    pub fn discount(&self, step: usize) -> f64 {
        if self.gamma == 1.0 {
            1.0
        } else {
            (step as f64 * self.dt * self.gamma.ln()).exp()
        }
    }

    /// Quadratic effort cost `β·μ²`.
    pub fn effort_cost(&self, mu: f64) -> f64 {
        self.beta * mu * mu
    }
}

/// A learning-rate value per Euler step, applied at the start of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    dt: f64,
    values: Vec<f64>,
}

impl Schedule {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        ensure_finite("dt", dt)?;
        if dt <= 0.0 {
            return Err(Error::Domain(format!("schedule dt must be > 0, got {dt}")));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Domain(format!(
                "learning rate at step {i} must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self { dt, values })
    }

    pub fn constant(dt: f64, steps: usize, value: f64) -> Result<Self> {
        Self::new(dt, vec![value; steps])
    }

    pub fn zeros(dt: f64, steps: usize) -> Self {
        Self {
            dt,
            values: vec![0.0; steps],
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Performance recorded at the start of every step: entry `i` is `P(i·dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dt: f64,
    performance: Vec<f64>,
}

impl Trajectory {
    pub fn new(dt: f64, performance: Vec<f64>) -> Result<Self> {
        ensure_finite("dt", dt)?;
        if dt <= 0.0 {
            return Err(Error::Domain(format!("trajectory dt must be > 0, got {dt}")));
        }
        if performance.is_empty() {
            return Err(Error::Contract("trajectory must be non-empty".into()));
        }
        if let Some(i) = performance.iter().position(|p| !p.is_finite()) {
            return Err(Error::Domain(format!(
                "trajectory value at step {i} is not finite"
            )));
        }
        Ok(Self { dt, performance })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn performance(&self) -> &[f64] {
        &self.performance
    }

    pub fn len(&self) -> usize {
        self.performance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.performance.is_empty()
    }

    /// Last recorded performance.
    pub fn last(&self) -> f64 {
        *self.performance.last().expect("non-empty by construction")
    }

    /// The first `steps` entries as a new trajectory.
    pub fn prefix(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.len() {
            return Err(Error::Contract(format!(
                "prefix of {steps} steps out of range for trajectory of length {}",
                self.len()
            )));
        }
        Ok(Self {
            dt: self.dt,
            performance: self.performance[..steps].to_vec(),
        })
    }
}

fn same_dt(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Instantaneous internal reward `P − β·μ²`.
pub fn internal_reward_rate(performance: f64, mu: f64, params: &RewardParams) -> Result<f64> {
    ensure_finite("performance", performance)?;
    ensure_finite("learning rate", mu)?;
    Ok(performance - params.effort_cost(mu))
}

/// Per-step reward rates `P_i − β·μ_i²` (undiscounted).
pub fn reward_rates(traj: &Trajectory, sched: &Schedule, params: &RewardParams) -> Result<Vec<f64>> {
    check_aligned(traj, sched)?;
    Ok(traj
        .performance
        .iter()
        .zip(&sched.values)
        .map(|(&p, &mu)| p - params.effort_cost(mu))
        .collect())
}

/// Running discounted reward: entry `i` integrates steps `0..=i`.
pub fn cumulative_reward_series(
    traj: &Trajectory,
    sched: &Schedule,
    params: &RewardParams,
) -> Result<Vec<f64>> {
    let rates = reward_rates(traj, sched, params)?;
    let dt = traj.dt;
    let mut acc = 0.0;
    Ok(rates
        .iter()
        .enumerate()
        .map(|(i, r)| {
            acc += dt * params.discount(i) * r;
            acc
        })
        .collect())
}

/// Left-Riemann discounted integral of the internal reward over the episode.
pub fn cumulative_reward(traj: &Trajectory, sched: &Schedule, params: &RewardParams) -> Result<f64> {
    check_aligned(traj, sched)?;
    let dt = traj.dt;
    Ok(traj
        .performance
        .iter()
        .zip(&sched.values)
        .enumerate()
        .map(|(i, (&p, &mu))| dt * params.discount(i) * (p - params.effort_cost(mu)))
        .sum())
}

/// Undiscounted effort `dt·Σ β·μ_i²`.
pub fn total_effort(sched: &Schedule, params: &RewardParams) -> f64 {
    sched.dt * sched.values.iter().map(|&mu| params.effort_cost(mu)).sum::<f64>()
}

fn check_aligned(traj: &Trajectory, sched: &Schedule) -> Result<()> {
    if traj.len() != sched.len() {
        return Err(Error::Contract(format!(
            "trajectory has {} steps but schedule has {}",
            traj.len(),
            sched.len()
        )));
    }
    if !same_dt(traj.dt, sched.dt) {
        return Err(Error::Contract(format!(
            "trajectory dt {} differs from schedule dt {}",
            traj.dt, sched.dt
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(beta: f64, gamma: f64, horizon: f64, dt: f64) -> RewardParams {
        RewardParams::new(beta, gamma, horizon, dt).unwrap()
    }

    #[test]
    fn reward_rate_examples() {
        let p = params(0.7, 1.0, 1.0, 0.1);
        assert_eq!(internal_reward_rate(0.0, 0.0, &p).unwrap(), 0.0);
        let unit = params(1.0, 1.0, 1.0, 0.1);
        assert_eq!(internal_reward_rate(1.0, 1.0, &unit).unwrap(), 0.0);
        let half = params(0.5, 1.0, 1.0, 0.1);
        assert_relative_eq!(internal_reward_rate(0.5, 0.4, &half).unwrap(), 0.42, epsilon = 1e-15);
        assert!(matches!(
            internal_reward_rate(f64::NAN, 0.0, &half),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(RewardParams::new(0.0, 1.0, 1.0, 0.1).is_err());
        assert!(RewardParams::new(1.0, 0.0, 1.0, 0.1).is_err());
        assert!(RewardParams::new(1.0, 1.1, 1.0, 0.1).is_err());
        assert!(RewardParams::new(1.0, 1.0, 0.05, 0.1).is_err());
        assert!(RewardParams::new(1.0, 1.0, 1.05, 0.1).is_err());
        let p = RewardParams::new(0.5, 1.0, 80.0, 0.01).unwrap();
        assert_eq!(p.steps(), 8000);
    }

    #[test]
    fn constant_integrand() {
        let p = params(0.5, 1.0, 2.0, 0.01);
        let n = p.steps();
        let traj = Trajectory::new(0.01, vec![0.3; n]).unwrap();
        let sched = Schedule::constant(0.01, n, 0.2).unwrap();
        let r = cumulative_reward(&traj, &sched, &p).unwrap();
        assert_relative_eq!(r, 2.0 * (0.3 - 0.5 * 0.04), max_relative = 1e-12);
    }

    #[test]
    fn zero_control_sums_performance() {
        let p = params(3.0, 1.0, 0.4, 0.1);
        let perf = vec![0.0, 0.1, 0.25, 0.4];
        let traj = Trajectory::new(0.1, perf.clone()).unwrap();
        let r = cumulative_reward(&traj, &Schedule::zeros(0.1, 4), &p).unwrap();
        assert_relative_eq!(r, 0.1 * perf.iter().sum::<f64>(), max_relative = 1e-14);
    }

    #[test]
    fn two_term_discounted_sum() {
        let p = params(1.0, 0.5, 1.0, 0.5);
        let traj = Trajectory::new(0.5, vec![1.0, 1.0]).unwrap();
        let r = cumulative_reward(&traj, &Schedule::zeros(0.5, 2), &p).unwrap();
        assert_relative_eq!(r, 0.5 * (1.0 + 0.5f64.sqrt()), epsilon = 1e-15);
        assert_relative_eq!(r, 0.853_553_390_593_273_8, epsilon = 1e-12);
    }

    #[test]
    fn effort_examples() {
        let p = params(0.5, 1.0, 0.2, 0.1);
        assert_eq!(total_effort(&Schedule::zeros(0.1, 2), &p), 0.0);
        let sched = Schedule::new(0.1, vec![1.0, 2.0]).unwrap();
        assert_relative_eq!(total_effort(&sched, &p), 0.25, epsilon = 1e-15);
        let p = params(0.8, 1.0, 3.0, 0.01);
        let flat = Schedule::constant(0.01, 300, 0.7).unwrap();
        assert_relative_eq!(total_effort(&flat, &p), 0.8 * 0.49 * 3.0, max_relative = 1e-12);
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let p = params(1.0, 1.0, 0.3, 0.1);
        let traj = Trajectory::new(0.1, vec![0.0; 3]).unwrap();
        assert!(matches!(
            cumulative_reward(&traj, &Schedule::zeros(0.1, 2), &p),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            cumulative_reward(&traj, &Schedule::zeros(0.2, 3), &p),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn schedule_rejects_negative_rates() {
        assert!(Schedule::new(0.1, vec![0.0, -1e-3]).is_err());
        assert!(Trajectory::new(0.1, vec![]).is_err());
        assert!(Trajectory::new(0.1, vec![f64::INFINITY]).is_err());
    }

    fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        len.prop_flat_map(|n| {
            (
                prop::collection::vec(-2.0..2.0f64, n),
                prop::collection::vec(0.0..3.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn undiscounted_matches_plain_sum((perf, mus) in series(1..60), beta in 0.01..5.0f64) {
            let dt = 0.05;
            let p = RewardParams::with_steps(beta, 1.0, perf.len(), dt).unwrap();
            let traj = Trajectory::new(dt, perf.clone()).unwrap();
            let sched = Schedule::new(dt, mus.clone()).unwrap();
            let r = cumulative_reward(&traj, &sched, &p).unwrap();
            let plain: f64 = perf.iter().zip(&mus).map(|(p, m)| dt * (p - beta * m * m)).sum();
            prop_assert!((r - plain).abs() <= 1e-12 * plain.abs().max(1.0));
        }

        #[test]
        fn additive_over_split((perf, mus) in series(2..60), beta in 0.01..5.0f64, cut in 1usize..59) {
            let cut = cut.min(perf.len() - 1);
            let dt = 0.02;
            let p = RewardParams::with_steps(beta, 1.0, perf.len(), dt).unwrap();
            let whole = cumulative_reward(
                &Trajectory::new(dt, perf.clone()).unwrap(),
                &Schedule::new(dt, mus.clone()).unwrap(),
                &p,
            ).unwrap();
            let head = cumulative_reward(
                &Trajectory::new(dt, perf[..cut].to_vec()).unwrap(),
                &Schedule::new(dt, mus[..cut].to_vec()).unwrap(),
                &p,
            ).unwrap();
            let tail = cumulative_reward(
                &Trajectory::new(dt, perf[cut..].to_vec()).unwrap(),
                &Schedule::new(dt, mus[cut..].to_vec()).unwrap(),
                &p,
            ).unwrap();
            prop_assert!((whole - head - tail).abs() <= 1e-12 * whole.abs().max(1.0));
        }

        #[test]
        fn raising_any_rate_lowers_reward(
            (perf, mus) in series(1..40),
            gamma in 0.05..1.0f64,
            idx in 0usize..40,
            bump in 1e-3..1.0f64,
        ) {
            let idx = idx % perf.len();
            let dt = 0.1;
            let p = RewardParams::with_steps(0.3, gamma, perf.len(), dt).unwrap();
            let traj = Trajectory::new(dt, perf).unwrap();
            let before = cumulative_reward(&traj, &Schedule::new(dt, mus.clone()).unwrap(), &p).unwrap();
            let mut raised = mus;
            raised[idx] += bump;
            let after = cumulative_reward(&traj, &Schedule::new(dt, raised).unwrap(), &p).unwrap();
            prop_assert!(after < before);
        }

        #[test]
        fn effort_is_negated_reward_of_null_performance((_, mus) in series(1..50), beta in 0.01..5.0f64) {
            let dt = 0.01;
            let p = RewardParams::with_steps(beta, 1.0, mus.len(), dt).unwrap();
            let sched = Schedule::new(dt, mus.clone()).unwrap();
            let traj = Trajectory::new(dt, vec![0.0; mus.len()]).unwrap();
            let r = cumulative_reward(&traj, &sched, &p).unwrap();
            let e = total_effort(&sched, &p);
            prop_assert!((e + r).abs() <= 1e-12 * e.max(1.0));
        }
    }
}
