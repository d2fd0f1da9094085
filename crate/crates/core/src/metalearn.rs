//! Sequential learning episodes whose final performance is predicted from
//! episodic memory and fed to the base-rate closed-loop controller.

use serde::{Deserialize, Serialize};

use crate::controllers::{mu_closed_loop, ClosedLoopConfig};
use crate::dynamics::{DynamicsOptions, Observation, PerformanceProbe, Simulator};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, Estimate, MemoryStore, PrefixEstimator};
use crate::reward::{RewardParams, Trajectory};
use crate::tasks::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLearnConfig {
    pub episodes: usize,
    /// Cost-free base rate `α`.
    pub alpha: f64,
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub probe: PerformanceProbe,
}

/// Checks an estimate against the simplex and convex-hull invariants.
fn estimate_is_valid(est: &Estimate, lo: f64, hi: f64) -> bool {
    let total: f64 = est.weights.iter().sum();
    (total - 1.0).abs() <= 1e-12
        && est.weights.iter().all(|&w| (0.0..=1.0).contains(&w))
        && est.value >= lo - 1e-12
        && est.value <= hi + 1e-12
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    /// Controlled rate `μ` per step (without `α`).
    pub rates: Vec<f64>,
    /// `P̂(T|t)` per step; empty for the bootstrap episode.
    pub estimates: Vec<f64>,
    /// Memory size when the episode ran.
    pub memory_size: usize,
}

impl EpisodeRecord {
    pub fn final_performance(&self) -> f64 {
        self.trajectory.last()
    }
}

#[derive(Debug, Clone)]
pub struct MetaLearnRun {
    pub episodes: Vec<EpisodeRecord>,
    pub memory: MemoryStore,
    /// Estimator calls that broke the simplex or convex-combination bound.
    pub invariant_violations: usize,
    pub estimator_calls: usize,
}

/// Runs `cfg.episodes` episodes in order. Episode `j` trains `make_task(j)`.
/// The first episode, with nothing in memory, runs on the base rate alone.
pub fn run_metalearning<F>(cfg: &MetaLearnConfig, params: &RewardParams, mut make_task: F) -> Result<MetaLearnRun>
where
    F: FnMut(usize) -> Result<Task>,
{
    if cfg.episodes == 0 {
        return Err(Error::Domain("at least one episode is required".into()));
    }
    if (cfg.estimator.dt - params.dt()).abs() > 1e-12 * params.dt() {
        return Err(Error::Contract(format!(
            "estimator dt {} differs from episode dt {}",
            cfg.estimator.dt,
            params.dt()
        )));
    }
    let mut memory = MemoryStore::new(cfg.estimator)?;
    let mut records = Vec::with_capacity(cfg.episodes);
    let mut violations = 0;
    let mut calls = 0;
    let options = DynamicsOptions {
        base_rate: cfg.alpha,
        probe: cfg.probe,
    };

    for j in 0..cfg.episodes {
        let task = make_task(j)?;
        let sim = Simulator::new(&task.spec, &task.data)?.with_options(options)?;
        let memory_size = memory.len();
        let mut estimates = Vec::with_capacity(params.steps());
        let episode = if memory.is_empty() {
            sim.run_closed_loop(&task.w0, &mut |_: &Observation| Ok(0.0), params)?
        } else {
            let finals: Vec<f64> = memory.episodes().map(Trajectory::last).collect();
            let lo = finals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut stream = PrefixEstimator::new(&memory)?;
            let mut controller = |obs: &Observation| {
                let est = stream.push(obs.performance)?;
                calls += 1;
                if !estimate_is_valid(&est, lo, hi) {
                    violations += 1;
                }
                estimates.push(est.value);
                let cl = ClosedLoopConfig::new(params.beta(), est.value)?.with_alpha(cfg.alpha)?;
                mu_closed_loop(obs.performance, &cl)
            };
            sim.run_closed_loop(&task.w0, &mut controller, params)?
        };
        memory.commit(episode.trajectory.clone())?;
        records.push(EpisodeRecord {
            trajectory: episode.trajectory,
            rates: episode.schedule.into_values(),
            estimates,
            memory_size,
        });
    }
    Ok(MetaLearnRun {
        episodes: records,
        memory,
        invariant_violations: violations,
        estimator_calls: calls,
    })
}

/// The `memory_size` episodes preceding episode `j`, wrapping around to the
/// end of the run for early episodes.
fn cyclic_memory(
    trajectories: &[Trajectory],
    estimator: EstimatorConfig,
    memory_size: usize,
    j: usize,
) -> Result<MemoryStore> {
    let n = trajectories.len();
    if memory_size == 0 || memory_size >= n {
        return Err(Error::Contract(format!(
            "memory size must lie in 1..{n}, got {memory_size}"
        )));
    }
    let mut store = MemoryStore::new(EstimatorConfig {
        capacity: None,
        ..estimator
    })?;
    for k in (1..=memory_size).rev() {
        store.commit(trajectories[(j + n - k) % n].clone())?;
    }
    Ok(store)
}

/// Offline estimation error `P̂(T|t) − P(T)` of every episode after
/// `upto_steps` observations, using the `memory_size` episodes that precede
/// it (wrapping around to the end of the run for early episodes).
pub fn memory_size_errors(
    trajectories: &[Trajectory],
    estimator: EstimatorConfig,
    memory_size: usize,
    upto_steps: usize,
) -> Result<Vec<f64>> {
    (0..trajectories.len())
        .map(|j| {
            let store = cyclic_memory(trajectories, estimator, memory_size, j)?;
            let target = &trajectories[j];
            let est = crate::estimator::estimate_final_performance(&store, target.performance(), upto_steps)?;
            Ok(est.value - target.last())
        })
        .collect()
}

/// Error traces for the same protocol as [`memory_size_errors`]: entry
/// `[j][i]` is episode `j`'s error after `i + 1` observations.
pub fn memory_size_error_traces(
    trajectories: &[Trajectory],
    estimator: EstimatorConfig,
    memory_size: usize,
) -> Result<Vec<Vec<f64>>> {
    (0..trajectories.len())
        .map(|j| {
            let store = cyclic_memory(trajectories, estimator, memory_size, j)?;
            let target = &trajectories[j];
            let mut stream = PrefixEstimator::new(&store)?;
            target
                .performance()
                .iter()
                .map(|&p| Ok(stream.push(p)?.value - target.last()))
                .collect()
        })
        .collect()
}

/// Centered moving average over `window` points (rounded up to odd),
/// averaging over the available points near the ends.
pub fn centered_moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn interquartile_range(values: &[f64]) -> f64 {
    percentile(values, 75.0) - percentile(values, 25.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::BatchMode;
    use crate::model::Activation;
    use crate::tasks::make_teacher_student;

    fn small_run(episodes: usize) -> MetaLearnRun {
        let params = RewardParams::with_steps(0.01, 1.0, 60, 0.01).unwrap();
        let cfg = MetaLearnConfig {
            episodes,
            alpha: 1.0,
            estimator: EstimatorConfig::new(0.7, 0.1, 0.01).unwrap(),
            probe: PerformanceProbe::Batch,
        };
        run_metalearning(&cfg, &params, |j| {
            let mut t = make_teacher_student(3, 6, 6, 2, Activation::Softplus, 64, 100 + j as u64, Some(0.01))?;
            t.data.set_batch_mode(BatchMode::Minibatch { size: 8, seed: j as u64 })?;
            Ok(t)
        })
        .unwrap()
    }

    #[test]
    fn bootstrap_then_estimated_episodes() {
        let run = small_run(4);
        assert_eq!(run.episodes.len(), 4);
        assert!(run.episodes[0].rates.iter().all(|&m| m == 0.0));
        assert!(run.episodes[0].estimates.is_empty());
        for (j, ep) in run.episodes.iter().enumerate().skip(1) {
            assert_eq!(ep.memory_size, j);
            assert_eq!(ep.estimates.len(), 60);
        }
        assert_eq!(run.memory.len(), 4);
        assert_eq!(run.invariant_violations, 0);
        assert_eq!(run.estimator_calls, 3 * 60);
    }

    #[test]
    fn deterministic_replay() {
        let a = small_run(3);
        let b = small_run(3);
        for (x, y) in a.episodes.iter().zip(&b.episodes) {
            assert_eq!(x.estimates, y.estimates);
            assert_eq!(x.trajectory, y.trajectory);
        }
    }

    #[test]
    fn cyclic_memory_errors() {
        let trajs: Vec<Trajectory> = (0..4)
            .map(|k| Trajectory::new(0.1, vec![0.0, 0.1 * k as f64, 0.2 * k as f64]).unwrap())
            .collect();
        let est = EstimatorConfig::new(0.7, 0.1, 0.1).unwrap();
        let errs = memory_size_errors(&trajs, est, 1, 0).unwrap();
        // with one remembered episode the estimate is that episode's final value
        assert_eq!(errs.len(), 4);
        assert!((errs[0] - (0.6 - 0.0)).abs() < 1e-12);
        assert!((errs[2] - (0.2 - 0.4)).abs() < 1e-12);
        assert!(memory_size_errors(&trajs, est, 4, 0).is_err());
    }

    #[test]
    fn traces_agree_with_direct_errors() {
        let run = small_run(5);
        let trajs: Vec<Trajectory> = run.episodes.iter().map(|e| e.trajectory.clone()).collect();
        let est = *run.memory.config();
        let traces = memory_size_error_traces(&trajs, est, 2).unwrap();
        for upto in [1, 30, 60] {
            let direct = memory_size_errors(&trajs, est, 2, upto).unwrap();
            for (t, d) in traces.iter().zip(&direct) {
                assert!((t[upto - 1] - d).abs() < 1e-9, "{upto}: {} vs {d}", t[upto - 1]);
            }
        }
    }

    #[test]
    fn moving_average() {
        let v = [1.0, 2.0, 3.0, 10.0, 5.0];
        assert_eq!(centered_moving_average(&v, 3), vec![1.5, 2.0, 5.0, 6.0, 7.5]);
        assert_eq!(centered_moving_average(&v, 1), v.to_vec());
    }

    #[test]
    fn percentiles() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 25.0), 2.0);
        assert_eq!(interquartile_range(&v), 2.0);
        assert_eq!(percentile(&[1.0, 2.0], 50.0), 1.5);
    }
}
