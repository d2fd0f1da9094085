//! Final-performance estimation from episodic memory.
//!
//! Completed learning trajectories are stored in a [`MemoryStore`]. While a
//! new episode unfolds, its observed prefix is compared against the same
//! prefix of every stored trajectory with a recency-weighted Gaussian kernel
//! on whitened values, and the estimate `P̂(T|t)` is the kernel-weighted mean
//! of the stored final performances.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::NumericTable;
use crate::error::{Error, Result};
use crate::reward::Trajectory;

const STD_FLOOR: f64 = 1e-12;
const KERNEL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Recency decay `ρ` in (0, 1].
    pub rho: f64,
    /// Kernel width `σ_k`.
    pub sigma_k: f64,
    pub dt: f64,
    /// Maximum number of stored episodes (oldest evicted first).
    #[serde(default)]
    pub capacity: Option<usize>,
}

impl EstimatorConfig {
    pub fn new(rho: f64, sigma_k: f64, dt: f64) -> Result<Self> {
        let cfg = Self {
            rho,
            sigma_k,
            dt,
            capacity: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_capacity(mut self, capacity: usize) -> Result<Self> {
        self.capacity = Some(capacity);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Domain(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.sigma_k > 0.0 && self.sigma_k.is_finite()) {
            return Err(Error::Domain(format!("sigma_k must be > 0, got {}", self.sigma_k)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Domain(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.capacity == Some(0) {
            return Err(Error::Domain("memory capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Mean and floored population standard deviation.
fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Subtracts the mean and divides by the (floored) standard deviation.
pub fn whiten(traj: &Trajectory) -> Trajectory {
    let (mean, std) = moments(traj.performance());
    let values = traj.performance().iter().map(|p| (p - mean) / std).collect();
    Trajectory::new(traj.dt(), values).expect("whitening keeps values finite")
}

/// Recency-weighted Gaussian kernel between the first `upto_steps` entries
/// of two whitened trajectories. The most recent entry has weight 1 and an
/// entry `k` steps older has weight `ρ^(k·dt)`.
pub fn kernel_similarity(
    observed: &Trajectory,
    stored: &Trajectory,
    upto_steps: usize,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    if upto_steps == 0 {
        return Err(Error::Contract("kernel needs at least one step".into()));
    }
    if upto_steps > observed.len() || upto_steps > stored.len() {
        return Err(Error::Contract(format!(
            "kernel over {upto_steps} steps, trajectories have {} and {}",
            observed.len(),
            stored.len()
        )));
    }
    let o = &observed.performance()[..upto_steps];
    let h = &stored.performance()[..upto_steps];
    let dist = decayed_sq_distance(o.iter().zip(h).map(|(a, b)| a - b), upto_steps, cfg);
    Ok(kernel_from_distance(dist, upto_steps, cfg))
}

/// `Σ ρ^{dt·(n−1−i)}·diff_i²`, accumulated from the newest entry backwards.
fn decayed_sq_distance<I>(diffs: I, n: usize, cfg: &EstimatorConfig) -> f64
where
    I: DoubleEndedIterator<Item = f64>,
{
    let step_decay = cfg.rho.powf(cfg.dt);
    let mut weight = 1.0;
    let mut acc = 0.0;
    for d in diffs.rev().take(n) {
        acc += weight * d * d;
        weight *= step_decay;
    }
    acc
}

fn kernel_from_distance(dist: f64, n: usize, cfg: &EstimatorConfig) -> f64 {
    (-dist / (2.0 * n as f64 * cfg.sigma_k * cfg.sigma_k)).exp()
}

/// Ordered collection of completed trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    episodes: VecDeque<Trajectory>,
    config: EstimatorConfig,
}

impl MemoryStore {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            episodes: VecDeque::new(),
            config,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl ExactSizeIterator<Item = &Trajectory> {
        self.episodes.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Trajectory> {
        self.episodes.get(i)
    }

    /// Length shared by every stored trajectory, if any are stored.
    pub fn episode_len(&self) -> Option<usize> {
        self.episodes.front().map(Trajectory::len)
    }

    /// Appends a completed trajectory, evicting the oldest when over capacity.
    pub fn commit(&mut self, traj: Trajectory) -> Result<()> {
        if (traj.dt() - self.config.dt).abs() > 1e-12 * self.config.dt {
            return Err(Error::Contract(format!(
                "trajectory dt {} differs from memory dt {}",
                traj.dt(),
                self.config.dt
            )));
        }
        if let Some(n) = self.episode_len() {
            if traj.len() != n {
                return Err(Error::Contract(format!(
                    "trajectory has {} steps, stored episodes have {n}",
                    traj.len()
                )));
            }
        }
        self.episodes.push_back(traj);
        if let Some(cap) = self.config.capacity {
            while self.episodes.len() > cap {
                self.episodes.pop_front();
            }
        }
        Ok(())
    }

    /// A store holding only the episodes at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.config)?;
        for &i in indices {
            let t = self.episodes.get(i).ok_or_else(|| {
                Error::Contract(format!("episode {i} out of range ({} stored)", self.len()))
            })?;
            out.episodes.push_back(t.clone());
        }
        Ok(out)
    }

    pub fn to_table(&self) -> NumericTable {
        let cols = self.episode_len().unwrap_or(0);
        let mut table = NumericTable::new(cols);
        table.set("kind", "memory");
        table.set("dt", self.config.dt);
        table.set("rho", self.config.rho);
        table.set("sigma_k", self.config.sigma_k);
        if let Some(c) = self.config.capacity {
            table.set("capacity", c);
        }
        for t in &self.episodes {
            table.push_row(t.performance()).expect("uniform episode length");
        }
        table
    }

    pub fn from_table(table: &NumericTable) -> Result<Self> {
        if table.get("kind")? != "memory" {
            return Err(Error::Format {
                offset: 0,
                message: format!("table kind `{}` is not a memory store", table.get("kind")?),
            });
        }
        let mut config = EstimatorConfig::new(
            table.get_f64("rho")?,
            table.get_f64("sigma_k")?,
            table.get_f64("dt")?,
        )?;
        if table.metadata.contains_key("capacity") {
            config = config.with_capacity(table.get_f64("capacity")? as usize)?;
        }
        let mut store = Self::new(config)?;
        for r in 0..table.rows() {
            store.commit(Trajectory::new(config.dt, table.row(r).to_vec())?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&NumericTable::load(path)?)
    }
}

/// Functional form of [`MemoryStore::commit`].
pub fn commit_episode(mut store: MemoryStore, traj: Trajectory) -> Result<MemoryStore> {
    store.commit(traj)?;
    Ok(store)
}

/// Estimate of the final performance and the normalized weight of every
/// stored episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub weights: Vec<f64>,
}

/// `P̂(T|t) = Σ_h w_h·P_h(T)` with kernel weights over the first
/// `upto_steps` observed entries; uniform weights when `upto_steps = 0`.
pub fn estimate_final_performance(
    store: &MemoryStore,
    observed: &[f64],
    upto_steps: usize,
) -> Result<Estimate> {
    if store.is_empty() {
        return Err(Error::Estimator(
            "memory is empty; a prior estimate is required".into(),
        ));
    }
    let h = store.len();
    let uniform = || vec![1.0 / h as f64; h];
    let weights = if upto_steps == 0 {
        uniform()
    } else {
        if upto_steps > observed.len() {
            return Err(Error::Contract(format!(
                "asked for {upto_steps} steps, only {} observed",
                observed.len()
            )));
        }
        let stored_len = store.episode_len().unwrap();
        if upto_steps > stored_len {
            return Err(Error::Contract(format!(
                "asked for {upto_steps} steps, stored episodes have {stored_len}"
            )));
        }
        if observed[..upto_steps].iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("observed performance must be finite".into()));
        }
        let cfg = store.config();
        let obs = &observed[..upto_steps];
        let (om, os) = moments(obs);
        let kernels: Vec<f64> = store
            .episodes
            .iter()
            .map(|ep| {
                let past = &ep.performance()[..upto_steps];
                let (hm, hs) = moments(past);
                let diffs = obs
                    .iter()
                    .zip(past)
                    .map(|(o, p)| (o - om) / os - (p - hm) / hs);
                kernel_from_distance(decayed_sq_distance(diffs, upto_steps, cfg), upto_steps, cfg)
            })
            .collect();
        normalize(kernels)
    };
    let value = combine(&weights, store);
    Ok(Estimate { value, weights })
}

/// Decayed and plain running sums of one sequence, shifted by its first
/// value to limit cancellation.
#[derive(Debug, Clone, Copy, Default)]
struct RunningMoments {
    shift: f64,
    /// `Σ x`, `Σ x²` over the window.
    plain: (f64, f64),
    /// `Σ w·x`, `Σ w·x²` with the newest weight equal to one.
    decayed: (f64, f64),
}

impl RunningMoments {
    fn push(&mut self, raw: f64, n_before: usize, decay: f64) -> f64 {
        if n_before == 0 {
            self.shift = raw;
        }
        let x = raw - self.shift;
        self.plain.0 += x;
        self.plain.1 += x * x;
        self.decayed.0 = decay * self.decayed.0 + x;
        self.decayed.1 = decay * self.decayed.1 + x * x;
        x
    }

    /// Mean, floored standard deviation and `Σ w·(x − mean)²`.
    fn stats(&self, n: f64, weight_sum: f64) -> (f64, f64, f64) {
        let mean = self.plain.0 / n;
        let var = (self.plain.1 / n - mean * mean).max(0.0);
        let spread = self.decayed.1 - 2.0 * mean * self.decayed.0 + mean * mean * weight_sum;
        (mean, var.sqrt().max(STD_FLOOR), spread.max(0.0))
    }
}

/// Streaming version of [`estimate_final_performance`] for one episode.
///
/// Each pushed observation extends the compared window by one step; the cost
/// per push is proportional to the number of stored episodes.
#[derive(Debug, Clone)]
pub struct PrefixEstimator<'m> {
    store: &'m MemoryStore,
    decay: f64,
    steps: usize,
    weight_sum: f64,
    observed: RunningMoments,
    stored: Vec<RunningMoments>,
    /// `Σ w·x_o·x_h` per stored episode (shifted values).
    cross: Vec<f64>,
}

impl<'m> PrefixEstimator<'m> {
    pub fn new(store: &'m MemoryStore) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::Estimator(
                "memory is empty; a prior estimate is required".into(),
            ));
        }
        let h = store.len();
        Ok(Self {
            store,
            decay: store.config.rho.powf(store.config.dt),
            steps: 0,
            weight_sum: 0.0,
            observed: RunningMoments::default(),
            stored: vec![RunningMoments::default(); h],
            cross: vec![0.0; h],
        })
    }

    /// Number of observations consumed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Uniform-weight estimate, as with no observations.
    pub fn prior(&self) -> Estimate {
        let h = self.store.len();
        let weights = vec![1.0 / h as f64; h];
        let value = combine(&weights, self.store);
        Estimate { value, weights }
    }

    /// Adds the next observed performance and returns the estimate over all
    /// observations so far.
    pub fn push(&mut self, performance: f64) -> Result<Estimate> {
        if !performance.is_finite() {
            return Err(Error::Domain("observed performance must be finite".into()));
        }
        let len = self.store.episode_len().unwrap();
        if self.steps >= len {
            return Err(Error::Contract(format!(
                "observed {} steps, stored episodes have {len}",
                self.steps + 1
            )));
        }
        let i = self.steps;
        let d = self.decay;
        let xo = self.observed.push(performance, i, d);
        for ((m, c), ep) in self.stored.iter_mut().zip(&mut self.cross).zip(self.store.episodes.iter()) {
            let xh = m.push(ep.performance()[i], i, d);
            *c = d * *c + xo * xh;
        }
        self.weight_sum = d * self.weight_sum + 1.0;
        self.steps += 1;

        let n = self.steps as f64;
        let w = self.weight_sum;
        let (mo, so, qo) = self.observed.stats(n, w);
        let cfg = self.store.config;
        let kernels: Vec<f64> = self
            .stored
            .iter()
            .zip(&self.cross)
            .map(|(m, &c)| {
                let (mh, sh, qh) = m.stats(n, w);
                let x = c - mh * self.observed.decayed.0 - mo * m.decayed.0 + mo * mh * w;
                let dist = (qo / (so * so) + qh / (sh * sh) - 2.0 * x / (so * sh)).max(0.0);
                kernel_from_distance(dist, self.steps, &cfg)
            })
            .collect();
        let weights = normalize(kernels);
        let value = combine(&weights, self.store);
        Ok(Estimate { value, weights })
    }
}

fn normalize(kernels: Vec<f64>) -> Vec<f64> {
    let h = kernels.len();
    if kernels.iter().all(|&k| k < KERNEL_FLOOR) {
        vec![1.0 / h as f64; h]
    } else {
        let total: f64 = kernels.iter().sum();
        kernels.iter().map(|k| k / total).collect()
    }
}

fn combine(weights: &[f64], store: &MemoryStore) -> f64 {
    weights
        .iter()
        .zip(store.episodes.iter())
        .map(|(w, ep)| w * ep.last())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn traj(values: &[f64]) -> Trajectory {
        Trajectory::new(0.01, values.to_vec()).unwrap()
    }

    fn cfg(rho: f64, sigma_k: f64) -> EstimatorConfig {
        EstimatorConfig::new(rho, sigma_k, 0.01).unwrap()
    }

    #[test]
    fn whitening_examples() {
        assert!(whiten(&traj(&[0.3; 5])).performance().iter().all(|&v| v == 0.0));
        assert_eq!(whiten(&traj(&[0.0, 2.0])).performance(), &[-1.0, 1.0]);
        let t = traj(&[0.1, 0.5, 0.2, 0.9, 0.4]);
        let once = whiten(&t);
        let twice = whiten(&once);
        for (a, b) in once.performance().iter().zip(twice.performance()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn kernel_examples() {
        let c = cfg(1.0, 1.0);
        let a = traj(&[0.1, -0.4, 1.0]);
        assert_eq!(kernel_similarity(&a, &a, 3, &c).unwrap(), 1.0);
        let single = kernel_similarity(&traj(&[0.0]), &traj(&[1.0]), 1, &c).unwrap();
        assert_relative_eq!(single, (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(single, 0.606_530_659_712_633_4, epsilon = 1e-12);

        // ρ = 1: exponent is the mean squared distance over 2σ².
        let b = traj(&[0.0, 0.0, 0.0]);
        let c2 = cfg(1.0, 0.5);
        let msd: f64 = (0.01 + 0.16 + 1.0) / 3.0;
        assert_relative_eq!(
            kernel_similarity(&a, &b, 3, &c2).unwrap(),
            (-msd / (2.0 * 0.25)).exp(),
            epsilon = 1e-15
        );
        assert!(kernel_similarity(&a, &b, 4, &c).is_err());
        assert!(kernel_similarity(&a, &b, 0, &c).is_err());
    }

    #[test]
    fn recency_weighting() {
        let c = EstimatorConfig::new(0.5, 1.0, 1.0).unwrap();
        let o = Trajectory::new(1.0, vec![1.0, 1.0]).unwrap();
        let h = Trajectory::new(1.0, vec![0.0, 0.0]).unwrap();
        // weights 0.5 (older) and 1 (newest), normalized by 2·N·σ² = 4
        assert_relative_eq!(
            kernel_similarity(&o, &h, 2, &c).unwrap(),
            (-(0.5f64 + 1.0) / 4.0).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn estimator_examples() {
        let mut store = MemoryStore::new(cfg(0.7, 0.1)).unwrap();
        assert!(matches!(
            estimate_final_performance(&store, &[0.0], 1),
            Err(Error::Estimator(_))
        ));
        store.commit(traj(&[0.0, 0.4, 0.7])).unwrap();
        let e = estimate_final_performance(&store, &[0.0, 0.1], 2).unwrap();
        assert_eq!(e.value, 0.7);
        assert_eq!(e.weights, vec![1.0]);

        let mut store = MemoryStore::new(cfg(0.7, 0.1)).unwrap();
        for f in [1.0, 2.0, 3.0] {
            store.commit(traj(&[0.0, 0.5 * f, f])).unwrap();
        }
        let e = estimate_final_performance(&store, &[], 0).unwrap();
        assert_relative_eq!(e.value, 2.0, epsilon = 1e-15);
        assert!(e.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn sharp_kernel_selects_matching_memory() {
        let mut store = MemoryStore::new(cfg(0.7, 1e-3)).unwrap();
        let shapes: [&[f64]; 3] = [
            &[0.0, 0.1, 0.15, 0.17, 0.2],
            &[0.0, 0.02, 0.1, 0.3, 0.5],
            &[0.0, 0.3, 0.32, 0.33, 0.9],
        ];
        for s in shapes {
            store.commit(traj(s)).unwrap();
        }
        let e = estimate_final_performance(&store, &shapes[1][..3], 3).unwrap();
        assert!((e.weights[1] - 1.0).abs() < 1e-12, "{:?}", e.weights);
        assert!((e.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fused_path_matches_whiten_then_kernel() {
        let c = cfg(0.7, 0.3);
        let mut store = MemoryStore::new(c).unwrap();
        let eps: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..12).map(|i| ((i * (k + 2)) as f64 * 0.37).sin() + 0.1 * i as f64).collect())
            .collect();
        for e in &eps {
            store.commit(traj(e)).unwrap();
        }
        let obs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.5).cos()).collect();
        let upto = 7;
        let est = estimate_final_performance(&store, &obs, upto).unwrap();
        let wo = whiten(&traj(&obs[..upto]));
        let ks: Vec<f64> = eps
            .iter()
            .map(|e| kernel_similarity(&wo, &whiten(&traj(&e[..upto])), upto, &c).unwrap())
            .collect();
        let total: f64 = ks.iter().sum();
        for (w, k) in est.weights.iter().zip(&ks) {
            assert!((w - k / total).abs() < 1e-12);
        }
    }

    #[test]
    fn underflowing_kernels_fall_back_to_uniform() {
        let mut store = MemoryStore::new(cfg(1.0, 1e-8)).unwrap();
        store.commit(traj(&[0.0, 1.0, 2.0])).unwrap();
        store.commit(traj(&[0.0, 1.0, 4.0])).unwrap();
        let e = estimate_final_performance(&store, &[0.0, 5.0, 5.0], 3).unwrap();
        assert_eq!(e.weights, vec![0.5, 0.5]);
        assert_eq!(e.value, 3.0);
    }

    #[test]
    fn commit_rules() {
        let mut store = MemoryStore::new(cfg(0.7, 0.1).with_capacity(2).unwrap()).unwrap();
        let a = traj(&[0.0, 0.1]);
        store = commit_episode(store, a.clone()).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.get(0).unwrap(), &a);
        store.commit(traj(&[0.0, 0.2])).unwrap();
        store.commit(traj(&[0.0, 0.3])).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(0).unwrap().last(), 0.2);
        assert!(matches!(store.commit(traj(&[0.0, 0.1, 0.2])), Err(Error::Contract(_))));
        assert!(store.commit(Trajectory::new(0.02, vec![0.0, 0.1]).unwrap()).is_err());
    }

    #[test]
    fn store_round_trips_through_container() {
        let mut store = MemoryStore::new(cfg(0.7, 0.1).with_capacity(5).unwrap()).unwrap();
        store.commit(traj(&[0.0, 0.123_456_789_012_345_67, 1.0 / 3.0])).unwrap();
        store.commit(traj(&[0.0, -2.5e-17, 7.0])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.txt");
        store.save(&path).unwrap();
        assert_eq!(MemoryStore::load(&path).unwrap(), store);
    }

    proptest! {
        #[test]
        fn streaming_matches_direct(
            eps in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 12), 1..6),
            obs in prop::collection::vec(-1.0..1.0f64, 12),
            sigma_k in 0.2..2.0f64,
            rho in 0.05..1.0f64,
        ) {
            let mut store = MemoryStore::new(EstimatorConfig::new(rho, sigma_k, 0.1).unwrap()).unwrap();
            for e in &eps {
                store.commit(Trajectory::new(0.1, e.clone()).unwrap()).unwrap();
            }
            let mut stream = PrefixEstimator::new(&store).unwrap();
            prop_assert_eq!(stream.prior(), estimate_final_performance(&store, &obs, 0).unwrap());
            for n in 1..=12 {
                let s = stream.push(obs[n - 1]).unwrap();
                let d = estimate_final_performance(&store, &obs, n).unwrap();
                prop_assert!((s.value - d.value).abs() <= 1e-9, "n={} {} vs {}", n, s.value, d.value);
                for (a, b) in s.weights.iter().zip(&d.weights) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
            }
            prop_assert!(stream.push(0.0).is_err());
        }

        #[test]
        fn weights_form_a_simplex_and_bound_the_estimate(
            finals in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 8), 1..8),
            obs in prop::collection::vec(-1.0..1.0f64, 8),
            upto in 0usize..9,
            sigma_k in 0.01..2.0f64,
            rho in 0.05..1.0f64,
        ) {
            let mut store = MemoryStore::new(EstimatorConfig::new(rho, sigma_k, 0.1).unwrap()).unwrap();
            for f in &finals {
                store.commit(Trajectory::new(0.1, f.clone()).unwrap()).unwrap();
            }
            let e = estimate_final_performance(&store, &obs, upto).unwrap();
            let total: f64 = e.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(e.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let lo = finals.iter().map(|f| f[7]).fold(f64::INFINITY, f64::min);
            let hi = finals.iter().map(|f| f[7]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e.value >= lo - 1e-12 && e.value <= hi + 1e-12);
        }

        #[test]
        fn weights_invariant_under_affine_rescaling(
            finals in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 2..6),
            obs in prop::collection::vec(-1.0..1.0f64, 6),
            scale in 0.1..10.0f64,
            shift in -5.0..5.0f64,
        ) {
            let mut store = MemoryStore::new(EstimatorConfig::new(0.7, 0.5, 0.1).unwrap()).unwrap();
            for f in &finals {
                store.commit(Trajectory::new(0.1, f.clone()).unwrap()).unwrap();
            }
            let moved: Vec<f64> = obs.iter().map(|v| scale * v + shift).collect();
            let a = estimate_final_performance(&store, &obs, 6).unwrap();
            let b = estimate_final_performance(&store, &moved, 6).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}
