//! Explicit-Euler gradient flow under a learning-rate schedule or an online
//! controller.
//!
//! Performance is the loss decrease relative to the initial weights,
//! `P(w) = L(w₀) − L(w)`, with `L(w₀)` evaluated once on the full dataset.
//! Each step records `P` at the current weights, then applies
//! `w ← w − dt·(μ + α)·∇L(w)` with `α` the cost-free base rate (zero unless
//! configured).

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, Weights};
use crate::reward::{RewardParams, Schedule, Trajectory};

/// Loss above which an episode is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BatchMode {
    FullBatch,
    /// Uniform sampling with replacement, `size` rows per step.
    Minibatch { size: usize, seed: u64 },
    /// `size / classes` rows per class per step, with replacement within a
    /// class. Classes are read from one-hot targets.
    ClassBalanced { size: usize, seed: u64 },
}

/// Which loss the recorded performance is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceProbe {
    /// The batch used for the update (noisy under minibatching).
    #[default]
    Batch,
    /// The full dataset, at the price of an extra forward pass per step.
    Full,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    batch_mode: BatchMode,
    class_rows: Vec<Vec<usize>>,
}

impl TaskData {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>, batch_mode: BatchMode) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Contract(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(Error::Contract("task data is empty".into()));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("task data must be finite".into()));
        }
        let mut data = Self {
            inputs,
            targets,
            batch_mode: BatchMode::FullBatch,
            class_rows: Vec::new(),
        };
        data.set_batch_mode(batch_mode)?;
        Ok(data)
    }

    pub fn set_batch_mode(&mut self, mode: BatchMode) -> Result<()> {
        match mode {
            BatchMode::FullBatch => {}
            BatchMode::Minibatch { size, .. } => {
                if size == 0 {
                    return Err(Error::Contract("minibatch size must be positive".into()));
                }
            }
            BatchMode::ClassBalanced { size, .. } => {
                let classes = self.targets.ncols();
                if size < classes || size % classes != 0 {
                    return Err(Error::Contract(format!(
                        "class-balanced batch of {size} cannot be split evenly over {classes} classes"
                    )));
                }
                let mut rows = vec![Vec::new(); classes];
                for (i, t) in self.targets.rows().into_iter().enumerate() {
                    let c = t
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                        .0;
                    rows[c].push(i);
                }
                if let Some(c) = rows.iter().position(|r| r.is_empty()) {
                    return Err(Error::Contract(format!("class {c} has no samples")));
                }
                self.class_rows = rows;
            }
        }
        self.batch_mode = mode;
        Ok(())
    }

    pub fn with_batch_mode(mut self, mode: BatchMode) -> Result<Self> {
        self.set_batch_mode(mode)?;
        Ok(self)
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn batch_mode(&self) -> BatchMode {
        self.batch_mode
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn full_batch(&self) -> Batch<'_> {
        Batch::new(self.inputs.view(), self.targets.view())
    }

    /// Row indices used at every step of an episode; `None` under full batch.
    pub fn batch_plan(&self, steps: usize) -> BatchPlan {
        match self.batch_mode {
            BatchMode::FullBatch => BatchPlan { rows: None },
            BatchMode::Minibatch { size, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = self.len();
                let rows = (0..steps)
                    .map(|_| (0..size).map(|_| rng.random_range(0..n)).collect())
                    .collect();
                BatchPlan { rows: Some(rows) }
            }
            BatchMode::ClassBalanced { size, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let per_class = size / self.class_rows.len();
                let rows = (0..steps)
                    .map(|_| {
                        self.class_rows
                            .iter()
                            .flat_map(|members| {
                                (0..per_class)
                                    .map(|_| members[rng.random_range(0..members.len())])
                                    .collect::<Vec<_>>()
                            })
                            .collect()
                    })
                    .collect();
                BatchPlan { rows: Some(rows) }
            }
        }
    }

    fn gather(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (
            self.inputs.select(Axis(0), rows),
            self.targets.select(Axis(0), rows),
        )
    }
}

/// Pre-drawn minibatch indices for one episode.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    rows: Option<Vec<Vec<usize>>>,
}

impl BatchPlan {
    pub fn is_full_batch(&self) -> bool {
        self.rows.is_none()
    }

    pub fn rows(&self, step: usize) -> Option<&[usize]> {
        self.rows.as_ref().map(|r| r[step].as_slice())
    }
}

/// What a controller sees before choosing the learning rate of a step.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub step: usize,
    pub time: f64,
    pub performance: f64,
    /// Squared norm of the performance gradient `‖dP/dw‖²` on the step batch.
    pub grad_sq: f64,
    /// Performance recorded so far, including the current step.
    pub history: &'a [f64],
}

/// A state-feedback learning-rate rule queried once per Euler step.
pub trait Controller {
    fn rate(&mut self, obs: &Observation) -> Result<f64>;
}

impl<F> Controller for F
where
    F: FnMut(&Observation) -> Result<f64>,
{
    fn rate(&mut self, obs: &Observation) -> Result<f64> {
        self(obs)
    }
}

/// Outcome of one learning episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub schedule: Schedule,
    pub final_weights: Weights,
    /// Performance at the weights after the last update, on the full dataset.
    pub final_performance: f64,
    /// `‖dP/dw‖²` at every step.
    pub grad_sq: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicsOptions {
    /// Cost-free base learning rate `α` added to the controlled rate.
    #[serde(default)]
    pub base_rate: f64,
    #[serde(default)]
    pub probe: PerformanceProbe,
}

/// Runs gradient-flow episodes of one model on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<'a> {
    spec: &'a ModelSpec,
    data: &'a TaskData,
    options: DynamicsOptions,
}

pub(crate) fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::Numerical { message, .. } => Error::Numerical { step, message },
        other => other,
    }
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a TaskData) -> Result<Self> {
        if data.inputs.ncols() != spec.input_dim() {
            return Err(Error::Contract(format!(
                "model expects {} inputs, data has {}",
                spec.input_dim(),
                data.inputs.ncols()
            )));
        }
        if data.targets.ncols() != spec.output_dim() {
            return Err(Error::Contract(format!(
                "model has {} outputs, data targets have {}",
                spec.output_dim(),
                data.targets.ncols()
            )));
        }
        Ok(Self {
            spec,
            data,
            options: DynamicsOptions::default(),
        })
    }

    pub fn with_options(mut self, options: DynamicsOptions) -> Result<Self> {
        if !(options.base_rate >= 0.0 && options.base_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "base rate must be finite and nonnegative, got {}",
                options.base_rate
            )));
        }
        self.options = options;
        Ok(self)
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn data(&self) -> &TaskData {
        self.data
    }

    pub fn options(&self) -> DynamicsOptions {
        self.options
    }

    /// Full-dataset loss that anchors performance at zero.
    pub fn reference_loss(&self, w0: &Weights) -> Result<f64> {
        model::loss(self.spec, w0.as_slice(), self.data.full_batch())
    }

    /// Replays a fixed schedule.
    pub fn simulate(&self, w0: &Weights, sched: &Schedule) -> Result<Episode> {
        let values = sched.values();
        let mut replay = |obs: &Observation| Ok(values[obs.step]);
        self.run(w0, sched.len(), sched.dt(), &mut replay)
    }

    /// Queries `controller` online at every step of the episode.
    pub fn run_closed_loop(
        &self,
        w0: &Weights,
        controller: &mut dyn Controller,
        params: &RewardParams,
    ) -> Result<Episode> {
        self.run(w0, params.steps(), params.dt(), controller)
    }

    fn run(
        &self,
        w0: &Weights,
        steps: usize,
        dt: f64,
        controller: &mut dyn Controller,
    ) -> Result<Episode> {
        if w0.len() != self.spec.param_count() {
            return Err(Error::Contract(format!(
                "model has {} parameters, initial weights have {}",
                self.spec.param_count(),
                w0.len()
            )));
        }
        let reference = self.reference_loss(w0).map_err(|e| at_step(e, 0))?;
        let plan = self.data.batch_plan(steps);
        let mut w = w0.as_slice().to_vec();
        let mut perf = Vec::with_capacity(steps);
        let mut rates = Vec::with_capacity(steps);
        let mut grad_sq = Vec::with_capacity(steps);
        for step in 0..steps {
            let (loss, grad) = self.step_loss_and_gradient(&plan, step, &w)?;
            let probe_loss = match (self.options.probe, plan.is_full_batch()) {
                (PerformanceProbe::Full, false) => {
                    model::loss(self.spec, &w, self.data.full_batch()).map_err(|e| at_step(e, step))?
                }
                _ => loss,
            };
            check_divergence(probe_loss.max(loss), step)?;
            perf.push(reference - probe_loss);
            let g2: f64 = grad.iter().map(|g| g * g).sum();
            grad_sq.push(g2);
            let mu = controller.rate(&Observation {
                step,
                time: step as f64 * dt,
                performance: reference - probe_loss,
                grad_sq: g2,
                history: &perf,
            })?;
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::Domain(format!(
                    "controller returned learning rate {mu} at step {step}"
                )));
            }
            rates.push(mu);
            let scale = dt * (mu + self.options.base_rate);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= scale * gi;
            }
        }
        let final_loss = model::loss(self.spec, &w, self.data.full_batch()).map_err(|e| at_step(e, steps))?;
        check_divergence(final_loss, steps)?;
        Ok(Episode {
            trajectory: Trajectory::new(dt, perf)?,
            schedule: Schedule::new(dt, rates)?,
            final_weights: Weights::new(self.spec, w)?,
            final_performance: reference - final_loss,
            grad_sq,
        })
    }

    /// Loss and gradient on the batch of `step`.
    pub(crate) fn step_loss_and_gradient(
        &self,
        plan: &BatchPlan,
        step: usize,
        w: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let out = match plan.rows(step) {
            None => model::loss_and_gradient(self.spec, w, self.data.full_batch()),
            Some(rows) => {
                let (x, y) = self.data.gather(rows);
                model::loss_and_gradient(self.spec, w, Batch::new(x.view(), y.view()))
            }
        };
        out.map_err(|e| at_step(e, step))
    }

    /// Loss, gradient and Hessian-vector product on the batch of `step`.
    pub(crate) fn step_derivatives(
        &self,
        plan: &BatchPlan,
        step: usize,
        w: &[f64],
        direction: &[f64],
    ) -> Result<model::Derivatives> {
        let out = match plan.rows(step) {
            None => model::derivatives(self.spec, w, self.data.full_batch(), Some(direction)),
            Some(rows) => {
                let (x, y) = self.data.gather(rows);
                model::derivatives(self.spec, w, Batch::new(x.view(), y.view()), Some(direction))
            }
        };
        out.map_err(|e| at_step(e, step))
    }
}

pub(crate) fn check_divergence(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Diverged {
            step,
            loss,
            last_valid_step: step.checked_sub(1),
        });
    }
    Ok(())
}

/// Replays `sched` from `w0`; returns the performance trajectory and final weights.
pub fn simulate_episode(
    spec: &ModelSpec,
    w0: &Weights,
    data: &TaskData,
    sched: &Schedule,
) -> Result<(Trajectory, Weights)> {
    let ep = Simulator::new(spec, data)?.simulate(w0, sched)?;
    Ok((ep.trajectory, ep.final_weights))
}

/// Drives an episode with an online controller; returns the realized
/// trajectory and schedule.
pub fn run_closed_loop_episode(
    spec: &ModelSpec,
    w0: &Weights,
    data: &TaskData,
    controller: &mut dyn Controller,
    params: &RewardParams,
) -> Result<(Trajectory, Schedule)> {
    let ep = Simulator::new(spec, data)?.run_closed_loop(w0, controller, params)?;
    Ok((ep.trajectory, ep.schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Four points whose second moment is exactly `σ²·I` in two dimensions.
    fn isotropic_square(sigma2: f64, w_star: [f64; 2]) -> TaskData {
        let a = sigma2.sqrt();
        let x = array![[a, a], [a, -a], [-a, a], [-a, -a]];
        let y = x.dot(&ndarray::arr1(&w_star)).insert_axis(Axis(1));
        TaskData::new(x, y, BatchMode::FullBatch).unwrap()
    }

    #[test]
    fn zero_schedule_leaves_everything_unchanged() {
        let spec = ModelSpec::linear_neuron(2);
        let data = isotropic_square(1.5, [0.3, -0.8]);
        let w0 = Weights::new(&spec, vec![1.0, 2.0]).unwrap();
        let (traj, w) = simulate_episode(&spec, &w0, &data, &Schedule::zeros(0.01, 50)).unwrap();
        assert!(traj.performance().iter().all(|&p| p == 0.0));
        assert_eq!(w, w0);
    }

    #[test]
    fn perceptron_follows_exponential_solution() {
        let sigma2 = 0.8;
        let w_star = [0.5, -1.0];
        let spec = ModelSpec::linear_neuron(2);
        let data = isotropic_square(sigma2, w_star);
        let w0 = Weights::new(&spec, vec![-0.5, 0.7]).unwrap();
        let dt = 0.01;
        let steps = 400;
        let sched = Schedule::new(dt, (0..steps).map(|i| 1.0 + (i as f64 * dt).sin()).collect()).unwrap();
        let ep = Simulator::new(&spec, &data).unwrap().simulate(&w0, &sched).unwrap();
        let d2: f64 = w0.as_slice().iter().zip(&w_star).map(|(a, b)| (a - b).powi(2)).sum();
        let initial_loss = 0.5 * sigma2 * d2;
        let mut integral = 0.0;
        let mut max_err: f64 = 0.0;
        for (i, &p) in ep.trajectory.performance().iter().enumerate() {
            let exact = initial_loss * (1.0 - (-2.0 * sigma2 * integral).exp());
            max_err = max_err.max((p - exact).abs());
            integral += dt * sched.values()[i];
        }
        assert!(max_err <= 5.0 * dt * initial_loss, "max error {max_err}");
        let decay = (-sigma2 * integral).exp();
        for (k, &wk) in ep.final_weights.as_slice().iter().enumerate() {
            let exact = w_star[k] + (w0.as_slice()[k] - w_star[k]) * decay;
            assert!((wk - exact).abs() < 5.0 * dt, "weight {k}: {wk} vs {exact}");
        }
    }

    #[test]
    fn euler_error_is_first_order() {
        let spec = ModelSpec::two_layer(2, 3, 1, crate::model::Activation::Tanh);
        let x = array![[0.5, -1.0], [1.2, 0.3], [-0.7, 0.9], [0.1, 0.1]];
        let y = array![[0.4], [-0.2], [0.9], [0.0]];
        let data = TaskData::new(x, y, BatchMode::FullBatch).unwrap();
        let w0 = Weights::new(&spec, (0..spec.param_count()).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect()).unwrap();
        let horizon = 2.0;
        let final_p = |dt: f64| {
            let steps = (horizon / dt).round() as usize;
            let sched = Schedule::constant(dt, steps, 1.5).unwrap();
            Simulator::new(&spec, &data).unwrap().simulate(&w0, &sched).unwrap().final_performance
        };
        let (p1, p2, p4) = (final_p(0.02), final_p(0.01), final_p(0.005));
        let limit = 2.0 * p4 - p2;
        let ratio = (p1 - limit) / (p2 - limit);
        assert!((ratio - 2.0).abs() < 0.2, "error ratio {ratio}");
    }

    #[test]
    fn minibatch_runs_are_reproducible() {
        let spec = ModelSpec::two_layer(2, 3, 1, crate::model::Activation::Softplus);
        let x = Array2::from_shape_fn((40, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y = Array2::from_shape_fn((40, 1), |(i, _)| (i % 5) as f64 / 4.0);
        let data = TaskData::new(x, y, BatchMode::Minibatch { size: 8, seed: 3 }).unwrap();
        let w0 = Weights::new(&spec, vec![0.1; spec.param_count()]).unwrap();
        let sched = Schedule::constant(0.01, 100, 2.0).unwrap();
        let sim = Simulator::new(&spec, &data).unwrap();
        let a = sim.simulate(&w0, &sched).unwrap();
        let b = sim.simulate(&w0, &sched).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.final_weights, b.final_weights);

        let full = sim
            .with_options(DynamicsOptions { base_rate: 0.0, probe: PerformanceProbe::Full })
            .unwrap()
            .simulate(&w0, &sched)
            .unwrap();
        assert_eq!(full.trajectory.performance()[0], 0.0);
    }

    #[test]
    fn class_balanced_batches_cover_every_class() {
        let x = Array2::from_shape_fn((9, 1), |(i, _)| i as f64);
        let y = Array2::from_shape_fn((9, 3), |(i, j)| if i % 3 == j { 1.0 } else { 0.0 });
        let data = TaskData::new(x, y, BatchMode::ClassBalanced { size: 6, seed: 1 }).unwrap();
        let plan = data.batch_plan(5);
        for s in 0..5 {
            let rows = plan.rows(s).unwrap();
            assert_eq!(rows.len(), 6);
            for c in 0..3 {
                assert_eq!(rows.iter().filter(|&&r| r % 3 == c).count(), 2);
            }
        }
        assert!(TaskData::new(
            Array2::zeros((3, 1)),
            Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 }),
            BatchMode::ClassBalanced { size: 4, seed: 0 }
        )
        .is_err());
    }

    #[test]
    fn divergence_is_reported_with_last_valid_step() {
        let spec = ModelSpec::linear_neuron(1);
        let data = TaskData::new(array![[10.0]], array![[1.0]], BatchMode::FullBatch).unwrap();
        let w0 = Weights::new(&spec, vec![0.0]).unwrap();
        let sched = Schedule::constant(1.0, 200, 1.0).unwrap();
        match simulate_episode(&spec, &w0, &data, &sched) {
            Err(Error::Diverged { step, last_valid_step, .. }) => {
                assert!(step > 0);
                assert_eq!(last_valid_step, Some(step - 1));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_controller_matches_zero_schedule() {
        let spec = ModelSpec::linear_neuron(2);
        let data = isotropic_square(1.0, [1.0, 1.0]);
        let w0 = Weights::zeros(&spec);
        let params = RewardParams::with_steps(1.0, 1.0, 30, 0.1).unwrap();
        let mut zero = |_: &Observation| Ok(0.0);
        let (traj, sched) = run_closed_loop_episode(&spec, &w0, &data, &mut zero, &params).unwrap();
        let (replayed, _) = simulate_episode(&spec, &w0, &data, &Schedule::zeros(0.1, 30)).unwrap();
        assert_eq!(traj, replayed);
        assert!(sched.values().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn negative_controller_output_is_rejected() {
        let spec = ModelSpec::linear_neuron(2);
        let data = isotropic_square(1.0, [1.0, 1.0]);
        let params = RewardParams::with_steps(1.0, 1.0, 3, 0.1).unwrap();
        let mut bad = |_: &Observation| Ok(-1.0);
        assert!(matches!(
            run_closed_loop_episode(&spec, &Weights::zeros(&spec), &data, &mut bad, &params),
            Err(Error::Domain(_))
        ));
    }
}
