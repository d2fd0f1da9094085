//! Config-driven experiments: a TOML file describes the task, reward,
//! controller and optional sweep grid; the runners write CSV artifacts.
//!
//! # CSV schemas
//!
//! Floats are written in scientific notation with 17 significant digits.
//!
//! | file | columns |
//! |------|---------|
//! | `schedule.csv` | `step,t,mu` |
//! | `trajectory.csv` | `step,t,performance,reward_rate,cumulative_reward` |
//! | `summary.csv` | `total_reward,total_effort,final_performance,mu0,peak_mu,final_estimate` |
//! | `meta_diagnostics.csv` | `iteration,objective,step_size,grad_norm` |
//! | `calibration.csv` | `evaluation,final_estimate,reward` |
//! | `sweep.csv` | `point,<axis names>,status,total_reward,total_effort,final_performance,mu0,peak_mu,final_estimate,error` |
//! | `episodes.csv` | `episode,memory_size,final_performance,total_reward,total_effort` |
//! | `traces.csv` | `episode,step,t,performance,mu,estimate` |
//! | `scatter.csv` | `episode,fraction,estimate,final_performance` |
//! | `estimation_errors.csv` | `memory_size,fraction,episode,error` |
//! | `percentiles.csv` | `memory_size,fraction,p10,p25,p50,p75,p90,iqr` |
//! | `percentile_traces.csv` | `memory_size,step,t,p10,p25,p50,p75,p90,p10_smoothed,…,p90_smoothed` |
//!
//! The `_smoothed` columns of `percentile_traces.csv` are centered moving
//! averages over 5% of the episode steps; the raw columns are unsmoothed.
//! `final_estimate` is the `P̂(T)` handed to a closed-loop controller and is
//! left empty for other controllers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::controllers::{
    make_profile, solve_theta, ClosedLoop, ClosedLoopConfig, DiscountedApprox, OpenLoop, ProfileKind,
};
use crate::dynamics::{BatchMode, DynamicsOptions, Episode, Simulator, TaskData};
use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::metalearn::{
    centered_moving_average, interquartile_range, memory_size_error_traces, memory_size_errors, percentile,
    run_metalearning, MetaLearnConfig,
};
use crate::metaopt::{
    calibrate_final_performance, meta_optimize, self_consistent_final_performance, Calibration, MetaOptConfig,
    MetaOptResult,
};
use crate::model::Activation;
use crate::reward::{cumulative_reward_series, reward_rates, total_effort, RewardParams, Schedule};
use crate::tasks::{
    load_mnist, load_mnist_cached, make_linear_regression, make_teacher_student, make_two_gaussian, mnist_model,
    MnistSubset, Task,
};

/// Tolerance and evaluation budget of the self-consistent `P̂(T)` solve.
const SELF_CONSISTENT_TOL: f64 = 1e-6;
const SELF_CONSISTENT_EVALS: usize = 60;

/// Seed offset separating meta-learning task draws from the batch streams.
const EPISODE_TASK_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    TeacherStudent {
        input_dim: usize,
        teacher_hidden: usize,
        student_hidden: usize,
        output_dim: usize,
        activation: Activation,
        n_samples: usize,
        /// Fixed student weight std; Xavier-normal when absent.
        #[serde(default)]
        student_init_std: Option<f64>,
    },
    TwoGaussian {
        d_sep: f64,
        variance: f64,
        n_samples: usize,
    },
    LinearRegression {
        dim: usize,
        d_init: f64,
        sigma2: f64,
        n_samples: usize,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        hidden: usize,
        #[serde(default)]
        per_class: Option<usize>,
        #[serde(default)]
        classes: Vec<u8>,
        /// Directory for the decoded dataset cache.
        #[serde(default)]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchConfig {
    #[default]
    FullBatch,
    Minibatch {
        size: usize,
    },
    ClassBalanced {
        size: usize,
    },
}

impl BatchConfig {
    fn mode(self, seed: u64) -> BatchMode {
        match self {
            BatchConfig::FullBatch => BatchMode::FullBatch,
            BatchConfig::Minibatch { size } => BatchMode::Minibatch { size, seed },
            BatchConfig::ClassBalanced { size } => BatchMode::ClassBalanced { size, seed },
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerConfig {
    /// Square-root gap rule. `P̂(T)` is `final_performance` when given,
    /// otherwise the calibrated value when `calibrate` is set, otherwise the
    /// self-consistent value; it is then multiplied by `ratio`.
    ClosedLoop {
        #[serde(default)]
        final_performance: Option<f64>,
        #[serde(default)]
        calibrate: bool,
        #[serde(default = "one")]
        ratio: f64,
    },
    /// Analytic perceptron schedule; linear-regression tasks only.
    OpenLoop,
    DiscountedApprox,
    /// Fixed-shape baseline. The peak is `scale`, or `peak_ratio` times the
    /// peak of the self-consistent closed-loop schedule, which also supplies
    /// the learn-then-rest shape.
    Profile {
        kind: ProfileKind,
        #[serde(default)]
        scale: Option<f64>,
        #[serde(default)]
        peak_ratio: Option<f64>,
    },
    MetaOpt {
        #[serde(default)]
        optimizer: MetaOptConfig,
        /// Flat initial schedule value.
        #[serde(default)]
        init_rate: Option<f64>,
    },
}

fn default_memory_sizes() -> Vec<usize> {
    vec![5, 25, 100]
}

fn default_fractions() -> Vec<f64> {
    vec![0.5]
}

fn default_trace_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaLearnSection {
    pub episodes: usize,
    #[serde(default = "default_memory_sizes")]
    pub memory_sizes: Vec<usize>,
    /// Fractions of the horizon at which offline estimation errors are taken.
    #[serde(default = "default_fractions")]
    pub eval_fractions: Vec<f64>,
    /// Keep every n-th step in `traces.csv`.
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
}

fn default_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    pub lower: f64,
    pub upper: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path of a scalar field, e.g. `reward.beta`.
    pub name: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub reward: RewardParams,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub dynamics: DynamicsOptions,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub metalearn: Option<MetaLearnSection>,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
    #[serde(default)]
    pub calibrate: Option<CalibrateSection>,
    #[serde(skip)]
    raw: toml::Table,
    #[serde(skip)]
    base_dir: PathBuf,
}

/// Built-in experiment files, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("fig2a", include_str!("../presets/fig2a.toml")),
    ("fig2c", include_str!("../presets/fig2c.toml")),
    ("fig2efgh", include_str!("../presets/fig2efgh.toml")),
    ("fig2h", include_str!("../presets/fig2h.toml")),
    ("fig3", include_str!("../presets/fig3.toml")),
    ("fig4a", include_str!("../presets/fig4a.toml")),
    ("fig4b", include_str!("../presets/fig4b.toml")),
    ("fig4c", include_str!("../presets/fig4c.toml")),
    ("fig4d", include_str!("../presets/fig4d.toml")),
    ("fig4e", include_str!("../presets/fig4e.toml")),
    ("fig4f", include_str!("../presets/fig4f.toml")),
    ("fig5", include_str!("../presets/fig5.toml")),
];

/// Presets refer to data files relative to the workspace root.
fn preset_base_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    /// Parses and validates a config; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(config_error)?;
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(config_error)?;
        cfg.raw = raw;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset '{name}' (available: {})", names.join(", ")))
        })?;
        Self::from_toml_str(text, &preset_base_dir())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// The configured output directory, resolved.
    pub fn output_path(&self) -> Option<PathBuf> {
        self.output_dir.as_deref().map(|p| self.resolve(p))
    }

    /// A copy with the scalar at `path` replaced by `value`, revalidated.
    pub fn with_override(&self, path: &str, value: toml::Value) -> Result<Self> {
        let mut raw = self.raw.clone();
        set_scalar(&mut raw, path, value)?;
        let text = toml::to_string(&raw).map_err(config_error)?;
        Self::from_toml_str(&text, &self.base_dir)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.raw.insert("seed".into(), toml::Value::Integer(seed as i64));
        self
    }

    /// Grid points of the sweep, in row-major order over the axes.
    pub fn sweep_points(&self) -> Result<Vec<(Vec<toml::Value>, ExperimentConfig)>> {
        let mut base = self.clone();
        base.raw.remove("sweep");
        base.sweep.clear();
        let mut points = vec![(Vec::new(), base)];
        for axis in &self.sweep {
            let mut next = Vec::with_capacity(points.len() * axis.values.len());
            for (values, cfg) in &points {
                for v in &axis.values {
                    let mut vs: Vec<toml::Value> = values.clone();
                    vs.push(v.clone());
                    let point = cfg.with_override(&axis.name, v.clone()).map_err(|e| match e {
                        Error::Config(m) => Error::Config(format!("sweep {} = {v}: {m}", axis.name)),
                        other => other,
                    })?;
                    next.push((vs, point));
                }
            }
            points = next;
        }
        Ok(points)
    }

    fn validate(&self) -> Result<()> {
        match (&self.controller, &self.task) {
            (ControllerConfig::OpenLoop, TaskConfig::LinearRegression { .. }) => {}
            (ControllerConfig::OpenLoop, _) => {
                return Err(Error::Config("the open_loop controller requires a linear_regression task".into()))
            }
            (ControllerConfig::Profile { scale: Some(_), peak_ratio: Some(_), .. }, _) => {
                return Err(Error::Config("profile takes either scale or peak_ratio, not both".into()))
            }
            (ControllerConfig::ClosedLoop { ratio, final_performance, .. }, _) => {
                if !(*ratio >= 0.0 && ratio.is_finite()) {
                    return Err(Error::Config(format!("controller.ratio must be >= 0, got {ratio}")));
                }
                if let Some(p) = final_performance {
                    if !(*p >= 0.0 && p.is_finite()) {
                        return Err(Error::Config(format!("controller.final_performance must be >= 0, got {p}")));
                    }
                }
            }
            (ControllerConfig::MetaOpt { optimizer, .. }, _) => optimizer.validate()?,
            _ => {}
        }
        if let Some(est) = &self.estimator {
            est.validate()?;
            if (est.dt - self.reward.dt()).abs() > 1e-12 * self.reward.dt() {
                return Err(Error::Config(format!(
                    "estimator.dt {} differs from reward.dt {}",
                    est.dt,
                    self.reward.dt()
                )));
            }
        }
        if let Some(ml) = &self.metalearn {
            if self.estimator.is_none() {
                return Err(Error::Config("[metalearn] needs an [estimator] section".into()));
            }
            if ml.episodes == 0 || ml.trace_stride == 0 {
                return Err(Error::Config("metalearn episodes and trace_stride must be positive".into()));
            }
            if let Some(f) = ml.eval_fractions.iter().find(|f| !(**f >= 0.0 && **f < 1.0)) {
                return Err(Error::Config(format!("eval fraction {f} must lie in [0, 1)")));
            }
        }
        if let Some(c) = &self.calibrate {
            if !(c.lower >= 0.0 && c.lower <= c.upper && c.upper.is_finite() && c.tol > 0.0) {
                return Err(Error::Config(format!(
                    "calibration interval [{}, {}] with tol {} is invalid",
                    c.lower, c.upper, c.tol
                )));
            }
        }
        for axis in &self.sweep {
            lookup_scalar(&self.raw, &axis.name)?;
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep {} has no values", axis.name)));
            }
        }
        Ok(())
    }
}

fn lookup_scalar<'t>(table: &'t toml::Table, path: &str) -> Result<&'t toml::Value> {
    let missing = || Error::Config(format!("sweep name '{path}' does not name a scalar field of the config"));
    let mut parts = path.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        let value = current.get(part).ok_or_else(missing)?;
        if parts.peek().is_none() {
            return match value {
                toml::Value::Table(_) | toml::Value::Array(_) => Err(missing()),
                v => Ok(v),
            };
        }
        current = value.as_table().ok_or_else(missing)?;
    }
    Err(missing())
}

fn set_scalar(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    lookup_scalar(table, path)?;
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().unwrap();
    let mut current = table;
    for part in parts {
        current = current.get_mut(part).and_then(toml::Value::as_table_mut).unwrap();
    }
    current.insert(last.to_string(), value);
    Ok(())
}

/// A task plus the analytic description when the task admits one.
struct BuiltTask {
    task: Task,
    linear: Option<(f64, f64)>,
}

/// Builds task instances; MNIST data is decoded once and shared.
struct TaskFactory<'c> {
    cfg: &'c ExperimentConfig,
    mnist: Option<TaskData>,
}

impl<'c> TaskFactory<'c> {
    fn new(cfg: &'c ExperimentConfig) -> Result<Self> {
        let mnist = match &cfg.task {
            TaskConfig::Mnist {
                images,
                labels,
                per_class,
                classes,
                cache_dir,
                ..
            } => {
                let subset = MnistSubset {
                    classes: classes.clone(),
                    per_class: *per_class,
                };
                let (images, labels) = (cfg.resolve(images), cfg.resolve(labels));
                Some(match cache_dir {
                    Some(dir) => load_mnist_cached(&images, &labels, &subset, &cfg.resolve(dir))?,
                    None => load_mnist(&images, &labels, &subset)?,
                })
            }
            _ => None,
        };
        Ok(Self { cfg, mnist })
    }

    fn build(&self, task_seed: u64, batch_seed: u64) -> Result<BuiltTask> {
        let mut linear = None;
        let mut task = match &self.cfg.task {
            &TaskConfig::TeacherStudent {
                input_dim,
                teacher_hidden,
                student_hidden,
                output_dim,
                activation,
                n_samples,
                student_init_std,
            } => make_teacher_student(
                input_dim,
                teacher_hidden,
                student_hidden,
                output_dim,
                activation,
                n_samples,
                task_seed,
                student_init_std,
            )?,
            &TaskConfig::TwoGaussian {
                d_sep,
                variance,
                n_samples,
            } => make_two_gaussian(d_sep, variance, n_samples, task_seed)?,
            &TaskConfig::LinearRegression {
                dim,
                d_init,
                sigma2,
                n_samples,
            } => {
                let lr = make_linear_regression(dim, d_init, sigma2, n_samples, task_seed)?;
                linear = Some((lr.sigma2, lr.d_init));
                lr.task
            }
            TaskConfig::Mnist { hidden, .. } => {
                let (spec, w0) = mnist_model(*hidden, task_seed)?;
                let data = self.mnist.clone().expect("MNIST data is loaded up front");
                Task { spec, w0, data }
            }
        };
        task.data.set_batch_mode(self.cfg.batch.mode(batch_seed))?;
        Ok(BuiltTask { task, linear })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub total_reward: f64,
    pub total_effort: f64,
    pub final_performance: f64,
    pub mu0: f64,
    pub peak_mu: f64,
    pub final_estimate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub episode: Episode,
    pub reward_rates: Vec<f64>,
    pub cumulative_reward: Vec<f64>,
    pub summary: RunSummary,
    pub meta: Option<MetaOptResult>,
    pub calibration: Option<Calibration>,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

const SUMMARY_HEADER: &str = "total_reward,total_effort,final_performance,mu0,peak_mu,final_estimate";

fn summary_fields(s: &RunSummary) -> String {
    format!(
        "{},{},{},{},{},{}",
        fmt_f(s.total_reward),
        fmt_f(s.total_effort),
        fmt_f(s.final_performance),
        fmt_f(s.mu0),
        fmt_f(s.peak_mu),
        fmt_opt(s.final_estimate)
    )
}

impl RunReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let dt = self.episode.schedule.dt();
        let mut sched = String::from("step,t,mu\n");
        for (i, mu) in self.episode.schedule.values().iter().enumerate() {
            writeln!(sched, "{i},{},{}", fmt_f(i as f64 * dt), fmt_f(*mu)).unwrap();
        }
        write_file(&dir.join("schedule.csv"), &sched)?;

        let mut traj = String::from("step,t,performance,reward_rate,cumulative_reward\n");
        for (i, p) in self.episode.trajectory.performance().iter().enumerate() {
            writeln!(
                traj,
                "{i},{},{},{},{}",
                fmt_f(i as f64 * dt),
                fmt_f(*p),
                fmt_f(self.reward_rates[i]),
                fmt_f(self.cumulative_reward[i])
            )
            .unwrap();
        }
        write_file(&dir.join("trajectory.csv"), &traj)?;
        write_file(
            &dir.join("summary.csv"),
            &format!("{SUMMARY_HEADER}\n{}\n", summary_fields(&self.summary)),
        )?;
        if let Some(meta) = &self.meta {
            meta.diagnostics.write_csv(&dir.join("meta_diagnostics.csv"))?;
        }
        if let Some(cal) = &self.calibration {
            write_calibration(cal, dir)?;
        }
        Ok(())
    }
}

fn write_calibration(cal: &Calibration, dir: &Path) -> Result<()> {
    let mut text = String::from("evaluation,final_estimate,reward\n");
    for (i, (p, r)) in cal.samples.iter().enumerate() {
        writeln!(text, "{i},{},{}", fmt_f(*p), fmt_f(*r)).unwrap();
    }
    write_file(&dir.join("calibration.csv"), &text)
}

fn calibration_interval(cfg: &ExperimentConfig, sim: &Simulator, w0: &crate::model::Weights) -> Result<CalibrateSection> {
    match cfg.calibrate {
        Some(c) => Ok(c),
        None => Ok(CalibrateSection {
            lower: 0.0,
            upper: sim.reference_loss(w0)?,
            tol: default_tol(),
        }),
    }
}

fn self_consistent_episode(sim: &Simulator, task: &Task, params: &RewardParams) -> Result<(f64, Episode)> {
    let sc = self_consistent_final_performance(sim, &task.w0, params, SELF_CONSISTENT_TOL, SELF_CONSISTENT_EVALS)?;
    log::info!("self-consistent final performance {:.6} ({} evaluations)", sc.value, sc.evaluations);
    let cl = ClosedLoopConfig::new(params.beta(), sc.value)?.with_alpha(sim.options().base_rate)?;
    let ep = sim.run_closed_loop(&task.w0, &mut ClosedLoop { config: cl }, params)?;
    Ok((sc.value, ep))
}

/// Runs the single experiment described by `cfg` (its sweep grid is ignored).
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let factory = TaskFactory::new(cfg)?;
    let built = factory.build(cfg.seed, cfg.seed.wrapping_add(1))?;
    let task = &built.task;
    let params = &cfg.reward;
    let sim = Simulator::new(&task.spec, &task.data)?.with_options(cfg.dynamics)?;
    let mut final_estimate = None;
    let mut meta = None;
    let mut calibration = None;

    let episode = match &cfg.controller {
        &ControllerConfig::ClosedLoop {
            final_performance,
            calibrate,
            ratio,
        } => {
            let p_hat = match final_performance {
                Some(p) => p,
                None if calibrate => {
                    let c = calibration_interval(cfg, &sim, &task.w0)?;
                    let cal = calibrate_final_performance(&sim, &task.w0, params, (c.lower, c.upper), c.tol)?;
                    for w in &cal.warnings {
                        log::warn!("{w}");
                    }
                    let v = cal.value;
                    calibration = Some(cal);
                    v
                }
                None => self_consistent_final_performance(
                    &sim,
                    &task.w0,
                    params,
                    SELF_CONSISTENT_TOL,
                    SELF_CONSISTENT_EVALS,
                )?
                .value,
            } * ratio;
            final_estimate = Some(p_hat);
            let cl = ClosedLoopConfig::new(params.beta(), p_hat)?.with_alpha(cfg.dynamics.base_rate)?;
            sim.run_closed_loop(&task.w0, &mut ClosedLoop { config: cl }, params)?
        }
        ControllerConfig::OpenLoop => {
            let (sigma2, d) = built.linear.expect("validated: open loop needs linear regression");
            let solution = solve_theta(&crate::controllers::PerceptronTask::new(
                sigma2,
                d,
                params.beta(),
                params.horizon(),
            )?)?;
            sim.run_closed_loop(&task.w0, &mut OpenLoop { solution }, params)?
        }
        ControllerConfig::DiscountedApprox => {
            sim.run_closed_loop(&task.w0, &mut DiscountedApprox { params: *params }, params)?
        }
        &ControllerConfig::Profile {
            kind,
            scale,
            peak_ratio,
        } => {
            let needs_reference = scale.is_none() || kind == ProfileKind::LearnThenRest;
            let reference = if needs_reference {
                Some(self_consistent_episode(&sim, task, params)?.1.schedule)
            } else {
                None
            };
            let peak = match scale {
                Some(s) => s,
                None => reference.as_ref().unwrap().peak() * peak_ratio.unwrap_or(1.0),
            };
            let sched = make_profile(kind, peak, params.steps(), params.dt(), reference.as_ref())?;
            sim.simulate(&task.w0, &sched)?
        }
        ControllerConfig::MetaOpt { optimizer, init_rate } => {
            let init = match (init_rate, built.linear) {
                (Some(r), _) => *r,
                (None, Some((sigma2, d))) => {
                    let pt = crate::controllers::PerceptronTask::new(sigma2, d, params.beta(), params.horizon())?;
                    0.01 * solve_theta(&pt)?.initial_rate()
                }
                (None, None) => 0.01,
            };
            let init = Schedule::constant(params.dt(), params.steps(), init)?;
            let result = meta_optimize(&sim, &task.w0, params, &init, optimizer)?;
            log::info!(
                "meta-optimizer finished with {:?} after {} iterations, objective {:.9}",
                result.diagnostics.status,
                result.diagnostics.history.len() - 1,
                result.objective
            );
            let ep = sim.simulate(&task.w0, &result.schedule)?;
            meta = Some(result);
            ep
        }
    };

    let rates = reward_rates(&episode.trajectory, &episode.schedule, params)?;
    let cumulative = cumulative_reward_series(&episode.trajectory, &episode.schedule, params)?;
    let summary = RunSummary {
        total_reward: cumulative.last().copied().unwrap_or(0.0),
        total_effort: total_effort(&episode.schedule, params),
        final_performance: episode.final_performance,
        mu0: episode.schedule.values().first().copied().unwrap_or(0.0),
        peak_mu: episode.schedule.peak(),
        final_estimate,
    };
    Ok(RunReport {
        episode,
        reward_rates: rates,
        cumulative_reward: cumulative,
        summary,
        meta,
        calibration,
    })
}

/// Golden-section calibration of `P̂(T)` for the configured task.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<Calibration> {
    let factory = TaskFactory::new(cfg)?;
    let built = factory.build(cfg.seed, cfg.seed.wrapping_add(1))?;
    let task = &built.task;
    let sim = Simulator::new(&task.spec, &task.data)?.with_options(cfg.dynamics)?;
    let c = calibration_interval(cfg, &sim, &task.w0)?;
    let cal = calibrate_final_performance(&sim, &task.w0, &cfg.reward, (c.lower, c.upper), c.tol)?;
    for w in &cal.warnings {
        log::warn!("{w}");
    }
    Ok(cal)
}

pub fn write_calibration_report(cal: &Calibration, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_calibration(cal, dir)?;
    let mut text = String::from("final_estimate,reward,evaluations\n");
    writeln!(text, "{},{},{}", fmt_f(cal.value), fmt_f(cal.reward), cal.evaluations).unwrap();
    write_file(&dir.join("summary.csv"), &text)
}

#[derive(Debug)]
pub struct SweepPoint {
    pub values: Vec<toml::Value>,
    pub outcome: Result<RunSummary>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub axes: Vec<String>,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Summaries of the successful points, in grid order.
    pub fn summaries(&self) -> Vec<Option<RunSummary>> {
        self.points.iter().map(|p| p.outcome.as_ref().ok().copied()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("point");
        for a in &self.axes {
            out.push(',');
            out.push_str(a);
        }
        writeln!(out, ",status,{SUMMARY_HEADER},error").unwrap();
        for (i, p) in self.points.iter().enumerate() {
            write!(out, "{i}").unwrap();
            for v in &p.values {
                let text = match v {
                    toml::Value::String(s) => s.clone(),
                    toml::Value::Float(f) => fmt_f(*f),
                    other => other.to_string(),
                };
                write!(out, ",{text}").unwrap();
            }
            match &p.outcome {
                Ok(s) => writeln!(out, ",ok,{},", summary_fields(s)).unwrap(),
                Err(e) => {
                    let msg = e.to_string().replace(['"', '\n'], "'");
                    writeln!(out, ",failed,,,,,,,\"{msg}\"").unwrap()
                }
            }
        }
        out
    }
}

/// Runs every grid point on a pool of `workers` threads. Points are
/// independent; rows come back in grid order. Each point's artifacts go to
/// `out/point-NNN` when `out` is given. Fails only when every point fails.
pub fn run_sweep(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<SweepReport> {
    if cfg.sweep.is_empty() {
        return Err(Error::Config("no [[sweep]] axes in the config".into()));
    }
    let points = cfg.sweep_points()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<RunSummary>> = pool.install(|| {
        use rayon::prelude::*;
        points
            .par_iter()
            .enumerate()
            .map(|(i, (_, point))| {
                let report = run(point)?;
                if let Some(dir) = out {
                    report.write(&dir.join(format!("point-{i:03}")))?;
                }
                Ok(report.summary)
            })
            .collect()
    });
    let report = SweepReport {
        axes: cfg.sweep.iter().map(|a| a.name.clone()).collect(),
        points: points
            .into_iter()
            .zip(outcomes)
            .map(|((values, _), outcome)| SweepPoint { values, outcome })
            .collect(),
    };
    for (i, p) in report.points.iter().enumerate() {
        if let Err(e) = &p.outcome {
            log::warn!("sweep point {i} failed: {e}");
        }
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join("sweep.csv"), &report.to_csv())?;
    }
    if report.points.iter().all(|p| p.outcome.is_err()) {
        let first = report.points.into_iter().next().unwrap();
        return Err(first.outcome.unwrap_err());
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct MemorySizeStats {
    pub memory_size: usize,
    pub fraction: f64,
    pub errors: Vec<f64>,
}

impl MemorySizeStats {
    pub fn iqr(&self) -> f64 {
        interquartile_range(&self.errors)
    }
}

const QUANTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];

/// Per-step error percentiles across episodes for one memory size.
#[derive(Debug, Clone)]
pub struct PercentileTrace {
    pub memory_size: usize,
    /// One series per entry of 10, 25, 50, 75 and 90 percent.
    pub quantiles: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MetaLearnReport {
    pub run: crate::metalearn::MetaLearnRun,
    pub stats: Vec<MemorySizeStats>,
    pub traces: Vec<PercentileTrace>,
    pub params: RewardParams,
}

/// Sequential episodes: episode `j` trains a fresh task drawn from seed
/// `seed + 1000 + j` with batch stream `seed + j`. Offline errors are then
/// computed for every configured memory size smaller than the episode count.
pub fn run_metalearn(cfg: &ExperimentConfig) -> Result<MetaLearnReport> {
    let section = cfg
        .metalearn
        .as_ref()
        .ok_or_else(|| Error::Config("no [metalearn] section in the config".into()))?;
    let estimator = cfg
        .estimator
        .ok_or_else(|| Error::Config("no [estimator] section in the config".into()))?;
    let factory = TaskFactory::new(cfg)?;
    let ml = MetaLearnConfig {
        episodes: section.episodes,
        alpha: cfg.dynamics.base_rate,
        estimator,
        probe: cfg.dynamics.probe,
    };
    let run = run_metalearning(&ml, &cfg.reward, |j| {
        let j = j as u64;
        Ok(factory
            .build(cfg.seed.wrapping_add(EPISODE_TASK_OFFSET + j), cfg.seed.wrapping_add(j))?
            .task)
    })?;
    let trajectories: Vec<_> = run.episodes.iter().map(|e| e.trajectory.clone()).collect();
    let steps = cfg.reward.steps();
    let mut stats = Vec::new();
    let mut traces = Vec::new();
    for &m in &section.memory_sizes {
        if m == 0 || m >= trajectories.len() {
            log::warn!("skipping memory size {m}: needs 1..{} episodes", trajectories.len());
            continue;
        }
        let errors = memory_size_error_traces(&trajectories, estimator, m)?;
        let quantiles = QUANTILES
            .iter()
            .map(|&q| {
                (0..steps)
                    .map(|i| percentile(&errors.iter().map(|e| e[i]).collect::<Vec<_>>(), q))
                    .collect()
            })
            .collect();
        traces.push(PercentileTrace {
            memory_size: m,
            quantiles,
        });
        for &fraction in &section.eval_fractions {
            let upto = (fraction * steps as f64).round() as usize;
            let errors = memory_size_errors(&trajectories, estimator, m, upto)?;
            stats.push(MemorySizeStats {
                memory_size: m,
                fraction,
                errors,
            });
        }
    }
    Ok(MetaLearnReport {
        run,
        stats,
        traces,
        params: cfg.reward,
    })
}

impl MetaLearnReport {
    pub fn write(&self, dir: &Path, fractions: &[f64], trace_stride: usize) -> Result<()> {
        ensure_dir(dir)?;
        let dt = self.params.dt();
        let steps = self.params.steps();
        let mut episodes = String::from("episode,memory_size,final_performance,total_reward,total_effort\n");
        let mut traces = String::from("episode,step,t,performance,mu,estimate\n");
        let mut scatter = String::from("episode,fraction,estimate,final_performance\n");
        for (j, ep) in self.run.episodes.iter().enumerate() {
            let sched = Schedule::new(dt, ep.rates.clone())?;
            let reward = crate::reward::cumulative_reward(&ep.trajectory, &sched, &self.params)?;
            writeln!(
                episodes,
                "{j},{},{},{},{}",
                ep.memory_size,
                fmt_f(ep.final_performance()),
                fmt_f(reward),
                fmt_f(total_effort(&sched, &self.params))
            )
            .unwrap();
            for i in (0..ep.trajectory.len()).step_by(trace_stride) {
                writeln!(
                    traces,
                    "{j},{i},{},{},{},{}",
                    fmt_f(i as f64 * dt),
                    fmt_f(ep.trajectory.performance()[i]),
                    fmt_f(ep.rates[i]),
                    fmt_opt(ep.estimates.get(i).copied())
                )
                .unwrap();
            }
            for &f in fractions {
                let i = ((f * steps as f64).round() as usize).min(steps.saturating_sub(1));
                if let Some(est) = ep.estimates.get(i) {
                    writeln!(scatter, "{j},{},{},{}", fmt_f(f), fmt_f(*est), fmt_f(ep.final_performance())).unwrap();
                }
            }
        }
        write_file(&dir.join("episodes.csv"), &episodes)?;
        write_file(&dir.join("traces.csv"), &traces)?;
        write_file(&dir.join("scatter.csv"), &scatter)?;

        let mut errors = String::from("memory_size,fraction,episode,error\n");
        let mut pct = String::from("memory_size,fraction,p10,p25,p50,p75,p90,iqr\n");
        for s in &self.stats {
            for (j, e) in s.errors.iter().enumerate() {
                writeln!(errors, "{},{},{j},{}", s.memory_size, fmt_f(s.fraction), fmt_f(*e)).unwrap();
            }
            let q: Vec<String> = QUANTILES
                .iter()
                .map(|&q| fmt_f(percentile(&s.errors, q)))
                .collect();
            writeln!(pct, "{},{},{},{}", s.memory_size, fmt_f(s.fraction), q.join(","), fmt_f(s.iqr())).unwrap();
        }
        write_file(&dir.join("estimation_errors.csv"), &errors)?;
        write_file(&dir.join("percentiles.csv"), &pct)?;

        let window = ((0.05 * steps as f64).round() as usize).max(1);
        let mut text = String::from("memory_size,step,t,p10,p25,p50,p75,p90");
        for q in QUANTILES {
            write!(text, ",p{q}_smoothed").unwrap();
        }
        text.push('\n');
        for trace in &self.traces {
            let smoothed: Vec<Vec<f64>> = trace
                .quantiles
                .iter()
                .map(|series| centered_moving_average(series, window))
                .collect();
            for i in 0..steps {
                write!(text, "{},{i},{}", trace.memory_size, fmt_f(i as f64 * dt)).unwrap();
                for series in trace.quantiles.iter().chain(&smoothed) {
                    write!(text, ",{}", fmt_f(series[i])).unwrap();
                }
                text.push('\n');
            }
        }
        write_file(&dir.join("percentile_traces.csv"), &text)?;
        self.run.memory.save(&dir.join("memory.table"))
    }
}
