//! Task generators: teacher-student regression, two-Gaussian discrimination,
//! isotropic linear regression and an MNIST subset.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::NumericTable;
use crate::controllers::PerceptronTask;
use crate::dynamics::{BatchMode, TaskData};
use crate::error::{Error, Result};
use crate::idx;
use crate::model::{Activation, LossKind, ModelSpec, OutputTransform, Weights};

/// A model, its initial weights and its training data.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: ModelSpec,
    pub w0: Weights,
    pub data: TaskData,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Contract(format!("{name} must be positive")));
    }
    Ok(())
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Domain(format!("invalid standard deviation {std}: {e}")))
}

/// Fills every weight matrix from `N(0, 2/(fan_in + fan_out))` (or a fixed
/// standard deviation when `std` is given); biases start at zero.
fn init_weights(spec: &ModelSpec, std: Option<f64>, rng: &mut ChaCha8Rng) -> Result<Weights> {
    let mut flat = vec![0.0; spec.param_count()];
    for layer in spec.layout() {
        let s = std.unwrap_or_else(|| (2.0 / (layer.inputs + layer.outputs) as f64).sqrt());
        let dist = normal(s)?;
        let n = layer.inputs * layer.outputs;
        for w in &mut flat[layer.weight_offset..layer.weight_offset + n] {
            *w = dist.sample(rng);
        }
    }
    Weights::new(spec, flat)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Labels from a randomly drawn teacher of the same depth on `N(0, I)` inputs.
///
/// Draw order from `seed`: teacher weights, inputs, student weights. A
/// `student_init_std` of `None` gives the student the teacher's scheme.
#[allow(clippy::too_many_arguments)]
pub fn make_teacher_student(
    input_dim: usize,
    teacher_hidden: usize,
    student_hidden: usize,
    output_dim: usize,
    activation: Activation,
    n_samples: usize,
    seed: u64,
    student_init_std: Option<f64>,
) -> Result<Task> {
    for (name, v) in [
        ("input_dim", input_dim),
        ("teacher_hidden", teacher_hidden),
        ("student_hidden", student_hidden),
        ("output_dim", output_dim),
        ("n_samples", n_samples),
    ] {
        positive(name, v)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = ModelSpec::two_layer(input_dim, teacher_hidden, output_dim, activation);
    let teacher_w = init_weights(&teacher, None, &mut rng)?;
    let x = gaussian_matrix(n_samples, input_dim, &mut rng);
    let y = teacher.predict(&teacher_w, x.view())?;
    let spec = ModelSpec::two_layer(input_dim, student_hidden, output_dim, activation);
    let w0 = init_weights(&spec, student_init_std, &mut rng)?;
    Ok(Task {
        spec,
        w0,
        data: TaskData::new(x, y, BatchMode::FullBatch)?,
    })
}

/// Scalar inputs `x ~ N(y·d, σ²)` with equiprobable labels `y = ±1`,
/// learned by a single bias-free linear neuron starting at `w = 0`.
pub fn make_two_gaussian(d_sep: f64, variance: f64, n: usize, seed: u64) -> Result<Task> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Domain(format!("variance must be > 0, got {variance}")));
    }
    if !d_sep.is_finite() {
        return Err(Error::Domain("separation must be finite".into()));
    }
    positive("n", n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = normal(variance.sqrt())?;
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let label = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        y[[i, 0]] = label;
        x[[i, 0]] = label * d_sep + noise.sample(&mut rng);
    }
    let spec = ModelSpec::linear_neuron(1);
    Ok(Task {
        w0: Weights::zeros(&spec),
        spec,
        data: TaskData::new(x, y, BatchMode::FullBatch)?,
    })
}

/// Linear regression whose loss is exactly `σ²/2·‖w − w*‖²`.
#[derive(Debug, Clone)]
pub struct LinearRegression {
    pub task: Task,
    pub target: Vec<f64>,
    pub sigma2: f64,
    pub d_init: f64,
}

impl LinearRegression {
    /// The matching analytic description for cost `beta` and horizon `horizon`.
    pub fn perceptron(&self, beta: f64, horizon: f64) -> Result<PerceptronTask> {
        PerceptronTask::new(self.sigma2, self.d_init, beta, horizon)
    }
}

/// Lower-triangular Cholesky factor of a small symmetric positive-definite matrix.
fn cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let v = m[[i, i]] - s;
                if v <= 0.0 {
                    return Err(Error::Numerical {
                        step: 0,
                        message: "input second moment is singular; use more samples".into(),
                    });
                }
                l[[i, i]] = v.sqrt();
            } else {
                l[[i, j]] = (m[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Gaussian inputs transformed so that `XᵀX / n = σ²·I` holds exactly, labels
/// `y = xᵀw*` with `w* ~ N(0, I/dim)`, and `w₀` at distance `d_init` from
/// `w*` in a random direction.
pub fn make_linear_regression(dim: usize, d_init: f64, sigma2: f64, n: usize, seed: u64) -> Result<LinearRegression> {
    positive("dim", dim)?;
    if !(d_init >= 0.0 && d_init.is_finite()) {
        return Err(Error::Domain(format!("d_init must be >= 0, got {d_init}")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!("sigma2 must be > 0, got {sigma2}")));
    }
    if n < dim {
        return Err(Error::Contract(format!("need at least {dim} samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = gaussian_matrix(n, dim, &mut rng);
    let moment = raw.t().dot(&raw) / n as f64;
    let l = cholesky(&moment)?;
    // x ← σ·L⁻¹x row by row, by forward substitution.
    let scale = sigma2.sqrt();
    let mut x = Array2::<f64>::zeros((n, dim));
    for (src, mut dst) in raw.rows().into_iter().zip(x.rows_mut()) {
        for i in 0..dim {
            let s: f64 = (0..i).map(|k| l[[i, k]] * dst[k]).sum();
            dst[i] = (src[i] - s) / l[[i, i]];
        }
        dst *= scale;
    }

    let target: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
        .collect();
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let w0: Vec<f64> = target.iter().zip(&dir).map(|(t, u)| t + d_init * u).collect();

    let y = x.dot(&Array1::from(target.clone())).insert_axis(Axis(1));
    let spec = ModelSpec::linear_neuron(dim);
    Ok(LinearRegression {
        task: Task {
            w0: Weights::new(&spec, w0)?,
            spec,
            data: TaskData::new(x, y, BatchMode::FullBatch)?,
        },
        target,
        sigma2,
        d_init,
    })
}

/// Which MNIST images to keep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnistSubset {
    /// Digits to keep; all ten when empty. Targets stay ten-dimensional.
    pub classes: Vec<u8>,
    /// Keep at most this many images of each kept digit, in file order.
    pub per_class: Option<usize>,
}

const POOL: usize = 2;

/// Loads IDX images and labels, scales pixels to [0, 1], average-pools 2×2
/// blocks and one-hot encodes the labels.
pub fn load_mnist(images_path: &Path, labels_path: &Path, subset: &MnistSubset) -> Result<TaskData> {
    let images = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    mnist_from_idx(&images, &labels, subset)
}

pub fn mnist_from_idx(images: &idx::IdxImages, labels: &[u8], subset: &MnistSubset) -> Result<TaskData> {
    if images.count != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    if images.rows % POOL != 0 || images.cols % POOL != 0 {
        return Err(Error::Format {
            offset: 8,
            message: format!("image size {}×{} is not divisible by {POOL}", images.rows, images.cols),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format {
            offset: 8,
            message: format!("label {bad} outside 0..=9"),
        });
    }
    let keep_class = |c: u8| subset.classes.is_empty() || subset.classes.contains(&c);
    let mut taken = [0usize; 10];
    let mut chosen = Vec::new();
    for (i, &c) in labels.iter().enumerate() {
        if keep_class(c) && subset.per_class.is_none_or(|cap| taken[c as usize] < cap) {
            taken[c as usize] += 1;
            chosen.push(i);
        }
    }
    if chosen.is_empty() {
        return Err(Error::Contract("MNIST subset selects no images".into()));
    }

    let (pr, pc) = (images.rows / POOL, images.cols / POOL);
    let mut x = Array2::<f64>::zeros((chosen.len(), pr * pc));
    let mut y = Array2::<f64>::zeros((chosen.len(), 10));
    for (row, &i) in chosen.iter().enumerate() {
        let img = images.image(i);
        for r in 0..pr {
            for c in 0..pc {
                let mut sum = 0.0;
                for dr in 0..POOL {
                    for dc in 0..POOL {
                        sum += img[(POOL * r + dr) * images.cols + POOL * c + dc] as f64;
                    }
                }
                x[[row, r * pc + c]] = sum / (255.0 * (POOL * POOL) as f64);
            }
        }
        y[[row, labels[i] as usize]] = 1.0;
    }
    TaskData::new(x, y, BatchMode::FullBatch)
}

/// 196-`hidden`-10 softplus network with softmax output and cross-entropy.
pub fn mnist_model(hidden: usize, seed: u64) -> Result<(ModelSpec, Weights)> {
    let spec = ModelSpec::new(
        vec![196, hidden, 10],
        Activation::Softplus,
        OutputTransform::Softmax,
        vec![true, false],
        LossKind::CrossEntropy,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = init_weights(&spec, None, &mut rng)?;
    Ok((spec, w0))
}

/// Stores inputs and targets in the numeric container, one sample per row.
pub fn save_dataset(data: &TaskData, path: &Path) -> Result<()> {
    let (k, m) = (data.inputs().ncols(), data.targets().ncols());
    let mut table = NumericTable::new(k + m);
    table.set("kind", "dataset");
    table.set("inputs", k);
    table.set("outputs", m);
    for (x, y) in data.inputs().rows().into_iter().zip(data.targets().rows()) {
        let row: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
        table.push_row(&row)?;
    }
    table.save(path)
}

pub fn load_dataset(path: &Path, mode: BatchMode) -> Result<TaskData> {
    let table = NumericTable::load(path)?;
    let bad = |message: String| Error::Format { offset: 0, message };
    if table.get("kind")? != "dataset" {
        return Err(bad("table is not a dataset cache".into()));
    }
    let k = table.get_f64("inputs")? as usize;
    let m = table.get_f64("outputs")? as usize;
    if k + m != table.cols {
        return Err(bad(format!("{k} inputs + {m} outputs but {} columns", table.cols)));
    }
    let rows = table.rows();
    let mut x = Array2::zeros((rows, k));
    let mut y = Array2::zeros((rows, m));
    for r in 0..rows {
        let row = table.row(r);
        x.row_mut(r).assign(&ndarray::aview1(&row[..k]));
        y.row_mut(r).assign(&ndarray::aview1(&row[k..]));
    }
    TaskData::new(x, y, mode)
}

/// Loads MNIST through a cache file next to `cache_dir`, creating it on first use.
pub fn load_mnist_cached(
    images_path: &Path,
    labels_path: &Path,
    subset: &MnistSubset,
    cache_dir: &Path,
) -> Result<TaskData> {
    let classes: Vec<String> = subset.classes.iter().map(u8::to_string).collect();
    let name = format!(
        "mnist-{}-c{}-n{}.table",
        images_path.file_stem().and_then(|s| s.to_str()).unwrap_or("images"),
        if classes.is_empty() { "all".to_string() } else { classes.join("_") },
        subset.per_class.map_or("all".to_string(), |n| n.to_string()),
    );
    let cache: PathBuf = cache_dir.join(name);
    if cache.exists() {
        return load_dataset(&cache, BatchMode::FullBatch);
    }
    let data = load_mnist(images_path, labels_path, subset)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    save_dataset(&data, &cache)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use approx::assert_relative_eq;

    #[test]
    fn teacher_student_is_reproducible() {
        let a = make_teacher_student(4, 10, 10, 6, Activation::Tanh, 64, 7, None).unwrap();
        let b = make_teacher_student(4, 10, 10, 6, Activation::Tanh, 64, 7, None).unwrap();
        let c = make_teacher_student(4, 10, 10, 6, Activation::Tanh, 64, 8, None).unwrap();
        assert_eq!(a.data.inputs(), b.data.inputs());
        assert_eq!(a.data.targets(), b.data.targets());
        assert_eq!(a.w0, b.w0);
        assert_ne!(a.data.targets(), c.data.targets());
        assert_eq!(a.spec.param_count(), 4 * 10 + 10 + 10 * 6);
        assert!(make_teacher_student(0, 10, 10, 6, Activation::Tanh, 64, 7, None).is_err());
    }

    #[test]
    fn small_student_init() {
        let t = make_teacher_student(3, 6, 6, 2, Activation::Softplus, 32, 1, Some(0.001)).unwrap();
        assert!(t.w0.as_slice().iter().all(|w| w.abs() < 0.01));
        assert_eq!(t.data.targets().ncols(), 2);
    }

    #[test]
    fn two_gaussian_balance() {
        let n = 20_000;
        let t = make_two_gaussian(2.0, 4.0, n, 3).unwrap();
        let mean = t.data.targets().mean().unwrap();
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt());
        assert!(t.w0.as_slice().iter().all(|&w| w == 0.0));
        assert!(make_two_gaussian(2.0, 0.0, 10, 3).is_err());
        let x = t.data.inputs().column(0).to_owned();
        let y = t.data.targets().column(0).to_owned();
        let signed_mean = (&x * &y).mean().unwrap();
        assert!((signed_mean - 2.0).abs() < 0.1);
    }

    #[test]
    fn linear_regression_moments_are_exact() {
        let lr = make_linear_regression(4, 0.7, 1.5, 200, 11).unwrap();
        let x = lr.task.data.inputs();
        let m = x.t().dot(x) / x.nrows() as f64;
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 1.5 } else { 0.0 };
                assert!((m[[i, j]] - expected).abs() < 1e-12);
            }
        }
        let dist: f64 = lr
            .task
            .w0
            .as_slice()
            .iter()
            .zip(&lr.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert_relative_eq!(dist, 0.7, epsilon = 1e-12);
        let l0 = model::loss(&lr.task.spec, lr.task.w0.as_slice(), lr.task.data.full_batch()).unwrap();
        let p = lr.perceptron(0.1, 10.0).unwrap();
        assert_relative_eq!(l0, p.initial_loss(), epsilon = 1e-12);
    }

    #[test]
    fn large_linear_regression_variance() {
        let lr = make_linear_regression(3, 1.0, 2.0, 10_000, 5).unwrap();
        let x = lr.task.data.inputs();
        for j in 0..3 {
            let var = x.column(j).var(0.0);
            assert!((var - 2.0).abs() <= 0.1, "{var}");
        }
    }

    fn synthetic(pixels: Vec<u8>, count: usize) -> idx::IdxImages {
        idx::IdxImages {
            count,
            rows: 28,
            cols: 28,
            pixels,
        }
    }

    #[test]
    fn mnist_pooling() {
        let zero = synthetic(vec![0; 784], 1);
        let data = mnist_from_idx(&zero, &[3], &MnistSubset::default()).unwrap();
        assert_eq!(data.inputs().ncols(), 196);
        assert!(data.inputs().iter().all(|&v| v == 0.0));
        assert_eq!(data.targets().row(0).to_vec(), {
            let mut v = vec![0.0; 10];
            v[3] = 1.0;
            v
        });

        // top-left block {0, 0, 255, 255}
        let mut px = vec![0u8; 784];
        px[28] = 255;
        px[29] = 255;
        let data = mnist_from_idx(&synthetic(px, 1), &[0], &MnistSubset::default()).unwrap();
        assert_eq!(data.inputs()[[0, 0]], 0.5);
    }

    #[test]
    fn mnist_subset_and_errors() {
        let images = synthetic(vec![0; 784 * 6], 6);
        let labels = [0, 1, 0, 2, 0, 1];
        let subset = MnistSubset {
            classes: vec![0, 1],
            per_class: Some(2),
        };
        let data = mnist_from_idx(&images, &labels, &subset).unwrap();
        assert_eq!(data.len(), 4);
        assert!(matches!(mnist_from_idx(&images, &labels[..5], &subset), Err(Error::Format { .. })));
        let bad = [0, 1, 0, 12, 0, 1];
        assert!(mnist_from_idx(&images, &bad, &MnistSubset::default()).is_err());
    }

    #[test]
    fn mnist_files_and_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..784 * 3).map(|i| (i % 251) as u8).collect();
        let images = synthetic(pixels, 3);
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        idx::write_images(&ip, &images).unwrap();
        idx::write_labels(&lp, &[4, 5, 6]).unwrap();
        let direct = load_mnist(&ip, &lp, &MnistSubset::default()).unwrap();
        let cached = load_mnist_cached(&ip, &lp, &MnistSubset::default(), dir.path()).unwrap();
        let again = load_mnist_cached(&ip, &lp, &MnistSubset::default(), dir.path()).unwrap();
        assert_eq!(direct.inputs(), cached.inputs());
        assert_eq!(direct.inputs(), again.inputs());
        assert_eq!(direct.targets(), again.targets());
    }

    #[test]
    fn mnist_model_shape() {
        let (spec, w0) = mnist_model(100, 0).unwrap();
        assert_eq!(spec.param_count(), 196 * 100 + 100 + 100 * 10);
        assert_eq!(w0.len(), spec.param_count());
    }
}
