//! Small dense feedforward networks with exact first and second-order
//! derivatives.
//!
//! Parameters live in one flat vector. Layer `l` maps `layer_sizes[l]` inputs
//! to `layer_sizes[l + 1]` outputs; its weight matrix is stored row-major
//! (`out × in`) followed by its bias vector when the layer has one.
//!
//! The Hessian-vector product uses the R-operator: a forward pass that
//! carries directional derivatives of every pre-activation, followed by a
//! backward pass that differentiates the backpropagation recursion itself.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
        }
    }

    /// First and second derivative given the pre-activation `z` and output `a`.
    fn derivatives(self, z: f64, a: f64) -> (f64, f64) {
        match self {
            Activation::Identity => (1.0, 0.0),
            Activation::Tanh => {
                let d1 = 1.0 - a * a;
                (d1, -2.0 * a * d1)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/(2n) Σ_i ‖y_i − f(x_i)‖²`
    Mse,
    /// `−1/n Σ_i y_iᵀ log f(x_i)` on softmax outputs.
    CrossEntropy,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Offsets of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
    output_transform: OutputTransform,
    bias_flags: Vec<bool>,
    loss: LossKind,
    layout: Vec<LayerLayout>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
    output_transform: OutputTransform,
    bias_flags: Vec<bool>,
    loss: LossKind,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        ModelSpec::new(
            raw.layer_sizes,
            raw.hidden_activation,
            raw.output_transform,
            raw.bias_flags,
            raw.loss,
        )
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(s: ModelSpec) -> Self {
        RawModelSpec {
            layer_sizes: s.layer_sizes,
            hidden_activation: s.hidden_activation,
            output_transform: s.output_transform,
            bias_flags: s.bias_flags,
            loss: s.loss,
        }
    }
}

impl ModelSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        output_transform: OutputTransform,
        bias_flags: Vec<bool>,
        loss: LossKind,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Contract(
                "a model needs an input size and at least one layer".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Contract("layer sizes must be positive".into()));
        }
        if bias_flags.len() != layer_sizes.len() - 1 {
            return Err(Error::Contract(format!(
                "expected {} bias flags, got {}",
                layer_sizes.len() - 1,
                bias_flags.len()
            )));
        }
        match (output_transform, loss) {
            (OutputTransform::Softmax, LossKind::CrossEntropy) => {}
            (OutputTransform::Identity, LossKind::Mse) => {}
            (OutputTransform::Softmax, LossKind::Mse) => {
                return Err(Error::Contract("softmax output requires cross-entropy loss".into()))
            }
            (OutputTransform::Identity, LossKind::CrossEntropy) => {
                return Err(Error::Contract("cross-entropy loss requires softmax output".into()))
            }
        }
        let mut spec = Self {
            layer_sizes,
            hidden_activation,
            output_transform,
            bias_flags,
            loss,
            layout: Vec::new(),
        };
        spec.layout = spec.compute_layout();
        Ok(spec)
    }

    /// A single linear neuron `f(x) = wᵀx` with squared-error loss.
    pub fn linear_neuron(inputs: usize) -> Self {
        Self::new(
            vec![inputs, 1],
            Activation::Identity,
            OutputTransform::Identity,
            vec![false],
            LossKind::Mse,
        )
        .expect("valid by construction")
    }

    /// Two-layer regression network: hidden layer with bias, output without.
    pub fn two_layer(inputs: usize, hidden: usize, outputs: usize, activation: Activation) -> Self {
        Self::new(
            vec![inputs, hidden, outputs],
            activation,
            OutputTransform::Identity,
            vec![true, false],
            LossKind::Mse,
        )
        .expect("valid by construction")
    }

    fn compute_layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .zip(&self.bias_flags)
            .map(|(pair, &bias)| {
                let (inputs, outputs) = (pair[0], pair[1]);
                let weight_offset = offset;
                offset += inputs * outputs;
                let bias_offset = bias.then(|| {
                    let b = offset;
                    offset += outputs;
                    b
                });
                LayerLayout {
                    inputs,
                    outputs,
                    weight_offset,
                    bias_offset,
                }
            })
            .collect()
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output_transform
    }

    pub fn bias_flags(&self) -> &[bool] {
        &self.bias_flags
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|l| l.inputs * l.outputs + if l.bias_offset.is_some() { l.outputs } else { 0 })
            .sum()
    }

    /// Evaluates the network output for every row of `inputs`.
    pub fn predict(&self, weights: &Weights, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_inputs(self, weights.as_slice(), inputs)?;
        let pass = forward(self, weights.as_slice(), inputs);
        Ok(pass.output)
    }
}

/// Flat parameter vector of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    flat: Vec<f64>,
}

impl Weights {
    pub fn new(spec: &ModelSpec, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::Contract(format!(
                "model has {} parameters, weight vector has {}",
                spec.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("weights must be finite".into()));
        }
        Ok(Self { flat })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            flat: vec![0.0; spec.param_count()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Rows of inputs with matching targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, targets: ArrayView2<'a, f64>) -> Self {
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Loss, gradient and optionally a Hessian-vector product at one point.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub hvp: Option<Vec<f64>>,
}

fn weight_view<'w>(w: &'w [f64], layer: &LayerLayout) -> ArrayView2<'w, f64> {
    ArrayView2::from_shape(
        (layer.outputs, layer.inputs),
        &w[layer.weight_offset..layer.weight_offset + layer.outputs * layer.inputs],
    )
    .expect("layout consistent with parameter count")
}

fn bias_view<'w>(w: &'w [f64], layer: &LayerLayout) -> Option<ArrayView1<'w, f64>> {
    layer
        .bias_offset
        .map(|b| ArrayView1::from(&w[b..b + layer.outputs]))
}

struct ForwardPass {
    /// Pre-activations per layer.
    pre: Vec<Array2<f64>>,
    /// Hidden-layer activations (one fewer than layers).
    hidden: Vec<Array2<f64>>,
    /// Network output: identity or softmax of the last pre-activation.
    output: Array2<f64>,
}

fn forward(spec: &ModelSpec, w: &[f64], inputs: ArrayView2<f64>) -> ForwardPass {
    let layers = spec.layout();
    let mut pre = Vec::with_capacity(layers.len());
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers.len().saturating_sub(1));
    for (l, layer) in layers.iter().enumerate() {
        let prev = if l == 0 { inputs } else { hidden[l - 1].view() };
        let mut z = prev.dot(&weight_view(w, layer).t());
        if let Some(b) = bias_view(w, layer) {
            z += &b;
        }
        if l + 1 < layers.len() {
            let act = spec.hidden_activation;
            hidden.push(z.mapv(|v| act.apply(v)));
        }
        pre.push(z);
    }
    let last = pre.last().unwrap();
    let output = match spec.output_transform {
        OutputTransform::Identity => last.clone(),
        OutputTransform::Softmax => softmax_rows(last),
    };
    ForwardPass {
        pre,
        hidden,
        output,
    }
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn loss_value(spec: &ModelSpec, pass: &ForwardPass, targets: ArrayView2<f64>) -> f64 {
    let n = targets.nrows() as f64;
    match spec.loss {
        LossKind::Mse => {
            let mut acc = 0.0;
            Zip::from(&pass.output)
                .and(&targets)
                .for_each(|&f, &y| acc += (f - y) * (f - y));
            acc / (2.0 * n)
        }
        LossKind::CrossEntropy => {
            // log-softmax from the logits keeps this finite for saturated outputs
            let logits = pass.pre.last().unwrap();
            let mut acc = 0.0;
            for (z, y) in logits.rows().into_iter().zip(targets.rows()) {
                let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                acc -= y.iter().zip(z.iter()).map(|(&yi, &zi)| yi * (zi - lse)).sum::<f64>();
            }
            acc / n
        }
    }
}

fn check_inputs(spec: &ModelSpec, w: &[f64], inputs: ArrayView2<f64>) -> Result<()> {
    if w.len() != spec.param_count() {
        return Err(Error::Contract(format!(
            "model has {} parameters, weight vector has {}",
            spec.param_count(),
            w.len()
        )));
    }
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::Contract(format!(
            "model expects {} inputs, batch has {}",
            spec.input_dim(),
            inputs.ncols()
        )));
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, w: &[f64], batch: &Batch) -> Result<()> {
    check_inputs(spec, w, batch.inputs)?;
    if batch.targets.ncols() != spec.output_dim() {
        return Err(Error::Contract(format!(
            "model has {} outputs, targets have {} columns",
            spec.output_dim(),
            batch.targets.ncols()
        )));
    }
    if batch.targets.nrows() != batch.inputs.nrows() {
        return Err(Error::Contract(format!(
            "batch has {} input rows but {} target rows",
            batch.inputs.nrows(),
            batch.targets.nrows()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Contract("batch is empty".into()));
    }
    Ok(())
}

fn non_finite(what: &str) -> Error {
    Error::Numerical {
        step: 0,
        message: format!("non-finite {what}"),
    }
}

/// Loss on the batch.
pub fn loss(spec: &ModelSpec, w: &[f64], batch: Batch) -> Result<f64> {
    check_batch(spec, w, &batch)?;
    let pass = forward(spec, w, batch.inputs);
    let l = loss_value(spec, &pass, batch.targets);
    if l.is_finite() {
        Ok(l)
    } else {
        Err(non_finite("loss"))
    }
}

/// Loss and its exact gradient with respect to the flat parameters.
pub fn loss_and_gradient(spec: &ModelSpec, w: &[f64], batch: Batch) -> Result<(f64, Vec<f64>)> {
    let d = derivatives(spec, w, batch, None)?;
    Ok((d.loss, d.gradient))
}

/// Loss, gradient and, when `direction` is given, the product of the loss
/// Hessian with that direction.
pub fn derivatives(
    spec: &ModelSpec,
    w: &[f64],
    batch: Batch,
    direction: Option<&[f64]>,
) -> Result<Derivatives> {
    check_batch(spec, w, &batch)?;
    if let Some(v) = direction {
        if v.len() != w.len() {
            return Err(Error::Contract(format!(
                "direction has {} entries, model has {} parameters",
                v.len(),
                w.len()
            )));
        }
    }
    let layers = spec.layout();
    let n = batch.len() as f64;
    let pass = forward(spec, w, batch.inputs);
    let loss = loss_value(spec, &pass, batch.targets);
    if !loss.is_finite() {
        return Err(non_finite("loss"));
    }

    // First derivatives of the hidden activations, and second ones only when
    // a Hessian-vector product is requested.
    let act = spec.hidden_activation;
    let d1: Vec<Array2<f64>> = pass
        .hidden
        .iter()
        .zip(&pass.pre)
        .map(|(a, z)| Zip::from(z).and(a).map_collect(|&zv, &av| act.derivatives(zv, av).0))
        .collect();
    let d2: Vec<Array2<f64>> = match direction {
        Some(_) => pass
            .hidden
            .iter()
            .zip(&pass.pre)
            .map(|(a, z)| Zip::from(z).and(a).map_collect(|&zv, &av| act.derivatives(zv, av).1))
            .collect(),
        None => Vec::new(),
    };

    // R-forward: directional derivatives of every pre-activation.
    let r_pre: Option<Vec<Array2<f64>>> = direction.map(|v| {
        let mut r_pre: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let prev = if l == 0 {
                batch.inputs
            } else {
                pass.hidden[l - 1].view()
            };
            let mut rz = prev.dot(&weight_view(v, layer).t());
            if l > 0 {
                let r_act = &r_pre[l - 1] * &d1[l - 1];
                rz = rz + r_act.dot(&weight_view(w, layer).t());
            }
            if let Some(c) = bias_view(v, layer) {
                rz += &c;
            }
            r_pre.push(rz);
        }
        r_pre
    });

    let mut grad = vec![0.0; w.len()];
    let mut hvp = direction.map(|_| vec![0.0; w.len()]);

    // dL/dz at the output layer is (f − y)/n for both loss kinds.
    let mut delta = (&pass.output - &batch.targets) / n;
    let mut r_delta = r_pre.as_ref().map(|r| {
        let rz = r.last().unwrap();
        match spec.output_transform {
            OutputTransform::Identity => rz / n,
            OutputTransform::Softmax => {
                let p = &pass.output;
                let inner = (p * rz).sum_axis(Axis(1)).insert_axis(Axis(1));
                (p * &(rz - &inner)) / n
            }
        }
    });

    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let prev = if l == 0 {
            batch.inputs
        } else {
            pass.hidden[l - 1].view()
        };
        let gw = delta.t().dot(&prev);
        write_block(&mut grad, layer.weight_offset, gw.view());
        if let Some(b) = layer.bias_offset {
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            grad[b..b + layer.outputs].copy_from_slice(gb.as_slice().unwrap());
        }

        if let (Some(h), Some(rd), Some(r_pre), Some(v)) =
            (hvp.as_mut(), r_delta.as_ref(), r_pre.as_ref(), direction)
        {
            let mut hw = rd.t().dot(&prev);
            if l > 0 {
                let r_prev = &r_pre[l - 1] * &d1[l - 1];
                hw = hw + delta.t().dot(&r_prev);
            }
            write_block(h, layer.weight_offset, hw.view());
            if let Some(b) = layer.bias_offset {
                let hb: Array1<f64> = rd.sum_axis(Axis(0));
                h[b..b + layer.outputs].copy_from_slice(hb.as_slice().unwrap());
            }
            if l > 0 {
                let wl = weight_view(w, layer);
                let back = delta.dot(&wl);
                let mut next_r = rd.dot(&wl) + delta.dot(&weight_view(v, layer));
                next_r *= &d1[l - 1];
                next_r = next_r + &(&back * &d2[l - 1] * &r_pre[l - 1]);
                r_delta = Some(next_r);
                delta = back * &d1[l - 1];
                continue;
            }
        }
        if l > 0 {
            delta = delta.dot(&weight_view(w, layer)) * &d1[l - 1];
        }
    }

    if grad.iter().any(|g| !g.is_finite()) {
        return Err(non_finite("gradient"));
    }
    if let Some(h) = &hvp {
        if h.iter().any(|g| !g.is_finite()) {
            return Err(non_finite("Hessian-vector product"));
        }
    }
    Ok(Derivatives {
        loss,
        gradient: grad,
        hvp,
    })
}

fn write_block(dst: &mut [f64], offset: usize, block: ArrayView2<f64>) {
    let len = block.len();
    let target = &mut dst[offset..offset + len];
    for (t, s) in target.iter_mut().zip(block.iter()) {
        *t = *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_gradient(spec: &ModelSpec, w: &[f64], batch: Batch, eps: f64) -> Vec<f64> {
        let mut probe = w.to_vec();
        (0..w.len())
            .map(|i| {
                probe[i] = w[i] + eps;
                let up = loss(spec, &probe, batch).unwrap();
                probe[i] = w[i] - eps;
                let down = loss(spec, &probe, batch).unwrap();
                probe[i] = w[i];
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (ModelSpec, Vec<f64>, Array2<f64>, Array2<f64>) {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=4)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=5));
        }
        let act = [Activation::Identity, Activation::Tanh, Activation::Softplus][rng.random_range(0..3)];
        let classify = rng.random_bool(0.4) && *sizes.last().unwrap() > 1;
        let (out, loss) = if classify {
            (OutputTransform::Softmax, LossKind::CrossEntropy)
        } else {
            (OutputTransform::Identity, LossKind::Mse)
        };
        let bias = (0..depth).map(|_| rng.random_bool(0.5)).collect();
        let spec = ModelSpec::new(sizes.clone(), act, out, bias, loss).unwrap();
        let w: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = rng.random_range(1..=6);
        let x = Array2::from_shape_fn((n, sizes[0]), |_| rng.random_range(-2.0..2.0));
        let k = spec.output_dim();
        let y = if classify {
            Array2::from_shape_fn((n, k), |(i, j)| if j == i % k { 1.0 } else { 0.0 })
        } else {
            Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0))
        };
        (spec, w, x, y)
    }

    #[test]
    fn linear_neuron_at_optimum() {
        let spec = ModelSpec::linear_neuron(2);
        let x = array![[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]];
        let w_star = [0.4, -1.5];
        let y = x.dot(&ArrayView1::from(&w_star)).insert_axis(Axis(1));
        let (l, g) = loss_and_gradient(&spec, &w_star, Batch::new(x.view(), y.view())).unwrap();
        assert!(l.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hand_differentiated_scalar_case() {
        let spec = ModelSpec::linear_neuron(1);
        let x = array![[1.0]];
        let y = array![[0.0]];
        let (l, g) = loss_and_gradient(&spec, &[1.0], Batch::new(x.view(), y.view())).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..100 {
            let (spec, w, x, y) = random_case(&mut rng);
            let batch = Batch::new(x.view(), y.view());
            let (_, g) = loss_and_gradient(&spec, &w, batch).unwrap();
            let fd = fd_gradient(&spec, &w, batch, 1e-5);
            let err = rel_err(&g, &fd);
            assert!(err <= 1e-5, "case {case}: relative error {err:e} for {spec:?}");
        }
    }

    #[test]
    fn hessian_vector_products_match_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..60 {
            let (spec, w, x, y) = random_case(&mut rng);
            let batch = Batch::new(x.view(), y.view());
            let v: Vec<f64> = (0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = derivatives(&spec, &w, batch, Some(&v)).unwrap();
            let eps = 1e-5;
            let shifted = |s: f64| -> Vec<f64> {
                let p: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                loss_and_gradient(&spec, &p, batch).unwrap().1
            };
            let (up, down) = (shifted(eps), shifted(-eps));
            let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let err = rel_err(d.hvp.as_ref().unwrap(), &fd);
            assert!(err <= 1e-6, "case {case}: HVP relative error {err:e}");
            assert_eq!(d.gradient, loss_and_gradient(&spec, &w, batch).unwrap().1);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::new(vec![3], Activation::Tanh, OutputTransform::Identity, vec![], LossKind::Mse).is_err());
        assert!(ModelSpec::new(vec![3, 2], Activation::Tanh, OutputTransform::Softmax, vec![false], LossKind::Mse).is_err());
        assert!(ModelSpec::new(vec![3, 2], Activation::Tanh, OutputTransform::Identity, vec![false], LossKind::CrossEntropy).is_err());
        assert!(ModelSpec::new(vec![3, 0, 2], Activation::Tanh, OutputTransform::Identity, vec![true, false], LossKind::Mse).is_err());
        assert!(ModelSpec::new(vec![3, 2], Activation::Tanh, OutputTransform::Identity, vec![], LossKind::Mse).is_err());
    }

    #[test]
    fn parameter_count_matches_layout() {
        let spec = ModelSpec::two_layer(4, 10, 6, Activation::Tanh);
        assert_eq!(spec.param_count(), 4 * 10 + 10 + 10 * 6);
        let mnist = ModelSpec::new(
            vec![196, 100, 10],
            Activation::Softplus,
            OutputTransform::Softmax,
            vec![true, false],
            LossKind::CrossEntropy,
        )
        .unwrap();
        assert_eq!(mnist.param_count(), 196 * 100 + 100 + 1000);
    }

    #[test]
    fn shape_mismatches_are_contract_errors() {
        let spec = ModelSpec::linear_neuron(2);
        let x = array![[1.0, 2.0]];
        let y = array![[1.0, 2.0]];
        assert!(matches!(
            loss(&spec, &[0.0, 0.0], Batch::new(x.view(), y.view())),
            Err(Error::Contract(_))
        ));
        let y = array![[1.0]];
        assert!(matches!(
            loss(&spec, &[0.0], Batch::new(x.view(), y.view())),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let spec = ModelSpec::new(
            vec![1, 2],
            Activation::Identity,
            OutputTransform::Softmax,
            vec![false],
            LossKind::CrossEntropy,
        )
        .unwrap();
        let x = array![[1.0]];
        let y = array![[0.0, 1.0]];
        let l = loss(&spec, &[800.0, -800.0], Batch::new(x.view(), y.view())).unwrap();
        assert!((l - 1600.0).abs() < 1e-9);
    }
}
