//! Small feed-forward networks with activation and gradient taps.
//!
//! A [`Network`] is a stack of linear, relu and residual-block layers. The
//! forward pass can record the input `X` and output `Y` of any linear layer;
//! the backward pass additionally records `G`, the gradient of the loss with
//! respect to that layer's output.
//!
//! Losses are means over batch rows. The recorded `G` holds per-sample
//! gradients: row `i` is `∂ℓ_i/∂Y_i`, which equals `n · ∂(mean loss)/∂Y`.
//! With that convention the weight gradient of the mean loss is `GᵀX / n`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, to_checkpoint_string};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Mean over rows of `‖prediction − target‖²`, no ½ factor.
    Mse,
    /// Mean over rows of `−Σ_c t_c log softmax(z)_c`.
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::SoftmaxCrossEntropy => "sce",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "mse" => Some(LossKind::Mse),
            "sce" => Some(LossKind::SoftmaxCrossEntropy),
            _ => None,
        }
    }
}

/// Dense layer `y = x Wᵀ + b` with `W` of shape `d_out × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(name: impl Into<String>, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "layer `{name}`: bias length {} but d_out {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { name, weight, bias })
    }

    /// Zero-bias layer.
    pub fn no_bias(name: impl Into<String>, weight: Matrix) -> Self {
        let bias = vec![0.0; weight.rows()];
        Self {
            name: name.into(),
            weight,
            bias,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_nt(x, &self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Relu {
        name: String,
    },
    /// `x + fc2(relu(fc1(x)))`. The inner layers are named `<name>.fc1` and
    /// `<name>.fc2` and can be tapped and perturbed like top-level linears.
    ResBlock {
        name: String,
        fc1: Linear,
        fc2: Linear,
    },
}

impl Layer {
    pub fn linear(name: impl Into<String>, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        Linear::new(name, weight, bias).map(Layer::Linear)
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Layer::Relu { name: name.into() }
    }

    pub fn resblock(name: impl Into<String>, w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let fc1 = Linear::new(format!("{name}.fc1"), w1, b1)?;
        let fc2 = Linear::new(format!("{name}.fc2"), w2, b2)?;
        if fc2.d_out() != fc1.d_in() || fc2.d_in() != fc1.d_out() {
            return Err(Error::Shape(format!(
                "resblock `{name}`: fc1 is {}x{}, fc2 is {}x{}",
                fc1.d_out(),
                fc1.d_in(),
                fc2.d_out(),
                fc2.d_in()
            )));
        }
        Ok(Layer::ResBlock { name, fc1, fc2 })
    }

    pub fn name(&self) -> &str {
        match self {
            Layer::Linear(l) => &l.name,
            Layer::Relu { name } | Layer::ResBlock { name, .. } => name,
        }
    }

    pub fn kind_tag(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Relu { .. } => "relu",
            Layer::ResBlock { .. } => "resblock",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    loss: LossKind,
}

/// Calibration rows and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Shape(format!(
                "batch: {} input rows vs {} target rows",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Recorded activations of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub layer_name: String,
    /// `n × d_in` layer inputs.
    pub x: Matrix,
    /// `n × d_out` layer outputs.
    pub y: Matrix,
    /// `n × d_out` per-sample output gradients; present after a backward pass.
    pub g: Option<Matrix>,
}

impl LayerTap {
    pub fn new(layer_name: impl Into<String>, x: Matrix, y: Matrix, g: Option<Matrix>) -> Result<Self> {
        let layer_name = layer_name.into();
        let n = x.rows();
        if y.rows() != n || g.as_ref().is_some_and(|g| g.rows() != n || g.cols() != y.cols()) {
            return Err(Error::Shape(format!(
                "tap `{layer_name}`: row counts of x, y, g disagree"
            )));
        }
        Ok(Self { layer_name, x, y, g })
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn grad(&self) -> Result<&Matrix> {
        self.g.as_ref().ok_or_else(|| {
            Error::State(format!(
                "tap `{}` has no gradients; run a backward pass",
                self.layer_name
            ))
        })
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss: LossKind) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut width: Option<usize> = None;
        for layer in &layers {
            let mut names = vec![layer.name().to_string()];
            if let Layer::ResBlock { fc1, fc2, .. } = layer {
                names.push(fc1.name.clone());
                names.push(fc2.name.clone());
            }
            for n in names {
                if n.is_empty() || n.chars().any(char::is_whitespace) {
                    return Err(Error::Validation(format!("invalid layer name `{n}`")));
                }
                if !seen.insert(n.clone()) {
                    return Err(Error::Validation(format!("duplicate layer name `{n}`")));
                }
            }
            let (d_in, d_out) = match layer {
                Layer::Linear(l) => (Some(l.d_in()), Some(l.d_out())),
                Layer::Relu { .. } => (None, None),
                Layer::ResBlock { fc1, .. } => (Some(fc1.d_in()), Some(fc1.d_in())),
            };
            if let (Some(w), Some(d)) = (width, d_in) {
                if w != d {
                    return Err(Error::Shape(format!(
                        "layer `{}` expects width {d}, previous layer produces {w}",
                        layer.name()
                    )));
                }
            }
            if d_out.is_some() {
                width = d_out;
            }
        }
        Ok(Self { layers, loss })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.d_in()),
            Layer::ResBlock { fc1, .. } => Some(fc1.d_in()),
            Layer::Relu { .. } => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.d_out()),
            Layer::ResBlock { fc1, .. } => Some(fc1.d_in()),
            Layer::Relu { .. } => None,
        })
    }

    /// Every linear layer in forward order, including residual-block internals.
    pub fn linear_layers(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => out.push(l),
                Layer::ResBlock { fc1, fc2, .. } => {
                    out.push(fc1);
                    out.push(fc2);
                }
                Layer::Relu { .. } => {}
            }
        }
        out
    }

    pub fn linear_names(&self) -> Vec<String> {
        self.linear_layers().iter().map(|l| l.name.clone()).collect()
    }

    pub fn linear(&self, name: &str) -> Result<&Linear> {
        self.linear_layers()
            .into_iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    fn linear_mut(&mut self, name: &str) -> Result<&mut Linear> {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) if l.name == name => return Ok(l),
                Layer::ResBlock { fc1, fc2, .. } => {
                    if fc1.name == name {
                        return Ok(fc1);
                    }
                    if fc2.name == name {
                        return Ok(fc2);
                    }
                }
                _ => {}
            }
        }
        Err(Error::UnknownLayer(name.to_string()))
    }

    /// Copy of the network with the weight of `layer_name` replaced.
    pub fn with_weight(&self, layer_name: &str, weight: Matrix) -> Result<Network> {
        let mut net = self.clone();
        let lin = net.linear_mut(layer_name)?;
        if lin.weight.shape() != weight.shape() {
            return Err(Error::Shape(format!(
                "layer `{layer_name}` weight is {:?}, replacement is {:?}",
                lin.weight.shape(),
                weight.shape()
            )));
        }
        lin.weight = weight;
        Ok(net)
    }

    /// Copy of the network with the bias of `layer_name` replaced.
    pub fn with_bias(&self, layer_name: &str, bias: Vec<f64>) -> Result<Network> {
        let mut net = self.clone();
        let lin = net.linear_mut(layer_name)?;
        if lin.bias.len() != bias.len() {
            return Err(Error::Shape(format!(
                "layer `{layer_name}` bias has {} entries, replacement has {}",
                lin.bias.len(),
                bias.len()
            )));
        }
        lin.bias = bias;
        Ok(net)
    }

    /// Smallest `|pre-activation|` seen by any relu on `inputs`; infinite for
    /// relu-free networks.
    pub fn relu_margin(&self, inputs: &Matrix) -> Result<f64> {
        let trace = self.run(inputs)?;
        let mut margin = f64::INFINITY;
        for step in &trace.steps {
            let pre = match step {
                Step::Relu { pre } => pre,
                Step::ResBlock { h, .. } => h,
                Step::Linear { .. } => continue,
            };
            margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
        Ok(margin)
    }

    pub fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| !matches!(l, Layer::Linear(_)))
    }

    /// Output of the network on `inputs`.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.run(inputs)?.output)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if let Some(d) = self.input_dim() {
            if batch.inputs.cols() != d {
                return Err(Error::Shape(format!(
                    "batch has {} input columns, network expects {d}",
                    batch.inputs.cols()
                )));
            }
        }
        let out_cols = self.output_dim().unwrap_or(batch.inputs.cols());
        if batch.targets.cols() != out_cols {
            return Err(Error::Shape(format!(
                "batch has {} target columns, network produces {out_cols}",
                batch.targets.cols()
            )));
        }
        Ok(())
    }

    fn check_taps<S: AsRef<str>>(&self, taps: &[S]) -> Result<()> {
        let names = self.linear_names();
        for t in taps {
            if !names.iter().any(|n| n == t.as_ref()) {
                return Err(Error::UnknownLayer(t.as_ref().to_string()));
            }
        }
        Ok(())
    }

    fn run(&self, inputs: &Matrix) -> Result<Trace> {
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut cur = inputs.clone();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    let y = l.apply(&cur)?;
                    steps.push(Step::Linear { x: cur, y: y.clone() });
                    cur = y;
                }
                Layer::Relu { .. } => {
                    let out = cur.map(relu);
                    steps.push(Step::Relu { pre: cur });
                    cur = out;
                }
                Layer::ResBlock { fc1, fc2, .. } => {
                    let h = fc1.apply(&cur)?;
                    let a = h.map(relu);
                    let z = fc2.apply(&a)?;
                    let out = cur.add(&z)?;
                    steps.push(Step::ResBlock { x: cur, h, a, z });
                    cur = out;
                }
            }
        }
        Ok(Trace { steps, output: cur })
    }

    /// Mean loss on `batch` and `(x, y)` taps for the requested linear layers,
    /// returned in request order.
    pub fn forward<S: AsRef<str>>(&self, batch: &Batch, tap_layers: &[S]) -> Result<(f64, Vec<LayerTap>)> {
        self.check_batch(batch)?;
        self.check_taps(tap_layers)?;
        let trace = self.run(&batch.inputs)?;
        let loss = loss_value(self.loss, &trace.output, &batch.targets);
        let taps = tap_layers
            .iter()
            .map(|name| {
                let (x, y) = self.trace_lookup(&trace, name.as_ref());
                LayerTap {
                    layer_name: name.as_ref().to_string(),
                    x: x.clone(),
                    y: y.clone(),
                    g: None,
                }
            })
            .collect();
        Ok((loss, taps))
    }

    /// Mean loss on `batch` only.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.forward::<&str>(batch, &[]).map(|(l, _)| l)
    }

    /// Like [`Network::forward`], with per-sample output gradients `g` filled in.
    pub fn backward<S: AsRef<str>>(&self, batch: &Batch, tap_layers: &[S]) -> Result<(f64, Vec<LayerTap>)> {
        self.check_batch(batch)?;
        self.check_taps(tap_layers)?;
        let trace = self.run(&batch.inputs)?;
        let loss = loss_value(self.loss, &trace.output, &batch.targets);
        let mut grad = per_sample_loss_grad(self.loss, &trace.output, &batch.targets);
        let mut grads: Vec<(String, Matrix)> = Vec::new();
        for (layer, step) in self.layers.iter().zip(&trace.steps).rev() {
            match (layer, step) {
                (Layer::Linear(l), Step::Linear { .. }) => {
                    let dx = matmul(&grad, &l.weight)?;
                    grads.push((l.name.clone(), grad));
                    grad = dx;
                }
                (Layer::Relu { .. }, Step::Relu { pre }) => {
                    grad = relu_mask(&grad, pre);
                }
                (Layer::ResBlock { fc1, fc2, .. }, Step::ResBlock { h, .. }) => {
                    let da = matmul(&grad, &fc2.weight)?;
                    let dh = relu_mask(&da, h);
                    let dx = grad.add(&matmul(&dh, &fc1.weight)?)?;
                    grads.push((fc2.name.clone(), grad));
                    grads.push((fc1.name.clone(), dh));
                    grad = dx;
                }
                _ => unreachable!("trace mirrors layer list"),
            }
        }
        let taps = tap_layers
            .iter()
            .map(|name| {
                let name = name.as_ref();
                let (x, y) = self.trace_lookup(&trace, name);
                let g = grads.iter().find(|(n, _)| n == name).map(|(_, g)| g.clone());
                LayerTap {
                    layer_name: name.to_string(),
                    x: x.clone(),
                    y: y.clone(),
                    g,
                }
            })
            .collect();
        Ok((loss, taps))
    }

    fn trace_lookup<'a>(&self, trace: &'a Trace, name: &str) -> (&'a Matrix, &'a Matrix) {
        for (layer, step) in self.layers.iter().zip(&trace.steps) {
            match (layer, step) {
                (Layer::Linear(l), Step::Linear { x, y }) if l.name == name => return (x, y),
                (Layer::ResBlock { fc1, fc2, .. }, Step::ResBlock { x, h, a, z }) => {
                    if fc1.name == name {
                        return (x, h);
                    }
                    if fc2.name == name {
                        return (a, z);
                    }
                }
                _ => {}
            }
        }
        unreachable!("tap names validated before lookup")
    }
}

/// Random MLP with layer widths `dims` (input first). Linear layers are
/// named `fc1`, `fc2`, ...; with `relu` set, hidden linears are followed by
/// `act1`, `act2`, .... Weights are `N(0, 1/d_in)`, biases `N(0, 0.01)`.
pub fn random_mlp(dims: &[usize], relu: bool, loss: LossKind, rng: &mut Rng) -> Result<Network> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::Validation(format!(
            "need at least two positive widths, got {dims:?}"
        )));
    }
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let std = 1.0 / (d_in as f64).sqrt();
        let w = Matrix::from_fn(d_out, d_in, |_, _| rng.normal() * std);
        let b = (0..d_out).map(|_| rng.normal() * 0.1).collect();
        layers.push(Layer::linear(format!("fc{}", i + 1), w, b)?);
        if relu && i + 2 < dims.len() {
            layers.push(Layer::relu(format!("act{}", i + 1)));
        }
    }
    Network::new(layers, loss)
}

/// New network with `delta` added to the weight of `layer_name`. Biases are
/// never touched.
pub fn perturb_weights(net: &Network, layer_name: &str, delta: &Matrix) -> Result<Network> {
    let w = &net.linear(layer_name)?.weight;
    let updated = w.add(delta).map_err(|_| {
        Error::Shape(format!(
            "delta {:?} does not match weight {:?} of `{layer_name}`",
            delta.shape(),
            w.shape()
        ))
    })?;
    net.with_weight(layer_name, updated)
}

struct Trace {
    steps: Vec<Step>,
    output: Matrix,
}

enum Step {
    Linear { x: Matrix, y: Matrix },
    Relu { pre: Matrix },
    ResBlock { x: Matrix, h: Matrix, a: Matrix, z: Matrix },
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn relu_mask(grad: &Matrix, pre: &Matrix) -> Matrix {
    Matrix::from_fn(grad.rows(), grad.cols(), |i, j| {
        if pre.get(i, j) > 0.0 {
            grad.get(i, j)
        } else {
            0.0
        }
    })
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Mean loss over rows.
pub fn loss_value(kind: LossKind, output: &Matrix, targets: &Matrix) -> f64 {
    let n = output.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (p, t) = (output.row(i), targets.row(i));
        total += match kind {
            LossKind::Mse => p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            LossKind::SoftmaxCrossEntropy => {
                let ls = log_softmax_row(p);
                -ls.iter().zip(t).map(|(l, c)| l * c).sum::<f64>()
            }
        };
    }
    total / n as f64
}

/// Per-sample gradient `∂ℓ_i/∂output_i` for every row.
pub fn per_sample_loss_grad(kind: LossKind, output: &Matrix, targets: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(output.rows(), output.cols());
    for i in 0..output.rows() {
        let (p, t) = (output.row(i), targets.row(i));
        match kind {
            LossKind::Mse => {
                for (o, (a, b)) in g.row_mut(i).iter_mut().zip(p.iter().zip(t)) {
                    *o = 2.0 * (a - b);
                }
            }
            LossKind::SoftmaxCrossEntropy => {
                let mass: f64 = t.iter().sum();
                let ls = log_softmax_row(p);
                for (o, (l, c)) in g.row_mut(i).iter_mut().zip(ls.iter().zip(t)) {
                    *o = l.exp() * mass - c;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn single(w: Matrix, loss: LossKind) -> Network {
        Network::new(vec![Layer::Linear(Linear::no_bias("fc", w))], loss).unwrap()
    }

    #[test]
    fn forward_identity_is_zero_loss() {
        let net = single(Matrix::identity(2), LossKind::Mse);
        let x = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let batch = Batch::new(x.clone(), x).unwrap();
        assert_eq!(net.loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn forward_scalar_mse() {
        let net = single(m(&[&[2.0]]), LossKind::Mse);
        let batch = Batch::new(m(&[&[3.0]]), m(&[&[0.0]])).unwrap();
        assert_eq!(net.loss(&batch).unwrap(), 36.0);
    }

    #[test]
    fn two_layer_relu_hand_trace() {
        // W1 = [[1,-1],[2,0]], b1 = [0,-1]; W2 = [[1,1]], b2 = [0.5]
        let net = Network::new(
            vec![
                Layer::linear("l1", m(&[&[1.0, -1.0], &[2.0, 0.0]]), vec![0.0, -1.0]).unwrap(),
                Layer::relu("r"),
                Layer::linear("l2", m(&[&[1.0, 1.0]]), vec![0.5]).unwrap(),
            ],
            LossKind::Mse,
        )
        .unwrap();
        let x = m(&[&[1.0, 2.0], &[3.0, 1.0]]);
        let t = m(&[&[0.0], &[1.0]]);
        // row 1: h = [-1, 1] -> a = [0, 1] -> y = 1.5; row 2: h = [2, 5] -> y = 7.5
        // loss = (1.5² + 6.5²)/2 = (2.25 + 42.25)/2 = 22.25
        let (loss, taps) = net.forward(&Batch::new(x, t).unwrap(), &["l1", "l2"]).unwrap();
        assert_eq!(loss, 22.25);
        assert_eq!(taps[0].y, m(&[&[-1.0, 1.0], &[2.0, 5.0]]));
        assert_eq!(taps[1].x, m(&[&[0.0, 1.0], &[2.0, 5.0]]));
        assert_eq!(taps[1].y, m(&[&[1.5], &[7.5]]));
    }

    #[test]
    fn unknown_tap_is_lookup_error() {
        let net = single(Matrix::identity(1), LossKind::Mse);
        let batch = Batch::new(m(&[&[1.0]]), m(&[&[1.0]])).unwrap();
        assert!(matches!(net.forward(&batch, &["nope"]), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn mse_output_gradient() {
        let net = single(Matrix::identity(1), LossKind::Mse);
        let batch = Batch::new(m(&[&[1.0]]), m(&[&[0.0]])).unwrap();
        let (_, taps) = net.backward(&batch, &["fc"]).unwrap();
        assert_eq!(taps[0].g.as_ref().unwrap(), &m(&[&[2.0]]));
    }

    #[test]
    fn sce_uniform_logits_gradient() {
        let k = 4;
        let net = single(Matrix::zeros(k, 2), LossKind::SoftmaxCrossEntropy);
        let mut t = Matrix::zeros(3, k);
        for i in 0..3 {
            t.set(i, i % k, 1.0);
        }
        let batch = Batch::new(m(&[&[1.0, 2.0], &[0.0, 1.0], &[3.0, -1.0]]), t.clone()).unwrap();
        let (_, taps) = net.backward(&batch, &["fc"]).unwrap();
        let g = taps[0].g.as_ref().unwrap();
        for i in 0..3 {
            for c in 0..k {
                let expect = 0.25 - t.get(i, c);
                assert!((g.get(i, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let mut rng = Rng::new(1);
        let w = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let net = single(w, LossKind::Mse);
        let x = Matrix::from_fn(5, 2, |_, _| rng.normal());
        let batch = Batch::new(x, Matrix::zeros(5, 3)).unwrap();
        let a = net.forward(&batch, &["fc"]).unwrap();
        let b = net.forward(&batch, &["fc"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_weights_cases() {
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let net = single(w.clone(), LossKind::Mse);
        assert_eq!(perturb_weights(&net, "fc", &Matrix::zeros(2, 2)).unwrap(), net);
        let zeroed = perturb_weights(&net, "fc", &w.scale(-1.0)).unwrap();
        assert_eq!(zeroed.linear("fc").unwrap().weight, Matrix::zeros(2, 2));
        assert_eq!(net.linear("fc").unwrap().weight, w);
        assert!(matches!(
            perturb_weights(&net, "fc", &Matrix::zeros(1, 2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            perturb_weights(&net, "other", &Matrix::zeros(2, 2)),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn perturbed_loss_matches_hand_built_net() {
        let w = m(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let d = m(&[&[0.1, 0.0], &[0.0, -0.3]]);
        let net = single(w.clone(), LossKind::Mse);
        let built = single(w.add(&d).unwrap(), LossKind::Mse);
        let batch = Batch::new(m(&[&[1.0, 2.0], &[-1.0, 0.5]]), m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        let via = perturb_weights(&net, "fc", &d).unwrap().loss(&batch).unwrap() - net.loss(&batch).unwrap();
        let direct = built.loss(&batch).unwrap() - net.loss(&batch).unwrap();
        assert_eq!(via, direct);
    }

    #[test]
    fn perturbed_tap_output_is_linear_in_delta() {
        let mut rng = Rng::new(4);
        let w = Matrix::from_fn(3, 4, |_, _| rng.normal());
        let d = Matrix::from_fn(3, 4, |_, _| rng.normal());
        let x = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let net = single(w, LossKind::Mse);
        let batch = Batch::new(x.clone(), Matrix::zeros(6, 3)).unwrap();
        let (_, before) = net.forward(&batch, &["fc"]).unwrap();
        let (_, after) = perturb_weights(&net, "fc", &d)
            .unwrap()
            .forward(&batch, &["fc"])
            .unwrap();
        let expect = before[0].y.add(&matmul_nt(&x, &d).unwrap()).unwrap();
        assert!(after[0].y.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn rejects_duplicate_names_and_bad_dims() {
        let a = Layer::Linear(Linear::no_bias("a", Matrix::zeros(2, 3)));
        let dup = Network::new(vec![a.clone(), Layer::relu("a")], LossKind::Mse);
        assert!(matches!(dup, Err(Error::Validation(_))));
        let bad = Network::new(
            vec![a, Layer::Linear(Linear::no_bias("b", Matrix::zeros(2, 3)))],
            LossKind::Mse,
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
    }
}
