//! Python bindings for `sensiq`.
//!
//! Matrices cross the boundary as lists of rows. Experiment results come back
//! as plain dicts with the same five fields the CLI writes.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sensiq::calib::{self, DistSpec, TaskSpec};
use sensiq::diagnostics::{self, ExperimentResult, LayerQuant, TrialSetup};
use sensiq::netcore::{self, Batch, LossKind};
use sensiq::numerics::{self, derive_seed, Matrix};
use sensiq::quantize::{self, ObsOrder, QuantGranularity, ScalePolicy};
use sensiq::sensitivity::{self, Granularity, MetricKind};
use sensiq::Error;

create_exception!(sensiq, SensiqError, PyException);
create_exception!(sensiq, ShapeError, SensiqError);
create_exception!(sensiq, NumericalError, SensiqError);
create_exception!(sensiq, DegenerateCurvatureError, NumericalError);
create_exception!(sensiq, UnknownLayerError, SensiqError);
create_exception!(sensiq, StateError, SensiqError);
create_exception!(sensiq, ValidationError, SensiqError);
create_exception!(sensiq, ParseError, SensiqError);
create_exception!(sensiq, ConfigError, SensiqError);
create_exception!(sensiq, IoError, SensiqError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Shape(_) => ShapeError::new_err(msg),
        Error::Numerical(_) => NumericalError::new_err(msg),
        Error::DegenerateCurvature(_) => DegenerateCurvatureError::new_err(msg),
        Error::UnknownLayer(_) => UnknownLayerError::new_err(msg),
        Error::State(_) => StateError::new_err(msg),
        Error::Validation(_) => ValidationError::new_err(msg),
        Error::Parse { .. } => ParseError::new_err(msg),
        Error::Config { .. } | Error::MissingKey(_) | Error::Usage(_) => ConfigError::new_err(msg),
        Error::Io { .. } => IoError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for sensiq::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Row-major matrix as Python sees it.
type Rows = Vec<Vec<f64>>;

fn matrix(rows: Rows) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).py()
}

fn batch(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<Batch> {
    Batch::new(matrix(inputs)?, matrix(targets)?).py()
}

fn tag_error(what: &str, tag: &str, allowed: &[&str]) -> PyErr {
    ValidationError::new_err(format!(
        "unknown {what} `{tag}`, expected one of {}",
        allowed.join(", ")
    ))
}

fn metric(tag: &str) -> PyResult<MetricKind> {
    MetricKind::from_tag(tag).ok_or_else(|| {
        let all: Vec<&str> = MetricKind::ALL.iter().map(|m| m.tag()).collect();
        tag_error("metric", tag, &all)
    })
}

fn order(tag: &str) -> PyResult<ObsOrder> {
    ObsOrder::from_tag(tag).ok_or_else(|| tag_error("order", tag, &["natural", "desc-diag"]))
}

fn loss_kind(tag: &str) -> PyResult<LossKind> {
    LossKind::from_tag(tag).ok_or_else(|| tag_error("loss", tag, &["mse", "sce"]))
}

fn layer_quant(method: &str, spec: &QuantSpec, order_tag: &str) -> PyResult<LayerQuant> {
    let s = spec.inner;
    Ok(match method {
        "identity" => LayerQuant::Identity,
        "rtn" => LayerQuant::Rtn(s),
        "awq" => LayerQuant::Awq(s),
        "obs" => LayerQuant::Obs(s, order(order_tag)?),
        "obs-weighted" => LayerQuant::ObsWeighted(s, order(order_tag)?),
        _ => {
            return Err(tag_error(
                "method",
                method,
                &["identity", "rtn", "awq", "obs", "obs-weighted"],
            ))
        }
    })
}

fn result_dict<'py>(py: Python<'py>, r: ExperimentResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("experiment", r.experiment)?;
    d.set_item("seed", r.seed)?;
    d.set_item("scalars", r.scalars)?;
    d.set_item("series", r.series)?;
    d.set_item("config_digest", r.config_digest)?;
    Ok(d)
}

/// A feed-forward network of linear, relu and residual layers.
#[pyclass(module = "sensiq", name = "Network", skip_from_py_object)]
#[derive(Clone)]
struct Network {
    inner: netcore::Network,
}

#[pymethods]
impl Network {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: netcore::load_checkpoint(path).py()?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: netcore::parse_checkpoint(text).py()?,
        })
    }

    /// Random MLP with layers `fc1, fc2, ...` and relu between them.
    #[staticmethod]
    #[pyo3(signature = (dims, relu = true, loss = "mse", seed = 0))]
    fn random(dims: Vec<usize>, relu: bool, loss: &str, seed: u64) -> PyResult<Self> {
        let mut rng = numerics::Rng::new(seed);
        Ok(Self {
            inner: netcore::random_mlp(&dims, relu, loss_kind(loss)?, &mut rng).py()?,
        })
    }

    fn to_text(&self) -> String {
        netcore::to_checkpoint_string(&self.inner)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        netcore::save_checkpoint(&self.inner, path).py()
    }

    #[getter]
    fn loss_kind(&self) -> &'static str {
        self.inner.loss_kind().tag()
    }

    #[getter]
    fn input_dim(&self) -> Option<usize> {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> Option<usize> {
        self.inner.output_dim()
    }

    /// `(name, kind)` for every top-level layer.
    fn layers(&self) -> Vec<(String, &'static str)> {
        self.inner
            .layers()
            .iter()
            .map(|l| (l.name().to_string(), l.kind_tag()))
            .collect()
    }

    fn linear_names(&self) -> Vec<String> {
        self.inner.linear_names()
    }

    fn weight(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.linear(name).py()?.weight.to_rows())
    }

    fn bias(&self, name: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.linear(name).py()?.bias.clone())
    }

    fn with_weight(&self, name: &str, weight: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_weight(name, matrix(weight)?).py()?,
        })
    }

    fn with_bias(&self, name: &str, bias: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_bias(name, bias).py()?,
        })
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.predict(&matrix(inputs)?).py()?.to_rows())
    }

    fn loss(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.loss(&batch(inputs, targets)?).py()
    }

    /// Mean loss and activation taps (no gradients). `taps` defaults to every
    /// linear layer.
    #[pyo3(signature = (inputs, targets, taps = None))]
    fn forward(
        &self,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        taps: Option<Vec<String>>,
    ) -> PyResult<(f64, Vec<LayerTap>)> {
        let names = taps.unwrap_or_else(|| self.inner.linear_names());
        let (loss, t) = self.inner.forward(&batch(inputs, targets)?, &names).py()?;
        Ok((loss, t.into_iter().map(|inner| LayerTap { inner }).collect()))
    }

    /// Like `forward`, with per-sample output gradients on each tap.
    #[pyo3(signature = (inputs, targets, taps = None))]
    fn backward(
        &self,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        taps: Option<Vec<String>>,
    ) -> PyResult<(f64, Vec<LayerTap>)> {
        let names = taps.unwrap_or_else(|| self.inner.linear_names());
        let (loss, t) = self.inner.backward(&batch(inputs, targets)?, &names).py()?;
        Ok((loss, t.into_iter().map(|inner| LayerTap { inner }).collect()))
    }

    fn __repr__(&self) -> String {
        let kinds: Vec<String> = self.layers().into_iter().map(|(n, k)| format!("{n}:{k}")).collect();
        format!("Network([{}], loss={})", kinds.join(", "), self.loss_kind())
    }
}

/// Inputs, outputs and optional output gradients captured at one linear layer.
#[pyclass(module = "sensiq", name = "LayerTap", frozen)]
struct LayerTap {
    inner: netcore::LayerTap,
}

#[pymethods]
impl LayerTap {
    #[new]
    #[pyo3(signature = (layer_name, x, y, g = None))]
    fn new(layer_name: String, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, g: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let g = g.map(matrix).transpose()?;
        Ok(Self {
            inner: netcore::LayerTap::new(layer_name, matrix(x)?, matrix(y)?, g).py()?,
        })
    }

    #[getter]
    fn layer_name(&self) -> &str {
        &self.inner.layer_name
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.x.to_rows()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        self.inner.y.to_rows()
    }

    #[getter]
    fn g(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.g.as_ref().map(Matrix::to_rows)
    }

    fn __repr__(&self) -> String {
        format!(
            "LayerTap({}, n={}, gradients={})",
            self.inner.layer_name,
            self.inner.n_samples(),
            self.inner.g.is_some()
        )
    }
}

#[pyclass(module = "sensiq", name = "SensitivityReport", frozen)]
struct SensitivityReport {
    inner: sensitivity::SensitivityReport,
}

#[pymethods]
impl SensitivityReport {
    #[getter]
    fn layer_name(&self) -> &str {
        &self.inner.layer_name
    }

    #[getter]
    fn metric(&self) -> &'static str {
        self.inner.metric.tag()
    }

    /// Raw scores: one per channel, or row-major per weight entry.
    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.scores.clone()
    }

    /// `None` for channel-level reports, `(rows, cols)` for weight-level ones.
    #[getter]
    fn shape(&self) -> Option<(usize, usize)> {
        match self.inner.granularity {
            Granularity::Channel => None,
            Granularity::Weight { rows, cols } => Some((rows, cols)),
        }
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples
    }

    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    fn channel_scores(&self) -> Vec<f64> {
        self.inner.channel_scores()
    }

    fn __repr__(&self) -> String {
        format!(
            "SensitivityReport({}, {}, {} scores)",
            self.inner.layer_name,
            self.metric(),
            self.inner.scores.len()
        )
    }
}

/// Symmetric integer grid description.
#[pyclass(module = "sensiq", name = "QuantSpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct QuantSpec {
    inner: quantize::QuantSpec,
}

#[pymethods]
impl QuantSpec {
    #[new]
    #[pyo3(signature = (bits = 4, granularity = "per-tensor", scale_policy = "absmax", group_size = None))]
    fn new(bits: u32, granularity: &str, scale_policy: &str, group_size: Option<usize>) -> PyResult<Self> {
        let granularity = QuantGranularity::from_tag(granularity)
            .ok_or_else(|| tag_error("granularity", granularity, &["per-tensor", "per-channel-in"]))?;
        let scale_policy = ScalePolicy::from_tag(scale_policy)
            .ok_or_else(|| tag_error("scale policy", scale_policy, &["absmax", "grid-search-mse"]))?;
        let inner = quantize::QuantSpec {
            granularity,
            scale_policy,
            group_size,
            ..quantize::QuantSpec::new(bits)
        };
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits
    }

    #[getter]
    fn granularity(&self) -> &'static str {
        self.inner.granularity.tag()
    }

    #[getter]
    fn scale_policy(&self) -> &'static str {
        self.inner.scale_policy.tag()
    }

    #[getter]
    fn group_size(&self) -> Option<usize> {
        self.inner.group_size
    }

    #[getter]
    fn qmin(&self) -> i64 {
        self.inner.qmin()
    }

    #[getter]
    fn qmax(&self) -> i64 {
        self.inner.qmax()
    }

    fn __repr__(&self) -> String {
        let group = self
            .inner
            .group_size
            .map(|g| format!(", group_size={g}"))
            .unwrap_or_default();
        format!(
            "QuantSpec(bits={}, granularity={}, scale_policy={}{group})",
            self.inner.bits,
            self.granularity(),
            self.scale_policy()
        )
    }
}

#[pyclass(module = "sensiq", name = "QuantizedLayer", frozen)]
struct QuantizedLayer {
    inner: quantize::QuantizedLayer,
}

#[pymethods]
impl QuantizedLayer {
    #[getter]
    fn spec(&self) -> QuantSpec {
        QuantSpec { inner: self.inner.spec }
    }

    /// Integer grid levels.
    #[getter]
    fn q_weight(&self) -> Vec<Vec<i64>> {
        self.inner
            .q_weight
            .to_rows()
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as i64).collect())
            .collect()
    }

    #[getter]
    fn scales(&self) -> Vec<f64> {
        self.inner.scales.clone()
    }

    #[getter]
    fn zero_groups(&self) -> Vec<usize> {
        self.inner.zero_groups.clone()
    }

    #[getter]
    fn awq_scales(&self) -> Option<Vec<f64>> {
        self.inner.awq_scales.clone()
    }

    #[getter]
    fn awq_alpha(&self) -> Option<f64> {
        self.inner.awq_alpha
    }

    /// Dequantized minus original weight.
    #[getter]
    fn delta(&self) -> Vec<Vec<f64>> {
        self.inner.delta.to_rows()
    }

    fn dequantized(&self) -> Vec<Vec<f64>> {
        self.inner.dequantized().to_rows()
    }
}

#[pyfunction]
fn metric_names() -> Vec<&'static str> {
    MetricKind::ALL.iter().map(|m| m.tag()).collect()
}

/// Sensitivity scores of one metric for the layer captured in `tap`.
#[pyfunction]
fn compute_sensitivity(metric_tag: &str, tap: &LayerTap, weight: Vec<Vec<f64>>) -> PyResult<SensitivityReport> {
    Ok(SensitivityReport {
        inner: sensitivity::compute(metric(metric_tag)?, &tap.inner, &matrix(weight)?).py()?,
    })
}

/// Spearman correlation of two score vectors or two reports' channel scores.
#[pyfunction]
fn rank_correlation(a: &Bound<'_, PyAny>, b: &Bound<'_, PyAny>) -> PyResult<f64> {
    fn scores(v: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        match v.cast::<SensitivityReport>() {
            Ok(r) => Ok(r.get().inner.channel_scores()),
            Err(_) => v.extract(),
        }
    }
    sensitivity::spearman(&scores(a)?, &scores(b)?).py()
}

/// First-order loss change predicted for a weight perturbation.
#[pyfunction]
fn predict_loss_delta(tap: &LayerTap, delta: Vec<Vec<f64>>) -> PyResult<f64> {
    sensitivity::predict_loss_delta(&tap.inner, &matrix(delta)?).py()
}

#[pyfunction]
fn gram_mean(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(numerics::gram_mean(&matrix(x)?).py()?.to_rows())
}

#[pyfunction]
fn seed_for(seed: u64, tag: &str) -> u64 {
    derive_seed(seed, tag)
}

#[pyfunction]
fn quantize_rtn(weight: Vec<Vec<f64>>, spec: &QuantSpec) -> PyResult<QuantizedLayer> {
    Ok(QuantizedLayer {
        inner: quantize::quantize_rtn(&matrix(weight)?, &spec.inner).py()?,
    })
}

/// Activation-aware protective scaling; channel scores come from `metric`.
#[pyfunction]
#[pyo3(signature = (weight, tap, spec, metric = "exact-sensitivity", alpha_grid = None))]
fn quantize_awq(
    weight: Vec<Vec<f64>>,
    tap: &LayerTap,
    spec: &QuantSpec,
    metric: &str,
    alpha_grid: Option<Vec<f64>>,
) -> PyResult<QuantizedLayer> {
    let w = matrix(weight)?;
    let report = sensitivity::compute(self::metric(metric)?, &tap.inner, &w).py()?;
    let grid = alpha_grid.unwrap_or_else(|| quantize::DEFAULT_ALPHA_GRID.to_vec());
    Ok(QuantizedLayer {
        inner: quantize::quantize_awq(&w, &tap.inner, &report, &spec.inner, &grid).py()?,
    })
}

/// Error-compensating quantization against curvature `hessian`.
#[pyfunction]
#[pyo3(signature = (weight, hessian, spec, order = "desc-diag"))]
fn quantize_obs(
    weight: Vec<Vec<f64>>,
    hessian: Vec<Vec<f64>>,
    spec: &QuantSpec,
    order: &str,
) -> PyResult<QuantizedLayer> {
    Ok(QuantizedLayer {
        inner: quantize::quantize_obs(&matrix(weight)?, &matrix(hessian)?, &spec.inner, self::order(order)?).py()?,
    })
}

/// Compensated quantization with gradient-norm sample weights.
#[pyfunction]
#[pyo3(signature = (weight, tap, spec, order = "desc-diag"))]
fn quantize_obs_weighted(
    weight: Vec<Vec<f64>>,
    tap: &LayerTap,
    spec: &QuantSpec,
    order: &str,
) -> PyResult<QuantizedLayer> {
    Ok(QuantizedLayer {
        inner: quantize::quantize_obs_weighted(&matrix(weight)?, &tap.inner, &spec.inner, self::order(order)?).py()?,
    })
}

/// Greedy per-layer bit-widths with mean bit-width at most `budget`.
#[pyfunction]
#[pyo3(signature = (net, inputs, targets, spec, budget, metric = "exact-sensitivity", candidate_bits = vec![2, 3, 4]))]
#[allow(clippy::too_many_arguments)]
fn allocate_bits<'py>(
    py: Python<'py>,
    net: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    spec: &QuantSpec,
    budget: f64,
    metric: &str,
    candidate_bits: Vec<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = self::metric(metric)?;
    let names = net.inner.linear_names();
    let (_, taps) = net.inner.backward(&batch(inputs, targets)?, &names).py()?;
    let mut layers = BTreeMap::new();
    for tap in &taps {
        let weight = net.inner.linear(&tap.layer_name).py()?.weight.clone();
        let report = sensitivity::compute(m, tap, &weight).py()?;
        layers.insert(tap.layer_name.clone(), quantize::AllocationLayer { report, weight });
    }
    let a = quantize::allocate_bits(&layers, &spec.inner, &candidate_bits, budget).py()?;
    let d = PyDict::new(py);
    d.set_item("bits", a.bits)?;
    d.set_item("budget", a.budget)?;
    d.set_item("average_bits", a.average_bits)?;
    d.set_item("predicted_cost", a.predicted_cost)?;
    Ok(d)
}

#[pyfunction]
fn load_csv(path: &str) -> PyResult<(Rows, Rows)> {
    let b = calib::load_csv(path).py()?;
    Ok((b.inputs.to_rows(), b.targets.to_rows()))
}

#[pyfunction]
fn save_csv(path: &str, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<()> {
    calib::save_csv(&batch(inputs, targets)?, path).py()
}

/// Gaussian inputs labelled by `teacher` plus gaussian target noise.
#[pyfunction]
#[pyo3(signature = (teacher, n, seed = 0, noise = 0.1))]
fn sample_gaussian(teacher: &Network, n: usize, seed: u64, noise: f64) -> PyResult<(Rows, Rows)> {
    let dim = teacher
        .inner
        .input_dim()
        .ok_or_else(|| ValidationError::new_err("teacher has no linear layers"))?;
    let task = TaskSpec::new(teacher.inner.clone(), noise).py()?;
    let b = calib::sample(&DistSpec::gaussian(dim, seed), &task, n).py()?;
    Ok((b.inputs.to_rows(), b.targets.to_rows()))
}

#[pyfunction]
#[pyo3(signature = (net, inputs, targets, layer, spec, eps = vec![1e-1, 1e-2, 1e-3, 1e-4]))]
fn run_prediction_fidelity<'py>(
    py: Python<'py>,
    net: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    layer: &str,
    spec: &QuantSpec,
    eps: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let b = batch(inputs, targets)?;
    let r = diagnostics::run_prediction_fidelity(&net.inner, &b, layer, &spec.inner, &eps).py()?;
    result_dict(py, r)
}

fn plan(net: &Network, layers: Option<Vec<String>>, q: LayerQuant) -> Vec<(String, LayerQuant)> {
    layers
        .unwrap_or_else(|| net.inner.linear_names())
        .into_iter()
        .map(|l| (l, q))
        .collect()
}

/// Quantizes `layers` (default: every linear layer) in order and reports
/// joint versus summed loss changes and downstream score drift.
#[pyfunction]
#[pyo3(signature = (net, inputs, targets, spec, method = "rtn", layers = None, order = "desc-diag"))]
#[allow(clippy::too_many_arguments)]
fn run_cross_layer<'py>(
    py: Python<'py>,
    net: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    spec: &QuantSpec,
    method: &str,
    layers: Option<Vec<String>>,
    order: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = plan(net, layers, layer_quant(method, spec, order)?);
    let r = diagnostics::run_cross_layer(&net.inner, &batch(inputs, targets)?, &p).py()?;
    result_dict(py, r)
}

#[pyfunction]
#[pyo3(signature = (net, inputs, targets, spec, method = "awq", rounds = 1, layers = None, order = "desc-diag"))]
#[allow(clippy::too_many_arguments)]
fn run_static_vs_adaptive<'py>(
    py: Python<'py>,
    net: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    spec: &QuantSpec,
    method: &str,
    rounds: usize,
    layers: Option<Vec<String>>,
    order: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = plan(net, layers, layer_quant(method, spec, order)?);
    let r = diagnostics::run_static_vs_adaptive(&net.inner, &batch(inputs, targets)?, &p, rounds).py()?;
    result_dict(py, r)
}

#[pyfunction]
fn run_proxy_ranking<'py>(
    py: Python<'py>,
    net: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    layer: &str,
    spec: &QuantSpec,
) -> PyResult<Bound<'py, PyDict>> {
    let r = diagnostics::run_proxy_ranking(&net.inner, &batch(inputs, targets)?, layer, &spec.inner).py()?;
    result_dict(py, r)
}

#[pyfunction]
#[pyo3(signature = (net, inputs, targets, spec, budgets, metric = "exact-sensitivity", candidate_bits = vec![2, 3, 4]))]
#[allow(clippy::too_many_arguments)]
fn run_bit_allocation<'py>(
    py: Python<'py>,
    net: &Network,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    spec: &QuantSpec,
    budgets: Vec<f64>,
    metric: &str,
    candidate_bits: Vec<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let b = batch(inputs, targets)?;
    let r = diagnostics::run_bit_allocation(
        &net.inner,
        &b,
        self::metric(metric)?,
        &spec.inner,
        &candidate_bits,
        &budgets,
    )
    .py()?;
    result_dict(py, r)
}

/// Scores and protective scaling on gaussian calibration data versus a
/// deployment distribution whose mean moves by `shift` (scale untouched
/// unless `scale_mult` is given).
#[pyfunction]
#[pyo3(signature = (
    net, teacher, layer, spec, shift, scale_mult = None, n = 256, seed = 0, noise = 0.1,
    awq_metric = "exact-sensitivity",
))]
#[allow(clippy::too_many_arguments)]
fn run_calibration_mismatch<'py>(
    py: Python<'py>,
    net: &Network,
    teacher: &Network,
    layer: &str,
    spec: &QuantSpec,
    shift: Vec<f64>,
    scale_mult: Option<Vec<f64>>,
    n: usize,
    seed: u64,
    noise: f64,
    awq_metric: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let calib = DistSpec::gaussian(shift.len(), derive_seed(seed, "calibration"));
    let mult = scale_mult.unwrap_or_else(|| vec![1.0; shift.len()]);
    let deploy = calib::shift(&calib, &shift, &mult)
        .py()?
        .with_seed(derive_seed(seed, "deployment"));
    let task = TaskSpec::new(teacher.inner.clone(), noise).py()?;
    let r = diagnostics::run_calibration_mismatch(
        &net.inner,
        &calib,
        &deploy,
        &task,
        n,
        layer,
        &spec.inner,
        metric(awq_metric)?,
    )
    .py()?;
    let digest = r.config_digest.clone();
    result_dict(py, r.with_provenance(seed, digest))
}

fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    (0..trials).map(|t| derive_seed(seed, &format!("trial-{t}"))).collect()
}

/// Paired static/adaptive comparison over random student/teacher instances.
#[pyfunction]
#[pyo3(signature = (
    dims, spec, method = "awq", rounds = 1, trials = 50, seed = 0, n = 256, noise = 0.1, relu = true,
    loss = "mse", order = "desc-diag", jobs = 1,
))]
#[allow(clippy::too_many_arguments)]
fn run_static_vs_adaptive_trials<'py>(
    py: Python<'py>,
    dims: Vec<usize>,
    spec: &QuantSpec,
    method: &str,
    rounds: usize,
    trials: usize,
    seed: u64,
    n: usize,
    noise: f64,
    relu: bool,
    loss: &str,
    order: &str,
    jobs: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let setup = TrialSetup {
        dims,
        relu,
        loss: loss_kind(loss)?,
        n,
        noise,
    };
    let q = layer_quant(method, spec, order)?;
    let seeds = trial_seeds(seed, trials);
    let r = py
        .detach(|| diagnostics::run_static_vs_adaptive_trials(&setup, q, rounds, &seeds, jobs))
        .py()?;
    let digest = r.config_digest.clone();
    result_dict(py, r.with_provenance(seed, digest))
}

/// Paired plain versus gradient-weighted compensated quantization.
#[pyfunction]
#[pyo3(signature = (
    dims, spec, outlier_offset = 10.0, trials = 50, seed = 0, n = 256, noise = 0.1, relu = true,
    loss = "mse", order = "desc-diag", jobs = 1,
))]
#[allow(clippy::too_many_arguments)]
fn run_weighted_obs_trials<'py>(
    py: Python<'py>,
    dims: Vec<usize>,
    spec: &QuantSpec,
    outlier_offset: f64,
    trials: usize,
    seed: u64,
    n: usize,
    noise: f64,
    relu: bool,
    loss: &str,
    order: &str,
    jobs: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let setup = TrialSetup {
        dims,
        relu,
        loss: loss_kind(loss)?,
        n,
        noise,
    };
    let o = self::order(order)?;
    let seeds = trial_seeds(seed, trials);
    let r = py
        .detach(|| diagnostics::run_weighted_obs_trials(&setup, &spec.inner, o, outlier_offset, &seeds, jobs))
        .py()?;
    let digest = r.config_digest.clone();
    result_dict(py, r.with_provenance(seed, digest))
}

/// Runs the command-line front end with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("sensiq".to_string()).chain(args).collect();
    py.detach(|| sensiq::cli::main_with_args(argv))
}

#[pymodule]
#[pyo3(name = "sensiq")]
fn sensiq_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", sensiq::cli::VERSION)?;
    m.add("SensiqError", py.get_type::<SensiqError>())?;
    m.add("ShapeError", py.get_type::<ShapeError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add("DegenerateCurvatureError", py.get_type::<DegenerateCurvatureError>())?;
    m.add("UnknownLayerError", py.get_type::<UnknownLayerError>())?;
    m.add("StateError", py.get_type::<StateError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add("ParseError", py.get_type::<ParseError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("IoError", py.get_type::<IoError>())?;

    m.add_class::<Network>()?;
    m.add_class::<LayerTap>()?;
    m.add_class::<SensitivityReport>()?;
    m.add_class::<QuantSpec>()?;
    m.add_class::<QuantizedLayer>()?;

    m.add_function(wrap_pyfunction!(metric_names, m)?)?;
    m.add_function(wrap_pyfunction!(compute_sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(rank_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(predict_loss_delta, m)?)?;
    m.add_function(wrap_pyfunction!(gram_mean, m)?)?;
    m.add_function(wrap_pyfunction!(seed_for, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_rtn, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_awq, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_obs, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_obs_weighted, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_bits, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(save_csv, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(run_prediction_fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(run_cross_layer, m)?)?;
    m.add_function(wrap_pyfunction!(run_static_vs_adaptive, m)?)?;
    m.add_function(wrap_pyfunction!(run_proxy_ranking, m)?)?;
    m.add_function(wrap_pyfunction!(run_bit_allocation, m)?)?;
    m.add_function(wrap_pyfunction!(run_calibration_mismatch, m)?)?;
    m.add_function(wrap_pyfunction!(run_static_vs_adaptive_trials, m)?)?;
    m.add_function(wrap_pyfunction!(run_weighted_obs_trials, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
