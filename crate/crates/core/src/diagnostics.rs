//! Experiment suite: first-order fidelity, cross-layer accumulation,
//! calibration mismatch, static vs adaptive sensitivity, and proxy ranking.
//!
//! Every experiment is a pure function of its inputs and returns an
//! [`ExperimentResult`] of named scalars and series.

use std::collections::BTreeMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::calib::{sample, to_csv_string, DistSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::fmt::{fmt_f64, join_f64};
use crate::netcore::{perturb_weights, random_mlp, to_checkpoint_string, Batch, LossKind, Network};
use crate::numerics::{gram_mean, Matrix, Rng};
use crate::quantize::{
    allocate_bits, quantize_awq, quantize_obs, quantize_obs_weighted, quantize_rtn, AllocationLayer, ObsOrder,
    QuantSpec, DEFAULT_ALPHA_GRID,
};
use crate::sensitivity::{
    compute, exact_sensitivity, is_constant, predict_loss_delta, spearman, MetricKind, SensitivityReport,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub experiment: String,
    pub seed: u64,
    pub scalars: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<f64>>,
    pub config_digest: String,
}

impl ExperimentResult {
    fn new(experiment: &str, canonical: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed: 0,
            scalars: BTreeMap::new(),
            series: BTreeMap::new(),
            config_digest: digest(canonical),
        }
    }

    /// Replaces the seed and digest, e.g. with those of a full run configuration.
    pub fn with_provenance(mut self, seed: u64, config_digest: impl Into<String>) -> Self {
        self.seed = seed;
        self.config_digest = config_digest.into();
        self
    }

    fn scalar(&mut self, key: impl Into<String>, value: f64) {
        self.scalars.insert(key.into(), value);
    }

    fn series(&mut self, key: impl Into<String>, values: Vec<f64>) {
        self.series.insert(key.into(), values);
    }
}

/// Hex SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn canonical(parts: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in parts {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn spec_string(spec: &QuantSpec) -> String {
    format!(
        "bits={} granularity={} scale={} group={:?}",
        spec.bits,
        spec.granularity.tag(),
        spec.scale_policy.tag(),
        spec.group_size
    )
}

/// How one layer is quantized inside an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerQuant {
    /// Zero delta; the infinite-bit reference.
    Identity,
    Rtn(QuantSpec),
    /// Protective scaling driven by `exact_sensitivity`, default α grid.
    Awq(QuantSpec),
    Obs(QuantSpec, ObsOrder),
    ObsWeighted(QuantSpec, ObsOrder),
}

impl LayerQuant {
    fn describe(&self) -> String {
        match self {
            LayerQuant::Identity => "identity".into(),
            LayerQuant::Rtn(s) => format!("rtn {}", spec_string(s)),
            LayerQuant::Awq(s) => format!("awq {}", spec_string(s)),
            LayerQuant::Obs(s, o) => format!("obs {} order={}", spec_string(s), o.tag()),
            LayerQuant::ObsWeighted(s, o) => format!("obs-weighted {} order={}", spec_string(s), o.tag()),
        }
    }

    fn uses_data(&self) -> bool {
        !matches!(self, LayerQuant::Identity | LayerQuant::Rtn(_))
    }
}

/// Quantization delta for `weight`, with data-dependent methods reading their
/// statistics from `reference` on `batch`.
fn layer_delta(
    method: &LayerQuant,
    reference: &Network,
    batch: &Batch,
    layer: &str,
    weight: &Matrix,
) -> Result<(Matrix, Option<SensitivityReport>)> {
    let tap = if method.uses_data() {
        Some(reference.backward(batch, &[layer])?.1.remove(0))
    } else {
        None
    };
    Ok(match method {
        LayerQuant::Identity => (Matrix::zeros(weight.rows(), weight.cols()), None),
        LayerQuant::Rtn(spec) => (quantize_rtn(weight, spec)?.delta, None),
        LayerQuant::Awq(spec) => {
            let tap = tap.expect("data tap");
            let report = exact_sensitivity(&tap)?;
            let q = quantize_awq(weight, &tap, &report, spec, &DEFAULT_ALPHA_GRID)?;
            (q.delta, Some(report))
        }
        LayerQuant::Obs(spec, order) => {
            let tap = tap.expect("data tap");
            (quantize_obs(weight, &gram_mean(&tap.x)?, spec, *order)?.delta, None)
        }
        LayerQuant::ObsWeighted(spec, order) => {
            let tap = tap.expect("data tap");
            (quantize_obs_weighted(weight, &tap, spec, *order)?.delta, None)
        }
    })
}

fn net_and_batch(net: &Network, batch: &Batch) -> [(&'static str, String); 2] {
    [("model", to_checkpoint_string(net)), ("data", to_csv_string(batch))]
}

/// Least-squares slope of `log y` on `log x` over entries with both positive.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// First-order prediction against measured loss change along `ε · direction`.
pub fn run_prediction_fidelity_along(
    net: &Network,
    batch: &Batch,
    layer: &str,
    direction: &Matrix,
    eps_sweep: &[f64],
) -> Result<ExperimentResult> {
    let (base, mut taps) = net.backward(batch, &[layer])?;
    let tap = taps.remove(0);
    let mut res = ExperimentResult::new(
        "prediction-fidelity",
        &canonical(
            &[
                &net_and_batch(net, batch)[..],
                &[
                    ("layer", layer.to_string()),
                    ("direction", join_f64(direction.data(), ",")),
                    ("eps", join_f64(eps_sweep, ",")),
                ],
            ]
            .concat(),
        ),
    );
    let (mut predicted, mut measured, mut gap) = (Vec::new(), Vec::new(), Vec::new());
    for &eps in eps_sweep {
        let delta = direction.scale(eps);
        let p = predict_loss_delta(&tap, &delta)?;
        let m = perturb_weights(net, layer, &delta)?.loss(batch)? - base;
        predicted.push(p);
        measured.push(m);
        gap.push((p - m).abs());
    }
    if let Some(slope) = loglog_slope(eps_sweep, &gap) {
        res.scalar("loglog_slope", slope);
    }
    res.scalar("base_loss", base);
    res.series("eps", eps_sweep.to_vec());
    res.series("predicted", predicted);
    res.series("measured", measured);
    res.series("abs_gap", gap);
    Ok(res)
}

/// [`run_prediction_fidelity_along`] with the RTN quantization delta of
/// `layer` as the direction.
pub fn run_prediction_fidelity(
    net: &Network,
    batch: &Batch,
    layer: &str,
    spec: &QuantSpec,
    eps_sweep: &[f64],
) -> Result<ExperimentResult> {
    let direction = quantize_rtn(&net.linear(layer)?.weight, spec)?.delta;
    run_prediction_fidelity_along(net, batch, layer, &direction, eps_sweep)
}

/// Relative L1 change; the absolute L1 norm of `after` when `before` is all zero.
pub fn relative_l1_drift(before: &[f64], after: &[f64]) -> f64 {
    let num: f64 = before.iter().zip(after).map(|(a, b)| (b - a).abs()).sum();
    let den: f64 = before.iter().map(|v| v.abs()).sum();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn ordered_plan(net: &Network, plan: &[(String, LayerQuant)]) -> Result<Vec<(String, LayerQuant)>> {
    let names = net.linear_names();
    for (n, _) in plan {
        if !names.contains(n) {
            return Err(Error::UnknownLayer(n.clone()));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for (n, _) in plan {
        if !seen.insert(n) {
            return Err(Error::Validation(format!("layer `{n}` appears twice in the plan")));
        }
    }
    Ok(names
        .iter()
        .filter_map(|n| plan.iter().find(|(p, _)| p == n).cloned())
        .collect())
}

fn plan_string(plan: &[(String, LayerQuant)]) -> String {
    plan.iter()
        .map(|(n, q)| format!("{n}:{}", q.describe()))
        .collect::<Vec<_>>()
        .join(";")
}

fn all_sensitivities(net: &Network, batch: &Batch, layers: &[String]) -> Result<Vec<Vec<f64>>> {
    let (_, taps) = net.backward(batch, layers)?;
    taps.iter().map(|t| exact_sensitivity(t).map(|r| r.scores)).collect()
}

/// Quantizes the planned layers front to back. After each step the
/// `exact_sensitivity` of every later linear layer is recomputed and its
/// relative L1 drift from the clean network is recorded, along with the
/// cumulative loss change. Individual deltas apply each layer's delta alone
/// to the clean network.
///
/// Scalars: `drift:<quantized>-><downstream>`, `joint_delta`,
/// `sum_individual`, `accumulation_gap` (joint minus sum), `max_drift`.
pub fn run_cross_layer(net: &Network, batch: &Batch, plan: &[(String, LayerQuant)]) -> Result<ExperimentResult> {
    let plan = ordered_plan(net, plan)?;
    let mut res = ExperimentResult::new(
        "cross-layer",
        &canonical(&[&net_and_batch(net, batch)[..], &[("plan", plan_string(&plan))]].concat()),
    );
    res.scalars.insert("drift_norm_is_relative_l1".into(), 1.0);
    let names = net.linear_names();
    let base = net.loss(batch)?;
    let before = all_sensitivities(net, batch, &names)?;
    let mut cur = net.clone();
    let (mut cumulative, mut individual, mut drift_series) = (Vec::new(), Vec::new(), Vec::new());
    let mut max_drift: f64 = 0.0;
    for (layer, method) in &plan {
        let weight = net.linear(layer)?.weight.clone();
        let (delta, _) = layer_delta(method, &cur, batch, layer, &weight)?;
        individual.push(perturb_weights(net, layer, &delta)?.loss(batch)? - base);
        cur = perturb_weights(&cur, layer, &delta)?;
        cumulative.push(cur.loss(batch)? - base);
        let pos = names.iter().position(|n| n == layer).expect("validated layer");
        let downstream = &names[pos + 1..];
        if downstream.is_empty() {
            continue;
        }
        let after = all_sensitivities(&cur, batch, downstream)?;
        for (d, a) in downstream.iter().zip(&after) {
            let b = &before[names.iter().position(|n| n == d).expect("known layer")];
            let drift = relative_l1_drift(b, a);
            max_drift = max_drift.max(drift);
            drift_series.push(drift);
            res.scalar(format!("drift:{layer}->{d}"), drift);
        }
    }
    let joint = cumulative.last().copied().unwrap_or(0.0);
    let sum_individual: f64 = individual.iter().sum();
    res.scalar("joint_delta", joint);
    res.scalar("sum_individual", sum_individual);
    res.scalar("accumulation_gap", joint - sum_individual);
    res.scalar("max_drift", max_drift);
    res.series("cumulative_delta", cumulative);
    res.series("individual_delta", individual);
    res.series("drift", drift_series);
    Ok(res)
}

/// Computes every metric on batches drawn from `dist_calib` and
/// `dist_deploy` and reports their per-metric rank correlation
/// (`rank_corr.<metric>`, with `constant.<metric>` set to 1 when either side
/// is fully tied). Also measures the deploy-set loss damage of AWQ with
/// protection chosen on calibration data versus on deploy data.
#[allow(clippy::too_many_arguments)]
pub fn run_calibration_mismatch(
    net: &Network,
    dist_calib: &DistSpec,
    dist_deploy: &DistSpec,
    task: &TaskSpec,
    n: usize,
    layer: &str,
    spec: &QuantSpec,
    awq_metric: MetricKind,
) -> Result<ExperimentResult> {
    let calib = sample(dist_calib, task, n)?;
    let deploy = sample(dist_deploy, task, n)?;
    let mut res = ExperimentResult::new(
        "calibration-mismatch",
        &canonical(&[
            ("model", to_checkpoint_string(net)),
            ("teacher", to_checkpoint_string(&task.teacher)),
            ("calib", to_csv_string(&calib)),
            ("deploy", to_csv_string(&deploy)),
            ("layer", layer.to_string()),
            ("spec", spec_string(spec)),
            ("awq_metric", awq_metric.tag().to_string()),
        ]),
    );
    let weight = net.linear(layer)?.weight.clone();
    let tap_c = net.backward(&calib, &[layer])?.1.remove(0);
    let tap_d = net.backward(&deploy, &[layer])?.1.remove(0);
    for metric in MetricKind::ALL {
        let a = compute(metric, &tap_c, &weight)?.to_channel();
        let b = compute(metric, &tap_d, &weight)?.to_channel();
        let tag = metric.tag();
        res.scalar(format!("rank_corr.{tag}"), spearman(&a.scores, &b.scores)?);
        res.scalar(
            format!("constant.{tag}"),
            f64::from(u8::from(is_constant(&a.scores) || is_constant(&b.scores))),
        );
        res.series(format!("calib.{tag}"), a.scores);
        res.series(format!("deploy.{tag}"), b.scores);
    }
    let base = net.loss(&deploy)?;
    let report_c = compute(awq_metric, &tap_c, &weight)?.to_channel();
    let report_d = compute(awq_metric, &tap_d, &weight)?.to_channel();
    let q_c = quantize_awq(&weight, &tap_c, &report_c, spec, &DEFAULT_ALPHA_GRID)?;
    let q_d = quantize_awq(&weight, &tap_d, &report_d, spec, &DEFAULT_ALPHA_GRID)?;
    res.scalar(
        "awq_damage_calib_chosen",
        perturb_weights(net, layer, &q_c.delta)?.loss(&deploy)? - base,
    );
    res.scalar(
        "awq_damage_deploy_chosen",
        perturb_weights(net, layer, &q_d.delta)?.loss(&deploy)? - base,
    );
    res.scalar("awq_alpha_calib", q_c.awq_alpha.unwrap_or(0.0));
    res.scalar("awq_alpha_deploy", q_d.awq_alpha.unwrap_or(0.0));
    Ok(res)
}

/// Static variant: every planned layer is quantized with statistics from the
/// clean network. Adaptive variant: layers are quantized front to back, each
/// with statistics from the network in which earlier layers are already
/// quantized; with `rounds > 1` further sweeps restore one layer at a time to
/// full precision and re-quantize it against the current state of the rest.
///
/// Scalars: `static_delta`, `adaptive_delta`, per-layer
/// `rank_corr.<layer>` between clean and adaptive-state `exact_sensitivity`.
pub fn run_static_vs_adaptive(
    net: &Network,
    batch: &Batch,
    plan: &[(String, LayerQuant)],
    rounds: usize,
) -> Result<ExperimentResult> {
    if rounds == 0 {
        return Err(Error::Validation("rounds must be at least 1".into()));
    }
    let plan = ordered_plan(net, plan)?;
    let mut res = ExperimentResult::new(
        "static-vs-adaptive",
        &canonical(
            &[
                &net_and_batch(net, batch)[..],
                &[("plan", plan_string(&plan)), ("rounds", rounds.to_string())],
            ]
            .concat(),
        ),
    );
    let base = net.loss(batch)?;

    let mut static_net = net.clone();
    for (layer, method) in &plan {
        let weight = net.linear(layer)?.weight.clone();
        let (delta, _) = layer_delta(method, net, batch, layer, &weight)?;
        static_net = perturb_weights(&static_net, layer, &delta)?;
    }

    let mut adaptive = net.clone();
    let mut state_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..rounds {
        for (layer, method) in &plan {
            let weight = net.linear(layer)?.weight.clone();
            let restored = adaptive.with_weight(layer, weight.clone())?;
            let tap = restored.backward(batch, &[layer])?.1.remove(0);
            state_scores.insert(layer.clone(), exact_sensitivity(&tap)?.scores);
            let (delta, _) = layer_delta(method, &restored, batch, layer, &weight)?;
            adaptive = perturb_weights(&restored, layer, &delta)?;
        }
    }

    let names: Vec<String> = plan.iter().map(|(n, _)| n.clone()).collect();
    let clean = all_sensitivities(net, batch, &names)?;
    for (name, c) in names.iter().zip(&clean) {
        let s = &state_scores[name];
        let corr = if c.len() < 2 { 1.0 } else { spearman(c, s)? };
        res.scalar(format!("rank_corr.{name}"), corr);
    }
    let static_delta = static_net.loss(batch)? - base;
    let adaptive_delta = adaptive.loss(batch)? - base;
    res.scalar("static_delta", static_delta);
    res.scalar("adaptive_delta", adaptive_delta);
    res.scalar("adaptive_minus_static", adaptive_delta - static_delta);
    Ok(res)
}

/// Per-channel ground truth: the loss change from applying only column `j`
/// of the RTN delta, one forward pass per channel. Every metric, plus the
/// first-order prediction `|⟨GᵀX/n, Δ_j⟩|` (`first_order`), is rank-correlated
/// against `|Δloss_j|`. `interaction` is the joint delta minus the sum of the
/// single-channel deltas.
pub fn run_proxy_ranking(net: &Network, batch: &Batch, layer: &str, spec: &QuantSpec) -> Result<ExperimentResult> {
    let mut res = ExperimentResult::new(
        "proxy-ranking",
        &canonical(
            &[
                &net_and_batch(net, batch)[..],
                &[("layer", layer.to_string()), ("spec", spec_string(spec))],
            ]
            .concat(),
        ),
    );
    let (base, mut taps) = net.backward(batch, &[layer])?;
    let tap = taps.remove(0);
    let weight = net.linear(layer)?.weight.clone();
    let full = quantize_rtn(&weight, spec)?.delta;
    let d_in = weight.cols();
    let (mut damage, mut first_order) = (Vec::with_capacity(d_in), Vec::with_capacity(d_in));
    for j in 0..d_in {
        let dj = column_delta(&full, j);
        damage.push(perturb_weights(net, layer, &dj)?.loss(batch)? - base);
        first_order.push(predict_loss_delta(&tap, &dj)?.abs());
    }
    let truth: Vec<f64> = damage.iter().map(|d| d.abs()).collect();
    let joint = perturb_weights(net, layer, &full)?.loss(batch)? - base;
    let sum_single: f64 = damage.iter().sum();
    res.scalar("joint_delta", joint);
    res.scalar("sum_single", sum_single);
    res.scalar("interaction", joint - sum_single);
    res.scalar("constant.truth", f64::from(u8::from(is_constant(&truth))));
    let mut rank = |key: &str, scores: Vec<f64>| -> Result<()> {
        if d_in >= 2 {
            res.scalar(format!("rank_corr.{key}"), spearman(&scores, &truth)?);
        }
        res.scalar(format!("constant.{key}"), f64::from(u8::from(is_constant(&scores))));
        res.series(format!("score.{key}"), scores);
        Ok(())
    };
    for metric in MetricKind::ALL {
        rank(metric.tag(), compute(metric, &tap, &weight)?.channel_scores())?;
    }
    rank("first_order", first_order)?;
    res.series("damage", damage);
    res.series("abs_damage", truth);
    Ok(res)
}

/// `delta` with every column except `j` zeroed.
pub fn column_delta(delta: &Matrix, j: usize) -> Matrix {
    Matrix::from_fn(
        delta.rows(),
        delta.cols(),
        |k, c| if c == j { delta.get(k, j) } else { 0.0 },
    )
}

/// Sensitivity-driven bit allocation over every linear layer for each
/// budget. Scalars `predicted_cost@<budget>` and `bits.<layer>@<budget>`;
/// series `budget`, `predicted_cost`, `average_bits`.
pub fn run_bit_allocation(
    net: &Network,
    batch: &Batch,
    metric: MetricKind,
    spec: &QuantSpec,
    candidate_bits: &[u32],
    budgets: &[f64],
) -> Result<ExperimentResult> {
    let mut res = ExperimentResult::new(
        "bit-allocation",
        &canonical(
            &[
                &net_and_batch(net, batch)[..],
                &[
                    ("metric", metric.tag().to_string()),
                    ("spec", spec_string(spec)),
                    ("candidates", format!("{candidate_bits:?}")),
                    ("budgets", join_f64(budgets, ",")),
                ],
            ]
            .concat(),
        ),
    );
    let names = net.linear_names();
    let (_, taps) = net.backward(batch, &names)?;
    let mut layers = BTreeMap::new();
    for (name, tap) in names.iter().zip(&taps) {
        let weight = net.linear(name)?.weight.clone();
        let report = compute(metric, tap, &weight)?;
        layers.insert(name.clone(), AllocationLayer { report, weight });
    }
    let (mut costs, mut avg) = (Vec::new(), Vec::new());
    for &budget in budgets {
        let alloc = allocate_bits(&layers, spec, candidate_bits, budget)?;
        let key = fmt_f64(budget);
        res.scalar(format!("predicted_cost@{key}"), alloc.predicted_cost);
        for (layer, bits) in &alloc.bits {
            res.scalar(format!("bits.{layer}@{key}"), f64::from(*bits));
        }
        costs.push(alloc.predicted_cost);
        avg.push(alloc.average_bits);
    }
    res.series("budget", budgets.to_vec());
    res.series("predicted_cost", costs);
    res.series("average_bits", avg);
    Ok(res)
}

/// Random student/teacher instance used by the paired-trial harnesses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSetup {
    pub dims: Vec<usize>,
    pub relu: bool,
    pub loss: LossKind,
    pub n: usize,
    pub noise: f64,
}

impl TrialSetup {
    fn describe(&self) -> String {
        format!(
            "dims={:?} relu={} loss={} n={} noise={}",
            self.dims,
            self.relu,
            self.loss.tag(),
            self.n,
            fmt_f64(self.noise)
        )
    }

    /// Student network and a batch labelled by an independent teacher.
    pub fn instance(&self, seed: u64) -> Result<(Network, Batch)> {
        let student = random_mlp(&self.dims, self.relu, self.loss, &mut Rng::derived(seed, "student"))?;
        let teacher = random_mlp(&self.dims, self.relu, self.loss, &mut Rng::derived(seed, "teacher"))?;
        let dist = DistSpec::gaussian(self.dims[0], crate::numerics::derive_seed(seed, "data"));
        let batch = sample(&dist, &TaskSpec::new(teacher, self.noise)?, self.n)?;
        Ok((student, batch))
    }
}

fn run_trials<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let jobs = jobs.max(1);
    if jobs == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

fn win_counts(res: &mut ExperimentResult, a: &[f64], b: &[f64], a_name: &str, b_name: &str) {
    let (mut wa, mut wb, mut ties) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        match x.abs().total_cmp(&y.abs()) {
            std::cmp::Ordering::Less => wa += 1.0,
            std::cmp::Ordering::Greater => wb += 1.0,
            std::cmp::Ordering::Equal => ties += 1.0,
        }
    }
    res.scalar(format!("wins.{a_name}"), wa);
    res.scalar(format!("wins.{b_name}"), wb);
    res.scalar("ties", ties);
    res.scalar("trials", a.len() as f64);
}

/// Paired static/adaptive comparison over seeded random instances, every
/// linear layer quantized with `method`. A win is a smaller `|Δloss|`.
pub fn run_static_vs_adaptive_trials(
    setup: &TrialSetup,
    method: LayerQuant,
    rounds: usize,
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentResult> {
    let mut res = ExperimentResult::new(
        "static-vs-adaptive-trials",
        &canonical(&[
            ("setup", setup.describe()),
            ("method", method.describe()),
            ("rounds", rounds.to_string()),
            ("seeds", format!("{seeds:?}")),
        ]),
    );
    let pairs = run_trials(seeds, jobs, |seed| {
        let (net, batch) = setup.instance(seed)?;
        let plan: Vec<(String, LayerQuant)> = net.linear_names().into_iter().map(|n| (n, method)).collect();
        let r = run_static_vs_adaptive(&net, &batch, &plan, rounds)?;
        Ok((r.scalars["static_delta"], r.scalars["adaptive_delta"]))
    })?;
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    win_counts(&mut res, &a, &b, "static", "adaptive");
    res.series("static_delta", a);
    res.series("adaptive_delta", b);
    res.series("seed", seeds.iter().map(|&s| s as f64).collect());
    Ok(res)
}

/// Paired comparison of compensated quantization against `XᵀX/n` and against
/// the gradient-weighted `XᵀDX/n` on the output layer. Each instance gets one
/// outlier sample whose targets are offset by `outlier_offset`, which gives it
/// a large gradient norm. A win is a smaller measured `|Δloss|`.
pub fn run_weighted_obs_trials(
    setup: &TrialSetup,
    spec: &QuantSpec,
    order: ObsOrder,
    outlier_offset: f64,
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentResult> {
    let mut res = ExperimentResult::new(
        "weighted-obs-trials",
        &canonical(&[
            ("setup", setup.describe()),
            ("spec", spec_string(spec)),
            ("order", order.tag().to_string()),
            ("outlier_offset", fmt_f64(outlier_offset)),
            ("seeds", format!("{seeds:?}")),
        ]),
    );
    let pairs = run_trials(seeds, jobs, |seed| {
        let (net, mut batch) = setup.instance(seed)?;
        let out = batch.targets.cols();
        for c in 0..out {
            let v = batch.targets.get(0, c) + outlier_offset;
            batch.targets.set(0, c, v);
        }
        let layer = net.linear_names().pop().expect("at least one linear layer");
        let base = net.loss(&batch)?;
        let tap = net.backward(&batch, &[&layer])?.1.remove(0);
        let w = &net.linear(&layer)?.weight;
        let plain = quantize_obs(w, &gram_mean(&tap.x)?, spec, order)?;
        let weighted = quantize_obs_weighted(w, &tap, spec, order)?;
        Ok((
            perturb_weights(&net, &layer, &weighted.delta)?.loss(&batch)? - base,
            perturb_weights(&net, &layer, &plain.delta)?.loss(&batch)? - base,
        ))
    })?;
    let (w, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    win_counts(&mut res, &w, &p, "weighted", "plain");
    let not_worse = w.iter().zip(&p).filter(|(a, b)| a.abs() <= b.abs()).count();
    res.scalar(
        "weighted_not_worse_fraction",
        not_worse as f64 / seeds.len().max(1) as f64,
    );
    res.series("weighted_delta", w);
    res.series("plain_delta", p);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::Layer;

    fn instance(dims: &[usize], relu: bool, seed: u64) -> (Network, Batch) {
        TrialSetup {
            dims: dims.to_vec(),
            relu,
            loss: LossKind::Mse,
            n: 24,
            noise: 0.1,
        }
        .instance(seed)
        .unwrap()
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1e-2, 1e-3, 1e-4];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v * v).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn fidelity_zero_eps_is_zero() {
        let (net, batch) = instance(&[3, 4, 2], false, 1);
        let r = run_prediction_fidelity(&net, &batch, "fc1", &QuantSpec::new(4), &[0.0, 1e-2]).unwrap();
        assert_eq!(r.series["predicted"][0], 0.0);
        assert_eq!(r.series["measured"][0], 0.0);
    }

    #[test]
    fn cross_layer_identity_is_conserved() {
        let (net, batch) = instance(&[3, 5, 4, 2], true, 2);
        let plan: Vec<_> = net
            .linear_names()
            .into_iter()
            .map(|n| (n, LayerQuant::Identity))
            .collect();
        let r = run_cross_layer(&net, &batch, &plan).unwrap();
        for (k, v) in &r.scalars {
            assert!(*v == 0.0 || *v == 1.0, "{k} = {v}");
        }
        assert!(r.series["drift"].iter().all(|d| *d == 0.0));
    }

    #[test]
    fn cross_layer_single_layer() {
        let (net, batch) = instance(&[3, 2], false, 3);
        let r = run_cross_layer(&net, &batch, &[("fc1".into(), LayerQuant::Rtn(QuantSpec::new(2)))]).unwrap();
        assert!(r.series["drift"].is_empty());
        assert_eq!(r.scalars["joint_delta"], r.scalars["sum_individual"]);
    }

    #[test]
    fn drift_zero_denominator() {
        assert_eq!(relative_l1_drift(&[0.0, 0.0], &[0.5, -1.0]), 1.5);
        assert_eq!(relative_l1_drift(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_l1_drift(&[2.0, 2.0], &[3.0, 2.0]), 0.25);
    }

    #[test]
    fn static_vs_adaptive_trivial_cases() {
        let (net, batch) = instance(&[3, 5, 2], true, 4);
        let ident: Vec<_> = net
            .linear_names()
            .into_iter()
            .map(|n| (n, LayerQuant::Identity))
            .collect();
        let r = run_static_vs_adaptive(&net, &batch, &ident, 2).unwrap();
        assert_eq!(r.scalars["static_delta"], r.scalars["adaptive_delta"]);

        let (one, b1) = instance(&[4, 2], false, 5);
        let plan = [("fc1".to_string(), LayerQuant::Awq(QuantSpec::new(2)))];
        let r = run_static_vs_adaptive(&one, &b1, &plan, 3).unwrap();
        assert_eq!(r.scalars["static_delta"], r.scalars["adaptive_delta"]);
    }

    #[test]
    fn experiments_are_reproducible() {
        let (net, batch) = instance(&[3, 4, 2], true, 6);
        let spec = QuantSpec::new(3);
        let a = run_proxy_ranking(&net, &batch, "fc1", &spec).unwrap();
        let b = run_proxy_ranking(&net, &batch, "fc1", &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.config_digest.len(), 64);
    }

    #[test]
    fn proxy_ranking_constant_columns() {
        let w = Matrix::from_rows(&[[0.3, 0.3, 0.3]]).unwrap();
        let net = Network::new(vec![Layer::linear("fc", w, vec![0.0]).unwrap()], LossKind::Mse).unwrap();
        let x = Matrix::from_fn(5, 3, |i, _| i as f64 - 2.0);
        let t = Matrix::from_fn(5, 1, |i, _| i as f64 * 0.7);
        let batch = Batch::new(x, t).unwrap();
        let r = run_proxy_ranking(&net, &batch, "fc", &QuantSpec::new(2)).unwrap();
        assert_eq!(r.scalars["constant.truth"], 1.0);
        assert_eq!(r.scalars["constant.magnitude"], 1.0);
        assert_eq!(r.scalars["rank_corr.magnitude"], 0.0);
    }

    #[test]
    fn trials_parallel_matches_serial() {
        let setup = TrialSetup {
            dims: vec![3, 4, 2],
            relu: true,
            loss: LossKind::Mse,
            n: 12,
            noise: 0.1,
        };
        let seeds = [1, 2, 3, 4];
        let m = LayerQuant::Rtn(QuantSpec::new(2));
        let a = run_static_vs_adaptive_trials(&setup, m, 1, &seeds, 1).unwrap();
        let b = run_static_vs_adaptive_trials(&setup, m, 1, &seeds, 3).unwrap();
        assert_eq!(a, b);
    }
}
