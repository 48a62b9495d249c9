//! Channel and weight sensitivity metrics.
//!
//! All expectations are empirical means over the `n` calibration rows of a
//! tap. `G` is the per-sample output gradient recorded by
//! [`Network::backward`](crate::netcore::Network::backward).
//!
//! | metric              | granularity | score                                   |
//! |---------------------|-------------|-----------------------------------------|
//! | `exact-sensitivity` | channel     | `‖GᵀX_{:,j}‖² / n` via the full `GGᵀ`   |
//! | `quadratic-diagD`   | channel     | `(XᵀDX)_{jj} / n`, `D = diag(‖G_i‖²)`   |
//! | `magnitude`         | channel     | `‖X_{:,j}‖² / n`                        |
//! | `covariance`        | channel     | `(XᵀX)_{jj} / n`                        |
//! | `fisher-diag`       | weight      | `Σ_i (G_{ik} X_{ij})² / n`              |
//! | `grad-saliency`     | weight      | `|(GᵀX / n)_{kj}|`                      |
//! | `obd-weight`        | weight      | `½ W_{kj}² (XᵀX / n)_{jj}`              |
//!
//! `exact-sensitivity` and `quadratic-diagD` differ by the cross-sample terms
//! `Σ_{i≠i'} ⟨G_i, G_i'⟩ X_{ij} X_{i'j} / n`; both are kept.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::netcore::LayerTap;
use crate::numerics::{gram_mean, matmul_nt, matmul_tn, row_norms_sq, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    ExactSensitivity,
    QuadraticDiagD,
    Magnitude,
    Covariance,
    FisherDiag,
    GradSaliency,
    ObdWeight,
}

impl MetricKind {
    pub const ALL: [MetricKind; 7] = [
        MetricKind::ExactSensitivity,
        MetricKind::QuadraticDiagD,
        MetricKind::Magnitude,
        MetricKind::Covariance,
        MetricKind::FisherDiag,
        MetricKind::GradSaliency,
        MetricKind::ObdWeight,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            MetricKind::ExactSensitivity => "exact-sensitivity",
            MetricKind::QuadraticDiagD => "quadratic-diagD",
            MetricKind::Magnitude => "magnitude",
            MetricKind::Covariance => "covariance",
            MetricKind::FisherDiag => "fisher-diag",
            MetricKind::GradSaliency => "grad-saliency",
            MetricKind::ObdWeight => "obd-weight",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn is_weight_level(self) -> bool {
        matches!(
            self,
            MetricKind::FisherDiag | MetricKind::GradSaliency | MetricKind::ObdWeight
        )
    }

    pub fn needs_gradients(self) -> bool {
        !matches!(
            self,
            MetricKind::Magnitude | MetricKind::Covariance | MetricKind::ObdWeight
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One score per input channel.
    Channel,
    /// Row-major `rows × cols` scores, one per weight entry.
    Weight { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub layer_name: String,
    pub metric: MetricKind,
    pub granularity: Granularity,
    pub scores: Vec<f64>,
    pub n_samples: usize,
    pub meta: BTreeMap<String, String>,
}

impl SensitivityReport {
    fn channel(layer_name: &str, metric: MetricKind, scores: Vec<f64>, n: usize) -> Self {
        Self {
            layer_name: layer_name.to_string(),
            metric,
            granularity: Granularity::Channel,
            scores,
            n_samples: n,
            meta: BTreeMap::new(),
        }
    }

    fn weight(layer_name: &str, metric: MetricKind, scores: Matrix, n: usize) -> Self {
        let (rows, cols) = scores.shape();
        Self {
            layer_name: layer_name.to_string(),
            metric,
            granularity: Granularity::Weight { rows, cols },
            scores: scores.into_data(),
            n_samples: n,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    /// Per-input-channel view. Weight-level scores reduce over output rows:
    /// a sum for `fisher-diag` and `obd-weight`, the column 2-norm of the
    /// gradient for `grad-saliency`.
    pub fn channel_scores(&self) -> Vec<f64> {
        match self.granularity {
            Granularity::Channel => self.scores.clone(),
            Granularity::Weight { rows, cols } => {
                let mut out = vec![0.0; cols];
                let squared = self.metric == MetricKind::GradSaliency;
                for k in 0..rows {
                    for (j, o) in out.iter_mut().enumerate() {
                        let s = self.scores[k * cols + j];
                        *o += if squared { s * s } else { s };
                    }
                }
                if squared {
                    out.iter_mut().for_each(|v| *v = v.sqrt());
                }
                out
            }
        }
    }

    /// Channel-granularity copy of a weight-level report.
    pub fn to_channel(&self) -> SensitivityReport {
        SensitivityReport {
            layer_name: self.layer_name.clone(),
            metric: self.metric,
            granularity: Granularity::Channel,
            scores: self.channel_scores(),
            n_samples: self.n_samples,
            meta: self.meta.clone(),
        }
    }
}

fn merge_taps(taps: &[LayerTap], need_g: bool) -> Result<(String, Matrix, Option<Matrix>)> {
    let first = taps
        .first()
        .ok_or_else(|| Error::Shape("at least one tap is required".into()))?;
    if taps.iter().any(|t| t.layer_name != first.layer_name) {
        return Err(Error::Shape("taps belong to different layers".into()));
    }
    if taps.len() == 1 {
        let g = if need_g {
            Some(first.grad()?.clone())
        } else {
            first.g.clone()
        };
        return Ok((first.layer_name.clone(), first.x.clone(), g));
    }
    let xs: Vec<&Matrix> = taps.iter().map(|t| &t.x).collect();
    let x = Matrix::vstack(&xs)?;
    let g = if need_g {
        let gs = taps.iter().map(|t| t.grad()).collect::<Result<Vec<_>>>()?;
        Some(Matrix::vstack(&gs)?)
    } else {
        None
    };
    Ok((first.layer_name.clone(), x, g))
}

fn check_weight(weight: &Matrix, x: &Matrix, g: Option<&Matrix>) -> Result<()> {
    if weight.cols() != x.cols() || g.is_some_and(|g| g.cols() != weight.rows()) {
        return Err(Error::Shape(format!(
            "weight {:?} does not match tap dims (d_in {})",
            weight.shape(),
            x.cols()
        )));
    }
    Ok(())
}

/// `α_j = ‖GᵀX_{:,j}‖² / n`, evaluated as the diagonal of `Xᵀ(GGᵀ)X / n`.
pub fn exact_sensitivity(tap: &LayerTap) -> Result<SensitivityReport> {
    let g = tap.grad()?;
    let x = &tap.x;
    let n = x.rows();
    let inv_n = 1.0 / n as f64;
    let gram = matmul_nt(g, g)?;
    let kx = crate::numerics::matmul(&gram, x)?;
    let scores = (0..x.cols())
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                acc += x.get(i, j) * kx.get(i, j);
            }
            // the quadratic form is PSD; clamp rounding below zero
            (acc * inv_n).max(0.0)
        })
        .collect();
    Ok(
        SensitivityReport::channel(&tap.layer_name, MetricKind::ExactSensitivity, scores, n)
            .with_meta("estimator", "full-gram"),
    )
}

/// `(XᵀDX)_{jj} / n` with `D = diag(‖G_{i,:}‖²)`.
pub fn quadratic_diag_d(tap: &LayerTap) -> Result<SensitivityReport> {
    let g = tap.grad()?;
    let x = &tap.x;
    let n = x.rows();
    let inv_n = 1.0 / n as f64;
    let d = row_norms_sq(g);
    let mut scores = vec![0.0; x.cols()];
    for (i, di) in d.iter().enumerate() {
        for (s, v) in scores.iter_mut().zip(x.row(i)) {
            *s += di * v * v;
        }
    }
    scores.iter_mut().for_each(|s| *s *= inv_n);
    Ok(
        SensitivityReport::channel(&tap.layer_name, MetricKind::QuadraticDiagD, scores, n)
            .with_meta("estimator", "diagonal-D"),
    )
}

fn column_energy(x: &Matrix) -> Vec<f64> {
    let inv_n = 1.0 / x.rows() as f64;
    let mut scores = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (s, v) in scores.iter_mut().zip(x.row(i)) {
            *s += v * v;
        }
    }
    scores.iter_mut().for_each(|s| *s *= inv_n);
    scores
}

/// `‖X_{:,j}‖² / n`.
pub fn magnitude(tap: &LayerTap) -> Result<SensitivityReport> {
    if tap.x.rows() == 0 {
        return Err(Error::Shape("tap has no rows".into()));
    }
    Ok(SensitivityReport::channel(
        &tap.layer_name,
        MetricKind::Magnitude,
        column_energy(&tap.x),
        tap.x.rows(),
    ))
}

/// `(XᵀX)_{jj} / n`; numerically identical to [`magnitude`].
pub fn covariance(tap: &LayerTap) -> Result<SensitivityReport> {
    let h = gram_mean(&tap.x)?;
    let scores = h.diagonal();
    Ok(SensitivityReport::channel(
        &tap.layer_name,
        MetricKind::Covariance,
        scores,
        tap.x.rows(),
    ))
}

/// Empirical diagonal Fisher of the per-sample weight gradients. Taps from
/// several batches of the same layer are pooled in the given order.
pub fn fisher_diag(taps: &[LayerTap], weight: &Matrix) -> Result<SensitivityReport> {
    let (name, x, g) = merge_taps(taps, true)?;
    let g = g.expect("gradients requested");
    check_weight(weight, &x, Some(&g))?;
    let n = x.rows();
    let x2 = x.map(|v| v * v);
    let g2 = g.map(|v| v * v);
    let scores = matmul_tn(&g2, &x2)?.scale(1.0 / n as f64);
    Ok(SensitivityReport::weight(&name, MetricKind::FisherDiag, scores, n))
}

/// Mean-loss weight gradient `GᵀX / n`.
pub fn weight_gradient(taps: &[LayerTap]) -> Result<Matrix> {
    let (_, x, g) = merge_taps(taps, true)?;
    let g = g.expect("gradients requested");
    Ok(matmul_tn(&g, &x)?.scale(1.0 / x.rows() as f64))
}

/// `|∂L/∂W_{kj}|` with the mean-loss gradient `GᵀX / n`.
pub fn grad_saliency(taps: &[LayerTap], weight: &Matrix) -> Result<SensitivityReport> {
    let (name, x, g) = merge_taps(taps, true)?;
    check_weight(weight, &x, g.as_ref())?;
    let grad = weight_gradient(taps)?;
    Ok(SensitivityReport::weight(
        &name,
        MetricKind::GradSaliency,
        grad.map(f64::abs),
        x.rows(),
    ))
}

/// OBD deletion saliency `½ W_{kj}² Ĥ_{jj}` with the surrogate `Ĥ = XᵀX / n`.
pub fn obd_weight(taps: &[LayerTap], weight: &Matrix) -> Result<SensitivityReport> {
    let (name, x, _) = merge_taps(taps, false)?;
    check_weight(weight, &x, None)?;
    let h = column_energy(&x);
    let scores = Matrix::from_fn(weight.rows(), weight.cols(), |k, j| {
        0.5 * weight.get(k, j) * weight.get(k, j) * h[j]
    });
    Ok(SensitivityReport::weight(&name, MetricKind::ObdWeight, scores, x.rows()).with_meta("curvature", "xtx-over-n"))
}

/// Computes `metric` for one tap. `weight` is required by the weight-level metrics.
pub fn compute(metric: MetricKind, tap: &LayerTap, weight: &Matrix) -> Result<SensitivityReport> {
    let taps = std::slice::from_ref(tap);
    match metric {
        MetricKind::ExactSensitivity => exact_sensitivity(tap),
        MetricKind::QuadraticDiagD => quadratic_diag_d(tap),
        MetricKind::Magnitude => magnitude(tap),
        MetricKind::Covariance => covariance(tap),
        MetricKind::FisherDiag => fisher_diag(taps, weight),
        MetricKind::GradSaliency => grad_saliency(taps, weight),
        MetricKind::ObdWeight => obd_weight(taps, weight),
    }
}

/// First-order loss change `⟨GᵀX / n, ΔW⟩` for a weight perturbation.
pub fn predict_loss_delta(tap: &LayerTap, delta: &Matrix) -> Result<f64> {
    let g = tap.grad()?;
    if delta.shape() != (g.cols(), tap.x.cols()) {
        return Err(Error::Shape(format!(
            "delta {:?} does not match layer weight ({}, {})",
            delta.shape(),
            g.cols(),
            tap.x.cols()
        )));
    }
    let coeff = matmul_tn(g, &tap.x)?;
    Ok(coeff.inner(delta)? / tap.x.rows() as f64)
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with average ranks. Returns 0 when either side has
/// no rank variance (all values tied).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "rank correlation needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// True when every value is tied, i.e. the ranking carries no information.
pub fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] == w[1])
}

pub fn rank_correlation(a: &SensitivityReport, b: &SensitivityReport) -> Result<f64> {
    if a.granularity != b.granularity {
        return Err(Error::Shape(format!(
            "granularity mismatch: {:?} vs {:?}",
            a.granularity, b.granularity
        )));
    }
    spearman(&a.scores, &b.scores)
}
