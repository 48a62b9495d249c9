//! Synthetic calibration and evaluation data.
//!
//! Inputs are drawn from a [`DistSpec`]; targets come from a teacher network so
//! that the loss has a reproducible ground truth. The input stream and the
//! target-noise stream are derived from the spec's seed with distinct tags.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt::join_f64;
use crate::netcore::{Batch, LossKind, Network};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    /// Added to the standardized draw before the global mean/scale apply.
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistKind {
    Gaussian,
    /// Student-t per coordinate; `dof` is the tail exponent.
    HeavyTailed {
        dof: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
    ShiftedGaussian {
        shift: Vec<f64>,
    },
}

impl DistKind {
    pub fn tag(&self) -> &'static str {
        match self {
            DistKind::Gaussian => "gaussian",
            DistKind::HeavyTailed { .. } => "heavy-tailed",
            DistKind::Mixture { .. } => "mixture",
            DistKind::ShiftedGaussian { .. } => "shifted-gaussian",
        }
    }
}

/// Input distribution: each row is `mean + scale ⊙ z` with `z` drawn from `kind`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistSpec {
    pub kind: DistKind,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub seed: u64,
}

impl DistSpec {
    pub fn gaussian(dim: usize, seed: u64) -> Self {
        Self {
            kind: DistKind::Gaussian,
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            seed,
        }
    }

    pub fn with_kind(mut self, kind: DistKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.dim == 0 {
            return bad("distribution dimension must be positive".into());
        }
        if self.mean.len() != self.dim || self.scale.len() != self.dim {
            return bad(format!(
                "mean/scale lengths {}/{} do not match dim {}",
                self.mean.len(),
                self.scale.len(),
                self.dim
            ));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return bad("mean entries must be finite".into());
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("scale entries must be positive".into());
        }
        match &self.kind {
            DistKind::Gaussian => {}
            DistKind::HeavyTailed { dof } => {
                if !(*dof > 0.0 && dof.is_finite()) {
                    return bad(format!("tail exponent must be positive, got {dof}"));
                }
            }
            DistKind::Mixture { components } => {
                if components.is_empty() {
                    return bad("mixture needs at least one component".into());
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 || components.iter().any(|c| c.weight < 0.0) {
                    return bad(format!(
                        "mixture weights must be non-negative and sum to 1, got {total}"
                    ));
                }
                for c in components {
                    if c.offset.len() != self.dim || c.scale.len() != self.dim {
                        return bad("mixture component dimensions do not match".into());
                    }
                    if c.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                        return bad("mixture component scales must be positive".into());
                    }
                }
            }
            DistKind::ShiftedGaussian { shift } => {
                if shift.len() != self.dim {
                    return bad("shift length does not match dim".into());
                }
            }
        }
        Ok(())
    }

    fn draw_row(&self, rng: &mut Rng, out: &mut [f64]) {
        match &self.kind {
            DistKind::Gaussian => out.iter_mut().for_each(|v| *v = rng.normal()),
            DistKind::HeavyTailed { dof } => out.iter_mut().for_each(|v| *v = rng.student_t(*dof)),
            DistKind::ShiftedGaussian { shift } => {
                for (v, s) in out.iter_mut().zip(shift) {
                    *v = s + rng.normal();
                }
            }
            DistKind::Mixture { components } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut chosen = components.len() - 1;
                for (k, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        chosen = k;
                        break;
                    }
                }
                let c = &components[chosen];
                for ((v, o), s) in out.iter_mut().zip(&c.offset).zip(&c.scale) {
                    *v = o + s * rng.normal();
                }
            }
        }
        for ((v, m), s) in out.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = m + s * *v;
        }
    }
}

/// Teacher network that maps inputs to targets, plus additive target noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub teacher: Network,
    pub noise_scale: f64,
}

impl TaskSpec {
    pub fn new(teacher: Network, noise_scale: f64) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::Validation(format!(
                "noise_scale must be >= 0, got {noise_scale}"
            )));
        }
        Ok(Self { teacher, noise_scale })
    }
}

/// Draws `n` rows from `dist` and labels them with the task's teacher.
///
/// For `mse` teachers the targets are teacher outputs plus gaussian noise of
/// `noise_scale`; for `sce` they are one-hot argmax of the noisy teacher logits.
pub fn sample(dist: &DistSpec, task: &TaskSpec, n: usize) -> Result<Batch> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::Validation("sample size must be at least 1".into()));
    }
    if !(task.noise_scale >= 0.0 && task.noise_scale.is_finite()) {
        return Err(Error::Validation("noise_scale must be >= 0".into()));
    }
    match task.teacher.input_dim() {
        Some(d) if d != dist.dim => {
            return Err(Error::Validation(format!(
                "teacher expects {d} inputs, distribution has dim {}",
                dist.dim
            )))
        }
        _ => {}
    }
    let mut rng = Rng::derived(dist.seed, "inputs");
    let mut inputs = Matrix::zeros(n, dist.dim);
    for i in 0..n {
        dist.draw_row(&mut rng, inputs.row_mut(i));
    }
    let mut out = task.teacher.predict(&inputs)?;
    let mut noise = Rng::derived(dist.seed, "target-noise");
    if task.noise_scale > 0.0 {
        for i in 0..out.rows() {
            for v in out.row_mut(i) {
                *v += task.noise_scale * noise.normal();
            }
        }
    }
    let targets = match task.teacher.loss_kind() {
        LossKind::Mse => out,
        LossKind::SoftmaxCrossEntropy => {
            let mut t = Matrix::zeros(n, out.cols());
            for i in 0..n {
                let row = out.row(i);
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                t.set(i, best, 1.0);
            }
            t
        }
    };
    Batch::new(inputs, targets)
}

/// Copy of `dist` with `delta` added to the mean and scales multiplied by
/// `scale_mult`. Mixture components and shifts are left as they are.
pub fn shift(dist: &DistSpec, delta: &[f64], scale_mult: &[f64]) -> Result<DistSpec> {
    if delta.len() != dist.dim || scale_mult.len() != dist.dim {
        return Err(Error::Validation(format!(
            "shift vectors have lengths {}/{}, distribution has dim {}",
            delta.len(),
            scale_mult.len(),
            dist.dim
        )));
    }
    let mut out = dist.clone();
    for (m, d) in out.mean.iter_mut().zip(delta) {
        *m += d;
    }
    for (s, k) in out.scale.iter_mut().zip(scale_mult) {
        *s *= k;
    }
    if out.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Validation("shift produced a non-positive scale".into()));
    }
    Ok(out)
}

pub fn to_csv_string(batch: &Batch) -> String {
    let mut out = format!("# dims {} {}\n", batch.inputs.cols(), batch.targets.cols());
    for i in 0..batch.len() {
        out.push_str(&join_f64(batch.inputs.row(i), ","));
        if batch.targets.cols() > 0 {
            if batch.inputs.cols() > 0 {
                out.push(',');
            }
            out.push_str(&join_f64(batch.targets.row(i), ","));
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(batch: &Batch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(batch)).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Batch> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Batch> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file, expected `# dims <d_input> <d_target>`"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (d_in, d_t) = match parts.as_slice() {
        ["#", "dims", a, b] => match (a.parse::<usize>(), b.parse::<usize>()) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Err(Error::parse(1, format!("invalid dims header `{header}`"))),
        },
        _ => {
            return Err(Error::parse(
                1,
                format!("expected `# dims <d_input> <d_target>`, found `{header}`"),
            ))
        }
    };
    let width = d_in + d_t;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(idx + 1, format!("row {rows}: invalid number `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != width {
            return Err(Error::parse(
                idx + 1,
                format!("row {rows}: expected {width} values, found {}", vals.len()),
            ));
        }
        inputs.extend_from_slice(&vals[..d_in]);
        targets.extend_from_slice(&vals[d_in..]);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(2, "no sample rows"));
    }
    Batch::new(Matrix::new(rows, d_in, inputs)?, Matrix::new(rows, d_t, targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Layer, Linear};

    fn identity_task(dim: usize, noise: f64) -> TaskSpec {
        let teacher = Network::new(
            vec![Layer::Linear(Linear::no_bias("t", Matrix::identity(dim)))],
            LossKind::Mse,
        )
        .unwrap();
        TaskSpec::new(teacher, noise).unwrap()
    }

    fn col_stats(m: &Matrix, j: usize) -> (f64, f64) {
        let c = m.col(j);
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    fn kurtosis(c: &[f64]) -> f64 {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let m2 = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = c.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2)
    }

    #[test]
    fn gaussian_moments() {
        let b = sample(&DistSpec::gaussian(2, 17), &identity_task(2, 0.0), 10_000).unwrap();
        for j in 0..2 {
            let (mean, var) = col_stats(&b.inputs, j);
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((0.94..=1.06).contains(&var), "var {var}");
        }
    }

    #[test]
    fn identity_teacher_without_noise() {
        let b = sample(&DistSpec::gaussian(3, 1), &identity_task(3, 0.0), 50).unwrap();
        assert_eq!(b.inputs, b.targets);
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = DistSpec::gaussian(3, 5).with_kind(DistKind::HeavyTailed { dof: 4.0 });
        let t = identity_task(3, 0.3);
        assert_eq!(sample(&d, &t, 64).unwrap(), sample(&d, &t, 64).unwrap());
        assert_ne!(
            sample(&d, &t, 64).unwrap(),
            sample(&d.clone().with_seed(6), &t, 64).unwrap()
        );
    }

    #[test]
    fn heavy_tails_exceed_gaussian_kurtosis() {
        let t = identity_task(1, 0.0);
        let g = sample(&DistSpec::gaussian(1, 3), &t, 10_000).unwrap();
        let kg = kurtosis(&g.inputs.col(0));
        for dof in [3.0, 4.0, 5.0] {
            let h = sample(
                &DistSpec::gaussian(1, 3).with_kind(DistKind::HeavyTailed { dof }),
                &t,
                10_000,
            )
            .unwrap();
            let kh = kurtosis(&h.inputs.col(0));
            assert!(kh > kg, "dof {dof}: {kh} vs {kg}");
        }
    }

    #[test]
    fn mixture_validation_and_sampling() {
        let comps = vec![
            MixtureComponent {
                weight: 0.25,
                offset: vec![-4.0],
                scale: vec![0.5],
            },
            MixtureComponent {
                weight: 0.75,
                offset: vec![4.0],
                scale: vec![0.5],
            },
        ];
        let d = DistSpec::gaussian(1, 8).with_kind(DistKind::Mixture {
            components: comps.clone(),
        });
        let b = sample(&d, &identity_task(1, 0.0), 4000).unwrap();
        let high = b.inputs.col(0).iter().filter(|v| **v > 0.0).count() as f64 / 4000.0;
        assert!((high - 0.75).abs() < 0.03, "{high}");

        let mut bad = comps;
        bad[0].weight = 0.3;
        let d = DistSpec::gaussian(1, 8).with_kind(DistKind::Mixture { components: bad });
        assert!(matches!(d.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_bad_params() {
        let mut d = DistSpec::gaussian(2, 0);
        d.scale[1] = 0.0;
        assert!(matches!(
            sample(&d, &identity_task(2, 0.0), 3),
            Err(Error::Validation(_))
        ));
        assert!(sample(&DistSpec::gaussian(2, 0), &identity_task(2, 0.0), 0).is_err());
        assert!(sample(&DistSpec::gaussian(3, 0), &identity_task(2, 0.0), 4).is_err());
    }

    #[test]
    fn sce_teacher_gives_one_hot() {
        let teacher = Network::new(
            vec![Layer::Linear(Linear::no_bias(
                "t",
                Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]).unwrap(),
            ))],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        let b = sample(&DistSpec::gaussian(2, 4), &TaskSpec::new(teacher, 0.0).unwrap(), 20).unwrap();
        for i in 0..20 {
            let row = b.targets.row(i);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }

    #[test]
    fn shift_cases() {
        let d = DistSpec::gaussian(2, 9);
        assert_eq!(shift(&d, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), d);
        let t = identity_task(2, 0.0);
        let moved = shift(&d, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        let b = sample(&moved, &t, 10_000).unwrap();
        assert!((col_stats(&b.inputs, 0).0 - 1.0).abs() < 0.05);
        assert_eq!(d.mean, vec![0.0, 0.0]);

        let wide = shift(&d, &[0.0, 0.0], &[2.0, 1.0]).unwrap();
        let b = sample(&wide, &t, 10_000).unwrap();
        let sd = col_stats(&b.inputs, 0).1.sqrt();
        assert!((sd - 2.0).abs() < 0.1, "{sd}");

        assert!(matches!(
            shift(&d, &[0.0, 0.0], &[-1.0, 1.0]),
            Err(Error::Validation(_))
        ));
        assert!(shift(&d, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_and_fixture() {
        let b = sample(&DistSpec::gaussian(3, 2), &identity_task(3, 0.1), 7).unwrap();
        assert_eq!(parse_csv(&to_csv_string(&b)).unwrap(), b);

        let fixture = "# dims 1 1\n1.5,-2\n0,3e2\n";
        let b = parse_csv(fixture).unwrap();
        assert_eq!(b.inputs, Matrix::from_rows(&[[1.5], [0.0]]).unwrap());
        assert_eq!(b.targets, Matrix::from_rows(&[[-2.0], [300.0]]).unwrap());
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv(""), Err(Error::Parse { line: 1, .. })));
        match parse_csv("# dims 1 1\n1,2\n3\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("row 1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Parse { .. })));
    }
}
