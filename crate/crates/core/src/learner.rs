//! Small differentiable classifiers with exact per-record gradients.
//!
//! Parameters are stored row-major with the bias as the last entry of each
//! row: a layer mapping `fan_in -> fan_out` occupies `fan_out * (fan_in + 1)`
//! consecutive values.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, RngStream};
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelSpec {
    LogisticRegression { d_in: usize, classes: usize },
    /// One hidden rectifier layer.
    Mlp { d_in: usize, hidden: usize, classes: usize },
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::LogisticRegression { d_in, classes } => (d_in + 1) * classes,
            ModelSpec::Mlp { d_in, hidden, classes } => (d_in + 1) * hidden + (hidden + 1) * classes,
        }
    }

    pub fn d_in(&self) -> usize {
        match *self {
            ModelSpec::LogisticRegression { d_in, .. } | ModelSpec::Mlp { d_in, .. } => d_in,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelSpec::LogisticRegression { classes, .. } | ModelSpec::Mlp { classes, .. } => classes,
        }
    }

    /// (fan_in, fan_out) per layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        match *self {
            ModelSpec::LogisticRegression { d_in, classes } => vec![(d_in, classes)],
            ModelSpec::Mlp { d_in, hidden, classes } => vec![(d_in, hidden), (hidden, classes)],
        }
    }
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_model(spec: &ModelSpec, stream: &RngStream) -> ParamVector {
    let mut theta = vec![0.0; spec.param_count()];
    let mut rng = stream.rng();
    let mut offset = 0;
    for (fan_in, fan_out) in spec.layers() {
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        for _ in 0..fan_out {
            let row = &mut theta[offset..offset + fan_in];
            fill_standard_normal(&mut rng, row);
            row.iter_mut().for_each(|w| *w *= scale);
            offset += fan_in + 1;
        }
    }
    ParamVector::new(theta)
}

/// `out = W [x, 1]` for a layer stored at `w`.
fn affine(w: &[f64], x: &[f64], out: &mut [f64]) {
    let stride = x.len() + 1;
    for (o, row) in out.iter_mut().zip(w.chunks_exact(stride)) {
        *o = row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()];
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

struct Forward {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(theta: &[f64], x: &[f64], spec: &ModelSpec) -> Forward {
    match *spec {
        ModelSpec::LogisticRegression { classes, .. } => {
            let mut logits = vec![0.0; classes];
            affine(theta, x, &mut logits);
            Forward { hidden_pre: Vec::new(), hidden: Vec::new(), logits }
        }
        ModelSpec::Mlp { d_in, hidden, classes } => {
            let split = (d_in + 1) * hidden;
            let mut hidden_pre = vec![0.0; hidden];
            affine(&theta[..split], x, &mut hidden_pre);
            let h: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
            let mut logits = vec![0.0; classes];
            affine(&theta[split..], &h, &mut logits);
            Forward { hidden_pre, hidden: h, logits }
        }
    }
}

fn check_theta(theta: &ParamVector, spec: &ModelSpec) -> Result<()> {
    theta.check_dim(spec.param_count())
}

pub fn logits(theta: &ParamVector, features: &[f64], spec: &ModelSpec) -> Vec<f64> {
    forward(theta.as_slice(), features, spec).logits
}

/// Cross-entropy of a single record.
pub fn record_loss(theta: &ParamVector, r: &Record, spec: &ModelSpec) -> f64 {
    -log_softmax(&logits(theta, &r.features, spec))[r.label]
}

/// Gradient of the cross-entropy at one record. Rectifier subgradient at 0 is 0.
pub fn per_record_grad(theta: &ParamVector, r: &Record, spec: &ModelSpec) -> Result<ParamVector> {
    check_theta(theta, spec)?;
    if r.features.len() != spec.d_in() {
        return Err(Error::DimensionMismatch { expected: spec.d_in(), actual: r.features.len() });
    }
    Ok(per_record_grad_unchecked(theta, r, spec))
}

pub(crate) fn per_record_grad_unchecked(theta: &ParamVector, r: &Record, spec: &ModelSpec) -> ParamVector {
    let theta = theta.as_slice();
    let fwd = forward(theta, &r.features, spec);
    let mut delta_out: Vec<f64> = log_softmax(&fwd.logits).iter().map(|l| l.exp()).collect();
    delta_out[r.label] -= 1.0;

    let mut grad = vec![0.0; theta.len()];
    let outer = |g: &mut [f64], delta: &[f64], input: &[f64]| {
        let stride = input.len() + 1;
        for (row, &dv) in g.chunks_exact_mut(stride).zip(delta) {
            row[..input.len()].iter_mut().zip(input).for_each(|(gi, xi)| *gi = dv * xi);
            row[input.len()] = dv;
        }
    };
    match *spec {
        ModelSpec::LogisticRegression { .. } => outer(&mut grad, &delta_out, &r.features),
        ModelSpec::Mlp { d_in, hidden, .. } => {
            let split = (d_in + 1) * hidden;
            let (g1, g2) = grad.split_at_mut(split);
            outer(g2, &delta_out, &fwd.hidden);
            let w2 = &theta[split..];
            let stride = hidden + 1;
            let delta_hidden: Vec<f64> = (0..hidden)
                .map(|j| {
                    if fwd.hidden_pre[j] > 0.0 {
                        delta_out.iter().enumerate().map(|(c, dv)| dv * w2[c * stride + j]).sum()
                    } else {
                        0.0
                    }
                })
                .collect();
            outer(g1, &delta_hidden, &r.features);
        }
    }
    ParamVector::new(grad)
}

/// Mean cross-entropy over a dataset.
pub fn loss(theta: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    check_theta(theta, spec)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data.records.iter().map(|r| record_loss(theta, r, spec)).sum::<f64>() / data.len() as f64)
}

/// Index of the largest logit, ties toward the smallest class.
pub fn predict(theta: &ParamVector, features: &[f64], spec: &ModelSpec) -> usize {
    let z = logits(theta, features, spec);
    let mut best = 0;
    for (c, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = c;
        }
    }
    best
}

pub fn accuracy(theta: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    check_theta(theta, spec)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct = data.records.iter().filter(|r| predict(theta, &r.features, spec) == r.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Gradient of the mean loss over `data`.
pub fn mean_gradient(theta: &ParamVector, data: &Dataset, spec: &ModelSpec) -> Result<ParamVector> {
    check_theta(theta, spec)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = crate::vector::VectorSum::new(theta.len());
    for r in &data.records {
        acc.add(&per_record_grad_unchecked(theta, r, spec));
    }
    let mut g = acc.finish();
    g.scale_in_place(1.0 / data.len() as f64);
    Ok(g)
}

/// Central finite differences of the single-record loss.
pub fn fd_gradient_oracle(theta: &ParamVector, r: &Record, spec: &ModelSpec, h: f64) -> Result<ParamVector> {
    check_theta(theta, spec)?;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = theta.clone();
    Ok((0..theta.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = record_loss(&probe, r, spec);
            probe[k] = orig - h;
            let down = record_loss(&probe, r, spec);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect())
}
