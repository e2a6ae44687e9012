//! Linear layer probes: closed-form ridge classifiers fit on mean-pooled
//! encoder states, reporting held-out accuracy per layer. Used to verify
//! which encoder depth carries which factor.

use super::{Factor, Result, Sample, TasksError};
use crate::model::SyntheticEncoder;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    /// Ridge penalty added to the Gram matrix diagonal.
    pub ridge_lambda: f64,
    /// Fraction of the dataset the probe is fit on; the rest is scored.
    pub train_fraction: f64,
    /// Minimum dataset size the probe accepts.
    pub min_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { ridge_lambda: 1.0, train_fraction: 0.75, min_samples: 200 }
    }
}

/// Fit one ridge probe per encoder layer on `(features, label)` pairs and
/// return the held-out accuracy per layer.
pub fn probe_layers(
    encoder: &SyntheticEncoder,
    pairs: &[(&Tensor, usize)],
    config: &ProbeConfig,
) -> Result<Vec<f64>> {
    let n = pairs.len();
    if n < config.min_samples {
        return Err(TasksError::ProbeDatasetTooSmall {
            have: n,
            need: config.min_samples,
        });
    }
    let classes = pairs.iter().map(|&(_, y)| y).max().unwrap_or(0) + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        for &(_, y) in pairs {
            seen[y] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(TasksError::DegenerateProbe(format!(
            "{distinct} distinct label(s); probing needs at least 2"
        )));
    }

    // Mean-pool every layer of every sample once: pooled[m][i] is sample i's
    // layer-m summary vector.
    let layer_count = encoder.config().layers;
    let width = encoder.config().width;
    let mut pooled: Vec<Vec<f64>> =
        vec![Vec::with_capacity(n * width); layer_count];
    for &(features, _) in pairs {
        let states = encoder.encode(features)?;
        let frames = states.frames;
        for (m, layer) in states.layers.iter().enumerate() {
            let vals = layer.values();
            let mut mean = vec![0.0; width];
            for t in 0..frames {
                for (d, m_val) in mean.iter_mut().enumerate() {
                    *m_val += vals[t * width + d];
                }
            }
            for v in mean.iter_mut() {
                *v /= frames as f64;
            }
            pooled[m].extend_from_slice(&mean);
        }
    }

    let n_train = ((n as f64) * config.train_fraction).floor() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let labels: Vec<usize> = pairs.iter().map(|&(_, y)| y).collect();

    let mut accuracies = Vec::with_capacity(layer_count);
    for layer in &pooled {
        accuracies.push(ridge_accuracy(
            layer,
            width,
            &labels,
            classes,
            n_train,
            config.ridge_lambda,
        )?);
    }
    Ok(accuracies)
}

/// Probe a factor of a generated dataset: pairs each sample's features with
/// its value for `factor`. All splits are pooled (the probe makes its own
/// train/held-out cut).
pub fn probe_task_factor(
    encoder: &SyntheticEncoder,
    samples: &[Sample],
    factor: Factor,
    config: &ProbeConfig,
) -> Result<Vec<f64>> {
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        let value = sample.factors.get(factor.name()).ok_or_else(|| {
            TasksError::DegenerateProbe(format!(
                "factor '{}' is undefined on this dataset",
                factor.name()
            ))
        })?;
        pairs.push((&sample.features, *value));
    }
    probe_layers(encoder, &pairs, config)
}

/// One-vs-rest ridge regression with a bias column, solved in closed form;
/// returns held-out argmax accuracy.
fn ridge_accuracy(
    pooled: &[f64],
    width: usize,
    labels: &[usize],
    classes: usize,
    n_train: usize,
    lambda: f64,
) -> Result<f64> {
    let d = width + 1; // + bias column
    let x = |i: usize, j: usize| -> f64 {
        if j == width {
            1.0
        } else {
            pooled[i * width + j]
        }
    };

    // Gram matrix G = X^T X + lambda I over the training rows.
    let mut gram = vec![0.0; d * d];
    for i in 0..n_train {
        for a in 0..d {
            let xa = x(i, a);
            if xa == 0.0 {
                continue;
            }
            for b in a..d {
                gram[a * d + b] += xa * x(i, b);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[a * d + b] = gram[b * d + a];
        }
        gram[a * d + a] += lambda;
    }
    cholesky_factor(&mut gram, d)?;

    // Solve for each class column of W from X^T Y.
    let mut weights = vec![0.0; d * classes];
    let mut rhs = vec![0.0; d];
    for c in 0..classes {
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n_train {
            if labels[i] == c {
                for (a, r) in rhs.iter_mut().enumerate() {
                    *r += x(i, a);
                }
            }
        }
        cholesky_solve(&gram, d, &mut rhs);
        for a in 0..d {
            weights[a * classes + c] = rhs[a];
        }
    }

    // Held-out accuracy.
    let n = labels.len();
    let mut correct = 0usize;
    for i in n_train..n {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            let mut score = 0.0;
            for a in 0..d {
                score += x(i, a) * weights[a * classes + c];
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / (n - n_train) as f64)
}

/// In-place Cholesky factorization (lower triangle) of a symmetric positive
/// definite matrix.
fn cholesky_factor(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(TasksError::DegenerateProbe(
                "gram matrix is not positive definite".to_string(),
            ));
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / diag;
        }
    }
    Ok(())
}

/// Solve `L L^T x = b` in place given the factor from [`cholesky_factor`].
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}
