//! Accuracy, proxy A-distance and per-target aggregation over seeds.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::mix_seed;
use crate::error::{dim, Error, Result};
use crate::tensor::Tensor;

pub fn accuracy(predictions: &[u8], gold: &[u8]) -> Result<f64> {
    dim("prediction count", gold.len(), predictions.len())?;
    if gold.is_empty() {
        return Err(Error::Validation("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Settings of the domain classifier behind the proxy A-distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainClassifier {
    pub folds: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for DomainClassifier {
    fn default() -> Self {
        Self {
            folds: 5,
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Proxy A-distance `2(1 − ε)` where `ε` is the k-fold cross-validated error
/// of an L2-regularized logistic discriminant separating `a` from `b`,
/// clamped to `[0, 0.5]`. The result always lies in `[1, 2]`.
pub fn a_distance(a: &Tensor, b: &Tensor, folds: usize, seed: u64) -> Result<f64> {
    let clf = DomainClassifier {
        folds,
        ..DomainClassifier::default()
    };
    a_distance_with(a, b, &clf, mix_seed(seed, 0), mix_seed(seed, 1))
}

/// As [`a_distance`], with explicit classifier settings and one fold
/// assignment seed per sample set.
pub fn a_distance_with(a: &Tensor, b: &Tensor, clf: &DomainClassifier, seed_a: u64, seed_b: u64) -> Result<f64> {
    let (n, da) = a.expect_matrix("a_distance lhs")?;
    let (m, db) = b.expect_matrix("a_distance rhs")?;
    dim("a_distance feature width", da, db)?;
    if clf.folds < 2 {
        return Err(Error::Config("A-distance needs at least two folds".into()));
    }
    if n < 2 * clf.folds || m < 2 * clf.folds {
        return Err(Error::Validation(format!(
            "A-distance with {} folds needs at least {} samples per set (got {n} and {m})",
            clf.folds,
            2 * clf.folds
        )));
    }
    let fold_of = |count: usize, seed: u64| -> Vec<usize> {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut folds = alloc::vec![0; count];
        for (pos, &i) in order.iter().enumerate() {
            folds[i] = pos % clf.folds;
        }
        folds
    };
    let (fa, fb) = (fold_of(n, seed_a), fold_of(m, seed_b));
    let mut errors = 0.0;
    for k in 0..clf.folds {
        let mut train: Vec<(&[f64], f64)> = Vec::new();
        let mut test: Vec<(&[f64], f64)> = Vec::new();
        for (i, &f) in fa.iter().enumerate() {
            let s = (a.row(i), 0.0);
            if f == k {
                test.push(s)
            } else {
                train.push(s)
            }
        }
        for (i, &f) in fb.iter().enumerate() {
            let s = (b.row(i), 1.0);
            if f == k {
                test.push(s)
            } else {
                train.push(s)
            }
        }
        let model = LogisticDiscriminant::fit(&train, da, clf);
        let wrong = test.iter().filter(|(x, y)| model.predict(x) != *y).count();
        errors += wrong as f64 / test.len() as f64;
    }
    let eps = (errors / clf.folds as f64).clamp(0.0, 0.5);
    Ok(2.0 * (1.0 - eps))
}

struct LogisticDiscriminant {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticDiscriminant {
    /// Full-batch gradient descent on standardized features.
    fn fit(train: &[(&[f64], f64)], d: usize, clf: &DomainClassifier) -> Self {
        let n = train.len() as f64;
        let mut mean = alloc::vec![0.0; d];
        for (x, _) in train {
            for j in 0..d {
                mean[j] += x[j] / n;
            }
        }
        let mut scale = alloc::vec![0.0; d];
        for (x, _) in train {
            for j in 0..d {
                scale[j] += (x[j] - mean[j]) * (x[j] - mean[j]) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / libm::sqrt(*s) } else { 0.0 };
        }
        let xs: Vec<Vec<f64>> = train
            .iter()
            .map(|(x, _)| (0..d).map(|j| (x[j] - mean[j]) * scale[j]).collect())
            .collect();
        let mut w = alloc::vec![0.0; d];
        let mut bias = 0.0;
        let mut grad = alloc::vec![0.0; d];
        for _ in 0..clf.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (x, (_, y)) in xs.iter().zip(train) {
                let z = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let r = sigmoid(z) - y;
                for j in 0..d {
                    grad[j] += r * x[j] / n;
                }
                gb += r / n;
            }
            for j in 0..d {
                w[j] -= clf.learning_rate * (grad[j] + clf.l2 * w[j]);
            }
            bias -= clf.learning_rate * gb;
        }
        Self {
            mean,
            scale,
            weights: w,
            bias,
        }
    }

    fn predict(&self, x: &[f64]) -> f64 {
        let z = self.bias
            + x.iter()
                .enumerate()
                .map(|(j, &v)| (v - self.mean[j]) * self.scale[j] * self.weights[j])
                .sum::<f64>();
        if z > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub experiment_id: String,
    pub target: String,
    pub seed: u64,
    pub accuracy: f64,
    pub a_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub experiment_id: String,
    pub target: String,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

/// Accuracy mean and standard deviation per `(experiment, target)`, ordered
/// by experiment id then target id.
pub fn aggregate(rows: &[MetricRow]) -> Vec<Summary> {
    let mut sorted: Vec<&MetricRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.experiment_id.as_str(), a.target.as_str(), a.seed).cmp(&(
            b.experiment_id.as_str(),
            b.target.as_str(),
            b.seed,
        ))
    });
    let mut out = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let key = (&sorted[start].experiment_id, &sorted[start].target);
        let end = start
            + sorted[start..]
                .iter()
                .take_while(|r| (&r.experiment_id, &r.target) == key)
                .count();
        let vals: Vec<f64> = sorted[start..end].iter().map(|r| r.accuracy).collect();
        let (mean, std) = mean_std(&vals);
        out.push(Summary {
            experiment_id: key.0.clone(),
            target: key.1.clone(),
            count: vals.len(),
            mean,
            std,
        });
        start = end;
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}
