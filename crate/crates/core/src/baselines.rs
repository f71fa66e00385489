//! Single-pass baselines computed from the same feature records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, FeatureRecord};
use crate::nn::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeAggregation {
    /// Length-normalized.
    #[default]
    Mean,
    Sum,
}

/// Mean token entropy over the real tokens.
pub fn predictive_entropy(r: &FeatureRecord) -> f64 {
    predictive_entropy_with(r, PeAggregation::Mean)
}

pub fn predictive_entropy_with(r: &FeatureRecord, agg: PeAggregation) -> f64 {
    let total: f64 = r.ent().iter().map(|&v| v as f64).sum();
    match agg {
        PeAggregation::Mean => total / r.true_len as f64,
        PeAggregation::Sum => total,
    }
}

/// Length-normalized negative log-likelihood of the answer.
pub fn token_nll(r: &FeatureRecord) -> f64 {
    -r.ll().iter().map(|&v| v as f64).sum::<f64>() / r.true_len as f64
}

pub const LOGISTIC_FEATURES: usize = 5;

/// `[mean ll, min ll, mean entropy, max entropy, true_len / l_max]`.
pub fn logistic_features(r: &FeatureRecord) -> [f64; LOGISTIC_FEATURES] {
    let ll = r.ll();
    let ent = r.ent();
    let n = r.true_len as f64;
    [
        ll.iter().map(|&v| v as f64).sum::<f64>() / n,
        ll.iter().map(|&v| v as f64).fold(f64::INFINITY, f64::min),
        ent.iter().map(|&v| v as f64).sum::<f64>() / n,
        ent.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max),
        n / r.l_max() as f64,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once every gradient component is below this.
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            learning_rate: 0.5,
            max_iters: 5000,
            tolerance: 1e-9,
        }
    }
}

/// L2-regularized logistic regression on standardized summary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: [f64; LOGISTIC_FEATURES],
    pub bias: f64,
    pub mean: [f64; LOGISTIC_FEATURES],
    pub scale: [f64; LOGISTIC_FEATURES],
}

impl LogisticModel {
    /// Weights followed by the bias.
    pub fn coefficients(&self) -> [f64; LOGISTIC_FEATURES + 1] {
        let mut out = [0.0; LOGISTIC_FEATURES + 1];
        out[..LOGISTIC_FEATURES].copy_from_slice(&self.weights);
        out[LOGISTIC_FEATURES] = self.bias;
        out
    }

    fn standardize(&self, x: &[f64; LOGISTIC_FEATURES]) -> [f64; LOGISTIC_FEATURES] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.scale[j])
    }

    pub fn predict_proba(&self, r: &FeatureRecord) -> f64 {
        let z = self.standardize(&logistic_features(r));
        sigmoid(self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("logistic model: {e}")))
    }
}

/// Mean log-loss plus `l2 / 2 * |w|^2` (bias unpenalized), and its gradient
/// with respect to `[w..., b]`.
pub(crate) fn logistic_objective(
    coef: &[f64; LOGISTIC_FEATURES + 1],
    xs: &[[f64; LOGISTIC_FEATURES]],
    ys: &[u8],
    l2: f64,
) -> (f64, [f64; LOGISTIC_FEATURES + 1]) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad = [0.0; LOGISTIC_FEATURES + 1];
    for (x, &y) in xs.iter().zip(ys) {
        let z = coef[LOGISTIC_FEATURES] + x.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>();
        let yf = y as f64;
        loss += softplus(z) - yf * z;
        let r = sigmoid(z) - yf;
        for j in 0..LOGISTIC_FEATURES {
            grad[j] += r * x[j];
        }
        grad[LOGISTIC_FEATURES] += r;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    for j in 0..LOGISTIC_FEATURES {
        loss += 0.5 * l2 * coef[j] * coef[j];
        grad[j] += l2 * coef[j];
    }
    (loss, grad)
}

pub fn logistic_train(ds: &Dataset, seed: u64) -> Result<LogisticModel> {
    logistic_train_with(ds, seed, &LogisticConfig::default())
}

/// Full-batch gradient descent from zero weights. The procedure is fully
/// deterministic, so `_seed` does not influence the result.
pub fn logistic_train_with(ds: &Dataset, _seed: u64, cfg: &LogisticConfig) -> Result<LogisticModel> {
    let ys = ds.labels();
    let pos = ys.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == ys.len() {
        return Err(Error::Data(
            "logistic regression needs both labels in the training data".into(),
        ));
    }
    let raw: Vec<_> = ds.records.iter().map(logistic_features).collect();
    let n = raw.len() as f64;
    // Constant columns are detected exactly; a rounded mean would otherwise
    // leave a variance of ~1e-32 and blow the column up.
    let constant: [bool; LOGISTIC_FEATURES] = std::array::from_fn(|j| raw.iter().all(|x| x[j] == raw[0][j]));
    let mean: [f64; LOGISTIC_FEATURES] = std::array::from_fn(|j| {
        if constant[j] {
            raw[0][j]
        } else {
            raw.iter().map(|x| x[j]).sum::<f64>() / n
        }
    });
    let scale: [f64; LOGISTIC_FEATURES] = std::array::from_fn(|j| {
        let var = raw.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
        if constant[j] || var <= 0.0 {
            1.0
        } else {
            var.sqrt()
        }
    });
    let mut model = LogisticModel {
        weights: [0.0; LOGISTIC_FEATURES],
        bias: 0.0,
        mean,
        scale,
    };
    let xs: Vec<_> = raw.iter().map(|x| model.standardize(x)).collect();

    let mut coef = [0.0; LOGISTIC_FEATURES + 1];
    for _ in 0..cfg.max_iters {
        let (_, grad) = logistic_objective(&coef, &xs, &ys, cfg.l2);
        if grad.iter().all(|g| g.abs() < cfg.tolerance) {
            break;
        }
        for (c, g) in coef.iter_mut().zip(&grad) {
            *c -= cfg.learning_rate * g;
        }
    }
    model.weights.copy_from_slice(&coef[..LOGISTIC_FEATURES]);
    model.bias = coef[LOGISTIC_FEATURES];
    Ok(model)
}
