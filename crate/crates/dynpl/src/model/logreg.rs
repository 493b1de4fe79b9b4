//! L2-regularized logistic regression, used as the label oracle: it predicts
//! the outcome directly from ground-truth problem vectors.

use serde::{Deserialize, Serialize};

use crate::error::{DynplError, Result};
use crate::numerics::{bce, dot, sigmoid, AdamConfig, AdamState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRegConfig {
    pub rate: f64,
    pub epochs: usize,
    /// L2 penalty on the weights only; the intercept stays unpenalized so the
    /// zero-feature optimum is exactly the base rate
    pub l2: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            rate: 0.05,
            epochs: 2000,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogRegModel {
    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(dot(&self.weights, features) + self.bias)
    }
}

/// Full-batch Adam on mean BCE + (l2/2)·|w|².
pub fn fit_logreg(
    features: &[Vec<f64>],
    labels: &[f64],
    config: &LogRegConfig,
) -> Result<LogRegModel> {
    if features.is_empty() {
        return Err(DynplError::InvalidInput("empty training set".into()));
    }
    if features.len() != labels.len() {
        return Err(DynplError::InvalidInput(
            "feature/label count mismatch".into(),
        ));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(DynplError::InvalidInput("ragged feature rows".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(DynplError::Data(
            "degenerate single-class training set".into(),
        ));
    }

    let n = features.len() as f64;
    let mut weights = vec![0.0; dim];
    let mut bias = vec![0.0];
    let mut adam = AdamState::new(AdamConfig {
        rate: config.rate,
        ..AdamConfig::default()
    });
    for _ in 0..config.epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let p = sigmoid(dot(&weights, x) + bias[0]);
            let d = (p - y) / n;
            for (g, &xi) in gw.iter_mut().zip(x) {
                *g += d * xi;
            }
            gb += d;
        }
        for (g, &w) in gw.iter_mut().zip(&weights) {
            *g += config.l2 * w;
        }
        adam.begin_step();
        adam.update("weights", &mut weights, &gw)?;
        adam.update("bias", &mut bias, &[gb])?;
    }
    Ok(LogRegModel {
        weights,
        bias: bias[0],
    })
}

/// Mean BCE of a fitted model on a labeled set.
pub fn mean_bce(model: &LogRegModel, features: &[Vec<f64>], labels: &[f64]) -> f64 {
    features
        .iter()
        .zip(labels)
        .map(|(x, &y)| bce(model.predict(x), y))
        .sum::<f64>()
        / features.len() as f64
}
