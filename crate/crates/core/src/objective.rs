//! Training objective: cross-entropy on the original input, weighted
//! cross-entropy on every cutoff view, and a Jensen-Shannon consistency term
//! over all `N + 1` predictive distributions:
//!
//! ```text
//! total = CE(x, y) + aug_ce_weight * sum_i CE(view_i, y) + js_weight * JS(p_0, ..., p_N)
//! JS    = 1/(N+1) * sum_i KL(p_i || p_avg),   p_avg = 1/(N+1) * sum_i p_i
//! ```
//!
//! Logs are natural, so every term is in nats. Gradients flow through
//! `p_avg`; no branch is detached.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var, PROB_FLOOR};

/// Allowed deviation of a probability vector's sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Coefficient on the summed cross-entropy of the augmented views.
    pub aug_ce_weight: f64,
    /// Coefficient on the consistency term.
    pub js_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            aug_ce_weight: 1.0,
            js_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(aug_ce_weight: f64, js_weight: f64) -> Result<Self> {
        let w = LossWeights {
            aug_ce_weight,
            js_weight,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("aug_ce_weight", self.aug_ce_weight), ("js_weight", self.js_weight)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce_original: f64,
    pub ce_augmented: Vec<f64>,
    pub js: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Re-assembles the weighted total from the parts.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.ce_original + w.aug_ce_weight * self.ce_augmented.iter().sum::<f64>() + w.js_weight * self.js
    }
}

/// Graph handle of the total alongside the evaluated parts.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `-log softmax(logits)[label]` for a single logit vector.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    mean_cross_entropy(g, logits, &[label])
}

/// Mean per-row cross-entropy of `[rows, C]` logits (a `[C]` vector counts
/// as one row).
pub fn mean_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let c = *g.shape(logits).last().unwrap();
    if let Some(&label) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let rows = g.value(logits).len() / c;
    let m = g.reshape(logits, &[rows, c])?;
    let per_row = g.cross_entropy_rows(m, targets)?;
    Ok(g.mean(per_row)?)
}

fn check_distributions(g: &Graph, preds: &[Var]) -> Result<()> {
    if preds.len() < 2 {
        return Err(Error::TooFewPredictions(preds.len()));
    }
    let shape = g.shape(preds[0]).to_vec();
    let c = *shape.last().unwrap();
    for (index, &p) in preds.iter().enumerate() {
        if g.shape(p) != shape.as_slice() {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "js_consistency",
                left: shape.clone(),
                right: g.shape(p).to_vec(),
            }));
        }
        for row in g.value(p).chunks(c) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&x| x.is_nan() || x < 0.0) {
                return Err(Error::NotNormalized { index, sum });
            }
        }
    }
    Ok(())
}

/// Jensen-Shannon consistency of `K >= 2` same-shape distributions. Each
/// prediction is a `[C]` vector or a `[rows, C]` matrix of per-position
/// distributions, in which case the result is the mean over rows.
pub fn js_consistency(g: &mut Graph, preds: &[Var]) -> Result<Var> {
    check_distributions(g, preds)?;
    Ok(g.js_divergence(preds, PROB_FLOOR)?)
}

/// Assembles the full objective for one example. `targets` holds one label
/// per logit row (a single label for classification).
pub fn total_loss(
    g: &mut Graph,
    logits_original: Var,
    logits_views: &[Var],
    targets: &[usize],
    weights: &LossWeights,
) -> Result<Objective> {
    weights.validate()?;
    if logits_views.is_empty() {
        return Err(Error::TooFewPredictions(1));
    }
    let ce_o = mean_cross_entropy(g, logits_original, targets)?;
    let mut ce_views = Vec::with_capacity(logits_views.len());
    for &v in logits_views {
        if g.shape(v) != g.shape(logits_original) {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "total_loss",
                left: g.shape(logits_original).to_vec(),
                right: g.shape(v).to_vec(),
            }));
        }
        ce_views.push(mean_cross_entropy(g, v, targets)?);
    }

    let mut probs = Vec::with_capacity(logits_views.len() + 1);
    probs.push(g.softmax(logits_original)?);
    for &v in logits_views {
        probs.push(g.softmax(v)?);
    }
    let js = js_consistency(g, &probs)?;

    let mut aug_sum = ce_views[0];
    for &c in &ce_views[1..] {
        aug_sum = g.add(aug_sum, c)?;
    }
    let aug = g.scale(aug_sum, weights.aug_ce_weight)?;
    let js_term = g.scale(js, weights.js_weight)?;
    let partial = g.add(ce_o, aug)?;
    let total = g.add(partial, js_term)?;

    let breakdown = LossBreakdown {
        ce_original: g.scalar(ce_o),
        ce_augmented: ce_views.iter().map(|&c| g.scalar(c)).collect(),
        js: g.scalar(js),
        total: g.scalar(total),
    };
    Ok(Objective { total, breakdown })
}
