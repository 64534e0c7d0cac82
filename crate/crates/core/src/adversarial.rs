//! Sign-gradient PGD on the input-embedding matrix, the cost baseline for
//! cutoff.
//!
//! Accounting: ascent iteration `t` runs one forward and one backward over
//! the batch at the current perturbation. Iteration 0 sits at `delta = 0`, so
//! its parameter gradients are exactly those of the clean loss and get reused.
//! One more forward/backward on the final perturbation completes a step,
//! giving `1 + T` of each.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::EmbeddingClassifier;
use crate::objective::cross_entropy;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::trainer::PassCounter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Radius of the infinity-norm ball around the clean embedding.
    pub epsilon: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            steps: 1,
            step_size: 0.01,
            epsilon: 0.03,
        }
    }
}

impl AdvConfig {
    pub fn new(steps: usize, step_size: f64, epsilon: f64) -> Result<Self> {
        let cfg = AdvConfig {
            steps,
            step_size,
            epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `epsilon = 0` is accepted as the degenerate no-op ball.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("adversarial steps must be >= 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon {} must be non-negative", self.epsilon)));
        }
        Ok(())
    }
}

/// Result of the ascent loop over a batch.
#[derive(Debug, Clone)]
pub struct Ascent {
    pub deltas: Vec<Tensor>,
    /// Mean clean cross-entropy, from iteration 0.
    pub clean_ce: f64,
    /// Parameter gradients of the mean clean cross-entropy.
    pub clean_grads: Gradients,
}

/// Outcome of one adversarial objective evaluation over a batch.
#[derive(Debug, Clone)]
pub struct AdvLoss {
    pub clean_ce: f64,
    pub perturbed_ce: f64,
    /// `clean_ce + perturbed_ce`.
    pub total: f64,
    pub deltas: Vec<Tensor>,
    /// Parameter gradients of the clean and perturbed terms; their sum is the
    /// gradient of `total`.
    pub gradients: [Gradients; 2],
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Builds `mean_i CE(embed(i) + delta_i, labels[i])`; returns the loss and the
/// delta leaves.
fn perturbed_batch_loss<M, E>(
    model: &M,
    g: &mut Graph,
    embed: &E,
    labels: &[usize],
    deltas: &[Tensor],
) -> Result<(Var, Vec<Var>)>
where
    M: EmbeddingClassifier + ?Sized,
    E: Fn(&mut Graph, &ParamStore, usize) -> Result<Var>,
{
    let store = model.params();
    let mut leaves = Vec::with_capacity(labels.len());
    let mut total: Option<Var> = None;
    for (i, (&label, delta)) in labels.iter().zip(deltas).enumerate() {
        let w = embed(g, store, i)?;
        let d = g.leaf(delta)?;
        let x = g.add(w, d)?;
        let logits = model.logits_with(g, store, x)?;
        let ce = cross_entropy(g, logits, label)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
        leaves.push(d);
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = g.scale(total, 1.0 / labels.len() as f64)?;
    Ok((loss, leaves))
}

/// Runs `cfg.steps` sign-gradient ascent iterations on the batch whose
/// `i`-th embedding matrix is produced by `embed(g, params, i)`.
pub fn pgd_ascent<M, E>(
    model: &M,
    embed: E,
    shapes: &[Vec<usize>],
    labels: &[usize],
    cfg: &AdvConfig,
    counter: &mut PassCounter,
) -> Result<Ascent>
where
    M: EmbeddingClassifier + ?Sized,
    E: Fn(&mut Graph, &ParamStore, usize) -> Result<Var>,
{
    cfg.validate()?;
    if shapes.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} inputs for {} labels",
            shapes.len(),
            labels.len()
        )));
    }
    let mut deltas: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let mut clean = None;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let (loss, leaves) = perturbed_batch_loss(model, &mut g, &embed, labels, &deltas)?;
        counter.record_forward();
        let value = g.scalar(loss);
        let grads = g.backward(loss)?;
        counter.record_backward();
        for (delta, &leaf) in deltas.iter_mut().zip(&leaves) {
            let grad = grads.wrt(leaf).ok_or_else(|| {
                Error::NonFiniteGradient("perturbation gradient missing".into())
            })?;
            for (d, &gr) in delta.data_mut().iter_mut().zip(grad) {
                *d = (*d + cfg.step_size * sign(gr)).clamp(-cfg.epsilon, cfg.epsilon);
            }
        }
        if clean.is_none() {
            clean = Some((value, grads));
        }
    }
    let (clean_ce, clean_grads) = clean.expect("steps >= 1");
    Ok(Ascent {
        deltas,
        clean_ce,
        clean_grads,
    })
}

/// Full adversarial objective `CE(W) + CE(W + delta)` averaged over the batch,
/// with `1 + T` forwards and backwards.
pub fn adversarial_batch_loss<M, E>(
    model: &M,
    embed: E,
    shapes: &[Vec<usize>],
    labels: &[usize],
    cfg: &AdvConfig,
    counter: &mut PassCounter,
) -> Result<AdvLoss>
where
    M: EmbeddingClassifier + ?Sized,
    E: Fn(&mut Graph, &ParamStore, usize) -> Result<Var>,
{
    let ascent = pgd_ascent(model, &embed, shapes, labels, cfg, counter)?;
    let mut g = Graph::new();
    let (loss, _) = perturbed_batch_loss(model, &mut g, &embed, labels, &ascent.deltas)?;
    counter.record_forward();
    let perturbed_ce = g.scalar(loss);
    let grads = g.backward(loss)?;
    counter.record_backward();
    Ok(AdvLoss {
        clean_ce: ascent.clean_ce,
        perturbed_ce,
        total: ascent.clean_ce + perturbed_ce,
        deltas: ascent.deltas,
        gradients: [ascent.clean_grads, grads],
    })
}

fn leaf_embed(w: &Tensor) -> impl Fn(&mut Graph, &ParamStore, usize) -> Result<Var> + '_ {
    move |g, _, _| Ok(g.leaf(w)?)
}

/// Adversarial copy `W + delta` of a single embedding matrix after
/// `cfg.steps` ascent iterations.
pub fn pgd_perturb<M: EmbeddingClassifier + ?Sized>(
    model: &M,
    w: &Tensor,
    label: usize,
    cfg: &AdvConfig,
    counter: &mut PassCounter,
) -> Result<Tensor> {
    let ascent = pgd_ascent(model, leaf_embed(w), &[w.shape().to_vec()], &[label], cfg, counter)?;
    let data = w
        .data()
        .iter()
        .zip(ascent.deltas[0].data())
        .map(|(a, d)| a + d)
        .collect();
    Ok(Tensor::new(w.shape().to_vec(), data)?)
}

/// `CE(W) + CE(pgd_perturb(W))` for a single fixed embedding matrix.
pub fn adversarial_step_loss<M: EmbeddingClassifier + ?Sized>(
    model: &M,
    w: &Tensor,
    label: usize,
    cfg: &AdvConfig,
    counter: &mut PassCounter,
) -> Result<AdvLoss> {
    adversarial_batch_loss(model, leaf_embed(w), &[w.shape().to_vec()], &[label], cfg, counter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_config() {
        assert!(AdvConfig::new(0, 0.1, 0.1).is_err());
        assert!(AdvConfig::new(1, 0.0, 0.1).is_err());
        assert!(AdvConfig::new(1, 0.1, -1.0).is_err());
        assert!(AdvConfig::new(3, 0.1, 0.0).is_ok());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-3.0), -1.0);
    }
}
