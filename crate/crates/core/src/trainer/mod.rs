//! Optimization loop: batching, per-mode objectives, Adam with warmup and
//! linear decay, evaluation, and per-step pass accounting.

mod adam;
mod passes;
mod schedule;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use passes::{PassCounter, StepPasses};
pub use schedule::{lr_at, warmup_steps};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_batch_loss, AdvConfig};
use crate::cutoff::{make_views, CutoffSpec};
use crate::error::{Error, Result};
use crate::models::{argmax, Classifier, EmbeddingClassifier, Seq2Seq};
use crate::objective::{mean_cross_entropy, total_loss, LossBreakdown, LossWeights};
use crate::synth_data::{LabeledExample, PairExample};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Cutoff,
    Adversarial,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Cutoff => "cutoff",
            TrainMode::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(TrainMode::Baseline),
            "cutoff" => Ok(TrainMode::Cutoff),
            "adversarial" | "pgd" => Ok(TrainMode::Adversarial),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub cutoff: CutoffSpec,
    pub weights: LossWeights,
    pub adversarial: AdvConfig,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_ratio: 0.06,
            weight_decay: 0.1,
            cutoff: CutoffSpec::default(),
            weights: LossWeights::default(),
            adversarial: AdvConfig::default(),
            mode: TrainMode::Baseline,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        self.cutoff.validate()?;
        self.weights.validate()?;
        if self.mode == TrainMode::Adversarial {
            self.adversarial.validate()?;
        }
        Ok(())
    }

    /// Passes one optimization step must register in this mode.
    pub fn expected_step_passes(&self) -> StepPasses {
        match self.mode {
            TrainMode::Baseline => StepPasses {
                forwards: 1,
                backwards: 1,
            },
            TrainMode::Cutoff => StepPasses {
                forwards: 1 + self.cutoff.n_samples as u64,
                backwards: 1,
            },
            TrainMode::Adversarial => StepPasses {
                forwards: 1 + self.adversarial.steps as u64,
                backwards: 1 + self.adversarial.steps as u64,
            },
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

/// Independent random streams derived from one seed, so that e.g. the data
/// order does not depend on how many masks were drawn.
pub fn stream(seed: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which);
    rng
}

pub const INIT_STREAM: u64 = 0;
pub const ORDER_STREAM: u64 = 1;
pub const MASK_STREAM: u64 = 2;

/// Batch-mean loss terms of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub passes: StepPasses,
    pub lr: f64,
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = g.add(sum, t)?;
    }
    Ok(g.scale(sum, 1.0 / terms.len() as f64)?)
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let views = parts[0].ce_augmented.len();
    LossBreakdown {
        ce_original: parts.iter().map(|p| p.ce_original).sum::<f64>() / n,
        ce_augmented: (0..views)
            .map(|j| parts.iter().map(|p| p.ce_augmented[j]).sum::<f64>() / n)
            .collect(),
        js: parts.iter().map(|p| p.js).sum::<f64>() / n,
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    }
}

fn check_passes(cfg: &TrainConfig, got: StepPasses) {
    assert_eq!(
        got,
        cfg.expected_step_passes(),
        "{} step registered {got:?}",
        cfg.mode
    );
}

fn finish_step<F>(
    params: &mut crate::ParamStore,
    optim: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    counter: &mut PassCounter,
    loss: LossBreakdown,
    accumulate: F,
) -> Result<StepReport>
where
    F: FnOnce(&mut crate::ParamStore),
{
    params.clear_grads();
    accumulate(params);
    adam_step(params, optim, lr, cfg.weight_decay)?;
    params.clear_grads();
    let passes = counter.end_step();
    check_passes(cfg, passes);
    Ok(StepReport { loss, passes, lr })
}

/// One optimization step of the classifier on `batch`.
pub fn train_step(
    model: &mut Classifier,
    batch: &[LabeledExample],
    cfg: &TrainConfig,
    optim: &mut AdamState,
    lr: f64,
    mask_rng: &mut ChaCha8Rng,
    counter: &mut PassCounter,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    counter.begin_step();
    if cfg.mode == TrainMode::Adversarial {
        let shapes: Vec<Vec<usize>> = batch
            .iter()
            .map(|e| vec![e.tokens.len(), model.config.width])
            .collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let m: &Classifier = model;
        let adv = adversarial_batch_loss(
            m,
            |g, store, i| m.embed_with(g, store, &batch[i].tokens),
            &shapes,
            &labels,
            &cfg.adversarial,
            counter,
        )?;
        let loss = LossBreakdown {
            ce_original: adv.clean_ce,
            ce_augmented: vec![adv.perturbed_ce],
            js: 0.0,
            total: adv.total,
        };
        let [clean, perturbed] = adv.gradients;
        return finish_step(&mut model.params, optim, cfg, lr, counter, loss, |p| {
            p.accumulate_grads(&clean);
            p.accumulate_grads(&perturbed);
        });
    }

    let mut g = Graph::new();
    let ws = batch
        .iter()
        .map(|e| model.embed(&mut g, &e.tokens))
        .collect::<Result<Vec<_>>>()?;
    let logits = model.classify_batch(&mut g, &ws, counter)?;
    let (loss_var, breakdown) = match cfg.mode {
        TrainMode::Baseline => {
            let ces = batch
                .iter()
                .zip(&logits)
                .map(|(e, &l)| mean_cross_entropy(&mut g, l, &[e.label]))
                .collect::<Result<Vec<_>>>()?;
            let loss = batch_mean(&mut g, &ces)?;
            let v = g.scalar(loss);
            (
                loss,
                LossBreakdown {
                    ce_original: v,
                    ce_augmented: Vec::new(),
                    js: 0.0,
                    total: v,
                },
            )
        }
        TrainMode::Cutoff => {
            let mut views_per_example = Vec::with_capacity(batch.len());
            for &w in &ws {
                let views = make_views(&mut g, w, &cfg.cutoff, mask_rng)?;
                views_per_example.push(views.into_iter().map(|(_, v)| v).collect::<Vec<_>>());
            }
            // one batched forward per view index
            let mut view_logits = vec![Vec::with_capacity(cfg.cutoff.n_samples); batch.len()];
            for j in 0..cfg.cutoff.n_samples {
                let inputs: Vec<Var> = views_per_example.iter().map(|v| v[j]).collect();
                for (i, l) in model.classify_batch(&mut g, &inputs, counter)?.into_iter().enumerate() {
                    view_logits[i].push(l);
                }
            }
            let mut totals = Vec::with_capacity(batch.len());
            let mut parts = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                let obj = total_loss(&mut g, logits[i], &view_logits[i], &[e.label], &cfg.weights)?;
                totals.push(obj.total);
                parts.push(obj.breakdown);
            }
            let loss = batch_mean(&mut g, &totals)?;
            let mut b = mean_breakdown(&parts);
            b.total = g.scalar(loss);
            (loss, b)
        }
        TrainMode::Adversarial => unreachable!(),
    };
    let grads = g.backward(loss_var)?;
    counter.record_backward();
    finish_step(&mut model.params, optim, cfg, lr, counter, breakdown, |p| {
        p.accumulate_grads(&grads)
    })
}

/// One optimization step of the encoder-decoder. Cutoff masks source and
/// decoder-input embeddings independently; loss targets stay unmasked.
pub fn train_step_seq2seq(
    model: &mut Seq2Seq,
    batch: &[PairExample],
    cfg: &TrainConfig,
    optim: &mut AdamState,
    lr: f64,
    mask_rng: &mut ChaCha8Rng,
    counter: &mut PassCounter,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if cfg.mode == TrainMode::Adversarial {
        return Err(Error::Config("adversarial mode is defined for classification only".into()));
    }
    counter.begin_step();
    let mut g = Graph::new();
    let store = &model.params;
    let mut srcs = Vec::with_capacity(batch.len());
    let mut tgts = Vec::with_capacity(batch.len());
    for e in batch {
        srcs.push(model.embed_source(&mut g, store, &e.source)?);
        tgts.push(model.embed_target(&mut g, store, &e.decoder_input())?);
    }
    let forward_all = |g: &mut Graph, s: &[Var], t: &[Var], counter: &mut PassCounter| -> Result<Vec<Var>> {
        let out = s
            .iter()
            .zip(t)
            .map(|(&a, &b)| model.logits_with(g, store, a, b))
            .collect::<Result<Vec<_>>>()?;
        counter.record_forward();
        Ok(out)
    };
    let logits = forward_all(&mut g, &srcs, &tgts, counter)?;

    let (loss_var, breakdown) = match cfg.mode {
        TrainMode::Cutoff => {
            let spec = CutoffSpec {
                protect_cls: false,
                ..cfg.cutoff
            };
            let mut src_views = Vec::with_capacity(batch.len());
            let mut tgt_views = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                let s: Vec<Var> = make_views(&mut g, srcs[i], &spec, mask_rng)?.into_iter().map(|(_, v)| v).collect();
                let t: Vec<Var> = make_views(&mut g, tgts[i], &spec, mask_rng)?.into_iter().map(|(_, v)| v).collect();
                src_views.push(s);
                tgt_views.push(t);
            }
            let mut view_logits = vec![Vec::new(); batch.len()];
            for j in 0..spec.n_samples {
                let s: Vec<Var> = src_views.iter().map(|v| v[j]).collect();
                let t: Vec<Var> = tgt_views.iter().map(|v| v[j]).collect();
                for (i, l) in forward_all(&mut g, &s, &t, counter)?.into_iter().enumerate() {
                    view_logits[i].push(l);
                }
            }
            let mut totals = Vec::with_capacity(batch.len());
            let mut parts = Vec::with_capacity(batch.len());
            for (i, e) in batch.iter().enumerate() {
                let obj = total_loss(&mut g, logits[i], &view_logits[i], &e.target, &cfg.weights)?;
                totals.push(obj.total);
                parts.push(obj.breakdown);
            }
            let loss = batch_mean(&mut g, &totals)?;
            let mut b = mean_breakdown(&parts);
            b.total = g.scalar(loss);
            (loss, b)
        }
        _ => {
            let ces = batch
                .iter()
                .zip(&logits)
                .map(|(e, &l)| mean_cross_entropy(&mut g, l, &e.target))
                .collect::<Result<Vec<_>>>()?;
            let loss = batch_mean(&mut g, &ces)?;
            let v = g.scalar(loss);
            (
                loss,
                LossBreakdown {
                    ce_original: v,
                    ce_augmented: Vec::new(),
                    js: 0.0,
                    total: v,
                },
            )
        }
    };
    let grads = g.backward(loss_var)?;
    counter.record_backward();
    finish_step(&mut model.params, optim, cfg, lr, counter, breakdown, |p| {
        p.accumulate_grads(&grads)
    })
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn evaluate<M: EmbeddingClassifier + ?Sized>(model: &M, embed: impl Fn(&mut Graph, &LabeledExample) -> Result<Var>, data: &[LabeledExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for e in data {
        let mut g = Graph::new();
        let w = embed(&mut g, e)?;
        let logits = model.logits_with(&mut g, model.params(), w)?;
        correct += usize::from(argmax(g.value(logits)) == e.label);
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn accuracy(model: &Classifier, data: &[LabeledExample]) -> Result<f64> {
    evaluate(model, |g, e| model.embed(g, &e.tokens), data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub exact_match: f64,
    /// Mean per-position teacher-forced cross-entropy.
    pub cross_entropy: f64,
}

pub fn evaluate_pairs(model: &Seq2Seq, data: &[PairExample]) -> Result<PairMetrics> {
    if data.is_empty() {
        return Ok(PairMetrics {
            exact_match: 0.0,
            cross_entropy: 0.0,
        });
    }
    let (mut exact, mut ce) = (0usize, 0.0);
    for e in data {
        let decoded = model.greedy_decode(&e.source, model.config.max_len)?;
        exact += usize::from(decoded == e.content());
        let mut g = Graph::new();
        let s = model.embed_source(&mut g, &model.params, &e.source)?;
        let t = model.embed_target(&mut g, &model.params, &e.decoder_input())?;
        let logits = model.logits_with(&mut g, &model.params, s, t)?;
        let l = mean_cross_entropy(&mut g, logits, &e.target)?;
        ce += g.scalar(l);
    }
    let n = data.len() as f64;
    Ok(PairMetrics {
        exact_match: exact as f64 / n,
        cross_entropy: ce / n,
    })
}

/// Per-epoch summary handed to the logging callback.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy (classification) or exact match (pairs) on the dev split.
    pub dev_metric: f64,
    /// Dev cross-entropy for pairs; `None` for classification.
    pub dev_ce: Option<f64>,
    pub forwards: u64,
    pub backwards: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub counter: PassCounter,
    /// Total losses of every step in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_dev(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.dev_metric)
    }

    pub fn best_dev(&self) -> f64 {
        self.epochs.iter().map(|e| e.dev_metric).fold(0.0, f64::max)
    }
}

fn run_loop<T, S, E>(
    train: &[T],
    cfg: &TrainConfig,
    mut step: S,
    mut eval_dev: E,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome>
where
    S: FnMut(&[T], f64, &mut ChaCha8Rng, &mut PassCounter) -> Result<StepReport>,
    E: FnMut() -> Result<(f64, Option<f64>)>,
    T: Clone,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let total = cfg.total_steps(train.len());
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let mut mask_rng = stream(cfg.seed, MASK_STREAM);
    let mut counter = PassCounter::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut t = 0;
    let mut step_losses = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            t += 1;
            let lr = lr_at(t, total, cfg.peak_lr, cfg.warmup_ratio)?;
            let batch: Vec<T> = chunk.iter().map(|&i| train[i].clone()).collect();
            let report = step(&batch, lr, &mut mask_rng, &mut counter)?;
            if !report.loss.total.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss diverged at step {t}")));
            }
            loss_sum += report.loss.total;
            steps += 1;
            step_losses.push(report.loss.total);
        }
        let (dev_metric, dev_ce) = eval_dev()?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            dev_metric,
            dev_ce,
            forwards: counter.forwards(),
            backwards: counter.backwards(),
        };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        epochs,
        counter,
        step_losses,
    })
}

/// Trains `model` in place; `on_epoch` sees every epoch summary as it lands.
pub fn train_classifier(
    model: &mut Classifier,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut optim = AdamState::new(&model.params);
    let cell = std::cell::RefCell::new(model);
    run_loop(
        train,
        cfg,
        |batch, lr, rng, counter| train_step(&mut cell.borrow_mut(), batch, cfg, &mut optim, lr, rng, counter),
        || Ok((accuracy(&cell.borrow(), dev)?, None)),
        on_epoch,
    )
}

pub fn train_seq2seq(
    model: &mut Seq2Seq,
    train: &[PairExample],
    dev: &[PairExample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut optim = AdamState::new(&model.params);
    let cell = std::cell::RefCell::new(model);
    run_loop(
        train,
        cfg,
        |batch, lr, rng, counter| train_step_seq2seq(&mut cell.borrow_mut(), batch, cfg, &mut optim, lr, rng, counter),
        || {
            let m = evaluate_pairs(&cell.borrow(), dev)?;
            Ok((m.exact_match, Some(m.cross_entropy)))
        },
        on_epoch,
    )
}
