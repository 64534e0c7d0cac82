//! Experiment harnesses: single runs from a flat config, sweeps over the
//! cutoff ratio and the consistency weight, the cutoff vs adversarial cost
//! comparison, and view-disagreement measurement.

mod records;
mod svg;
mod sweeps;

pub use records::{
    format_f64, mean_sd, read_metrics, read_summary, write_metrics, write_summary, MetricsRecord, SummaryRow,
    METRICS_COLUMNS,
};
pub use svg::{line_chart, Series};
pub use sweeps::{
    compare_adversarial, run_parallel, sweep_beta, sweep_ratio, sweep_svg, Comparison, ComparisonRow, Sweep,
    SweepFailure, PUBLISHED_BETA_MNLI, PUBLISHED_BEST_RATIO, SWEEP_BETAS, SWEEP_RATIOS,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::AdvConfig;
use crate::cutoff::{apply_mask, sample_mask, CutoffKind, CutoffSpec};
use crate::embedding::TokenSequence;
use crate::error::{Error, Result};
use crate::models::{argmax, Classifier, EmbeddingClassifier, EncoderConfig, Seq2Seq, Seq2SeqConfig};
use crate::objective::LossWeights;
use crate::synth_data::{
    apply_label_noise, gen_keyword_task, gen_lexicon_pairs, gen_majority_task, split, LabeledExample, PairExample,
    Split, LEXICON_VOCAB, MAJORITY_VOCAB,
};
use crate::tensor::Graph;
use crate::trainer::{
    accuracy, evaluate_pairs, stream, train_classifier, train_seq2seq, EpochLog, StepPasses, TrainConfig, TrainMode,
    INIT_STREAM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Keyword,
    Majority,
    Lexicon,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Keyword => "keyword",
            Task::Majority => "majority",
            Task::Lexicon => "lexicon",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyword" => Ok(Task::Keyword),
            "majority" => Ok(Task::Majority),
            "lexicon" => Ok(Task::Lexicon),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Everything one run needs, as a flat key/value document. Defaults are the
/// small-data keyword setting: 200 noisy training examples, span cutoff 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Examples generated before the 70/15/15 split.
    pub n_examples: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub redundancy: usize,
    /// Keep only this many training examples after the split.
    pub train_size: Option<usize>,
    /// Fraction of training labels reassigned (classification only).
    pub label_noise: f64,

    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub mode: TrainMode,
    pub cutoff_kind: CutoffKind,
    pub cutoff_ratio: f64,
    pub n_samples: usize,
    pub protect_cls: bool,
    pub aug_ce_weight: f64,
    pub js_weight: f64,
    pub adv_steps: usize,
    pub adv_step_size: f64,
    pub adv_epsilon: f64,
    pub seed: u64,
    /// Record elapsed seconds; off by default so metrics files are
    /// reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Keyword,
            n_examples: 2000,
            seq_len: 20,
            vocab: 50,
            redundancy: 3,
            train_size: Some(200),
            label_noise: 0.1,
            layers: 2,
            heads: 2,
            width: 32,
            ffn_width: 64,
            epochs: 20,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_ratio: 0.06,
            weight_decay: 0.1,
            mode: TrainMode::Cutoff,
            cutoff_kind: CutoffKind::Span,
            cutoff_ratio: 0.1,
            n_samples: 1,
            protect_cls: true,
            aug_ce_weight: 1.0,
            js_weight: 1.0,
            adv_steps: 1,
            adv_step_size: 0.01,
            adv_epsilon: 0.03,
            seed: 0,
            wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the sequence-pair task: 500 lexicon-reversal pairs of up
    /// to 14 words, token cutoff 0.1 on both sides, 30 epochs.
    pub fn lexicon() -> Self {
        ExperimentConfig {
            task: Task::Lexicon,
            n_examples: 500,
            seq_len: 14,
            vocab: LEXICON_VOCAB,
            train_size: None,
            label_noise: 0.0,
            layers: 1,
            epochs: 30,
            cutoff_kind: CutoffKind::Token,
            protect_cls: false,
            ..ExperimentConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn cutoff_spec(&self) -> CutoffSpec {
        CutoffSpec {
            kind: self.cutoff_kind,
            cutoff_ratio: self.cutoff_ratio,
            n_samples: self.n_samples,
            protect_cls: self.protect_cls,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            cutoff: self.cutoff_spec(),
            weights: LossWeights {
                aug_ce_weight: self.aug_ce_weight,
                js_weight: self.js_weight,
            },
            adversarial: AdvConfig {
                steps: self.adv_steps,
                step_size: self.adv_step_size,
                epsilon: self.adv_epsilon,
            },
            mode: self.mode,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.mode == TrainMode::Cutoff && self.cutoff_kind == CutoffKind::None {
            return Err(Error::Config("cutoff mode needs a cutoff_kind".into()));
        }
        if self.task == Task::Lexicon && self.mode == TrainMode::Adversarial {
            return Err(Error::Config("adversarial mode is defined for classification only".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        match self.task {
            Task::Keyword | Task::Majority => self.encoder_config().validate(),
            Task::Lexicon => self.seq2seq_config().validate(),
        }
    }

    /// Classification tasks carry the classification token inside `seq_len`.
    pub fn encoder_config(&self) -> EncoderConfig {
        let (vocab, max_len) = match self.task {
            Task::Majority => (MAJORITY_VOCAB, self.seq_len + 1),
            _ => (self.vocab, self.seq_len),
        };
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            ffn_width: self.ffn_width,
            max_len,
            vocab,
            classes: 2,
        }
    }

    /// Room for `seq_len` words plus EOS on either side.
    pub fn seq2seq_config(&self) -> Seq2SeqConfig {
        Seq2SeqConfig {
            encoder_layers: self.layers,
            decoder_layers: self.layers,
            heads: self.heads,
            width: self.width,
            ffn_width: self.ffn_width,
            max_len: self.seq_len + 1,
            src_vocab: LEXICON_VOCAB,
            tgt_vocab: LEXICON_VOCAB,
        }
    }

    /// Seeds of the generator, the split and the label noise, derived from
    /// the run seed so that each seed is a fresh draw of the task.
    fn data_seeds(&self) -> [u64; 3] {
        let base = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        [base ^ 0xD47A, base ^ 0x5911, base ^ 0x0015E]
    }

    pub fn classification_data(&self) -> Result<Split<LabeledExample>> {
        let [gen, sp, noise] = self.data_seeds();
        let data = match self.task {
            Task::Keyword => gen_keyword_task(self.n_examples, self.seq_len, self.vocab, self.redundancy, gen)?,
            Task::Majority => gen_majority_task(self.n_examples, self.seq_len, gen)?,
            Task::Lexicon => return Err(Error::Config("lexicon is a pair task".into())),
        };
        let mut s = split(&data, sp);
        if let Some(n) = self.train_size {
            if n > s.train.len() {
                return Err(Error::Config(format!(
                    "train_size {n} exceeds the {} training examples",
                    s.train.len()
                )));
            }
            s.train.truncate(n);
        }
        apply_label_noise(&mut s.train, self.label_noise, 2, noise)?;
        Ok(s)
    }

    pub fn pair_data(&self) -> Result<Split<PairExample>> {
        if self.task != Task::Lexicon {
            return Err(Error::Config(format!("{} is a classification task", self.task)));
        }
        let [gen, sp, _] = self.data_seeds();
        let data = gen_lexicon_pairs(self.n_examples, self.seq_len, gen)?;
        let mut s = split(&data, sp);
        if let Some(n) = self.train_size {
            s.train.truncate(n);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Classifier(Classifier),
    Seq2Seq(Seq2Seq),
}

impl TrainedModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        match self {
            TrainedModel::Classifier(m) => m.save(path),
            TrainedModel::Seq2Seq(m) => m.save(path),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
    /// Dev accuracy (or exact match) after the last epoch.
    pub final_dev: f64,
    /// Held-out test accuracy (or exact match) after the last epoch.
    pub test_metric: f64,
    pub totals: StepPasses,
    pub steps: usize,
    pub wall_seconds: f64,
    pub model: TrainedModel,
}

impl RunResult {
    pub fn per_step(&self) -> (f64, f64) {
        let s = self.steps.max(1) as f64;
        (self.totals.forwards as f64 / s, self.totals.backwards as f64 / s)
    }
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    run_id: &'a str,
    start: Instant,
    records: Vec<MetricsRecord>,
}

impl Recorder<'_> {
    fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64, passes: StepPasses) {
        let wall = if self.cfg.wall_clock {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        self.records.push(MetricsRecord {
            run_id: self.run_id.to_string(),
            seed: self.cfg.seed,
            mode: self.cfg.mode.to_string(),
            cutoff_kind: self.cfg.cutoff_kind.to_string(),
            cutoff_ratio: self.cfg.cutoff_ratio,
            aug_ce_weight: self.cfg.aug_ce_weight,
            js_weight: self.cfg.js_weight,
            epoch,
            split: split.to_string(),
            metric_name: metric.to_string(),
            value,
            forwards: passes.forwards,
            backwards: passes.backwards,
            wall_seconds: wall,
        });
    }

    fn epoch(&mut self, log: &EpochLog, dev_metric: &str) {
        let passes = StepPasses {
            forwards: log.forwards,
            backwards: log.backwards,
        };
        self.push(log.epoch, "train", "loss", log.train_loss, passes);
        self.push(log.epoch, "dev", dev_metric, log.dev_metric, passes);
        if let Some(ce) = log.dev_ce {
            self.push(log.epoch, "dev", "cross_entropy", ce, passes);
        }
    }
}

/// Generates the data, trains one model and evaluates it on dev (every
/// epoch) and test (at the end).
pub fn run_one(cfg: &ExperimentConfig, run_id: &str) -> Result<RunResult> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let mut rec = Recorder {
        cfg,
        run_id,
        start: Instant::now(),
        records: Vec::new(),
    };
    let mut init = stream(cfg.seed, INIT_STREAM);
    let (outcome, test_metric, test_name, model) = match cfg.task {
        Task::Keyword | Task::Majority => {
            let data = cfg.classification_data()?;
            let mut model = Classifier::new(cfg.encoder_config(), &mut init)?;
            let out = train_classifier(&mut model, &data.train, &data.dev, &tc, |l| rec.epoch(l, "accuracy"))?;
            let test = accuracy(&model, &data.test)?;
            (out, test, "accuracy", TrainedModel::Classifier(model))
        }
        Task::Lexicon => {
            let data = cfg.pair_data()?;
            let mut model = Seq2Seq::new(cfg.seq2seq_config(), &mut init)?;
            let out = train_seq2seq(&mut model, &data.train, &data.dev, &tc, |l| rec.epoch(l, "exact_match"))?;
            let test = evaluate_pairs(&model, &data.test)?.exact_match;
            (out, test, "exact_match", TrainedModel::Seq2Seq(model))
        }
    };
    let totals = outcome.counter.totals();
    rec.push(cfg.epochs, "test", test_name, test_metric, totals);
    Ok(RunResult {
        run_id: run_id.to_string(),
        config: cfg.clone(),
        records: rec.records,
        final_dev: outcome.final_dev(),
        test_metric,
        totals,
        steps: outcome.counter.steps().len(),
        wall_seconds: rec.start.elapsed().as_secs_f64(),
        model,
    })
}

/// View-disagreement statistics over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    /// Fraction of examples whose view predictions are not all equal.
    pub rate: f64,
    /// Error rate of each view's prediction.
    pub view_errors: Vec<f64>,
    /// Whether `rate >= max(view_errors)`; reported, never enforced.
    pub bound_holds: bool,
}

/// Draws `n_views` independent cutoff views of every example (masks from
/// `rng`) and compares the model's argmax predictions.
pub fn measure_disagreement<M: EmbeddingClassifier + ?Sized>(
    model: &M,
    embed: impl Fn(&mut Graph, &TokenSequence) -> Result<crate::Var>,
    data: &[LabeledExample],
    spec: &CutoffSpec,
    n_views: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Disagreement> {
    spec.validate()?;
    if n_views < 2 {
        return Err(Error::TooFewPredictions(n_views));
    }
    if data.is_empty() {
        return Err(Error::Config("disagreement needs at least one example".into()));
    }
    let mut disagree = 0usize;
    let mut errors = vec![0usize; n_views];
    for e in data {
        let mut g = Graph::new();
        let w = embed(&mut g, &e.tokens)?;
        let (len, width) = (g.shape(w)[0], g.shape(w)[1]);
        let mut preds = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let mask = sample_mask(len, width, spec, rng);
            let view = apply_mask(&mut g, w, &mask)?;
            let logits = model.logits_with(&mut g, model.params(), view)?;
            preds.push(argmax(g.value(logits)));
        }
        disagree += usize::from(preds.iter().any(|&p| p != preds[0]));
        for (k, &p) in preds.iter().enumerate() {
            errors[k] += usize::from(p != e.label);
        }
    }
    let n = data.len() as f64;
    let rate = disagree as f64 / n;
    let view_errors: Vec<f64> = errors.iter().map(|&c| c as f64 / n).collect();
    let worst = view_errors.iter().cloned().fold(0.0, f64::max);
    Ok(Disagreement {
        rate,
        view_errors,
        bound_holds: rate >= worst,
    })
}
