use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cutoff_core::cutoff::CutoffKind;
use cutoff_core::embedding::TokenSequence;
use cutoff_core::experiments::{
    compare_adversarial, measure_disagreement, run_one, sweep_beta, sweep_ratio, sweep_svg, write_metrics,
    write_summary, ExperimentConfig, MetricsRecord, Sweep, SweepFailure, Task, SWEEP_BETAS, SWEEP_RATIOS,
};
use cutoff_core::models::{Classifier, EmbeddingClassifier, EncoderConfig, Seq2Seq, Seq2SeqConfig};
use cutoff_core::objective::{cross_entropy, mean_cross_entropy, total_loss, LossWeights};
use cutoff_core::synth_data::{save_labeled, save_pairs};
use cutoff_core::tensor::{gradcheck, GradCheckReport};
use cutoff_core::trainer::stream;
use cutoff_core::{Error, Graph, ParamStore, Tensor};

const MODEL_TOLERANCE: f64 = 1e-4;
const OP_TOLERANCE: f64 = 1e-6;
const DISAGREEMENT_STREAM: u64 = 7;

#[derive(Parser)]
#[command(name = "cutoff-lab", version, about = "Train and compare embedding-cutoff augmentation on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (first seed for sweeps).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.csv, model.ckpt and config.json.
    Train,
    /// Cutoff ratio sweep over all three kinds.
    SweepRatio {
        #[arg(long, default_value_t = 3)]
        n_seeds: usize,
    },
    /// Consistency-weight sweep with span cutoff.
    SweepBeta {
        #[arg(long, default_value_t = 3)]
        n_seeds: usize,
    },
    /// Baseline, cutoff and PGD (1 and 3 steps) under matched budgets.
    CompareAdv {
        #[arg(long, default_value_t = 3)]
        n_seeds: usize,
    },
    /// Finite-difference check of the objective and both model families.
    Gradcheck,
    /// View disagreement of a trained classifier on the dev split.
    Disagreement {
        /// Classifier checkpoint; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        views: usize,
    },
    /// Write the train/dev/test splits as text.
    GenData,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Infeasible(_) | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("run failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(first: u64, n: usize) -> Vec<u64> {
    (first..first + n as u64).collect()
}

fn save_metrics(dir: &Path, records: &[MetricsRecord]) -> Result<(), Failure> {
    let file = fs::File::create(dir.join("metrics.csv"))?;
    write_metrics(records, std::io::BufWriter::new(file))?;
    Ok(())
}

fn sweep_result(dir: &Path, result: Result<Sweep, SweepFailure>) -> Result<Sweep, Failure> {
    match result {
        Ok(s) => Ok(s),
        Err(f) => {
            if !f.partial.is_empty() {
                save_metrics(dir, &f.partial)?;
                eprintln!("wrote {} partial records", f.partial.len());
            }
            Err(f.error.into())
        }
    }
}

fn write_sweep(dir: &Path, sweep: &Sweep) -> Result<(), Failure> {
    save_metrics(dir, &sweep.records)?;
    let file = fs::File::create(dir.join("summary.csv"))?;
    write_summary(&sweep.summary, std::io::BufWriter::new(file))?;
    fs::write(dir.join(format!("sweep_{}.svg", sweep.name)), sweep_svg(sweep))?;
    let mut seen = Vec::new();
    for row in &sweep.summary {
        let key = (row.cutoff_kind.clone(), row.value.to_bits());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let reference = row.reference.map_or(String::new(), |r| format!("  (reference {r})"));
        println!(
            "{:8} {:>5}  dev {:.4} +- {:.4}  n={}{reference}",
            row.cutoff_kind, row.value, row.cell_mean, row.cell_sd, row.cell_n
        );
    }
    println!("{} summary rows written to {}", sweep.summary.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    if common.jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let dir = common.out.as_path();
    fs::create_dir_all(dir)?;
    match cli.command {
        Command::Train => {
            let r = run_one(&cfg, &format!("train-s{}", cfg.seed))?;
            save_metrics(dir, &r.records)?;
            r.model.save(&dir.join("model.ckpt"))?;
            fs::write(dir.join("config.json"), cfg.to_json())?;
            let (f, b) = r.per_step();
            println!(
                "{} {} seed {}: dev {:.4}  test {:.4}  {} steps  {f}F/{b}B per step",
                cfg.task, cfg.mode, cfg.seed, r.final_dev, r.test_metric, r.steps
            );
        }
        Command::SweepRatio { n_seeds } => {
            let kinds = [CutoffKind::Token, CutoffKind::Feature, CutoffKind::Span];
            let result = sweep_ratio(&cfg, &SWEEP_RATIOS, &kinds, &seeds(cfg.seed, n_seeds), common.jobs);
            let sweep = sweep_result(dir, result)?;
            write_sweep(dir, &sweep)?;
        }
        Command::SweepBeta { n_seeds } => {
            let result = sweep_beta(&cfg, &SWEEP_BETAS, &seeds(cfg.seed, n_seeds), common.jobs);
            let sweep = sweep_result(dir, result)?;
            write_sweep(dir, &sweep)?;
        }
        Command::CompareAdv { n_seeds } => {
            let c = match compare_adversarial(&cfg, &[1, 3], &seeds(cfg.seed, n_seeds), common.jobs) {
                Ok(c) => c,
                Err(f) => {
                    if !f.partial.is_empty() {
                        save_metrics(dir, &f.partial)?;
                    }
                    return Err(f.error.into());
                }
            };
            save_metrics(dir, &c.records)?;
            let mut w = csv::Writer::from_path(dir.join("comparison.csv")).map_err(Error::from)?;
            for row in &c.rows {
                w.serialize(row).map_err(Error::from)?;
            }
            w.flush()?;
            for method in ["baseline", "cutoff", "pgd-1", "pgd-3"] {
                let row = c.rows.iter().find(|r| r.method == method).expect("method present");
                println!(
                    "{method:9} dev {:.4}  {}F/{}B per step  {:.2}s total",
                    c.mean_dev(method),
                    row.forwards_per_step,
                    row.backwards_per_step,
                    c.wall_seconds(method)
                );
            }
        }
        Command::Gradcheck => gradcheck_suite(cfg.seed)?,
        Command::Disagreement { checkpoint, views } => {
            if cfg.task == Task::Lexicon {
                return Err(Failure::Config("disagreement needs a classification task".into()));
            }
            let model = match checkpoint {
                Some(path) => Classifier::load(&path)?,
                None => match run_one(&cfg, "disagreement")?.model {
                    cutoff_core::experiments::TrainedModel::Classifier(m) => m,
                    _ => unreachable!("classification task"),
                },
            };
            let data = cfg.classification_data()?;
            let spec = cfg.cutoff_spec();
            let mut rng = stream(cfg.seed, DISAGREEMENT_STREAM);
            let embed = |g: &mut Graph, s: &TokenSequence| model.embed(g, s);
            let d = measure_disagreement(&model, embed, &data.dev, &spec, views, &mut rng)?;
            println!("disagreement {:.6}", d.rate);
            for (k, e) in d.view_errors.iter().enumerate() {
                println!("view {k} error {e:.6}");
            }
            println!("rate >= max view error: {}", d.bound_holds);
        }
        Command::GenData => match cfg.task {
            Task::Lexicon => {
                let s = cfg.pair_data()?;
                save_pairs(&dir.join("train.txt"), &s.train)?;
                save_pairs(&dir.join("dev.txt"), &s.dev)?;
                save_pairs(&dir.join("test.txt"), &s.test)?;
                println!("{} / {} / {} pairs", s.train.len(), s.dev.len(), s.test.len());
            }
            _ => {
                let s = cfg.classification_data()?;
                save_labeled(&dir.join("train.txt"), &s.train)?;
                save_labeled(&dir.join("dev.txt"), &s.dev)?;
                save_labeled(&dir.join("test.txt"), &s.test)?;
                println!("{} / {} / {} examples", s.train.len(), s.dev.len(), s.test.len());
            }
        },
    }
    Ok(())
}

fn report(name: &str, r: &GradCheckReport, tolerance: f64) -> bool {
    let ok = r.max_rel_error < tolerance;
    println!(
        "{name:12} {:>5} coords  max rel error {:.3e}  {}",
        r.coordinates,
        r.max_rel_error,
        if ok { "ok" } else { "FAIL" }
    );
    ok
}

/// Small models with N(0, 0.25) parameters keep central differences well
/// conditioned.
fn gradcheck_suite(seed: u64) -> Result<(), Failure> {
    let mut rng = stream(seed, 0);
    let mut ok = true;

    let mut logits = ParamStore::new();
    for i in 0..3 {
        logits.add(format!("logits{i}"), Tensor::normal(&[5], 1.0, &mut rng), false);
    }
    let weights = LossWeights::new(1.0, 1.0)?;
    let r = gradcheck::<Error, _>(&logits, |g, s| {
        let l = s.ids().map(|id| g.param(s, id)).collect::<Result<Vec<_>, _>>()?;
        Ok(total_loss(g, l[0], &l[1..], &[2], &weights)?.total)
    })?;
    ok &= report("objective", &r, OP_TOLERANCE);

    let enc = EncoderConfig {
        layers: 2,
        heads: 2,
        width: 8,
        ffn_width: 16,
        max_len: 6,
        vocab: 10,
        classes: 3,
    };
    let mut clf = Classifier::new(enc, &mut rng)?;
    clf.randomize(0.5, &mut rng);
    let seq = TokenSequence::new(vec![0, 4, 7, 2, 9]);
    let r = gradcheck::<Error, _>(&clf.params, |g, s| {
        let w = clf.embed_with(g, s, &seq)?;
        let logits = clf.logits_with(g, s, w)?;
        cross_entropy(g, logits, 2)
    })?;
    ok &= report("classifier", &r, MODEL_TOLERANCE);

    let s2s = Seq2SeqConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        width: 8,
        ffn_width: 16,
        max_len: 6,
        src_vocab: 8,
        tgt_vocab: 8,
    };
    let mut m = Seq2Seq::new(s2s, &mut rng)?;
    m.randomize(0.5, &mut rng);
    let r = gradcheck::<Error, _>(&m.params, |g, s| {
        let src = m.embed_source(g, s, &[2, 5, 3])?;
        let tgt = m.embed_target(g, s, &[0, 4, 6, 2])?;
        let logits = m.logits_with(g, s, src, tgt)?;
        mean_cross_entropy(g, logits, &[4, 6, 2, 1])
    })?;
    ok &= report("seq2seq", &r, MODEL_TOLERANCE);

    if ok {
        Ok(())
    } else {
        Err(Failure::Run("gradient check above tolerance".into()))
    }
}
