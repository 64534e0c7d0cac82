use cutoff_core::cutoff::{CutoffKind, CutoffSpec};
use cutoff_core::experiments::{
    compare_adversarial, measure_disagreement, read_metrics, read_summary, run_one, sweep_beta, sweep_ratio,
    sweep_svg, write_metrics, write_summary, ExperimentConfig, Task, PUBLISHED_BETA_MNLI, SWEEP_BETAS,
};
use cutoff_core::models::{Classifier, EncoderConfig};
use cutoff_core::synth_data::LabeledExample;
use cutoff_core::embedding::TokenSequence;
use cutoff_core::trainer::TrainMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        n_examples: 200,
        seq_len: 10,
        vocab: 20,
        train_size: Some(60),
        layers: 1,
        width: 8,
        ffn_width: 16,
        epochs: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn ratio_sweep_counts_and_determinism() {
    let kinds = [CutoffKind::Token, CutoffKind::Span];
    let ratios = [0.1, 0.3];
    let seeds = [0, 1, 2];
    let a = sweep_ratio(&tiny(), &ratios, &kinds, &seeds, 2).unwrap();
    assert_eq!(a.summary.len(), kinds.len() * ratios.len() * seeds.len());
    // train loss, dev accuracy per epoch plus one test record
    assert_eq!(a.records.len(), 12 * (2 * 2 + 1));
    for row in &a.summary {
        assert_eq!(row.cell_n, 3);
        assert!((0.0..=1.0).contains(&row.dev_accuracy));
        assert!(row.reference.is_some());
    }
    // thread count does not change anything
    let b = sweep_ratio(&tiny(), &ratios, &kinds, &seeds, 1).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summary, b.summary);

    let svg = sweep_svg(&a);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(lines, kinds.len());
}

#[test]
fn sweeps_need_three_seeds() {
    let err = sweep_ratio(&tiny(), &[0.1], &[CutoffKind::Span], &[0, 1], 1).unwrap_err();
    assert!(err.partial.is_empty());
    assert!(sweep_beta(&tiny(), &[0.0], &[0], 1).is_err());
}

#[test]
fn failing_run_keeps_partial_records() {
    // ratio 2.0 fails validation before anything runs
    let err = sweep_ratio(&tiny(), &[0.1, 2.0], &[CutoffKind::Span], &[0, 1, 2], 1).unwrap_err();
    assert!(err.partial.is_empty());

    // a run that fails mid-sweep: train_size larger than the split
    let base = tiny();
    let mut bad = tiny();
    bad.train_size = Some(10_000);
    let tasks = vec![
        ("a".to_string(), base.clone()),
        ("b".to_string(), bad),
        ("c".to_string(), base),
    ];
    let err = cutoff_core::experiments::run_parallel(&tasks, 1).unwrap_err();
    assert_eq!(err.run_id.as_deref(), Some("b"));
    assert!(err.partial.iter().all(|r| r.run_id == "a"));
    assert!(!err.partial.is_empty());
}

#[test]
fn beta_sweep_zero_row_is_plain_augmentation() {
    let seeds = [0, 1, 2];
    let betas = [0.0, 1.0];
    let s = sweep_beta(&tiny(), &betas, &seeds, 1).unwrap();
    assert_eq!(s.summary.len(), betas.len() * seeds.len());
    for row in s.summary.iter().filter(|r| r.value == 0.0) {
        let cfg = ExperimentConfig {
            mode: TrainMode::Cutoff,
            cutoff_kind: CutoffKind::Span,
            js_weight: 0.0,
            seed: row.seed,
            ..tiny()
        };
        let direct = run_one(&cfg, "direct").unwrap();
        assert_eq!(direct.final_dev.to_bits(), row.dev_accuracy.to_bits());
        assert_eq!(row.reference, Some(PUBLISHED_BETA_MNLI[0].1));
        assert_eq!(row.cutoff_kind, "span");
    }
    assert_eq!(SWEEP_BETAS.len(), 5);
}

#[test]
fn comparison_orders_passes_and_time() {
    let base = ExperimentConfig {
        epochs: 3,
        ..tiny()
    };
    let c = compare_adversarial(&base, &[1, 3], &[0], 1).unwrap();
    let row = |m: &str| c.rows.iter().find(|r| r.method == m).unwrap().clone();
    assert_eq!((row("baseline").forwards_per_step, row("baseline").backwards_per_step), (1.0, 1.0));
    assert_eq!((row("cutoff").forwards_per_step, row("cutoff").backwards_per_step), (2.0, 1.0));
    assert_eq!((row("pgd-1").forwards_per_step, row("pgd-1").backwards_per_step), (2.0, 2.0));
    assert_eq!((row("pgd-3").forwards_per_step, row("pgd-3").backwards_per_step), (4.0, 4.0));
    assert_eq!(row("cutoff").steps, row("pgd-3").steps);
    assert!(c.wall_seconds("cutoff") < c.wall_seconds("pgd-3"));

    let again = compare_adversarial(&base, &[1, 3], &[0], 1).unwrap();
    for (a, b) in c.rows.iter().zip(&again.rows) {
        assert_eq!(a.dev_accuracy.to_bits(), b.dev_accuracy.to_bits());
        assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
    }
}

#[test]
fn records_round_trip_exactly() {
    let r = run_one(&tiny(), "rt").unwrap();
    let mut buf = Vec::new();
    write_metrics(&r.records, &mut buf).unwrap();
    assert_eq!(read_metrics(&buf[..]).unwrap(), r.records);

    let s = sweep_beta(&tiny(), &[0.3], &[4, 5, 6], 1).unwrap();
    let mut buf = Vec::new();
    write_summary(&s.summary, &mut buf).unwrap();
    assert_eq!(read_summary(&buf[..]).unwrap(), s.summary);
}

#[test]
fn lexicon_run_records_exact_match() {
    let cfg = ExperimentConfig {
        n_examples: 60,
        seq_len: 6,
        width: 8,
        ffn_width: 16,
        epochs: 1,
        ..ExperimentConfig::lexicon()
    };
    let r = run_one(&cfg, "lex").unwrap();
    let names: Vec<&str> = r.records.iter().map(|m| m.metric_name.as_str()).collect();
    assert_eq!(names, ["loss", "exact_match", "cross_entropy", "exact_match"]);
    assert_eq!(r.config.task, Task::Lexicon);
}

#[test]
fn config_json_round_trip_and_rejections() {
    let cfg = tiny();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let partial = ExperimentConfig::from_json(r#"{"cutoff_ratio": 0.2, "mode": "baseline"}"#).unwrap();
    assert_eq!(partial.cutoff_ratio, 0.2);
    assert_eq!(partial.mode, TrainMode::Baseline);
    assert!(ExperimentConfig::from_json(r#"{"cutof_ratio": 0.2}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"cutoff_ratio": 1.5}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"width": 30, "heads": 4}"#).is_err());
}

fn labeled(n: usize) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| LabeledExample {
            tokens: TokenSequence::new(vec![0, 2 + i % 5, 3, 4]),
            label: usize::from(i % 4 == 0),
        })
        .collect()
}

#[test]
fn disagreement_trivial_cases() {
    let cfg = EncoderConfig {
        layers: 1,
        width: 8,
        ffn_width: 16,
        max_len: 8,
        vocab: 8,
        ..EncoderConfig::default()
    };
    let mut model = Classifier::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.randomize(0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let data = labeled(40);
    let embed = |g: &mut cutoff_core::Graph, s: &TokenSequence| model.embed(g, s);

    // ratio 0 gives identical views
    let none = CutoffSpec::new(CutoffKind::Span, 0.0, 1, true).unwrap();
    let d = measure_disagreement(&model, embed, &data, &none, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(d.rate, 0.0);
    assert_eq!(d.view_errors[0], d.view_errors[1]);

    // a head with zero weights predicts class 0 always: errors equal the base rate
    let mut constant = model.clone();
    for (_, p) in constant.params.iter_mut() {
        if p.name.starts_with("head.") {
            p.value = cutoff_core::Tensor::zeros(p.value.shape());
        }
    }
    let embed_c = |g: &mut cutoff_core::Graph, s: &TokenSequence| constant.embed(g, s);
    let heavy = CutoffSpec::new(CutoffKind::Feature, 0.5, 1, true).unwrap();
    let d = measure_disagreement(&constant, embed_c, &data, &heavy, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(d.rate, 0.0);
    assert_eq!(d.view_errors, vec![0.25, 0.25]);

    let a = measure_disagreement(&model, embed, &data, &heavy, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = measure_disagreement(&model, embed, &data, &heavy, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.rate));
    assert!(a.view_errors.iter().all(|e| (0.0..=1.0).contains(e)));
    assert!(measure_disagreement(&model, embed, &data, &heavy, 1, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
}
