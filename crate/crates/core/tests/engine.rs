mod common;

use common::rng;
use rand::Rng;
use tofad::engine::{
    auc_roc, evaluate, evaluate_scores, load_checkpoint, save_checkpoint, score_sequence, smooth_scores, train,
    PreparedSequence, RunConfig, ScoreSeries,
};
use tofad::frameio::{Annotation, AnnotationTable, Category, Frame, FrameKind};
use tofad::losses::LossKind;
use tofad::models::ModelKind;
use tofad::tensor::ParamStore;
use tofad::synth::{generate_corpus, Corpus, CorpusSpec};

fn values(store: &ParamStore<f32>) -> Vec<u32> {
    store.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

fn small_corpus(seed: u64, frames: usize) -> Corpus {
    let spec = CorpusSpec {
        width: 32,
        height: 32,
        frames,
        train_sequences: 2,
        test_normal: 1,
        test_anomalous: 2,
        ..CorpusSpec::benchmark(seed)
    };
    generate_corpus(&spec).unwrap()
}

fn prepare(corpus: &Corpus, config: &RunConfig) -> (Vec<PreparedSequence>, Vec<PreparedSequence>) {
    let prep = |set: &[tofad::synth::SynthSequence]| {
        set.iter()
            .map(|s| PreparedSequence::from_raw(&s.rendered.depth, &s.rendered.depth, config).unwrap())
            .collect::<Vec<_>>()
    };
    (prep(&corpus.train), prep(&corpus.test))
}

/// Quadratic pairwise count: P(score_pos > score_neg) + 0.5 P(tie), in %.
fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    100.0 * wins / pairs
}

#[test]
fn auc_examples_and_errors() {
    assert_eq!(auc_roc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap(), 100.0);
    assert_eq!(auc_roc(&[4.0, 3.0, 2.0, 1.0], &[false, false, true, true]).unwrap(), 0.0);
    assert_eq!(auc_roc(&[0.7; 6], &[true, false, true, false, false, true]).unwrap(), 50.0);
    assert!(auc_roc(&[1.0, 2.0], &[true, true]).is_err());
    assert!(auc_roc(&[1.0, 2.0], &[false, false]).is_err());
    assert!(auc_roc(&[1.0], &[true, false]).is_err());
    assert!(auc_roc(&[1.0, f64::NAN], &[true, false]).is_err());
}

#[test]
fn auc_matches_pairwise_count_with_ties() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let m = r.gen_range(2..=100);
        let levels = r.gen_range(1..=m);
        let scores: Vec<f64> = (0..m).map(|_| r.gen_range(0..levels) as f64 / 3.0).collect();
        let mut labels: Vec<bool> = (0..m).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        assert_eq!(auc_roc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels), "seed {seed}");
    }
}

#[test]
fn auc_ignores_monotone_transforms() {
    let mut r = rng(9);
    let scores: Vec<f64> = (0..80).map(|_| r.gen_range(0.0..1.0)).collect();
    let labels: Vec<bool> = (0..80).map(|i| i % 3 == 0).collect();
    let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
    assert_eq!(auc_roc(&scores, &labels).unwrap(), auc_roc(&squashed, &labels).unwrap());
}

#[test]
fn scores_cover_frames_after_the_clip() {
    let corpus = small_corpus(1, 100);
    for model in [ModelKind::Rcae, ModelKind::Pcae] {
        let mut config = RunConfig::new(model, LossKind::Wmse);
        config.epochs = 1;
        let (train_set, test) = prepare(&corpus, &config);
        let trained = train(&config, &train_set[..1]).unwrap();
        let series = score_sequence(&trained.model, &test[0], &config).unwrap();
        assert_eq!(series.len(), 96);
        assert_eq!(series.indices, (4..100).collect::<Vec<_>>());
        assert!(series.scores.iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn prediction_scores_are_causal() {
    let corpus = small_corpus(2, 70);
    let config = RunConfig::new(ModelKind::Pcae, LossKind::Fmse);
    let (train_set, test) = prepare(&corpus, &config);
    let model = train(&config, &train_set[..1]).unwrap().model;
    let seq = &test[1];
    let full = score_sequence(&model, seq, &config).unwrap();
    for cut in [5, 33, 50] {
        let truncated = PreparedSequence {
            sequence_id: seq.sequence_id.clone(),
            frames: seq.frames[..=cut].to_vec(),
            masks: seq.masks.as_ref().map(|m| m[..=cut].to_vec()),
        };
        let part = score_sequence(&model, &truncated, &config).unwrap();
        assert_eq!(part.scores[..], full.scores[..part.len()], "cut at {cut}");
    }
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let corpus = small_corpus(3, 60);
    let config = RunConfig {
        seed: 11,
        ..RunConfig::new(ModelKind::Rcae, LossKind::Wmse)
    };
    let (train_set, test) = prepare(&corpus, &config);
    let a = train(&config, &train_set).unwrap();
    let b = train(&config, &train_set).unwrap();
    assert_eq!(values(a.model.params()), values(b.model.params()));
    assert_eq!(a.losses, b.losses);

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a.model, &config, &pa).unwrap();
    save_checkpoint(&b.model, &config, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let (loaded, loaded_config) = load_checkpoint(&pa).unwrap();
    assert_eq!(values(loaded.params()), values(a.model.params()));
    assert_eq!(loaded_config, config);

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let r1 = single.install(|| evaluate(&a.model, &test, &corpus.annotations, &config).unwrap());
    let r2 = many.install(|| evaluate(&loaded, &test, &corpus.annotations, &config).unwrap());
    assert_eq!(r1.to_toml(), r2.to_toml());
    assert_eq!(r1.traces, r2.traces);

    let other = RunConfig { seed: 12, ..config.clone() };
    assert_ne!(values(train(&other, &train_set).unwrap().model.params()), values(a.model.params()));
}

#[test]
fn training_loss_falls_on_normal_footage() {
    let corpus = small_corpus(4, 150);
    let config = RunConfig::new(ModelKind::Rcae, LossKind::Mse);
    let (train_set, _) = prepare(&corpus, &config);
    let losses = train(&config, &train_set).unwrap().losses;
    let k = losses.len() / 10;
    let head = losses[..k].iter().sum::<f64>() / k as f64;
    let tail = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head, "first 10% {head}, last 10% {tail}");
}

#[test]
fn training_input_errors() {
    let config = RunConfig::new(ModelKind::Rcae, LossKind::Mse);
    assert!(train(&config, &[]).is_err());
    let small = small_corpus(5, 40);
    let mut wide = CorpusSpec {
        width: 48,
        ..CorpusSpec::benchmark(5)
    };
    wide.frames = 40;
    wide.train_sequences = 1;
    wide.test_normal = 0;
    wide.test_anomalous = 0;
    let wide = generate_corpus(&wide).unwrap();
    let (mut a, _) = prepare(&small, &config);
    let (b, _) = prepare(&wide, &config);
    a.extend(b);
    assert!(train(&config, &a).is_err());

    let bad = RunConfig {
        epochs: 0,
        ..config.clone()
    };
    let (ok_set, _) = prepare(&small, &config);
    assert!(train(&bad, &ok_set).is_err());
}

#[test]
fn scoring_rejects_mismatched_models() {
    let corpus = small_corpus(6, 40);
    let config = RunConfig::new(ModelKind::Rcae, LossKind::Mse);
    let (train_set, test) = prepare(&corpus, &config);
    let model = train(&config, &train_set[..1]).unwrap().model;
    let wrong = RunConfig::new(ModelKind::Pcae, LossKind::Mse);
    assert!(score_sequence(&model, &test[0], &wrong).is_err());
    // Foreground losses need masks, which an MSE preparation skips.
    let fg = RunConfig::new(ModelKind::Rcae, LossKind::Fmse);
    assert!(score_sequence(&model, &test[0], &fg).is_err());
    let empty = AnnotationTable::default();
    assert!(evaluate(&model, &test, &empty, &config).is_err());
}

fn blank_sequence(id: &str, len: usize) -> PreparedSequence {
    let frame = Frame::new(2, 2, vec![0.0; 4], vec![true; 4], FrameKind::Normalized).unwrap();
    PreparedSequence {
        sequence_id: id.to_string(),
        frames: vec![frame; len],
        masks: None,
    }
}

fn annotation(id: &str, first: usize, last: usize, category: Category) -> Annotation {
    Annotation {
        sequence_id: id.to_string(),
        first_anomalous: first,
        last_anomalous: last,
        anomaly_type: category.name().to_string(),
        category,
    }
}

#[test]
fn perfectly_separated_categories_score_full_marks() {
    let len = 40;
    let mut table = AnnotationTable::default();
    let mut test = Vec::new();
    let mut series = Vec::new();
    for (k, cat) in [Category::AggressiveBehavior, Category::MedicalIssue, Category::LeftBehindObject]
        .into_iter()
        .enumerate()
    {
        let id = format!("seq{k}");
        let (first, last) = (10 + k, 30);
        table.anomalies.push(annotation(&id, first, last, cat));
        test.push(blank_sequence(&id, len));
        series.push(ScoreSeries {
            sequence_id: id,
            indices: (4..len).collect(),
            scores: (4..len).map(|t| if (first..=last).contains(&t) { 5.0 } else { 1.0 }).collect(),
        });
    }
    table.normal_sequences.push("calm".into());
    test.push(blank_sequence("calm", len));
    series.push(ScoreSeries {
        sequence_id: "calm".into(),
        indices: (4..len).collect(),
        scores: vec![1.0; len - 4],
    });
    let config = RunConfig {
        smoothing_window_frames: 1,
        ..RunConfig::new(ModelKind::Rcae, LossKind::Mse)
    };
    let report = evaluate_scores(&series, &test, &table, &config, "hash".into()).unwrap();
    assert_eq!(report.overall.raw_percent, 100.0);
    assert_eq!(report.overall.smoothed_percent, 100.0);
    assert_eq!(report.categories.len(), 3);
    for c in &report.categories {
        assert_eq!(c.sequences, 1);
        assert_eq!(c.auc.unwrap().raw_percent, 100.0, "{:?}", c.category);
    }
    assert_eq!(report.frames_scored, 4 * (len - 4));

    // Smoothing moves only the smoothed column.
    let smoothed = RunConfig {
        smoothing_window_frames: 10,
        ..config.clone()
    };
    let r2 = evaluate_scores(&series, &test, &table, &smoothed, "hash".into()).unwrap();
    assert_eq!(r2.overall.raw_percent, report.overall.raw_percent);
    assert!(r2.overall.smoothed_percent < 100.0);
    for (a, b) in r2.traces.iter().zip(&report.traces) {
        assert_eq!(a.raw, b.raw);
    }
}

#[test]
fn category_negatives_come_from_the_same_sequences() {
    let len = 30;
    let mut table = AnnotationTable::default();
    table.anomalies.push(annotation("a", 10, 19, Category::AggressiveBehavior));
    table.anomalies.push(annotation("a", 22, 25, Category::Other));
    table.normal_sequences.push("n".into());
    let test = vec![blank_sequence("a", len), blank_sequence("n", len)];
    let series: Vec<ScoreSeries> = ["a", "n"]
        .iter()
        .map(|id| ScoreSeries {
            sequence_id: id.to_string(),
            indices: (4..len).collect(),
            scores: (4..len).map(|t| t as f64).collect(),
        })
        .collect();
    let config = RunConfig::new(ModelKind::Rcae, LossKind::Mse);
    let report = evaluate_scores(&series, &test, &table, &config, String::new()).unwrap();
    let aggressive = report.categories.iter().find(|c| c.category == Category::AggressiveBehavior).unwrap();
    // Frames 4..=29 of "a": 10 aggressive, 4 other (excluded), 12 unannotated.
    assert_eq!(aggressive.positive_frames, 10);
    assert_eq!(aggressive.negative_frames, 12);
    let other = report.categories.iter().find(|c| c.category == Category::Other).unwrap();
    assert_eq!(other.positive_frames, 4);
    assert_eq!(other.negative_frames, 12);
    assert_eq!(report.anomalous_frames, 14);
}

#[test]
fn smoothing_preserves_indices() {
    let mut r = rng(3);
    let s = ScoreSeries {
        sequence_id: "x".into(),
        indices: (4..60).collect(),
        scores: (4..60).map(|_| r.gen_range(0.0..2.0)).collect(),
    };
    for w in [1, 3, 10, 100] {
        let sm = smooth_scores(&s, w).unwrap();
        assert_eq!(sm.indices, s.indices);
        for (i, v) in sm.scores.iter().enumerate() {
            let lo = (i + 1).saturating_sub(w);
            let mean = s.scores[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            assert!((v - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn run_config_round_trip_and_validation() {
    let mut config = RunConfig::new(ModelKind::Pvit, LossKind::Fmse);
    config.seed = 42;
    config.mask.alpha = 0.25;
    let back = RunConfig::from_toml(&config.to_toml()).unwrap();
    assert_eq!(back, config);
    let defaults = RunConfig::from_toml("model = \"rcae\"\nloss = \"mse\"\n").unwrap();
    assert_eq!(defaults.epochs, 1);
    assert_eq!(defaults.learning_rate, 1e-3);
    assert_eq!(defaults.clip_length_frames, 4);
    assert_eq!(defaults.smoothing_window_frames, 10);
    assert!(RunConfig::from_toml("model = \"rcae\"\nloss = \"mse\"\nbogus = 1\n").is_err());
    for bad in [
        RunConfig { epochs: 0, ..config.clone() },
        RunConfig { smoothing_window_frames: 0, ..config.clone() },
        RunConfig { clip_length_frames: 0, ..config.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}
