//! End-to-end behaviour of the training loops on a small generated dataset.

use std::sync::OnceLock;

use anatda::anatomy::FilterMode;
use anatda::datagen::{generate_dataset, load_split, BodyTemplate, DatasetManifest, GenConfig, Sample, SplitCounts};
use anatda::eval::{mpjpe, predict};
use anatda::model::{ModelState, PointCloud, Stage};
use anatda::skeleton::{AnatomicalBounds, SkeletonSpec};
use anatda::trainer::{adapt_sfda, adapt_uda, train_source, EpochLog, TrainConfig, Widths};

struct Data {
    spec: SkeletonSpec,
    bounds: AnatomicalBounds,
    source: Vec<Sample>,
    target: Vec<PointCloud>,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("small");
        let cfg = GenConfig {
            seed: 3,
            counts: SplitCounts {
                source_train: 12,
                target_train: 12,
                target_val: 4,
                target_test: 4,
            },
            subjects_per_split: 2,
            ..GenConfig::default()
        };
        generate_dataset(&cfg, &BodyTemplate::default_16(), &root, 1).unwrap();
        let manifest = DatasetManifest::load(&root).unwrap();
        Data {
            spec: manifest.spec(&root).unwrap(),
            bounds: manifest.bounds(&root).unwrap(),
            source: load_split(&root, "source-train").unwrap(),
            target: load_split(&root, "target-train")
                .unwrap()
                .into_iter()
                .map(|s| s.cloud)
                .collect(),
        }
    })
}

fn small(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ramp_epochs: 2,
        batch_source: 4,
        batch_target: 4,
        subsample_points: 64,
        widths: Widths {
            enc1: 8,
            enc2: 16,
            dec1: 16,
        },
        ..TrainConfig::uda()
    }
}

fn quiet(_: &EpochLog) {}

#[test]
fn training_is_deterministic_per_seed() {
    let d = data();
    let run = |seed| {
        let cfg = TrainConfig { seed, ..small(2) };
        adapt_uda(&d.source, &d.target, &d.spec, &d.bounds, &cfg, None, &mut quiet)
            .unwrap()
            .to_bytes()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn single_sample_overfits() {
    let d = data();
    let one = &d.source[..1];
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_source: 1,
        weight_decay: 0.0,
        rotation_deg: 0.0,
        translation: 0.0,
        subsample_points: 512,
        widths: Widths::default(),
        ..small(600)
    };
    let mut losses = Vec::new();
    let state = train_source(one, &d.spec, &cfg, None, &mut |l: &EpochLog| losses.push(l.task)).unwrap();
    assert_eq!(losses.len(), 600);
    assert!(losses[599] < 0.2 * losses[0], "task loss {} -> {}", losses[0], losses[599]);
    let pred = predict(&state.student, &[one[0].cloud.clone()], 512).unwrap();
    let err = mpjpe(&pred, &[one[0].pose.clone()], &[]).unwrap().mean;
    assert!(err < 0.05, "mpjpe {err}");
}

#[test]
fn unfiltered_adaptation_accepts_every_pseudo_label() {
    let d = data();
    let cfg = TrainConfig {
        filter_mode: FilterMode::None,
        ..small(2)
    };
    let mut rates = Vec::new();
    adapt_uda(&d.source, &d.target, &d.spec, &d.bounds, &cfg, None, &mut |l: &EpochLog| {
        rates.push(l.accept_rate)
    })
    .unwrap();
    assert_eq!(rates, vec![1.0, 1.0]);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let d = data();
    let full = adapt_uda(&d.source, &d.target, &d.spec, &d.bounds, &small(3), None, &mut quiet).unwrap();
    let first = adapt_uda(&d.source, &d.target, &d.spec, &d.bounds, &small(1), None, &mut quiet).unwrap();
    let first = ModelState::from_bytes(&first.to_bytes()).unwrap();
    let mut epochs = Vec::new();
    let resumed = adapt_uda(&d.source, &d.target, &d.spec, &d.bounds, &small(3), Some(first), &mut |l: &EpochLog| {
        epochs.push(l.epoch)
    })
    .unwrap();
    assert_eq!(epochs, vec![2, 3]);
    assert_eq!(resumed.to_bytes(), full.to_bytes());
}

#[test]
fn source_free_with_no_epochs_returns_the_input() {
    let d = data();
    let pre = train_source(&d.source, &d.spec, &small(1), None, &mut quiet).unwrap();
    let out = adapt_sfda(&pre, &d.target, &d.spec, &d.bounds, &TrainConfig { epochs: 0, ..small(0) }, &mut quiet).unwrap();
    assert_eq!(out.to_bytes(), pre.to_bytes());
    assert_eq!(pre.stage, Stage::Source);
}

#[test]
fn source_free_rejects_mismatched_architecture() {
    let d = data();
    let pre = train_source(&d.source, &d.spec, &small(1), None, &mut quiet).unwrap();
    let cfg = TrainConfig {
        widths: Widths {
            enc1: 4,
            enc2: 16,
            dec1: 16,
        },
        ..small(1)
    };
    assert!(adapt_sfda(&pre, &d.target, &d.spec, &d.bounds, &cfg, &mut quiet).is_err());
}

#[test]
fn empty_target_is_rejected() {
    let d = data();
    let err = adapt_uda(&d.source, &[], &d.spec, &d.bounds, &small(1), None, &mut quiet).unwrap_err();
    assert_eq!(err.code(), "E-EMPTY");
}

#[test]
fn shipped_desk_configs_match_the_preset() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let uda = TrainConfig::load_over(&TrainConfig::uda(), &dir.join("desk.toml")).unwrap();
    assert_eq!(uda, TrainConfig::uda().desk());
    let sfda = TrainConfig::load_over(&TrainConfig::uda(), &dir.join("desk-sfda.toml")).unwrap();
    assert_eq!(sfda, TrainConfig::sfda().desk());
}
