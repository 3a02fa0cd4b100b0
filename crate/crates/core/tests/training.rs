mod support;

use ssdet::augment::AugmentationPolicy;
use ssdet::data::{generate_synthetic_dataset, ImageRecord, ImageSource, Normalization, SyntheticImages};
use ssdet::metrics;
use ssdet::model::{Architecture, Checkpoint, DetectionHeads, FeatureExtractor, ProjectionHead, Provenance};
use ssdet::nn::Tensor3;
use ssdet::train::{self, Selection, TrainConfig, TrainRecord};
use ssdet::Error;

fn ssl_config(epochs: usize, batch: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::ssl_default();
    c.max_epochs = epochs;
    c.batch_size = batch;
    c.learning_rate = 1e-3;
    c.seed = seed;
    c
}

fn curves(r: &TrainRecord) -> Vec<(f64, Option<f64>)> {
    r.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
}

#[test]
fn linear_probe_overfits_ten_images() {
    let (set, cache) = support::tiny_synthetic(10, 224, 3);
    let backbone = FeatureExtractor::new(Architecture::TinyCnn, 3);
    let ckpt = Checkpoint::from_backbone(&backbone, Provenance::Random, "overfit");
    let heads = DetectionHeads::new(backbone.out_channels(), 2, 3);
    let mut cfg = TrainConfig::detector_default();
    cfg.max_epochs = 200;
    cfg.seed = 3;
    let (det, rec) =
        train::train_detector(&cfg, &ckpt, &set, &set, &cache, heads, &AugmentationPolicy::identity()).unwrap();
    assert_eq!(rec.epochs.len(), 200);
    let preds = train::predict(&det, &set, &cache).unwrap();
    let top1 = metrics::topn_accuracy(&preds, 1).unwrap();
    let miou = metrics::mean_iou(&preds).unwrap();
    println!("top1 {top1} mean IoU {miou:.3}");
    assert_eq!(top1, 1.0);
    assert!(miou >= 0.5, "mean IoU {miou}");
}

#[test]
fn contrastive_training_lowers_the_loss() {
    let ds = generate_synthetic_dataset(32, &["blue-square", "red-disc"], 64, 4).unwrap();
    let source = SyntheticImages::new(&[&ds], 64, Normalization::default());
    let pool = ds.manifest.to_unlabeled_pool();
    let (_, rec) = train::pretrain_ssl(
        &ssl_config(30, 8, 4),
        &pool,
        &source,
        FeatureExtractor::new(Architecture::TinyCnn, 4),
        ProjectionHead::new(128, 4),
        &AugmentationPolicy::ssl_desk(),
    )
    .unwrap();
    let losses = rec.train_losses();
    assert_eq!(losses.len(), 30);
    assert!(losses.iter().all(|l| l.is_finite()));
    println!("first {:.4} last {:.4}", losses[0], losses[29]);
    assert!(losses[29] < losses[0]);
}

#[test]
fn seeded_runs_repeat_exactly() {
    let ds = generate_synthetic_dataset(12, &["blue-square", "red-disc"], 32, 5).unwrap();
    let source = SyntheticImages::new(&[&ds], 32, Normalization::default());
    let pool = ds.manifest.to_unlabeled_pool();
    let run = || {
        train::pretrain_ssl(
            &ssl_config(3, 4, 5),
            &pool,
            &source,
            FeatureExtractor::new(Architecture::TinyCnn, 5),
            ProjectionHead::new(128, 5),
            &AugmentationPolicy::ssl_default(),
        )
        .unwrap()
    };
    let (ck_a, rec_a) = run();
    let (ck_b, rec_b) = run();
    assert_eq!(curves(&rec_a), curves(&rec_b));
    assert_eq!(rec_a.best_epoch, rec_b.best_epoch);
    assert_eq!(ck_a.groups, ck_b.groups);

    let (set, cache) = support::tiny_synthetic(8, 32, 5);
    let det_run = || {
        train::train_detector(
            &support::short_detector_config(4, 5),
            &ck_a,
            &set,
            &set,
            &cache,
            DetectionHeads::new(128, 2, 5),
            &AugmentationPolicy::detector_default(),
        )
        .unwrap()
    };
    let (det_a, rec_a) = det_run();
    let (det_b, rec_b) = det_run();
    assert_eq!(curves(&rec_a), curves(&rec_b));
    assert_eq!(det_a.heads.params().digest(), det_b.heads.params().digest());
}

#[test]
fn returned_parameters_reproduce_the_best_validation_loss() {
    let ds = generate_synthetic_dataset(24, &["blue-square", "red-disc"], 32, 6).unwrap();
    let source = SyntheticImages::new(&[&ds], 32, Normalization::default());
    let pool = ds.manifest.to_unlabeled_pool();
    let mut cfg = ssl_config(6, 8, 6);
    cfg.val_fraction = 0.25;
    let policy = AugmentationPolicy::ssl_default();
    let (ck, rec) = train::pretrain_ssl(
        &cfg,
        &pool,
        &source,
        FeatureExtractor::new(Architecture::TinyCnn, 6),
        ProjectionHead::new(128, 6),
        &policy,
    )
    .unwrap();
    let recorded = rec.best().val_loss.unwrap();
    let again = train::ssl_validation_loss(&cfg, &pool, &source, &ck, &policy).unwrap().unwrap();
    assert!((recorded - again).abs() < 1e-5, "{recorded} vs {again}");
    let min = rec.val_losses().into_iter().flatten().fold(f64::INFINITY, f64::min);
    assert_eq!(recorded, min);

    let (set, cache) = support::tiny_synthetic(12, 32, 6);
    let (train_set, val_set) = ssdet::data::split_train_val(&set, 0.75, 6).unwrap();
    for selection in [Selection::ValLoss, Selection::ValMeanIou] {
        let mut dcfg = support::short_detector_config(15, 6);
        dcfg.selection = selection;
        let (det, drec) = train::train_detector(
            &dcfg,
            &ck,
            &train_set,
            &val_set,
            &cache,
            DetectionHeads::new(128, 2, 6),
            &AugmentationPolicy::identity(),
        )
        .unwrap();
        let best = drec.best();
        let loss = train::detector_loss(&det, &val_set, &cache, dcfg.alpha).unwrap();
        assert!((loss - best.val_loss.unwrap()).abs() < 1e-5, "{selection:?}: {loss} vs {:?}", best.val_loss);
        let miou = metrics::mean_iou(&train::predict(&det, &val_set, &cache).unwrap()).unwrap();
        assert!((miou - best.val_mean_iou.unwrap()).abs() < 1e-5);
    }
}

struct Poisoned;

impl ImageSource for Poisoned {
    fn tensor(&self, _: &ImageRecord) -> ssdet::Result<Tensor3> {
        Ok(Tensor3::filled(3, 32, 32, f32::NAN))
    }
}

#[test]
fn non_finite_losses_abort_training() {
    let ds = generate_synthetic_dataset(8, &["blue-square", "red-disc"], 32, 7).unwrap();
    let err = train::pretrain_ssl(
        &ssl_config(2, 4, 7),
        &ds.manifest.to_unlabeled_pool(),
        &Poisoned,
        FeatureExtractor::new(Architecture::TinyCnn, 7),
        ProjectionHead::new(128, 7),
        &AugmentationPolicy::identity(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn detector_contract_errors() {
    let (set, cache) = support::tiny_synthetic(8, 32, 8);
    let ckpt = Checkpoint::from_backbone(&FeatureExtractor::new(Architecture::TinyCnn, 8), Provenance::Random, "x");
    let cfg = support::short_detector_config(1, 8);
    let policy = AugmentationPolicy::identity();
    let wrong_classes = train::train_detector(&cfg, &ckpt, &set, &set, &cache, DetectionHeads::new(128, 3, 8), &policy);
    assert!(matches!(wrong_classes, Err(Error::Contract(_))));
    let geometric = train::train_detector(
        &cfg,
        &ckpt,
        &set,
        &set,
        &cache,
        DetectionHeads::new(128, 2, 8),
        &AugmentationPolicy::ssl_default(),
    );
    assert!(geometric.is_err());
    let empty = set.with_records(set.split, Vec::new());
    let pretrain = train::pretrain_ssl(
        &ssl_config(1, 4, 8),
        &empty,
        &cache,
        FeatureExtractor::new(Architecture::TinyCnn, 8),
        ProjectionHead::new(128, 8),
        &policy,
    );
    assert!(matches!(pretrain, Err(Error::Contract(_))));
}

#[test]
fn records_serialise_with_one_row_per_epoch() {
    let (set, cache) = support::tiny_synthetic(8, 32, 9);
    let ckpt = Checkpoint::from_backbone(&FeatureExtractor::new(Architecture::TinyCnn, 9), Provenance::Random, "x");
    let (_, rec) = train::train_detector(
        &support::short_detector_config(3, 9),
        &ckpt,
        &set,
        &set,
        &cache,
        DetectionHeads::new(128, 2, 9),
        &AugmentationPolicy::identity(),
    )
    .unwrap();
    let csv = rec.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_loss,seconds"));
    assert_eq!(lines.count(), 3);
    let back: TrainRecord = serde_json::from_str(&rec.to_json().unwrap()).unwrap();
    assert_eq!(curves(&back), curves(&rec));
}
