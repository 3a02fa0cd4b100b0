//! Contrastive pre-training and frozen-backbone detector training.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{detector_augment, ssl_view_pair, AugmentationPolicy};
use crate::data::{split_train_val, BoundingBox, DatasetManifest, ImageRecord, ImageSource};
use crate::error::{Error, Result};
use crate::losses::{self, ContrastiveBatch};
use crate::metrics::{self, PredictionRecord};
use crate::model::{
    Checkpoint, CheckpointKind, DetectionHeads, Detector, FeatureExtractor, ProjectionHead, Provenance,
};
use crate::nn::{Adam, AdamConfig, Grads, Tensor3};
use crate::seed;

/// Gradient accumulation is split into this many ordered partial sums,
/// independent of the thread count, so results do not depend on scheduling.
const GRAD_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ssl,
    Detector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Lowest validation loss.
    #[default]
    ValLoss,
    /// Highest validation mean IoU (detector phase only).
    ValMeanIou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub patience: Option<usize>,
    /// Share of the pool held out for validation (pre-training only).
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub selection: Selection,
    /// Standardise pooled features with training-set statistics before the
    /// detection heads (detector phase).
    #[serde(default = "default_true")]
    pub standardize_features: bool,
}

fn default_true() -> bool {
    true
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_temperature() -> f64 {
    losses::DEFAULT_TEMPERATURE
}
fn default_alpha() -> f64 {
    0.5
}
fn default_val_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn ssl_default() -> Self {
        Self {
            phase: Phase::Ssl,
            max_epochs: 200,
            batch_size: 32,
            learning_rate: 5e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            temperature: default_temperature(),
            alpha: default_alpha(),
            seed: 0,
            patience: None,
            val_fraction: default_val_fraction(),
            selection: Selection::ValLoss,
            standardize_features: true,
        }
    }

    pub fn detector_default() -> Self {
        Self {
            phase: Phase::Detector,
            max_epochs: 100,
            learning_rate: 1e-3,
            ..Self::ssl_default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Domain(format!("{name}: {msg}")));
        if self.max_epochs == 0 {
            return field("max_epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if self.phase == Phase::Ssl && self.batch_size < 2 {
            return field("batch_size", "contrastive batches need at least 2 images");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return field("beta1/beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return field("adam_eps", "must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return field("temperature", "must be positive and finite");
        }
        losses::check_alpha(self.alpha)?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return field("val_fraction", "must lie in [0, 1)");
        }
        if self.patience == Some(0) {
            return field("patience", "must be positive when set");
        }
        if self.phase == Phase::Ssl && self.selection == Selection::ValMeanIou {
            return field("selection", "val-mean-iou applies to the detector phase only");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Validation mean IoU (detector phase).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mean_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub phase: Phase,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub total_seconds: f64,
    pub stopped_early: bool,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl TrainRecord {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `epoch,train_loss,val_loss,seconds`; a missing validation loss is empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"]).map_err(err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.8}", e.train_loss),
                e.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default(),
                format!("{:.3}", e.seconds),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()?), ("csv", self.to_csv()?)] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Tracks the selection criterion and patience.
struct Selector {
    maximise: bool,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl Selector {
    fn new(maximise: bool) -> Self {
        Self {
            maximise,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns true when `value` is a new best.
    fn offer(&mut self, epoch: usize, value: f64) -> bool {
        let better = match self.best {
            None => true,
            Some(b) if self.maximise => value > b,
            Some(b) => value < b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        better
    }
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &[&"shuffle", &epoch]));
    idx
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, step, loss })
    }
}

fn sum_ordered(parts: Vec<Grads>) -> Grads {
    let mut it = parts.into_iter();
    let mut total = it.next().expect("at least one chunk");
    for g in it {
        total.add_assign(&g);
    }
    total
}

fn chunk_len(n: usize) -> usize {
    n.div_ceil(GRAD_CHUNKS).max(1)
}

/// Two views per source, ordered `a0, b0, a1, b1, ...`.
fn make_views(
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    policy: &AugmentationPolicy,
    seed: u64,
    tag: &str,
    epoch: usize,
    keys: &[usize],
) -> Result<Vec<Tensor3>> {
    let pairs = records
        .par_iter()
        .zip(keys.par_iter())
        .map(|(r, &k)| {
            let img = source.tensor(r)?;
            let mut rng = seed::rng(seed, &[&tag, &epoch, &k]);
            ssl_view_pair(&img, policy, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().flat_map(|p| [p.view_a, p.view_b]).collect())
}

fn embed(backbone: &FeatureExtractor, head: &ProjectionHead, views: &[Tensor3]) -> Result<(Vec<Vec<f32>>, Vec<Vec<f64>>)> {
    let pooled = views.par_iter().map(|v| backbone.pooled(v)).collect::<Result<Vec<_>>>()?;
    let z = head
        .project(&pooled)?
        .into_iter()
        .map(|row| row.into_iter().map(f64::from).collect())
        .collect();
    Ok((pooled, z))
}

/// Loss and gradients of one contrastive batch.
pub fn ssl_step(
    backbone: &FeatureExtractor,
    head: &ProjectionHead,
    views: &[Tensor3],
    temperature: f64,
) -> Result<(f64, Grads, Grads)> {
    let (pooled, z) = embed(backbone, head, views)?;
    let batch = ContrastiveBatch::new(z, temperature)?;
    let (loss, dz) = losses::info_nce_with_grad(&batch)?;
    let idx: Vec<usize> = (0..views.len()).collect();
    let parts: Vec<(Grads, Grads)> = idx
        .par_chunks(chunk_len(views.len()))
        .map(|chunk| {
            let mut gb = backbone.params().zeros_like();
            let mut gh = head.params().zeros_like();
            for &i in chunk {
                let dzi: Vec<f32> = dz[i].iter().map(|&g| g as f32).collect();
                let d_pooled = head.backward_one(&pooled[i], &dzi, &mut gh);
                let (map, caches) = backbone.forward_cached(&views[i])?;
                backbone.backward_pooled(&caches, map.shape(), &d_pooled, &mut gb);
            }
            Ok((gb, gh))
        })
        .collect::<Result<Vec<_>>>()?;
    let (gb, gh): (Vec<Grads>, Vec<Grads>) = parts.into_iter().unzip();
    Ok((loss, sum_ordered(gb), sum_ordered(gh)))
}

/// Mean contrastive loss over fixed views of `records`.
fn ssl_eval(
    backbone: &FeatureExtractor,
    head: &ProjectionHead,
    records: &[&ImageRecord],
    source: &dyn ImageSource,
    policy: &AugmentationPolicy,
    config: &TrainConfig,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut weight = 0usize;
    for (b, chunk) in records.chunks(config.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let keys: Vec<usize> = (0..chunk.len()).map(|i| b * config.batch_size + i).collect();
        let views = make_views(chunk, source, policy, config.seed, "ssl-val-views", 0, &keys)?;
        let (_, z) = embed(backbone, head, &views)?;
        let loss = losses::info_nce(&ContrastiveBatch::new(z, config.temperature)?)?;
        total += loss * chunk.len() as f64;
        weight += chunk.len();
    }
    Ok((weight > 0).then(|| total / weight as f64))
}

/// Training and validation slices of the pool. Pools too small to hold out two
/// images train on everything and select on training loss.
fn ssl_split(config: &TrainConfig, pool: &DatasetManifest) -> Result<(DatasetManifest, DatasetManifest)> {
    let n_val = (config.val_fraction * pool.len() as f64).round() as usize;
    if n_val >= 2 && pool.len() - n_val >= 2 {
        split_train_val(pool, 1.0 - config.val_fraction, config.seed)
    } else {
        Ok((pool.clone(), pool.with_records(pool.split, Vec::new())))
    }
}

/// Re-evaluates a pre-training checkpoint (backbone and projection groups)
/// on the validation slice [`pretrain_ssl`] holds out of `pool`.
pub fn ssl_validation_loss(
    config: &TrainConfig,
    pool: &DatasetManifest,
    source: &dyn ImageSource,
    ckpt: &Checkpoint,
    policy: &AugmentationPolicy,
) -> Result<Option<f64>> {
    let backbone = ckpt.backbone(ckpt.architecture()?)?;
    let head = ProjectionHead::from_params(ckpt.group("projection")?)?;
    let (_, val_set) = ssl_split(config, pool)?;
    let refs: Vec<&ImageRecord> = val_set.records.iter().collect();
    ssl_eval(&backbone, &head, &refs, source, policy, config)
}

/// Contrastive pre-training of `backbone` and `head` on an unlabeled pool.
/// Returns the checkpoint of the selected epoch (backbone and projection
/// groups) and the per-epoch record.
pub fn pretrain_ssl(
    config: &TrainConfig,
    pool: &DatasetManifest,
    source: &dyn ImageSource,
    backbone: FeatureExtractor,
    head: ProjectionHead,
    policy: &AugmentationPolicy,
) -> Result<(Checkpoint, TrainRecord)> {
    pretrain_ssl_with_progress(config, pool, source, backbone, head, policy, &mut |_| {})
}

pub fn pretrain_ssl_with_progress(
    config: &TrainConfig,
    pool: &DatasetManifest,
    source: &dyn ImageSource,
    mut backbone: FeatureExtractor,
    mut head: ProjectionHead,
    policy: &AugmentationPolicy,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainRecord)> {
    config.validate()?;
    policy.validate()?;
    if config.phase != Phase::Ssl {
        return Err(Error::Contract("pretrain_ssl needs an ssl-phase config".into()));
    }
    if pool.is_empty() {
        return Err(Error::Contract("pre-training pool is empty".into()));
    }
    if head.in_dim() != backbone.out_channels() {
        return Err(Error::Contract(format!(
            "projection head takes {} features, backbone produces {}",
            head.in_dim(),
            backbone.out_channels()
        )));
    }
    let (train_set, val_set) = ssl_split(config, pool)?;
    if train_set.len() < 2 {
        return Err(Error::Contract("pre-training needs at least 2 training images".into()));
    }
    let train_refs: Vec<&ImageRecord> = train_set.records.iter().collect();
    let val_refs: Vec<&ImageRecord> = val_set.records.iter().collect();

    let mut opt_b = Adam::new(config.adam(), backbone.params());
    let mut opt_h = Adam::new(config.adam(), head.params());
    let mut selector = Selector::new(false);
    let mut best = (backbone.params().clone(), head.params().clone());
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 0..config.max_epochs {
        let t0 = Instant::now();
        let order = shuffled(train_refs.len(), config.seed, epoch);
        let mut total = 0.0;
        let mut seen = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let recs: Vec<&ImageRecord> = batch.iter().map(|&i| train_refs[i]).collect();
            let views = make_views(&recs, source, policy, config.seed, "ssl-views", epoch, batch)?;
            let (loss, gb, gh) = ssl_step(&backbone, &head, &views, config.temperature)?;
            check_loss(loss, epoch, step)?;
            if !gb.is_finite() || !gh.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss: f64::NAN });
            }
            opt_b.step(backbone.params_mut()?, &gb);
            opt_h.step(head.params_mut(), &gh);
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = total / seen.max(1) as f64;
        check_loss(train_loss, epoch, usize::MAX)?;
        let val_loss = ssl_eval(&backbone, &head, &val_refs, source, policy, config)?;
        if let Some(v) = val_loss {
            check_loss(v, epoch, usize::MAX)?;
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_mean_iou: None,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&rec);
        epochs.push(rec);
        if selector.offer(epoch, val_loss.unwrap_or(train_loss)) {
            best = (backbone.params().clone(), head.params().clone());
        }
        if config.patience.is_some_and(|p| selector.since_best >= p) {
            stopped_early = true;
            break;
        }
    }

    let backbone = FeatureExtractor::from_params(backbone.arch(), &best.0)?;
    head.set_params(&best.1)?;
    let mut ck = Checkpoint::from_backbone(&backbone, Provenance::SslPretrained, &config.digest());
    ck.groups.push(("projection".into(), head.params().clone()));
    ck.meta.notes.insert("seed".into(), config.seed.to_string());
    ck.meta.notes.insert("best_epoch".into(), selector.best_epoch.to_string());
    let record = TrainRecord {
        phase: Phase::Ssl,
        epochs,
        best_epoch: selector.best_epoch,
        total_seconds: start.elapsed().as_secs_f64(),
        stopped_early,
        checkpoint: None,
    };
    Ok((ck, record))
}

/// Labeled sample resolved against a manifest's class list.
struct Sample<'a> {
    record: &'a ImageRecord,
    label: usize,
    bbox: BoundingBox,
}

fn labeled_samples<'a>(set: &'a DatasetManifest, class_names: &[String]) -> Result<Vec<Sample<'a>>> {
    if set.class_names != class_names {
        return Err(Error::Contract(format!(
            "manifest classes {:?} differ from detector classes {:?}",
            set.class_names, class_names
        )));
    }
    set.records
        .iter()
        .map(|r| {
            let bbox = r.bbox.ok_or_else(|| {
                Error::Contract(format!("record `{}` has no bounding box", r.image_ref))
            })?;
            Ok(Sample {
                record: r,
                label: set.label_of(r)?,
                bbox,
            })
        })
        .collect()
}

fn pooled_features(backbone: &FeatureExtractor, samples: &[Sample<'_>], source: &dyn ImageSource) -> Result<Vec<Vec<f32>>> {
    samples
        .par_iter()
        .map(|s| backbone.pooled(&source.tensor(s.record)?))
        .collect()
}

/// Mean combined loss and mean IoU of `heads` on precomputed features.
fn head_eval(heads: &DetectionHeads, feats: &[Vec<f32>], samples: &[Sample<'_>], alpha: f64) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut iou = 0.0;
    for (f, s) in feats.iter().zip(samples) {
        let (logits, b) = heads.detect_one(f)?;
        loss += losses::detection_loss(&logits, b, s.label, &s.bbox, alpha)?.total;
        iou += metrics::iou(b, &s.bbox);
    }
    let n = samples.len().max(1) as f64;
    Ok((loss / n, iou / n))
}

/// Trains `heads` on top of the frozen backbone stored in `ckpt`.
pub fn train_detector(
    config: &TrainConfig,
    ckpt: &Checkpoint,
    train_set: &DatasetManifest,
    val_set: &DatasetManifest,
    source: &dyn ImageSource,
    heads: DetectionHeads,
    policy: &AugmentationPolicy,
) -> Result<(Detector, TrainRecord)> {
    train_detector_with_progress(config, ckpt, train_set, val_set, source, heads, policy, &mut |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn train_detector_with_progress(
    config: &TrainConfig,
    ckpt: &Checkpoint,
    train_set: &DatasetManifest,
    val_set: &DatasetManifest,
    source: &dyn ImageSource,
    mut heads: DetectionHeads,
    policy: &AugmentationPolicy,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(Detector, TrainRecord)> {
    config.validate()?;
    policy.validate_detector()?;
    if config.phase != Phase::Detector {
        return Err(Error::Contract("train_detector needs a detector-phase config".into()));
    }
    if ckpt.meta.kind != CheckpointKind::Backbone {
        return Err(Error::Contract("train_detector needs a backbone checkpoint".into()));
    }
    let mut backbone = ckpt.backbone(ckpt.architecture()?)?;
    backbone.freeze();
    let frozen_digest = backbone.digest();

    let class_names = train_set.class_names.clone();
    if heads.num_classes() != class_names.len() {
        return Err(Error::Contract(format!(
            "heads have {} classes, training manifest has {}",
            heads.num_classes(),
            class_names.len()
        )));
    }
    if heads.in_dim() != backbone.out_channels() {
        return Err(Error::Contract(format!(
            "heads take {} features, backbone produces {}",
            heads.in_dim(),
            backbone.out_channels()
        )));
    }
    let train = labeled_samples(train_set, &class_names)?;
    let val = labeled_samples(val_set, &class_names)?;
    if train.is_empty() {
        return Err(Error::Contract("detector training set is empty".into()));
    }
    if !backbone.is_frozen() {
        return Err(Error::Invariant("backbone reached the optimiser unfrozen".into()));
    }

    let val_feats = pooled_features(&backbone, &val, source)?;
    let fixed_train_feats = if policy.transforms.is_empty() {
        Some(pooled_features(&backbone, &train, source)?)
    } else {
        None
    };

    if config.standardize_features {
        match &fixed_train_feats {
            Some(f) => heads.fit_standardization(f)?,
            None => heads.fit_standardization(&pooled_features(&backbone, &train, source)?)?,
        }
    }

    let mut opt = Adam::new(config.adam(), heads.params());
    let maximise = config.selection == Selection::ValMeanIou && !val.is_empty();
    let mut selector = Selector::new(maximise);
    let mut best = heads.params().clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 0..config.max_epochs {
        let t0 = Instant::now();
        let order = shuffled(train.len(), config.seed, epoch);
        let feats: Vec<Vec<f32>> = match &fixed_train_feats {
            Some(f) => f.clone(),
            None => train
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let img = source.tensor(s.record)?;
                    let mut rng = seed::rng(config.seed, &[&"detector-aug", &epoch, &i]);
                    backbone.pooled(&detector_augment(&img, policy, &mut rng)?)
                })
                .collect::<Result<_>>()?,
        };
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = heads.params().zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (logits, b) = heads.detect_one(&feats[i])?;
                let l = losses::detection_loss(&logits, b, train[i].label, &train[i].bbox, config.alpha)?;
                batch_loss += l.total;
                heads.backward_one(&feats[i], &l.d_logits, &l.d_box, &mut grads);
            }
            check_loss(batch_loss, epoch, step)?;
            grads.scale(1.0 / batch.len() as f32);
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss: f64::NAN });
            }
            opt.step(heads.params_mut(), &grads);
            total += batch_loss;
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_iou) = if val.is_empty() {
            (None, None)
        } else {
            let (l, i) = head_eval(&heads, &val_feats, &val, config.alpha)?;
            check_loss(l, epoch, usize::MAX)?;
            (Some(l), Some(i))
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_mean_iou: val_iou,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&rec);
        epochs.push(rec);
        let score = if maximise { val_iou } else { val_loss }.unwrap_or(train_loss);
        if selector.offer(epoch, score) {
            best = heads.params().clone();
        }
        if config.patience.is_some_and(|p| selector.since_best >= p) {
            stopped_early = true;
            break;
        }
    }

    if backbone.digest() != frozen_digest {
        return Err(Error::Invariant("frozen backbone parameters changed during detector training".into()));
    }
    heads.set_params(&best)?;
    let detector = Detector::new(backbone, heads, class_names)?;
    let record = TrainRecord {
        phase: Phase::Detector,
        epochs,
        best_epoch: selector.best_epoch,
        total_seconds: start.elapsed().as_secs_f64(),
        stopped_early,
        checkpoint: None,
    };
    Ok((detector, record))
}

/// Mean combined loss of `detector` over a labeled manifest, without augmentation.
pub fn detector_loss(detector: &Detector, set: &DatasetManifest, source: &dyn ImageSource, alpha: f64) -> Result<f64> {
    losses::check_alpha(alpha)?;
    let samples = labeled_samples(set, &detector.class_names)?;
    if samples.is_empty() {
        return Err(Error::Contract("loss over an empty manifest".into()));
    }
    let feats = pooled_features(&detector.backbone, &samples, source)?;
    head_eval(&detector.heads, &feats, &samples, alpha).map(|(l, _)| l)
}

/// One prediction per record of a labeled manifest.
pub fn predict(detector: &Detector, set: &DatasetManifest, source: &dyn ImageSource) -> Result<Vec<PredictionRecord>> {
    let samples = labeled_samples(set, &detector.class_names)?;
    let feats = pooled_features(&detector.backbone, &samples, source)?;
    feats
        .iter()
        .zip(&samples)
        .map(|(f, s)| {
            let (logits, pred_box) = detector.heads.detect_one(f)?;
            Ok(PredictionRecord {
                record_id: s.record.image_ref.clone(),
                logits,
                pred_box,
                target: s.label,
                target_box: s.bbox,
            })
        })
        .collect()
}
