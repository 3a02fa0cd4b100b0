//! Independent oracles and the criterion-level checks built on them. Shared by
//! the core integration tests and the workspace acceptance gate.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssdet::augment::AugmentationPolicy;
use ssdet::data::{
    build_subset, generate_synthetic_dataset, split_train_val, BoundingBox, CachedImages, DatasetManifest, ImageRecord,
    Normalization, Source, Split, SubsetSpec, SyntheticImages, FULL_N_VALUES, TINY_CLASSES, TINY_N_VALUES, VOC_CLASSES,
};
use ssdet::losses::{self, ContrastiveBatch};
use ssdet::metrics::{self, PredictionRecord};
use ssdet::model::{self, Architecture, Checkpoint, DetectionHeads, FeatureExtractor, Provenance};
use ssdet::train::{self, TrainConfig};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

/// Textbook NT-Xent: explicit normalisation, explicit sums, no shared
/// intermediate with the library.
pub fn info_nce_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let pos = if i % 2 == 0 { i + 1 } else { i - 1 };
        let logits: Vec<f64> = (0..n).filter(|&k| k != i).map(|k| sim(i, k)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - sim(i, pos);
    }
    total / n as f64
}

pub fn cce_oracle(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    -((logits[target] - m).exp() / denom).ln()
}

pub const RASTER: usize = 400;
/// Boxes of at least 40 px keep the raster's half-pixel edge error well under
/// the comparison tolerance.
pub const RASTER_MIN_SIDE: f64 = 0.25;

/// Pixel mask of an ordered box: pixel `(x, y)` is inside when its centre is.
fn raster(b: [f64; 4]) -> Vec<bool> {
    let mut m = vec![false; RASTER * RASTER];
    for y in 0..RASTER {
        let cy = (y as f64 + 0.5) / RASTER as f64;
        if cy < b[1] || cy > b[3] {
            continue;
        }
        for x in 0..RASTER {
            let cx = (x as f64 + 0.5) / RASTER as f64;
            if cx >= b[0] && cx <= b[2] {
                m[y * RASTER + x] = true;
            }
        }
    }
    m
}

struct RasterStats {
    count: usize,
    sx: f64,
    sy: f64,
    lo: [usize; 2],
    hi: [usize; 2],
}

fn stats(mask: &[bool]) -> RasterStats {
    let mut s = RasterStats {
        count: 0,
        sx: 0.0,
        sy: 0.0,
        lo: [usize::MAX; 2],
        hi: [0; 2],
    };
    for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v) {
        let (x, y) = (i % RASTER, i / RASTER);
        s.count += 1;
        s.sx += x as f64 + 0.5;
        s.sy += y as f64 + 0.5;
        s.lo = [s.lo[0].min(x), s.lo[1].min(y)];
        s.hi = [s.hi[0].max(x + 1), s.hi[1].max(y + 1)];
    }
    s
}

/// IoU by counting pixels of the two rasterised boxes.
pub fn raster_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ma, mb) = (raster(a), raster(b));
    let inter = ma.iter().zip(&mb).filter(|(p, q)| **p && **q).count();
    let union = ma.iter().zip(&mb).filter(|(p, q)| **p || **q).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// DIoU from the rasters: pixel IoU, pixel centroids, and the pixel extent of
/// the union as the enclosing box.
pub fn raster_diou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ma, mb) = (raster(a), raster(b));
    let (sa, sb) = (stats(&ma), stats(&mb));
    let inter = ma.iter().zip(&mb).filter(|(p, q)| **p && **q).count();
    let union = sa.count + sb.count - inter;
    let r = RASTER as f64;
    let (cax, cay) = (sa.sx / sa.count as f64 / r, sa.sy / sa.count as f64 / r);
    let (cbx, cby) = (sb.sx / sb.count as f64 / r, sb.sy / sb.count as f64 / r);
    let w = (sa.hi[0].max(sb.hi[0]) - sa.lo[0].min(sb.lo[0])) as f64 / r;
    let h = (sa.hi[1].max(sb.hi[1]) - sa.lo[1].min(sb.lo[1])) as f64 / r;
    let rho2 = (cax - cbx).powi(2) + (cay - cby).powi(2);
    1.0 - inter as f64 / union as f64 + rho2 / (w * w + h * h)
}

/// An ordered box with sides of at least `min_side`.
pub fn random_box<R: Rng>(rng: &mut R, min_side: f64) -> [f64; 4] {
    let mut axis = || {
        let a = rng.gen_range(0.0..1.0 - min_side);
        let b = rng.gen_range(a + min_side..=1.0);
        (a, b)
    };
    let (x0, x1) = axis();
    let (y0, y1) = axis();
    [x0, y0, x1, y1]
}

/// A random box with corners on raster pixel boundaries, so pixel counting
/// measures it without edge error.
pub fn grid_box<R: Rng>(rng: &mut R) -> [f64; 4] {
    let mut axis = || {
        let a = rng.gen_range(0..RASTER - 4);
        let b = rng.gen_range(a + 4..=RASTER);
        (a as f64 / RASTER as f64, b as f64 / RASTER as f64)
    };
    let (x0, x1) = axis();
    let (y0, y1) = axis();
    [x0, y0, x1, y1]
}

fn bbox(a: [f64; 4]) -> BoundingBox {
    BoundingBox::from_array(a).expect("valid box")
}

// ---------------------------------------------------------------- criteria

pub fn loss_oracles() -> Check {
    let mut r = rng(11);
    let mut worst_nce = 0.0f64;
    for t in 0..50 {
        let pairs = r.gen_range(2..=8);
        let d = r.gen_range(1..=8);
        let tau = [0.1, 0.5, 1.0][t % 3];
        let z: Vec<Vec<f64>> = (0..2 * pairs)
            .map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let got = losses::info_nce(&ContrastiveBatch::new(z.clone(), tau).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst_nce = worst_nce.max((got - info_nce_oracle(&z, tau)).abs());
    }
    ensure(worst_nce <= 1e-6, || format!("info_nce deviates by {worst_nce:e}"))?;

    let mut worst_cce = 0.0f64;
    for _ in 0..50 {
        let k = r.gen_range(2..=20);
        let logits: Vec<f64> = (0..k).map(|_| r.gen_range(-10.0..10.0)).collect();
        let target = r.gen_range(0..k);
        let got = losses::cce(&logits, target).map_err(|e| e.to_string())?;
        worst_cce = worst_cce.max((got - cce_oracle(&logits, target)).abs());
    }
    ensure(worst_cce <= 1e-9, || format!("cce deviates by {worst_cce:e}"))?;

    let (mut worst_iou, mut worst_diou) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let a = grid_box(&mut r);
        let b = grid_box(&mut r);
        worst_iou = worst_iou.max((metrics::iou(a, &bbox(b)) - raster_iou(a, b)).abs());
        worst_diou = worst_diou.max((losses::diou(a, &bbox(b)) - raster_diou(a, b)).abs());
    }
    ensure(worst_iou < 0.01, || format!("iou vs raster deviates by {worst_iou}"))?;
    ensure(worst_diou < 0.01, || format!("diou vs raster deviates by {worst_diou}"))?;

    let hand_diou = losses::diou([0.0, 0.0, 0.5, 0.5], &bbox([0.25, 0.25, 0.75, 0.75]));
    let hand_iou = metrics::iou([0.0, 0.0, 0.5, 0.5], &bbox([0.25, 0.25, 0.75, 0.75]));
    ensure((hand_diou - 61.0 / 63.0).abs() <= 1e-9, || format!("diou hand case {hand_diou} != 61/63"))?;
    ensure((hand_iou - 1.0 / 7.0).abs() <= 1e-9, || format!("iou hand case {hand_iou} != 1/7"))?;

    Ok(format!(
        "info_nce {worst_nce:.1e}, cce {worst_cce:.1e}, raster iou {worst_iou:.1e} diou {worst_diou:.1e}, hand cases exact"
    ))
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Largest relative error between an analytic gradient and central
/// differences of `f` at `x`.
pub fn fd_relative_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// A predicted box whose coordinates keep `margin` away from each other and
/// from every ground-truth coordinate on the same axis, so no DIoU kink lies
/// within a finite-difference step. Roughly one in five is mis-ordered.
pub fn smooth_pred<R: Rng>(rng: &mut R, gt: [f64; 4], margin: f64) -> [f64; 4] {
    loop {
        let mut p = random_box(rng, 0.05);
        if rng.gen_bool(0.2) {
            p.swap(0, 2);
        }
        let far = |v: f64, others: &[f64]| others.iter().all(|o| (v - o).abs() >= margin);
        let ok = far(p[0], &[p[2], gt[0], gt[2]])
            && far(p[2], &[gt[0], gt[2]])
            && far(p[1], &[p[3], gt[1], gt[3]])
            && far(p[3], &[gt[1], gt[3]]);
        if ok {
            return p;
        }
    }
}

pub fn gradient_checks() -> Check {
    let mut r = rng(23);
    let configs = 25;
    let mut worst = [0.0f64; 4];

    for t in 0..configs {
        let pairs = r.gen_range(2..=6);
        let d = r.gen_range(2..=8);
        let tau = [0.1, 0.5, 1.0][t % 3];
        let flat: Vec<f64> = (0..2 * pairs * d).map(|_| r.gen_range(-1.5..1.5)).collect();
        let rows = |v: &[f64]| v.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
        let (_, g) = losses::info_nce_with_grad(&ContrastiveBatch::new(rows(&flat), tau).unwrap()).unwrap();
        let f = |v: &[f64]| losses::info_nce(&ContrastiveBatch::new(rows(v), tau).unwrap()).unwrap();
        worst[0] = worst[0].max(fd_relative_error(&f, &flat, &g.concat()));
    }

    for _ in 0..configs {
        let k = r.gen_range(2..=12);
        let target = r.gen_range(0..k);
        let x: Vec<f64> = (0..k).map(|_| r.gen_range(-5.0..5.0)).collect();
        let (_, g) = losses::cce_with_grad(&x, target).unwrap();
        let f = |v: &[f64]| losses::cce(v, target).unwrap();
        worst[1] = worst[1].max(fd_relative_error(&f, &x, &g));
    }

    for _ in 0..configs {
        let gt = random_box(&mut r, 0.05);
        let p = smooth_pred(&mut r, gt, 1e-3);
        let (_, g) = losses::diou_with_grad(p, &bbox(gt));
        let f = |v: &[f64]| losses::diou([v[0], v[1], v[2], v[3]], &bbox(gt));
        worst[2] = worst[2].max(fd_relative_error(&f, &p, &g));
    }

    for _ in 0..configs {
        let k = r.gen_range(2..=8);
        let target = r.gen_range(0..k);
        let alpha = r.gen_range(0.0..=1.0);
        let gt = random_box(&mut r, 0.05);
        let p = smooth_pred(&mut r, gt, 1e-3);
        let mut x: Vec<f64> = (0..k).map(|_| r.gen_range(-4.0..4.0)).collect();
        x.extend_from_slice(&p);
        let loss = losses::detection_loss(&x[..k], p, target, &bbox(gt), alpha).unwrap();
        let mut g = loss.d_logits.clone();
        g.extend_from_slice(&loss.d_box);
        let f = |v: &[f64]| {
            let c = losses::cce(&v[..k], target).unwrap();
            let d = losses::diou([v[k], v[k + 1], v[k + 2], v[k + 3]], &bbox(gt));
            losses::combined_loss(c, d, alpha).unwrap()
        };
        worst[3] = worst[3].max(fd_relative_error(&f, &x, &g));
    }

    let names = ["info_nce", "cce", "diou", "combined"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w < FD_TOL, || format!("{name}: relative error {w:e} over {configs} configurations"))?;
    }
    Ok(format!(
        "{configs} configs each, max rel err info_nce {:.1e} cce {:.1e} diou {:.1e} combined {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

pub fn prediction<R: Rng>(rng: &mut R, k: usize, id: usize) -> PredictionRecord {
    PredictionRecord {
        record_id: format!("r{id}"),
        logits: (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        pred_box: random_box(rng, 0.01),
        target: rng.gen_range(0..k),
        target_box: bbox(random_box(rng, 0.01)),
    }
}

/// A small synthetic labelled set plus its cached tensors.
pub fn tiny_synthetic(n: usize, side: u32, seed: u64) -> (DatasetManifest, CachedImages) {
    let ds = generate_synthetic_dataset(n, &["blue-square", "red-disc"], side, seed).unwrap();
    let source = SyntheticImages::new(&[&ds], side, Normalization::default());
    let cache = CachedImages::new(&source, &ds.manifest.records).unwrap();
    (ds.manifest.clone(), cache)
}

pub fn short_detector_config(epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::detector_default();
    c.max_epochs = epochs;
    c.batch_size = 4;
    c.seed = seed;
    c
}

pub fn invariance_suite() -> Check {
    let mut r = rng(37);

    for _ in 0..20 {
        let pairs = r.gen_range(2..=6);
        let d = r.gen_range(2..=8);
        let z: Vec<Vec<f64>> = (0..2 * pairs)
            .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let base = losses::info_nce(&ContrastiveBatch::new(z.clone(), 0.5).unwrap()).unwrap();
        let scaled: Vec<Vec<f64>> = z
            .iter()
            .map(|row| {
                let s = r.gen_range(0.1..10.0);
                row.iter().map(|x| x * s).collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..pairs).collect();
        order.shuffle(&mut r);
        let permuted: Vec<Vec<f64>> = order.iter().flat_map(|&m| [z[2 * m].clone(), z[2 * m + 1].clone()]).collect();
        for (what, v) in [("scale", scaled), ("permutation", permuted)] {
            let l = losses::info_nce(&ContrastiveBatch::new(v, 0.5).unwrap()).unwrap();
            ensure((l - base).abs() < 1e-9, || format!("info_nce not {what}-invariant: {base} vs {l}"))?;
        }
    }

    for _ in 0..20 {
        let k = r.gen_range(2..=8);
        let preds: Vec<PredictionRecord> = (0..30).map(|i| prediction(&mut r, k, i)).collect();
        let accs: Vec<f64> = (1..10).map(|i| metrics::loc_accuracy(&preds, i as f64 / 10.0).unwrap()).collect();
        ensure(accs.windows(2).all(|w| w[1] <= w[0]), || format!("loc_accuracy not monotone: {accs:?}"))?;
        let tops: Vec<f64> = (1..=k).map(|n| metrics::topn_accuracy(&preds, n).unwrap()).collect();
        ensure(tops.windows(2).all(|w| w[1] >= w[0]), || format!("topn not monotone: {tops:?}"))?;
        ensure(tops[k - 1] == 1.0, || "top-K accuracy is not 1".into())?;
    }

    let (set, cache) = tiny_synthetic(8, 32, 5);
    let backbone = FeatureExtractor::new(Architecture::TinyCnn, 5);
    let before = backbone.digest();
    let ckpt = Checkpoint::from_backbone(&backbone, Provenance::Random, "invariance");
    let heads = DetectionHeads::new(backbone.out_channels(), 2, 5);
    let (det, rec) = train::train_detector(
        &short_detector_config(10, 5),
        &ckpt,
        &set,
        &set,
        &cache,
        heads,
        &AugmentationPolicy::identity(),
    )
    .map_err(|e| e.to_string())?;
    ensure(rec.epochs.len() == 10, || format!("expected 10 epochs, got {}", rec.epochs.len()))?;
    ensure(det.backbone.digest() == before, || "backbone digest changed during detector training".into())?;
    ensure(det.backbone.is_frozen(), || "detector backbone is not frozen".into())?;

    let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.to_bytes().map_err(|e| e.to_string())? == bytes, || "checkpoint bytes differ after round trip".into())?;
    ensure(back == ckpt, || "checkpoint differs after round trip".into())?;
    let det_bytes = det
        .to_checkpoint(Provenance::Random, "invariance")
        .to_bytes()
        .map_err(|e| e.to_string())?;
    let reloaded = model::Detector::from_checkpoint(&Checkpoint::from_bytes(&det_bytes).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(
        reloaded.heads.params().digest() == det.heads.params().digest(),
        || "detector heads differ after round trip".into(),
    )?;

    Ok("info_nce scale/permutation, loc/topn monotone, digest fixed over 10 epochs, checkpoint bytes equal".into())
}

/// A labelled manifest with VOC-like per-class counts (single-object images
/// only, no pixels). The five most frequent classes have more than 600
/// images each.
pub fn voc_sized_manifest(seed: u64) -> DatasetManifest {
    let mut r = rng(seed);
    let mut records = Vec::new();
    for class in VOC_CLASSES {
        let count = if TINY_CLASSES.contains(&class) {
            r.gen_range(620..1400)
        } else {
            r.gen_range(280..600)
        };
        for i in 0..count {
            let b = random_box(&mut r, 0.05);
            records.push(ImageRecord {
                image_ref: format!("JPEGImages/{class}_{i:05}.jpg"),
                width: 500,
                height: 375,
                category: Some(class.to_string()),
                bbox: Some(bbox(b)),
                source: Source::Voc2012,
                object_count: 1,
            });
        }
    }
    records.shuffle(&mut r);
    DatasetManifest::new(VOC_CLASSES.iter().map(|c| c.to_string()).collect(), seed, Split::Train, records).unwrap()
}

pub const TRAIN_FRACTION: f64 = 0.8;

fn check_matrix(manifest: &DatasetManifest, classes: &[&str], ns: &[usize], seed: u64) -> Result<usize, String> {
    let mut cells = 0;
    for &n in ns {
        let spec = SubsetSpec::new(classes, n, seed);
        let subset = build_subset(manifest, &spec).map_err(|e| e.to_string())?;
        let again = build_subset(manifest, &spec).map_err(|e| e.to_string())?;
        ensure(
            subset.to_json_bytes().unwrap() == again.to_json_bytes().unwrap(),
            || format!("subset n={n} not deterministic"),
        )?;
        ensure(subset.class_names.len() == classes.len(), || format!("n={n}: wrong class list"))?;
        for (class, count) in subset.count_by_class() {
            ensure(count == n, || format!("n={n}: class {class} has {count}"))?;
        }
        let (tr, va) = split_train_val(&subset, TRAIN_FRACTION, seed).map_err(|e| e.to_string())?;
        let (tr2, va2) = split_train_val(&subset, TRAIN_FRACTION, seed).map_err(|e| e.to_string())?;
        ensure(tr == tr2 && va == va2, || format!("n={n}: split not deterministic"))?;
        let want = (TRAIN_FRACTION * n as f64).round() as usize;
        for ((class, t), (_, v)) in tr.count_by_class().into_iter().zip(va.count_by_class()) {
            ensure(t == want && t + v == n, || format!("n={n}: class {class} split {t}/{v}"))?;
        }
        ensure(tr.len() + va.len() == classes.len() * n, || format!("n={n}: split loses records"))?;
        cells += 1;
    }
    Ok(cells)
}

pub fn protocol_shapes() -> Check {
    let voc = voc_sized_manifest(2012);
    let seed = 17;
    let tiny = check_matrix(&voc, &TINY_CLASSES, &TINY_N_VALUES, seed)?;
    let full = check_matrix(&voc, &VOC_CLASSES, &FULL_N_VALUES, seed)?;
    Ok(format!(
        "{} records; TINY 5 x {tiny} n values, FULL 20 x {full} n values, deterministic",
        voc.len()
    ))
}
