//! Grad-CAM heatmaps over the final backbone feature map.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Normalization};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::{resize_bilinear, Tensor3};

/// Which class score is explained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetScore {
    /// The given class, normally the ground truth.
    Class(usize),
    /// The highest-scoring class.
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub side: usize,
    /// Row-major `side × side` grid in `[0, 1]`.
    pub values: Vec<f32>,
    pub target: usize,
    pub record_id: String,
}

impl Heatmap {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.side + x]
    }

    /// Share of the total heatmap mass inside `bbox`, and the share of the
    /// image area the box covers (pixel-centre membership).
    pub fn box_mass_fraction(&self, bbox: &BoundingBox) -> (f64, f64) {
        let s = self.side as f64;
        let mut inside = 0.0;
        let mut total = 0.0;
        let mut inside_px = 0usize;
        for y in 0..self.side {
            let cy = (y as f64 + 0.5) / s;
            for x in 0..self.side {
                let cx = (x as f64 + 0.5) / s;
                let v = self.at(x, y) as f64;
                total += v;
                if cx >= bbox.x_min && cx <= bbox.x_max && cy >= bbox.y_min && cy <= bbox.y_max {
                    inside += v;
                    inside_px += 1;
                }
            }
        }
        let area = inside_px as f64 / (self.side * self.side) as f64;
        let mass = if total > 0.0 { inside / total } else { 0.0 };
        (mass, area)
    }
}

/// Class activation map before upsampling: `ReLU(sum_c w_c * A_c)` where
/// `w_c` is the spatial mean of the score gradient on channel `c`.
pub fn raw_cam(map: &Tensor3, grad: &Tensor3) -> Result<Tensor3> {
    if map.shape() != grad.shape() {
        return Err(Error::Contract(format!(
            "feature map {:?} and gradient {:?} differ in shape",
            map.shape(),
            grad.shape()
        )));
    }
    let weights = grad.spatial_mean();
    let mut cam = Tensor3::zeros(1, map.height, map.width);
    let out = cam.plane_mut(0);
    for (c, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(map.plane(c)) {
            *o += w * a;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(cam)
}

/// Bilinear upsampling to `side × side` and min-max normalisation; constant
/// maps become all-zero.
pub fn normalize_cam(cam: &Tensor3, side: usize) -> Vec<f32> {
    if cam.data.iter().all(|&v| v == cam.data[0]) {
        return vec![0.0; side * side];
    }
    let up = resize_bilinear(cam, (0.0, 0.0, cam.width as f32, cam.height as f32), side, side);
    let (lo, hi) = up
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; side * side];
    }
    up.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Heatmap of the chosen class score over the image, at the image's side.
pub fn gradcam(detector: &Detector, image: &Tensor3, target: TargetScore, record_id: &str) -> Result<Heatmap> {
    if image.height != image.width {
        return Err(Error::Contract(format!("Grad-CAM expects a square image, got {:?}", image.shape())));
    }
    let (map, pooled) = detector.backbone.forward(image)?;
    let (logits, _) = detector.heads.detect_one(&pooled)?;
    let k = logits.len();
    let target = match target {
        TargetScore::Class(t) if t < k => t,
        TargetScore::Class(t) => {
            return Err(Error::Contract(format!("target class {t} out of range for {k} classes")))
        }
        TargetScore::Argmax => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
    };
    // the score is affine in the pooled vector, whose gradient spreads
    // uniformly over each channel of the map
    let mut one_hot = vec![0.0; k];
    one_hot[target] = 1.0;
    let mut scratch = detector.heads.params().zeros_like();
    let d_pooled = detector.heads.backward_one(&pooled, &one_hot, &[0.0; 4], &mut scratch);
    let n = (map.height * map.width) as f32;
    let mut grad = Tensor3::zeros(map.channels, map.height, map.width);
    for (c, &g) in d_pooled.iter().enumerate() {
        grad.plane_mut(c).iter_mut().for_each(|v| *v = g / n);
    }
    let cam = raw_cam(&map, &grad)?;
    Ok(Heatmap {
        side: image.height,
        values: normalize_cam(&cam, image.height),
        target,
        record_id: record_id.to_string(),
    })
}

/// Matplotlib "viridis" sampled at nine evenly spaced points.
const VIRIDIS: [[f32; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(v: f32) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Normalised tensor back to 8-bit RGB.
pub fn tensor_to_rgb(image: &Tensor3, norm: Normalization) -> Result<RgbImage> {
    if image.channels != 3 {
        return Err(Error::Contract(format!("expected 3 channels, got {}", image.channels)));
    }
    let (h, w) = (image.height, image.width);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (norm.invert(image.at(c, y, x)) * 255.0).round().clamp(0.0, 255.0) as u8);
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

pub fn heatmap_to_rgb(heatmap: &Heatmap) -> RgbImage {
    let s = heatmap.side as u32;
    RgbImage::from_fn(s, s, |x, y| Rgb(viridis(heatmap.at(x as usize, y as usize))))
}

/// Colour-mapped heatmap alpha-blended over the de-normalised image.
pub fn overlay(image: &Tensor3, norm: Normalization, heatmap: &Heatmap, opacity: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::Domain(format!("opacity {opacity} outside [0, 1]")));
    }
    if image.height != heatmap.side || image.width != heatmap.side {
        return Err(Error::Contract(format!(
            "image {}x{} does not match heatmap side {}",
            image.height, image.width, heatmap.side
        )));
    }
    let base = tensor_to_rgb(image, norm)?;
    let colors = heatmap_to_rgb(heatmap);
    Ok(RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let a = base.get_pixel(x, y).0;
        let b = colors.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|c| (a[c] as f32 * (1.0 - opacity) + b[c] as f32 * opacity).round() as u8))
    }))
}

#[derive(Serialize, Deserialize)]
struct GridSidecar {
    shape: [usize; 2],
    dtype: String,
    record_id: String,
    target: usize,
}

/// Writes `<stem>.png` (colour-mapped), `<stem>.f32` (little-endian raw
/// grid) and `<stem>.json` (shape, dtype, record id, target) into `dir`.
pub fn write_heatmap(heatmap: &Heatmap, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(format!("{stem}.png"));
    heatmap_to_rgb(heatmap).save(&png).map_err(|e| Error::Ingestion {
        locator: png.display().to_string(),
        reason: e.to_string(),
    })?;
    let raw = dir.join(format!("{stem}.f32"));
    let bytes: Vec<u8> = heatmap.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let side = dir.join(format!("{stem}.json"));
    let meta = GridSidecar {
        shape: [heatmap.side, heatmap.side],
        dtype: "<f4".into(),
        record_id: heatmap.record_id.clone(),
        target: heatmap.target,
    };
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

/// Reads back a grid written by [`write_heatmap`].
pub fn read_heatmap(dir: &Path, stem: &str) -> Result<Heatmap> {
    let side_path = dir.join(format!("{stem}.json"));
    let meta: GridSidecar =
        serde_json::from_slice(&fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?)?;
    let raw = dir.join(format!("{stem}.f32"));
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != meta.shape[0] * meta.shape[1] * 4 || meta.shape[0] != meta.shape[1] {
        return Err(Error::Contract(format!("{} does not match its sidecar shape", raw.display())));
    }
    Ok(Heatmap {
        side: meta.shape[0],
        values: bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
        target: meta.target,
        record_id: meta.record_id,
    })
}
