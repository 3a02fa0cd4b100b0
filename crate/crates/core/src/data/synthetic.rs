//! Deterministic single-shape images on a textured grey background.
//!
//! Class labels are `<color>-<shape>` (e.g. `red-disc`). Backgrounds are
//! strictly grey (R = G = B) and shape colours are saturated, so a shape's
//! pixels can be recovered from the raster alone.

use std::path::Path;

use ::image::{Rgb, RgbImage};
use rand::Rng;

use super::{BoundingBox, DatasetManifest, ImageRecord, Normalization, Source, Split};
use crate::error::{Error, Result};
use crate::nn::Tensor3;
use crate::seed;

pub const SHAPE_KINDS: [&str; 5] = ["disc", "square", "triangle", "diamond", "cross"];

pub const SHAPE_COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("magenta", [210, 50, 200]),
    ("cyan", [40, 200, 210]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "disc" => Self::Disc,
            "square" => Self::Square,
            "triangle" => Self::Triangle,
            "diamond" => Self::Diamond,
            "cross" => Self::Cross,
            _ => return None,
        })
    }

    /// Whether the point `(dx, dy)` relative to the centre lies inside a shape
    /// of half-extent `(hw, hh)`.
    fn contains(self, dx: f64, dy: f64, hw: f64, hh: f64) -> bool {
        let (ax, ay) = (dx.abs() / hw, dy.abs() / hh);
        match self {
            Self::Disc => ax * ax + ay * ay <= 1.0,
            Self::Square => ax <= 1.0 && ay <= 1.0,
            Self::Diamond => ax + ay <= 1.0,
            Self::Cross => (ax <= 1.0 / 3.0 && ay <= 1.0) || (ay <= 1.0 / 3.0 && ax <= 1.0),
            Self::Triangle => {
                // apex at the top edge, base on the bottom edge
                let t = (dy / hh + 1.0) / 2.0;
                (0.0..=1.0).contains(&t) && ax <= t
            }
        }
    }
}

fn parse_class(name: &str) -> Result<(ShapeKind, [u8; 3])> {
    let unknown = || Error::Contract(format!("`{name}` is not a synthetic class (expected <color>-<shape>)"));
    let (color, kind) = name.split_once('-').ok_or_else(unknown)?;
    let kind = ShapeKind::parse(kind).ok_or_else(unknown)?;
    let rgb = SHAPE_COLORS
        .iter()
        .find(|(c, _)| *c == color)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(unknown)?;
    Ok((kind, rgb))
}

#[derive(Clone, Debug)]
struct ShapeInstance {
    kind: ShapeKind,
    color: [u8; 3],
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

/// Manifest plus everything needed to render each image on demand.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    shapes: Vec<ShapeInstance>,
    side: u32,
}

pub fn generate_synthetic_dataset(
    num_images: usize,
    classes: &[&str],
    image_side: u32,
    seed: u64,
) -> Result<SyntheticDataset> {
    if classes.is_empty() {
        return Err(Error::Contract("synthetic dataset needs at least one class".into()));
    }
    if image_side < 16 {
        return Err(Error::Contract(format!("image side {image_side} is too small")));
    }
    let parsed = classes.iter().map(|c| parse_class(c)).collect::<Result<Vec<_>>>()?;
    let side = image_side as f64;
    let mut shapes = Vec::with_capacity(num_images);
    let mut records = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let k = i % classes.len();
        let (kind, color) = parsed[k];
        let mut rng = seed::rng(seed, &[&"synthetic-shape", &i]);
        let w = side * rng.gen_range(0.25..0.6);
        let h = (w * rng.gen_range(0.75..1.33)).min(0.7 * side);
        let cx = rng.gen_range(w / 2.0..=side - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=side - h / 2.0);
        let bbox = BoundingBox::new(
            ((cx - w / 2.0) / side).clamp(0.0, 1.0),
            ((cy - h / 2.0) / side).clamp(0.0, 1.0),
            ((cx + w / 2.0) / side).clamp(0.0, 1.0),
            ((cy + h / 2.0) / side).clamp(0.0, 1.0),
        )?;
        shapes.push(ShapeInstance {
            kind,
            color,
            cx,
            cy,
            half_w: w / 2.0,
            half_h: h / 2.0,
        });
        records.push(ImageRecord {
            image_ref: format!("synthetic/{seed}/{i:05}.png"),
            width: image_side,
            height: image_side,
            category: Some(classes[k].to_string()),
            bbox: Some(bbox),
            source: Source::Synthetic,
            object_count: 1,
        });
    }
    let manifest = DatasetManifest::new(
        classes.iter().map(|c| c.to_string()).collect(),
        seed,
        Split::Train,
        records,
    )?;
    Ok(SyntheticDataset {
        manifest,
        shapes,
        side: image_side,
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn render(&self, index: usize) -> RgbImage {
        let s = &self.shapes[index];
        let mut rng = seed::rng(self.manifest.seed, &[&"synthetic-texture", &index]);
        let base: f64 = rng.gen_range(80.0..160.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.gen_range(2.0..9.0) * std::f64::consts::TAU / self.side as f64;
        let amp: f64 = rng.gen_range(10.0..30.0);
        let (ct, st) = (theta.cos(), theta.sin());
        let shade_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let side = self.side;
        let mut img = RgbImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let noise: f64 = rng.gen_range(-12.0..12.0);
                let (dx, dy) = (px - s.cx, py - s.cy);
                let value = if s.kind.contains(dx, dy, s.half_w, s.half_h) {
                    let shade = 1.0
                        + 0.08 * (dx / s.half_w * shade_dir.cos() + dy / s.half_h * shade_dir.sin());
                    let ch = |c: u8| (c as f64 * shade + noise * 0.5).round().clamp(0.0, 255.0) as u8;
                    Rgb([ch(s.color[0]), ch(s.color[1]), ch(s.color[2])])
                } else {
                    let stripe = amp * ((px * ct + py * st) * freq).sin();
                    let g = (base + stripe + noise).round().clamp(0.0, 255.0) as u8;
                    Rgb([g, g, g])
                };
                img.put_pixel(x, y, value);
            }
        }
        img
    }

    pub fn tensor(&self, index: usize, side: u32, norm: Normalization) -> Tensor3 {
        super::image_to_tensor(&self.render(index), side, norm)
    }

    /// Writes every image as PNG at `root/<image_ref>`.
    pub fn write_pngs(&self, root: &Path) -> Result<()> {
        for (i, r) in self.manifest.records.iter().enumerate() {
            let path = root.join(&r.image_ref);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            self.render(i).save(&path).map_err(|e| Error::Ingestion {
                locator: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }
}
