use std::path::Path;

use ::image::imageops::{self, FilterType};
use ::image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BoundingBox, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::Tensor3;

/// Affine pixel normalisation `(v - mean) / std` on `[0, 1]` values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.5 }
    }
}

impl Normalization {
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, v: f32) -> f32 {
        v * self.std + self.mean
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.mean.is_finite() {
            return Err(Error::Domain(format!(
                "normalization needs finite mean and positive std, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Plain (non aspect-preserving) resize to `side × side` followed by
/// normalisation, laid out as a `(3, side, side)` tensor.
pub fn image_to_tensor(img: &RgbImage, side: u32, norm: Normalization) -> Tensor3 {
    let resized;
    let img = if img.width() == side && img.height() == side {
        img
    } else {
        resized = imageops::resize(img, side, side, FilterType::Triangle);
        &resized
    };
    let s = side as usize;
    let mut t = Tensor3::zeros(3, s, s);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *t.at_mut(c, y as usize, x as usize) = norm.apply(px[c] as f32 / 255.0);
        }
    }
    t
}

pub fn load_rgb(record: &ImageRecord, root: &Path) -> Result<RgbImage> {
    let path = root.join(&record.image_ref);
    let img = ::image::open(&path).map_err(|e| Error::Ingestion {
        locator: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Decodes `record` (relative to `root`) into a normalised tensor. The unit
/// box is unaffected by the plain resize and is returned unchanged.
pub fn load_image(
    record: &ImageRecord,
    root: &Path,
    side: u32,
    norm: Normalization,
) -> Result<(Tensor3, Option<BoundingBox>)> {
    norm.validate()?;
    let img = load_rgb(record, root)?;
    Ok((image_to_tensor(&img, side, norm), record.bbox))
}
