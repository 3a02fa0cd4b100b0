//! Dataset ingestion, manifests, subsetting and synthetic data.

mod image;
mod source;
mod subset;
mod synthetic;
mod voc;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use source::{CachedImages, DiskImages, ImageSource, SyntheticImages};
pub use self::image::{image_to_tensor, load_image, load_rgb, Normalization};
pub use subset::{build_subset, filter_single_object, split_train_val, SubsetSpec};
pub use synthetic::{generate_synthetic_dataset, ShapeKind, SyntheticDataset, SHAPE_COLORS, SHAPE_KINDS};
pub use voc::{ingest_voc, parse_voc_annotation, parse_voc_document, VocAnnotation, VocObject};

/// The twenty PascalVOC categories, in the challenge's canonical spelling.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Five most populated single-object VOC classes.
pub const TINY_CLASSES: [&str; 5] = ["aeroplane", "bird", "cat", "dog", "person"];

pub const TINY_N_VALUES: [usize; 6] = [10, 20, 50, 100, 200, 500];
pub const FULL_N_VALUES: [usize; 7] = [3, 5, 10, 20, 50, 100, 200];

/// Axis-aligned box in unit coordinates relative to image width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Ground-truth constructor: enforces `0 ≤ min ≤ max ≤ 1` on both axes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_valid() {
            return Err(Error::InvalidAnnotation(format!("box {b} violates 0 <= min <= max <= 1")));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn is_valid(&self) -> bool {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0;
        ok(self.x_min, self.x_max) && ok(self.y_min, self.y_max)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    /// Back to pixel corners.
    pub fn to_pixels(&self, width: u32, height: u32) -> [f64; 4] {
        [
            self.x_min * width as f64,
            self.y_min * height as f64,
            self.x_max * width as f64,
            self.y_max * height as f64,
        ]
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 4]>::deserialize(d)?;
        BoundingBox::from_array(a).map_err(serde::de::Error::custom)
    }
}

/// Pixel-space box as written in annotation files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub xmin: i64,
    pub ymin: i64,
    pub xmax: i64,
    pub ymax: i64,
}

impl PixelBox {
    pub fn new(xmin: i64, ymin: i64, xmax: i64, ymax: i64) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }
}

/// Divides pixel corners by the image size.
pub fn normalize_box(b: PixelBox, width: u32, height: u32) -> Result<BoundingBox> {
    let (w, h) = (width as i64, height as i64);
    if !(0 <= b.xmin && b.xmin < b.xmax && b.xmax <= w && 0 <= b.ymin && b.ymin < b.ymax && b.ymax <= h) {
        return Err(Error::InvalidAnnotation(format!(
            "pixel box ({}, {}, {}, {}) is empty or outside a {width}x{height} image",
            b.xmin, b.ymin, b.xmax, b.ymax
        )));
    }
    BoundingBox::new(
        b.xmin as f64 / w as f64,
        b.ymin as f64 / h as f64,
        b.xmax as f64 / w as f64,
        b.ymax as f64 / h as f64,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Voc2012,
    Voc2007,
    UnlabeledPool,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// File path (relative to the dataset root) of the image.
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub category: Option<String>,
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
    pub source: Source,
    /// Number of annotated objects in the source image.
    #[serde(default = "one")]
    pub object_count: usize,
}

fn one() -> usize {
    1
}

impl ImageRecord {
    pub fn is_labeled(&self) -> bool {
        self.category.is_some() && self.bbox.is_some()
    }

    pub fn unlabeled(image_ref: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_ref: image_ref.into(),
            width,
            height,
            category: None,
            bbox: None,
            source: Source::UnlabeledPool,
            object_count: 0,
        }
    }
}

/// An ordered, immutable collection of image records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub split: Split,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    /// Builds a manifest with lexicographically sorted class names and checks
    /// every record against them.
    pub fn new(mut class_names: Vec<String>, seed: u64, split: Split, records: Vec<ImageRecord>) -> Result<Self> {
        class_names.sort();
        class_names.dedup();
        let m = Self {
            class_names,
            seed,
            split,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("class names must be sorted and unique".into()));
        }
        for r in &self.records {
            match (&r.category, &r.bbox) {
                (Some(c), Some(b)) => {
                    if self.class_index(c).is_none() {
                        return Err(Error::Contract(format!(
                            "record `{}` has category `{c}` missing from class_names",
                            r.image_ref
                        )));
                    }
                    if !b.is_valid() {
                        return Err(Error::InvalidAnnotation(format!("record `{}` box {b}", r.image_ref)));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "record `{}` must carry both category and box, or neither",
                        r.image_ref
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    /// Label index of a labeled record.
    pub fn label_of(&self, record: &ImageRecord) -> Result<usize> {
        let cat = record
            .category
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("record `{}` is unlabeled", record.image_ref)))?;
        self.class_index(cat)
            .ok_or_else(|| Error::Contract(format!("unknown category `{cat}`")))
    }

    pub fn count_by_class(&self) -> Vec<(String, usize)> {
        self.class_names
            .iter()
            .map(|c| {
                let n = self
                    .records
                    .iter()
                    .filter(|r| r.category.as_deref() == Some(c.as_str()))
                    .count();
                (c.clone(), n)
            })
            .collect()
    }

    pub fn with_records(&self, split: Split, records: Vec<ImageRecord>) -> Self {
        Self {
            class_names: self.class_names.clone(),
            seed: self.seed,
            split,
            records,
        }
    }

    /// Strips labels, leaving an unlabeled pool over the same images.
    pub fn to_unlabeled_pool(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| ImageRecord {
                category: None,
                bbox: None,
                source: Source::UnlabeledPool,
                object_count: 0,
                ..r.clone()
            })
            .collect();
        Self {
            class_names: Vec::new(),
            seed: self.seed,
            split: Split::Pool,
            records,
        }
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let m: Self = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_bytes(&bytes)
    }
}

/// Unlabeled pool over every decodable image file in `dir` (sorted by name).
pub fn scan_image_dir(dir: &Path, seed: u64) -> Result<DatasetManifest> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let l = n.to_ascii_lowercase();
            l.ends_with(".png") || l.ends_with(".jpg") || l.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    let mut records = Vec::with_capacity(names.len());
    for n in names {
        let (w, h) = ::image::image_dimensions(dir.join(&n)).map_err(|e| Error::Ingestion {
            locator: dir.join(&n).display().to_string(),
            reason: e.to_string(),
        })?;
        records.push(ImageRecord::unlabeled(n, w, h));
    }
    DatasetManifest::new(Vec::new(), seed, Split::Pool, records)
}
