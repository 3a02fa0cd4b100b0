use std::collections::HashMap;
use std::path::PathBuf;

use rayon::prelude::*;

use super::{image::load_image, ImageRecord, Normalization, SyntheticDataset};
use crate::error::{Error, Result};
use crate::nn::Tensor3;

/// Resolves a record to its normalised `(3, side, side)` tensor.
pub trait ImageSource: Sync {
    fn tensor(&self, record: &ImageRecord) -> Result<Tensor3>;
}

/// Images decoded from files under a dataset root.
#[derive(Clone, Debug)]
pub struct DiskImages {
    pub root: PathBuf,
    pub side: u32,
    pub normalization: Normalization,
}

impl ImageSource for DiskImages {
    fn tensor(&self, record: &ImageRecord) -> Result<Tensor3> {
        load_image(record, &self.root, self.side, self.normalization).map(|(t, _)| t)
    }
}

/// Synthetic images rendered on demand, looked up by `image_ref`.
pub struct SyntheticImages<'a> {
    sets: Vec<&'a SyntheticDataset>,
    index: HashMap<&'a str, (usize, usize)>,
    side: u32,
    normalization: Normalization,
}

impl<'a> SyntheticImages<'a> {
    pub fn new(sets: &[&'a SyntheticDataset], side: u32, normalization: Normalization) -> Self {
        let mut index = HashMap::new();
        for (s, set) in sets.iter().enumerate() {
            for (i, r) in set.manifest.records.iter().enumerate() {
                index.insert(r.image_ref.as_str(), (s, i));
            }
        }
        Self {
            sets: sets.to_vec(),
            index,
            side,
            normalization,
        }
    }
}

impl ImageSource for SyntheticImages<'_> {
    fn tensor(&self, record: &ImageRecord) -> Result<Tensor3> {
        let &(s, i) = self.index.get(record.image_ref.as_str()).ok_or_else(|| Error::Ingestion {
            locator: record.image_ref.clone(),
            reason: "not part of the synthetic dataset".into(),
        })?;
        Ok(self.sets[s].tensor(i, self.side, self.normalization))
    }
}

/// Decodes every record of `records` once and serves the tensors from memory.
pub struct CachedImages {
    cache: HashMap<String, Tensor3>,
}

impl CachedImages {
    pub fn new(source: &dyn ImageSource, records: &[ImageRecord]) -> Result<Self> {
        let tensors = records
            .par_iter()
            .map(|r| source.tensor(r).map(|t| (r.image_ref.clone(), t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cache: tensors.into_iter().collect(),
        })
    }
}

impl ImageSource for CachedImages {
    fn tensor(&self, record: &ImageRecord) -> Result<Tensor3> {
        self.cache.get(&record.image_ref).cloned().ok_or_else(|| Error::Ingestion {
            locator: record.image_ref.clone(),
            reason: "not in the image cache".into(),
        })
    }
}
