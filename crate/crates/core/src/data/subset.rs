use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::seed;

/// Keeps records whose source image had exactly one annotated object.
pub fn filter_single_object(manifest: &DatasetManifest) -> DatasetManifest {
    let records = manifest
        .records
        .iter()
        .filter(|r| r.object_count == 1)
        .cloned()
        .collect();
    manifest.with_records(manifest.split, records)
}

/// `n_per_class` labeled images for each listed class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub classes: Vec<String>,
    pub n_per_class: usize,
    pub seed: u64,
}

impl SubsetSpec {
    pub fn new(classes: &[&str], n_per_class: usize, seed: u64) -> Self {
        Self {
            classes: classes.iter().map(|c| c.to_string()).collect(),
            n_per_class,
            seed,
        }
    }
}

/// Seeded uniform sampling without replacement, independently per class.
/// Records keep their manifest order.
pub fn build_subset(manifest: &DatasetManifest, spec: &SubsetSpec) -> Result<DatasetManifest> {
    if spec.n_per_class == 0 {
        return Err(Error::Contract("n_per_class must be positive".into()));
    }
    let mut keep = vec![false; manifest.records.len()];
    for class in &spec.classes {
        let idx: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.category.as_deref() == Some(class.as_str()))
            .map(|(i, _)| i)
            .collect();
        if idx.len() < spec.n_per_class {
            return Err(Error::Capacity {
                class: class.clone(),
                available: idx.len(),
                requested: spec.n_per_class,
            });
        }
        let mut rng = seed::rng(spec.seed, &[&"subset", class]);
        for pick in sample(&mut rng, idx.len(), spec.n_per_class) {
            keep[idx[pick]] = true;
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    DatasetManifest::new(spec.classes.clone(), spec.seed, manifest.split, records)
}

/// Stratified split: per class, `round(train_fraction × count)` records go to
/// train and the rest to val. Unlabeled records form one stratum.
pub fn split_train_val(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        strata.entry(r.category.clone().unwrap_or_default()).or_default().push(i);
    }
    let mut in_train = vec![false; manifest.records.len()];
    for (class, mut idx) in strata {
        if idx.len() < 2 {
            return Err(Error::Stratification {
                class,
                available: idx.len(),
            });
        }
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        let mut rng = seed::rng(seed, &[&"split", &class]);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, t) in manifest.records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            val.push(r.clone());
        }
    }
    let val_split = if manifest.split == Split::Pool { Split::Pool } else { Split::Val };
    let train_split = if manifest.split == Split::Pool { Split::Pool } else { Split::Train };
    Ok((
        manifest.with_records(train_split, train),
        manifest.with_records(val_split, val),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, ImageRecord, Source};

    fn manifest(counts: &[(&str, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (c, n) in counts {
            for i in 0..*n {
                records.push(ImageRecord {
                    image_ref: format!("{c}/{i}.png"),
                    width: 64,
                    height: 64,
                    category: Some(c.to_string()),
                    bbox: Some(BoundingBox::new(0.1, 0.1, 0.9, 0.9).unwrap()),
                    source: Source::Synthetic,
                    object_count: 1,
                });
            }
        }
        let names = counts.iter().map(|(c, _)| c.to_string()).collect();
        DatasetManifest::new(names, 0, Split::Train, records).unwrap()
    }

    #[test]
    fn filter_keeps_single_object_images_in_order() {
        let mut m = manifest(&[("cat", 3)]);
        m.records[1].object_count = 2;
        let f = filter_single_object(&m);
        assert_eq!(f.records.len(), 2);
        assert_eq!(f.records[0].image_ref, "cat/0.png");
        assert_eq!(f.records[1].image_ref, "cat/2.png");

        let m = manifest(&[("cat", 4)]);
        assert_eq!(filter_single_object(&m), m);

        let mut m = manifest(&[("cat", 2)]);
        m.records.iter_mut().for_each(|r| r.object_count = 3);
        assert!(filter_single_object(&m).records.is_empty());
    }

    #[test]
    fn subset_counts_and_determinism() {
        let classes = ["bird", "cat", "dog", "person", "aeroplane"];
        let m = manifest(&classes.map(|c| (c, 40)));
        let s7 = build_subset(&m, &SubsetSpec::new(&classes, 10, 7)).unwrap();
        assert_eq!(s7.records.len(), 50);
        assert!(s7.count_by_class().iter().all(|(_, n)| *n == 10));
        assert_eq!(s7, build_subset(&m, &SubsetSpec::new(&classes, 10, 7)).unwrap());
        let s8 = build_subset(&m, &SubsetSpec::new(&classes, 10, 8)).unwrap();
        assert_eq!(s8.records.len(), 50);
        assert_ne!(s7.records, s8.records);
    }

    #[test]
    fn subset_saturation_and_capacity() {
        let m = manifest(&[("cat", 5), ("dog", 7)]);
        let all = build_subset(&m, &SubsetSpec::new(&["cat"], 5, 1)).unwrap();
        assert_eq!(all.records, m.records[..5].to_vec());
        match build_subset(&m, &SubsetSpec::new(&["cat", "dog"], 6, 1)) {
            Err(Error::Capacity { class, available, .. }) => {
                assert_eq!(class, "cat");
                assert_eq!(available, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        let (t, v) = split_train_val(&manifest(&[("cat", 100)]), 0.8, 3).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
        let (t, v) = split_train_val(&manifest(&[("cat", 10)]), 0.5, 3).unwrap();
        assert_eq!((t.len(), v.len()), (5, 5));
        let m = manifest(&[("a", 20), ("b", 20), ("c", 20), ("d", 20), ("e", 20)]);
        let (t, v) = split_train_val(&m, 0.8, 3).unwrap();
        assert!(t.count_by_class().iter().all(|(_, n)| *n == 16));
        assert!(v.count_by_class().iter().all(|(_, n)| *n == 4));
        assert_eq!(t.split, Split::Train);
        assert_eq!(v.split, Split::Val);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_train_val(&manifest(&[("cat", 1), ("dog", 5)]), 0.8, 0),
            Err(Error::Stratification { .. })
        ));
        assert!(split_train_val(&manifest(&[("cat", 5)]), 1.0, 0).is_err());
        assert!(split_train_val(&manifest(&[("cat", 5)]), 0.0, 0).is_err());
    }
}
