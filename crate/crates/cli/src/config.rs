//! Experiment configuration: one TOML file with `dataset`, `ssl`, `detector`,
//! `eval` and `output` sections. Omitted keys take the documented defaults,
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssdet::augment::AugmentationPolicy;
use ssdet::data::{TINY_CLASSES, VOC_CLASSES};
use ssdet::metrics::{DatasetTag, Method};
use ssdet::model::Architecture;
use ssdet::train::{Phase, TrainConfig};

use crate::error::CliError;

/// Overrides `dataset.root`.
pub const DATA_ROOT_ENV: &str = "SSDET_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    /// Rendered shapes, written by `synth`.
    Synthetic,
    /// VOC2012 for training, VOC2007 for testing, an image directory as pool.
    Voc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub train_images: usize,
    pub test_images: usize,
    /// Added to the dataset seed for the test images.
    pub test_seed_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocSection {
    /// Relative to the dataset root.
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    /// Unlabeled images for pre-training.
    pub pool_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    pub variant: DatasetTag,
    /// Synthetic data defaults to `<output>/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Defaults: the five TINY classes, all twenty VOC classes, or two shapes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub n_per_class: Vec<usize>,
    /// Drives subset sampling, splits, initialisation and training order.
    pub seed: u64,
    pub train_fraction: f64,
    pub image_side: u32,
    pub synthetic: SyntheticSection,
    pub voc: VocSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub augmentation: AugmentationPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// Backbones to train heads on: `ssl` (the pre-trained checkpoint),
    /// `baseline` (an imported checkpoint) or `random`.
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub augmentation: AugmentationPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamTarget {
    GroundTruth,
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Heatmaps per detector when no record ids are given.
    pub gradcam_records: usize,
    pub gradcam_target: CamTarget,
    pub overlay_opacity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub ssl: SslSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    /// TINY on VOC with the training settings used for the published tables.
    fn default() -> Self {
        Self {
            dataset: DatasetSection {
                source: DatasetSource::Voc,
                variant: DatasetTag::Tiny,
                root: None,
                classes: None,
                n_per_class: ssdet::data::TINY_N_VALUES.to_vec(),
                seed: 0,
                train_fraction: 0.8,
                image_side: 224,
                synthetic: SyntheticSection {
                    train_images: 64,
                    test_images: 32,
                    test_seed_offset: 1000,
                },
                voc: VocSection {
                    train_dir: "VOC2012".into(),
                    test_dir: "VOC2007".into(),
                    pool_dir: "coco/train2017".into(),
                },
            },
            ssl: SslSection {
                architecture: Architecture::EfficientNetB1,
                train: TrainConfig::ssl_default(),
                augmentation: AugmentationPolicy::ssl_default(),
            },
            detector: DetectorSection {
                methods: vec![Method::Ssl, Method::Baseline],
                baseline_checkpoint: None,
                train: TrainConfig::detector_default(),
                augmentation: AugmentationPolicy::detector_default(),
            },
            eval: EvalSection {
                gradcam_records: 8,
                gradcam_target: CamTarget::GroundTruth,
                overlay_opacity: 0.5,
            },
            output: OutputSection {
                dir: "runs/experiment".into(),
            },
        }
    }
}

/// Overlays `user` onto `base`, table by table. Arrays and scalars replace.
fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(Self::default()).expect("defaults serialise");
        merge(&mut base, user);
        let mut cfg: Self = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingArtifact(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.sync_seeds();
    }

    fn sync_seeds(&mut self) {
        self.ssl.train.seed = self.dataset.seed;
        self.detector.train.seed = self.dataset.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        let d = &self.dataset;
        if d.n_per_class.is_empty() || d.n_per_class.contains(&0) {
            return bad("dataset.n_per_class", "must list positive counts".into());
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad("dataset.train_fraction", format!("{} is outside (0, 1)", d.train_fraction));
        }
        if d.image_side < 16 {
            return bad("dataset.image_side", format!("{} is below 16", d.image_side));
        }
        if d.source == DatasetSource::Synthetic && (d.synthetic.train_images == 0 || d.synthetic.test_images == 0) {
            return bad("dataset.synthetic", "image counts must be positive".into());
        }
        if self.classes().is_empty() {
            return bad("dataset.classes", "must not be empty".into());
        }
        if self.ssl.train.phase != Phase::Ssl {
            return bad("ssl.train.phase", "must be `ssl`".into());
        }
        if self.detector.train.phase != Phase::Detector {
            return bad("detector.train.phase", "must be `detector`".into());
        }
        self.ssl
            .train
            .validate()
            .or_else(|e| bad("ssl.train", e.to_string()))?;
        self.detector
            .train
            .validate()
            .or_else(|e| bad("detector.train", e.to_string()))?;
        self.ssl
            .augmentation
            .validate()
            .or_else(|e| bad("ssl.augmentation", e.to_string()))?;
        self.detector
            .augmentation
            .validate_detector()
            .or_else(|e| bad("detector.augmentation", e.to_string()))?;
        if self.detector.methods.is_empty() {
            return bad("detector.methods", "must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.eval.overlay_opacity) {
            return bad("eval.overlay_opacity", format!("{} is outside [0, 1]", self.eval.overlay_opacity));
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<String> {
        if let Some(c) = &self.dataset.classes {
            return c.clone();
        }
        let defaults: &[&str] = match (self.dataset.source, self.dataset.variant) {
            (DatasetSource::Synthetic, _) => &["blue-square", "red-disc"],
            (DatasetSource::Voc, DatasetTag::Tiny) => &TINY_CLASSES,
            (DatasetSource::Voc, DatasetTag::Full) => &VOC_CLASSES,
        };
        defaults.iter().map(|s| s.to_string()).collect()
    }

    /// Dataset root: the environment override, then `dataset.root`, then
    /// `<output>/data` for synthetic data.
    pub fn data_root(&self) -> Result<PathBuf, CliError> {
        if let Some(v) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(v));
        }
        match (&self.dataset.root, self.dataset.source) {
            (Some(r), _) => Ok(r.clone()),
            (None, DatasetSource::Synthetic) => Ok(self.output.dir.join("data")),
            (None, DatasetSource::Voc) => Err(CliError::Config(format!(
                "dataset.root: required for VOC data (or set {DATA_ROOT_ENV})"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        source = "synthetic"
        n_per_class = [4]
        seed = 3
    "#;

    #[test]
    fn omitted_keys_take_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.dataset.n_per_class, vec![4]);
        assert_eq!(cfg.dataset.train_fraction, 0.8);
        assert_eq!(cfg.ssl.train.learning_rate, 5e-4);
        assert_eq!(cfg.detector.train.alpha, 0.5);
        assert_eq!(cfg.detector.train.seed, 3);
        assert_eq!(cfg.classes(), vec!["blue-square", "red-disc"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["[dataset]\nsauce = 1", "[ssl.train]\nlearning_rat = 0.1", "[bogus]\nx = 1"] {
            let err = ExperimentConfig::from_toml(extra).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{extra}");
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = ExperimentConfig::from_toml("[dataset]\ntrain_fraction = 1.5").unwrap_err();
        assert!(err.to_string().contains("dataset.train_fraction"), "{err}");
        let err = ExperimentConfig::from_toml("[detector.train]\nalpha = 2.0").unwrap_err();
        assert!(err.to_string().contains("detector.train"), "{err}");
        let geometric = r#"
            [[detector.augmentation.transforms]]
            kind = "horizontal_flip"
            p = 0.5
        "#;
        let err = ExperimentConfig::from_toml(geometric).unwrap_err();
        assert!(err.to_string().contains("detector.augmentation"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn defaults_follow_the_published_settings() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.ssl.train.max_epochs, cfg.ssl.train.batch_size), (200, 32));
        assert_eq!(cfg.ssl.train.learning_rate, 5e-4);
        assert_eq!((cfg.detector.train.max_epochs, cfg.detector.train.learning_rate), (100, 1e-3));
        assert_eq!(cfg.dataset.image_side, 224);
        assert_eq!(cfg.classes().len(), 5);
    }
}
