//! Feature extractors, projection head, detection heads and checkpoints.

mod arch;
mod checkpoint;
mod import;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, Linear, OpCache, ParamId, ParamStore, Sequential, Tensor3};
use crate::seed;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, BackboneCheckpoint, Checkpoint, CheckpointKind, CheckpointMeta, Provenance,
    FORMAT_VERSION,
};
pub use import::{import_safetensors, DEFAULT_BN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "tiny-cnn")]
    TinyCnn,
    #[serde(rename = "efficientnet-b1")]
    EfficientNetB1,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Self::TinyCnn => "tiny-cnn",
            Self::EfficientNetB1 => "efficientnet-b1",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Self::TinyCnn),
            "efficientnet-b1" => Ok(Self::EfficientNetB1),
            other => Err(Error::Contract(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Convolutional backbone exposing its final feature map and the spatial
/// mean of that map.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    arch: Architecture,
    net: Sequential,
    params: ParamStore,
    out_channels: usize,
    frozen: bool,
}

impl FeatureExtractor {
    /// Seeded He initialisation.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[&"backbone-init", &arch]);
        let mut params = ParamStore::new();
        let (net, out_channels) = match arch {
            Architecture::TinyCnn => arch::tiny_cnn(&mut params, &mut rng),
            Architecture::EfficientNetB1 => arch::efficientnet_b1(&mut params, &mut rng),
        };
        Self {
            arch,
            net,
            params,
            out_channels,
            frozen: false,
        }
    }

    /// Rebuilds a backbone around stored parameters, checking names and shapes.
    pub fn from_params(arch: Architecture, params: &ParamStore) -> Result<Self> {
        let mut fe = Self::new(arch, 0);
        if !fe.params.same_layout(params) {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter layout does not match architecture `{arch}`"
            )));
        }
        fe.params.copy_from(params);
        Ok(fe)
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Parameters for an optimiser. Refused once the backbone is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Invariant(
                "frozen backbone parameters cannot be handed to an optimiser".into(),
            ));
        }
        Ok(&mut self.params)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Irreversibly excludes the parameters from optimisation.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels != 3 || x.height < 16 || x.width < 16 {
            return Err(Error::Contract(format!(
                "backbone expects (3, H, W) input with H, W >= 16, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Final feature map `(C, h, w)` and its spatial mean `(C,)`.
    pub fn forward(&self, x: &Tensor3) -> Result<(Tensor3, Vec<f32>)> {
        self.check_input(x)?;
        let map = self.net.forward(&self.params, x);
        let pooled = map.spatial_mean();
        Ok((map, pooled))
    }

    pub fn encode(&self, batch: &[Tensor3]) -> Result<(Vec<Tensor3>, Vec<Vec<f32>>)> {
        let out: Vec<(Tensor3, Vec<f32>)> = batch.par_iter().map(|x| self.forward(x)).collect::<Result<_>>()?;
        Ok(out.into_iter().unzip())
    }

    pub fn pooled(&self, x: &Tensor3) -> Result<Vec<f32>> {
        self.forward(x).map(|(_, p)| p)
    }

    pub(crate) fn forward_cached(&self, x: &Tensor3) -> Result<(Tensor3, Vec<OpCache>)> {
        self.check_input(x)?;
        Ok(self.net.forward_cached(&self.params, x))
    }

    /// Back-propagates a gradient on the pooled vector into `grads`.
    pub(crate) fn backward_pooled(&self, caches: &[OpCache], map_shape: (usize, usize, usize), d_pooled: &[f32], grads: &mut Grads) {
        let (c, h, w) = map_shape;
        let mut d_map = Tensor3::zeros(c, h, w);
        let n = (h * w) as f32;
        for (ch, &g) in d_pooled.iter().enumerate() {
            let v = g / n;
            d_map.plane_mut(ch).iter_mut().for_each(|x| *x = v);
        }
        self.net.backward(&self.params, caches, d_map, grads, false);
    }
}

/// Two affine layers with a ReLU between them, used only for pre-training.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    first: Linear,
    second: Linear,
    params: ParamStore,
    hidden_activation: bool,
}

pub const PROJECTION_DIM: usize = 128;

impl ProjectionHead {
    /// Hidden width equals the input width; output width [`PROJECTION_DIM`].
    pub fn new(in_dim: usize, seed: u64) -> Self {
        Self::with_dims(in_dim, in_dim, PROJECTION_DIM, seed)
    }

    pub fn with_dims(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[&"projection-init"]);
        let mut params = ParamStore::new();
        let first = arch::linear(&mut params, &mut rng, "fc1", in_dim, hidden);
        let second = arch::linear(&mut params, &mut rng, "fc2", hidden, out_dim);
        Self {
            first,
            second,
            params,
            hidden_activation: true,
        }
    }

    /// Rebuilds a head from stored `fc1`/`fc2` parameters.
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let shape = |name: &str| {
            params
                .by_name(name)
                .filter(|p| p.shape.len() == 2)
                .map(|p| (p.shape[1], p.shape[0]))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("projection parameter `{name}` missing or not 2-D")))
        };
        let (in_dim, hidden) = shape("fc1.weight")?;
        let (_, out_dim) = shape("fc2.weight")?;
        let mut head = Self::with_dims(in_dim, hidden, out_dim, 0);
        head.set_params(params)?;
        Ok(head)
    }

    pub fn set_hidden_activation(&mut self, on: bool) {
        self.hidden_activation = on;
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &ParamStore) -> Result<()> {
        if !self.params.same_layout(params) {
            return Err(Error::Contract("projection head parameter layout mismatch".into()));
        }
        self.params.copy_from(params);
        Ok(())
    }

    fn hidden(&self, pooled: &[f32]) -> Vec<f32> {
        let mut h = self.first.forward(&self.params, pooled);
        if self.hidden_activation {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h
    }

    fn check(&self, pooled: &[f32]) -> Result<()> {
        if pooled.len() != self.in_dim() {
            return Err(Error::Contract(format!(
                "projection head expects {} features, got {}",
                self.in_dim(),
                pooled.len()
            )));
        }
        Ok(())
    }

    pub fn project_one(&self, pooled: &[f32]) -> Result<Vec<f32>> {
        self.check(pooled)?;
        Ok(self.second.forward(&self.params, &self.hidden(pooled)))
    }

    pub fn project(&self, pooled: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        pooled.iter().map(|p| self.project_one(p)).collect()
    }

    /// Gradient of the head input given a gradient on its output.
    pub(crate) fn backward_one(&self, pooled: &[f32], dz: &[f32], grads: &mut Grads) -> Vec<f32> {
        let pre = self.first.forward(&self.params, pooled);
        let act: Vec<f32> = if self.hidden_activation {
            pre.iter().map(|v| v.max(0.0)).collect()
        } else {
            pre.clone()
        };
        let mut dh = self.second.backward(&self.params, &act, dz, grads);
        if self.hidden_activation {
            dh.iter_mut().zip(&pre).for_each(|(g, &v)| if v <= 0.0 { *g = 0.0 });
        }
        self.first.backward(&self.params, pooled, &dh, grads)
    }
}

/// One affine layer to class logits and one affine layer plus sigmoid to a
/// unit box. Inputs first pass a fixed per-feature standardisation
/// (`norm.mean`, `norm.scale`) that receives no gradient; composed with
/// either layer it is still a single affine map.
#[derive(Clone, Debug)]
pub struct DetectionHeads {
    cls: Linear,
    loc: Linear,
    mean: ParamId,
    scale: ParamId,
    params: ParamStore,
}

/// Box predicted by freshly initialised heads for every input. Starting from
/// a well-ordered box keeps the overlap term of the loss differentiable.
pub const INITIAL_BOX: [f64; 4] = [0.25, 0.25, 0.75, 0.75];

/// Sigmoid outputs are kept this far away from 0 and 1.
const BOX_MARGIN: f64 = 1e-12;

pub(crate) fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DetectionHeads {
    pub fn new(in_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[&"heads-init"]);
        let mut params = ParamStore::new();
        let mean = params.push_filled("norm.mean", vec![in_dim], 0.0);
        let scale = params.push_filled("norm.scale", vec![in_dim], 1.0);
        let cls = arch::linear(&mut params, &mut rng, "cls", in_dim, num_classes);
        let loc = arch::linear(&mut params, &mut rng, "loc", in_dim, 4);
        params.get_mut(loc.weight).iter_mut().for_each(|w| *w = 0.0);
        let start = INITIAL_BOX.map(|v| (v / (1.0 - v)).ln() as f32);
        params.get_mut(loc.bias).copy_from_slice(&start);
        Self {
            cls,
            loc,
            mean,
            scale,
            params,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.cls.in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.cls.out_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &ParamStore) -> Result<()> {
        if !self.params.same_layout(params) {
            return Err(Error::Contract("detection head parameter layout mismatch".into()));
        }
        self.params.copy_from(params);
        Ok(())
    }

    /// Digest of the localisation head only.
    pub fn loc_digest(&self) -> String {
        let mut p = ParamStore::new();
        for name in ["loc.weight", "loc.bias"] {
            let t = self.params.by_name(name).expect("loc params");
            p.push(name, t.shape.clone(), t.data.clone());
        }
        p.digest()
    }

    /// Classification weight row of `class`.
    pub fn class_weights(&self, class: usize) -> &[f32] {
        let d = self.in_dim();
        &self.params.get(self.cls.weight)[class * d..(class + 1) * d]
    }

    fn check(&self, pooled: &[f32]) -> Result<()> {
        if pooled.len() != self.in_dim() {
            return Err(Error::Contract(format!(
                "detection heads expect {} features, got {}",
                self.in_dim(),
                pooled.len()
            )));
        }
        Ok(())
    }

    /// Sets the input standardisation from training features:
    /// `x' = (x - mean) / sqrt(var + 1e-6)`.
    pub fn fit_standardization(&mut self, features: &[Vec<f32>]) -> Result<()> {
        let d = self.in_dim();
        if features.is_empty() || features.iter().any(|f| f.len() != d) {
            return Err(Error::Contract("standardisation needs non-empty features of the input width".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0f64; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0f64; d];
        for f in features {
            for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let scale: Vec<f32> = var.iter().map(|&v| (1.0 / (v + 1e-6).sqrt()) as f32).collect();
        self.params.get_mut(self.mean).copy_from_slice(&mean);
        self.params.get_mut(self.scale).copy_from_slice(&scale);
        Ok(())
    }

    fn standardize(&self, pooled: &[f32]) -> Vec<f32> {
        let (m, s) = (self.params.get(self.mean), self.params.get(self.scale));
        pooled.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) * s).collect()
    }

    /// Logits and the raw (pre-sigmoid) localisation output.
    fn raw(&self, pooled: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let x = self.standardize(pooled);
        (self.cls.forward(&self.params, &x), self.loc.forward(&self.params, &x))
    }

    pub fn detect_one(&self, pooled: &[f32]) -> Result<(Vec<f64>, [f64; 4])> {
        self.check(pooled)?;
        let (logits, raw) = self.raw(pooled);
        let mut b = [0.0; 4];
        for (o, r) in b.iter_mut().zip(&raw) {
            *o = sigmoid64(*r as f64).clamp(BOX_MARGIN, 1.0 - BOX_MARGIN);
        }
        Ok((logits.into_iter().map(f64::from).collect(), b))
    }

    pub fn detect(&self, pooled: &[Vec<f32>]) -> Result<(Vec<Vec<f64>>, Vec<[f64; 4]>)> {
        let out = pooled.iter().map(|p| self.detect_one(p)).collect::<Result<Vec<_>>>()?;
        Ok(out.into_iter().unzip())
    }

    /// Accumulates head gradients for loss gradients on the logits and the
    /// (post-sigmoid) box; returns the gradient on the pooled input.
    pub(crate) fn backward_one(&self, pooled: &[f32], d_logits: &[f64], d_box: &[f64; 4], grads: &mut Grads) -> Vec<f32> {
        let (_, raw) = self.raw(pooled);
        let d_raw: Vec<f32> = raw
            .iter()
            .zip(d_box)
            .map(|(&r, &g)| {
                let s = sigmoid64(r as f64);
                (g * s * (1.0 - s)) as f32
            })
            .collect();
        let dl: Vec<f32> = d_logits.iter().map(|&g| g as f32).collect();
        let x = self.standardize(pooled);
        let mut dp = self.cls.backward(&self.params, &x, &dl, grads);
        let dp2 = self.loc.backward(&self.params, &x, &d_raw, grads);
        let s = self.params.get(self.scale);
        dp.iter_mut().zip(dp2).zip(s).for_each(|((a, b), s)| *a = (*a + b) * s);
        dp
    }
}

/// Frozen backbone plus trained heads.
#[derive(Clone, Debug)]
pub struct Detector {
    pub backbone: FeatureExtractor,
    pub heads: DetectionHeads,
    pub class_names: Vec<String>,
}

impl Detector {
    pub fn new(mut backbone: FeatureExtractor, heads: DetectionHeads, class_names: Vec<String>) -> Result<Self> {
        if heads.in_dim() != backbone.out_channels() {
            return Err(Error::Contract(format!(
                "heads take {} features, backbone produces {}",
                heads.in_dim(),
                backbone.out_channels()
            )));
        }
        if heads.num_classes() != class_names.len() {
            return Err(Error::Contract(format!(
                "heads have {} classes, {} class names given",
                heads.num_classes(),
                class_names.len()
            )));
        }
        backbone.freeze();
        Ok(Self {
            backbone,
            heads,
            class_names,
        })
    }

    pub fn predict(&self, image: &Tensor3) -> Result<(Vec<f64>, [f64; 4])> {
        let pooled = self.backbone.pooled(image)?;
        self.heads.detect_one(&pooled)
    }

    pub fn to_checkpoint(&self, provenance: Provenance, config_digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointKind::Detector, self.backbone.arch(), provenance, config_digest);
        ck.meta.class_names = self.class_names.clone();
        ck.groups.push(("backbone".into(), self.backbone.params().clone()));
        ck.groups.push(("heads".into(), self.heads.params().clone()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != CheckpointKind::Detector {
            return Err(Error::Contract(format!("checkpoint holds a {:?}, not a detector", ck.meta.kind)));
        }
        let arch: Architecture = ck.meta.architecture.parse()?;
        let backbone = FeatureExtractor::from_params(arch, ck.group("backbone")?)?;
        let mut heads = DetectionHeads::new(backbone.out_channels(), ck.meta.class_names.len(), 0);
        heads
            .set_params(ck.group("heads")?)
            .map_err(|_| Error::CorruptCheckpoint("detection head layout mismatch".into()))?;
        Self::new(backbone, heads, ck.meta.class_names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, side: usize) -> Tensor3 {
        use rand::Rng;
        let mut rng = seed::rng(seed, &[]);
        Tensor3::from_vec(3, side, side, (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tiny_cnn_shapes_and_size() {
        let fe = FeatureExtractor::new(Architecture::TinyCnn, 0);
        assert!((90_000..110_000).contains(&fe.params().num_scalars()));
        let (map, pooled) = fe.forward(&image(1, 224)).unwrap();
        assert_eq!(map.shape(), (128, 14, 14));
        assert_eq!(pooled.len(), 128);
    }

    #[test]
    fn pooled_is_spatial_mean() {
        let fe = FeatureExtractor::new(Architecture::TinyCnn, 3);
        let (maps, pooled) = fe.encode(&[image(2, 64), image(3, 64)]).unwrap();
        for (m, p) in maps.iter().zip(&pooled) {
            for c in 0..m.channels {
                let mean = m.plane(c).iter().map(|&v| v as f64).sum::<f64>() / m.plane_len() as f64;
                assert!((mean as f32 - p[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let fe = FeatureExtractor::new(Architecture::TinyCnn, 4);
        let img = image(5, 64);
        let (_, pooled) = fe.encode(&[img.clone(), img]).unwrap();
        for (a, b) in pooled[0].iter().zip(&pooled[1]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let fe = FeatureExtractor::new(Architecture::TinyCnn, 6);
        let (map, pooled) = fe.forward(&Tensor3::zeros(3, 224, 224)).unwrap();
        assert!(map.is_finite());
        assert!(pooled.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_input_shape_is_contract_error() {
        let fe = FeatureExtractor::new(Architecture::TinyCnn, 0);
        assert!(matches!(fe.forward(&Tensor3::zeros(1, 32, 32)), Err(Error::Contract(_))));
    }

    #[test]
    fn efficientnet_b1_builds_with_expected_width() {
        let fe = FeatureExtractor::new(Architecture::EfficientNetB1, 0);
        assert_eq!(fe.out_channels(), 1280);
        let n = fe.params().num_scalars();
        // 7.8M with the classifier; the convolutional base alone is ~6.5M
        assert!((6_000_000..7_000_000).contains(&n), "{n}");
        let (map, _) = fe.forward(&image(0, 64)).unwrap();
        assert_eq!(map.shape(), (1280, 2, 2));
    }

    #[test]
    fn projection_examples() {
        let mut head = ProjectionHead::with_dims(4, 4, 4, 0);
        for p in head.params_mut().iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(head.project_one(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 4]);

        for p in head.params_mut().iter_mut() {
            if p.name.ends_with("weight") {
                for i in 0..4 {
                    p.data[i * 4 + i] = 1.0;
                }
            }
        }
        head.set_hidden_activation(false);
        let x = [1.0, -2.0, 3.0, 0.5];
        assert_eq!(head.project_one(&x).unwrap(), x.to_vec());
        assert!(matches!(head.project_one(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_heads_give_centre_box_and_zero_logits() {
        let mut heads = DetectionHeads::new(8, 3, 0);
        for p in heads.params_mut().iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (logits, b) = heads.detect_one(&[0.3; 8]).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        assert_eq!(b, [0.5; 4]);
        assert!(matches!(heads.detect_one(&[0.3; 7]), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_heads_predict_the_initial_box() {
        let heads = DetectionHeads::new(8, 2, 0);
        let (_, b) = heads.detect_one(&[5.0, -3.0, 1.0, 0.0, 2.0, 9.0, -1.0, 4.0]).unwrap();
        for (x, y) in b.iter().zip(INITIAL_BOX) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn freeze_blocks_optimiser_access() {
        let mut fe = FeatureExtractor::new(Architecture::TinyCnn, 0);
        assert!(!fe.is_frozen());
        assert!(fe.params_mut().is_ok());
        fe.freeze();
        assert!(fe.is_frozen());
        assert!(matches!(fe.params_mut(), Err(Error::Invariant(_))));
    }
}
