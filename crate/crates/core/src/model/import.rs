//! Converter from externally trained weights in safetensors format.
//!
//! Tensor names follow the backbone's own parameter names. A per-channel
//! affine `X.scale`/`X.shift` may instead be supplied as batch-norm
//! statistics `X.weight`, `X.bias`, `X.running_mean`, `X.running_var`,
//! which are folded as `scale = w / sqrt(var + eps)`, `shift = b - mean * scale`.

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::checkpoint::{Checkpoint, Provenance};
use super::{Architecture, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const DEFAULT_BN_EPS: f64 = 1e-3;

fn to_f64(view: &TensorView<'_>, name: &str) -> Result<Vec<f64>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        other => {
            return Err(Error::Ingestion {
                locator: name.to_string(),
                reason: format!("unsupported dtype {other:?}"),
            })
        }
    };
    Ok(out)
}

fn fetch(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Option<Vec<f64>>> {
    let view = match st.tensor(name) {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    if view.shape() != shape {
        return Err(Error::Ingestion {
            locator: name.to_string(),
            reason: format!("shape {:?}, expected {:?}", view.shape(), shape),
        });
    }
    to_f64(&view, name).map(Some)
}

fn require(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    fetch(st, name, shape)?.ok_or_else(|| Error::Ingestion {
        locator: name.to_string(),
        reason: "tensor missing".into(),
    })
}

/// Builds an `imagenet-imported` backbone checkpoint from safetensors bytes.
pub fn import_safetensors(bytes: &[u8], arch: Architecture, bn_eps: f64, config_digest: &str) -> Result<Checkpoint> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Ingestion {
        locator: "safetensors".into(),
        reason: e.to_string(),
    })?;
    let template = FeatureExtractor::new(arch, 0);
    let mut params = ParamStore::new();
    for p in template.params().iter() {
        let values = if let Some(v) = fetch(&st, &p.name, &p.shape)? {
            v
        } else if let Some(base) = p.name.strip_suffix(".scale") {
            let w = require(&st, &format!("{base}.weight"), &p.shape)?;
            let var = require(&st, &format!("{base}.running_var"), &p.shape)?;
            w.iter().zip(&var).map(|(w, v)| w / (v + bn_eps).sqrt()).collect()
        } else if let Some(base) = p.name.strip_suffix(".shift") {
            let w = require(&st, &format!("{base}.weight"), &p.shape)?;
            let b = require(&st, &format!("{base}.bias"), &p.shape)?;
            let mean = require(&st, &format!("{base}.running_mean"), &p.shape)?;
            let var = require(&st, &format!("{base}.running_var"), &p.shape)?;
            (0..w.len())
                .map(|i| b[i] - mean[i] * w[i] / (var[i] + bn_eps).sqrt())
                .collect()
        } else {
            require(&st, &p.name, &p.shape)?
        };
        params.push(p.name.clone(), p.shape.clone(), values.into_iter().map(|v| v as f32).collect());
    }
    let fe = FeatureExtractor::from_params(arch, &params)?;
    let mut ck = Checkpoint::from_backbone(&fe, Provenance::ImagenetImported, config_digest);
    ck.meta.initialization = "imported".into();
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn tiny_cnn_round_trips_through_safetensors() {
        let fe = FeatureExtractor::new(Architecture::TinyCnn, 9);
        let bufs: Vec<(String, Vec<usize>, Vec<u8>)> = fe
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), f32_bytes(&p.data)))
            .collect();
        let views: HashMap<String, TensorView<'_>> = bufs
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        let bytes = safetensors::serialize(&views, None).unwrap();
        let ck = import_safetensors(&bytes, Architecture::TinyCnn, DEFAULT_BN_EPS, "x").unwrap();
        assert_eq!(ck.meta.provenance, Provenance::ImagenetImported);
        assert_eq!(ck.group("backbone").unwrap().digest(), fe.digest());
    }

    #[test]
    fn batch_norm_statistics_are_folded() {
        let fe = FeatureExtractor::new(Architecture::EfficientNetB1, 1);
        let mut bufs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for p in fe.params().iter() {
            if let Some(base) = p.name.strip_suffix(".scale") {
                let c = p.shape[0];
                bufs.push((format!("{base}.weight"), vec![c], f32_bytes(&vec![2.0; c])));
                bufs.push((format!("{base}.bias"), vec![c], f32_bytes(&vec![1.0; c])));
                bufs.push((format!("{base}.running_mean"), vec![c], f32_bytes(&vec![0.5; c])));
                bufs.push((format!("{base}.running_var"), vec![c], f32_bytes(&vec![4.0 - 1e-3; c])));
            } else if !p.name.ends_with(".shift") {
                bufs.push((p.name.clone(), p.shape.clone(), f32_bytes(&p.data)));
            }
        }
        let views: HashMap<String, TensorView<'_>> = bufs
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        let bytes = safetensors::serialize(&views, None).unwrap();
        let ck = import_safetensors(&bytes, Architecture::EfficientNetB1, 1e-3, "x").unwrap();
        let g = ck.group("backbone").unwrap();
        let scale = g.by_name("stem.bn.scale").unwrap();
        let shift = g.by_name("stem.bn.shift").unwrap();
        assert!(scale.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(shift.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn missing_tensor_is_named() {
        let views: HashMap<String, TensorView<'_>> = HashMap::new();
        let bytes = safetensors::serialize(&views, None).unwrap();
        let err = import_safetensors(&bytes, Architecture::TinyCnn, DEFAULT_BN_EPS, "x").unwrap_err();
        assert!(err.to_string().contains("conv1.weight"), "{err}");
    }
}
