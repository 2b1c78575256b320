//! JSON checkpoints: the frozen base and the trained head/adapters live in
//! separate files.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{BaseLayer, BaseModel, Model, TrainableParams};
use super::nf4::{dequantize_nf4, QuantizedWeight};
use super::{ModelConfig, NetError};
use crate::session::write_atomic;

pub const BASE_FILE: &str = "base.json";
pub const ADAPTER_FILE: &str = "adapter.json";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint content: {0}")]
    Content(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    fn of(a: ndarray::ArrayViewD<'_, f32>) -> Self {
        Self { shape: a.shape().to_vec(), data: a.iter().copied().collect() }
    }

    fn into_array(self, name: &str, expect: &[usize]) -> Result<ArrayD<f32>, CheckpointError> {
        if self.shape != expect {
            return Err(CheckpointError::Content(format!("{name}: shape {:?}, expected {expect:?}", self.shape)));
        }
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data).map_err(|e| CheckpointError::Content(format!("{name}: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseFile {
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    nf4: BTreeMap<String, QuantizedWeight>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterFile {
    version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn base_entries(base: &BaseModel<f32>) -> Vec<(String, ndarray::ArrayViewD<'_, f32>)> {
    let mut out = vec![
        ("tok_emb".to_string(), base.tok_emb.view().into_dyn()),
        ("type_emb".to_string(), base.type_emb.view().into_dyn()),
        ("pos_emb".to_string(), base.pos_emb.view().into_dyn()),
        ("audio_proj".to_string(), base.audio_proj.view().into_dyn()),
        ("audio_bias".to_string(), base.audio_bias.view().into_dyn()),
    ];
    for (i, l) in base.layers.iter().enumerate() {
        let vecs: [(&str, &Array1<f32>); 6] = [
            ("ln1_g", &l.ln1_g),
            ("ln1_b", &l.ln1_b),
            ("ln2_g", &l.ln2_g),
            ("ln2_b", &l.ln2_b),
            ("b1", &l.b1),
            ("b2", &l.b2),
        ];
        for (n, v) in vecs {
            out.push((format!("layers.{i}.{n}"), v.view().into_dyn()));
        }
        if base.quantized.is_none() {
            for n in BaseLayer::<f32>::QUANTIZED {
                out.push((format!("layers.{i}.{n}"), l.matrix(n).view().into_dyn()));
            }
        }
    }
    out
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let mut nf4 = BTreeMap::new();
    if let Some(q) = &model.base.quantized {
        for (i, layer) in q.iter().enumerate() {
            for (n, w) in BaseLayer::<f32>::QUANTIZED.iter().zip(layer) {
                nf4.insert(format!("layers.{i}.{n}"), w.clone());
            }
        }
    }
    let base = BaseFile {
        version: VERSION,
        config: model.cfg.clone(),
        tensors: base_entries(&model.base).into_iter().map(|(n, a)| (n, Tensor::of(a))).collect(),
        nf4,
    };
    let adapter = AdapterFile {
        version: VERSION,
        config: model.cfg.clone(),
        tensors: model.params.named_tensors().into_iter().map(|(n, a)| (n, Tensor::of(a))).collect(),
    };
    write_atomic(&dir.join(BASE_FILE), &serde_json::to_vec(&base)?)?;
    write_atomic(&dir.join(ADAPTER_FILE), &serde_json::to_vec(&adapter)?)?;
    Ok(())
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<ArrayD<f32>, CheckpointError> {
    tensors
        .remove(name)
        .ok_or_else(|| CheckpointError::Content(format!("missing tensor {name}")))?
        .into_array(name, shape)
}

fn to2(a: ArrayD<f32>) -> Array2<f32> {
    a.into_dimensionality().expect("shape checked")
}

fn to1(a: ArrayD<f32>) -> Array1<f32> {
    a.into_dimensionality().expect("shape checked")
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>, CheckpointError> {
    let base_file: BaseFile = serde_json::from_slice(&std::fs::read(dir.join(BASE_FILE))?)?;
    let adapter_file: AdapterFile = serde_json::from_slice(&std::fs::read(dir.join(ADAPTER_FILE))?)?;
    if base_file.version != VERSION || adapter_file.version != VERSION {
        return Err(CheckpointError::Content("unsupported checkpoint version".into()));
    }
    let cfg = adapter_file.config;
    let bc = &base_file.config;
    if (bc.d_model, bc.n_layers, bc.n_heads, bc.vocab_size, bc.n_audio_tokens, bc.ffn_mult)
        != (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.vocab_size, cfg.n_audio_tokens, cfg.ffn_mult)
    {
        return Err(CheckpointError::Content("adapter config does not match the base".into()));
    }
    cfg.validate()?;

    // shapes come from a freshly built model of the same config
    let mut base = BaseModel::init(&ModelConfig { quantize_base: false, ..cfg.clone() });
    let mut t = base_file.tensors;
    base.tok_emb = to2(take(&mut t, "tok_emb", base.tok_emb.shape())?);
    base.type_emb = to2(take(&mut t, "type_emb", base.type_emb.shape())?);
    base.pos_emb = to2(take(&mut t, "pos_emb", base.pos_emb.shape())?);
    base.audio_proj = to2(take(&mut t, "audio_proj", base.audio_proj.shape())?);
    base.audio_bias = to1(take(&mut t, "audio_bias", base.audio_bias.shape())?);
    let mut nf4 = base_file.nf4;
    let quantized = !nf4.is_empty();
    let mut codes = Vec::new();
    for (i, layer) in base.layers.iter_mut().enumerate() {
        for n in ["ln1_g", "ln1_b", "ln2_g", "ln2_b", "b1", "b2"] {
            let v = layer.vector_mut(n).expect("vector name");
            *v = to1(take(&mut t, &format!("layers.{i}.{n}"), &[v.len()])?);
        }
        let mut layer_codes = Vec::new();
        for n in BaseLayer::<f32>::QUANTIZED {
            let name = format!("layers.{i}.{n}");
            let shape = layer.matrix(n).shape().to_vec();
            let m = if quantized {
                let q = nf4.remove(&name).ok_or_else(|| CheckpointError::Content(format!("missing nf4 {name}")))?;
                if [q.rows, q.cols] != shape[..] || q.codes.len() != q.len().div_ceil(2) {
                    return Err(CheckpointError::Content(format!("{name}: bad nf4 shape")));
                }
                let m = dequantize_nf4(&q);
                layer_codes.push(q);
                m
            } else {
                to2(take(&mut t, &name, &shape)?)
            };
            *layer.matrix_mut(n) = m;
        }
        codes.push(layer_codes);
    }
    if quantized {
        base.quantized = Some(codes);
    }
    if let Some(extra) = t.keys().chain(nf4.keys()).next() {
        return Err(CheckpointError::Content(format!("unexpected tensor {extra}")));
    }

    let mut params = TrainableParams::<f32>::init(&cfg, 0);
    let names: Vec<(String, Vec<usize>)> =
        params.named_tensors().into_iter().map(|(n, a)| (n, a.shape().to_vec())).collect();
    let mut at = adapter_file.tensors;
    for ((name, shape), mut dst) in names.iter().zip(params.tensors_mut()) {
        dst.assign(&take(&mut at, name, shape)?);
    }
    if let Some(extra) = at.keys().next() {
        return Err(CheckpointError::Content(format!("unexpected tensor {extra}")));
    }
    Ok(Model::from_parts(cfg, base, params)?)
}
