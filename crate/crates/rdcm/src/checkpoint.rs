//! `params.bin` holds every parameter as consecutive little-endian `f64`
//! values in registration order. `params.json` records the model shape and,
//! per tensor, its name, shape and offset (in values) into the dump.

use std::fs;
use std::path::Path;

use rdcm_core::data::TextLayout;
use rdcm_core::layers::TextCnnConfig;
use rdcm_core::model::{ModelConfig, RdcmModel};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_json, TextDim};
use crate::error::{Result, RunError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub text_dim: TextDim,
    pub vis_dim: usize,
    pub latent_dim: usize,
    pub kernel_widths: Option<Vec<usize>>,
    pub filters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamIndex {
    pub model: ModelShape,
    pub total: usize,
    pub tensors: Vec<TensorEntry>,
}

impl ModelShape {
    fn of(c: &ModelConfig) -> Self {
        let text_dim = match c.text {
            TextLayout::Pooled { dim } => TextDim::Pooled(dim),
            TextLayout::Sequence { seq_len, emb_dim } => TextDim::Sequence { seq_len, emb_dim },
        };
        Self {
            text_dim,
            vis_dim: c.vis_dim,
            latent_dim: c.latent_dim,
            kernel_widths: c.textcnn.as_ref().map(|t| t.kernel_widths.clone()),
            filters: c.textcnn.as_ref().map(|t| t.filters),
        }
    }

    fn config(&self) -> ModelConfig {
        let text = match self.text_dim {
            TextDim::Pooled(dim) => TextLayout::Pooled { dim },
            TextDim::Sequence { seq_len, emb_dim } => TextLayout::Sequence { seq_len, emb_dim },
        };
        let mut c = ModelConfig::new(text, self.vis_dim).with_latent_dim(self.latent_dim);
        if let (TextLayout::Sequence { emb_dim, .. }, Some(widths), Some(filters)) =
            (text, &self.kernel_widths, self.filters)
        {
            c.textcnn = Some(TextCnnConfig {
                emb_dim,
                kernel_widths: widths.clone(),
                filters,
            });
        }
        c
    }
}

pub fn save(model: &RdcmModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(RunError::io(dir))?;
    let mut bytes = Vec::with_capacity(model.params.numel() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join("params.bin");
    fs::write(&bin, bytes).map_err(RunError::io(&bin))?;
    let index = ParamIndex {
        model: ModelShape::of(&model.config),
        total: offset,
        tensors,
    };
    write_json(&dir.join("params.json"), &index)
}

/// Rebuilds a model from a directory written by [`save`].
pub fn load(dir: &Path) -> Result<RdcmModel> {
    let idx_path = dir.join("params.json");
    let raw = fs::read_to_string(&idx_path).map_err(RunError::io(&idx_path))?;
    let index: ParamIndex =
        serde_json::from_str(&raw).map_err(|e| RunError::Load(format!("{}: {e}", idx_path.display())))?;
    let bin = dir.join("params.bin");
    let bytes = fs::read(&bin).map_err(RunError::io(&bin))?;
    if bytes.len() != index.total * 8 {
        return Err(RunError::Load(format!(
            "{}: expected {} values, found {} bytes",
            bin.display(),
            index.total,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut model = RdcmModel::new(index.model.config(), 0)?;
    if model.params.len() != index.tensors.len() {
        return Err(RunError::Load(format!(
            "{}: {} tensors listed, model has {}",
            idx_path.display(),
            index.tensors.len(),
            model.params.len()
        )));
    }
    for t in &index.tensors {
        let id = model
            .params
            .find(&t.name)
            .ok_or_else(|| RunError::Load(format!("{}: unknown tensor {}", idx_path.display(), t.name)))?;
        let dst = model.params.value_mut(id);
        let n = dst.len();
        if dst.shape() != t.shape.as_slice() || t.offset + n > values.len() {
            return Err(RunError::Load(format!(
                "{}: tensor {} has shape {:?}, model expects {:?}",
                idx_path.display(),
                t.name,
                t.shape,
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(&values[t.offset..t.offset + n]);
    }
    Ok(model)
}
