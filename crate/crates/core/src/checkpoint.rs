//! safetensors persistence for parameter stores.
//!
//! Tensors are stored under `"{prefix}{name}"` in the scalar type they were
//! saved with; loading into the other float width casts. String metadata
//! rides along in the safetensors header.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype as StDtype, SafeTensors};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PiClick};
use crate::nn::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MODEL_CONFIG_KEY: &str = "piclick.model_config";
const PARAM_PREFIX: &str = "param/";

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

fn st_dtype(d: Dtype) -> StDtype {
    match d {
        Dtype::F32 => StDtype::F32,
        Dtype::F64 => StDtype::F64,
    }
}

/// Tensors plus header metadata, as read from or written to disk.
#[derive(Debug, Clone, Default)]
pub struct TensorFile<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub metadata: HashMap<String, String>,
}

impl<T: Scalar> TensorFile<T> {
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, v) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), v.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every tensor of `store` from `"{prefix}{name}"` entries.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let t = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            let id = store.id(&name).expect("name from store");
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
                for v in t.data() {
                    v.write_le(&mut bytes);
                }
                (n.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views = buffers
            .iter()
            .map(|(n, s, b)| Ok((n.as_str(), TensorView::new(st_dtype(T::DTYPE), s.clone(), b).map_err(st_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = Some(self.metadata.clone());
        safetensors::serialize(views, &meta).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut tensors = Vec::new();
        for (name, view) in st.tensors() {
            let data: Vec<T> = match view.dtype() {
                StDtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| T::lit(f32::read_le(c) as f64))
                    .collect(),
                StDtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| T::lit(f64::read_le(c)))
                    .collect(),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has unsupported dtype {other:?}"
                    )))
                }
            };
            tensors.push((name, Tensor::new(view.shape().to_vec(), data)));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            tensors,
            metadata: meta.metadata().clone().unwrap_or_default(),
        })
    }

    /// Writes through a sibling temp file and renames, so a failed write never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("safetensors.tmp");
        fs::write(&tmp, &bytes).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Scalar> PiClick<T> {
    /// Parameters and config only.
    pub fn to_tensor_file(&self) -> Result<TensorFile<T>> {
        let mut file = TensorFile::default();
        file.push_store(PARAM_PREFIX, self.params());
        file.metadata.insert(
            MODEL_CONFIG_KEY.into(),
            serde_json::to_string(self.config()).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile<T>) -> Result<Self> {
        let raw = file
            .metadata
            .get(MODEL_CONFIG_KEY)
            .ok_or_else(|| Error::Checkpoint("no model config in checkpoint".into()))?;
        let config: ModelConfig =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = PiClick::new(config)?;
        file.fill_store(PARAM_PREFIX, model.params_mut())?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}
