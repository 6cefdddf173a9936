//! Model checkpoints as safetensors files.
//!
//! Tensor names are `param/<name>`, plus `adam_m/<name>` and `adam_v/<name>`
//! when optimizer moments are stored. The header metadata carries the schema
//! version, the dtype, the model config and (optionally) the training state,
//! the latter two as JSON strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::optim::AdamWState;

pub const SCHEMA_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub dtype: DType,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamWState>,
    pub train_state: Option<serde_json::Value>,
}

fn st_dtype(dtype: DType) -> Result<Dtype> {
    match dtype {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    /// Weights (and optionally optimizer moments) of `model`.
    pub fn of_model(model: &SegModel) -> Result<Self> {
        Ok(Self {
            model_config: model.config().clone(),
            dtype: model.dtype(),
            params: model.params().snapshot()?,
            optimizer: None,
            train_state: None,
        })
    }

    /// Rebuild a model with these weights.
    pub fn to_model(&self) -> Result<SegModel> {
        let model = SegModel::new(self.model_config.clone(), 0, self.dtype)?;
        model.params().load(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dtype = st_dtype(self.dtype)?;
        let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |prefix: &str, map: &BTreeMap<String, Tensor>| -> Result<()> {
            for (k, t) in map {
                let t = t.to_dtype(self.dtype)?;
                named.push((format!("{prefix}{k}"), t.dims().to_vec(), tensor_bytes(&t)?));
            }
            Ok(())
        };
        push(PARAM, &self.params)?;
        if let Some(opt) = &self.optimizer {
            push(MOMENT1, &opt.m)?;
            push(MOMENT2, &opt.v)?;
        }
        let views = named
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut meta = HashMap::new();
        meta.insert("schema_version".to_string(), SCHEMA_VERSION.to_string());
        meta.insert("dtype".to_string(), format!("{:?}", self.dtype).to_lowercase());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.model_config)?);
        if let Some(opt) = &self.optimizer {
            meta.insert("optimizer_step".to_string(), opt.step.to_string());
        }
        if let Some(state) = &self.train_state {
            meta.insert("train_state".to_string(), serde_json::to_string(state)?);
        }
        let bytes =
            safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;

        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let bad = |msg: String| Error::file(path, msg);
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).ok_or_else(|| bad(format!("checkpoint metadata lacks `{k}`")));

        let version: u32 = field("schema_version")?
            .parse()
            .map_err(|_| bad("unreadable schema_version".into()))?;
        if version != SCHEMA_VERSION {
            return Err(bad(format!(
                "checkpoint schema {version} is not supported (expected {SCHEMA_VERSION})"
            )));
        }
        let dtype = match field("dtype")?.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(bad(format!("unsupported dtype `{other}`"))),
        };
        let model_config: ModelConfig =
            serde_json::from_str(field("model_config")?).map_err(|e| bad(e.to_string()))?;
        let train_state = meta
            .get("train_state")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| bad(e.to_string()))?;

        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = tensor_from_view(&view)?;
            if let Some(k) = name.strip_prefix(PARAM) {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(MOMENT1) {
                m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(MOMENT2) {
                v.insert(k.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor `{name}`")));
            }
        }
        let optimizer = match meta.get("optimizer_step") {
            Some(step) => Some(AdamWState {
                step: step.parse().map_err(|_| bad("unreadable optimizer_step".into()))?,
                m,
                v,
            }),
            None => None,
        };
        Ok(Self {
            model_config,
            dtype,
            params,
            optimizer,
            train_state,
        })
    }
}
