//! Weight checkpoints.
//!
//! ```text
//! magic    8 bytes  "HYPCKPT1"
//! schema   u32 LE   CHECKPOINT_SCHEMA
//! hlen     u64 LE   length of the JSON header
//! header   JSON     { spec (text form), dtype, meta, params: [{name, shape}] }
//! data     every parameter in header order, little-endian, f32 or f64
//! ```
//!
//! Writes go to a temporary sibling first and are renamed into place.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{build_model_with, Model, ModelError, ModelSpec};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MAGIC: &[u8; 8] = b"HYPCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: String,
    dtype: String,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub dtype: DType,
    /// Free-form training metadata (epoch, validation score, ...).
    pub meta: serde_json::Value,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    /// Parameter values widened to f64 (exact for f32 weights).
    pub values: Vec<Vec<f64>>,
}

fn dtype_name(d: DType) -> Result<&'static str, ModelError> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(ModelError::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: serde_json::Value) -> Result<Self, ModelError> {
        dtype_name(model.dtype)?;
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for p in model.params.params() {
            names.push(p.name.clone());
            shapes.push(p.var.dims().to_vec());
            values.push(p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(Checkpoint {
            spec: model.spec.clone(),
            dtype: model.dtype,
            meta,
            names,
            shapes,
            values,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = Header {
            spec: self.spec.to_text(),
            dtype: dtype_name(self.dtype)?.to_string(),
            meta: self.meta.clone(),
            params: self
                .names
                .iter()
                .zip(&self.shapes)
                .map(|(n, s)| ParamEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.values {
            for &x in v {
                match self.dtype {
                    DType::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let schema = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if schema != CHECKPOINT_SCHEMA {
            return Err(bad(format!("schema {schema}, this build reads {CHECKPOINT_SCHEMA}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let (dtype, width) = match header.dtype.as_str() {
            "f32" => (DType::F32, 4),
            "f64" => (DType::F64, 8),
            other => return Err(bad(format!("unknown dtype {other:?}"))),
        };
        let mut at = 20 + hlen;
        let mut values = Vec::new();
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let raw = bytes
                .get(at..at + n * width)
                .ok_or_else(|| bad(format!("truncated data for {}", p.name)))?;
            values.push(if width == 4 {
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            } else {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            });
            at += n * width;
        }
        if at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Checkpoint {
            spec: ModelSpec::from_text(&header.spec)?,
            dtype,
            meta: header.meta,
            names: header.params.iter().map(|p| p.name.clone()).collect(),
            shapes: header.params.into_iter().map(|p| p.shape).collect(),
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copy the stored weights into a model built from the same spec.
    pub fn restore(&self, model: &Model) -> Result<(), ModelError> {
        let params = model.params.params();
        if params.len() != self.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.names.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.name != self.names[i] || p.var.dims() != self.shapes[i].as_slice() {
                return Err(ModelError::Checkpoint(format!("parameter mismatch at {}", p.name)));
            }
            let t = Tensor::from_vec(self.values[i].clone(), self.shapes[i].as_slice(), &Device::Cpu)?
                .to_dtype(model.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model, ModelError> {
        let model = build_model_with(&self.spec, 0, self.dtype)?;
        self.restore(&model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, EncoderKind, ModelDims, PredictorKind};
    use crate::signal::Modality;

    #[test]
    fn round_trip_restores_outputs() {
        let spec = ModelSpec::new(Modality::Ts, EncoderKind::Cnn, PredictorKind::S4, 1, 1, 1)
            .with_dims(ModelDims::uniform(8, 1, 2));
        let m = build_model(&spec, 3).unwrap();
        let ck = Checkpoint::from_model(&m, serde_json::json!({"epoch_index": 4, "val_macro_f1": 0.5})).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model().unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 1, 3000), &Device::Cpu).unwrap();
        let a = m.predict_proba(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m2.predict_proba(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_other_schema_and_garbage() {
        let spec = ModelSpec::new(Modality::Ts, EncoderKind::None, PredictorKind::Lstm, 1, 1, 1)
            .with_dims(ModelDims::uniform(4, 1, 2));
        let m = build_model(&spec, 3).unwrap();
        let mut b = Checkpoint::from_model(&m, serde_json::Value::Null).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b[8] = 99;
        assert!(Checkpoint::from_bytes(&b).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
