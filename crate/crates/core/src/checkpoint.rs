//! Versioned model files.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every parameter
//! as raw little-endian floats in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::TableCodec;
use crate::error::{Error, Result};
use crate::masking::TrainConfig;
use crate::model::{FieldSpec, ModelConfig, TabMtModel};
use crate::numerics::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"TABMTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    fields: Vec<FieldSpec>,
    codec: TableCodec,
    step: u64,
    seed: u64,
    train: Option<TrainConfig>,
    params: Vec<ParamEntry>,
}

/// A trained model together with everything needed to use it on raw data.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: TabMtModel<T>,
    pub codec: TableCodec,
    /// Optimizer steps taken.
    pub step: u64,
    /// Seed the run started from.
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

fn dtype<T: Real>() -> &'static str {
    match T::BYTES {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: TabMtModel<T>, codec: TableCodec, step: u64, seed: u64) -> Result<Self> {
        if model.cardinalities() != codec.cardinalities() {
            return Err(Error::Checkpoint("model fields do not match the codec".into()));
        }
        Ok(Checkpoint {
            model,
            codec,
            step,
            seed,
            train: None,
        })
    }

    pub fn with_train_config(mut self, train: TrainConfig) -> Self {
        self.train = Some(train);
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            dtype: dtype::<T>().into(),
            model: *self.model.config(),
            fields: self.model.fields().to_vec(),
            codec: self.codec.clone(),
            step: self.step,
            seed: self.seed,
            train: self.train,
            params: params
                .ids()
                .map(|id| ParamEntry {
                    name: params.name(id).to_string(),
                    shape: params.get(id).shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + params.numel() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in params.tensors() {
            T::to_le_bytes_vec(t.data(), &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.dtype != dtype::<T>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                header.dtype,
                dtype::<T>()
            )));
        }
        let mut blob = &body[len..];
        let mut params = ParamStore::new();
        for e in &header.params {
            let n = e.shape[0] * e.shape[1] * T::BYTES;
            if blob.len() < n {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", e.name)));
            }
            let data = T::from_le_bytes_slice(&blob[..n]);
            params.add(e.name.clone(), Tensor::new(e.shape[0], e.shape[1], data)?);
            blob = &blob[n..];
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        let model = TabMtModel::from_params(header.model, header.fields, params)?;
        let mut ckpt = Checkpoint::new(model, header.codec, header.step, header.seed)?;
        ckpt.train = header.train;
        Ok(ckpt)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        writer
            .write_all(&self.to_bytes()?)
            .map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn read<R: Read>(mut reader: R) -> Result<Self> {
        let mut bytes = Vec::new();
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
