//! Directory checkpoints: `manifest.json` (config plus one entry per
//! parameter) and `tensors.bin` (concatenated `QMTN` tensors).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, ParamKind};
use crate::error::{Error, Result};
use crate::fsio;
use crate::numkernel::io::{decode_tensor_at, encode_tensor, encoded_len};
use crate::numkernel::{DType, Scalar};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, dir: &Path) -> Result<()> {
    let mut bin = Vec::new();
    let mut tensors = Vec::with_capacity(params.params().len());
    for p in params.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            offset: bin.len(),
            shape: p.tensor.shape().to_vec(),
            dtype: T::DTYPE,
        });
        bin.reserve(encoded_len(&p.tensor));
        encode_tensor(&p.tensor, &mut bin);
    }
    let manifest = Manifest {
        config: params.config.clone(),
        tensors,
    };
    fsio::write(&dir.join(TENSORS_FILE), &bin)?;
    fsio::write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    fsio::read_json(&dir.join(MANIFEST_FILE))
}

/// Loads a checkpoint, converting stored values to `T`.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<ModelParams<T>> {
    let manifest = read_manifest(dir)?;
    let bin = fsio::read(&dir.join(TENSORS_FILE))?;
    let named = manifest
        .tensors
        .iter()
        .map(|e| {
            let t = decode_tensor_at::<T>(&bin, e.offset)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "{}: manifest shape {:?}, stored {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            Ok((e.name.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_named(&manifest.config, named)
}
