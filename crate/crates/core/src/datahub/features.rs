//! `QMFS` feature container: magic, u32 sample count, then per sample a
//! length-prefixed id, u8 rank, u32 extents and an f32 payload.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio;
use crate::numkernel::io::{read_payload, read_shape, Reader};
use crate::numkernel::{DType, Tensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"QMFS";

/// Precomputed encoder features keyed by opaque sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let fs = Self { ids, tensors };
        fs.validate()?;
        Ok(fs)
    }

    /// Checks matching lengths, unique ids and a uniform feature_dim and rank.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.tensors.len() {
            return Err(Error::Integrity(format!(
                "{} ids for {} tensors",
                self.ids.len(),
                self.tensors.len()
            )));
        }
        let mut seen = HashMap::new();
        for (i, id) in self.ids.iter().enumerate() {
            if let Some(j) = seen.insert(id.as_str(), i) {
                return Err(Error::Integrity(format!("sample id {id} appears at {j} and {i}")));
            }
        }
        if let Some(first) = self.tensors.first() {
            for (id, t) in self.ids.iter().zip(&self.tensors) {
                if t.last_dim() != first.last_dim() || t.rank() != first.rank() {
                    return Err(Error::Integrity(format!(
                        "sample {id} has shape {:?}, expected rank {} with feature_dim {}",
                        t.shape(),
                        first.rank(),
                        first.last_dim()
                    )));
                }
                if !(2..=3).contains(&t.rank()) {
                    return Err(Error::Integrity(format!("sample {id} has rank {}", t.rank())));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.tensors.first().map(|t| t.last_dim())
    }

    /// True when samples are `[T × n_patches × feature_dim]`.
    pub fn is_sequence(&self) -> bool {
        self.tensors.first().is_some_and(|t| t.rank() == 3)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

pub fn encode_features(fs: &FeatureSet) -> Result<Vec<u8>> {
    fs.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fs.len() as u32).to_le_bytes());
    for (id, t) in fs.ids.iter().zip(&fs.tensors) {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {magic:?}")));
    }
    let n = r.u32()? as usize;
    let mut ids = Vec::with_capacity(n.min(1 << 16));
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("sample id is not UTF-8: {e}")))?
            .to_owned();
        let shape = read_shape(&mut r)?;
        tensors.push(read_payload(&mut r, &shape, DType::F32)?);
        ids.push(id);
    }
    if !r.is_at_end() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n} samples",
            bytes.len() - r.position()
        )));
    }
    let fs = FeatureSet { ids, tensors };
    fs.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(fs)
}

pub fn save_features(fs: &FeatureSet, path: &Path) -> Result<()> {
    fsio::write(path, &encode_features(fs)?)
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    decode_features(&fsio::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            vals in prop::collection::vec(-1e6f32..1e6, 1..4),
            patches in 1usize..4,
            frames in 0usize..3,
        ) {
            let dim = vals.len();
            let shape: Vec<usize> = if frames == 0 { vec![patches, dim] } else { vec![frames, patches, dim] };
            let n: usize = shape.iter().product();
            let tensors: Vec<Tensor<f32>> = (0..3)
                .map(|k| {
                    let data = (0..n).map(|i| vals[i % dim] * (k as f32 + 0.5)).collect();
                    Tensor::new(&shape, data).unwrap()
                })
                .collect();
            let fs = FeatureSet::new(vec!["a".into(), "β".into(), "c c".into()], tensors).unwrap();
            let back = decode_features(&encode_features(&fs).unwrap()).unwrap();
            prop_assert_eq!(back.ids.clone(), fs.ids.clone());
            for (x, y) in back.tensors.iter().zip(&fs.tensors) {
                prop_assert!(x.bit_eq(y));
            }
        }
    }

    #[test]
    fn empty_and_truncated_are_format_errors() {
        assert!(matches!(decode_features(&[]), Err(Error::Format(_))));
        let fs = FeatureSet::new(vec!["s".into()], vec![Tensor::zeros(&[2, 3])]).unwrap();
        let bytes = encode_features(&fs).unwrap();
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn mixed_feature_dim_is_rejected_on_save() {
        let fs = FeatureSet {
            ids: vec!["a".into(), "b".into()],
            tensors: vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 4])],
        };
        let dir = tempfile::tempdir().unwrap();
        let r = save_features(&fs, &dir.path().join("f.qmfs"));
        assert!(matches!(r, Err(Error::Integrity(_))));
    }
}
