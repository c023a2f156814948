//! Weight container, config hashing, prompt parsing and trace output.
//!
//! Container layout: `u64` little-endian manifest length, UTF-8 JSON manifest,
//! then the blob of little-endian `f32` values.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::TraceRecord;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelWeights};

pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
    pub dtype: String,
    /// Hex SHA-256 of the tensor bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightContainer {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl WeightContainer {
    /// Packs named tensors back to back, in the given order.
    pub fn pack<'a>(
        config: Option<ModelConfig>,
        tensors: impl IntoIterator<Item = (String, Vec<usize>, &'a [f32])>,
    ) -> Self {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in tensors {
            let bytes = f32_bytes(data);
            entries.push(TensorEntry {
                name,
                shape,
                offset: blob.len(),
                length: bytes.len(),
                dtype: DTYPE.into(),
                sha256: Some(sha_hex(&bytes)),
            });
            blob.extend_from_slice(&bytes);
        }
        WeightContainer {
            manifest: Manifest {
                config,
                tensors: entries,
            },
            blob,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(8 + manifest.len() + self.blob.len());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    /// Parses and validates a container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("<manifest>", "missing length prefix"));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("<manifest>", "manifest runs past end of file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..end])
            .map_err(|e| Error::format("<manifest>", e.to_string()))?;
        let c = WeightContainer {
            manifest,
            blob: bytes[end..].to_vec(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut cursor = 0usize;
        for t in &self.manifest.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::format(&t.name, "duplicate tensor name"));
            }
            if t.dtype != DTYPE {
                return Err(Error::format(
                    &t.name,
                    format!("unsupported dtype `{}`", t.dtype),
                ));
            }
            if t.offset < cursor {
                return Err(Error::format(&t.name, "offset overlaps previous tensor"));
            }
            let numel: usize = t.shape.iter().product();
            if t.length != numel * 4 {
                return Err(Error::format(
                    &t.name,
                    format!("length {} does not match shape {:?}", t.length, t.shape),
                ));
            }
            let end = t.offset + t.length;
            if end > self.blob.len() {
                return Err(Error::format(
                    &t.name,
                    format!("blob truncated: needs {end} bytes, has {}", self.blob.len()),
                ));
            }
            if let Some(sum) = &t.sha256 {
                if *sum != sha_hex(&self.blob[t.offset..end]) {
                    return Err(Error::format(&t.name, "checksum mismatch"));
                }
            }
            cursor = end;
        }
        let total: usize = self.manifest.tensors.iter().map(|t| t.length).sum();
        if total != self.blob.len() {
            return Err(Error::format(
                "<blob>",
                format!("blob has {} bytes, manifest lists {total}", self.blob.len()),
            ));
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(name, "not in manifest"))
    }

    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        let t = self.entry(name)?;
        Ok(self.blob[t.offset..t.offset + t.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// A rank-2 tensor as a matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.entry(name)?;
        match t.shape[..] {
            [r, c] => Matrix::new(r, c, self.values(name)?)
                .map_err(|e| Error::format(name, e.to_string())),
            _ => Err(Error::format(
                name,
                format!("shape {:?} is not a matrix", t.shape),
            )),
        }
    }

    pub fn to_weights(&self) -> Result<ModelWeights> {
        let config = self
            .manifest
            .config
            .clone()
            .ok_or_else(|| Error::format("<manifest>", "no model config"))?;
        let expected = ModelWeights::expected_shapes(&config);
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = self.entry(name)?;
            if &t.shape != shape {
                return Err(Error::format(
                    name,
                    format!("shape {:?}, config expects {shape:?}", t.shape),
                ));
            }
            tensors.push((name.clone(), self.values(name)?));
        }
        if self.manifest.tensors.len() != expected.len() {
            return Err(Error::format("<manifest>", "unexpected extra tensors"));
        }
        ModelWeights::from_tensors(config, tensors)
    }
}

pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    WeightContainer::pack(Some(w.config().clone()), w.named_tensors()).to_bytes()
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    WeightContainer::from_bytes(bytes)?.to_weights()
}

pub fn save_weights(path: impl AsRef<Path>, w: &ModelWeights) -> Result<()> {
    std::fs::write(path, encode_weights(w)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    decode_weights(&std::fs::read(path)?)
}

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    sha_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// Whitespace-separated token ids.
pub fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Input(format!("`{t}` is not a token id")))
        })
        .collect()
}

/// One JSON object per line.
pub fn write_trace(mut w: impl Write, trace: &[TraceRecord]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    #[test]
    fn round_trip_is_byte_exact() {
        let w = init_weights(&ModelConfig::tiny()).unwrap();
        let a = encode_weights(&w).unwrap();
        let w2 = decode_weights(&a).unwrap();
        assert_eq!(w2.config(), w.config());
        assert_eq!(w2.layers[1].w_down, w.layers[1].w_down);
        assert_eq!(encode_weights(&w2).unwrap(), a);
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let w = init_weights(&ModelConfig::tiny()).unwrap();
        let mut a = encode_weights(&w).unwrap();
        a.truncate(a.len() - 10);
        match decode_weights(&a) {
            Err(Error::Format { tensor, .. }) => assert_eq!(tensor, "lm_head"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let w = init_weights(&ModelConfig::tiny()).unwrap();
        let mut a = encode_weights(&w).unwrap();
        let n = a.len();
        a[n - 1] ^= 0x40;
        match decode_weights(&a) {
            Err(Error::Format { tensor, reason }) => {
                assert_eq!(tensor, "lm_head");
                assert!(reason.contains("checksum"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn hand_built_two_tensor_container() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [-0.5f32, 0.25];
        let manifest = r#"{"tensors":[{"name":"a","shape":[2,3],"offset":0,"length":24,"dtype":"f32le"},{"name":"b","shape":[1,2],"offset":24,"length":8,"dtype":"f32le"}]}"#;
        let mut bytes = (manifest.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(manifest.as_bytes());
        for x in a.iter().chain(&b) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let c = WeightContainer::from_bytes(&bytes).unwrap();
        assert_eq!(
            c.matrix("a").unwrap(),
            Matrix::new(2, 3, a.to_vec()).unwrap()
        );
        assert_eq!(
            c.matrix("b").unwrap(),
            Matrix::new(1, 2, b.to_vec()).unwrap()
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let x = [0.0f32; 2];
        let c = WeightContainer::pack(
            None,
            vec![
                ("t".to_string(), vec![2], &x[..]),
                ("t".to_string(), vec![2], &x[..]),
            ],
        );
        assert!(matches!(
            WeightContainer::from_bytes(&c.to_bytes().unwrap()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn shape_disagreement_names_tensor() {
        let w = init_weights(&ModelConfig::tiny()).unwrap();
        let mut c = WeightContainer::pack(Some(w.config().clone()), w.named_tensors());
        c.manifest.config.as_mut().unwrap().d_ff = 32;
        match c.to_weights() {
            Err(Error::Format { tensor, .. }) => assert_eq!(tensor, "layers.0.w_gate"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn tokens_parse() {
        assert_eq!(parse_tokens(" 1 2\n3 ").unwrap(), vec![1, 2, 3]);
        assert!(matches!(parse_tokens("1 x"), Err(Error::Input(_))));
    }
}
