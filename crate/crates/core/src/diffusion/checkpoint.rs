//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! raw little-endian `f32` tensors in header order, then a CRC32 of all
//! preceding bytes. Every integer is little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::train::{LossTrace, TrainConfig};
use crate::codec::{codec_from_parts, CodecConfig};
use crate::error::{Result, VadeError};
use crate::image::hex_string;
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const MAGIC: &[u8; 8] = b"VADECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CodecHeader {
    config: CodecConfig,
    latent_scale: f64,
    trained: bool,
    tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocab,
    train: Option<TrainConfig>,
    trace: Option<LossTrace>,
    tensors: Vec<TensorMeta>,
    codec: CodecHeader,
}

/// Everything needed to reproduce inference, plus training provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub trace: Option<LossTrace>,
}

fn metas(p: &ParamSet<f32>) -> Vec<TensorMeta> {
    p.names()
        .iter()
        .zip(p.tensors())
        .map(|(n, t)| TensorMeta {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn put_tensors(out: &mut Vec<u8>, p: &ParamSet<f32>) {
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn take_tensors(bytes: &[u8], pos: &mut usize, metas: &[TensorMeta]) -> Result<ParamSet<f32>> {
    let mut p = ParamSet::default();
    for m in metas {
        let n: usize = m.shape.iter().product();
        let end = *pos + 4 * n;
        let raw = bytes
            .get(*pos..end)
            .ok_or_else(|| VadeError::Checkpoint(format!("payload truncated at {}", m.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.add(m.name.clone(), Tensor::new(m.shape.clone(), data)?);
        *pos = end;
    }
    Ok(p)
}

fn check_layout(expected: &ParamSet<f32>, got: &ParamSet<f32>, what: &str) -> Result<()> {
    if expected.names() != got.names()
        || expected
            .tensors()
            .iter()
            .zip(got.tensors())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(VadeError::Checkpoint(format!(
            "{what} tensors do not match the stored configuration"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            train: None,
            trace: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            model: m.config.clone(),
            vocab: m.vocab.clone(),
            train: self.train.clone(),
            trace: self.trace.clone(),
            tensors: metas(&m.params),
            codec: CodecHeader {
                config: m.codec.config.clone(),
                latent_scale: m.codec.latent_scale,
                trained: m.codec.trained,
                tensors: metas(&m.codec.params),
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            24 + json.len() + 4 * (m.params.num_scalars() + m.codec.params.num_scalars()),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        put_tensors(&mut out, &m.params);
        put_tensors(&mut out, &m.codec.params);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(VadeError::Checkpoint("not a checkpoint file".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([footer[0], footer[1], footer[2], footer[3]]);
        if crc32fast::hash(body) != stored {
            return Err(VadeError::Checkpoint("CRC mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(VadeError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| VadeError::Checkpoint("header truncated".into()))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut pos = hend;
        let params = take_tensors(body, &mut pos, &header.tensors)?;
        let codec_params = take_tensors(body, &mut pos, &header.codec.tensors)?;
        if pos != body.len() {
            return Err(VadeError::Checkpoint(format!(
                "{} trailing payload bytes",
                body.len() - pos
            )));
        }
        let codec = codec_from_parts(
            header.codec.config,
            codec_params,
            header.codec.latent_scale,
            header.codec.trained,
        )?;
        let mut model = Model::new(header.model, header.vocab, codec)?;
        check_layout(&model.params, &params, "model")?;
        model.params = params;
        Ok(Checkpoint {
            model,
            train: header.train,
            trace: header.trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| VadeError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| VadeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VadeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying this checkpoint.
    pub fn id(&self) -> Result<String> {
        Ok(hex_string(&Sha256::digest(self.to_bytes()?))[..16].to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Codec;

    fn tiny() -> Checkpoint {
        let m = Model::new(ModelConfig::tiny(), Vocab::default(), Codec::identity(8)).unwrap();
        let mut c = Checkpoint::new(m);
        c.trace = Some(LossTrace {
            stages: vec![],
            losses: vec![0.1, 0.2, 1.0 / 3.0],
        });
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = tiny().to_bytes().unwrap();
        let b = Checkpoint::from_bytes(&a).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_is_detected() {
        let mut a = tiny().to_bytes().unwrap();
        let k = a.len() - 10;
        a[k] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&a),
            Err(VadeError::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(b"VADECKPT").is_err());
        assert!(Checkpoint::from_bytes(&a[..30]).is_err());
    }
}
