//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic (8) · version u32 · kind u32 · steps u32 · beta_start f64 · beta_end f64 ·
//! metadata length u32 + JSON (sorted keys) · tensor count u32 ·
//! per tensor: name length u32 + UTF-8 · ndim u32 · dims u64… · f32 values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bench::{ClassifierConfig, IdentityClassifier};
use crate::codec::{CodecConfig, LatentCodec};
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::nn::ParamSet;
use crate::numerics::Tensor;
use crate::schedule::ScheduleParams;
use crate::textcond::{TextEncoder, TextEncoderConfig, Vocabulary};

pub const MAGIC: &[u8; 8] = b"STRYBOOK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("unknown model kind {0}")]
    UnknownKind(u32),
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    WrongKind {
        expected: ModelKind,
        found: ModelKind,
    },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Codec,
    Denoiser,
    Encoder,
    Classifier,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::Codec => 0,
            ModelKind::Denoiser => 1,
            ModelKind::Encoder => 2,
            ModelKind::Classifier => 3,
        }
    }

    fn from_code(c: u32) -> Result<Self, CheckpointError> {
        Ok(match c {
            0 => ModelKind::Codec,
            1 => ModelKind::Denoiser,
            2 => ModelKind::Encoder,
            3 => ModelKind::Classifier,
            other => return Err(CheckpointError::UnknownKind(other)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub schedule: ScheduleParams,
    pub metadata: Value,
    pub tensors: ParamSet,
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64(what)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.code().to_le_bytes());
        out.extend_from_slice(&(self.schedule.steps as u32).to_le_bytes());
        out.extend_from_slice(&self.schedule.beta_start.to_bits().to_le_bytes());
        out.extend_from_slice(&self.schedule.beta_end.to_bits().to_le_bytes());
        // serde_json maps are ordered by key, so this is canonical
        let meta = serde_json::to_vec(&self.metadata).expect("JSON value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader(bytes);
        if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let kind = ModelKind::from_code(r.u32("kind")?)?;
        let schedule = ScheduleParams {
            steps: r.u32("schedule")? as usize,
            beta_start: r.f64("schedule")?,
            beta_end: r.f64("schedule")?,
        };
        let n = r.u32("metadata")? as usize;
        let metadata: Value = serde_json::from_slice(r.take(n, "metadata")?)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let len = r.u32("tensor name")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("tensor dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| CheckpointError::Invalid(format!("{name}: {e}")))?;
            tensors.push(name, t);
        }
        if !r.0.is_empty() {
            return Err(CheckpointError::Invalid("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            schedule,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::WrongKind {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }

    fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T, CheckpointError> {
        serde_json::from_value(self.metadata["config"].clone())
            .map_err(|e| CheckpointError::Invalid(format!("config: {e}")))
    }
}

fn invalid(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Invalid(e.to_string())
}

/// `training` is free-form metadata stored next to the model config.
pub fn codec_checkpoint(
    codec: &LatentCodec,
    schedule: ScheduleParams,
    training: Value,
) -> Checkpoint {
    let mut tensors = codec.params().clone();
    tensors.push("latent_scale", Tensor::scalar(codec.latent_scale()));
    Checkpoint {
        kind: ModelKind::Codec,
        schedule,
        metadata: json!({ "config": codec.config(), "training": training }),
        tensors,
    }
}

pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<LatentCodec, CheckpointError> {
    ck.expect_kind(ModelKind::Codec)?;
    let config: CodecConfig = ck.config()?;
    let scale = ck
        .tensors
        .by_name("latent_scale")
        .ok_or_else(|| invalid("missing latent_scale"))?
        .item()
        .map_err(invalid)?;
    LatentCodec::from_parts(config, &ck.tensors, scale).map_err(invalid)
}

pub fn denoiser_checkpoint(
    net: &DenoiserNet,
    schedule: ScheduleParams,
    training: Value,
) -> Checkpoint {
    Checkpoint {
        kind: ModelKind::Denoiser,
        schedule,
        metadata: json!({ "config": net.config(), "training": training }),
        tensors: net.params().clone(),
    }
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<DenoiserNet, CheckpointError> {
    ck.expect_kind(ModelKind::Denoiser)?;
    let config: DenoiserConfig = ck.config()?;
    DenoiserNet::from_parts(config, &ck.tensors).map_err(invalid)
}

pub fn encoder_checkpoint(enc: &TextEncoder, schedule: ScheduleParams) -> Checkpoint {
    let mut tensors = ParamSet::new();
    tensors.push("table", enc.table.clone());
    tensors.push("projection", enc.projection.clone());
    Checkpoint {
        kind: ModelKind::Encoder,
        schedule,
        metadata: json!({
            "config": enc.config,
            "vocabulary": enc.vocab.words(),
            "placeholder_default": enc.placeholder_default,
        }),
        tensors,
    }
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<TextEncoder, CheckpointError> {
    ck.expect_kind(ModelKind::Encoder)?;
    let config: TextEncoderConfig = ck.config()?;
    let words: Vec<String> = serde_json::from_value(ck.metadata["vocabulary"].clone())
        .map_err(|e| invalid(format!("vocabulary: {e}")))?;
    let get = |n: &str| {
        ck.tensors
            .by_name(n)
            .cloned()
            .ok_or_else(|| invalid(format!("missing {n}")))
    };
    let table = get("table")?;
    let projection = get("projection")?;
    if table.shape() != [words.len(), config.embed_dim]
        || projection.shape() != [config.embed_dim, config.cond_dim]
    {
        return Err(invalid("encoder tensor shapes disagree with config"));
    }
    Ok(TextEncoder {
        config,
        vocab: Vocabulary::from_words(words),
        table,
        projection,
        placeholder_default: ck.metadata["placeholder_default"]
            .as_bool()
            .unwrap_or(false),
    })
}

pub fn classifier_checkpoint(
    clf: &IdentityClassifier,
    schedule: ScheduleParams,
    training: Value,
) -> Checkpoint {
    Checkpoint {
        kind: ModelKind::Classifier,
        schedule,
        metadata: json!({ "config": clf.config(), "training": training }),
        tensors: clf.params().clone(),
    }
}

pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<IdentityClassifier, CheckpointError> {
    ck.expect_kind(ModelKind::Classifier)?;
    let config: ClassifierConfig = ck.config()?;
    IdentityClassifier::from_parts(config, &ck.tensors).map_err(invalid)
}
