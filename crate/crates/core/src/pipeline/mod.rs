//! Orchestration: configs, checkpoints, training commands and the storybook run.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod storybook;

use std::path::Path;

use thiserror::Error;

use crate::bench::{BenchError, IdentityClassifier};
use crate::codec::{CodecError, LatentCodec};
use crate::denoiser::{DenoiserError, DenoiserNet};
use crate::image_io::ImageError;
use crate::inject::{InjectError, Models};
use crate::mask::MaskError;
use crate::numerics::{NumericsError, Tensor};
use crate::promptgen::PromptError;
use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::textcond::{TextEncoder, TextError};

use checkpoint::{Checkpoint, CheckpointError};
pub use commands::*;
pub use config::{Config, LoadedConfig};
pub use storybook::{cmd_storybook, RunManifest, STAGES};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<PipelineError>,
    },
    #[error("restoration command failed: {0}")]
    Restoration(String),
    #[error("no identity images in {0} and no cached embedding")]
    NoIdentityImages(String),
    #[error("models disagree: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn at(self, stage: &'static str) -> Self {
        PipelineError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stage name for stage-tagged errors.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn sha256_hex(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const TENSOR_MAGIC: &[u8; 4] = b"SBTN";

/// Raw tensor file: magic, rank u32, dims u64…, f32 LE values.
pub fn save_tensor(t: &Tensor, path: &Path) -> Result<(), PipelineError> {
    let mut out = TENSOR_MAGIC.to_vec();
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    write_file(path, out)
}

pub fn load_tensor(path: &Path) -> Result<Tensor, PipelineError> {
    let bytes = read_file(path)?;
    let bad = || PipelineError::Dataset(format!("{}: not a tensor file", path.display()));
    if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad());
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.len() != shape.iter().product::<usize>() || !(bytes.len() - header).is_multiple_of(4) {
        return Err(bad());
    }
    Ok(Tensor::new(&shape, data)?)
}

/// Codec, denoiser, text encoder and schedule loaded from the configured checkpoints.
pub struct ModelSet {
    pub codec: LatentCodec,
    pub net: DenoiserNet,
    pub text: TextEncoder,
    pub schedule: NoiseSchedule,
}

impl ModelSet {
    pub fn load(cfg: &LoadedConfig) -> Result<Self, PipelineError> {
        let paths = &cfg.config.models;
        let ck = |p: &Path| Checkpoint::load(&cfg.resolve(p));
        let (c, d, e) = (ck(&paths.codec)?, ck(&paths.denoiser)?, ck(&paths.encoder)?);
        if c.schedule != d.schedule {
            return Err(PipelineError::Incompatible(format!(
                "codec schedule {:?} vs denoiser schedule {:?}",
                c.schedule, d.schedule
            )));
        }
        let set = Self {
            codec: checkpoint::codec_from_checkpoint(&c)?,
            net: checkpoint::denoiser_from_checkpoint(&d)?,
            text: checkpoint::encoder_from_checkpoint(&e)?,
            schedule: NoiseSchedule::linear(d.schedule)?,
        };
        // the denoiser was trained against one codec and encoder; refuse others
        let trained_with = |key: &str| d.metadata["training"][key].as_str().map(str::to_string);
        if let Some(id) = trained_with("codec_id") {
            if id != set.codec.id() {
                return Err(PipelineError::Incompatible(format!(
                    "denoiser trained with codec {id}, loaded codec {}",
                    set.codec.id()
                )));
            }
        }
        if let Some(fp) = trained_with("encoder_fingerprint") {
            if fp != set.text.fingerprint() {
                return Err(PipelineError::Incompatible(
                    "denoiser trained with a different text encoder".into(),
                ));
            }
        }
        set.models().check_compatible()?;
        Ok(set)
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            codec: &self.codec,
            net: &self.net,
            text: &self.text,
            schedule: &self.schedule,
        }
    }

    pub fn fingerprints(&self) -> [(&'static str, String); 3] {
        [
            ("codec", self.codec.params().fingerprint()),
            ("denoiser", self.net.params().fingerprint()),
            ("encoder", self.text.fingerprint()),
        ]
    }
}

pub fn load_classifier(path: &Path) -> Result<IdentityClassifier, PipelineError> {
    Ok(checkpoint::classifier_from_checkpoint(&Checkpoint::load(
        path,
    )?)?)
}

/// Maps `items` on up to `workers` scoped threads; results keep input order.
pub fn par_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..items.len())
                        .step_by(workers)
                        .map(|i| (i, f(i, &items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
