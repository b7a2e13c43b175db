use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::bench::{ClassifierConfig, ClassifierTrainConfig};
use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::inject::InjectionConfig;
use crate::mask::DetectorConfig;
use crate::promptgen::{LlmBackend, PromptConfig};
use crate::schedule::ScheduleParams;
use crate::textcond::{InversionConfig, TextEncoderConfig};

/// Checkpoint locations; relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelPaths {
    pub codec: PathBuf,
    pub denoiser: PathBuf,
    pub encoder: PathBuf,
    pub classifier: PathBuf,
}

impl Default for ModelPaths {
    fn default() -> Self {
        Self {
            codec: "models/codec.ckpt".into(),
            denoiser: "models/denoiser.ckpt".into(),
            encoder: "models/encoder.ckpt".into(),
            classifier: "models/classifier.ckpt".into(),
        }
    }
}

/// Initial text-to-image sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub steps: usize,
    pub guidance_scale: f32,
    pub eta: f64,
    pub seed: u64,
    /// Latent grid of generated images.
    pub latent_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            latent_size: 8,
        }
    }
}

/// External face-restoration hook. `command` is argv with `{input}`,
/// `{output}` and `{fidelity}` substituted; empty means pass-through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorationConfig {
    pub command: Vec<String>,
    pub fidelity: f32,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            fidelity: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub dilate: usize,
    pub detector: DetectorConfig,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            dilate: 1,
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityConfig {
    pub label: String,
    /// At most this many identity images feed the inversion.
    pub max_images: usize,
    /// Previously inverted embedding; skips the inversion when set.
    pub embedding: Option<PathBuf>,
    pub inversion: InversionConfig,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self {
            label: "prince".into(),
            max_images: 4,
            embedding: None,
            inversion: InversionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub fixtures: usize,
    pub fixture_seed: u64,
    pub n_values: Vec<usize>,
    pub prompt_star: String,
    /// Sweep injection settings; `cycles` is replaced by each N.
    pub injection: InjectionConfig,
    pub classifier: ClassifierConfig,
    pub classifier_training: ClassifierTrainConfig,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            fixtures: 5,
            fixture_seed: 11,
            n_values: (1..=8).collect(),
            prompt_star: "a picture of the S*".into(),
            injection: InjectionConfig {
                strength: 0.08,
                guidance_scale: 3.0,
                ..InjectionConfig::default()
            },
            classifier: ClassifierConfig::default(),
            classifier_training: ClassifierTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub workers: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub schedule: ScheduleParams,
    pub models: ModelPaths,
    pub codec: CodecConfig,
    pub codec_training: CodecTrainConfig,
    pub denoiser: DenoiserConfig,
    pub denoiser_training: TrainConfig,
    pub encoder: TextEncoderConfig,
    pub llm: LlmBackend,
    pub prompts: PromptConfig,
    pub generation: GenerationConfig,
    pub restoration: RestorationConfig,
    pub mask: MaskConfig,
    pub identity: IdentityConfig,
    pub injection: InjectionConfig,
    pub bench: BenchSettings,
    pub runtime: RuntimeConfig,
}

/// A parsed config together with the exact text it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: Config,
    pub text: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let config: Config =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            config,
            text: text.to_string(),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Defaults only, as if from an empty file in the current directory.
    pub fn defaults() -> Self {
        Self {
            config: Config::default(),
            text: String::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Replaces every sampling seed (generation, injection, inversion).
    pub fn reseed(&mut self, seed: u64) {
        self.config.generation.seed = seed;
        self.config.injection.seed = seed;
        self.config.identity.inversion.seed = seed;
    }
}

impl Config {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_documented_defaults() {
        let c = LoadedConfig::parse("", Path::new(".")).unwrap().config;
        assert_eq!(c.generation.steps, 100);
        assert_eq!(c.generation.guidance_scale, 7.5);
        assert_eq!(c.injection.steps, 50);
        assert_eq!(c.injection.cycles, 4);
        assert_eq!(c.llm.temperature, 0.5);
        assert_eq!(c.llm.top_p, 1.0);
        assert_eq!(c.restoration.fidelity, 0.5);
        assert_eq!(c.schedule, ScheduleParams::default());
    }

    #[test]
    fn partial_tables_and_round_trip() {
        let c = LoadedConfig::parse(
            "[injection]\ncycles = 8\n[llm]\nkind = \"remote\"\nendpoint = \"http://x\"\n",
            Path::new("."),
        )
        .unwrap()
        .config;
        assert_eq!(c.injection.cycles, 8);
        assert_eq!(c.injection.steps, 50);
        let back: Config = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(LoadedConfig::parse("[injection]\ncycles = \"x\"", Path::new(".")).is_err());
    }
}
