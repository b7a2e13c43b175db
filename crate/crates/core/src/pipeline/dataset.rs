//! On-disk image datasets: a directory of PNGs plus an optional
//! `captions.tsv` (`file<TAB>caption` per line, defining the order).

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_file, PipelineError};
use crate::image_io::{load_png, save_png};
use crate::numerics::Tensor;
use crate::synth::{self, CorpusConfig, SceneSpec};

pub const CAPTIONS: &str = "captions.tsv";

#[derive(Clone, Debug)]
pub struct Example {
    pub file: PathBuf,
    pub image: Tensor,
    pub caption: Option<String>,
}

/// PNG files directly under `dir`, sorted by name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| PipelineError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Example>, PipelineError> {
    let captions = dir.join(CAPTIONS);
    if !captions.exists() {
        return png_files(dir)?
            .into_iter()
            .map(|file| {
                let image = load_png(&file)?;
                Ok(Example {
                    file,
                    image,
                    caption: None,
                })
            })
            .collect();
    }
    let text = std::fs::read_to_string(&captions).map_err(|e| PipelineError::io(&captions, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (name, caption) = line.split_once('\t').ok_or_else(|| {
                PipelineError::Dataset(format!(
                    "{}:{}: expected file<TAB>caption",
                    captions.display(),
                    n + 1
                ))
            })?;
            let file = dir.join(name);
            let image = load_png(&file)?;
            Ok(Example {
                file,
                image,
                caption: Some(caption.trim().to_string()),
            })
        })
        .collect()
}

fn write_specs(dir: &Path, prefix: &str, specs: &[SceneSpec]) -> Result<(), PipelineError> {
    let mut tsv = String::new();
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{prefix}_{i:05}.png");
        let path = dir.join(&name);
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| PipelineError::io(d, e))?;
        }
        save_png(&spec.render(), &path)?;
        tsv.push_str(&format!("{name}\t{}\n", spec.caption()));
    }
    write_file(&dir.join(CAPTIONS), tsv)
}

/// Captioned synthetic scenes for codec and denoiser training.
pub fn write_corpus(dir: &Path, count: usize, seed: u64) -> Result<(), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = synth::corpus(&mut rng, count, &CorpusConfig::default());
    write_specs(dir, "scene", &specs)
}

/// Close-up portraits of one character, used as identity images.
pub fn write_portraits(
    dir: &Path,
    identity: usize,
    count: usize,
    seed: u64,
) -> Result<(), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<SceneSpec> = (0..count)
        .map(|_| synth::random_portrait(&mut rng, identity))
        .collect();
    write_specs(dir, "portrait", &specs)
}
