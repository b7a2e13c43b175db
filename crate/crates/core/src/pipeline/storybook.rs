//! The end-to-end storybook run: prompts → initial images → restoration →
//! masks → identity embedding → injection → montage and HTML.
//!
//! Every stage reads its inputs from the run directory and leaves a marker
//! holding the run id, so a rerun skips finished stages and a resumed run
//! ends in exactly the same files as a clean one. Wall-clock times go to
//! `timings.json`; `manifest.json` holds only deterministic content.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use super::commands::identity_images;
use super::config::LoadedConfig;
use super::dataset::png_files;
use super::{
    ensure_parent, par_map, read_file, save_tensor, sha256_hex, write_file, ModelSet, PipelineError,
};
use crate::denoiser::{sample, SampleConfig};
use crate::image_io::{load_png, save_png};
use crate::inject::{inject_identity, InjectionConfig};
use crate::mask::{resolve_mask, MaskSource, PixelMask};
use crate::numerics::Tensor;
use crate::promptgen::{load_records, save_records, story_prompts, PromptRecord, Story};
use crate::textcond::{invert_token, IdentityEmbedding};

pub const STAGES: [&str; 7] = [
    "prompts", "generate", "restore", "mask", "invert", "inject", "assemble",
];

const PROMPTS: &str = "prompts.json";
const IDENTITY: &str = "identity.bin";
const INJECT_LOG: &str = "inject.json";
const MONTAGE: &str = "storybook.png";
const HTML: &str = "storybook.html";
const MANIFEST: &str = "manifest.json";
const TIMINGS: &str = "timings.json";
const CONFIG_COPY: &str = "config.toml";
const STORY_COPY: &str = "story.txt";

fn scene_file(dir: &str, i: usize, ext: &str) -> String {
    format!("{dir}/scene_{i:02}.{ext}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneArtifacts {
    pub index: usize,
    pub text: String,
    pub final_prompt: String,
    pub edited_prompt: Option<String>,
    pub initial: String,
    pub restored: String,
    pub mask: Option<String>,
    pub latent: String,
    pub image: String,
    pub injected: bool,
    pub background_exact: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub generation: u64,
    pub injection: u64,
    pub inversion: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmRecord {
    pub kind: String,
    pub temperature: f32,
    pub top_p: f32,
}

/// Artifact paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub title: String,
    pub config_snapshot: String,
    pub effective_config: String,
    pub story_sha256: String,
    pub stages: Vec<String>,
    pub seeds: Seeds,
    pub llm: LlmRecord,
    pub checkpoints: Vec<(String, String)>,
    pub cycles: usize,
    pub workers: usize,
    pub config_file: String,
    pub story_file: String,
    pub prompts: String,
    pub identity_embedding: String,
    pub montage: String,
    pub html: String,
    pub timings: String,
    pub scenes: Vec<SceneArtifacts>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Ok(serde_json::from_slice(&read_file(path)?)?)
    }

    /// Every referenced artifact, relative to the run directory.
    pub fn artifact_paths(&self) -> Vec<&str> {
        let mut v = vec![
            self.config_file.as_str(),
            self.story_file.as_str(),
            self.prompts.as_str(),
            self.identity_embedding.as_str(),
            self.montage.as_str(),
            self.html.as_str(),
            self.timings.as_str(),
        ];
        for s in &self.scenes {
            v.extend([
                s.initial.as_str(),
                s.restored.as_str(),
                s.latent.as_str(),
                s.image.as_str(),
            ]);
            v.extend(s.mask.as_deref());
        }
        v
    }

    /// Checks that every referenced file exists under `run_dir` and the
    /// copied config is byte-identical to the snapshot.
    pub fn verify(&self, run_dir: &Path) -> Result<(), PipelineError> {
        for p in self.artifact_paths() {
            if !run_dir.join(p).is_file() {
                return Err(PipelineError::Dataset(format!(
                    "manifest references missing file {p}"
                )));
            }
        }
        let copy = read_file(&run_dir.join(&self.config_file))?;
        if copy != self.config_snapshot.as_bytes() {
            return Err(PipelineError::Dataset(
                "config copy differs from the manifest snapshot".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageTiming {
    stage: String,
    skipped: bool,
    wall_ms: u128,
    finished_unix_ms: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InjectLog {
    scene: usize,
    injected: bool,
    background_exact: Option<bool>,
}

struct Run<'a> {
    dir: PathBuf,
    cfg: &'a LoadedConfig,
    story: Story,
    models: ModelSet,
    identity_dir: PathBuf,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn records(&self) -> Result<Vec<PromptRecord>, PipelineError> {
        Ok(load_records(&self.path(PROMPTS))?)
    }

    fn stage_prompts(&self) -> Result<(), PipelineError> {
        let c = &self.cfg.config;
        let records = story_prompts(&c.llm, &self.story, &c.prompts)?;
        save_records(&records, &self.path(PROMPTS))?;
        Ok(())
    }

    fn stage_generate(&self) -> Result<(), PipelineError> {
        let g = &self.cfg.config.generation;
        let records = self.records()?;
        let m = &self.models;
        let results = par_map(&records, self.cfg.config.runtime.workers, |_, r| {
            let cond = m.text.encode_prompt(&r.final_prompt, None)?;
            let sc = SampleConfig {
                steps: g.steps,
                guidance_scale: g.guidance_scale,
                eta: g.eta,
                seed: g.seed.wrapping_add(r.scene as u64),
            };
            let img = sample(
                &m.net,
                &m.codec,
                &m.schedule,
                &cond,
                &sc,
                (g.latent_size, g.latent_size),
            )?;
            let p = self.path(&scene_file("initial", r.scene, "png"));
            ensure_parent(&p)?;
            save_png(&img, &p)?;
            Ok::<_, PipelineError>(())
        });
        results.into_iter().collect()
    }

    fn stage_restore(&self) -> Result<(), PipelineError> {
        let rc = &self.cfg.config.restoration;
        for r in self.records()? {
            let input = self.path(&scene_file("initial", r.scene, "png"));
            let output = self.path(&scene_file("restored", r.scene, "png"));
            if rc.command.is_empty() {
                write_file(&output, read_file(&input)?)?;
                continue;
            }
            ensure_parent(&output)?;
            let fidelity = rc.fidelity.to_string();
            let argv: Vec<String> = rc
                .command
                .iter()
                .map(|a| {
                    a.replace("{input}", &input.display().to_string())
                        .replace("{output}", &output.display().to_string())
                        .replace("{fidelity}", &fidelity)
                })
                .collect();
            let status = Command::new(&argv[0])
                .args(&argv[1..])
                .status()
                .map_err(|e| PipelineError::Restoration(format!("{}: {e}", argv[0])))?;
            if !status.success() {
                return Err(PipelineError::Restoration(format!(
                    "{} exited with {status}",
                    argv[0]
                )));
            }
            let before = load_png(&input)?;
            let after = load_png(&output).map_err(|e| {
                PipelineError::Restoration(format!("no usable output for scene {}: {e}", r.scene))
            })?;
            if after.shape() != before.shape() {
                return Err(PipelineError::Restoration(format!(
                    "scene {} changed size {:?} → {:?}",
                    r.scene,
                    before.shape(),
                    after.shape()
                )));
            }
        }
        Ok(())
    }

    fn stage_mask(&self) -> Result<(), PipelineError> {
        let mc = &self.cfg.config.mask;
        for r in self.records()?.iter().filter(|r| r.edited_prompt.is_some()) {
            let img = load_png(&self.path(&scene_file("restored", r.scene, "png")))?;
            let m = resolve_mask(&img, &MaskSource::Detect(mc.detector), mc.dilate)?;
            let p = self.path(&scene_file("masks", r.scene, "png"));
            ensure_parent(&p)?;
            m.save(&p)?;
        }
        Ok(())
    }

    fn stage_invert(&self) -> Result<(), PipelineError> {
        let id = &self.cfg.config.identity;
        if let Some(cached) = &id.embedding {
            let p = self.cfg.resolve(cached);
            if p.is_file() {
                // validate before copying
                IdentityEmbedding::load(&p)?;
                return write_file(&self.path(IDENTITY), read_file(&p)?);
            }
        }
        let images = identity_images(&self.identity_dir, id.max_images)?;
        let m = &self.models;
        let (emb, report) = invert_token(
            &m.net,
            &m.codec,
            &m.text,
            &images,
            &id.label,
            &m.schedule,
            &id.inversion,
        )?;
        info!("inversion loss ratio {:.3}", report.ratio());
        write_file(
            &self.path("identity_report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        emb.save(&self.path(IDENTITY))?;
        Ok(())
    }

    fn stage_inject(&self) -> Result<(), PipelineError> {
        let records = self.records()?;
        let emb = IdentityEmbedding::load(&self.path(IDENTITY))?;
        let base = &self.cfg.config.injection;
        let m = &self.models;
        let logs = par_map(&records, self.cfg.config.runtime.workers, |_, r| {
            let x = load_png(&self.path(&scene_file("restored", r.scene, "png")))?;
            let (image, latent, log) = match &r.edited_prompt {
                Some(p_star) => {
                    let mask = PixelMask::load(&self.path(&scene_file("masks", r.scene, "png")))?;
                    let ic = InjectionConfig {
                        seed: base.seed.wrapping_add(r.scene as u64),
                        ..base.clone()
                    };
                    let out = inject_identity(&x, p_star, &emb, &mask, &ic, m.models())?;
                    let log = InjectLog {
                        scene: r.scene,
                        injected: true,
                        background_exact: Some(out.background_exact),
                    };
                    (out.image, out.final_latent.z, log)
                }
                None => {
                    let z = m.codec.encode(&x)?;
                    let log = InjectLog {
                        scene: r.scene,
                        injected: false,
                        background_exact: None,
                    };
                    (m.codec.decode(&z)?, z.z, log)
                }
            };
            let p = self.path(&scene_file("final", r.scene, "png"));
            ensure_parent(&p)?;
            save_png(&image, &p)?;
            save_tensor(&latent, &self.path(&scene_file("latents", r.scene, "bin")))?;
            Ok::<_, PipelineError>(log)
        });
        let logs: Vec<InjectLog> = logs.into_iter().collect::<Result<_, _>>()?;
        write_file(&self.path(INJECT_LOG), serde_json::to_string_pretty(&logs)?)
    }

    fn stage_assemble(&self) -> Result<(), PipelineError> {
        let records = self.records()?;
        let images: Vec<Tensor> = records
            .iter()
            .map(|r| Ok(load_png(&self.path(&scene_file("final", r.scene, "png")))?))
            .collect::<Result<_, PipelineError>>()?;
        save_png(&montage(&images, 5, 4, 4)?, &self.path(MONTAGE))?;
        let pairs: Vec<(String, String)> = self
            .story
            .scenes
            .iter()
            .map(|s| (scene_file("final", s.index, "png"), s.text.clone()))
            .collect();
        write_file(&self.path(HTML), storybook_html(&self.story.title, &pairs))
    }
}

/// Grid of equally sized images in reading order, each upscaled by `scale`
/// (nearest neighbour) with `pad` white pixels around every cell.
pub fn montage(
    images: &[Tensor],
    max_cols: usize,
    scale: usize,
    pad: usize,
) -> Result<Tensor, PipelineError> {
    let first = images
        .first()
        .ok_or_else(|| PipelineError::Dataset("montage of zero images".into()))?;
    let (h, w) = match first.shape() {
        &[3, h, w] => (h, w),
        s => return Err(PipelineError::Dataset(format!("montage image shape {s:?}"))),
    };
    let cols = images.len().min(max_cols.max(1));
    let rows = images.len().div_ceil(cols);
    let (ch, cw) = (h * scale + pad, w * scale + pad);
    let (oh, ow) = (rows * ch + pad, cols * cw + pad);
    let mut out = vec![1.0f32; 3 * oh * ow];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(PipelineError::Dataset(
                "montage images differ in size".into(),
            ));
        }
        let (oy, ox) = ((k / cols) * ch + pad, (k % cols) * cw + pad);
        for c in 0..3 {
            for y in 0..h * scale {
                for x in 0..w * scale {
                    out[c * oh * ow + (oy + y) * ow + ox + x] =
                        img.data()[c * h * w + (y / scale) * w + x / scale];
                }
            }
        }
    }
    Ok(Tensor::new(&[3, oh, ow], out)?)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Static page alternating scene images and their text.
pub fn storybook_html(title: &str, pages: &[(String, String)]) -> String {
    let t = escape_html(title);
    let mut s = format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n<style>\n\
         body {{ font-family: Georgia, serif; max-width: 40em; margin: 2em auto; }}\n\
         figure {{ margin: 2em 0; text-align: center; }}\n\
         img {{ width: 256px; image-rendering: pixelated; }}\n\
         figcaption {{ margin-top: 0.8em; font-size: 1.2em; }}\n</style>\n</head>\n<body>\n<h1>{t}</h1>\n"
    );
    for (img, text) in pages {
        s.push_str(&format!(
            "<figure>\n<img src=\"{}\" alt=\"\">\n<figcaption>{}</figcaption>\n</figure>\n",
            escape_html(img),
            escape_html(text)
        ));
    }
    s.push_str("</body>\n</html>\n");
    s
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn marker(dir: &Path, stage: &str) -> PathBuf {
    dir.join(".stages").join(stage)
}

/// Runs (or resumes) a storybook into `out_dir`.
pub fn cmd_storybook(
    story_path: &Path,
    identity_dir: &Path,
    cfg: &LoadedConfig,
    out_dir: &Path,
) -> Result<RunManifest, PipelineError> {
    let c = &cfg.config;
    let story_bytes = read_file(story_path)?;
    let story_text = String::from_utf8(story_bytes.clone())
        .map_err(|_| PipelineError::Dataset(format!("{} is not UTF-8", story_path.display())))?;
    let title = story_path.file_stem().map_or_else(
        || "storybook".to_string(),
        |s| s.to_string_lossy().replace(['_', '-'], " "),
    );
    let story = Story::parse(
        &title,
        &story_text,
        c.prompts.sentences_per_scene,
        Some(&c.prompts.main_subject),
    )
    .map_err(|e| PipelineError::from(e).at("prompts"))?;
    c.llm
        .validate()
        .map_err(|e| PipelineError::from(e).at("prompts"))?;
    let models = ModelSet::load(cfg)?;

    let effective = c.to_toml();
    let mut parts: Vec<Vec<u8>> = vec![
        cfg.text.clone().into_bytes(),
        effective.clone().into_bytes(),
        story_bytes,
    ];
    for (k, fp) in models.fingerprints() {
        parts.push(format!("{k}:{fp}").into_bytes());
    }
    if identity_dir.is_dir() {
        for f in png_files(identity_dir)? {
            parts.push(read_file(&f)?);
        }
    }
    if let Some(p) = &c.identity.embedding {
        let p = cfg.resolve(p);
        if p.is_file() {
            parts.push(read_file(&p)?);
        }
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    let run_id = sha256_hex(&refs)[..16].to_string();

    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_file(&out_dir.join(CONFIG_COPY), &cfg.text)?;
    write_file(&out_dir.join(STORY_COPY), &story_text)?;

    let run = Run {
        dir: out_dir.to_path_buf(),
        cfg,
        story,
        models,
        identity_dir: identity_dir.to_path_buf(),
    };
    let mut timings = Vec::new();
    let mut invalidated = false;
    for stage in STAGES {
        let mk = marker(out_dir, stage);
        let done = !invalidated && std::fs::read_to_string(&mk).is_ok_and(|s| s == run_id);
        if done {
            info!("stage {stage}: already complete");
            timings.push(StageTiming {
                stage: stage.into(),
                skipped: true,
                wall_ms: 0,
                finished_unix_ms: unix_ms(),
            });
            continue;
        }
        // later stages depend on this one's output
        invalidated = true;
        let _ = std::fs::remove_file(&mk);
        info!("stage {stage}: running");
        let started = Instant::now();
        let r = match stage {
            "prompts" => run.stage_prompts(),
            "generate" => run.stage_generate(),
            "restore" => run.stage_restore(),
            "mask" => run.stage_mask(),
            "invert" => run.stage_invert(),
            "inject" => run.stage_inject(),
            "assemble" => run.stage_assemble(),
            _ => unreachable!("unknown stage"),
        };
        r.map_err(|e| e.at(stage))?;
        write_file(&mk, &run_id)?;
        timings.push(StageTiming {
            stage: stage.into(),
            skipped: false,
            wall_ms: started.elapsed().as_millis(),
            finished_unix_ms: unix_ms(),
        });
    }

    let records = run.records()?;
    let logs: Vec<InjectLog> = serde_json::from_slice(&read_file(&run.path(INJECT_LOG))?)?;
    let scenes = run
        .story
        .scenes
        .iter()
        .zip(&records)
        .zip(&logs)
        .map(|((s, r), l)| SceneArtifacts {
            index: s.index,
            text: s.text.clone(),
            final_prompt: r.final_prompt.clone(),
            edited_prompt: r.edited_prompt.clone(),
            initial: scene_file("initial", s.index, "png"),
            restored: scene_file("restored", s.index, "png"),
            mask: r
                .edited_prompt
                .as_ref()
                .map(|_| scene_file("masks", s.index, "png")),
            latent: scene_file("latents", s.index, "bin"),
            image: scene_file("final", s.index, "png"),
            injected: l.injected,
            background_exact: l.background_exact,
        })
        .collect();
    let manifest = RunManifest {
        run_id: run_id.clone(),
        title: run.story.title.clone(),
        config_snapshot: cfg.text.clone(),
        effective_config: effective,
        story_sha256: sha256_hex(&[story_text.as_bytes()]),
        stages: STAGES.iter().map(|s| s.to_string()).collect(),
        seeds: Seeds {
            generation: c.generation.seed,
            injection: c.injection.seed,
            inversion: c.identity.inversion.seed,
        },
        llm: LlmRecord {
            kind: format!("{:?}", c.llm.kind).to_lowercase(),
            temperature: c.llm.temperature,
            top_p: c.llm.top_p,
        },
        checkpoints: run
            .models
            .fingerprints()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        cycles: c.injection.cycles,
        workers: c.runtime.workers,
        config_file: CONFIG_COPY.into(),
        story_file: STORY_COPY.into(),
        prompts: PROMPTS.into(),
        identity_embedding: IDENTITY.into(),
        montage: MONTAGE.into(),
        html: HTML.into(),
        timings: TIMINGS.into(),
        scenes,
    };
    write_file(
        &out_dir.join(TIMINGS),
        serde_json::to_string_pretty(&serde_json::json!({ "run_id": run_id, "stages": timings }))?,
    )?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&out_dir.join(MANIFEST), text)?;
    manifest.verify(out_dir)?;
    Ok(manifest)
}
