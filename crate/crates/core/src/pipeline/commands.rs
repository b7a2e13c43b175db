//! Standalone commands: training, generation, inversion, injection and the benchmark.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{self, Checkpoint};
use super::config::LoadedConfig;
use super::dataset::{load_dataset, png_files};
use super::{ensure_parent, load_classifier, write_file, ModelSet, PipelineError};
use crate::bench::{
    self, baseline_textual_inversion, cycle_sweep, identity_crops, make_fixtures, mean_spearman,
    save_plot, train_classifier, write_csv, MetricRow, SweepConfig,
};
use crate::codec::{reconstruction_mse, train_codec};
use crate::denoiser::{sample, train_denoiser, DenoiserNet, SampleConfig};
use crate::image_io::{load_png, save_png};
use crate::inject::{inject_identity, InjectionConfig};
use crate::mask::{resolve_mask, MaskSource, PixelMask};
use crate::numerics::Tensor;
use crate::textcond::{invert_token, IdentityEmbedding, InversionReport, TextEncoder, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainKind {
    Codec,
    Denoiser,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    /// Held-out MSE (codec), final EMA loss (denoiser) or held-out accuracy (classifier).
    pub metric: f32,
}

fn csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn caption_vocabulary(captions: &[&str]) -> Vocabulary {
    let mut words: Vec<&str> = Vec::new();
    for c in captions {
        for w in c.split_whitespace() {
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    Vocabulary::new(&words)
}

/// Trains one model kind and writes its checkpoint plus a loss CSV beside it.
/// `out` defaults to the checkpoint path named in the config.
pub fn cmd_train(
    kind: TrainKind,
    dataset: Option<&Path>,
    cfg: &LoadedConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    let c = &cfg.config;
    let default_path = match kind {
        TrainKind::Codec => &c.models.codec,
        TrainKind::Denoiser => &c.models.denoiser,
        TrainKind::Classifier => &c.models.classifier,
    };
    let path = out.map_or_else(|| cfg.resolve(default_path), Path::to_path_buf);
    let need_data =
        || dataset.ok_or_else(|| PipelineError::Dataset("a dataset directory is required".into()));
    let (ck, csv, metric) = match kind {
        TrainKind::Codec => {
            let images: Vec<Tensor> = load_dataset(need_data()?)?
                .into_iter()
                .map(|e| e.image)
                .collect();
            let (codec, report) = train_codec(&images, c.codec.clone(), &c.codec_training)?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in report.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", i + 1));
            }
            csv.push_str(&format!("heldout,{}\n", report.heldout_mse));
            let training = json!({
                "images": images.len(),
                "heldout_mse": report.heldout_mse,
                "settings": c.codec_training,
            });
            (
                checkpoint::codec_checkpoint(&codec, c.schedule, training),
                csv,
                report.heldout_mse,
            )
        }
        TrainKind::Denoiser => {
            let data = load_dataset(need_data()?)?;
            let pairs: Vec<(Tensor, String)> = data
                .into_iter()
                .map(|e| {
                    let cap = e.caption.ok_or_else(|| {
                        PipelineError::Dataset(format!("{} has no caption", e.file.display()))
                    })?;
                    Ok((e.image, cap))
                })
                .collect::<Result<_, PipelineError>>()?;
            let codec = checkpoint::codec_from_checkpoint(&Checkpoint::load(
                &cfg.resolve(&c.models.codec),
            )?)?;
            let enc_path = cfg.resolve(&c.models.encoder);
            let text = if enc_path.exists() {
                checkpoint::encoder_from_checkpoint(&Checkpoint::load(&enc_path)?)?
            } else {
                let caps: Vec<&str> = pairs.iter().map(|(_, s)| s.as_str()).collect();
                let text = TextEncoder::new(caption_vocabulary(&caps), c.encoder.clone());
                ensure_parent(&enc_path)?;
                checkpoint::encoder_checkpoint(&text, c.schedule).save(&enc_path)?;
                info!("wrote text encoder {}", enc_path.display());
                text
            };
            let schedule = crate::schedule::NoiseSchedule::linear(c.schedule)?;
            let mut net = DenoiserNet::new(c.denoiser.clone());
            let report = train_denoiser(
                &mut net,
                &codec,
                &text,
                &pairs,
                &schedule,
                &c.denoiser_training,
            )?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", i + 1));
            }
            let last = report.ema_curve.last().copied().unwrap_or(f32::NAN);
            let training = json!({
                "images": pairs.len(),
                "codec_id": codec.id(),
                "encoder_fingerprint": text.fingerprint(),
                "final_ema_loss": last,
                "settings": c.denoiser_training,
            });
            (
                checkpoint::denoiser_checkpoint(&net, c.schedule, training),
                csv,
                last,
            )
        }
        TrainKind::Classifier => {
            let codec = checkpoint::codec_from_checkpoint(&Checkpoint::load(
                &cfg.resolve(&c.models.codec),
            )?)?;
            let tc = &c.bench.classifier_training;
            // train on codec round trips so generated faces are in-distribution
            let (crops, labels) = identity_crops(tc.samples, tc.max_dilate, tc.seed, |xs| {
                Ok(codec.decode_batch(&codec.encode_batch(xs)?)?)
            })?;
            let clf = train_classifier(&crops, &labels, c.bench.classifier.clone(), tc)?;
            let (hc, hl) = identity_crops(300, tc.max_dilate, tc.seed.wrapping_add(1), |xs| {
                Ok(xs.to_vec())
            })?;
            let acc = clf.accuracy(&hc, &hl)?;
            let csv = format!("heldout_accuracy\n{acc}\n");
            let training = json!({ "heldout_accuracy": acc, "settings": tc });
            (
                checkpoint::classifier_checkpoint(&clf, c.schedule, training),
                csv,
                acc,
            )
        }
    };
    ensure_parent(&path)?;
    ck.save(&path)?;
    let loss_csv = csv_path(&path);
    write_file(&loss_csv, csv)?;
    info!("wrote {} ({kind:?} metric {metric})", path.display());
    Ok(TrainOutcome {
        checkpoint: path,
        loss_csv,
        metric,
    })
}

/// Recomputes the codec's held-out MSE on the same split used in training.
pub fn codec_heldout_mse(
    cfg: &LoadedConfig,
    dataset: &Path,
    ckpt: &Path,
) -> Result<f32, PipelineError> {
    let codec = checkpoint::codec_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let images: Vec<Tensor> = load_dataset(dataset)?
        .into_iter()
        .map(|e| e.image)
        .collect();
    let n = cfg.config.codec_training.holdout_len(images.len());
    Ok(reconstruction_mse(&codec, &images[..n])?)
}

pub fn cmd_generate(prompt: &str, cfg: &LoadedConfig, out: &Path) -> Result<Tensor, PipelineError> {
    let m = ModelSet::load(cfg)?;
    let g = &cfg.config.generation;
    let cond = m.text.encode_prompt(prompt, None)?;
    let sc = SampleConfig {
        steps: g.steps,
        guidance_scale: g.guidance_scale,
        eta: g.eta,
        seed: g.seed,
    };
    let image = sample(
        &m.net,
        &m.codec,
        &m.schedule,
        &cond,
        &sc,
        (g.latent_size, g.latent_size),
    )?;
    save_png(&image, out)?;
    Ok(image)
}

/// Identity images from `dir`, first `max_images` by file name.
pub fn identity_images(dir: &Path, max_images: usize) -> Result<Vec<Tensor>, PipelineError> {
    let files = if dir.is_dir() {
        png_files(dir)?
    } else {
        Vec::new()
    };
    if files.is_empty() {
        return Err(PipelineError::NoIdentityImages(dir.display().to_string()));
    }
    files
        .iter()
        .take(max_images.max(1))
        .map(|f| Ok(load_png(f)?))
        .collect()
}

pub fn cmd_invert(
    images_dir: &Path,
    cfg: &LoadedConfig,
    out: &Path,
) -> Result<(IdentityEmbedding, InversionReport), PipelineError> {
    let m = ModelSet::load(cfg)?;
    let id = &cfg.config.identity;
    let images = identity_images(images_dir, id.max_images)?;
    let (emb, report) = invert_token(
        &m.net,
        &m.codec,
        &m.text,
        &images,
        &id.label,
        &m.schedule,
        &id.inversion,
    )?;
    emb.save(out)?;
    write_file(
        &out.with_extension("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    info!("inversion loss ratio {:.3}", report.ratio());
    Ok((emb, report))
}

/// Where the injection mask comes from.
#[derive(Clone, Debug)]
pub enum MaskArg {
    Auto,
    File(PathBuf),
}

pub fn cmd_inject(
    image: &Path,
    mask: &MaskArg,
    prompt_star: &str,
    embedding: &Path,
    cycles: usize,
    cfg: &LoadedConfig,
    out: &Path,
) -> Result<Tensor, PipelineError> {
    let m = ModelSet::load(cfg)?;
    let x = load_png(image)?;
    let source = match mask {
        MaskArg::Auto => MaskSource::Detect(cfg.config.mask.detector),
        MaskArg::File(p) => MaskSource::File(p.clone()),
    };
    let pm: PixelMask = resolve_mask(&x, &source, cfg.config.mask.dilate)?;
    let emb = IdentityEmbedding::load(embedding)?;
    let ic = InjectionConfig {
        cycles,
        ..cfg.config.injection.clone()
    };
    let result = inject_identity(&x, prompt_star, &emb, &pm, &ic, m.models())?;
    save_png(&result.image, out)?;
    Ok(result.image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub classifier_accuracy: f32,
    pub mean_spearman: f64,
    pub all_bg_exact: bool,
    pub max_bg_mse: f32,
    pub baseline_min_bg_mse: f32,
    pub baseline_min_identity: f32,
}

/// Cycle sweep and resampling baseline over synthetic fixtures. Writes
/// `sweep.csv`, `sweep.png`, `baseline.csv` and `summary.json` into `out_dir`.
pub fn cmd_bench(
    cfg: &LoadedConfig,
    embedding: &Path,
    out_dir: &Path,
) -> Result<BenchSummary, PipelineError> {
    let m = ModelSet::load(cfg)?;
    let b = &cfg.config.bench;
    let clf_path = cfg.resolve(&cfg.config.models.classifier);
    if !clf_path.exists() {
        cmd_train(TrainKind::Classifier, None, cfg, None)?;
    }
    let clf = load_classifier(&clf_path)?;
    let emb = IdentityEmbedding::load(embedding)?;
    let target = bench::identity_index(&emb.label)?;
    let tc = &b.classifier_training;
    let (hc, hl) = identity_crops(300, tc.max_dilate, tc.seed.wrapping_add(1), |xs| {
        Ok(xs.to_vec())
    })?;
    let accuracy = clf.accuracy(&hc, &hl)?;

    let fixtures = make_fixtures(
        b.fixtures,
        target,
        cfg.config.mask.dilate.max(1),
        b.fixture_seed,
    )?;
    let sweep = SweepConfig {
        n_values: b.n_values.clone(),
        prompt_star: b.prompt_star.clone(),
        injection: b.injection.clone(),
        guard: m.codec.background_guard(),
    };
    let rows = cycle_sweep(&fixtures, &emb, &sweep, m.models(), &clf)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    write_csv(&rows, &out_dir.join("sweep.csv"))?;
    save_plot(&rows, &out_dir.join("sweep.png"))?;

    let sampling = SampleConfig {
        steps: b.injection.steps,
        guidance_scale: b.injection.guidance_scale,
        eta: 0.0,
        seed: b.injection.seed,
    };
    let mut baseline: Vec<MetricRow> = Vec::new();
    for fx in &fixtures {
        let (img, row) = baseline_textual_inversion(
            fx,
            &b.prompt_star,
            &emb,
            &sampling,
            sweep.guard,
            m.models(),
            &clf,
        )?;
        save_png(&img, &out_dir.join(format!("baseline_{}.png", fx.name)))?;
        baseline.push(row);
    }
    write_csv(&baseline, &out_dir.join("baseline.csv"))?;

    let summary = BenchSummary {
        classifier_accuracy: accuracy,
        mean_spearman: mean_spearman(&rows),
        all_bg_exact: rows.iter().all(|r| r.bg_exact),
        max_bg_mse: rows.iter().map(|r| r.bg_mse).fold(0.0, f32::max),
        baseline_min_bg_mse: baseline
            .iter()
            .map(|r| r.bg_mse)
            .fold(f32::INFINITY, f32::min),
        baseline_min_identity: baseline
            .iter()
            .map(|r| r.identity)
            .fold(f32::INFINITY, f32::min),
    };
    write_file(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
