use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use storybook_core::pipeline::commands::{
    cmd_bench, cmd_generate, cmd_inject, cmd_invert, cmd_train, MaskArg, TrainKind,
};
use storybook_core::pipeline::{cmd_storybook, dataset, LoadedConfig};
use storybook_core::promptgen::BackendKind;
use storybook_core::synth;

#[derive(Parser)]
#[command(
    name = "storybook",
    version,
    about = "Coherent storybook generation with identity injection"
)]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the generation, injection and inversion seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// LLM backend for prompt generation.
    #[arg(long, global = true, value_enum)]
    llm: Option<Llm>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Llm {
    Remote,
    Fallback,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Captioned scenes for codec and denoiser training.
    Corpus,
    /// Close-ups of one character, for inversion.
    Portraits,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 1500)]
        count: usize,
        #[arg(long, default_value = "prince")]
        identity: String,
        #[arg(long = "data-seed", default_value_t = 0)]
        data_seed: u64,
    },
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
    },
    /// Also writes the text encoder when the configured one is missing.
    TrainDenoiser {
        #[arg(long)]
        data: PathBuf,
    },
    TrainClassifier,
    /// Learn the placeholder embedding from identity images.
    Invert {
        #[arg(long)]
        images: PathBuf,
    },
    Generate {
        #[arg(long)]
        prompt: String,
    },
    /// Inject an identity into one image.
    Inject {
        #[arg(long)]
        image: PathBuf,
        /// Mask PNG, or "auto" to detect the face.
        #[arg(long, default_value = "auto")]
        mask: String,
        /// Prompt containing the placeholder S*.
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long, short = 'n')]
        cycles: Option<usize>,
    },
    /// Run the whole story → storybook pipeline (resumable).
    Storybook {
        #[arg(long)]
        story: PathBuf,
        #[arg(long = "identity-images")]
        identity_images: PathBuf,
    },
    /// Cycle sweep and resampling baseline on synthetic fixtures.
    Bench {
        #[arg(long)]
        embedding: PathBuf,
    },
}

fn required_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p.clone()),
        None => bail!("--out is required ({what})"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => LoadedConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => LoadedConfig::defaults(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(llm) = cli.llm {
        cfg.config.llm.kind = match llm {
            Llm::Remote => BackendKind::Remote,
            Llm::Fallback => BackendKind::Fallback,
        };
    }
    let out = cli.out.as_deref();
    match &cli.command {
        Cmd::Synth {
            kind,
            count,
            identity,
            data_seed,
        } => {
            let dir = required_out(&cli.out, "dataset directory")?;
            match kind {
                SynthKind::Corpus => dataset::write_corpus(&dir, *count, *data_seed)?,
                SynthKind::Portraits => {
                    let id = synth::identity_index(identity)
                        .with_context(|| format!("unknown identity {identity:?}"))?;
                    dataset::write_portraits(&dir, id, *count, *data_seed)?
                }
            }
            println!("{}", dir.display());
        }
        Cmd::TrainCodec { data } => report(cmd_train(TrainKind::Codec, Some(data), &cfg, out)?),
        Cmd::TrainDenoiser { data } => {
            report(cmd_train(TrainKind::Denoiser, Some(data), &cfg, out)?)
        }
        Cmd::TrainClassifier => report(cmd_train(TrainKind::Classifier, None, &cfg, out)?),
        Cmd::Invert { images } => {
            let dest = required_out(&cli.out, "embedding file")?;
            let (_, r) = cmd_invert(images, &cfg, &dest)?;
            println!(
                "{} loss {:.5} → {:.5} (ratio {:.3})",
                dest.display(),
                r.initial_loss,
                r.final_loss,
                r.ratio()
            );
        }
        Cmd::Generate { prompt } => {
            let dest = required_out(&cli.out, "image file")?;
            cmd_generate(prompt, &cfg, &dest)?;
            println!("{}", dest.display());
        }
        Cmd::Inject {
            image,
            mask,
            prompt,
            embedding,
            cycles,
        } => {
            let dest = required_out(&cli.out, "image file")?;
            let mask = if mask == "auto" {
                MaskArg::Auto
            } else {
                MaskArg::File(PathBuf::from(mask))
            };
            let n = cycles.unwrap_or(cfg.config.injection.cycles);
            cmd_inject(image, &mask, prompt, embedding, n, &cfg, &dest)?;
            println!("{}", dest.display());
        }
        Cmd::Storybook {
            story,
            identity_images,
        } => {
            let dir = required_out(&cli.out, "run directory")?;
            let m = cmd_storybook(story, identity_images, &cfg, &dir)?;
            println!("run {} → {}", m.run_id, dir.join(&m.html).display());
        }
        Cmd::Bench { embedding } => {
            let dir = out.map_or_else(|| Path::new("bench").to_path_buf(), Path::to_path_buf);
            let s = cmd_bench(&cfg, embedding, &dir)?;
            println!("{s:#?}");
        }
    }
    Ok(())
}

fn report(t: storybook_core::pipeline::commands::TrainOutcome) {
    println!(
        "{} (metric {}; losses in {})",
        t.checkpoint.display(),
        t.metric,
        t.loss_csv.display()
    );
}
