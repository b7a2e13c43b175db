//! The ten acceptance criteria, one pass/fail line each.
//!
//! Runs without the libtest harness so the report is always printed; exits
//! non-zero if any criterion fails. Criteria 5–8 and 10 share one trained set
//! of models (about four minutes on a single core).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use storybook_core::bench::{baseline_textual_inversion, bg_preservation_error, make_fixtures};
use storybook_core::denoiser::{
    sample, train_on_latents, DenoiserConfig, DenoiserNet, SampleConfig, TrainConfig,
};
use storybook_core::inject::{inject_identity, InjectionConfig};
use storybook_core::numerics::{grad_check, BinaryOp, Graph, NumericsError, Tensor, UnaryOp, Var};
use storybook_core::pipeline::commands::{cmd_bench, cmd_invert, cmd_train, TrainKind};
use storybook_core::pipeline::dataset::{write_corpus, write_portraits};
use storybook_core::pipeline::{cmd_storybook, LoadedConfig, ModelSet, RunManifest, STAGES};
use storybook_core::promptgen::{records_to_json, story_prompts, LlmBackend, PromptConfig, Story};
use storybook_core::schedule::{make_linear_schedule, q_sample};
use storybook_core::textcond::{
    inversion_loss_and_grad, IdentityEmbedding, TextEncoder, TextEncoderConfig, Vocabulary,
};
use tempfile::TempDir;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, took: Duration, what: &str) -> Result<(), String> {
    ensure!(took < limit, "{what} took {took:.1?}, limit {limit:?}");
    Ok(())
}

// ---- shared trained world ---------------------------------------------------

struct World {
    _dir: TempDir,
    root: PathBuf,
    cfg: LoadedConfig,
    ids: PathBuf,
    codec_train: Duration,
    codec_heldout_mse: f32,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = LoadedConfig::parse("", &root).unwrap();
        let corpus = root.join("corpus");
        write_corpus(&corpus, 1500, 7).unwrap();
        let ids = root.join("identity");
        write_portraits(&ids, 0, 4, 3).unwrap();
        eprintln!("training codec and denoiser on 1500 images…");
        let t = Instant::now();
        let codec = cmd_train(TrainKind::Codec, Some(&corpus), &cfg, None).unwrap();
        let codec_train = t.elapsed();
        cmd_train(TrainKind::Denoiser, Some(&corpus), &cfg, None).unwrap();
        World {
            _dir: dir,
            root,
            cfg,
            ids,
            codec_train,
            codec_heldout_mse: codec.metric,
        }
    })
}

fn embedding() -> &'static (PathBuf, f32) {
    static E: OnceLock<(PathBuf, f32)> = OnceLock::new();
    E.get_or_init(|| {
        let w = world();
        let p = w.root.join("identity.bin");
        let (_, report) = cmd_invert(&w.ids, &w.cfg, &p).unwrap();
        (p, report.ratio())
    })
}

// ---- criteria ---------------------------------------------------------------

fn c1_schedule() -> Outcome {
    let t0 = Instant::now();
    let s = make_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    // oracle: betas from the closed-form linspace, running product of 1 − β
    let mut prod = 1.0f64;
    let mut worst = 0.0f64;
    for (t, ab) in s.alpha_bars().iter().enumerate() {
        let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
        prod *= 1.0 - beta;
        worst = worst.max((ab - prod).abs());
    }
    ensure!(worst < 1e-6, "max |alpha_bar - oracle| = {worst:e}");
    let ab = s.alpha_bars();
    ensure!(
        ab.windows(2).all(|w| w[1] < w[0]),
        "alpha_bar not strictly decreasing"
    );
    ensure!(
        s.betas().windows(2).all(|w| w[1] > w[0]),
        "beta not increasing"
    );
    within(Duration::from_secs(1), took, "schedule")?;
    Ok(format!("max error {worst:.1e}, monotone, {took:.1?}"))
}

fn c2_moments() -> Outcome {
    let t0 = Instant::now();
    let s = make_linear_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let n = 10_000;
    let z0_value = 0.8f32;
    let z0 = Tensor::full(&[n], z0_value);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for t in [0, 250, 500, 750, 999] {
        let eps = Tensor::randn(&[n], &mut rng);
        let zt = q_sample(&z0, t, &eps, &s).map_err(|e| e.to_string())?;
        let xs: Vec<f64> = zt.data().iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bars()[t];
        let (want_mean, want_var) = (ab.sqrt() * z0_value as f64, 1.0 - ab);
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        let (zm, zv) = (
            (mean - want_mean).abs() / se_mean,
            (var - want_var).abs() / se_var,
        );
        ensure!(
            zm < 3.0 && zv < 3.0,
            "t={t}: mean off by {zm:.2} SE, variance off by {zv:.2} SE"
        );
        worst = worst.max(zm).max(zv);
    }
    let took = t0.elapsed();
    within(Duration::from_secs(10), took, "moment check")?;
    Ok(format!(
        "worst deviation {worst:.2} SE over 5 timesteps, {took:.1?}"
    ))
}

fn c3_ddim_determinism() -> Outcome {
    let m = ModelSet::load(&world().cfg).map_err(|e| e.to_string())?;
    let cond = m
        .text
        .encode_prompt("a picture of the prince in the forest", None)
        .map_err(|e| e.to_string())?;
    let sc = SampleConfig {
        steps: 100,
        guidance_scale: 7.5,
        eta: 0.0,
        seed: 42,
    };
    let t0 = Instant::now();
    let run =
        || sample(&m.net, &m.codec, &m.schedule, &cond, &sc, (8, 8)).map_err(|e| e.to_string());
    let (a, b) = (run()?, run()?);
    let took = t0.elapsed();
    ensure!(a.shape() == [3, 32, 32], "image shape {:?}", a.shape());
    ensure!(a.to_le_bytes() == b.to_le_bytes(), "two samples differ");
    within(Duration::from_secs(30), took, "two samples")?;
    Ok(format!("32×32, 100 steps, identical bytes, {took:.1?}"))
}

type OpCase = (
    &'static str,
    Tensor,
    Box<dyn Fn(&mut Graph, Var) -> Result<Var, NumericsError>>,
);

/// Mean of squares: keeps every objective O(1) so f32 round-off in the
/// central differences stays well under the tolerance.
fn square_mean(g: &mut Graph, y: Var) -> Result<Var, NumericsError> {
    let sq = g.mul(y, y)?;
    g.mean_all(sq)
}

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // entries bounded away from zero keep relu and sqrt differentiable
    let away = |shape: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::rand_uniform(shape, 0.3, 1.4, rng)
            .zip_map(&Tensor::rand_uniform(shape, -1.0, 1.0, rng), |a, s| {
                a * s.signum()
            })
            .unwrap()
    };
    let pos = Tensor::rand_uniform(&[2, 3], 0.5, 1.5, &mut rng);
    let mixed = away(&[2, 3], &mut rng);
    let row = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);
    let mat = Tensor::randn(&[3, 4], &mut rng);
    let img = Tensor::randn(&[1, 2, 5, 5], &mut rng);
    let ker = Tensor::randn(&[3, 2, 3, 3], &mut rng).scale(0.4);
    let img4 = Tensor::randn(&[1, 8, 2, 2], &mut rng);
    let logits = Tensor::randn(&[3, 4], &mut rng);
    let target = Tensor::randn(&[2, 3], &mut rng);

    let mut cases: Vec<OpCase> = Vec::new();
    for (name, op, at) in [
        ("neg", UnaryOp::Neg, mixed.clone()),
        ("exp", UnaryOp::Exp, mixed.clone()),
        ("sqrt", UnaryOp::Sqrt, pos.clone()),
        ("relu", UnaryOp::Relu, mixed.clone()),
        ("sigmoid", UnaryOp::Sigmoid, mixed.clone()),
        ("silu", UnaryOp::Silu, mixed.clone()),
        ("tanh", UnaryOp::Tanh, mixed.clone()),
        ("pow", UnaryOp::Pow(3.0), mixed.clone()),
    ] {
        cases.push((
            name,
            at,
            Box::new(move |g, x| {
                let y = g.unary(op, x)?;
                square_mean(g, y)
            }),
        ));
    }
    for (name, op) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        let r = row.clone();
        cases.push((
            name,
            pos.clone(),
            Box::new(move |g, x| {
                let b = g.constant(r.clone());
                let y = g.binary(op, x, b)?;
                square_mean(g, y)
            }),
        ));
        let l = pos.clone();
        cases.push((
            name,
            row.clone(),
            Box::new(move |g, x| {
                let a = g.constant(l.clone());
                let y = g.binary(op, a, x)?;
                square_mean(g, y)
            }),
        ));
        cases.push((
            name,
            pos.clone(),
            Box::new(move |g, x| {
                let y = g.binary_scalar(op, x, 1.3)?;
                square_mean(g, y)
            }),
        ));
    }
    let m = mat.clone();
    cases.push((
        "matmul",
        mixed.clone(),
        Box::new(move |g, x| {
            let b = g.constant(m.clone());
            let y = g.matmul(x, b)?;
            square_mean(g, y)
        }),
    ));
    let a = mixed.clone();
    cases.push((
        "matmul",
        mat.clone(),
        Box::new(move |g, w| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, w)?;
            square_mean(g, y)
        }),
    ));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let k = ker.clone();
        cases.push((
            "conv2d",
            img.clone(),
            Box::new(move |g, x| {
                let k = g.constant(k.clone());
                let y = g.conv2d(x, k, stride, pad)?;
                square_mean(g, y)
            }),
        ));
        let x0 = img.clone();
        cases.push((
            "conv2d",
            ker.clone(),
            Box::new(move |g, k| {
                let x = g.constant(x0.clone());
                let y = g.conv2d(x, k, stride, pad)?;
                square_mean(g, y)
            }),
        ));
    }
    let w = target.clone();
    cases.push((
        "reshape",
        mixed.clone(),
        Box::new(move |g, x| {
            let y = g.reshape(x, &[3, 2])?;
            let c = g.constant(w.reshape(&[3, 2])?);
            let y = g.mul(y, c)?;
            square_mean(g, y)
        }),
    ));
    let other = img.clone();
    cases.push((
        "concat",
        img.clone(),
        Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let y = g.concat(&[o, x], 1)?;
            let y = g.mul(y, y)?;
            let y = g.mul(y, y)?;
            g.mean_all(y)
        }),
    ));
    cases.push((
        "upsample",
        img.clone(),
        Box::new(|g, x| {
            let y = g.upsample(x, 2)?;
            let y = g.silu(y)?;
            g.mean_all(y)
        }),
    ));
    cases.push((
        "depth_to_space",
        img4.clone(),
        Box::new(|g, x| {
            let y = g.depth_to_space(x, 2)?;
            let y = g.unary(UnaryOp::Tanh, y)?;
            let p = g.avg_pool(y, 2)?;
            square_mean(g, p)
        }),
    ));
    cases.push((
        "space_to_depth",
        img.clone(),
        Box::new(|g, x| {
            let y = g.upsample(x, 2)?;
            let y = g.space_to_depth(y, 2)?;
            let y = g.sigmoid(y)?;
            g.mean_all(y)
        }),
    ));
    cases.push((
        "avg_pool",
        img.clone(),
        Box::new(|g, x| {
            let y = g.upsample(x, 2)?;
            let y = g.avg_pool(y, 5)?;
            let y = g.unary(UnaryOp::Tanh, y)?;
            square_mean(g, y)
        }),
    ));
    cases.push((
        "mean_spatial",
        img.clone(),
        Box::new(|g, x| {
            let y = g.unary(UnaryOp::Tanh, x)?;
            let y = g.mean_spatial(y)?;
            square_mean(g, y)
        }),
    ));
    cases.push((
        "sum_all/mean_all",
        mixed.clone(),
        Box::new(|g, x| {
            let s = g.sum_all(x)?;
            let y = g.unary(UnaryOp::Tanh, x)?;
            let m = g.mean_all(y)?;
            let p = g.mul(s, m)?;
            g.mul(p, p)
        }),
    ));
    cases.push((
        "cross_entropy",
        logits.clone(),
        Box::new(|g, x| g.cross_entropy(x, &[0, 3, 1])),
    ));
    let tgt = target.clone();
    cases.push((
        "mse",
        mixed.clone(),
        Box::new(move |g, x| {
            let t = g.constant(tgt.clone());
            g.mse(x, t)
        }),
    ));
    cases
}

/// Tiny denoiser and encoder, briefly trained so the conditioning path
/// carries signal.
fn tiny_inversion_instance() -> (
    DenoiserNet,
    TextEncoder,
    Vec<Tensor>,
    storybook_core::schedule::NoiseSchedule,
) {
    let schedule = make_linear_schedule(50, 1e-4, 0.02).unwrap();
    let enc = TextEncoder::new(
        Vocabulary::new(&["a", "portrait", "of", "person", "king"]),
        TextEncoderConfig {
            embed_dim: 6,
            cond_dim: 8,
            seed: 1,
        },
    );
    let mut net = DenoiserNet::new(DenoiserConfig {
        latent_channels: 4,
        base: 4,
        time_dim: 8,
        cond_dim: 8,
        seed: 2,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let latents: Vec<Tensor> = (0..16)
        .map(|_| Tensor::randn(&[4, 4, 4], &mut rng))
        .collect();
    let conds: Vec<Tensor> = (0..16)
        .map(|i| {
            enc.encode_prompt(
                if i % 2 == 0 {
                    "a portrait of person"
                } else {
                    "a portrait of king"
                },
                None,
            )
            .unwrap()
        })
        .collect();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    train_on_latents(&mut net, &latents, &conds, &schedule, &tc).unwrap();
    (net, enc, latents[..2].to_vec(), schedule)
}

fn c4_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f32, "");
    let cases = op_cases();
    let count = cases.len();
    for (name, at, f) in cases {
        let err = grad_check(|g, x| f(g, x), &at, 3e-3).map_err(|e| format!("{name}: {e}"))?;
        ensure!(err < 1e-3, "{name}: relative error {err:e}");
        if err > worst.0 {
            worst = (err, name);
        }
    }
    // inversion loss wrt v_star against central differences
    let (net, enc, latents, schedule) = tiny_inversion_instance();
    let v = enc
        .embedding(enc.vocab.id("person").unwrap())
        .map_err(|e| e.to_string())?;
    let loss = |v: &Tensor| {
        inversion_loss_and_grad(&net, &enc, "a portrait of S*", &latents, 9, 4, &schedule, v)
    };
    let (_, analytic) = loss(&v).map_err(|e| e.to_string())?;
    ensure!(
        analytic.sq_norm() > 0.0,
        "inversion gradient is identically zero"
    );
    let h = 1e-2f32;
    let mut inv_err = 0.0f32;
    for i in 0..v.numel() {
        let (mut p, mut m) = (v.clone(), v.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        let num = (loss(&p).unwrap().0 as f64 - loss(&m).unwrap().0 as f64) / (2.0 * h as f64);
        let a = analytic.data()[i] as f64;
        inv_err = inv_err.max(((a - num).abs() / a.abs().max(1.0)) as f32);
    }
    ensure!(
        inv_err < 1e-3,
        "inversion loss gradient: relative error {inv_err:e}"
    );
    let took = t0.elapsed();
    within(Duration::from_secs(60), took, "gradient suite")?;
    Ok(format!(
        "{count} op checks (worst {:.1e} in {}), inversion {inv_err:.1e}, {took:.1?}",
        worst.0, worst.1
    ))
}

fn c5_codec() -> Outcome {
    let w = world();
    ensure!(
        w.codec_heldout_mse < 0.01,
        "held-out MSE {}",
        w.codec_heldout_mse
    );
    within(Duration::from_secs(600), w.codec_train, "codec training")?;
    Ok(format!(
        "held-out MSE {:.5}, trained in {:.1?}",
        w.codec_heldout_mse, w.codec_train
    ))
}

fn c6_inversion() -> Outcome {
    let w = world();
    let files: Vec<PathBuf> = ["codec", "denoiser", "encoder"]
        .iter()
        .map(|n| w.root.join(format!("models/{n}.ckpt")))
        .collect();
    let before_bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let m = ModelSet::load(&w.cfg).map_err(|e| e.to_string())?;
    let before = m.fingerprints();
    let (path, ratio) = embedding();
    let after = m.fingerprints();
    ensure!(before == after, "frozen fingerprints changed");
    for (f, b) in files.iter().zip(&before_bytes) {
        ensure!(
            &std::fs::read(f).unwrap() == b,
            "{} changed on disk",
            f.display()
        );
    }
    let emb = IdentityEmbedding::load(path).map_err(|e| e.to_string())?;
    let d = m.text.embed_dim();
    ensure!(
        emb.v_star.shape() == [d],
        "v_star shape {:?}",
        emb.v_star.shape()
    );
    // installing v_star touches exactly the placeholder row: d floats
    let with = m
        .text
        .with_placeholder(&emb.v_star)
        .map_err(|e| e.to_string())?;
    let changed = with
        .table
        .data()
        .iter()
        .zip(m.text.table.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    ensure!(
        changed <= d,
        "{changed} table floats differ, expected at most {d}"
    );
    ensure!(
        with.projection.bit_eq(&m.text.projection),
        "projection changed"
    );
    ensure!(*ratio <= 0.8, "final/initial loss ratio {ratio:.3} > 0.8");
    Ok(format!(
        "loss ratio {ratio:.3}, fingerprints unchanged, {d} trainable floats"
    ))
}

fn c7_background() -> Outcome {
    let w = world();
    let m = ModelSet::load(&w.cfg).map_err(|e| e.to_string())?;
    let emb = IdentityEmbedding::load(&embedding().0).map_err(|e| e.to_string())?;
    let b = &w.cfg.config.bench;
    let fixtures = make_fixtures(
        b.fixtures,
        0,
        w.cfg.config.mask.dilate.max(1),
        b.fixture_seed,
    )
    .map_err(|e| e.to_string())?;
    ensure!(fixtures.len() >= 5, "{} fixtures", fixtures.len());
    let guard = m.codec.background_guard();
    let mut checked = 0;
    let mut baseline_min = f32::INFINITY;
    for fx in &fixtures {
        let source = m.codec.encode(&fx.image).map_err(|e| e.to_string())?;
        let reference = m.codec.decode(&source).map_err(|e| e.to_string())?;
        for n in [1, 4, 8] {
            let ic = InjectionConfig {
                cycles: n,
                ..w.cfg.config.injection.clone()
            };
            let out = inject_identity(&fx.image, &b.prompt_star, &emb, &fx.mask, &ic, m.models())
                .map_err(|e| e.to_string())?;
            let lm = &out.latent_mask;
            let hw = lm.height() * lm.width();
            let outside = |i: usize| !lm.cells()[i % hw];
            let z = out.final_latent.z.data();
            for i in (0..z.len()).filter(|&i| outside(i)) {
                ensure!(
                    z[i].to_bits() == out.z_nf.data()[i].to_bits()
                        && z[i].to_bits() == source.z.data()[i].to_bits(),
                    "{} N={n}: latent differs from z_nf at {i}",
                    fx.name
                );
            }
            let bg = bg_preservation_error(&reference, &out.image, &fx.mask, guard)
                .map_err(|e| e.to_string())?;
            ensure!(!bg.empty, "{}: nothing outside the guarded mask", fx.name);
            ensure!(
                bg.mse == 0.0,
                "{} N={n}: decoded background MSE {}",
                fx.name,
                bg.mse
            );
            checked += 1;
        }
        let sampling = SampleConfig {
            steps: b.injection.steps,
            guidance_scale: b.injection.guidance_scale,
            eta: 0.0,
            seed: b.injection.seed,
        };
        let clf = classifier();
        let (_, row) = baseline_textual_inversion(
            fx,
            &b.prompt_star,
            &emb,
            &sampling,
            guard,
            m.models(),
            &clf,
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            row.bg_mse > 0.01,
            "{}: baseline background MSE only {}",
            fx.name,
            row.bg_mse
        );
        baseline_min = baseline_min.min(row.bg_mse);
    }
    Ok(format!(
        "{checked} injections bit-exact outside the mask (guard {guard}px); baseline bg MSE ≥ {baseline_min:.3}"
    ))
}

fn classifier() -> storybook_core::bench::IdentityClassifier {
    let w = world();
    let p = w.cfg.resolve(&w.cfg.config.models.classifier);
    if !p.is_file() {
        cmd_train(TrainKind::Classifier, None, &w.cfg, None).unwrap();
    }
    storybook_core::pipeline::load_classifier(&p).unwrap()
}

fn c8_cycles() -> Outcome {
    let w = world();
    let (emb, _) = embedding();
    let t0 = Instant::now();
    let s = cmd_bench(&w.cfg, emb, &w.root.join("bench")).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let b = &w.cfg.config.bench;
    ensure!(
        b.fixtures >= 5 && b.n_values == (1..=8).collect::<Vec<_>>(),
        "sweep settings {b:?}"
    );
    ensure!(
        s.classifier_accuracy >= 0.95,
        "classifier held-out accuracy {}",
        s.classifier_accuracy
    );
    ensure!(
        s.mean_spearman >= 0.8,
        "mean Spearman {:.3} < 0.8",
        s.mean_spearman
    );
    within(Duration::from_secs(900), took, "bench")?;
    Ok(format!(
        "mean Spearman {:.3} over {} fixtures, classifier accuracy {:.3}, {took:.1?}",
        s.mean_spearman, b.fixtures, s.classifier_accuracy
    ))
}

fn c9_golden() -> Outcome {
    let raw =
        std::fs::read_to_string(common::fixture("little_prince.txt")).map_err(|e| e.to_string())?;
    let story =
        Story::parse("The Little Prince", &raw, 1, Some("prince")).map_err(|e| e.to_string())?;
    let fb = story_prompts(&LlmBackend::fallback(), &story, &PromptConfig::default())
        .map_err(|e| e.to_string())?;
    let want = std::fs::read_to_string(common::golden("little_prince_fallback.json"))
        .map_err(|e| e.to_string())?;
    ensure!(
        records_to_json(&fb) == want,
        "fallback records differ from golden"
    );

    let mock = common::MockLlm::start(common::Reply::Table(common::worked_example_table()));
    let ex = Story::parse("elephants", common::ELEPHANTS, 1, Some("prince"))
        .map_err(|e| e.to_string())?;
    let remote = story_prompts(
        &LlmBackend::remote(&mock.url),
        &ex,
        &PromptConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let want = std::fs::read_to_string(common::golden("worked_example.json"))
        .map_err(|e| e.to_string())?;
    ensure!(
        records_to_json(&remote) == want,
        "remote worked example differs from golden"
    );
    ensure!(
        remote[0].description == common::ELEPHANTS_DESCRIBED,
        "description {:?}",
        remote[0].description
    );
    ensure!(
        remote[0].summary == common::ELEPHANTS_SUMMARY,
        "summary {:?}",
        remote[0].summary
    );
    let local = story_prompts(&LlmBackend::fallback(), &ex, &PromptConfig::default())
        .map_err(|e| e.to_string())?;
    ensure!(
        local == remote,
        "fallback disagrees with the remote worked example"
    );
    Ok(format!(
        "{} fallback records and the worked example match byte for byte",
        fb.len()
    ))
}

fn c10_storybook() -> Outcome {
    let w = world();
    let story = common::fixture("little_prince.txt");
    let (a, b) = (w.root.join("run_a"), w.root.join("run_b"));
    let t0 = Instant::now();
    let ma = cmd_storybook(&story, &w.ids, &w.cfg, &a).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let mb = cmd_storybook(&story, &w.ids, &w.cfg, &b).map_err(|e| e.to_string())?;
    ensure!(ma == mb, "manifests differ between runs");
    let mut compared = 0;
    for p in ma.artifact_paths().into_iter().filter(|p| *p != ma.timings) {
        ensure!(
            std::fs::read(a.join(p)).ok() == std::fs::read(b.join(p)).ok(),
            "{p} differs between runs"
        );
        compared += 1;
    }
    check_manifest(&ma, &a, w)?;
    // resuming a finished run changes nothing
    let before = std::fs::read(a.join("manifest.json")).map_err(|e| e.to_string())?;
    cmd_storybook(&story, &w.ids, &w.cfg, &a).map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(a.join("manifest.json")).ok() == Some(before),
        "resume rewrote the manifest"
    );
    within(Duration::from_secs(1200), took, "storybook")?;
    Ok(format!("5 scenes in {took:.1?}; {compared} artifacts byte-identical on rerun; manifest invariants hold"))
}

fn check_manifest(m: &RunManifest, dir: &Path, w: &World) -> Result<(), String> {
    m.verify(dir).map_err(|e| e.to_string())?;
    ensure!(
        RunManifest::load(&dir.join("manifest.json")).ok().as_ref() == Some(m),
        "manifest.json does not parse back"
    );
    ensure!(m.scenes.len() == 5, "{} scenes", m.scenes.len());
    ensure!(m.stages == STAGES, "stages {:?}", m.stages);
    ensure!(
        m.llm.kind == "fallback" && m.llm.temperature == 0.5 && m.llm.top_p == 1.0,
        "llm {:?}",
        m.llm
    );
    let c = &w.cfg.config;
    ensure!(
        m.seeds.generation == c.generation.seed && m.seeds.injection == c.injection.seed,
        "seeds {:?}",
        m.seeds
    );
    ensure!(m.cycles == c.injection.cycles, "cycles {}", m.cycles);
    let models = ModelSet::load(&w.cfg).map_err(|e| e.to_string())?;
    let fps: Vec<(String, String)> = models
        .fingerprints()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    ensure!(
        m.checkpoints == fps,
        "checkpoint fingerprints differ from the loaded models"
    );
    let story = std::fs::read(dir.join(&m.story_file)).map_err(|e| e.to_string())?;
    ensure!(
        story == std::fs::read(common::fixture("little_prince.txt")).unwrap(),
        "story copy differs"
    );
    for (i, s) in m.scenes.iter().enumerate() {
        ensure!(s.index == i, "scene order");
        ensure!(
            s.injected == s.edited_prompt.is_some(),
            "scene {i}: injected flag"
        );
        ensure!(s.mask.is_some() == s.injected, "scene {i}: mask presence");
        if s.injected {
            ensure!(
                s.background_exact == Some(true),
                "scene {i}: background not exact"
            );
            ensure!(
                s.edited_prompt
                    .as_deref()
                    .is_some_and(|p| p.matches("S*").count() == 1),
                "scene {i}: placeholder"
            );
        }
        let img =
            storybook_core::image_io::load_png(&dir.join(&s.image)).map_err(|e| e.to_string())?;
        ensure!(
            img.shape() == [3, 32, 32],
            "scene {i}: image shape {:?}",
            img.shape()
        );
    }
    Ok(())
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("schedule oracle", c1_schedule),
        ("q_sample moments", c2_moments),
        ("DDIM determinism", c3_ddim_determinism),
        ("gradient suite", c4_gradients),
        ("codec reconstruction", c5_codec),
        ("textual inversion", c6_inversion),
        ("background preservation", c7_background),
        ("cycle monotonicity", c8_cycles),
        ("prompt golden files", c9_golden),
        ("end-to-end storybook", c10_storybook),
    ];
    let (mut ran, mut failed) = (0, 0);
    // ACCEPTANCE_ONLY=k runs a single criterion while iterating
    for (i, (name, f)) in criteria
        .iter()
        .enumerate()
        .filter(|(i, _)| only.is_none_or(|k| k == i + 1))
    {
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
