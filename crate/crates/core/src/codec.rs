//! Latent autoencoder. Both halves work at latent resolution: the encoder folds
//! each f×f pixel block into channels, the decoder unfolds sub-pixel channels
//! back into blocks. A single 3×3 convolution in the decoder keeps its
//! receptive field to one neighbouring latent cell.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, Bound, Conv, ParamSet};
use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image {h}x{w} is not divisible by factor {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f32),
    #[error("expected shape {want}, got {got:?}")]
    Shape { want: String, got: Vec<usize> },
    #[error("latent was produced by codec {found}, not {expected}")]
    Mismatch { expected: String, found: String },
    #[error("need at least {need} training images, got {got}")]
    TooFewImages { need: usize, got: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f32,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            hidden: 64,
            seed: 0,
        }
    }
}

/// Encoded image, tagged with the codec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub z: Tensor,
    pub source_shape: (usize, usize),
    pub codec_id: String,
}

#[derive(Debug)]
pub struct LatentCodec {
    config: CodecConfig,
    params: ParamSet,
    enc: [Conv; 3],
    dec: [Conv; 3],
    /// Multiplies raw encoder output so latents have roughly unit variance.
    latent_scale: f32,
    id: String,
    encodes: AtomicUsize,
    decodes: AtomicUsize,
}

impl Clone for LatentCodec {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            enc: self.enc,
            dec: self.dec,
            latent_scale: self.latent_scale,
            id: self.id.clone(),
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        }
    }
}

impl LatentCodec {
    pub fn new(config: CodecConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let (f, c, h) = (config.factor, config.latent_channels, config.hidden);
        let enc = [
            Conv::new(&mut ps, "enc.0", 3 * f * f, h, 3, &mut rng),
            Conv::new(&mut ps, "enc.1", h, h, 1, &mut rng),
            Conv::new(&mut ps, "enc.2", h, c, 1, &mut rng),
        ];
        let dec = [
            Conv::new(&mut ps, "dec.0", c, h, 3, &mut rng),
            Conv::new(&mut ps, "dec.1", h, h, 1, &mut rng),
            Conv::new(&mut ps, "dec.2", h, 3 * f * f, 1, &mut rng),
        ];
        let mut codec = Self {
            config,
            params: ps,
            enc,
            dec,
            latent_scale: 1.0,
            id: String::new(),
            encodes: AtomicUsize::new(0),
            decodes: AtomicUsize::new(0),
        };
        codec.refresh_id();
        codec
    }

    /// Rebuilds a codec from stored parameters.
    pub fn from_parts(
        config: CodecConfig,
        params: &ParamSet,
        latent_scale: f32,
    ) -> Result<Self, CodecError> {
        let mut codec = Self::new(config);
        codec.params.load_from(params)?;
        codec.latent_scale = latent_scale;
        codec.refresh_id();
        Ok(codec)
    }

    fn refresh_id(&mut self) {
        let mut p = self.params.clone();
        p.push("latent_scale", Tensor::scalar(self.latent_scale));
        self.id = p.fingerprint()[..16].to_string();
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn latent_scale(&self) -> f32 {
        self.latent_scale
    }

    pub fn factor(&self) -> usize {
        self.config.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// `(encode, decode)` calls since construction.
    pub fn call_counts(&self) -> (usize, usize) {
        (
            self.encodes.load(Ordering::Relaxed),
            self.decodes.load(Ordering::Relaxed),
        )
    }

    fn encoder_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let x = g.mul_scalar(x, 2.0)?;
        let x = g.add_scalar(x, -1.0)?;
        let h = g.space_to_depth(x, self.config.factor)?;
        let h = self.enc[0].forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.enc[1].forward(g, p, h)?;
        let h = g.silu(h)?;
        self.enc[2].forward(g, p, h)
    }

    fn decoder_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, NumericsError> {
        let h = self.dec[0].forward(g, p, z)?;
        let h = g.silu(h)?;
        let h = self.dec[1].forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.dec[2].forward(g, p, h)?;
        let x = g.depth_to_space(h, self.config.factor)?;
        let x = g.mul_scalar(x, 0.5)?;
        g.add_scalar(x, 0.5)
    }

    fn check_image(&self, x: &Tensor) -> Result<(usize, usize), CodecError> {
        let &[3, h, w] = x.shape() else {
            return Err(CodecError::Shape {
                want: "[3, H, W]".into(),
                got: x.shape().to_vec(),
            });
        };
        let f = self.config.factor;
        if h % f != 0 || w % f != 0 {
            return Err(CodecError::Indivisible { h, w, factor: f });
        }
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CodecError::OutOfRange(*v));
        }
        Ok((h, w))
    }

    /// Deterministic latent of an image in `[0, 1]`.
    pub fn encode(&self, x: &Tensor) -> Result<LatentImage, CodecError> {
        let (h, w) = self.check_image(x)?;
        self.encodes.fetch_add(1, Ordering::Relaxed);
        let mut z = self.encode_raw(std::slice::from_ref(x))?;
        Ok(LatentImage {
            z: z.pop().expect("one latent"),
            source_shape: (h, w),
            codec_id: self.id.clone(),
        })
    }

    /// Batched encode for dataset preparation; not counted as pipeline calls.
    pub fn encode_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>, CodecError> {
        for x in xs {
            self.check_image(x)?;
        }
        self.encode_raw(xs)
    }

    fn encode_raw(&self, xs: &[Tensor]) -> Result<Vec<Tensor>, CodecError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::stack(xs)?);
        let z = self.encoder_graph(&mut g, &p, x)?;
        let z = g.value(z).scale(self.latent_scale);
        (0..xs.len()).map(|i| Ok(z.index0(i)?)).collect()
    }

    pub fn decode(&self, z: &LatentImage) -> Result<Tensor, CodecError> {
        if z.codec_id != self.id {
            return Err(CodecError::Mismatch {
                expected: self.id.clone(),
                found: z.codec_id.clone(),
            });
        }
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let mut out = self.decode_batch(std::slice::from_ref(&z.z))?;
        Ok(out.pop().expect("one image"))
    }

    /// Decodes bare latent tensors `[c, h, w]`; output clamped to `[0, 1]`.
    pub fn decode_batch(&self, zs: &[Tensor]) -> Result<Vec<Tensor>, CodecError> {
        let c = self.config.latent_channels;
        for z in zs {
            if z.ndim() != 3 || z.shape()[0] != c {
                return Err(CodecError::Shape {
                    want: format!("[{c}, h, w]"),
                    got: z.shape().to_vec(),
                });
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = Tensor::stack(zs)?.scale(1.0 / self.latent_scale);
        let z = g.constant(z);
        let x = self.decoder_graph(&mut g, &p, z)?;
        let x = g.value(x).map(|v| v.clamp(0.0, 1.0));
        (0..zs.len()).map(|i| Ok(x.index0(i)?)).collect()
    }

    /// Wraps a latent tensor produced outside [`Self::encode`] (e.g. by sampling).
    pub fn wrap(&self, z: Tensor) -> LatentImage {
        let f = self.config.factor;
        let (h, w) = (z.shape()[1] * f, z.shape()[2] * f);
        LatentImage {
            z,
            source_shape: (h, w),
            codec_id: self.id.clone(),
        }
    }

    /// Largest Chebyshev distance, in pixels, from a decoded pixel to the
    /// nearest pixel of any latent cell it depends on.
    pub fn receptive_radius(&self) -> usize {
        // walking back from one output pixel: the unfold maps it to its own
        // cell, the 1×1 convs add nothing, the k×k conv reaches k/2 cells out
        let f = self.config.factor;
        let spread = (self.dec[0].k / 2) as isize;
        let mut worst = 0;
        for p in 0..f as isize {
            for cell in -spread..=spread {
                let (lo, hi) = (cell * f as isize, cell * f as isize + f as isize - 1);
                let d = if p < lo {
                    lo - p
                } else if p > hi {
                    p - hi
                } else {
                    0
                };
                worst = worst.max(d as usize);
            }
        }
        worst
    }

    /// Pixel guard that keeps a decoded pixel independent of every latent cell
    /// touched by the mask: receptive radius plus cell quantization.
    pub fn background_guard(&self) -> usize {
        self.receptive_radius() + self.config.factor - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub holdout_fraction: f32,
    pub seed: u64,
    pub min_images: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            holdout_fraction: 0.1,
            seed: 0,
            min_images: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f32>,
    pub heldout_mse: f32,
    pub latent_scale: f32,
}

/// Per-pixel reconstruction MSE over a set of images.
impl CodecTrainConfig {
    /// Number of leading images held out from training.
    pub fn holdout_len(&self, n: usize) -> usize {
        ((n as f32 * self.holdout_fraction) as usize).max(1)
    }
}

pub fn reconstruction_mse(codec: &LatentCodec, images: &[Tensor]) -> Result<f32, CodecError> {
    let mut total = 0.0f64;
    for chunk in images.chunks(64) {
        let zs = codec.encode_batch(chunk)?;
        let xs = codec.decode_batch(&zs)?;
        for (a, b) in chunk.iter().zip(&xs) {
            total += a.mse(b)? as f64;
        }
    }
    Ok((total / images.len().max(1) as f64) as f32)
}

pub fn train_codec(
    images: &[Tensor],
    config: CodecConfig,
    tc: &CodecTrainConfig,
) -> Result<(LatentCodec, CodecReport), CodecError> {
    if images.len() < tc.min_images {
        return Err(CodecError::TooFewImages {
            need: tc.min_images,
            got: images.len(),
        });
    }
    let mut codec = LatentCodec::new(config);
    for x in images {
        codec.check_image(x)?;
    }
    let n_hold = tc.holdout_len(images.len());
    let (held, train) = images.split_at(n_hold);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::new(&codec.params, tc.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        // cosine decay to a tenth of the base rate
        let frac = epoch as f32 / tc.epochs.max(1) as f32;
        opt.lr = tc.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos()));
        let mut sum = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<Tensor> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let p = codec.params.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&batch)?);
            let z = codec.encoder_graph(&mut g, &p, x)?;
            let y = codec.decoder_graph(&mut g, &p, z)?;
            let loss = g.mse(y, x)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(CodecError::Diverged {
                    epoch,
                    step,
                    loss: lv,
                });
            }
            g.backward(loss)?;
            opt.step(&mut codec.params, &g, &p)?;
            sum += lv;
            batches += 1;
        }
        let mean = sum / batches as f32;
        info!("codec epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    // unit-variance latents for the diffusion model
    let raw = codec.encode_raw(train)?;
    let n: usize = raw.iter().map(|z| z.numel()).sum();
    let mean = raw.iter().map(|z| z.sum() as f64).sum::<f64>() / n as f64;
    let var = raw
        .iter()
        .flat_map(|z| z.data().iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    codec.latent_scale = (1.0 / var.sqrt().max(1e-6)) as f32;
    codec.refresh_id();
    let heldout_mse = reconstruction_mse(&codec, held)?;
    info!("codec held-out mse {heldout_mse:.6}");
    Ok((
        codec.clone(),
        CodecReport {
            loss_curve: curve,
            heldout_mse,
            latent_scale: codec.latent_scale,
        },
    ))
}
