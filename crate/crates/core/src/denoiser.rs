//! Conditional noise predictor ε_θ(z_t, t, c): a small U-Net over the latent
//! grid with time and text conditioning added to every block.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, LatentCodec};
use crate::nn::{timestep_embedding, Adam, Bound, Conv, Ema, Linear, ParamSet};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::schedule::{
    ddim_step, q_sample, subsequence, DdimStepSpec, NoiseSchedule, ScheduleError,
};
use crate::textcond::{TextEncoder, TextError};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("timestep {t} outside schedule of {steps}")]
    Timestep { t: usize, steps: usize },
    #[error("training loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base: 32,
            time_dim: 32,
            cond_dim: 32,
            seed: 0,
        }
    }
}

/// Conv block whose features receive a per-channel shift from the embedding.
#[derive(Clone, Copy, Debug)]
struct Block {
    conv: Conv,
    emb: Linear,
}

impl Block {
    fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(ps, &format!("{name}.conv"), cin, cout, 3, rng),
            emb: Linear::new(ps, &format!("{name}.emb"), emb_dim, cout, rng),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        emb: Var,
        b: usize,
    ) -> Result<Var, NumericsError> {
        let h = self.conv.forward(g, p, x)?;
        let shift = self.emb.forward(g, p, emb)?;
        let c = g.shape(shift)[1];
        let shift = g.reshape(shift, &[b, c, 1, 1])?;
        let h = g.add(h, shift)?;
        g.silu(h)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamSet,
    time_mlp: Linear,
    cond_mlp: Linear,
    conv_in: Conv,
    down0: Block,
    down1: Block,
    mid: Block,
    up1: Block,
    up0: Block,
    conv_out: Conv,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let (c, b) = (config.latent_channels, config.base);
        let emb = 2 * b;
        let time_mlp = Linear::new(&mut ps, "time", config.time_dim, emb, &mut rng);
        let cond_mlp = Linear::new(&mut ps, "cond", config.cond_dim, emb, &mut rng);
        let conv_in = Conv::new(&mut ps, "in", c, b, 3, &mut rng);
        let down0 = Block::new(&mut ps, "down0", b, b, emb, &mut rng);
        let down1 = Block::new(&mut ps, "down1", b, 2 * b, emb, &mut rng);
        let mid = Block::new(&mut ps, "mid", 2 * b, 2 * b, emb, &mut rng);
        let up1 = Block::new(&mut ps, "up1", 4 * b, 2 * b, emb, &mut rng);
        let up0 = Block::new(&mut ps, "up0", 3 * b, b, emb, &mut rng);
        let conv_out = Conv::new(&mut ps, "out", b, c, 3, &mut rng);
        conv_out.scale_init(&mut ps, 0.0);
        Self {
            config,
            params: ps,
            time_mlp,
            cond_mlp,
            conv_in,
            down0,
            down1,
            mid,
            up1,
            up0,
            conv_out,
        }
    }

    pub fn from_parts(config: DenoiserConfig, params: &ParamSet) -> Result<Self, DenoiserError> {
        let mut net = Self::new(config);
        net.params.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn null_cond(&self) -> Tensor {
        Tensor::zeros(&[self.config.cond_dim])
    }

    /// `z: [B, c, h, w]`, `cond: [B, cond_dim]` → ε̂ `[B, c, h, w]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        z: Var,
        ts: &[usize],
        cond: Var,
    ) -> Result<Var, NumericsError> {
        let b = ts.len();
        let temb = g.constant(timestep_embedding(ts, self.config.time_dim));
        let te = self.time_mlp.forward(g, p, temb)?;
        let te = g.silu(te)?;
        let ce = self.cond_mlp.forward(g, p, cond)?;
        let emb = g.add(te, ce)?;

        let h0 = self.conv_in.forward(g, p, z)?;
        let h0 = self.down0.forward(g, p, h0, emb, b)?;
        let h1 = g.avg_pool(h0, 2)?;
        let h1 = self.down1.forward(g, p, h1, emb, b)?;
        let m = g.avg_pool(h1, 2)?;
        let m = self.mid.forward(g, p, m, emb, b)?;
        let u1 = g.upsample(m, 2)?;
        let u1 = g.concat(&[u1, h1], 1)?;
        let u1 = self.up1.forward(g, p, u1, emb, b)?;
        let u0 = g.upsample(u1, 2)?;
        let u0 = g.concat(&[u0, h0], 1)?;
        let u0 = self.up0.forward(g, p, u0, emb, b)?;
        self.conv_out.forward(g, p, u0)
    }

    fn check(
        &self,
        z: &Tensor,
        ts: &[usize],
        cond: &Tensor,
        steps: usize,
    ) -> Result<(), DenoiserError> {
        let c = self.config.latent_channels;
        let s = z.shape();
        if s.len() != 4
            || s[1] != c
            || s[0] != ts.len()
            || !s[2].is_multiple_of(4)
            || !s[3].is_multiple_of(4)
        {
            return Err(DenoiserError::Dimension(format!(
                "latent batch {s:?} for {} timesteps with {c} channels",
                ts.len()
            )));
        }
        if cond.shape() != [ts.len(), self.config.cond_dim] {
            return Err(DenoiserError::Dimension(format!(
                "conditioning {:?}, expected [{}, {}]",
                cond.shape(),
                ts.len(),
                self.config.cond_dim
            )));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= steps) {
            return Err(DenoiserError::Timestep { t, steps });
        }
        Ok(())
    }

    /// Batched inference.
    pub fn predict_eps_batch(
        &self,
        z: &Tensor,
        ts: &[usize],
        cond: &Tensor,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor, DenoiserError> {
        self.check(z, ts, cond, schedule.steps())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.clone());
        let out = self.forward_graph(&mut g, &p, zv, ts, cv)?;
        Ok(g.value(out).clone())
    }

    /// ε̂ for a single latent `[c, h, w]` and conditioning vector.
    pub fn predict_eps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor, DenoiserError> {
        let z = Tensor::stack(std::slice::from_ref(z_t))?;
        let c = cond
            .reshape(&[1, cond.numel()])
            .map_err(|_| DenoiserError::Dimension(format!("conditioning {:?}", cond.shape())))?;
        Ok(self.predict_eps_batch(&z, &[t], &c, schedule)?.index0(0)?)
    }

    /// Conditional and unconditional predictions in one batched pass, mixed
    /// with guidance `scale`.
    pub fn guided_eps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Tensor,
        scale: f32,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor, DenoiserError> {
        if scale == 1.0 {
            return self.predict_eps(z_t, t, cond, schedule);
        }
        let z = Tensor::stack(&[z_t.clone(), z_t.clone()])?;
        let c = Tensor::stack(&[cond.clone(), self.null_cond()])?;
        let both = self.predict_eps_batch(&z, &[t, t], &c, schedule)?;
        cfg_eps(&both.index0(0)?, &both.index0(1)?, scale)
    }
}

/// Classifier-free guidance: `uncond + scale·(cond − uncond)`.
pub fn cfg_eps(
    eps_cond: &Tensor,
    eps_uncond: &Tensor,
    scale: f32,
) -> Result<Tensor, DenoiserError> {
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub uncond_drop_prob: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 2e-3,
            uncond_drop_prob: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f32>,
    /// EMA(100) of the step losses, sampled at each epoch end.
    pub ema_curve: Vec<f32>,
}

/// Trains on pre-encoded latents `[c, h, w]` paired with conditioning vectors.
pub fn train_on_latents(
    net: &mut DenoiserNet,
    latents: &[Tensor],
    conds: &[Tensor],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport, DenoiserError> {
    if latents.len() != conds.len() {
        return Err(DenoiserError::Config(format!(
            "{} latents, {} conditioning vectors",
            latents.len(),
            conds.len()
        )));
    }
    if !(0.0..1.0).contains(&cfg.uncond_drop_prob) {
        return Err(DenoiserError::Config(format!(
            "uncond_drop_prob {} outside [0, 1)",
            cfg.uncond_drop_prob
        )));
    }
    if latents.is_empty() || cfg.batch_size == 0 {
        return Err(DenoiserError::Config(format!(
            "{} latents, batch {}",
            latents.len(),
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let null = net.null_cond();
    let mut ema = Ema::new(0.99);
    let mut report = TrainReport {
        losses: Vec::new(),
        ema_curve: Vec::new(),
    };
    let total_steps = cfg.epochs * latents.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let step = report.losses.len();
            // cosine decay to a tenth of the base rate
            let frac = step as f32 / total_steps.max(1) as f32;
            opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos()));
            let mut zt = Vec::with_capacity(idx.len());
            let mut eps = Vec::with_capacity(idx.len());
            let mut cs = Vec::with_capacity(idx.len());
            let mut ts = Vec::with_capacity(idx.len());
            for &i in idx {
                let t = rng.gen_range(0..schedule.steps());
                let e = Tensor::randn(latents[i].shape(), &mut rng);
                zt.push(q_sample(&latents[i], t, &e, schedule)?);
                eps.push(e);
                ts.push(t);
                cs.push(if rng.gen::<f32>() < cfg.uncond_drop_prob {
                    null.clone()
                } else {
                    conds[i].clone()
                });
            }
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let z = g.constant(Tensor::stack(&zt)?);
            let c = g.constant(Tensor::stack(&cs)?);
            let target = g.constant(Tensor::stack(&eps)?);
            let pred = net.forward_graph(&mut g, &p, z, &ts, c)?;
            let loss = g.mse(pred, target)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(DenoiserError::Diverged(step));
            }
            g.backward(loss)?;
            opt.step(&mut net.params, &g, &p)?;
            report.losses.push(lv);
            ema.update(lv);
        }
        let e = ema.get().unwrap_or(f32::NAN);
        info!("denoiser epoch {epoch}: ema loss {e:.5}");
        report.ema_curve.push(e);
    }
    Ok(report)
}

/// Encodes `(image, caption)` pairs with the frozen codec and text encoder,
/// then trains.
pub fn train_denoiser(
    net: &mut DenoiserNet,
    codec: &LatentCodec,
    text: &TextEncoder,
    dataset: &[(Tensor, String)],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport, DenoiserError> {
    let images: Vec<Tensor> = dataset.iter().map(|(x, _)| x.clone()).collect();
    let mut latents = Vec::with_capacity(images.len());
    for chunk in images.chunks(128) {
        latents.extend(codec.encode_batch(chunk)?);
    }
    let conds = dataset
        .iter()
        .map(|(_, c)| text.encode_prompt(c, None))
        .collect::<Result<Vec<_>, _>>()?;
    train_on_latents(net, &latents, &conds, schedule, cfg)
}

/// Mean ε-prediction error on fixed noisings of `latents`.
pub fn heldout_eps_loss(
    net: &DenoiserNet,
    latents: &[Tensor],
    conds: &[Tensor],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f32, DenoiserError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for (zc, cc) in latents.chunks(64).zip(conds.chunks(64)) {
        let mut zt = Vec::new();
        let mut eps = Vec::new();
        let mut ts = Vec::new();
        for z in zc {
            let t = rng.gen_range(0..schedule.steps());
            let e = Tensor::randn(z.shape(), &mut rng);
            zt.push(q_sample(z, t, &e, schedule)?);
            eps.push(e);
            ts.push(t);
        }
        let pred =
            net.predict_eps_batch(&Tensor::stack(&zt)?, &ts, &Tensor::stack(cc)?, schedule)?;
        total += pred.mse(&Tensor::stack(&eps)?)? as f64 * zc.len() as f64;
    }
    Ok((total / latents.len() as f64) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f32,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
        }
    }
}

/// DDIM with guidance from pure noise to a clean latent `[c, h, w]`.
pub fn sample_latent(
    net: &DenoiserNet,
    shape: &[usize],
    schedule: &NoiseSchedule,
    cond: &Tensor,
    cfg: &SampleConfig,
) -> Result<Tensor, DenoiserError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z = Tensor::randn(shape, &mut rng);
    for (t, prev) in subsequence(schedule.steps(), cfg.steps)? {
        let eps = net.guided_eps(&z, t, cond, cfg.guidance_scale, schedule)?;
        let spec = DdimStepSpec {
            t,
            prev,
            eta: cfg.eta,
        };
        let noise = (cfg.eta > 0.0).then(|| Tensor::randn(shape, &mut rng));
        z = ddim_step(&z, spec, &eps, schedule, noise.as_ref())?;
    }
    Ok(z)
}

/// Samples a latent and decodes it to an image.
pub fn sample(
    net: &DenoiserNet,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    cfg: &SampleConfig,
    latent_hw: (usize, usize),
) -> Result<Tensor, DenoiserError> {
    let shape = [codec.latent_channels(), latent_hw.0, latent_hw.1];
    let z = sample_latent(net, &shape, schedule, cond, cfg)?;
    Ok(codec.decode(&codec.wrap(z))?)
}
