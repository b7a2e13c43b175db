//! Iterative coherent identity injection: repeated noising and masked,
//! conditioned denoising of the face region, staying in latent space between
//! cycles while the background latent stays frozen.

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, LatentCodec, LatentImage};
use crate::denoiser::{DenoiserError, DenoiserNet};
use crate::mask::{downsample_mask, LatentMask, MaskError, PixelMask};
use crate::numerics::Tensor;
use crate::schedule::{
    ddim_step, q_sample, subsequence, DdimStepSpec, NoiseSchedule, Prev, ScheduleError,
};
use crate::textcond::{tokenize, IdentityEmbedding, TextEncoder, TextError, Vocabulary};

pub const MAX_CYCLES: usize = 32;

#[derive(Debug, Error)]
pub enum InjectError {
    #[error("prompt {0:?} does not contain the placeholder")]
    NoPlaceholder(String),
    #[error("incompatible models: {0}")]
    Incompatible(String),
    #[error("{cycles} cycles x {steps} steps exceeds the budget of {budget} denoiser calls")]
    Budget {
        cycles: usize,
        steps: usize,
        budget: usize,
    },
    #[error("invalid injection config: {0}")]
    Config(String),
    #[error("latent {latent:?} does not match mask {mask:?}")]
    Shape {
        latent: Vec<usize>,
        mask: (usize, usize),
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub cycles: usize,
    pub steps: usize,
    pub guidance_scale: f32,
    pub eta: f64,
    pub seed: u64,
    /// Fraction of the schedule each cycle noises to; 1 starts every cycle
    /// from the top of the schedule.
    pub strength: f64,
    /// Noise the frozen background to the current level instead of pasting
    /// it clean.
    pub noised_background: bool,
    /// Upper bound on `cycles · steps`.
    pub budget: usize,
    /// Keep the latent after every cycle.
    pub record_cycles: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            cycles: 4,
            steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            strength: 1.0,
            noised_background: false,
            budget: 1600,
            record_cycles: false,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<(), InjectError> {
        if self.cycles > MAX_CYCLES {
            return Err(InjectError::Config(format!(
                "cycles {} above {MAX_CYCLES}",
                self.cycles
            )));
        }
        if self.steps == 0 || self.steps > schedule_steps {
            return Err(InjectError::Config(format!(
                "steps {} outside 1..={schedule_steps}",
                self.steps
            )));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(InjectError::Config(format!(
                "strength {} outside (0, 1]",
                self.strength
            )));
        }
        if self.cycles * self.steps > self.budget {
            return Err(InjectError::Budget {
                cycles: self.cycles,
                steps: self.steps,
                budget: self.budget,
            });
        }
        Ok(())
    }

    /// Reverse steps of one cycle; the first entry is the cycle's noise level.
    pub fn cycle_steps(&self, schedule_steps: usize) -> Result<Vec<(usize, Prev)>, InjectError> {
        let top = ((self.strength * (schedule_steps - 1) as f64).round() as usize).max(1);
        Ok(subsequence(top + 1, self.steps.min(top + 1))?)
    }
}

/// Frozen models an injection reads.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub codec: &'a LatentCodec,
    pub net: &'a DenoiserNet,
    pub text: &'a TextEncoder,
    pub schedule: &'a NoiseSchedule,
}

impl Models<'_> {
    pub fn check_compatible(&self) -> Result<(), InjectError> {
        let nc = self.net.config();
        if nc.latent_channels != self.codec.latent_channels() {
            return Err(InjectError::Incompatible(format!(
                "denoiser expects {} latent channels, codec has {}",
                nc.latent_channels,
                self.codec.latent_channels()
            )));
        }
        if nc.cond_dim != self.text.cond_dim() {
            return Err(InjectError::Incompatible(format!(
                "denoiser expects conditioning of size {}, text encoder gives {}",
                nc.cond_dim,
                self.text.cond_dim()
            )));
        }
        Ok(())
    }
}

fn check_mask(z: &Tensor, m: &LatentMask) -> Result<(usize, usize), InjectError> {
    let s = z.shape();
    if s.len() != 3 || s[1] != m.height() || s[2] != m.width() {
        return Err(InjectError::Shape {
            latent: s.to_vec(),
            mask: (m.height(), m.width()),
        });
    }
    Ok((s[1], s[2]))
}

/// `z ⊙ (1 − m)`: zero inside the face cells, `z` elsewhere.
pub fn extract_background(z: &Tensor, m: &LatentMask) -> Result<Tensor, InjectError> {
    let (h, w) = check_mask(z, m)?;
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if m.cells()[i % (h * w)] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// `z ⊙ m + z_nf`, evaluated as a per-cell select so background values are
/// copied bit for bit.
pub fn composite(z: &Tensor, m: &LatentMask, z_nf: &Tensor) -> Result<Tensor, InjectError> {
    let (h, w) = check_mask(z, m)?;
    if z_nf.shape() != z.shape() {
        return Err(InjectError::Shape {
            latent: z_nf.shape().to_vec(),
            mask: (h, w),
        });
    }
    let mut out = z_nf.clone();
    for ((o, &zv), i) in out.data_mut().iter_mut().zip(z.data()).zip(0..) {
        if m.cells()[i % (h * w)] {
            *o = zv;
        }
    }
    Ok(out)
}

/// Everything the caller may want to inspect after an injection.
#[derive(Clone, Debug)]
pub struct InjectionOutput {
    pub image: Tensor,
    pub final_latent: LatentImage,
    pub z_nf: Tensor,
    pub latent_mask: LatentMask,
    /// Every composite left the background equal to `z_nf` bit for bit (in
    /// the level-matched mode only the final one is compared).
    pub background_exact: bool,
    pub cycle_latents: Vec<Tensor>,
}

fn cycle_rng(seed: u64, cycle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cycle as u64 + 1);
    rng
}

fn background_matches(z: &Tensor, m: &LatentMask, z_nf: &Tensor) -> bool {
    let hw = m.height() * m.width();
    z.data()
        .iter()
        .zip(z_nf.data())
        .enumerate()
        .all(|(i, (a, b))| m.cells()[i % hw] || a.to_bits() == b.to_bits())
}

/// Runs the injection on `x_en`, editing only the region under `mask`.
pub fn inject_identity(
    x_en: &Tensor,
    prompt_star: &str,
    v_star: &IdentityEmbedding,
    mask: &PixelMask,
    cfg: &InjectionConfig,
    models: Models<'_>,
) -> Result<InjectionOutput, InjectError> {
    models.check_compatible()?;
    let schedule = models.schedule;
    cfg.validate(schedule.steps())?;
    let ids = tokenize(&models.text.vocab, prompt_star);
    if !ids.contains(&Vocabulary::PLACEHOLDER_ID) {
        return Err(InjectError::NoPlaceholder(prompt_star.to_string()));
    }
    let cond = models.text.encode_text(&ids, Some(&v_star.v_star))?;
    let (h, w) = (x_en.shape().get(1).copied(), x_en.shape().get(2).copied());
    if (Some(mask.height()), Some(mask.width())) != (h, w) {
        return Err(MaskError::DimensionMismatch {
            got: (mask.height(), mask.width()),
            want: (h.unwrap_or(0), w.unwrap_or(0)),
        }
        .into());
    }

    let source = models.codec.encode(x_en)?;
    let m_f = downsample_mask(mask, models.codec.factor())?;
    let z_nf = extract_background(&source.z, &m_f)?;
    let steps = cfg.cycle_steps(schedule.steps())?;
    let t_top = steps[0].0;
    let shape = source.z.shape().to_vec();

    let mut z_init = source.z.clone();
    let mut exact = true;
    let mut cycle_latents = Vec::new();
    for cycle in 0..cfg.cycles {
        let mut rng = cycle_rng(cfg.seed, cycle);
        let eps = Tensor::randn(&shape, &mut rng);
        let z_t = q_sample(&z_init, t_top, &eps, schedule)?;
        let background = |level: Prev| -> Result<Tensor, InjectError> {
            match (cfg.noised_background, level) {
                (true, Prev::Step(t)) => Ok(extract_background(
                    &q_sample(&source.z, t, &eps, schedule)?,
                    &m_f,
                )?),
                _ => Ok(z_nf.clone()),
            }
        };
        let mut z = composite(&z_t, &m_f, &background(Prev::Step(t_top))?)?;
        for &(t, prev) in &steps {
            let e = models
                .net
                .guided_eps(&z, t, &cond, cfg.guidance_scale, schedule)?;
            let noise = (cfg.eta > 0.0).then(|| Tensor::randn(&shape, &mut rng));
            let spec = DdimStepSpec {
                t,
                prev,
                eta: cfg.eta,
            };
            z = ddim_step(&z, spec, &e, schedule, noise.as_ref())?;
            z = composite(&z, &m_f, &background(prev)?)?;
            if !cfg.noised_background {
                exact &= background_matches(&z, &m_f, &z_nf);
            }
        }
        debug!("injection cycle {cycle} done");
        z_init = z;
        if cfg.record_cycles {
            cycle_latents.push(z_init.clone());
        }
    }
    exact &= background_matches(&z_init, &m_f, &z_nf);
    let final_latent = LatentImage {
        z: z_init,
        ..source
    };
    let image = models.codec.decode(&final_latent)?;
    Ok(InjectionOutput {
        image,
        final_latent,
        z_nf,
        latent_mask: m_f,
        background_exact: exact,
        cycle_latents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(bits: &[bool], h: usize, w: usize) -> LatentMask {
        LatentMask::new(h, w, 4, bits.to_vec())
    }

    #[test]
    fn extract_background_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[4, 2, 3], &mut rng);
        let all = mask_from(&[true; 6], 2, 3);
        let none = mask_from(&[false; 6], 2, 3);
        assert!(extract_background(&z, &all)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(extract_background(&z, &none).unwrap().bit_eq(&z));
        assert!(extract_background(&Tensor::zeros(&[4, 3, 3]), &all).is_err());
    }

    #[test]
    fn composite_is_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[2, 2, 2], &mut rng);
        let m = mask_from(&[true, false, false, true], 2, 2);
        let bg = extract_background(&Tensor::randn(&[2, 2, 2], &mut rng), &m).unwrap();
        let c = composite(&z, &m, &bg).unwrap();
        assert!(composite(&c, &m, &bg).unwrap().bit_eq(&c));
        assert!(extract_background(&c, &m).unwrap().bit_eq(&bg));
        let anything = Tensor::randn(&[2, 2, 2], &mut rng);
        let z2 = composite(&anything, &m, &bg).unwrap();
        assert!(background_matches(&z2, &m, &bg));
    }

    proptest! {
        #[test]
        fn ops_match_scalar_oracle(
            vals in proptest::collection::vec(-3.0f32..3.0, 2 * 3 * 4),
            other in proptest::collection::vec(-3.0f32..3.0, 2 * 3 * 4),
            bits in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let z = Tensor::new(&[2, 3, 4], vals.clone()).unwrap();
            let zn = Tensor::new(&[2, 3, 4], other.clone()).unwrap();
            let m = mask_from(&bits, 3, 4);
            let bg = extract_background(&z, &m).unwrap();
            let comp = composite(&zn, &m, &bg).unwrap();
            for c in 0..2 {
                for i in 0..12 {
                    let k = c * 12 + i;
                    let mv = if bits[i] { 1.0 } else { 0.0 };
                    prop_assert_eq!(bg.data()[k], vals[k] * (1.0 - mv));
                    prop_assert_eq!(comp.data()[k], other[k] * mv + bg.data()[k]);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let c = InjectionConfig::default();
        c.validate(1000).unwrap();
        assert!(InjectionConfig {
            cycles: 33,
            ..c.clone()
        }
        .validate(1000)
        .is_err());
        assert!(InjectionConfig {
            steps: 1001,
            ..c.clone()
        }
        .validate(1000)
        .is_err());
        assert!(matches!(
            InjectionConfig {
                cycles: 32,
                steps: 100,
                ..c.clone()
            }
            .validate(1000),
            Err(InjectError::Budget { .. })
        ));
        let full = c.cycle_steps(1000).unwrap();
        assert_eq!(full, subsequence(1000, 50).unwrap());
        let half = InjectionConfig { strength: 0.5, ..c }
            .cycle_steps(1000)
            .unwrap();
        assert_eq!(half[0].0, 500);
        assert_eq!(half.len(), 50);
        assert_eq!(half.last().unwrap().1, Prev::Clean);
    }
}
