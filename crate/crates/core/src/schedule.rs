//! Noise schedules and single-step forward/reverse diffusion updates.
//!
//! Timesteps are 0-based: `t ∈ [0, T)`, where `alpha_bars[0] = 1 − β₀` is the
//! least noisy level. The fully clean sample sits one step below index 0 and
//! is addressed as [`Prev::Clean`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("timestep {t} out of range for T = {steps}")]
    OutOfRange { t: usize, steps: usize },
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Parameters that fully determine a [`NoiseSchedule`]; persisted in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Precomputed β, α, ᾱ and reverse σ tables (kept in `f64`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_linear_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    NoiseSchedule::linear(ScheduleParams {
        steps,
        beta_start,
        beta_end,
    })
}

impl NoiseSchedule {
    pub fn linear(params: ScheduleParams) -> Result<Self, ScheduleError> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps == 0 {
            return Err(ScheduleError::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_t(&self, t: usize) -> Result<(), ScheduleError> {
        if t >= self.steps() {
            return Err(ScheduleError::OutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// ᾱ of a step or of the clean endpoint.
    pub fn alpha_bar_at(&self, p: Prev) -> f64 {
        match p {
            Prev::Step(t) => self.alpha_bars[t],
            Prev::Clean => 1.0,
        }
    }
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor, ScheduleError> {
    let (a, b) = (a as f32, b as f32);
    let out = x.zip_map(y, |xv, yv| a * xv + b * yv)?;
    out.check_finite("diffusion step")?;
    Ok(out)
}

/// Single-shot forward noising: `√ᾱ_t·z0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    s.check_t(t)?;
    let ab = s.alpha_bars[t];
    axpby(ab.sqrt(), z0, (1.0 - ab).sqrt(), eps)
}

/// Reverse-process mean `(1/√α_t)·(z_t − (β_t/√(1−ᾱ_t))·ε̂)`.
pub fn ddpm_mean(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    s.check_t(t)?;
    let (alpha, ab) = (s.alphas[t], s.alpha_bars[t]);
    let inv = 1.0 / alpha.sqrt();
    let coef = if ab < 1.0 {
        (1.0 - alpha) / (1.0 - ab).sqrt()
    } else {
        0.0
    };
    axpby(inv, z_t, -inv * coef, eps_pred)
}

/// One ancestral step `z_t → z_{t−1}` with `σ_t² = β_t`; the last step (`t = 1`)
/// adds no noise.
pub fn ddpm_step(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    s: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor, ScheduleError> {
    if t == 0 {
        return Err(ScheduleError::InvalidStep("ddpm_step needs t >= 1".into()));
    }
    let mean = ddpm_mean(z_t, t, eps_pred, s)?;
    if noise.shape() != z_t.shape() {
        return Err(NumericsError::ShapeMismatch(format!(
            "noise {:?} vs {:?}",
            noise.shape(),
            z_t.shape()
        ))
        .into());
    }
    let sigma = if t == 1 { 0.0 } else { s.sigmas[t] };
    axpby(1.0, &mean, sigma, noise)
}

/// Target of a DDIM step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prev {
    Step(usize),
    /// Noise-free endpoint with ᾱ = 1.
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimStepSpec {
    pub t: usize,
    pub prev: Prev,
    /// 0 gives the deterministic sampler.
    pub eta: f64,
}

impl DdimStepSpec {
    pub fn sigma(&self, s: &NoiseSchedule) -> f64 {
        let ab_t = s.alpha_bars[self.t];
        let ab_prev = s.alpha_bar_at(self.prev);
        if self.eta == 0.0 || ab_t >= 1.0 {
            return 0.0;
        }
        let v = ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
        self.eta * v.max(0.0).sqrt()
    }
}

/// Predicted clean sample `(z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn predict_x0(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    s.check_t(t)?;
    let ab = s.alpha_bars[t];
    axpby(
        1.0 / ab.sqrt(),
        z_t,
        -(1.0 - ab).sqrt() / ab.sqrt(),
        eps_pred,
    )
}

/// One DDIM update. `noise` must be given exactly when `eta > 0`.
pub fn ddim_step(
    z_t: &Tensor,
    spec: DdimStepSpec,
    eps_pred: &Tensor,
    s: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor, ScheduleError> {
    s.check_t(spec.t)?;
    if let Prev::Step(p) = spec.prev {
        if p >= spec.t {
            return Err(ScheduleError::InvalidStep(format!(
                "t_prev {p} must be below t {}",
                spec.t
            )));
        }
    }
    if !(0.0..=1.0).contains(&spec.eta) {
        return Err(ScheduleError::InvalidStep(format!(
            "eta {} outside [0, 1]",
            spec.eta
        )));
    }
    let x0 = predict_x0(z_t, spec.t, eps_pred, s)?;
    let ab_prev = s.alpha_bar_at(spec.prev);
    let sigma = spec.sigma(s);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let out = axpby(ab_prev.sqrt(), &x0, dir, eps_pred)?;
    match (spec.eta > 0.0, noise) {
        (true, Some(n)) => axpby(1.0, &out, sigma, n),
        (true, None) => Err(ScheduleError::InvalidStep(
            "eta > 0 requires a noise tensor".into(),
        )),
        (false, _) => Ok(out),
    }
}

/// Evenly spaced descending `(t, prev)` pairs: `n_steps` model evaluations
/// from `T−1` down to 0, the last pair landing on [`Prev::Clean`].
pub fn subsequence(total: usize, n_steps: usize) -> Result<Vec<(usize, Prev)>, ScheduleError> {
    if n_steps == 0 || n_steps > total {
        return Err(ScheduleError::InvalidRange(format!(
            "need 1 <= n_steps <= T, got {n_steps} with T = {total}"
        )));
    }
    let grid: Vec<usize> = if n_steps == 1 {
        vec![total - 1]
    } else {
        (0..n_steps)
            .map(|i| {
                let frac = (n_steps - 1 - i) as f64 / (n_steps - 1) as f64;
                (frac * (total - 1) as f64).round() as usize
            })
            .collect()
    };
    let mut pairs: Vec<(usize, Prev)> = grid.windows(2).map(|w| (w[0], Prev::Step(w[1]))).collect();
    pairs.push((*grid.last().expect("non-empty grid"), Prev::Clean));
    Ok(pairs)
}
