//! Parameter storage, layers and optimizers shared by the trained networks.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::numerics::{Graph, NumericsError, Tensor, Var};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every tensor with one of the same name from `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), NumericsError> {
        for (name, t) in &mut self.entries {
            let src = other.by_name(name).ok_or_else(|| {
                NumericsError::InvalidArgument(format!("missing parameter {name}"))
            })?;
            if src.shape() != t.shape() {
                return Err(NumericsError::ShapeMismatch(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Records every parameter in `g`, tracked or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Graph handles for a [`ParamSet`], indexed by slot.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub k: usize,
}

impl Conv {
    /// He-normal initialization.
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        let weight = ps.push(
            format!("{name}.weight"),
            Tensor::randn(&[cout, cin, k, k], rng).scale(std),
        );
        let bias = ps.push(format!("{name}.bias"), Tensor::zeros(&[cout, 1, 1]));
        Self { weight, bias, k }
    }

    /// Same-size convolution.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let y = g.conv2d(x, p.var(self.weight), 1, self.k / 2)?;
        g.add(y, p.var(self.bias))
    }

    /// Scales the initial weights; zero makes a layer start as a no-op.
    pub fn scale_init(&self, ps: &mut ParamSet, s: f32) {
        let w = ps.get_mut(self.weight);
        *w = w.scale(s);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / din as f32).sqrt();
        let weight = ps.push(
            format!("{name}.weight"),
            Tensor::randn(&[din, dout], rng).scale(std),
        );
        let bias = ps.push(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    /// `[B, din]` → `[B, dout]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the gradients left on `bound` by `g.backward`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        g: &Graph,
        bound: &Bound,
    ) -> Result<(), NumericsError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for slot in 0..params.len() {
            let Some(grad) = g.grad(bound.var(slot)) else {
                continue;
            };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = params.get_mut(slot);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.check_finite("adam update")?;
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            data.push((t as f32 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            data.push((t as f32 * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::new(&[ts.len(), dim], data).expect("finite embedding")
}

/// Exponential moving average of a scalar series.
#[derive(Clone, Copy, Debug)]
pub struct Ema {
    decay: f32,
    value: Option<f32>,
}

impl Ema {
    pub fn new(decay: f32) -> Self {
        Self { decay, value: None }
    }

    pub fn update(&mut self, x: f32) -> f32 {
        let v = match self.value {
            Some(v) => self.decay * v + (1.0 - self.decay) * x,
            None => x,
        };
        self.value = Some(v);
        v
    }

    pub fn get(&self) -> Option<f32> {
        self.value
    }
}
