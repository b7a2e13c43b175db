//! Toy text encoder, prompt editing with a placeholder token, and textual
//! inversion of that token against a frozen denoiser.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, LatentCodec};
use crate::denoiser::DenoiserNet;
use crate::nn::hex;
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::schedule::{NoiseSchedule, ScheduleError};

pub const PLACEHOLDER: &str = "S*";
pub const UNKNOWN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("prompt contains {PLACEHOLDER} but no embedding was supplied")]
    MissingPlaceholder,
    #[error("token id {0} outside the vocabulary")]
    BadId(usize),
    #[error("subject {subject:?} not found in prompt {prompt:?}")]
    SubjectAbsent { prompt: String, subject: String },
    #[error("embedding has dimension {got}, encoder expects {want}")]
    Dimension { got: usize, want: usize },
    #[error("no identity images given")]
    NoImages,
    #[error("inversion loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("frozen parameters changed during inversion")]
    FrozenChanged,
    #[error("identity record: {0}")]
    Record(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Dense word ids. Id 0 is the unknown token, id 1 the placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNKNOWN_ID: usize = 0;
    pub const PLACEHOLDER_ID: usize = 1;

    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all = vec![UNKNOWN.to_string(), PLACEHOLDER.to_string()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        Self::from_words(all)
    }

    /// Restores a vocabulary from its full word list (reserved entries first).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index
            .get(word)
            .copied()
            .filter(|&i| i > Self::PLACEHOLDER_ID)
    }

    fn lookup(&self, word: &str) -> usize {
        if let Some(i) = self.id(word) {
            return i;
        }
        // plural folding
        if let Some(stem) = word.strip_suffix('s') {
            if let Some(i) = self.id(stem) {
                return i;
            }
        }
        Self::UNKNOWN_ID
    }
}

/// Lowercased split on anything that is not alphanumeric; the literal `S*`
/// becomes the placeholder id.
pub fn tokenize(vocab: &Vocabulary, prompt: &str) -> Vec<usize> {
    let mut ids = Vec::new();
    for chunk in prompt.split(|c: char| !(c.is_alphanumeric() || c == '*' || c == '\'')) {
        if chunk.is_empty() {
            continue;
        }
        if chunk == PLACEHOLDER {
            ids.push(Vocabulary::PLACEHOLDER_ID);
            continue;
        }
        for word in chunk.split(|c: char| !c.is_alphanumeric()) {
            if !word.is_empty() {
                ids.push(vocab.lookup(&word.to_lowercase()));
            }
        }
    }
    ids
}

pub fn detokenize(vocab: &Vocabulary, ids: &[usize]) -> Result<String, TextError> {
    let words: Result<Vec<&str>, _> = ids
        .iter()
        .map(|&i| {
            vocab
                .words
                .get(i)
                .map(String::as_str)
                .ok_or(TextError::BadId(i))
        })
        .collect();
    Ok(words?.join(" "))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            cond_dim: 32,
            seed: 0,
        }
    }
}

/// τ: sum of token embeddings (unknown tokens skipped) followed by a fixed
/// linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab: Vocabulary,
    /// `[V, d]`
    pub table: Tensor,
    /// `[d, cond_dim]`
    pub projection: Tensor,
    /// Whether the placeholder row of `table` holds a usable embedding.
    pub placeholder_default: bool,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, config: TextEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut table = Tensor::randn(&[vocab.len(), config.embed_dim], &mut rng);
        // reserved rows carry nothing until a placeholder embedding is installed
        for v in &mut table.data_mut()[..2 * config.embed_dim] {
            *v = 0.0;
        }
        let projection = Tensor::randn(&[config.embed_dim, config.cond_dim], &mut rng)
            .scale(1.0 / (config.embed_dim as f32).sqrt());
        Self {
            config,
            vocab,
            table,
            projection,
            placeholder_default: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    pub fn null_cond(&self) -> Tensor {
        Tensor::zeros(&[self.config.cond_dim])
    }

    pub fn embedding(&self, id: usize) -> Result<Tensor, TextError> {
        let d = self.config.embed_dim;
        if id >= self.vocab.len() {
            return Err(TextError::BadId(id));
        }
        Ok(Tensor::new(
            &[d],
            self.table.data()[id * d..(id + 1) * d].to_vec(),
        )?)
    }

    /// Copy whose placeholder row is `v_star`.
    pub fn with_placeholder(&self, v_star: &Tensor) -> Result<TextEncoder, TextError> {
        self.check_dim(v_star)?;
        let mut out = self.clone();
        let d = self.config.embed_dim;
        let row = Vocabulary::PLACEHOLDER_ID * d;
        out.table.data_mut()[row..row + d].copy_from_slice(v_star.data());
        out.placeholder_default = true;
        Ok(out)
    }

    fn check_dim(&self, v: &Tensor) -> Result<(), TextError> {
        if v.shape() != [self.config.embed_dim] {
            return Err(TextError::Dimension {
                got: v.numel(),
                want: self.config.embed_dim,
            });
        }
        Ok(())
    }

    /// Summed embedding of `ids`, plus how many placeholder slots it contains.
    fn pooled(&self, ids: &[usize]) -> Result<(Vec<f32>, usize), TextError> {
        let d = self.config.embed_dim;
        let mut acc = vec![0.0f32; d];
        let mut slots = 0;
        for &id in ids {
            if id >= self.vocab.len() {
                return Err(TextError::BadId(id));
            }
            match id {
                Vocabulary::UNKNOWN_ID => {}
                Vocabulary::PLACEHOLDER_ID => slots += 1,
                _ => {
                    for (a, v) in acc.iter_mut().zip(&self.table.data()[id * d..(id + 1) * d]) {
                        *a += v;
                    }
                }
            }
        }
        Ok((acc, slots))
    }

    pub fn encode_text(&self, ids: &[usize], v_star: Option<&Tensor>) -> Result<Tensor, TextError> {
        let d = self.config.embed_dim;
        let (mut acc, slots) = self.pooled(ids)?;
        if slots > 0 {
            let row: &[f32] = match v_star {
                Some(v) => {
                    self.check_dim(v)?;
                    v.data()
                }
                None if self.placeholder_default => {
                    &self.table.data()[Vocabulary::PLACEHOLDER_ID * d..][..d]
                }
                None => return Err(TextError::MissingPlaceholder),
            };
            for _ in 0..slots {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let out = crate::numerics::kernels::matmul(
            &acc,
            self.projection.data(),
            1,
            d,
            self.config.cond_dim,
        );
        Ok(Tensor::new(&[self.config.cond_dim], out)?)
    }

    pub fn encode_prompt(
        &self,
        prompt: &str,
        v_star: Option<&Tensor>,
    ) -> Result<Tensor, TextError> {
        self.encode_text(&tokenize(&self.vocab, prompt), v_star)
    }

    /// Differentiable encoding with `v_star` as a graph variable; `[1, cond_dim]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        ids: &[usize],
        v_star: Var,
    ) -> Result<Var, TextError> {
        let (acc, slots) = self.pooled(ids)?;
        let d = self.config.embed_dim;
        let mut pooled = g.constant(Tensor::new(&[1, d], acc)?);
        if slots > 0 {
            let v = g.reshape(v_star, &[1, d])?;
            let v = g.mul_scalar(v, slots as f32)?;
            pooled = g.add(pooled, v)?;
        }
        let proj = g.constant(self.projection.clone());
        Ok(g.matmul(pooled, proj)?)
    }

    /// SHA-256 over everything that influences encoding except the placeholder row.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for w in &self.vocab.words {
            h.update(w.as_bytes());
            h.update([0]);
        }
        let d = self.config.embed_dim;
        let mut table = self.table.clone();
        table.data_mut()[d..2 * d].fill(0.0);
        h.update(table.to_le_bytes());
        h.update(self.projection.to_le_bytes());
        hex(&h.finalize())
    }
}

fn find_ignore_case(haystack: &str, needle: &str) -> Option<(usize, usize)> {
    if needle.is_empty() {
        return None;
    }
    for (start, _) in haystack.char_indices() {
        let mut hs = haystack[start..].char_indices();
        let mut matched = true;
        let mut end = start;
        for nc in needle.chars() {
            match hs.next() {
                Some((off, hc)) if hc.to_lowercase().eq(nc.to_lowercase()) => {
                    end = start + off + hc.len_utf8()
                }
                _ => {
                    matched = false;
                    break;
                }
            }
        }
        if matched {
            return Some((start, end));
        }
    }
    None
}

/// Replaces the first case-insensitive occurrence of `subject` with `placeholder`.
pub fn edit_prompt(p: &str, subject: &str, placeholder: &str) -> Result<String, TextError> {
    let (s, e) = find_ignore_case(p, subject).ok_or_else(|| TextError::SubjectAbsent {
        prompt: p.to_string(),
        subject: subject.to_string(),
    })?;
    Ok(format!("{}{}{}", &p[..s], placeholder, &p[e..]))
}

/// Learned placeholder embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub v_star: Tensor,
    pub label: String,
    pub provenance: String,
}

const ID_MAGIC: &[u8; 4] = b"SBIE";
const ID_VERSION: u32 = 1;

impl IdentityEmbedding {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ID_MAGIC);
        out.extend_from_slice(&ID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.v_star.numel() as u32).to_le_bytes());
        out.extend_from_slice(&self.v_star.to_le_bytes());
        for s in [&self.label, &self.provenance] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TextError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| TextError::Record("truncated".into()))?;
        if &magic != ID_MAGIC {
            return Err(TextError::Record("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != ID_VERSION {
            return Err(TextError::Record(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let mut vals = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| TextError::Record("truncated values".into()))?;
            vals.push(f32::from_le_bytes(b));
        }
        let v_star = Tensor::new(&[dim], vals).map_err(|e| TextError::Record(e.to_string()))?;
        let label = read_str(&mut r)?;
        let provenance = read_str(&mut r)?;
        if !r.is_empty() {
            return Err(TextError::Record("trailing bytes".into()));
        }
        Ok(Self {
            v_star,
            label,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| TextError::Record(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| TextError::Record(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let bytes = std::fs::read(path)
            .map_err(|e| TextError::Record(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, TextError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TextError::Record("truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String, TextError> {
    let n = read_u32(r)? as usize;
    if r.len() < n {
        return Err(TextError::Record("truncated string".into()));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| TextError::Record("label is not UTF-8".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub template: String,
    /// Word whose embedding seeds `v_star`.
    pub init_word: String,
    pub steps: usize,
    pub lr: f32,
    /// Noisings per gradient step.
    pub batch: usize,
    /// Fixed noisings used to report the before/after loss.
    pub eval_noisings: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            template: format!("a portrait of {PLACEHOLDER}"),
            init_word: "person".into(),
            steps: 500,
            lr: 2.0,
            batch: 8,
            eval_noisings: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub initial_loss: f32,
    pub final_loss: f32,
    pub best_step: usize,
    pub loss_curve: Vec<f32>,
}

impl InversionReport {
    pub fn ratio(&self) -> f32 {
        self.final_loss / self.initial_loss
    }
}

/// One noising of one identity latent.
struct Noising {
    image: usize,
    t: usize,
    eps: Tensor,
}

fn draw_noisings<R: Rng>(
    rng: &mut R,
    n: usize,
    images: usize,
    shape: &[usize],
    steps: usize,
) -> Vec<Noising> {
    (0..n)
        .map(|_| Noising {
            image: rng.gen_range(0..images),
            t: rng.gen_range(0..steps),
            eps: Tensor::randn(shape, rng),
        })
        .collect()
}

/// Mean ε-prediction loss over `noisings` at `v_star`; with `grad`, also
/// returns ∂loss/∂v_star.
fn inversion_loss(
    net: &DenoiserNet,
    enc: &TextEncoder,
    ids: &[usize],
    latents: &[Tensor],
    noisings: &[Noising],
    schedule: &NoiseSchedule,
    v_star: &Tensor,
    grad: bool,
) -> Result<(f32, Option<Tensor>), TextError> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, false);
    let v = g.leaf(v_star.clone(), grad);
    let cond = enc.encode_graph(&mut g, ids, v)?;
    let b = noisings.len();
    let ones = g.constant(Tensor::ones(&[b, 1]));
    let cond = g.matmul(ones, cond)?;
    let mut zt = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b);
    let mut ts = Vec::with_capacity(b);
    for n in noisings {
        zt.push(crate::schedule::q_sample(
            &latents[n.image],
            n.t,
            &n.eps,
            schedule,
        )?);
        eps.push(n.eps.clone());
        ts.push(n.t);
    }
    let z = g.constant(Tensor::stack(&zt)?);
    let target = g.constant(Tensor::stack(&eps)?);
    let pred = net.forward_graph(&mut g, &p, z, &ts, cond)?;
    let loss = g.mse(pred, target)?;
    let lv = g.value(loss).item()?;
    if !grad {
        return Ok((lv, None));
    }
    g.backward(loss)?;
    Ok((lv, g.grad(v).cloned()))
}

/// Gradient of the inversion loss at `v_star` on a fixed set of noisings;
/// exposed for finite-difference checks.
pub fn inversion_loss_and_grad(
    net: &DenoiserNet,
    enc: &TextEncoder,
    prompt: &str,
    latents: &[Tensor],
    seed: u64,
    n: usize,
    schedule: &NoiseSchedule,
    v_star: &Tensor,
) -> Result<(f32, Tensor), TextError> {
    let ids = tokenize(&enc.vocab, prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisings = draw_noisings(
        &mut rng,
        n,
        latents.len(),
        latents[0].shape(),
        schedule.steps(),
    );
    let (l, g) = inversion_loss(net, enc, &ids, latents, &noisings, schedule, v_star, true)?;
    Ok((l, g.unwrap_or_else(|| Tensor::zeros(v_star.shape()))))
}

/// Gradient descent on the placeholder embedding only. Returns the
/// lowest-loss embedding seen on the fixed evaluation noisings.
pub fn invert_token(
    net: &DenoiserNet,
    codec: &LatentCodec,
    enc: &TextEncoder,
    identity_images: &[Tensor],
    label: &str,
    schedule: &NoiseSchedule,
    cfg: &InversionConfig,
) -> Result<(IdentityEmbedding, InversionReport), TextError> {
    if identity_images.is_empty() {
        return Err(TextError::NoImages);
    }
    let frozen_before = (
        net.params().fingerprint(),
        codec.params().fingerprint(),
        enc.fingerprint(),
    );
    let ids = tokenize(&enc.vocab, &cfg.template);
    let init_id = enc
        .vocab
        .id(&cfg.init_word)
        .ok_or_else(|| TextError::SubjectAbsent {
            prompt: "<vocabulary>".into(),
            subject: cfg.init_word.clone(),
        })?;
    let mut v_star = enc.embedding(init_id)?;
    let latents = codec.encode_batch(identity_images)?;
    let shape = latents[0].shape().to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = draw_noisings(
        &mut rng,
        cfg.eval_noisings,
        latents.len(),
        &shape,
        schedule.steps(),
    );
    let eval_loss = |v: &Tensor| -> Result<f32, TextError> {
        let mut total = 0.0;
        for chunk in eval.chunks(32) {
            total += inversion_loss(net, enc, &ids, &latents, chunk, schedule, v, false)?.0
                * chunk.len() as f32;
        }
        Ok(total / eval.len() as f32)
    };
    let initial_loss = eval_loss(&v_star)?;
    let mut best = (initial_loss, v_star.clone(), 0);
    let mut curve = vec![initial_loss];
    let eval_every = (cfg.steps / 20).max(1);
    for step in 1..=cfg.steps {
        let batch = draw_noisings(&mut rng, cfg.batch, latents.len(), &shape, schedule.steps());
        let (l, g) = inversion_loss(net, enc, &ids, &latents, &batch, schedule, &v_star, true)?;
        if !l.is_finite() {
            return Err(TextError::Diverged(step));
        }
        let g = g.ok_or(TextError::MissingPlaceholder)?;
        v_star = v_star.zip_map(&g, |v, d| v - cfg.lr * d)?;
        if !v_star.data().iter().all(|v| v.is_finite()) {
            return Err(TextError::Diverged(step));
        }
        if step % eval_every == 0 || step == cfg.steps {
            let e = eval_loss(&v_star)?;
            debug!("inversion step {step}: eval loss {e:.5}");
            curve.push(e);
            if e < best.0 {
                best = (e, v_star.clone(), step);
            }
        }
    }
    let frozen_after = (
        net.params().fingerprint(),
        codec.params().fingerprint(),
        enc.fingerprint(),
    );
    if frozen_before != frozen_after {
        return Err(TextError::FrozenChanged);
    }
    let provenance = format!(
        "invert:{}:{}:{}:{}",
        &frozen_before.0[..12],
        &frozen_before.1[..12],
        &frozen_before.2[..12],
        cfg.seed
    );
    Ok((
        IdentityEmbedding {
            v_star: best.1,
            label: label.to_string(),
            provenance,
        },
        InversionReport {
            initial_loss,
            final_loss: best.0,
            best_step: best.2,
            loss_curve: curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&[
            "a", "picture", "of", "the", "prince", "laughing", "with", "elephant", "person",
        ])
    }

    #[test]
    fn tokenizer_rules() {
        let v = vocab();
        assert!(tokenize(&v, "").is_empty());
        assert_eq!(
            tokenize(&v, "S* laughing"),
            vec![Vocabulary::PLACEHOLDER_ID, v.id("laughing").unwrap()]
        );
        assert_eq!(
            tokenize(&v, "The Prince, laughing with elephants!"),
            vec![
                v.id("the").unwrap(),
                v.id("prince").unwrap(),
                v.id("laughing").unwrap(),
                v.id("with").unwrap(),
                v.id("elephant").unwrap()
            ]
        );
        assert_eq!(
            tokenize(&v, "zebra s*"),
            vec![Vocabulary::UNKNOWN_ID, Vocabulary::UNKNOWN_ID]
        );
        // the plain tokenizer never yields the placeholder from ordinary words
        assert!(!tokenize(&v, "s star S S**").contains(&Vocabulary::PLACEHOLDER_ID));
    }

    #[test]
    fn detokenize_round_trip_over_vocabulary() {
        let v = vocab();
        let ids: Vec<usize> = (0..v.len()).collect();
        let text = detokenize(&v, &ids).unwrap();
        assert_eq!(tokenize(&v, &text), ids);
        assert!(detokenize(&v, &[v.len()]).is_err());
    }

    #[test]
    fn edit_prompt_examples() {
        assert_eq!(
            edit_prompt(
                "the little prince laughing with elephants",
                "the little prince",
                "S*"
            )
            .unwrap(),
            "S* laughing with elephants"
        );
        assert_eq!(
            edit_prompt(
                "The Little Prince, laughing; the little prince",
                "the little prince",
                "S*"
            )
            .unwrap(),
            "S*, laughing; the little prince"
        );
        assert_eq!(edit_prompt("the prince", "the prince", "S*").unwrap(), "S*");
        assert!(matches!(
            edit_prompt("a fox", "the prince", "S*"),
            Err(TextError::SubjectAbsent { .. })
        ));
    }

    #[test]
    fn encoding_and_overrides() {
        let enc = TextEncoder::new(vocab(), TextEncoderConfig::default());
        let ids = tokenize(&enc.vocab, "a picture of the prince");
        let a = enc.encode_text(&ids, None).unwrap();
        assert!(a.bit_eq(&enc.encode_text(&ids, None).unwrap()));
        let v = Tensor::ones(&[32]);
        assert!(a.bit_eq(&enc.encode_text(&ids, Some(&v)).unwrap()));

        let star = tokenize(&enc.vocab, "a picture of S*");
        assert!(matches!(
            enc.encode_text(&star, None),
            Err(TextError::MissingPlaceholder)
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v1 = Tensor::randn(&[32], &mut rng);
        let v2 = Tensor::randn(&[32], &mut rng);
        let c1 = enc.encode_text(&star, Some(&v1)).unwrap();
        let c2 = enc.encode_text(&star, Some(&v2)).unwrap();
        assert!(c1.max_abs_diff(&c2).unwrap() > 1e-3);
        // writing v_star into the table is the same as overriding
        let installed = enc.with_placeholder(&v1).unwrap();
        assert!(installed.encode_text(&star, None).unwrap().bit_eq(&c1));
        assert_eq!(enc.fingerprint(), installed.fingerprint());
        assert!(matches!(
            enc.encode_text(&star, Some(&Tensor::ones(&[3]))),
            Err(TextError::Dimension { .. })
        ));
    }

    #[test]
    fn graph_encoding_matches_direct() {
        let enc = TextEncoder::new(vocab(), TextEncoderConfig::default());
        let ids = tokenize(&enc.vocab, "S* laughing with S*");
        let v = Tensor::randn(&[32], &mut ChaCha8Rng::seed_from_u64(1));
        let direct = enc.encode_text(&ids, Some(&v)).unwrap();
        let mut g = Graph::new();
        let var = g.param(v);
        let out = enc.encode_graph(&mut g, &ids, var).unwrap();
        assert!(
            g.value(out)
                .max_abs_diff(&direct.reshape(&[1, 32]).unwrap())
                .unwrap()
                < 1e-5
        );
    }

    #[test]
    fn identity_record_round_trip() {
        let rec = IdentityEmbedding {
            v_star: Tensor::new(&[3], vec![1.0, -2.5, 0.125]).unwrap(),
            label: "prince".into(),
            provenance: "run-1".into(),
        };
        let bytes = rec.to_bytes();
        assert_eq!(IdentityEmbedding::from_bytes(&bytes).unwrap(), rec);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(IdentityEmbedding::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("unsupported version"));
        assert!(IdentityEmbedding::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(IdentityEmbedding::from_bytes(b"nope").is_err());
    }

    proptest! {
        #[test]
        fn edit_prompt_preserves_the_rest(prefix in "[a-z ]{0,12}", suffix in "[a-z ,]{0,12}") {
            let p = format!("{prefix}The Prince{suffix}");
            let out = edit_prompt(&p, "the prince", "S*").unwrap();
            let expect = format!("{prefix}S*{suffix}");
            if !prefix.to_lowercase().contains("the prince") {
                prop_assert_eq!(out, expect);
            }
        }

        #[test]
        fn pooling_is_order_invariant(mut ids in proptest::collection::vec(2usize..11, 0..8)) {
            let enc = TextEncoder::new(vocab(), TextEncoderConfig::default());
            let a = enc.encode_text(&ids, None).unwrap();
            ids.reverse();
            let b = enc.encode_text(&ids, None).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }
    }
}
