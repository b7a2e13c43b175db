//! Quantitative checks for identity injection: background preservation,
//! a classifier-based identity score, cycle sweeps and the resampling baseline.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::denoiser::{sample_latent, DenoiserError, SampleConfig};
use crate::image_io::{save_png, ImageError};
use crate::inject::{inject_identity, InjectError, InjectionConfig, Models};
use crate::mask::{box_to_mask, detect_subject, BoundingBox, DetectorConfig, MaskError, PixelMask};
use crate::nn::{Adam, Bound, Conv, Linear, ParamSet};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::synth::{self, CorpusConfig, IDENTITIES};
use crate::textcond::{IdentityEmbedding, TextError};

pub const CSV_HEADER: &str = "scene,n,bg_mse,bg_exact,identity,runtime_ms";
pub const CROP: usize = 8;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("images differ in shape: {0:?} vs {1:?}")]
    Dimension(Vec<usize>, Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("identity classifier is untrained")]
    Untrained,
    #[error("unknown identity {0:?}")]
    UnknownIdentity(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BgError {
    pub mse: f32,
    /// No pixel lies outside the guarded mask; `mse` is then 0 by definition.
    pub empty: bool,
}

/// Mean squared error over pixels outside `mask` dilated by `guard`.
pub fn bg_preservation_error(
    source: &Tensor,
    edited: &Tensor,
    mask: &PixelMask,
    guard: usize,
) -> Result<BgError, BenchError> {
    if source.shape() != edited.shape() {
        return Err(BenchError::Dimension(
            source.shape().to_vec(),
            edited.shape().to_vec(),
        ));
    }
    let &[c, h, w] = source.shape() else {
        return Err(BenchError::Dimension(
            source.shape().to_vec(),
            vec![3, mask.height(), mask.width()],
        ));
    };
    if (mask.height(), mask.width()) != (h, w) {
        return Err(BenchError::Dimension(
            source.shape().to_vec(),
            vec![c, mask.height(), mask.width()],
        ));
    }
    let guarded = mask.dilate(guard);
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if guarded.get(y, x) {
                continue;
            }
            for ch in 0..c {
                let i = ch * h * w + y * w + x;
                let d = (source.data()[i] - edited.data()[i]) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        warn!("background metric over an empty region");
        return Ok(BgError {
            mse: 0.0,
            empty: true,
        });
    }
    Ok(BgError {
        mse: (sum / n as f64) as f32,
        empty: false,
    })
}

/// Bilinear resample of the `bbox` region to `CROP × CROP`.
pub fn face_crop(image: &Tensor, bbox: BoundingBox) -> Result<Tensor, BenchError> {
    let &[3, h, w] = image.shape() else {
        return Err(BenchError::Dimension(image.shape().to_vec(), vec![3]));
    };
    if !bbox.is_valid(h, w) {
        return Err(MaskError::InvalidBox(bbox, h, w).into());
    }
    let d = image.data();
    let mut out = vec![0.0; 3 * CROP * CROP];
    let sample = |ch: usize, fy: f32, fx: f32| {
        let fy = fy.clamp(0.0, (h - 1) as f32);
        let fx = fx.clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let at = |y: usize, x: usize| d[ch * h * w + y * w + x];
        (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
            + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
    };
    let sy = bbox.height() as f32 / CROP as f32;
    let sx = bbox.width() as f32 / CROP as f32;
    for ch in 0..3 {
        for y in 0..CROP {
            for x in 0..CROP {
                let fy = bbox.y0 as f32 + (y as f32 + 0.5) * sy - 0.5;
                let fx = bbox.x0 as f32 + (x as f32 + 0.5) * sx - 0.5;
                out[ch * CROP * CROP + y * CROP + x] = sample(ch, fy, fx);
            }
        }
    }
    Ok(Tensor::new(&[3, CROP, CROP], out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 16,
            classes: IDENTITIES.len(),
            seed: 0,
        }
    }
}

/// Small conv net over face crops.
#[derive(Clone, Debug)]
pub struct IdentityClassifier {
    config: ClassifierConfig,
    params: ParamSet,
    c0: Conv,
    c1: Conv,
    head: Linear,
    trained: bool,
}

impl IdentityClassifier {
    pub fn new(config: ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let c0 = Conv::new(&mut ps, "c0", 3, config.width, 3, &mut rng);
        let c1 = Conv::new(&mut ps, "c1", config.width, 2 * config.width, 3, &mut rng);
        let head = Linear::new(&mut ps, "head", 2 * config.width, config.classes, &mut rng);
        Self {
            config,
            params: ps,
            c0,
            c1,
            head,
            trained: false,
        }
    }

    pub fn from_parts(config: ClassifierConfig, params: &ParamSet) -> Result<Self, BenchError> {
        let mut c = Self::new(config);
        c.params.load_from(params)?;
        c.trained = true;
        Ok(c)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let x = g.mul_scalar(x, 2.0)?;
        let x = g.add_scalar(x, -1.0)?;
        let h = self.c0.forward(g, p, x)?;
        let h = g.silu(h)?;
        let h = g.avg_pool(h, 2)?;
        let h = self.c1.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = g.mean_spatial(h)?;
        self.head.forward(g, p, h)
    }

    /// Class probabilities for a batch of crops `[3, 8, 8]`.
    pub fn probabilities(&self, crops: &[Tensor]) -> Result<Vec<Vec<f32>>, BenchError> {
        if !self.trained {
            return Err(BenchError::Untrained);
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::stack(crops)?);
        let l = self.logits(&mut g, &p, x)?;
        let k = self.config.classes;
        Ok(g.value(l)
            .data()
            .chunks(k)
            .map(|row| {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f32 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect())
    }

    pub fn accuracy(&self, crops: &[Tensor], labels: &[usize]) -> Result<f32, BenchError> {
        let mut correct = 0;
        for (cs, ls) in crops.chunks(256).zip(labels.chunks(256)) {
            for (p, &l) in self.probabilities(cs)?.iter().zip(ls) {
                let best = (0..p.len())
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]))
                    .unwrap_or(0);
                correct += usize::from(best == l);
            }
        }
        Ok(correct as f32 / crops.len().max(1) as f32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Box dilations sampled when cutting training crops.
    pub max_dilate: usize,
    /// Beta(α, α) mixup between crops; 0 disables. Mixing keeps the output
    /// probability graded for faces part-way between two identities.
    pub mixup_alpha: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            samples: 1200,
            epochs: 15,
            batch_size: 32,
            lr: 3e-3,
            max_dilate: 2,
            mixup_alpha: 0.4,
            seed: 0,
        }
    }
}

/// Labelled face crops from freshly rendered scenes; `blur` optionally maps
/// each rendered image first (e.g. a codec round trip).
pub fn identity_crops<F>(
    n: usize,
    max_dilate: usize,
    seed: u64,
    blur: F,
) -> Result<(Vec<Tensor>, Vec<usize>), BenchError>
where
    F: Fn(&[Tensor]) -> Result<Vec<Tensor>, BenchError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CorpusConfig::default();
    let mut specs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let id = i % IDENTITIES.len();
        specs.push(synth::random_scene(&mut rng, id, &cfg));
        labels.push(id);
    }
    let rendered: Vec<Tensor> = specs.iter().map(|s| s.render()).collect();
    let images = blur(&rendered)?;
    let mut crops = Vec::with_capacity(n);
    for (spec, img) in specs.iter().zip(&images) {
        let d = rng.gen_range(0..=max_dilate);
        let m = box_to_mask(spec.face_box(), synth::IMAGE_SIZE, synth::IMAGE_SIZE, d)?;
        crops.push(face_crop(img, m.bounding_box().expect("non-empty mask"))?);
    }
    Ok((crops, labels))
}

pub fn train_classifier(
    crops: &[Tensor],
    labels: &[usize],
    config: ClassifierConfig,
    tc: &ClassifierTrainConfig,
) -> Result<IdentityClassifier, BenchError> {
    let mut clf = IdentityClassifier::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::new(&clf.params, tc.lr);
    let mut order: Vec<usize> = (0..crops.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let batch: Vec<Tensor> = idx.iter().map(|&i| crops[i].clone()).collect();
            let ls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g, true);
            let loss = if tc.mixup_alpha > 0.0 {
                let lam = Beta::new(tc.mixup_alpha, tc.mixup_alpha)
                    .map_err(|e| BenchError::Config(format!("mixup alpha: {e}")))?
                    .sample(&mut rng) as f32;
                let mut partner: Vec<usize> = (0..idx.len()).collect();
                partner.shuffle(&mut rng);
                let mixed: Vec<Tensor> = partner
                    .iter()
                    .enumerate()
                    .map(|(a, &b)| batch[a].zip_map(&batch[b], |x, y| lam * x + (1.0 - lam) * y))
                    .collect::<Result<_, _>>()?;
                let ls2: Vec<usize> = partner.iter().map(|&b| ls[b]).collect();
                let x = g.constant(Tensor::stack(&mixed)?);
                let l = clf.logits(&mut g, &p, x)?;
                let a = g.cross_entropy(l, &ls)?;
                let b = g.cross_entropy(l, &ls2)?;
                let a = g.mul_scalar(a, lam)?;
                let b = g.mul_scalar(b, 1.0 - lam)?;
                g.add(a, b)?
            } else {
                let x = g.constant(Tensor::stack(&batch)?);
                let l = clf.logits(&mut g, &p, x)?;
                g.cross_entropy(l, &ls)?
            };
            total += g.value(loss).item()?;
            g.backward(loss)?;
            opt.step(&mut clf.params, &g, &p)?;
        }
        info!(
            "classifier epoch {epoch}: loss {:.4}",
            total / order.chunks(tc.batch_size).len() as f32
        );
    }
    clf.trained = true;
    Ok(clf)
}

pub fn identity_index(label: &str) -> Result<usize, BenchError> {
    synth::identity_index(label).ok_or_else(|| BenchError::UnknownIdentity(label.to_string()))
}

/// Probability of `target` for the region covered by `mask`.
pub fn identity_score(
    image: &Tensor,
    mask: &PixelMask,
    classifier: &IdentityClassifier,
    target: usize,
) -> Result<f32, BenchError> {
    let bbox = mask.bounding_box().ok_or(MaskError::SubjectNotFound)?;
    let crop = face_crop(image, bbox)?;
    Ok(classifier.probabilities(&[crop])?[0][target])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub n: usize,
    pub bg_mse: f32,
    pub bg_exact: bool,
    pub identity: f32,
    pub runtime_ms: u64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.8},{},{:.6},{}",
            self.scene, self.n, self.bg_mse, self.bg_exact, self.identity, self.runtime_ms
        )
    }
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<(), BenchError> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))
}

/// Source image for a sweep together with its subject mask.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: String,
    pub image: Tensor,
    pub mask: PixelMask,
}

/// Fixtures whose character differs from `target`, with detected face masks.
pub fn make_fixtures(
    count: usize,
    target: usize,
    dilate: usize,
    seed: u64,
) -> Result<Vec<Fixture>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let others: Vec<usize> = (0..IDENTITIES.len()).filter(|&i| i != target).collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let id = others[i % others.len()];
        let backdrop = synth::Backdrop::ALL[i % synth::Backdrop::ALL.len()];
        let prop = [None, Some(synth::Prop::Elephant), Some(synth::Prop::Star)][i % 3];
        let spec = synth::scene_with(&mut rng, id, backdrop, prop, false);
        let image = spec.render();
        let bbox = detect_subject(&image, &DetectorConfig::default())?;
        let mask = box_to_mask(bbox, synth::IMAGE_SIZE, synth::IMAGE_SIZE, dilate)?;
        out.push(Fixture {
            name: format!("fixture{i}-{}", IDENTITIES[id].0),
            image,
            mask,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_values: Vec<usize>,
    pub prompt_star: String,
    pub injection: InjectionConfig,
    pub guard: usize,
}

/// Runs the injection for every fixture and cycle count.
pub fn cycle_sweep(
    fixtures: &[Fixture],
    v_star: &IdentityEmbedding,
    cfg: &SweepConfig,
    models: Models<'_>,
    classifier: &IdentityClassifier,
) -> Result<Vec<MetricRow>, BenchError> {
    let target = identity_index(&v_star.label)?;
    let mut rows = Vec::new();
    for fx in fixtures {
        let reference = models.codec.decode(&models.codec.encode(&fx.image)?)?;
        for &n in &cfg.n_values {
            let started = Instant::now();
            let inj = InjectionConfig {
                cycles: n,
                ..cfg.injection.clone()
            };
            let out = inject_identity(&fx.image, &cfg.prompt_star, v_star, &fx.mask, &inj, models)?;
            let runtime_ms = started.elapsed().as_millis() as u64;
            let bg = bg_preservation_error(&reference, &out.image, &fx.mask, cfg.guard)?;
            let identity = identity_score(&out.image, &fx.mask, classifier, target)?;
            rows.push(MetricRow {
                scene: fx.name.clone(),
                n,
                bg_mse: bg.mse,
                bg_exact: out.background_exact,
                identity,
                runtime_ms,
            });
        }
    }
    Ok(rows)
}

/// Resamples the whole image from noise with the inverted token and no mask.
pub fn baseline_textual_inversion(
    fixture: &Fixture,
    prompt_star: &str,
    v_star: &IdentityEmbedding,
    sampling: &SampleConfig,
    guard: usize,
    models: Models<'_>,
    classifier: &IdentityClassifier,
) -> Result<(Tensor, MetricRow), BenchError> {
    let started = Instant::now();
    let target = identity_index(&v_star.label)?;
    let cond = models
        .text
        .encode_prompt(prompt_star, Some(&v_star.v_star))?;
    let source = models.codec.encode(&fixture.image)?;
    let z = sample_latent(
        models.net,
        source.z.shape(),
        models.schedule,
        &cond,
        sampling,
    )?;
    let image = models.codec.decode(&models.codec.wrap(z.clone()))?;
    let reference = models.codec.decode(&source)?;
    let bg = bg_preservation_error(&reference, &image, &fixture.mask, guard)?;
    // score wherever the generated character ended up
    let face_mask = match detect_subject(&image, &DetectorConfig::default()) {
        Ok(b) => box_to_mask(b, fixture.mask.height(), fixture.mask.width(), 1)?,
        Err(_) => fixture.mask.clone(),
    };
    let identity = identity_score(&image, &face_mask, classifier, target)?;
    let exact = z
        .data()
        .iter()
        .zip(source.z.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((
        image,
        MetricRow {
            scene: fixture.name.clone(),
            n: 0,
            bg_mse: bg.mse,
            bg_exact: exact,
            identity,
            runtime_ms: started.elapsed().as_millis() as u64,
        },
    ))
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks. `None` when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean per-scene Spearman ρ between `n` and identity score; scenes whose
/// scores are all equal count as 0.
pub fn mean_spearman(rows: &[MetricRow]) -> f64 {
    let mut scenes: Vec<&str> = rows.iter().map(|r| r.scene.as_str()).collect();
    scenes.dedup();
    let mut total = 0.0;
    for s in &scenes {
        let (ns, ids): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.scene == *s)
            .map(|r| (r.n as f64, r.identity as f64))
            .unzip();
        total += spearman(&ns, &ids).unwrap_or(0.0);
    }
    total / scenes.len().max(1) as f64
}

/// Line chart of identity score against `n`, one line per scene, as an image.
pub fn plot_sweep(rows: &[MetricRow]) -> Tensor {
    const W: usize = 240;
    const H: usize = 160;
    const PAD: usize = 16;
    let mut px = vec![1.0f32; 3 * W * H];
    let mut put = |x: usize, y: usize, rgb: [f32; 3]| {
        if x < W && y < H {
            for c in 0..3 {
                px[c * W * H + y * W + x] = rgb[c];
            }
        }
    };
    for x in PAD..W - PAD {
        put(x, H - PAD, [0.0; 3]);
        put(x, PAD, [0.85; 3]);
    }
    for y in PAD..=H - PAD {
        put(PAD, y, [0.0; 3]);
    }
    let max_n = rows.iter().map(|r| r.n).max().unwrap_or(1).max(1);
    let to_xy = |n: usize, s: f32| {
        let x = PAD + (n * (W - 2 * PAD - 1)) / max_n;
        let y = (H - PAD) as f32 - s.clamp(0.0, 1.0) * (H - 2 * PAD) as f32;
        (x as f32, y)
    };
    let palette = [
        [0.85, 0.2, 0.2],
        [0.2, 0.45, 0.85],
        [0.15, 0.65, 0.3],
        [0.8, 0.5, 0.1],
        [0.55, 0.25, 0.7],
    ];
    let mut scenes: Vec<&str> = rows.iter().map(|r| r.scene.as_str()).collect();
    scenes.dedup();
    for (si, s) in scenes.iter().enumerate() {
        let color = palette[si % palette.len()];
        let pts: Vec<(f32, f32)> = rows
            .iter()
            .filter(|r| r.scene == *s)
            .map(|r| to_xy(r.n, r.identity))
            .collect();
        for w in pts.windows(2) {
            let steps = ((w[1].0 - w[0].0).abs().max((w[1].1 - w[0].1).abs()) as usize).max(1);
            for k in 0..=steps {
                let t = k as f32 / steps as f32;
                let x = w[0].0 + t * (w[1].0 - w[0].0);
                let y = w[0].1 + t * (w[1].1 - w[0].1);
                put(x.round() as usize, y.round() as usize, color);
            }
        }
        for &(x, y) in &pts {
            for dy in 0..3 {
                for dx in 0..3 {
                    put(
                        (x as usize + dx).saturating_sub(1),
                        (y as usize + dy).saturating_sub(1),
                        color,
                    );
                }
            }
        }
    }
    Tensor::new(&[3, H, W], px).expect("finite plot")
}

pub fn save_plot(rows: &[MetricRow], path: &Path) -> Result<(), BenchError> {
    Ok(save_png(&plot_sweep(rows), path)?)
}
