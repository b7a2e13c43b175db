//! Subject localization, pixel masks, and their latent-resolution counterparts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("subject not found")]
    SubjectNotFound,
    #[error("invalid box {0:?} for a {1}x{2} image")]
    InvalidBox(BoundingBox, usize, usize),
    #[error("mask dimensions {0}x{1} not divisible by {2}")]
    Indivisible(usize, usize, usize),
    #[error("mask is {got:?}, image is {want:?}")]
    DimensionMismatch {
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("image must be [3, H, W], got {0:?}")]
    BadImage(Vec<usize>),
    #[error("mask file: {0}")]
    Io(String),
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_valid(&self, h: usize, w: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= w && self.y1 <= h
    }
}

/// H×W binary grid; 1 marks the subject.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    h: usize,
    w: usize,
    cells: Vec<bool>,
}

impl PixelMask {
    pub fn new(h: usize, w: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), h * w);
        Self { h, w, cells }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![false; h * w])
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![true; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[y * self.w + x] = v;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Square (Chebyshev) dilation by `r` pixels, clamped at the borders.
    pub fn dilate(&self, r: usize) -> PixelMask {
        if r == 0 {
            return self.clone();
        }
        let mut out = PixelMask::empty(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                for yy in y.saturating_sub(r)..(y + r + 1).min(self.h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(self.w) {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
        out
    }

    /// Tight box around the set pixels.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut b: Option<BoundingBox> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BoundingBox::new(x, y, x + 1, y + 1),
                        Some(b) => BoundingBox::new(
                            b.x0.min(x),
                            b.y0.min(y),
                            b.x1.max(x + 1),
                            b.y1.max(y + 1),
                        ),
                    });
                }
            }
        }
        b
    }

    /// Reads an 8-bit grayscale image; values ≥ 128 count as subject.
    pub fn load(path: &Path) -> Result<PixelMask, MaskError> {
        let img =
            image::open(path).map_err(|e| MaskError::Io(format!("{}: {e}", path.display())))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let cells = gray.pixels().map(|p| p.0[0] >= 128).collect();
        Ok(PixelMask::new(h as usize, w as usize, cells))
    }

    pub fn save(&self, path: &Path) -> Result<(), MaskError> {
        let buf: Vec<u8> = self
            .cells
            .iter()
            .map(|&c| if c { 255 } else { 0 })
            .collect();
        image::save_buffer(
            path,
            &buf,
            self.w as u32,
            self.h as u32,
            image::ColorType::L8,
        )
        .map_err(|e| MaskError::Io(format!("{}: {e}", path.display())))
    }
}

/// Latent-resolution mask with its pixel-to-cell factor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentMask {
    h: usize,
    w: usize,
    factor: usize,
    cells: Vec<bool>,
}

impl LatentMask {
    pub fn new(h: usize, w: usize, factor: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), h * w);
        Self {
            h,
            w,
            factor,
            cells,
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Color-range predicate identifying subject pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub red_min: f32,
    pub green_max: f32,
    pub red_minus_green_min: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            red_min: 0.7,
            green_max: 0.65,
            red_minus_green_min: 0.2,
        }
    }
}

impl DetectorConfig {
    pub fn matches(&self, rgb: [f32; 3]) -> bool {
        rgb[0] >= self.red_min
            && rgb[1] <= self.green_max
            && rgb[0] - rgb[1] >= self.red_minus_green_min
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize), MaskError> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(MaskError::BadImage(s.to_vec())),
    }
}

/// Tight box of the largest 4-connected component of signature-matching pixels.
///
/// Equal areas resolve to the component found first in row-major scan order.
pub fn detect_subject(image: &Tensor, detector: &DetectorConfig) -> Result<BoundingBox, MaskError> {
    let (h, w) = image_dims(image)?;
    let d = image.data();
    let hit: Vec<bool> = (0..h * w)
        .map(|i| detector.matches([d[i], d[h * w + i], d[2 * h * w + i]]))
        .collect();
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BoundingBox)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !hit[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = stack.pop() {
            area += 1;
            let (y, x) = (i / w, i % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if hit[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.is_none_or(|(a, _)| area > a) {
            best = Some((area, BoundingBox::new(x0, y0, x1, y1)));
        }
    }
    best.map(|(_, b)| b).ok_or(MaskError::SubjectNotFound)
}

/// Ones inside `bbox` grown by `dilate` pixels on each side, clamped to the image.
pub fn box_to_mask(
    bbox: BoundingBox,
    h: usize,
    w: usize,
    dilate: usize,
) -> Result<PixelMask, MaskError> {
    if !bbox.is_valid(h, w) {
        return Err(MaskError::InvalidBox(bbox, h, w));
    }
    let (x0, y0) = (
        bbox.x0.saturating_sub(dilate),
        bbox.y0.saturating_sub(dilate),
    );
    let (x1, y1) = ((bbox.x1 + dilate).min(w), (bbox.y1 + dilate).min(h));
    let mut m = PixelMask::empty(h, w);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(y, x, true);
        }
    }
    Ok(m)
}

/// Max-pool downsampling: a cell is set iff any covered pixel is set.
pub fn downsample_mask(mask: &PixelMask, factor: usize) -> Result<LatentMask, MaskError> {
    if factor == 0 || !mask.h.is_multiple_of(factor) || !mask.w.is_multiple_of(factor) {
        return Err(MaskError::Indivisible(mask.h, mask.w, factor));
    }
    let (h, w) = (mask.h / factor, mask.w / factor);
    let mut cells = vec![false; h * w];
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(y, x) {
                cells[(y / factor) * w + x / factor] = true;
            }
        }
    }
    Ok(LatentMask::new(h, w, factor, cells))
}

/// Where the subject mask comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Detect(DetectorConfig),
    File(std::path::PathBuf),
}

/// Resolves a pixel mask for `image` from a detector or an external file.
pub fn resolve_mask(
    image: &Tensor,
    source: &MaskSource,
    dilate: usize,
) -> Result<PixelMask, MaskError> {
    let (h, w) = image_dims(image)?;
    match source {
        MaskSource::Detect(cfg) => box_to_mask(detect_subject(image, cfg)?, h, w, dilate),
        MaskSource::File(path) => {
            let m = PixelMask::load(path)?;
            if (m.h, m.w) != (h, w) {
                return Err(MaskError::DimensionMismatch {
                    got: (m.h, m.w),
                    want: (h, w),
                });
            }
            Ok(m.dilate(dilate))
        }
    }
}
