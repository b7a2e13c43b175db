//! PNG ↔ `[3, H, W]` tensors with values in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("expected a [3, H, W] image tensor, got {0:?}")]
    Shape(Vec<usize>),
}

pub fn to_rgb8(img: &Tensor) -> Result<(u32, u32, Vec<u8>), ImageError> {
    let &[3, h, w] = img.shape() else {
        return Err(ImageError::Shape(img.shape().to_vec()));
    };
    let d = img.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w as u32, h as u32, buf))
}

pub fn from_rgb8(w: usize, h: usize, buf: &[u8]) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = buf[i * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("finite pixels")
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<(), ImageError> {
    let (w, h, buf) = to_rgb8(img)?;
    image::save_buffer(path, &buf, w, h, image::ColorType::Rgb8).map_err(|e| ImageError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_png(path: &Path) -> Result<Tensor, ImageError> {
    let img = image::open(path).map_err(|e| ImageError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(from_rgb8(w as usize, h as usize, rgb.as_raw()))
}

/// Rounds every pixel to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Tensor::new(&[3, 2, 2], (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back, quantize(&img));
        assert!(save_png(&Tensor::zeros(&[2, 2]), &p).is_err());
    }
}
