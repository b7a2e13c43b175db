//! Raw loops behind the graph ops. All reductions run in a fixed sequential
//! order so results are reproducible bit-for-bit.

use super::NumericsError;

/// `c[m×n] += a[m×k] · b[k×n]`, accumulated in `k` order per output element.
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, NumericsError> {
        let [batch, in_ch, h, w] = *input else {
            return Err(NumericsError::ShapeMismatch(format!(
                "conv2d input must be [B,C,H,W], got {input:?}"
            )));
        };
        let [out_ch, kc, kh, kw] = *kernel else {
            return Err(NumericsError::ShapeMismatch(format!(
                "conv2d kernel must be [O,C,k,k], got {kernel:?}"
            )));
        };
        if kc != in_ch || kh != kw {
            return Err(NumericsError::ShapeMismatch(format!(
                "kernel {kernel:?} incompatible with input {input:?}"
            )));
        }
        if kh % 2 == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "conv2d kernel size must be odd, got {kh}"
            )));
        }
        if stride == 0 {
            return Err(NumericsError::InvalidArgument("conv2d stride 0".into()));
        }
        let span_h = (h + 2 * pad).checked_sub(kh);
        let span_w = (w + 2 * pad).checked_sub(kh);
        let (Some(sh), Some(sw)) = (span_h, span_w) else {
            return Err(NumericsError::InvalidArgument(
                "conv2d kernel larger than padded input".into(),
            ));
        };
        if sh % stride != 0 || sw % stride != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "non-integral conv2d output size: ({h}+2*{pad}-{kh})/{stride}"
            )));
        }
        Ok(Self {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            k: kh,
            stride,
            pad,
            out_h: sh / stride + 1,
            out_w: sw / stride + 1,
        })
    }

    fn cols_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn cols_width(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

/// Unfolds the input into a `[C·k·k, B·H'·W']` matrix.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let width = g.cols_width();
    let hw_out = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.cols_rows() * width];
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[b * hw_out + oy * g.out_w + ox] =
                                plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let width = g.cols_width();
    let hw_out = g.out_h * g.out_w;
    let mut x = vec![0.0; g.batch * g.in_ch * g.h * g.w];
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * width..(row + 1) * width];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            plane[iy as usize * g.w + ix as usize] +=
                                src[b * hw_out + oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[O, B·HW]` → `[B, O, HW]`.
fn ob_to_bo(m: &[f32], batch: usize, ch: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; m.len()];
    for o in 0..ch {
        for b in 0..batch {
            out[(b * ch + o) * hw..][..hw].copy_from_slice(&m[o * batch * hw + b * hw..][..hw]);
        }
    }
    out
}

/// `[B, O, HW]` → `[O, B·HW]`.
fn bo_to_ob(m: &[f32], batch: usize, ch: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; m.len()];
    for b in 0..batch {
        for o in 0..ch {
            out[o * batch * hw + b * hw..][..hw].copy_from_slice(&m[(b * ch + o) * hw..][..hw]);
        }
    }
    out
}

pub fn conv2d_forward(x: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let out = matmul(kernel, &cols, g.out_ch, g.cols_rows(), g.cols_width());
    ob_to_bo(&out, g.batch, g.out_ch, g.out_h * g.out_w)
}

/// Gradients with respect to the input and to the kernel.
pub fn conv2d_backward(
    x: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let hw = g.out_h * g.out_w;
    let gmat = bo_to_ob(grad_out, g.batch, g.out_ch, hw);
    let rows = g.cols_rows();
    let width = g.cols_width();
    let d_input = need_input.then(|| {
        let kt = transpose(kernel, g.out_ch, rows);
        let dcols = matmul(&kt, &gmat, rows, g.out_ch, width);
        col2im(&dcols, g)
    });
    let d_kernel = need_kernel.then(|| {
        let cols = im2col(x, g);
        let cols_t = transpose(&cols, rows, width);
        matmul(&gmat, &cols_t, g.out_ch, width, rows)
    });
    (d_input, d_kernel)
}

/// Right-aligned broadcast of two shapes (size-1 dimensions stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, NumericsError> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() {
            1
        } else {
            a[i - (n - a.len())]
        };
        let db = if i < n - b.len() {
            1
        } else {
            b[i - (n - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(NumericsError::ShapeMismatch(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of `in_shape`
/// that broadcasts onto it.
pub fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    if in_shape == out_shape {
        return (0..n).collect();
    }
    let offset = out_shape.len() - in_shape.len();
    let mut in_strides = vec![0usize; out_shape.len()];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Sums a broadcast gradient back down to `in_shape`.
pub fn reduce_broadcast(grad: &[f32], in_shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let map = broadcast_index_map(in_shape, out_shape);
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, &i) in grad.iter().zip(&map) {
        out[i] += g;
    }
    out
}

/// 2-D average pooling over non-overlapping `f×f` blocks.
pub fn avg_pool(x: &[f32], planes: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f32;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += src[(y * f + dy) * w + xx * f + dx];
                    }
                }
                dst[y * ow + xx] = acc * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &[f32], planes: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f32;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / f) * ow + xx / f] * norm;
            }
        }
    }
    out
}

pub fn upsample_nearest(x: &[f32], planes: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(
    g: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<f32> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / f) * w + xx / f] += src[y * ow + xx];
            }
        }
    }
    out
}

/// `[B, C·f², H, W]` → `[B, C, H·f, W·f]`; channel `c·f² + i·f + j` lands at
/// sub-pixel `(i, j)`.
pub fn depth_to_space(x: &[f32], b: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    shuffle(x, &mut out, b, c, h, w, f, true);
    out
}

/// Inverse of [`depth_to_space`]: `[B, C, H·f, W·f]` → `[B, C·f², H, W]`.
pub fn space_to_depth(x: &[f32], b: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    shuffle(x, &mut out, b, c, h, w, f, false);
    out
}

// h, w are the low-resolution dims in both directions.
#[allow(clippy::too_many_arguments)]
fn shuffle(
    src: &[f32],
    dst: &mut [f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    to_space: bool,
) {
    let (oh, ow) = (h * f, w * f);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..f {
                for j in 0..f {
                    let deep_plane = (bi * c * f * f + ci * f * f + i * f + j) * h * w;
                    let wide_plane = (bi * c + ci) * oh * ow;
                    for y in 0..h {
                        for xx in 0..w {
                            let d = deep_plane + y * w + xx;
                            let s = wide_plane + (y * f + i) * ow + xx * f + j;
                            if to_space {
                                dst[s] = src[d];
                            } else {
                                dst[d] = src[s];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shape(&[4, 1, 1], &[2, 4, 5, 5]).unwrap(),
            vec![2, 4, 5, 5]
        );
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
        let map = broadcast_index_map(&[3], &[2, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        let map = broadcast_index_map(&[2, 1], &[2, 3]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(&[1, 3, 33, 33], &[8, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), [1, 8, 17, 17]);
        assert!(ConvGeom::new(&[1, 3, 32, 32], &[8, 3, 3, 3], 2, 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 8, 8], &[8, 3, 2, 2], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 3, 8, 8], &[8, 3, 3, 3], 2, 0).is_err());
    }
}
