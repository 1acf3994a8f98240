//! Spatial kernels over `[N, H, W, C]` buffers. Cross-correlation convention
//! (no kernel flip); kernels are laid out `[k, k, C_in, C_out]`.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output size `ceil(H / stride)`, zero padding split with the smaller
    /// half before.
    Same,
    /// No padding; output size `floor((H - k) / stride) + 1`.
    Valid,
}

/// Returns `(out_h, out_w, pad_top, pad_left)`.
pub fn conv_output_geometry(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(invalid!("stride must be at least 1"));
    }
    if k == 0 {
        return Err(invalid!("kernel size must be at least 1"));
    }
    match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let ph = ((oh - 1) * stride + k).saturating_sub(h);
            let pw = ((ow - 1) * stride + k).saturating_sub(w);
            Ok((oh, ow, ph / 2, pw / 2))
        }
        Padding::Valid => {
            if k > h || k > w {
                return Err(shape_err!("kernel {k}x{k} larger than input {h}x{w}"));
            }
            Ok(((h - k) / stride + 1, (w - k) / stride + 1, 0, 0))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.out_h, self.out_w, self.c_out]
    }

    /// Input coordinate hit by output row `o` and kernel row `kk`, if inside.
    #[inline]
    fn src(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + kk).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    /// Calls `f(out_index_base, in_index_base, tap)` for every valid
    /// (output pixel, kernel tap) pair, where the bases are pixel offsets
    /// (to be multiplied by the channel count) and `tap = ky * k + kx`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.n {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let out_px = (n * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.k {
                        let Some(iy) = Self::src(oy, ky, self.stride, self.pad_top, self.h) else {
                            continue;
                        };
                        for kx in 0..self.k {
                            let Some(ix) = Self::src(ox, kx, self.stride, self.pad_left, self.w)
                            else {
                                continue;
                            };
                            let in_px = (n * self.h + iy) * self.w + ix;
                            f(out_px, in_px, ky * self.k + kx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (ci_n, co_n) = (g.c_in, g.c_out);
    let mut out = vec![T::zero(); g.n * g.out_h * g.out_w * co_n];
    g.for_each_tap(|out_px, in_px, tap| {
        let dst = &mut out[out_px * co_n..(out_px + 1) * co_n];
        let src = &x[in_px * ci_n..(in_px + 1) * ci_n];
        let taps = &kernel[tap * ci_n * co_n..(tap + 1) * ci_n * co_n];
        for (ci, &v) in src.iter().enumerate() {
            let row = &taps[ci * co_n..(ci + 1) * co_n];
            for (d, &kv) in dst.iter_mut().zip(row) {
                *d += v * kv;
            }
        }
    });
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let (ci_n, co_n) = (g.c_in, g.c_out);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    g.for_each_tap(|out_px, in_px, tap| {
        let go = &dout[out_px * co_n..(out_px + 1) * co_n];
        let base = tap * ci_n * co_n;
        for ci in 0..ci_n {
            let row = &kernel[base + ci * co_n..base + (ci + 1) * co_n];
            let mut acc = T::zero();
            for (&gv, &kv) in go.iter().zip(row) {
                acc += gv * kv;
            }
            dx[in_px * ci_n + ci] += acc;
            let v = x[in_px * ci_n + ci];
            let drow = &mut dk[base + ci * co_n..base + (ci + 1) * co_n];
            for (d, &gv) in drow.iter_mut().zip(go) {
                *d += v * gv;
            }
        }
    });
    (dx, dk)
}

/// Depthwise kernels are laid out `[k, k, C]` and `g.c_in == g.c_out`.
pub(crate) fn depthwise_forward<T: Real>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.c_in;
    let mut out = vec![T::zero(); g.n * g.out_h * g.out_w * c];
    g.for_each_tap(|out_px, in_px, tap| {
        let dst = &mut out[out_px * c..(out_px + 1) * c];
        let src = &x[in_px * c..(in_px + 1) * c];
        let kv = &kernel[tap * c..(tap + 1) * c];
        for ((d, &v), &kw) in dst.iter_mut().zip(src).zip(kv) {
            *d += v * kw;
        }
    });
    out
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let c = g.c_in;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    g.for_each_tap(|out_px, in_px, tap| {
        for ch in 0..c {
            let go = dout[out_px * c + ch];
            dx[in_px * c + ch] += go * kernel[tap * c + ch];
            dk[tap * c + ch] += go * x[in_px * c + ch];
        }
    });
    (dx, dk)
}

/// Valid max pooling. Returns the output and, per output element, the flat
/// input index of the maximum (first in scan order on ties).
pub(crate) fn max_pool_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    let [n, h, w, c] = shape;
    if window == 0 || stride == 0 {
        return Err(invalid!("pool window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(shape_err!("pool window {window} larger than input {h}x{w}"));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((b * h + oy * stride) * w + ox * stride) * c + ch;
                    let mut best = x[best_i];
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((vec![n, oh, ow, c], out, argmax))
}
