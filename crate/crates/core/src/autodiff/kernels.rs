//! Forward and backward rules for each primitive.
//!
//! All reductions run in a fixed row-major order so repeated evaluations are
//! bitwise identical.

use crate::tensor::Tensor;

/// Spatial geometry of a zero-padded square convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize) -> Option<ConvGeom> {
        if x.len() != 3 || weight.len() != 4 || stride == 0 {
            return None;
        }
        let (c_in, h, w) = (x[0], x[1], x[2]);
        let (c_out, wc_in, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
        if wc_in != c_in || k != k2 || k % 2 == 0 {
            return None;
        }
        let pad = k / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate `o*stride + tap - pad`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        let top = extent + self.pad - 1;
        if top < tap {
            return (0, 0);
        }
        let hi = ((top - tap) / s + 1).min(out_extent);
        (lo.min(hi), hi)
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let out_c = &mut out[co * plane_out..(co + 1) * plane_out];
        out_c.fill(bd[co]);
        for ci in 0..g.c_in {
            let x_c = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = wd[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row_in = &x_c[iy * g.w..(iy + 1) * g.w];
                        let row_out = &mut out_c[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let src = &row_in[ox_lo + kx - g.pad..ox_hi + kx - g.pad];
                            for (o, &v) in row_out[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.ho, g.wo], out).expect("conv output shape")
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`, each computed
/// only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
    g: &ConvGeom,
    want: [bool; 3],
) -> [Option<Tensor>; 3] {
    let (xd, wd, dd) = (x.data(), weight.data(), d_out.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut dx = want[0].then(|| vec![0.0; g.c_in * plane_in]);
    let mut dw = want[1].then(|| vec![0.0; wd.len()]);
    let db = want[2].then(|| {
        (0..g.c_out)
            .map(|co| dd[co * plane_out..(co + 1) * plane_out].iter().sum())
            .collect::<Vec<f64>>()
    });

    if dx.is_some() || dw.is_some() {
        for co in 0..g.c_out {
            let d_c = &dd[co * plane_out..(co + 1) * plane_out];
            for ci in 0..g.c_in {
                let base = ci * plane_in;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                        let wv = wd[widx];
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_d = &d_c[oy * g.wo..(oy + 1) * g.wo];
                            let row_off = base + iy * g.w;
                            if let Some(dx) = dx.as_mut() {
                                let row_dx = &mut dx[row_off..row_off + g.w];
                                if g.stride == 1 {
                                    let dst = &mut row_dx[ox_lo + kx - g.pad..ox_hi + kx - g.pad];
                                    for (o, &d) in dst.iter_mut().zip(&row_d[ox_lo..ox_hi]) {
                                        *o += wv * d;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        row_dx[ox * g.stride + kx - g.pad] += wv * row_d[ox];
                                    }
                                }
                            }
                            if dw.is_some() {
                                let row_x = &xd[row_off..row_off + g.w];
                                if g.stride == 1 {
                                    let src = &row_x[ox_lo + kx - g.pad..ox_hi + kx - g.pad];
                                    for (&d, &v) in row_d[ox_lo..ox_hi].iter().zip(src) {
                                        acc += d * v;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        acc += row_d[ox] * row_x[ox * g.stride + kx - g.pad];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }

    [
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        dw.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("dw shape")),
        db.map(|d| Tensor::new(vec![g.c_out], d).expect("db shape")),
    ]
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &xd[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    Tensor::new(vec![c, h2, w2], out).expect("upsample shape")
}

pub(crate) fn upsample2x_backward(d_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h2, w2) = (2 * h, 2 * w);
    let dd = d_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &dd[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            let dst = &mut dx[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            for (xo, v) in src.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("upsample grad shape")
}

/// Per-pixel `logsumexp(logits) - logits[label]` for `[K, H, W]` logits.
pub(crate) fn softmax_xent_forward(logits: &Tensor, labels: &Tensor) -> Tensor {
    let k = logits.shape()[0];
    let plane = labels.len();
    let ld = logits.data();
    let out = labels
        .data()
        .iter()
        .enumerate()
        .map(|(p, &label)| {
            let m = (0..k).map(|c| ld[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (ld[c * plane + p] - m).exp()).sum();
            m + z.ln() - ld[label as usize * plane + p]
        })
        .collect();
    Tensor::new(labels.shape().to_vec(), out).expect("xent shape")
}

pub(crate) fn softmax_xent_backward(logits: &Tensor, labels: &Tensor, d_out: &Tensor) -> Tensor {
    let k = logits.shape()[0];
    let plane = labels.len();
    let ld = logits.data();
    let mut dl = vec![0.0; ld.len()];
    for (p, (&label, &up)) in labels.data().iter().zip(d_out.data()).enumerate() {
        let m = (0..k).map(|c| ld[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (ld[c * plane + p] - m).exp()).sum();
        for c in 0..k {
            let prob = (ld[c * plane + p] - m).exp() / z;
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            dl[c * plane + p] = up * (prob - onehot);
        }
    }
    Tensor::new(logits.shape().to_vec(), dl).expect("xent grad shape")
}

/// Per-pixel softmax over the leading class axis of `[K, H, W]` logits.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let k = logits.shape()[0];
    let plane = logits.len() / k;
    let ld = logits.data();
    let mut out = vec![0.0; ld.len()];
    for p in 0..plane {
        let m = (0..k).map(|c| ld[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (ld[c * plane + p] - m).exp()).sum();
        for c in 0..k {
            out[c * plane + p] = (ld[c * plane + p] - m).exp() / z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax shape")
}
