//! Direct 2-D cross-correlation kernels.
//!
//! The forward pass unfolds the input with `im2col` and then accumulates, for
//! every output element, `bias` followed by the `(channel, ky, kx)` taps in
//! that order. That is the order of the textbook nested loop, so results are
//! bit-identical to it (padding taps contribute an exact `w * 0`).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dGeometry {
    /// "Same" geometry for a 3x3 kernel with the given dilation.
    pub fn same3(dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Dimensions of one convolution problem (batch size 1 per call).
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn resolve(
        input: &[usize],
        weight: &[usize],
        bias: Option<&[usize]>,
        geom: Conv2dGeometry,
    ) -> Result<(usize, Self)> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [N,C,H,W] and weight [K,C,kh,kw], got {input:?} and {weight:?}"),
            ));
        }
        if input[1] != weight[1] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels but weight {weight:?} expects {}",
                    input[1], weight[1]
                ),
            ));
        }
        if let Some(b) = bias {
            if b != [weight[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {b:?} does not match {} output channels", weight[0]),
                ));
            }
        }
        let out_h = geom.output_extent(input[2], weight[2]);
        let out_w = geom.output_extent(input[3], weight[3]);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok((
                input[0],
                Self {
                    in_channels: input[1],
                    in_h: input[2],
                    in_w: input[3],
                    out_channels: weight[0],
                    kh: weight[2],
                    kw: weight[3],
                    out_h,
                    out_w,
                },
            )),
            _ => Err(Error::shape(
                "conv2d",
                format!("input {input:?} with kernel {weight:?} and {geom:?} yields an empty output"),
            )),
        }
    }
}

/// Range of output indices `o` with `0 <= o*stride + offset < extent`.
fn valid_range(offset: isize, extent: usize, out_extent: usize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (extent as isize) <= offset {
        0
    } else {
        ((extent as isize - offset - 1) / s + 1).min(out_extent as isize)
    };
    let lo = lo.min(out_extent as isize) as usize;
    (lo, (hi.max(lo as isize)) as usize)
}

/// Unfolds the receptive fields into a `[C*kh*kw, out_h*out_w]` matrix.
/// Taps that fall into the padding are zero.
pub fn im2col(dims: &ConvDims, geom: Conv2dGeometry, input: &[f64]) -> Vec<f64> {
    let d = dims;
    let plane_out = d.out_h * d.out_w;
    let plane_in = d.in_h * d.in_w;
    let mut cols = vec![0.0; d.in_channels * d.kh * d.kw * plane_out];
    for c in 0..d.in_channels {
        let in_c = &input[c * plane_in..(c + 1) * plane_in];
        for i in 0..d.kh {
            let dy = (i * geom.dilation) as isize - geom.padding as isize;
            let (y0, y1) = valid_range(dy, d.in_h, d.out_h, geom.stride);
            for j in 0..d.kw {
                let dx = (j * geom.dilation) as isize - geom.padding as isize;
                let (x0, x1) = valid_range(dx, d.in_w, d.out_w, geom.stride);
                let row = (c * d.kh + i) * d.kw + j;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                if x0 >= x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = ((oy * geom.stride) as isize + dy) as usize;
                    let in_row = &in_c[iy * d.in_w..(iy + 1) * d.in_w];
                    let out_row = &mut dst[oy * d.out_w + x0..oy * d.out_w + x1];
                    if geom.stride == 1 {
                        let start = (x0 as isize + dx) as usize;
                        out_row.copy_from_slice(&in_row[start..start + (x1 - x0)]);
                    } else {
                        for (n, o) in out_row.iter_mut().enumerate() {
                            *o = in_row[(((x0 + n) * geom.stride) as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `out[k] = bias[k] + Σ_p weight[k][p] * cols[p]`, accumulated in `p` order.
pub fn forward(dims: &ConvDims, weight: &[f64], bias: Option<&[f64]>, cols: &[f64], out: &mut [f64]) {
    let plane_out = dims.out_h * dims.out_w;
    let taps = dims.in_channels * dims.kh * dims.kw;
    for k in 0..dims.out_channels {
        let out_k = &mut out[k * plane_out..(k + 1) * plane_out];
        out_k.fill(bias.map_or(0.0, |b| b[k]));
        let w_k = &weight[k * taps..(k + 1) * taps];
        for (p, &w) in w_k.iter().enumerate() {
            let col = &cols[p * plane_out..(p + 1) * plane_out];
            for (o, &x) in out_k.iter_mut().zip(col) {
                *o += w * x;
            }
        }
    }
}

/// Accumulates `d(loss)/d(input)` into `grad_in`.
pub fn backward_input(dims: &ConvDims, geom: Conv2dGeometry, weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let d = dims;
    let plane_out = d.out_h * d.out_w;
    let plane_in = d.in_h * d.in_w;
    let taps = d.in_channels * d.kh * d.kw;
    let mut gcol = vec![0.0; plane_out];
    for c in 0..d.in_channels {
        let gin_c = &mut grad_in[c * plane_in..(c + 1) * plane_in];
        for i in 0..d.kh {
            let dy = (i * geom.dilation) as isize - geom.padding as isize;
            let (y0, y1) = valid_range(dy, d.in_h, d.out_h, geom.stride);
            for j in 0..d.kw {
                let dx = (j * geom.dilation) as isize - geom.padding as isize;
                let (x0, x1) = valid_range(dx, d.in_w, d.out_w, geom.stride);
                if x0 >= x1 || y0 >= y1 {
                    continue;
                }
                let p = (c * d.kh + i) * d.kw + j;
                gcol.fill(0.0);
                for k in 0..d.out_channels {
                    let w = weight[k * taps + p];
                    for (g, &go) in gcol.iter_mut().zip(&grad_out[k * plane_out..(k + 1) * plane_out]) {
                        *g += w * go;
                    }
                }
                for oy in y0..y1 {
                    let iy = ((oy * geom.stride) as isize + dy) as usize;
                    let src = &gcol[oy * d.out_w + x0..oy * d.out_w + x1];
                    let gin_row = &mut gin_c[iy * d.in_w..(iy + 1) * d.in_w];
                    if geom.stride == 1 {
                        let start = (x0 as isize + dx) as usize;
                        for (o, &g) in gin_row[start..start + (x1 - x0)].iter_mut().zip(src) {
                            *o += g;
                        }
                    } else {
                        for (n, &g) in src.iter().enumerate() {
                            let ix = ((x0 + n) * geom.stride) as isize + dx;
                            gin_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `d(loss)/d(weight)` and, if requested, `d(loss)/d(bias)`.
pub fn backward_params(
    dims: &ConvDims,
    cols: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: Option<&mut [f64]>,
) {
    let plane_out = dims.out_h * dims.out_w;
    let taps = dims.in_channels * dims.kh * dims.kw;
    if let Some(gb) = grad_bias {
        for (k, b) in gb.iter_mut().enumerate() {
            *b += grad_out[k * plane_out..(k + 1) * plane_out].iter().sum::<f64>();
        }
    }
    for k in 0..dims.out_channels {
        let g_k = &grad_out[k * plane_out..(k + 1) * plane_out];
        for p in 0..taps {
            grad_weight[k * taps + p] += dot(g_k, &cols[p * plane_out..(p + 1) * plane_out]);
        }
    }
}

/// Four-lane dot product; the fixed lane split keeps results reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for n in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[4 * n + l] * b[4 * n + l];
        }
    }
    let mut tail = 0.0;
    for n in chunks * 4..a.len() {
        tail += a[n] * b[n];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}
