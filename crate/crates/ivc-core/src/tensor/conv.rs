//! 2D convolution and its transpose, with analytic gradients.
//!
//! Parallelism is over independent output (or input-gradient) channels only,
//! so every element keeps a fixed summation order and results are bitwise
//! reproducible.

use super::{Tensor, TensorError};
use rayon::prelude::*;

/// Valid output range [start, end) such that 0 <= o*stride + koff - pad < limit.
fn valid_range(limit: usize, o_len: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    let lo = pad as isize - koff as isize; // need o*stride >= lo
    let start = if lo > 0 {
        ((lo + stride as isize - 1) / stride as isize) as usize
    } else {
        0
    };
    let hi = limit as isize - 1 + pad as isize - koff as isize; // o*stride <= hi
    if hi < 0 {
        return (0, 0);
    }
    let end = ((hi / stride as isize) + 1).min(o_len as isize) as usize;
    (start.min(end), end)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, TensorError> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, wc_in, k, k2] = weight.shape();
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel must be square, got {k}x{k2}"),
        });
    }
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channels {c_in} != weight input channels {wc_in}"),
        });
    }
    if !(stride == 1 || stride == 2) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("stride {stride} not in {{1, 2}}"),
        });
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias length {} != output channels {c_out}", b.numel()),
            });
        }
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < k || wp < k {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("padded input {hp}x{wp} smaller than kernel {k}x{k}"),
        });
    }
    let oh = (hp - k) / stride + 1;
    let ow = (wp - k) / stride + 1;
    Ok(ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow })
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow } = *g;
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(chunk, o)| {
        let b = chunk / c_out;
        let co = chunk % c_out;
        if let Some(bias) = bias {
            o.fill(bias[co]);
        }
        for ci in 0..c_in {
            let ip = &input[(b * c_in + ci) * h * w..][..h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, oh, stride, pad, ky);
                for kx in 0..k {
                    let wv = weight[((co * c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(w, ow, stride, pad, kx);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let irow = &ip[iy * w..][..w];
                        let orow = &mut o[oy * ow..][..ow];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            orow[ox] += wv * irow[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_grad_input(g: &ConvGeom, weight: &[f32], gout: &[f32]) -> Vec<f32> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow } = *g;
    let mut gin = vec![0.0f32; n * c_in * h * w];
    gin.par_chunks_mut(h * w).enumerate().for_each(|(chunk, gi)| {
        let b = chunk / c_in;
        let ci = chunk % c_in;
        for co in 0..c_out {
            let gop = &gout[(b * c_out + co) * oh * ow..][..oh * ow];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, oh, stride, pad, ky);
                for kx in 0..k {
                    let wv = weight[((co * c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(w, ow, stride, pad, kx);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gop[oy * ow..][..ow];
                        let girow = &mut gi[iy * w..][..w];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            girow[ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

fn conv2d_grad_weight(g: &ConvGeom, input: &[f32], gout: &[f32]) -> Vec<f32> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow } = *g;
    let mut gw = vec![0.0f32; c_out * c_in * k * k];
    gw.par_chunks_mut(c_in * k * k).enumerate().for_each(|(co, gwc)| {
        for b in 0..n {
            let gop = &gout[(b * c_out + co) * oh * ow..][..oh * ow];
            for ci in 0..c_in {
                let ip = &input[(b * c_in + ci) * h * w..][..h * w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, oh, stride, pad, ky);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(w, ow, stride, pad, kx);
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let irow = &ip[iy * w..][..w];
                            let grow = &gop[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                acc += irow[ix] * grow[ox];
                            }
                        }
                        gwc[(ci * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// 2D cross-correlation with optional bias. Weight layout `(c_out, c_in, k, k)`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let g = conv_geom(input, weight, bias, stride, pad)?;
    let out = {
        let id = input.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.to_vec());
        conv2d_forward(&g, &id, &wd, bd.as_deref())
    };
    let shape = [g.n, g.c_out, g.oh, g.ow];
    let saved_in = input.to_vec();
    let saved_w = weight.to_vec();
    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |gout, parents| {
            let geom = g;
            parents[0].accumulate_grad(&conv2d_grad_input(&geom, &saved_w, gout));
            parents[1].accumulate_grad(&conv2d_grad_weight(&geom, &saved_in, gout));
            if has_bias {
                let mut gb = vec![0.0f32; geom.c_out];
                for b in 0..geom.n {
                    for (co, gbc) in gb.iter_mut().enumerate() {
                        let gop = &gout[(b * geom.c_out + co) * geom.oh * geom.ow..][..geom.oh * geom.ow];
                        for v in gop {
                            *gbc += *v;
                        }
                    }
                }
                parents[2].accumulate_grad(&gb);
            }
        }),
    ))
}

fn tconv_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<ConvGeom, TensorError> {
    let [n, c_in, h, w] = input.shape();
    let [wc_in, c_out, k, k2] = weight.shape();
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("kernel must be square, got {k}x{k2}"),
        });
    }
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("input channels {c_in} != weight input channels {wc_in}"),
        });
    }
    if !(stride == 1 || stride == 2) {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("stride {stride} not in {{1, 2}}"),
        });
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("bias length {} != output channels {c_out}", b.numel()),
            });
        }
    }
    if output_padding >= stride {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("output_padding {output_padding} must be < stride {stride}"),
        });
    }
    let oh_i =
        (h as isize - 1) * stride as isize - 2 * pad as isize + k as isize + output_padding as isize;
    let ow_i =
        (w as isize - 1) * stride as isize - 2 * pad as isize + k as isize + output_padding as isize;
    if oh_i <= 0 || ow_i <= 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("output dims {oh_i}x{ow_i} nonpositive"),
        });
    }
    Ok(ConvGeom {
        n, c_in, h, w, c_out, k, stride, pad,
        oh: oh_i as usize,
        ow: ow_i as usize,
    })
}

/// Input range [start, end) such that 0 <= i*stride + koff - pad < limit.
fn tconv_valid(limit: usize, i_len: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    valid_range(limit, i_len, stride, pad, koff)
}

fn tconv_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow } = *g;
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(chunk, o)| {
        let b = chunk / c_out;
        let co = chunk % c_out;
        if let Some(bias) = bias {
            o.fill(bias[co]);
        }
        for ci in 0..c_in {
            let ip = &input[(b * c_in + ci) * h * w..][..h * w];
            for ky in 0..k {
                let (iy0, iy1) = tconv_valid(oh, h, stride, pad, ky);
                for kx in 0..k {
                    let wv = weight[((ci * c_out + co) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ix0, ix1) = tconv_valid(ow, w, stride, pad, kx);
                    for iy in iy0..iy1 {
                        let ty = iy * stride + ky - pad;
                        let irow = &ip[iy * w..][..w];
                        let orow = &mut o[ty * ow..][..ow];
                        for ix in ix0..ix1 {
                            let tx = ix * stride + kx - pad;
                            orow[tx] += wv * irow[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

fn tconv_grad_input(g: &ConvGeom, weight: &[f32], gout: &[f32]) -> Vec<f32> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow } = *g;
    let mut gin = vec![0.0f32; n * c_in * h * w];
    gin.par_chunks_mut(h * w).enumerate().for_each(|(chunk, gi)| {
        let b = chunk / c_in;
        let ci = chunk % c_in;
        for co in 0..c_out {
            let gop = &gout[(b * c_out + co) * oh * ow..][..oh * ow];
            for ky in 0..k {
                let (iy0, iy1) = tconv_valid(oh, h, stride, pad, ky);
                for kx in 0..k {
                    let wv = weight[((ci * c_out + co) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ix0, ix1) = tconv_valid(ow, w, stride, pad, kx);
                    for iy in iy0..iy1 {
                        let ty = iy * stride + ky - pad;
                        let grow = &gop[ty * ow..][..ow];
                        let girow = &mut gi[iy * w..][..w];
                        for ix in ix0..ix1 {
                            let tx = ix * stride + kx - pad;
                            girow[ix] += wv * grow[tx];
                        }
                    }
                }
            }
        }
    });
    gin
}

fn tconv_grad_weight(g: &ConvGeom, input: &[f32], gout: &[f32]) -> Vec<f32> {
    let ConvGeom { n, c_in, h, w, c_out, k, stride, pad, oh, ow } = *g;
    let mut gw = vec![0.0f32; c_in * c_out * k * k];
    gw.par_chunks_mut(c_out * k * k).enumerate().for_each(|(ci, gwc)| {
        for b in 0..n {
            let ip = &input[(b * c_in + ci) * h * w..][..h * w];
            for co in 0..c_out {
                let gop = &gout[(b * c_out + co) * oh * ow..][..oh * ow];
                for ky in 0..k {
                    let (iy0, iy1) = tconv_valid(oh, h, stride, pad, ky);
                    for kx in 0..k {
                        let (ix0, ix1) = tconv_valid(ow, w, stride, pad, kx);
                        let mut acc = 0.0f32;
                        for iy in iy0..iy1 {
                            let ty = iy * stride + ky - pad;
                            let irow = &ip[iy * w..][..w];
                            let grow = &gop[ty * ow..][..ow];
                            for ix in ix0..ix1 {
                                let tx = ix * stride + kx - pad;
                                acc += irow[ix] * grow[tx];
                            }
                        }
                        gwc[(co * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// Transposed convolution (adjoint of `conv2d` with matched geometry when
/// `output_padding` is 0). Weight layout `(c_in, c_out, k, k)`;
/// `output_padding` extends the bottom/right edge for exact stride-multiple
/// upsampling.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor, TensorError> {
    let g = tconv_geom(input, weight, bias, stride, pad, output_padding)?;
    let out = {
        let id = input.data();
        let wd = weight.data();
        let bd = bias.map(|b| b.to_vec());
        tconv_forward(&g, &id, &wd, bd.as_deref())
    };
    let shape = [g.n, g.c_out, g.oh, g.ow];
    let saved_in = input.to_vec();
    let saved_w = weight.to_vec();
    let mut parents = vec![input.clone(), weight.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |gout, parents| {
            let geom = g;
            parents[0].accumulate_grad(&tconv_grad_input(&geom, &saved_w, gout));
            parents[1].accumulate_grad(&tconv_grad_weight(&geom, &saved_in, gout));
            if has_bias {
                let mut gb = vec![0.0f32; geom.c_out];
                for b in 0..geom.n {
                    for (co, gbc) in gb.iter_mut().enumerate() {
                        let gop = &gout[(b * geom.c_out + co) * geom.oh * geom.ow..][..geom.oh * geom.ow];
                        for v in gop {
                            *gbc += *v;
                        }
                    }
                }
                parents[2].accumulate_grad(&gb);
            }
        }),
    ))
}
