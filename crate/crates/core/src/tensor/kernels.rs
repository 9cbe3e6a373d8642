//! Direct loop kernels for the differentiable operators.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Stride, dilation and symmetric zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("convolution dilation must be positive"));
        }
        Ok(())
    }

    pub fn effective_extent(&self, k: usize) -> usize {
        (k - 1) * self.dilation + 1
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn output_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        let extent = self.effective_extent(k);
        if padded < extent {
            None
        } else {
            Some((padded - extent) / self.stride + 1)
        }
    }

    /// Output positions `o` whose input coordinate `o*stride + tap*dilation - pad`
    /// lies inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let offset = (tap * self.dilation) as isize - self.padding as isize;
        let stride = self.stride as isize;
        // smallest o with o*stride + offset >= 0
        let lo = if offset >= 0 {
            0
        } else {
            ((-offset) + stride - 1) / stride
        };
        // largest o with o*stride + offset <= len - 1
        let hi_num = len as isize - 1 - offset;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / stride + 1).min(out_len as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

pub(crate) fn conv_output_shape(input: Shape, kernel: Shape, geom: ConvGeometry) -> Result<Shape> {
    geom.validate()?;
    if input.channels != kernel.channels {
        return Err(Error::shape(format!(
            "conv2d input has {} channels but kernel {} expects {}",
            input.channels, kernel, kernel.channels
        )));
    }
    let oh = geom.output_len(input.height, kernel.height);
    let ow = geom.output_len(input.width, kernel.width);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Shape::new(input.batch, kernel.batch, oh, ow)),
        _ => Err(Error::shape(format!(
            "kernel {}x{} (dilation {}, padding {}) does not fit input {}",
            kernel.height, kernel.width, geom.dilation, geom.padding, input
        ))),
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    geom: ConvGeometry,
) -> Result<Tensor> {
    let ks = kernel.shape();
    if bias.len() != ks.batch {
        return Err(Error::shape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            ks.batch
        )));
    }
    let is = input.shape();
    let os = conv_output_shape(is, ks, geom)?;
    let mut out = Tensor::zeros(os);
    let (ih, iw) = (is.height, is.width);
    let (oh, ow) = (os.height, os.width);
    let x = input.data();
    let w = kernel.data();
    let y = out.data_mut();
    for b in 0..is.batch {
        for oc in 0..ks.batch {
            let obase = (b * os.channels + oc) * oh * ow;
            y[obase..obase + oh * ow].fill(bias[oc]);
            for ic in 0..is.channels {
                let ibase = (b * is.channels + ic) * ih * iw;
                for ky in 0..ks.height {
                    let (oy0, oy1) = geom.valid_range(ky, ih, oh);
                    for kx in 0..ks.width {
                        let (ox0, ox1) = geom.valid_range(kx, iw, ow);
                        let wv = w[((oc * ks.channels + ic) * ks.height + ky) * ks.width + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                            let irow = ibase + iy * iw;
                            let orow = obase + oy * ow;
                            for ox in ox0..ox1 {
                                let ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                                y[orow + ox] += wv * x[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    geom: ConvGeometry,
    grad_out: &[f64],
    out_shape: Shape,
) -> ConvGrads {
    let is = input.shape();
    let ks = kernel.shape();
    let (ih, iw) = (is.height, is.width);
    let (oh, ow) = (out_shape.height, out_shape.width);
    let x = input.data();
    let w = kernel.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; ks.batch];
    for b in 0..is.batch {
        for oc in 0..ks.batch {
            let obase = (b * out_shape.channels + oc) * oh * ow;
            gb[oc] += grad_out[obase..obase + oh * ow].iter().sum::<f64>();
            for ic in 0..is.channels {
                let ibase = (b * is.channels + ic) * ih * iw;
                for ky in 0..ks.height {
                    let (oy0, oy1) = geom.valid_range(ky, ih, oh);
                    for kx in 0..ks.width {
                        let (ox0, ox1) = geom.valid_range(kx, iw, ow);
                        let widx = ((oc * ks.channels + ic) * ks.height + ky) * ks.width + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * geom.stride + ky * geom.dilation - geom.padding;
                            let irow = ibase + iy * iw;
                            let orow = obase + oy * ow;
                            for ox in ox0..ox1 {
                                let ix = ox * geom.stride + kx * geom.dilation - geom.padding;
                                let g = grad_out[orow + ox];
                                acc += g * x[irow + ix];
                                gx[irow + ix] += g * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gw,
        bias: gb,
    }
}

/// Source taps for one output coordinate of a half-pixel-centred 2x resize.
#[inline]
fn bilinear_taps(o: usize, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

pub(crate) fn upsample2x_forward(input: &Tensor) -> Tensor {
    let s = input.shape();
    let os = Shape::new(s.batch, s.channels, 2 * s.height, 2 * s.width);
    let mut out = Tensor::zeros(os);
    if s.numel() == 0 {
        return out;
    }
    let x = input.data();
    let y = out.data_mut();
    let xtaps: Vec<_> = (0..os.width).map(|o| bilinear_taps(o, s.width)).collect();
    for p in 0..s.batch * s.channels {
        let ibase = p * s.plane();
        let obase = p * os.plane();
        for oy in 0..os.height {
            let (y0, y1, fy) = bilinear_taps(oy, s.height);
            let r0 = ibase + y0 * s.width;
            let r1 = ibase + y1 * s.width;
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let top = x[r0 + x0] * (1.0 - fx) + x[r0 + x1] * fx;
                let bot = x[r1 + x0] * (1.0 - fx) + x[r1 + x1] * fx;
                y[obase + oy * os.width + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(in_shape: Shape, grad_out: &[f64]) -> Vec<f64> {
    let s = in_shape;
    let (oh, ow) = (2 * s.height, 2 * s.width);
    let mut gx = vec![0.0; s.numel()];
    if s.numel() == 0 {
        return gx;
    }
    let xtaps: Vec<_> = (0..ow).map(|o| bilinear_taps(o, s.width)).collect();
    for p in 0..s.batch * s.channels {
        let ibase = p * s.plane();
        let obase = p * oh * ow;
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, s.height);
            let r0 = ibase + y0 * s.width;
            let r1 = ibase + y1 * s.width;
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let g = grad_out[obase + oy * ow + ox];
                gx[r0 + x0] += g * (1.0 - fy) * (1.0 - fx);
                gx[r0 + x1] += g * (1.0 - fy) * fx;
                gx[r1 + x0] += g * fy * (1.0 - fx);
                gx[r1 + x1] += g * fy * fx;
            }
        }
    }
    gx
}

/// Keeps the top-left `height x width` window of every plane.
pub(crate) fn crop_forward(input: &Tensor, height: usize, width: usize) -> Tensor {
    let s = input.shape();
    let os = Shape::new(s.batch, s.channels, height, width);
    let mut data = Vec::with_capacity(os.numel());
    for p in 0..s.batch * s.channels {
        for y in 0..height {
            let from = p * s.plane() + y * s.width;
            data.extend_from_slice(&input.data()[from..from + width]);
        }
    }
    Tensor::from_vec(os, data).expect("crop size computed from shape")
}

pub(crate) fn crop_backward(in_shape: Shape, out_shape: Shape, grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; in_shape.numel()];
    for p in 0..in_shape.batch * in_shape.channels {
        for y in 0..out_shape.height {
            let to = p * in_shape.plane() + y * in_shape.width;
            let from = p * out_shape.plane() + y * out_shape.width;
            gx[to..to + out_shape.width].copy_from_slice(&grad_out[from..from + out_shape.width]);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for stride in 1..4 {
            for dilation in 1..4 {
                for padding in 0..5 {
                    for len in 1..12 {
                        let g = ConvGeometry {
                            stride,
                            dilation,
                            padding,
                        };
                        let Some(out) = g.output_len(len, 3) else { continue };
                        for tap in 0..3 {
                            let (lo, hi) = g.valid_range(tap, len, out);
                            let expect: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + tap * dilation) as isize - padding as isize;
                                    i >= 0 && (i as usize) < len
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, expect, "s{stride} d{dilation} p{padding} n{len} t{tap}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_taps_clamp_edges() {
        assert_eq!(bilinear_taps(0, 3), (0, 1, 0.0));
        let (i0, i1, f) = bilinear_taps(1, 3);
        assert_eq!((i0, i1), (0, 1));
        assert!((f - 0.25).abs() < 1e-15);
        assert_eq!(bilinear_taps(5, 3), (2, 2, 0.25));
    }
}
