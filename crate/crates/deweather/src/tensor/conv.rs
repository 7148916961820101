//! Batched NCHW convolution (im2col + matmul), pooling, upsampling, fixed
//! depthwise blur, and batch normalization.

use super::{accum, BackCtx, Tensor};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView3, ArrayView4, Ix1, Ix4};

fn as4(v: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("expected 4-D tensor")
}

pub(crate) fn conv_out_size(input: usize, k: usize, pad: usize, stride: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col(x: ArrayView3<'_, f64>, kh: usize, kw: usize, pad: usize, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, kh, pad, stride);
    let wo = conv_out_size(w, kw, pad, stride);
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ch * kh * kw + ky * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[ch, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: ArrayView2<'_, f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
) -> ndarray::Array3<f64> {
    let ho = conv_out_size(h, kh, pad, stride);
    let wo = conv_out_size(w, kw, pad, stride);
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ch * kh * kw + ky * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ch, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    out
}

impl Tensor {
    /// 2-D convolution: `self` is `B x Cin x H x W`, `weight` is
    /// `Cout x Cin x kh x kw`, `bias` is `Cout`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x = self.value();
        let x4 = as4(&x);
        let wv = weight.value();
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d weight 4-D");
        let bv = bias.value();
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("conv2d bias 1-D");
        let (batch, cin, h, w) = x4.dim();
        let (cout, wcin, kh, kw) = w4.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(b1.len(), cout);
        let ho = conv_out_size(h, kh, pad, stride);
        let wo = conv_out_size(w, kw, pad, stride);
        let w2 = w4.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((batch, cout, ho, wo));
        for b in 0..batch {
            let col = im2col(x4.index_axis(ndarray::Axis(0), b), kh, kw, pad, stride);
            let y2 = w2.dot(&col);
            for co in 0..cout {
                let bias_c = b1[co];
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[b, co, oy, ox]] = y2[[co, oy * wo + ox]] + bias_c;
                    }
                }
            }
        }
        drop(x);
        drop(wv);
        drop(bv);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as4(ctx.grad);
                let x = ctx.parents[0].value();
                let x4 = as4(&x);
                let wv = ctx.parents[1].value();
                let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
                let w2 = w4.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let mut gx = Array4::<f64>::zeros((batch, cin, h, w));
                let mut gw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut gb = Array1::<f64>::zeros(cout);
                for b in 0..batch {
                    // g for this sample as (cout, ho*wo)
                    let mut g2 = Array2::<f64>::zeros((cout, ho * wo));
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = g[[b, co, oy, ox]];
                                g2[[co, oy * wo + ox]] = v;
                                gb[co] += v;
                            }
                        }
                    }
                    let col = im2col(x4.index_axis(ndarray::Axis(0), b), kh, kw, pad, stride);
                    gw2 += &g2.dot(&col.t());
                    let gcol = w2.t().dot(&g2);
                    let gxb = col2im(gcol.view(), cin, h, w, kh, kw, pad, stride);
                    gx.index_axis_mut(ndarray::Axis(0), b).assign(&gxb);
                }
                drop(x);
                drop(wv);
                let gw = gw2.to_shape((cout, cin, kh, kw)).unwrap().to_owned();
                accum(&ctx.parents[0], gx.into_dyn());
                accum(&ctx.parents[1], gw.into_dyn());
                accum(&ctx.parents[2], gb.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of a `B x C x H x W` tensor.
    pub fn upsample_nearest2(&self) -> Tensor {
        let x = self.value();
        let x4 = as4(&x);
        let (b, c, h, w) = x4.dim();
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for xg in 0..w {
                        let v = x4[[bi, ch, y, xg]];
                        out[[bi, ch, 2 * y, 2 * xg]] = v;
                        out[[bi, ch, 2 * y + 1, 2 * xg]] = v;
                        out[[bi, ch, 2 * y, 2 * xg + 1]] = v;
                        out[[bi, ch, 2 * y + 1, 2 * xg + 1]] = v;
                    }
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as4(ctx.grad);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ch in 0..c {
                        for y in 0..h {
                            for xg in 0..w {
                                dx[[bi, ch, y, xg]] = g[[bi, ch, 2 * y, 2 * xg]]
                                    + g[[bi, ch, 2 * y + 1, 2 * xg]]
                                    + g[[bi, ch, 2 * y, 2 * xg + 1]]
                                    + g[[bi, ch, 2 * y + 1, 2 * xg + 1]];
                            }
                        }
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (H and W must be even).
    pub fn avg_pool2(&self) -> Tensor {
        let x = self.value();
        let x4 = as4(&x);
        let (b, c, h, w) = x4.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..ho {
                    for xg in 0..wo {
                        out[[bi, ch, y, xg]] = 0.25
                            * (x4[[bi, ch, 2 * y, 2 * xg]]
                                + x4[[bi, ch, 2 * y + 1, 2 * xg]]
                                + x4[[bi, ch, 2 * y, 2 * xg + 1]]
                                + x4[[bi, ch, 2 * y + 1, 2 * xg + 1]]);
                    }
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as4(ctx.grad);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ch in 0..c {
                        for y in 0..ho {
                            for xg in 0..wo {
                                let v = 0.25 * g[[bi, ch, y, xg]];
                                dx[[bi, ch, 2 * y, 2 * xg]] = v;
                                dx[[bi, ch, 2 * y + 1, 2 * xg]] = v;
                                dx[[bi, ch, 2 * y, 2 * xg + 1]] = v;
                                dx[[bi, ch, 2 * y + 1, 2 * xg + 1]] = v;
                            }
                        }
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// Depthwise valid-mode correlation with a fixed (non-learned) kernel,
    /// applied to every channel of a `B x C x H x W` tensor.
    pub fn blur_depthwise_valid(&self, kernel: &Array2<f64>) -> Tensor {
        let x = self.value();
        let x4 = as4(&x);
        let (b, c, h, w) = x4.dim();
        let (kh, kw) = kernel.dim();
        assert!(h >= kh && w >= kw, "blur kernel larger than input");
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let mut out = Array4::<f64>::zeros((b, c, ho, wo));
        for bi in 0..b {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += x4[[bi, ch, oy + ky, ox + kx]] * kernel[[ky, kx]];
                            }
                        }
                        out[[bi, ch, oy, ox]] = acc;
                    }
                }
            }
        }
        drop(x);
        let kernel = kernel.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as4(ctx.grad);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[[bi, ch, oy, ox]];
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        dx[[bi, ch, oy + ky, ox + kx]] += gv * kernel[[ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// Training-mode batch normalization over `B x C x H x W` using batch
    /// statistics (biased variance). Returns (output, batch_mean, batch_var)
    /// so callers can maintain running statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> (Tensor, Array1<f64>, Array1<f64>) {
        let x = self.value();
        let x4 = as4(&x);
        let (b, c, h, w) = x4.dim();
        let m = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                for y in 0..h {
                    for xg in 0..w {
                        s += x4[[bi, ch, y, xg]];
                    }
                }
            }
            mean[ch] = s / m;
            let mut v = 0.0;
            for bi in 0..b {
                for y in 0..h {
                    for xg in 0..w {
                        let d = x4[[bi, ch, y, xg]] - mean[ch];
                        v += d * d;
                    }
                }
            }
            var[ch] = v / m;
        }
        let gv = gamma.value();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = beta.value();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for bi in 0..b {
                for y in 0..h {
                    for xg in 0..w {
                        out[[bi, ch, y, xg]] =
                            g1[ch] * (x4[[bi, ch, y, xg]] - mean[ch]) * inv + b1[ch];
                    }
                }
            }
        }
        drop(x);
        drop(gv);
        drop(bv);
        let mean_c = mean.clone();
        let var_c = var.clone();
        let t = Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as4(ctx.grad);
                let x = ctx.parents[0].value();
                let x4 = as4(&x);
                let gammav = ctx.parents[1].value();
                let gamma1 = gammav.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let inv = 1.0 / (var_c[ch] + eps).sqrt();
                    // means of g and g*xhat over the channel slice
                    let mut mg = 0.0;
                    let mut mgx = 0.0;
                    for bi in 0..b {
                        for y in 0..h {
                            for xg in 0..w {
                                let xhat = (x4[[bi, ch, y, xg]] - mean_c[ch]) * inv;
                                let gv = g[[bi, ch, y, xg]];
                                mg += gv;
                                mgx += gv * xhat;
                                dgamma[ch] += gv * xhat;
                                dbeta[ch] += gv;
                            }
                        }
                    }
                    mg /= m;
                    mgx /= m;
                    let scale = gamma1[ch] * inv;
                    for bi in 0..b {
                        for y in 0..h {
                            for xg in 0..w {
                                let xhat = (x4[[bi, ch, y, xg]] - mean_c[ch]) * inv;
                                let gv = g[[bi, ch, y, xg]];
                                dx[[bi, ch, y, xg]] = scale * (gv - mg - xhat * mgx);
                            }
                        }
                    }
                }
                drop(x);
                drop(gammav);
                accum(&ctx.parents[0], dx.into_dyn());
                accum(&ctx.parents[1], dgamma.into_dyn());
                accum(&ctx.parents[2], dbeta.into_dyn());
            }),
        );
        (t, mean, var)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Tensor {
        let c = mean.len();
        let gv = gamma.value();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let bv = beta.value();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        // y = x * scale_c + shift_c : fold stats into constants
        let mut scale = Array1::<f64>::zeros(c);
        let mut shift = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            scale[ch] = g1[ch] * inv;
            shift[ch] = b1[ch] - g1[ch] * mean[ch] * inv;
        }
        drop(gv);
        drop(bv);
        let x = self.value();
        let x4 = as4(&x);
        let (b, cc, h, w) = x4.dim();
        assert_eq!(cc, c);
        let mut out = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for xg in 0..w {
                        out[[bi, ch, y, xg]] = x4[[bi, ch, y, xg]] * scale[ch] + shift[ch];
                    }
                }
            }
        }
        drop(x);
        let mean = mean.clone();
        let var = var.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as4(ctx.grad);
                let x = ctx.parents[0].value();
                let x4 = as4(&x);
                let gammav = ctx.parents[1].value();
                let gamma1 = gammav.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + eps).sqrt();
                    for bi in 0..b {
                        for y in 0..h {
                            for xg in 0..w {
                                let gv = g[[bi, ch, y, xg]];
                                let xhat = (x4[[bi, ch, y, xg]] - mean[ch]) * inv;
                                dx[[bi, ch, y, xg]] = gv * gamma1[ch] * inv;
                                dgamma[ch] += gv * xhat;
                                dbeta[ch] += gv;
                            }
                        }
                    }
                }
                drop(x);
                drop(gammav);
                accum(&ctx.parents[0], dx.into_dyn());
                accum(&ctx.parents[1], dgamma.into_dyn());
                accum(&ctx.parents[2], dbeta.into_dyn());
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn conv2d_known_values() {
        // 1x1x3x3 input, 1x1x2x2 kernel of ones, stride 1, no pad:
        // output entries are the 2x2 window sums.
        let mut x = Array4::<f64>::zeros((1, 1, 3, 3));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let xt = Tensor::constant(x.into_dyn());
        let w = Tensor::constant(Array4::<f64>::ones((1, 1, 2, 2)).into_dyn());
        let b = Tensor::constant(Array1::<f64>::zeros(1).into_dyn());
        let y = xt.conv2d(&w, &b, 1, 0);
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        let v = y.to_array();
        assert_abs_diff_eq!(v[[0, 0, 0, 0]], 0.0 + 1.0 + 3.0 + 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[0, 0, 1, 1]], 4.0 + 5.0 + 7.0 + 8.0, epsilon = 1e-12);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64 - 3.0;
        }
        let xt = Tensor::constant(x.clone().into_dyn());
        let y = xt.upsample_nearest2().avg_pool2();
        assert_eq!(y.to_array(), x.into_dyn());
    }
}
