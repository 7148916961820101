//! Shape manipulation: reshape, concat/narrow, patch unfold/fold.

use super::{accum, BackCtx, Tensor};
use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let src = ctx.parents[0].value().raw_dim();
                let g = ctx.grad.to_shape(src).unwrap().to_owned();
                accum(&ctx.parents[0], g);
            }),
        )
    }

    /// Concatenate along `axis`. Backward splits the gradient back.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let values: Vec<ArrayD<f64>> = parts.iter().map(|p| p.to_array()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Tensor::from_op(
            v,
            parts.to_vec(),
            Box::new(move |ctx: &BackCtx| {
                let mut start = 0isize;
                for (p, &sz) in ctx.parents.iter().zip(sizes.iter()) {
                    let piece = ctx
                        .grad
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + sz as isize), 1))
                        .to_owned();
                    accum(p, piece);
                    start += sz as isize;
                }
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .value()
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let src = ctx.parents[0].value().raw_dim();
                let mut dx = ArrayD::<f64>::zeros(src);
                dx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(ctx.grad);
                accum(&ctx.parents[0], dx);
            }),
        )
    }

    /// Extract all `s x s` windows of a `C x H x W` map at the given stride.
    /// Output is `N x (C*s*s)` in raster order of window origins; within a
    /// row, the window is flattened column-major as (row-in-window fastest,
    /// then column, then channel).
    pub fn unfold_patches(&self, s: usize, stride: usize) -> Tensor {
        let x = self.value();
        let x3 = x.view().into_dimensionality::<Ix3>().expect("unfold expects C x H x W");
        let (c, h, w) = x3.dim();
        assert!(s <= h && s <= w && stride >= 1, "unfold geometry");
        let rows = (h - s) / stride + 1;
        let cols = (w - s) / stride + 1;
        let d = c * s * s;
        let mut out = ndarray::Array2::<f64>::zeros((rows * cols, d));
        for r in 0..rows {
            for cc in 0..cols {
                let (oy, ox) = (r * stride, cc * stride);
                let row_idx = r * cols + cc;
                for ch in 0..c {
                    for wx in 0..s {
                        for wy in 0..s {
                            out[[row_idx, wy + s * wx + s * s * ch]] = x3[[ch, oy + wy, ox + wx]];
                        }
                    }
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let src = ctx.parents[0].value().raw_dim();
                let mut dx = ArrayD::<f64>::zeros(src);
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for r in 0..rows {
                        for cc in 0..cols {
                            let (oy, ox) = (r * stride, cc * stride);
                            let row_idx = r * cols + cc;
                            for ch in 0..c {
                                for wx in 0..s {
                                    for wy in 0..s {
                                        dx3[[ch, oy + wy, ox + wx]] +=
                                            g[[row_idx, wy + s * wx + s * s * ch]];
                                    }
                                }
                            }
                        }
                    }
                }
                accum(&ctx.parents[0], dx);
            }),
        )
    }

    /// Exact inverse of `unfold_patches` for non-overlapping windows
    /// (stride == s). `grid` is (rows, cols) and `channels` the original C.
    pub fn fold_patches(&self, s: usize, grid: (usize, usize), channels: usize) -> Tensor {
        let (rows, cols) = grid;
        let x = self.value();
        let x2 = x.view().into_dimensionality::<Ix2>().expect("fold expects N x d");
        assert_eq!(x2.nrows(), rows * cols, "fold row count");
        assert_eq!(x2.ncols(), channels * s * s, "fold row width");
        let (h, w) = (rows * s, cols * s);
        let mut out = ndarray::Array3::<f64>::zeros((channels, h, w));
        for r in 0..rows {
            for cc in 0..cols {
                let row_idx = r * cols + cc;
                for ch in 0..channels {
                    for wx in 0..s {
                        for wy in 0..s {
                            out[[ch, r * s + wy, cc * s + wx]] =
                                x2[[row_idx, wy + s * wx + s * s * ch]];
                        }
                    }
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((rows * cols, channels * s * s));
                for r in 0..rows {
                    for cc in 0..cols {
                        let row_idx = r * cols + cc;
                        for ch in 0..channels {
                            for wx in 0..s {
                                for wy in 0..s {
                                    dx[[row_idx, wy + s * wx + s * s * ch]] =
                                        g[[ch, r * s + wy, cc * s + wx]];
                                }
                            }
                        }
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// Stack `B` same-shaped tensors into a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        let expanded: Vec<Tensor> = parts
            .iter()
            .map(|p| {
                let mut shape = vec![1usize];
                shape.extend(p.shape());
                p.reshape(&shape)
            })
            .collect();
        Tensor::concat(&expanded, 0)
    }

    /// Select sample `b` from a batched tensor, dropping the leading axis.
    pub fn select_batch(&self, b: usize) -> Tensor {
        let shape = self.shape();
        let rest: Vec<usize> = shape[1..].to_vec();
        self.narrow(0, b, 1).reshape(&rest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn unfold_fold_roundtrip_exact() {
        let mut x = Array3::<f64>::zeros((3, 6, 6));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64) * 0.37 - 4.0;
        }
        let t = Tensor::constant(x.clone().into_dyn());
        let p = t.unfold_patches(3, 3);
        assert_eq!(p.shape(), vec![4, 27]);
        let back = p.fold_patches(3, (2, 2), 3);
        assert_eq!(back.to_array(), x.into_dyn());
    }

    #[test]
    fn unfold_window_count_stride_one() {
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 4, 4])));
        assert_eq!(x.unfold_patches(2, 1).shape()[0], 9);
    }

    #[test]
    fn concat_narrow_backward() {
        let a = Tensor::param(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = Tensor::param(arr2(&[[3.0, 4.0]]).into_dyn());
        let c = Tensor::concat(&[a.clone(), b.clone()], 1);
        // keep only the b half
        c.narrow(1, 2, 2).sum_all().backward();
        assert_eq!(a.grad().unwrap().as_slice().unwrap(), &[0.0, 0.0]);
        assert_eq!(b.grad().unwrap().as_slice().unwrap(), &[1.0, 1.0]);
    }
}
