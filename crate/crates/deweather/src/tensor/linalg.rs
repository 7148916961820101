//! Matrix operations and row-structured fused ops used by the attention and
//! contrastive-loss paths.

use super::{accum, BackCtx, Tensor};
use ndarray::{Array1, Array2, ArrayD, Ix2};

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected 2-D tensor")
}

impl Tensor {
    /// 2-D matrix product `self (m x k) . other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.value();
        let b = other.value();
        let v = as2(&a).dot(&as2(&b)).into_dyn();
        drop(a);
        drop(b);
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let g = as2(ctx.grad).to_owned();
                let a = ctx.parents[0].value();
                let b = ctx.parents[1].value();
                let ga = g.dot(&as2(&b).t()).into_dyn();
                let gb = as2(&a).t().dot(&g).into_dyn();
                drop(a);
                drop(b);
                accum(&ctx.parents[0], ga);
                accum(&ctx.parents[1], gb);
            }),
        )
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Tensor {
        let v = as2(&self.value()).t().to_owned().into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                accum(&ctx.parents[0], as2(ctx.grad).t().to_owned().into_dyn());
            }),
        )
    }

    /// Row-wise softmax of an `N x K` matrix, max-subtracted for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let x = self.value();
        let x2 = as2(&x);
        let mut out = Array2::<f64>::zeros(x2.raw_dim());
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(x2.rows()) {
            let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                *o = (v - m).exp();
                z += *o;
            }
            orow.mapv_inplace(|e| e / z);
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let y = as2(ctx.value);
                let g = as2(ctx.grad);
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for ((mut drow, yrow), grow) in
                    dx.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = yv * (gv - dot);
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// Row-wise log-sum-exp over the entries where `mask` is true, returning
    /// a length-`N` vector. Each row must contain at least one masked entry.
    pub fn masked_lse_rows(&self, mask: &Array2<bool>) -> Tensor {
        let x = self.value();
        let x2 = as2(&x);
        assert_eq!(x2.shape(), mask.shape(), "mask shape mismatch");
        let n = x2.nrows();
        let mut out = Array1::<f64>::zeros(n);
        for (i, xrow) in x2.rows().into_iter().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for (j, &v) in xrow.iter().enumerate() {
                if mask[[i, j]] && v > m {
                    m = v;
                }
            }
            assert!(m.is_finite(), "masked_lse_rows: empty or non-finite row");
            let mut s = 0.0;
            for (j, &v) in xrow.iter().enumerate() {
                if mask[[i, j]] {
                    s += (v - m).exp();
                }
            }
            out[i] = m + s.ln();
        }
        drop(x);
        let mask = mask.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].value();
                let x2 = as2(&x);
                let mut dx = Array2::<f64>::zeros(x2.raw_dim());
                for (i, xrow) in x2.rows().into_iter().enumerate() {
                    let lse = ctx.value[[i]];
                    let g = ctx.grad[[i]];
                    for (j, &v) in xrow.iter().enumerate() {
                        if mask[[i, j]] {
                            dx[[i, j]] = g * (v - lse).exp();
                        }
                    }
                }
                drop(x);
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// Normalize each row of an `N x d` matrix to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let x = self.value();
        let x2 = as2(&x);
        let mut out = x2.to_owned();
        let mut norms = Array1::<f64>::zeros(x2.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = n;
            row.mapv_inplace(|v| v / n);
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let y = as2(ctx.value);
                let g = as2(ctx.grad);
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for ((mut drow, yrow), (grow, &n)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows().into_iter().zip(norms.iter()))
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = (gv - yv * dot) / n;
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }

    /// Add a per-row scalar to each entry: `out[i, k] = self[i, k] + v[i]`.
    pub fn add_col_to_rows(&self, v: &Tensor) -> Tensor {
        let m = self.value();
        let m2 = as2(&m);
        let vv = v.value();
        assert_eq!(vv.len(), m2.nrows());
        let mut out = m2.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let add = vv[[i]];
            row.mapv_inplace(|x| x + add);
        }
        drop(m);
        drop(vv);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), v.clone()],
            Box::new(|ctx: &BackCtx| {
                let g = as2(ctx.grad);
                let rowsum = g.sum_axis(ndarray::Axis(1)).into_dyn();
                accum(&ctx.parents[0], ctx.grad.clone());
                accum(&ctx.parents[1], rowsum);
            }),
        )
    }

    /// Attention-weighted sum per query: given neighbor features `self`
    /// shaped `(N*K) x d` (grouped by query) and weights `alpha` shaped
    /// `N x K`, returns `N x d` with `out[i] = sum_k alpha[i,k] * nbr[i*K+k]`.
    pub fn weighted_sum_rows(&self, alpha: &Tensor) -> Tensor {
        let nbr = self.value();
        let nbr2 = as2(&nbr);
        let al = alpha.value();
        let al2 = as2(&al);
        let (n, k) = (al2.nrows(), al2.ncols());
        assert_eq!(nbr2.nrows(), n * k, "neighbor rows must equal N*K");
        let d = nbr2.ncols();
        let mut out = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            for kk in 0..k {
                let w = al2[[i, kk]];
                let row = nbr2.row(i * k + kk);
                for (o, &x) in out.row_mut(i).iter_mut().zip(row.iter()) {
                    *o += w * x;
                }
            }
        }
        drop(nbr);
        drop(al);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), alpha.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as2(ctx.grad);
                let nbr = ctx.parents[0].value();
                let nbr2 = as2(&nbr);
                let al = ctx.parents[1].value();
                let al2 = as2(&al);
                let mut dn = Array2::<f64>::zeros(nbr2.raw_dim());
                let mut da = Array2::<f64>::zeros(al2.raw_dim());
                for i in 0..n {
                    let grow = g.row(i);
                    for kk in 0..k {
                        let w = al2[[i, kk]];
                        let nrow = nbr2.row(i * k + kk);
                        let mut dot = 0.0;
                        for ((d, &gv), &nv) in
                            dn.row_mut(i * k + kk).iter_mut().zip(grow.iter()).zip(nrow.iter())
                        {
                            *d += w * gv;
                            dot += gv * nv;
                        }
                        da[[i, kk]] = dot;
                    }
                }
                drop(nbr);
                drop(al);
                accum(&ctx.parents[0], dn.into_dyn());
                accum(&ctx.parents[1], da.into_dyn());
            }),
        )
    }

    /// Gather rows of an `N x d` matrix by index; rows may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let x = self.value();
        let x2 = as2(&x);
        let d = x2.ncols();
        let mut out = Array2::<f64>::zeros((indices.len(), d));
        for (o, &idx) in out.rows_mut().into_iter().zip(indices.iter()) {
            ndarray::Zip::from(o).and(x2.row(idx)).for_each(|a, &b| *a = b);
        }
        drop(x);
        let idx: Vec<usize> = indices.to_vec();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as2(ctx.grad);
                let src_shape = ctx.parents[0].value().raw_dim();
                let mut dx = ArrayD::<f64>::zeros(src_shape);
                {
                    let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (grow, &i) in g.rows().into_iter().zip(idx.iter()) {
                        let mut drow = dx2.row_mut(i);
                        ndarray::Zip::from(&mut drow).and(grow).for_each(|a, &b| *a += b);
                    }
                }
                accum(&ctx.parents[0], dx);
            }),
        )
    }

    /// Sort each row ascending. The backward pass routes gradients through
    /// the sorting permutation.
    pub fn sort_rows_asc(&self) -> Tensor {
        let x = self.value();
        let x2 = as2(&x);
        let (n, d) = (x2.nrows(), x2.ncols());
        let mut out = Array2::<f64>::zeros((n, d));
        let mut perms: Vec<Vec<usize>> = Vec::with_capacity(n);
        for (i, row) in x2.rows().into_iter().enumerate() {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap());
            for (j, &src) in idx.iter().enumerate() {
                out[[i, j]] = row[src];
            }
            perms.push(idx);
        }
        drop(x);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = as2(ctx.grad);
                let mut dx = Array2::<f64>::zeros(g.raw_dim());
                for (i, perm) in perms.iter().enumerate() {
                    for (j, &src) in perm.iter().enumerate() {
                        dx[[i, src]] += g[[i, j]];
                    }
                }
                accum(&ctx.parents[0], dx.into_dyn());
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn matmul_forward() {
        let a = Tensor::constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::constant(arr2(&[[5.0], [6.0]]).into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.to_array().as_slice().unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::constant(arr2(&[[1.0, -2.0, 0.3], [100.0, 100.0, 100.0]]).into_dyn());
        let s = x.softmax_rows();
        let v = s.to_array();
        for i in 0..2 {
            let total: f64 = (0..3).map(|j| v[[i, j]]).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
        // Shift invariance.
        let shifted = Tensor::constant(arr2(&[[2.0, -1.0, 1.3], [0.0, 0.0, 0.0]]).into_dyn());
        let s2 = shifted.softmax_rows().to_array();
        for j in 0..3 {
            assert_abs_diff_eq!(v[[0, j]], s2[[0, j]], epsilon = 1e-12);
        }
    }

    #[test]
    fn sort_rows_routes_gradient() {
        let x = Tensor::param(arr2(&[[3.0, 1.0, 2.0]]).into_dyn());
        let s = x.sort_rows_asc();
        assert_eq!(s.to_array().as_slice().unwrap(), &[1.0, 2.0, 3.0]);
        // loss = 1*s0 + 10*s1 + 100*s2 -> grads land at the source slots
        let w = Tensor::constant(arr2(&[[1.0, 10.0, 100.0]]).into_dyn());
        s.mul(&w).sum_all().backward();
        assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[100.0, 1.0, 10.0]);
    }

    #[test]
    fn select_rows_accumulates_repeats() {
        let x = Tensor::param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let y = x.select_rows(&[0, 0, 1]);
        y.sum_all().backward();
        let g = x.grad().unwrap();
        assert_eq!(g[[0, 0]], 2.0);
        assert_eq!(g[[1, 0]], 1.0);
    }
}
