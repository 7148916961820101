//! Elementwise operations and global reductions.

use super::{accum, BackCtx, Tensor};
use ndarray::{ArrayD, IxDyn};

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() + &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                accum(&ctx.parents[0], ctx.grad.clone());
                accum(&ctx.parents[1], ctx.grad.clone());
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() - &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                accum(&ctx.parents[0], ctx.grad.clone());
                accum(&ctx.parents[1], -ctx.grad);
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() * &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let a = ctx.parents[0].value().clone();
                let b = ctx.parents[1].value().clone();
                accum(&ctx.parents[0], ctx.grad * &b);
                accum(&ctx.parents[1], ctx.grad * &a);
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = &*self.value() / &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackCtx| {
                let a = ctx.parents[0].value().clone();
                let b = ctx.parents[1].value().clone();
                accum(&ctx.parents[0], ctx.grad / &b);
                accum(&ctx.parents[1], -(ctx.grad * &a) / (&b * &b));
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        let v = -&*self.value();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| accum(&ctx.parents[0], -ctx.grad)),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = &*self.value() + c;
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| accum(&ctx.parents[0], ctx.grad.clone())),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let v = &*self.value() * c;
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| accum(&ctx.parents[0], ctx.grad * c)),
        )
    }

    pub fn exp(&self) -> Tensor {
        let v = self.value().mapv(f64::exp);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| accum(&ctx.parents[0], ctx.grad * ctx.value)),
        )
    }

    pub fn ln(&self) -> Tensor {
        let v = self.value().mapv(f64::ln);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let x = ctx.parents[0].value().clone();
                accum(&ctx.parents[0], ctx.grad / &x);
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let v = self.value().mapv(f64::sqrt);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                accum(&ctx.parents[0], ctx.grad / &(ctx.value * 2.0));
            }),
        )
    }

    pub fn abs(&self) -> Tensor {
        let v = self.value().mapv(f64::abs);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let sign = ctx.parents[0].value().mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accum(&ctx.parents[0], ctx.grad * &sign);
            }),
        )
    }

    /// x^p for x >= 0. The backward pass floors the base away from zero to
    /// avoid infinite gradients from fractional exponents at exactly 0.
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        let v = self.value().mapv(|x| x.powf(p));
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let x = ctx.parents[0].value().clone();
                let d = x.mapv(|x| p * x.max(1e-12).powf(p - 1.0));
                accum(&ctx.parents[0], ctx.grad * &d);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let v = self.value().mapv(|x| x.max(0.0));
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let mask = ctx.parents[0].value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accum(&ctx.parents[0], ctx.grad * &mask);
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.value().mapv(|x| if x >= 0.0 { x } else { slope * x });
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackCtx| {
                let mask = ctx.parents[0]
                    .value()
                    .mapv(|x| if x >= 0.0 { 1.0 } else { slope });
                accum(&ctx.parents[0], ctx.grad * &mask);
            }),
        )
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Tensor {
        let v = self.value().mapv(|x| if x >= 0.0 { x } else { x.exp() - 1.0 });
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let d = ctx.parents[0]
                    .value()
                    .mapv(|x| if x >= 0.0 { 1.0 } else { x.exp() });
                accum(&ctx.parents[0], ctx.grad * &d);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.value().mapv(f64::tanh);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let d = ctx.value.mapv(|y| 1.0 - y * y);
                accum(&ctx.parents[0], ctx.grad * &d);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.value().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(|ctx: &BackCtx| {
                let g = ctx.grad[[]];
                let shape = ctx.parents[0].value().raw_dim();
                accum(&ctx.parents[0], ArrayD::from_elem(shape, g));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Mean of |a - b| (smooth at machine scale is irrelevant here; the L1
    /// subgradient at 0 is taken as 0).
    pub fn l1_mean(&self, other: &Tensor) -> Tensor {
        self.sub(other).abs().mean_all()
    }

    /// Mean smooth-L1 (Huber with delta = 1): quadratic inside |d| < 1,
    /// linear outside.
    pub fn smooth_l1_mean(&self, other: &Tensor) -> Tensor {
        let a = self.value();
        let b = other.value();
        let n = a.len() as f64;
        let mut total = 0.0;
        ndarray::Zip::from(&*a).and(&*b).for_each(|&x, &y| {
            let d = (x - y).abs();
            total += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        });
        let value = ArrayD::from_elem(IxDyn(&[]), total / n);
        drop(a);
        drop(b);
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackCtx| {
                let g = ctx.grad[[]] / n;
                let a = ctx.parents[0].value();
                let b = ctx.parents[1].value();
                let mut da = ArrayD::zeros(a.raw_dim());
                ndarray::Zip::from(&mut da).and(&*a).and(&*b).for_each(|o, &x, &y| {
                    let d = x - y;
                    *o = g * d.clamp(-1.0, 1.0);
                });
                let db = -&da;
                drop(a);
                drop(b);
                accum(&ctx.parents[0], da);
                accum(&ctx.parents[1], db);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    #[test]
    fn smooth_l1_closed_form() {
        // |d| = 0.5 -> 0.125 ; |d| = 2 -> 1.5
        let a = Tensor::constant(arr1(&[0.5]).into_dyn());
        let z = Tensor::constant(arr1(&[0.0]).into_dyn());
        assert_abs_diff_eq!(a.smooth_l1_mean(&z).item(), 0.125, epsilon = 1e-12);
        let b = Tensor::constant(arr1(&[2.0]).into_dyn());
        assert_abs_diff_eq!(b.smooth_l1_mean(&z).item(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn elementwise_backward_values() {
        // y = mean(exp(x) / (x + 2))
        let x = Tensor::param(arr1(&[0.3, -0.7]).into_dyn());
        let y = x.exp().div(&x.add_scalar(2.0)).mean_all();
        y.backward();
        let g = x.grad().unwrap();
        // d/dx [e^x/(x+2)] = e^x (x+1) / (x+2)^2, halved by the mean.
        for (i, &xv) in [0.3f64, -0.7].iter().enumerate() {
            let expect = 0.5 * xv.exp() * (xv + 1.0) / (xv + 2.0_f64).powi(2);
            assert_abs_diff_eq!(g[[i]], expect, epsilon = 1e-12);
        }
    }
}
