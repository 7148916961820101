//! Adam optimizer over tape leaves.

use super::Tensor;
use ndarray::ArrayD;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update using the gradients currently stored on `params`.
    /// Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "optimizer bound to different params");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let mut value = p.to_array();
            ndarray::Zip::from(&mut value).and(&*m).and(&*v).for_each(|x, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
            p.set_value(value);
        }
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_descends_quadratic() {
        let x = Tensor::param(arr1(&[3.0, -2.0]).into_dyn());
        let params = vec![x.clone()];
        let mut opt = Adam::new(&params, 0.1, 0.9, 0.999);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            opt.zero_grad(&params);
            let loss = x.mul(&x).sum_all();
            loss.backward();
            opt.step(&params);
            last = x.mul(&x).sum_all().item();
        }
        assert!(last < 1e-3, "did not converge: {last}");
    }
}
