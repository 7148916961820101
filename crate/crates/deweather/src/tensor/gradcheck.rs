//! Central-finite-difference gradient verification.

use super::Tensor;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `loss_fn` (a scalar-producing closure that
/// rebuilds its graph from the given leaves on every call) against central
/// finite differences at step `h`. Leaves must have `requires_grad`.
///
/// The relative error for one element is |a - fd| / max(|a|, |fd|); elements
/// where both magnitudes are below 1e-7 are counted as exact.
pub fn check_gradients(
    leaves: &[Tensor],
    mut loss_fn: impl FnMut() -> Tensor,
    h: f64,
) -> GradCheckReport {
    for t in leaves {
        assert!(t.requires_grad(), "gradcheck leaf must require grad");
        t.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();
    let analytic: Vec<_> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| ndarray::ArrayD::zeros(t.value().raw_dim())))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (leaf, grad) in leaves.iter().zip(analytic.iter()) {
        let n = leaf.len();
        for i in 0..n {
            let orig = {
                let v = leaf.to_array();
                v.as_slice().unwrap()[i]
            };
            set_elem(leaf, i, orig + h);
            let lp = loss_fn().item();
            set_elem(leaf, i, orig - h);
            let lm = loss_fn().item();
            set_elem(leaf, i, orig);
            let fd = (lp - lm) / (2.0 * h);
            let a = grad.as_slice().unwrap()[i];
            let denom = a.abs().max(fd.abs());
            let rel = if denom < 1e-7 { 0.0 } else { (a - fd).abs() / denom };
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        checked,
    }
}

fn set_elem(t: &Tensor, i: usize, v: f64) {
    let mut arr = t.to_array();
    arr.as_slice_mut().unwrap()[i] = v;
    t.set_value(arr);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::param(arr1(&[0.5, -1.2, 2.0]).into_dyn());
        let report = check_gradients(
            std::slice::from_ref(&x),
            || x.mul(&x).add(&x.tanh()).mean_all(),
            1e-5,
        );
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 3);
    }
}
