//! Central finite-difference gradient verification.
//!
//! Verification-only machinery: the checks here recompute gradients
//! numerically and never share code with the analytic backward passes they
//! validate.

use crate::tensor::Tensor;

/// Numeric d(loss)/d(param[i]) via central differences with step `h`.
/// `loss_fn` must rebuild the forward graph from the current parameter data.
pub fn finite_diff(param: &Tensor, loss_fn: &dyn Fn() -> Tensor, h: f32) -> Vec<f64> {
    let n = param.numel();
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let up = loss_fn().item() as f64;
        param.data_mut()[i] = orig - h;
        let down = loss_fn().item() as f64;
        param.data_mut()[i] = orig;
        grads.push((up - down) / (2.0 * h as f64));
    }
    grads
}

/// Compares analytic gradients of `loss_fn` w.r.t. each parameter against
/// central finite differences. Returns the worst relative error seen.
pub fn max_rel_error(params: &[(&str, &Tensor)], loss_fn: &dyn Fn() -> Tensor, h: f32) -> f64 {
    max_rel_error_with_floor(params, loss_fn, h, 1e-4)
}

/// As [`max_rel_error`] with an explicit denominator floor; raise the floor
/// when the loss magnitude makes tiny true gradients drown in f32 noise.
pub fn max_rel_error_with_floor(
    params: &[(&str, &Tensor)],
    loss_fn: &dyn Fn() -> Tensor,
    h: f32,
    floor: f64,
) -> f64 {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    loss.backward().expect("scalar loss");
    let mut worst = 0.0f64;
    for (name, p) in params {
        let analytic = p
            .grad()
            .unwrap_or_else(|| panic!("no gradient reached parameter {name}"));
        let numeric = finite_diff(p, loss_fn, h);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let a = *a as f64;
            let denom = a.abs().max(n.abs()).max(floor);
            let err = (a - n).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    for (_, p) in params {
        p.zero_grad();
    }
    worst
}
