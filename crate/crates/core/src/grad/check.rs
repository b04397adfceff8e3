//! Central finite differences, used as the independent oracle for `backward`.

use crate::grad::tensor::{ParamGrads, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-8f64.max(a.abs()).max(b.abs())
}

/// Elementwise maximum of [`relative_error`].
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for each coordinate of `x`.
pub fn finite_diff<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Finite-difference gradient of `f` with respect to every scalar in `store`.
pub fn finite_diff_grad<F>(mut f: F, store: &ParamStore, eps: f64) -> ParamGrads
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut out = store.zero_grads();
    for id in ids {
        for k in 0..store.param(id).value.numel() {
            let orig = probe.param(id).value.data()[k];
            probe.param_mut(id).value.data_mut()[k] = orig + eps;
            let up = f(&probe);
            probe.param_mut(id).value.data_mut()[k] = orig - eps;
            let down = f(&probe);
            probe.param_mut(id).value.data_mut()[k] = orig;
            out.0[id.index()][k] = (up - down) / (2.0 * eps);
        }
    }
    out
}
