//! Central finite-difference checks for the hand-written backward passes.

use super::{Module, Tensor};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`, the comparison used across gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient<Fn_>(x: &[f64], mut f: Fn_, h: f64) -> Vec<f64>
where
    Fn_: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn agree(analytic: f64, numeric: f64, tol: f64) -> bool {
    // absolute floor for entries whose true gradient is ~0
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()).max(1.0)
}

/// Panics unless `dx` matches the finite-difference gradient of `f` at `x`.
pub fn check_input_grad<Fn_>(x: &Tensor<f64>, dx: &Tensor<f64>, f: Fn_, tol: f64)
where
    Fn_: Fn(&Tensor<f64>) -> f64,
{
    assert_eq!(x.shape, dx.shape);
    let numeric = numerical_gradient(
        &x.data,
        |v| f(&Tensor::from_vec(&x.shape, v.to_vec())),
        STEP,
    );
    for (i, (&a, &n)) in dx.data.iter().zip(&numeric).enumerate() {
        assert!(agree(a, n, tol), "input grad {i}: analytic {a} vs numeric {n}");
    }
}

/// Panics unless every accumulated parameter gradient of `m` matches finite differences of `f`.
pub fn check_param_grads<M, Fn_>(m: &mut M, f: Fn_, tol: f64)
where
    M: Module<f64>,
    Fn_: Fn(&M) -> f64,
{
    let shapes: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
    for (pi, &len) in shapes.iter().enumerate() {
        for j in 0..len {
            let (orig, analytic, name) = {
                let p = &m.params()[pi];
                (p.value[j], p.grad[j], p.name.clone())
            };
            m.params_mut()[pi].value[j] = orig + STEP;
            let up = f(m);
            m.params_mut()[pi].value[j] = orig - STEP;
            let down = f(m);
            m.params_mut()[pi].value[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            assert!(
                agree(analytic, numeric, tol),
                "{name}[{j}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }
}
