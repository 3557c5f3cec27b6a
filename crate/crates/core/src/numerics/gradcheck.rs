//! Central finite-difference gradient checking in 64-bit.

use super::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_gradient(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest relative disagreement between two gradients, using
/// `|a - n| / max(|a|, |n|, 1e-8)` per coordinate.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient returned by `f` against central differences.
///
/// `f` returns `(value, gradient)` at its argument; only the value is used for the
/// numeric side.
pub fn finite_difference_check<Func>(f: Func, x: &Tensor<f64>, h: f64) -> f64
where
    Func: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let (_, analytic) = f(x);
    let numeric = numeric_gradient(|p| f(p).0, x, h);
    max_relative_error(&analytic, &numeric)
}
