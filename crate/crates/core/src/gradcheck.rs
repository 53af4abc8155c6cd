//! Central finite differences against analytic gradients.

use crate::tensor::Tensor;

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Numerical gradient of `f` at `x` with step `h`.
pub fn numeric_grad(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest elementwise relative error between `analytic` and the numerical
/// gradient. Entries where both are below `floor` in magnitude compare as
/// absolute differences scaled by `floor`.
pub fn max_rel_error(
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    floor: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let num = numeric_grad(f, x, h);
    num.data()
        .iter()
        .zip(analytic.data())
        .map(|(&n, &a)| rel_error(a, n, floor))
        .fold(0.0, f64::max)
}
