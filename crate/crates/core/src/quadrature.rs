//! One-dimensional quadrature used as an independent check on closed forms.

use std::f64::consts::PI;

/// Composite Simpson rule with `intervals` (rounded up to even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let m = intervals + intervals % 2;
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// `E[f(X)]` for `X ~ N(mean, var)`, integrating over `mean ± 14 sd`.
pub fn gaussian_expectation(mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
    let sd = var.sqrt();
    let norm = 1.0 / (2.0 * PI * var).sqrt();
    simpson(
        |x| norm * (-0.5 * (x - mean).powi(2) / var).exp() * f(x),
        mean - 14.0 * sd,
        mean + 14.0 * sd,
        40_000,
    )
}
