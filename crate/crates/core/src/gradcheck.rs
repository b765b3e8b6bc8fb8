//! Central finite differences with Richardson extrapolation, for checking
//! analytic gradients.

/// Derivative of `f` at `x` along one coordinate, from central differences at
/// steps `h` and `h/2` combined to cancel the `O(h²)` term.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let d1 = (f(x + h) - f(x - h)) / (2.0 * h);
    let d2 = (f(x + 0.5 * h) - f(x - 0.5 * h)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Numerical gradient of `f` at `x`, with per-coordinate step
/// `rel_step * max(|x_i|, 1)`.
pub fn numerical_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            let d = central_difference(
                |v| {
                    work[i] = v;
                    let out = f(&work);
                    out
                },
                x[i],
                h,
            );
            work[i] = x[i];
            d
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`relative_error`] over paired coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y, floor)).fold(0.0, f64::max)
}
