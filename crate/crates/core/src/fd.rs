//! Central finite differences, used as a derivative fallback and as the
//! reference in gradient checks.

use nalgebra::{DMatrix, DVector};

/// Step used for coordinate `i`: `1e-6 * (1 + |x_i|)`.
pub fn step_size(xi: f64) -> f64 {
    1e-6 * (1.0 + xi.abs())
}

/// Central-difference Jacobian of a vector map.
pub fn jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut probe = x.clone();
    let mut columns = Vec::with_capacity(x.len());
    let mut rows = 0;
    for i in 0..x.len() {
        let h = step_size(x[i]);
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        rows = plus.len();
        columns.push((plus - minus) / (2.0 * h));
    }
    if columns.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&columns).resize(rows, x.len(), 0.0)
}

/// Central-difference gradient of a scalar function.
pub fn gradient<F>(f: F, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut probe = x.clone();
    DVector::from_iterator(
        x.len(),
        (0..x.len()).map(|i| {
            let h = step_size(x[i]);
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        }),
    )
}

/// Relative error used by derivative checks: `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}
