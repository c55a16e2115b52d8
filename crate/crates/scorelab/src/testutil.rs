//! Shared helpers for unit tests.

use nalgebra::DVector;

/// Central finite-difference gradient with step `h` (scaled per coordinate).
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let d = x.len();
    DVector::from_fn(d, |i, _| {
        let step = h * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        (f(&xp) - f(&xm)) / (2.0 * step)
    })
}

/// Sample mean and standard error of the mean.
pub fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
