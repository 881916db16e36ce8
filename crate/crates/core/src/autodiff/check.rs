//! Finite-difference oracles for validating analytic gradients.

use super::params::ParamSet;

/// Central-difference gradient of `f` with respect to every scalar in `params`.
pub fn central_difference(
    params: &ParamSet,
    eps: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<f64> {
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        probe.assign_flat(&work).expect("same size");
        let plus = f(&probe);
        work[i] = base[i] - eps;
        probe.assign_flat(&work).expect("same size");
        let minus = f(&probe);
        work[i] = base[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Central difference along a single direction `dir` in flattened parameter space.
pub fn directional_difference(
    params: &ParamSet,
    dir: &[f64],
    eps: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> f64 {
    let base = params.flatten();
    let mut probe = params.clone();
    let plus: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + eps * d).collect();
    probe.assign_flat(&plus).expect("same size");
    let fp = f(&probe);
    let minus: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b - eps * d).collect();
    probe.assign_flat(&minus).expect("same size");
    let fm = f(&probe);
    (fp - fm) / (2.0 * eps)
}

/// Central difference of a scalar function of a plain vector.
pub fn vector_difference(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let plus = f(&work);
            work[i] = x[i] - eps;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` with a small floor so all-zero gradients compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Scalar version of [`relative_error`].
pub fn scalar_relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}
