//! Central finite-difference gradients, the verification oracle for
//! everything reverse mode computes.

/// Central difference (f(x+h·e_i) − f(x−h·e_i)) / (2h) per coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Max absolute deviation relative to the reference gradient's scale.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs() / scale))
}
