/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + eps;
            let plus = f(&probe);
            probe[k] = orig - eps;
            let minus = f(&probe);
            probe[k] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, reported as the plain difference norm when
/// both vectors are below `1e-8`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = super::norm(a).max(super::norm(b)).max(1e-8);
    diff / scale
}
