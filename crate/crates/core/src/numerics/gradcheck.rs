/// Central finite-difference gradient check.
///
/// `loss` returns the scalar loss and its analytic gradient at the given
/// point; the numeric gradient is taken with step `eps`. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient length must match parameters"
    );
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (up, _) = loss(&probe);
        probe[i] = params[i] - eps;
        let (down, _) = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
