//! Central-difference verification of analytic gradients.

/// `f` evaluates a scalar function at a flat input vector and returns the
/// value together with its analytic gradient. Returns the max over
/// coordinates of |analytic - central difference| / max(1, |analytic|).
pub fn grad_check<F>(f: &F, at: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(eps > 0.0, "grad_check needs eps > 0");
    let (_, analytic) = f(at);
    assert_eq!(analytic.len(), at.len());
    let mut worst: f64 = 0.0;
    let mut x = at.to_vec();
    for i in 0..at.len() {
        x[i] = at[i] + eps;
        let (fp, _) = f(&x);
        x[i] = at[i] - eps;
        let (fm, _) = f(&x);
        x[i] = at[i];
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let f = |x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]);
        assert!(grad_check(&f, &[3.0], 1e-4) < 1e-8);
    }

    #[test]
    fn linear_sum() {
        let f = |x: &[f64]| (x.iter().sum(), vec![1.0; x.len()]);
        assert!(grad_check(&f, &[0.3, -1.2, 4.0], 1e-4) < 1e-10);
    }

    #[test]
    fn exponential_at_zero() {
        let f = |x: &[f64]| (x[0].exp(), vec![x[0].exp()]);
        assert!(grad_check(&f, &[0.0], 1e-4) < 1e-7);
    }
}
