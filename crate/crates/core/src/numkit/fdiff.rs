/// Central finite differences `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Largest relative error `|a−n| / max(|a|, |n|, floor)` between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_derivatives() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[1.0], 1e-4);
        assert!((g[0] - 2.0).abs() <= 1e-6);
        assert_eq!(
            finite_diff_grad(|_| 3.5, &[1.0, -2.0, 0.1], 1e-4),
            vec![0.0; 3]
        );
        let theta = [0.3, -1.7, 2.2, 0.05];
        let g = finite_diff_grad(|t| t.iter().map(|v| v * v).sum(), &theta, 1e-4);
        for (gi, ti) in g.iter().zip(&theta) {
            assert!((gi - 2.0 * ti).abs() <= 1e-6);
        }
    }
}
