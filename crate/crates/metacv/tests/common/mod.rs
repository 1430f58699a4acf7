//! Shared numerical oracles for the integration suites: Gauss–Legendre
//! tensor quadrature over the unit cube, independent of every quadrature
//! the library itself performs.
#![allow(dead_code)]

/// `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre_and_deriv(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 2..=n {
        let next = ((2 * k - 1) as f64 * x * p - (k - 1) as f64 * p_prev) / k as f64;
        p_prev = p;
        p = next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Gauss–Legendre nodes and weights transplanted to `[0, 1]`. Newton
/// iteration from the Chebyshev initial guesses; exact for polynomials up
/// to degree `2n − 1`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_deriv(n, x);
        nodes[i] = 0.5 * (x + 1.0);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Tensor-product Gauss–Legendre integral of `f` over `[0, 1]^d`.
pub fn tensor_quadrature<F: FnMut(&[f64]) -> f64>(
    d: usize,
    nodes_per_axis: usize,
    mut f: F,
) -> f64 {
    let (nodes, weights) = gauss_legendre_unit(nodes_per_axis);
    let mut index = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (j, &i) in index.iter().enumerate() {
            x[j] = nodes[i];
            w *= weights[i];
        }
        total += w * f(&x);
        let mut axis = 0;
        loop {
            if axis == d {
                return total;
            }
            index[axis] += 1;
            if index[axis] < nodes_per_axis {
                break;
            }
            index[axis] = 0;
            axis += 1;
        }
    }
}

/// Relative L2 distance, guarded for near-zero references.
pub fn rel_l2(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_is_exact_on_polynomials() {
        // ∫₀¹ x⁵ dx = 1/6 with only 3 nodes (degree 5 ≤ 2·3 − 1).
        let got = tensor_quadrature(1, 3, |x| x[0].powi(5));
        assert!((got - 1.0 / 6.0).abs() < 1e-14, "{got}");
    }

    #[test]
    fn quadrature_matches_a_separable_integral() {
        // ∫∫ cos(x) e^y = sin(1)(e − 1).
        let got = tensor_quadrature(2, 20, |x| x[0].cos() * x[1].exp());
        let want = 1.0_f64.sin() * (1.0_f64.exp() - 1.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
