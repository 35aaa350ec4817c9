//! Quadrature helpers: exact-kernel product trapezoid weights and
//! Gauss–Legendre nodes.

use std::f64::consts::PI;

/// `∫₀¹ e^{-xs}(1-s) ds = (x - 1 + e^{-x})/x²`.
pub fn w_left(x: f64) -> f64 {
    if x.abs() < 0.1 {
        series(x, |n| 1.0 / factorial(n + 2))
    } else {
        (x - 1.0 + (-x).exp()) / (x * x)
    }
}

/// `∫₀¹ e^{-xs} s ds = (1 - e^{-x}(1 + x))/x²`.
pub fn w_right(x: f64) -> f64 {
    if x.abs() < 0.1 {
        series(x, |n| (n + 1) as f64 / factorial(n + 2))
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (x * x)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn series(x: f64, coef: impl Fn(usize) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut pow = 1.0;
    for n in 0..14 {
        sum += coef(n) * pow;
        pow *= -x;
    }
    sum
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on
/// the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` equal panels.
pub fn composite_gauss(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let width = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * width;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((mid + 0.5 * width * xi, 0.5 * width * wi));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_match_closed_forms_across_switch() {
        for x in [
            -0.3f64, -0.0999, -1e-6, 0.0, 1e-6, 0.0999, 0.1001, 0.5, 3.0, 40.0,
        ] {
            let (direct_l, direct_r) = if x.abs() < 1e-3 {
                (0.5 - x / 6.0 + x * x / 24.0, 0.5 - x / 3.0 + x * x / 8.0)
            } else {
                (
                    (x - 1.0 + (-x).exp()) / (x * x),
                    (1.0 - (-x).exp() * (1.0 + x)) / (x * x),
                )
            };
            let tol = if x.abs() < 1e-3 { 1e-15 } else { 1e-13 };
            assert!((w_left(x) - direct_l).abs() < tol, "x={x}");
            assert!((w_right(x) - direct_r).abs() < tol, "x={x}");
        }
        assert_eq!(w_left(0.0), 0.5);
        assert_eq!(w_right(0.0), 0.5);
    }

    #[test]
    fn weights_integrate_the_kernel() {
        // Midpoint oracle for ∫₀¹ e^{-xs}(1-s) ds and ∫₀¹ e^{-xs} s ds.
        for x in [-2.0, 0.05, 1.7] {
            let n = 200_000;
            let (mut l, mut r) = (0.0, 0.0);
            for i in 0..n {
                let s = (i as f64 + 0.5) / n as f64;
                l += (-x * s).exp() * (1.0 - s) / n as f64;
                r += (-x * s).exp() * s / n as f64;
            }
            assert!((w_left(x) - l).abs() < 1e-9);
            assert!((w_right(x) - r).abs() < 1e-9);
        }
    }

    #[test]
    fn gauss_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        let int30: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(30)).sum();
        assert!((int30 - 2.0 / 31.0).abs() < 1e-14);
        let rule = composite_gauss(0.0, 3.0, 7, 16);
        let e: f64 = rule.iter().map(|(t, w)| w * t.exp()).sum();
        assert!((e - (3.0f64.exp() - 1.0)).abs() < 1e-12);
    }
}
