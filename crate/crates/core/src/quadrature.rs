//! Composite Simpson quadrature on possibly non-uniform grids.

use std::ops::{Add, Mul, Sub};

/// Integrates samples `y` over the strictly increasing abscissae `x`.
///
/// Pairs of intervals use the non-uniform three-point rule; an odd number of
/// intervals integrates the last interval with a cubic fit. Exact for
/// cubics on uniform grids. Returns `None` for fewer than three points.
pub fn simpson<T>(x: &[f64], y: &[T]) -> Option<T>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let intervals = n - 1;
    let h = |i: usize| x[i + 1] - x[i];
    let mut acc = y[0] * 0.0;
    let mut i = 0;
    while i + 2 <= intervals - intervals % 2 {
        let (h0, h1) = (h(i), h(i + 1));
        let s = h0 + h1;
        acc = acc
            + y[i] * (s / 6.0 * (2.0 - h1 / h0))
            + y[i + 1] * (s / 6.0 * (s * s / (h0 * h1)))
            + y[i + 2] * (s / 6.0 * (2.0 - h0 / h1));
        i += 2;
    }
    if intervals % 2 == 1 {
        // Last interval: the cubic through the final four points, integrated
        // exactly by two-point Gauss–Legendre.
        let nodes = &x[n - 4..];
        let (lo, hi) = (x[n - 2], x[n - 1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        let g = half / 3f64.sqrt();
        for s in [mid - g, mid + g] {
            for k in 0..4 {
                let w: f64 = (0..4)
                    .filter(|&m| m != k)
                    .map(|m| (s - nodes[m]) / (nodes[k] - nodes[m]))
                    .product();
                acc = acc + y[n - 4 + k] * (w * half);
            }
        }
    }
    Some(acc)
}

/// Trapezoid rule, used for density normalization checks.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn grid(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn exact_on_cubics_even_and_odd() {
        for n in [3, 4, 5, 8, 11] {
            let x = grid(n, -1.0, 2.0);
            let y: Vec<f64> = x.iter().map(|t| t * t * t - 2.0 * t + 1.0).collect();
            // int_{-1}^{2} = [t^4/4 - t^2 + t] = (4 - 4 + 2) - (1/4 - 1 - 1)
            let exact = 2.0 - (0.25 - 2.0);
            assert!((simpson(&x, &y).unwrap() - exact).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn non_uniform_grid_converges() {
        let x: Vec<f64> = (0..201).map(|i| (i as f64 / 200.0).powi(2) * std::f64::consts::PI).collect();
        let y: Vec<f64> = x.iter().map(|t| t.sin()).collect();
        assert!((simpson(&x, &y).unwrap() - 2.0).abs() < 1e-7);
    }

    #[test]
    fn complex_values() {
        let x = grid(101, 0.0, 1.0);
        let y: Vec<Complex64> = x.iter().map(|&t| Complex64::new(t, -2.0 * t)).collect();
        let v = simpson(&x, &y).unwrap();
        assert!((v - Complex64::new(0.5, -1.0)).norm() < 1e-14);
    }

    #[test]
    fn too_few_points() {
        assert!(simpson(&[0.0, 1.0], &[1.0, 1.0]).is_none());
    }
}
