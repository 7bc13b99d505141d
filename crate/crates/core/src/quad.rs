//! Gauss-Legendre and trapezoid quadrature on intervals of the unit circle.

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Newton iteration on the Legendre recurrence; nodes accurate to machine
/// precision for `n <= 512`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1 && n <= 512, "rule size out of range");
    let mut out = Vec::with_capacity(n);
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess for the i-th positive root.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_pair(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_pair(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((-x, w));
        if 2 * i + 1 < n {
            out.push((x, w));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Value and derivative of the Legendre polynomial `P_n` at `x`.
fn legendre_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = if n == 0 {
        0.0
    } else {
        (n as f64) * (x * p1 - p0) / (x * x - 1.0)
    };
    (p1, d)
}

/// Integrates `f` over `[a, b]` with an `n`-point Gauss-Legendre rule.
pub fn integrate_gl<F: FnMut(f64) -> f64>(n: usize, a: f64, b: f64, mut f: F) -> f64 {
    if a == b {
        return 0.0;
    }
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    gauss_legendre(n)
        .iter()
        .map(|&(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// Integrates `f` over `[0, 1]` with the rule applied separately on each
/// piece between consecutive break points, so kinks at the breaks do not
/// degrade the convergence order.
pub fn integrate_piecewise<F: FnMut(f64) -> f64>(n: usize, breaks: &[f64], mut f: F) -> f64 {
    let mut cuts = vec![0.0];
    for &b in breaks {
        if b > 0.0 && b < 1.0 {
            cuts.push(b);
        }
    }
    cuts.push(1.0);
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += integrate_gl(n, w[0], w[1], &mut f);
    }
    total
}

/// Uniform `n`-point trapezoid rule over the unit circle.
///
/// For a 1-periodic integrand the end points coincide, so the rule is the
/// plain average of `f` over the grid `t_i = i/n`.
pub fn trapezoid_circle<F: FnMut(f64) -> f64>(n: usize, mut f: F) -> f64 {
    assert!(n >= 1);
    (0..n).map(|i| f(i as f64 / n as f64)).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_interval_length() {
        for n in [1, 2, 3, 7, 16, 64, 128] {
            let s: f64 = gauss_legendre(n).iter().map(|&(_, w)| w).sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}: {s}");
        }
    }

    #[test]
    fn nodes_are_symmetric_and_sorted() {
        let r = gauss_legendre(17);
        assert_eq!(r.len(), 17);
        for i in 0..17 {
            assert!((r[i].0 + r[16 - i].0).abs() < 1e-14);
            assert!((r[i].1 - r[16 - i].1).abs() < 1e-14);
        }
        for w in r.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
    }

    #[test]
    fn exact_on_polynomials_up_to_degree_2n_minus_1() {
        // 5-point rule integrates x^9 exactly over [0, 2].
        let val = integrate_gl(5, 0.0, 2.0, |x| x.powi(9));
        assert!((val - 2f64.powi(10) / 10.0).abs() < 1e-10, "{val}");
        let val = integrate_gl(5, 0.0, 2.0, |x| x.powi(10));
        assert!((val - 2f64.powi(11) / 11.0).abs() > 1e-6);
    }

    #[test]
    fn piecewise_handles_kink() {
        // |t - 0.3| integrated over [0,1] = 0.3^2/2 + 0.7^2/2.
        let exact = 0.5 * (0.09 + 0.49);
        let val = integrate_piecewise(16, &[0.3], |t| (t - 0.3f64).abs());
        assert!((val - exact).abs() < 1e-14, "{val}");
    }

    #[test]
    fn trapezoid_average_of_periodic() {
        let val = trapezoid_circle(64, |t| (2.0 * std::f64::consts::PI * t).sin() + 3.0);
        assert!((val - 3.0).abs() < 1e-13);
    }

    #[test]
    fn gl_integrates_smooth_exponential() {
        let val = integrate_gl(24, 0.0, 1.0, |t| (2.5 * t).exp());
        let exact = ((2.5f64).exp() - 1.0) / 2.5;
        assert!((val - exact).abs() < 1e-13 * exact);
    }
}
