//! Scalar basis functions shared by the KAN layer variants.
//!
//! These are plain `f64 -> f64` evaluations (plus first derivatives) used by
//! the autodiff graph's basis-expansion primitives. Keeping them here lets
//! tests exercise the math independently of the graph machinery.

/// Uniform cubic B-spline knot vector for `grid_size` grid points on `[a, b]`,
/// extended `order` steps beyond each end. Basis count is
/// `grid_size + order - 1`.
pub fn uniform_knots(a: f64, b: f64, grid_size: usize, order: usize) -> Vec<f64> {
    assert!(grid_size >= 2, "grid_size must be >= 2");
    assert!(b > a);
    let step = (b - a) / (grid_size - 1) as f64;
    let total = grid_size + 2 * order;
    (0..total)
        .map(|i| a + (i as f64 - order as f64) * step)
        .collect()
}

/// Cox-de Boor evaluation of all B-spline basis functions of `order` at `x`.
/// Returns `knots.len() - order - 1` values.
pub fn bspline_basis(x: f64, knots: &[f64], order: usize) -> Vec<f64> {
    let n = knots.len() - order - 1;
    // Order 0: indicator functions of knot intervals.
    let mut basis: Vec<f64> = (0..knots.len() - 1)
        .map(|i| {
            if knots[i] <= x && x < knots[i + 1] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for k in 1..=order {
        for i in 0..knots.len() - k - 1 {
            let left = {
                let den = knots[i + k] - knots[i];
                if den.abs() < 1e-300 {
                    0.0
                } else {
                    (x - knots[i]) / den * basis[i]
                }
            };
            let right = {
                let den = knots[i + k + 1] - knots[i + 1];
                if den.abs() < 1e-300 {
                    0.0
                } else {
                    (knots[i + k + 1] - x) / den * basis[i + 1]
                }
            };
            basis[i] = left + right;
        }
        basis.truncate(knots.len() - k - 1);
    }
    basis.truncate(n);
    basis
}

/// Derivatives of all order-`order` basis functions at `x`:
/// B'_{i,k} = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}.
pub fn bspline_basis_deriv(x: f64, knots: &[f64], order: usize) -> Vec<f64> {
    let n = knots.len() - order - 1;
    if order == 0 {
        return vec![0.0; n];
    }
    let lower = bspline_basis(x, knots, order - 1);
    (0..n)
        .map(|i| {
            let k = order as f64;
            let mut d = 0.0;
            let den1 = knots[i + order] - knots[i];
            if den1.abs() > 1e-300 {
                d += k / den1 * lower[i];
            }
            let den2 = knots[i + order + 1] - knots[i + 1];
            if den2.abs() > 1e-300 {
                d -= k / den2 * lower[i + 1];
            }
            d
        })
        .collect()
}

/// Gaussian RBF feature and its partials: phi = exp(-z^2), z = (x-c)/h.
pub fn rbf(x: f64, c: f64, h: f64) -> f64 {
    let z = (x - c) / h;
    (-z * z).exp()
}

/// (d phi / dx, d phi / dc, d phi / dh) for the Gaussian RBF.
pub fn rbf_grad(x: f64, c: f64, h: f64) -> (f64, f64, f64) {
    let z = (x - c) / h;
    let phi = (-z * z).exp();
    let dx = -2.0 * z / h * phi;
    (dx, -dx, -dx * z)
}

/// Reflectional switch feature: phi = 1 - tanh^2(z), z = (x-c)/h.
pub fn switch(x: f64, c: f64, h: f64) -> f64 {
    let t = ((x - c) / h).tanh();
    1.0 - t * t
}

/// (d phi / dx, d phi / dc, d phi / dh) for the switch feature.
pub fn switch_grad(x: f64, c: f64, h: f64) -> (f64, f64, f64) {
    let z = (x - c) / h;
    let t = z.tanh();
    let sech2 = 1.0 - t * t;
    // d/dz (1 - tanh^2 z) = -2 tanh z sech^2 z
    let dz = -2.0 * t * sech2;
    let dx = dz / h;
    (dx, -dx, -dx * z)
}

/// Chebyshev polynomials T_0..T_d at `z` via the recurrence.
pub fn chebyshev(z: f64, degree: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(degree + 1);
    t.push(1.0);
    if degree >= 1 {
        t.push(z);
    }
    for k in 2..=degree {
        let next = 2.0 * z * t[k - 1] - t[k - 2];
        t.push(next);
    }
    t
}

/// Derivatives dT_k/dz = k * U_{k-1}(z), with U by its own recurrence.
pub fn chebyshev_deriv(z: f64, degree: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(degree);
    if degree >= 1 {
        u.push(1.0);
    }
    if degree >= 2 {
        u.push(2.0 * z);
    }
    for k in 2..degree {
        let next = 2.0 * z * u[k - 1] - u[k - 2];
        u.push(next);
    }
    let mut d = Vec::with_capacity(degree + 1);
    d.push(0.0);
    for k in 1..=degree {
        d.push(k as f64 * u[k - 1]);
    }
    d
}

/// Mexican-hat mother wavelet: psi(z) = 2/(sqrt(3) pi^{1/4}) (1-z^2) e^{-z^2/2}.
pub fn mexican_hat(z: f64) -> f64 {
    let c = 2.0 / (3.0_f64.sqrt() * std::f64::consts::PI.powf(0.25));
    c * (1.0 - z * z) * (-z * z / 2.0).exp()
}

/// psi'(z) = c (z^3 - 3z) e^{-z^2/2}.
pub fn mexican_hat_deriv(z: f64) -> f64 {
    let c = 2.0 / (3.0_f64.sqrt() * std::f64::consts::PI.powf(0.25));
    c * (z * z * z - 3.0 * z) * (-z * z / 2.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn cubic_basis_partition_of_unity() {
        let knots = uniform_knots(-2.0, 2.0, 8, 3);
        for i in 0..=40 {
            let x = -2.0 + 4.0 * i as f64 / 40.0;
            let b = bspline_basis(x, &knots, 3);
            assert_eq!(b.len(), 8 + 3 - 1);
            let sum: f64 = b.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} at {x}");
            assert!(b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cubic_basis_centered_value() {
        // Uniform cubic B-spline centered at a knot takes value 2/3 there and
        // 1/6 one knot away.
        let knots: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let b = bspline_basis(4.0, &knots, 3);
        // basis i spans [t_i, t_{i+4}); the one centered at x=4 is i=2.
        assert!((b[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((b[1] - 1.0 / 6.0).abs() < 1e-12);
        assert!((b[3] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn order_zero_is_indicator() {
        let knots: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0];
        let b = bspline_basis(1.5, &knots, 0);
        assert_eq!(b, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn bspline_deriv_matches_fd() {
        let knots = uniform_knots(-2.0, 2.0, 6, 3);
        for &x in &[-1.7, -0.3, 0.0, 0.9, 1.9] {
            let d = bspline_basis_deriv(x, &knots, 3);
            for i in 0..d.len() {
                let num = fd(|v| bspline_basis(v, &knots, 3)[i], x);
                assert!((d[i] - num).abs() < 1e-6, "i={i} x={x}: {} vs {num}", d[i]);
            }
        }
    }

    #[test]
    fn rbf_and_switch_grads_match_fd() {
        for &(x, c, h) in &[(0.3, 0.0, 0.5), (-1.2, 0.4, 1.5), (2.0, -1.0, 0.7)] {
            let (dx, dc, dh) = rbf_grad(x, c, h);
            assert!((dx - fd(|v| rbf(v, c, h), x)).abs() < 1e-6);
            assert!((dc - fd(|v| rbf(x, v, h), c)).abs() < 1e-6);
            assert!((dh - fd(|v| rbf(x, c, v), h)).abs() < 1e-6);
            let (dx, dc, dh) = switch_grad(x, c, h);
            assert!((dx - fd(|v| switch(v, c, h), x)).abs() < 1e-6);
            assert!((dc - fd(|v| switch(x, v, h), c)).abs() < 1e-6);
            assert!((dh - fd(|v| switch(x, c, v), h)).abs() < 1e-6);
        }
    }

    #[test]
    fn rbf_peak_at_center() {
        assert!((rbf(0.7, 0.7, 0.5) - 1.0).abs() < 1e-15);
        assert!((switch(-0.2, -0.2, 0.5) - 1.0).abs() < 1e-15);
        // reflection symmetry of the switch
        assert!((switch(1.0 + 0.3, 1.0, 0.5) - switch(1.0 - 0.3, 1.0, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_matches_trig_definition() {
        // T_k(cos theta) = cos(k theta)
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..100 {
            let theta = rng.next_uniform(0.0, std::f64::consts::PI);
            let z = theta.cos();
            let t = chebyshev(z, 6);
            for (k, &tk) in t.iter().enumerate() {
                assert!((tk - (k as f64 * theta).cos()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chebyshev_endpoint_and_known_value() {
        let t = chebyshev(1.0, 5);
        assert!(t.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!((chebyshev(0.5, 2)[2] - (-0.5)).abs() < 1e-14);
    }

    #[test]
    fn chebyshev_deriv_matches_fd() {
        for &z in &[-0.9, -0.2, 0.0, 0.4, 0.8] {
            let d = chebyshev_deriv(z, 5);
            for k in 0..=5 {
                let num = fd(|v| chebyshev(v, 5)[k], z);
                assert!((d[k] - num).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mexican_hat_values() {
        let at0 = 2.0 / (3.0_f64.sqrt() * std::f64::consts::PI.powf(0.25));
        assert!((mexican_hat(0.0) - at0).abs() < 1e-15);
        assert!((at0 - 0.8673).abs() < 1e-4);
        assert!(mexican_hat(1.0).abs() < 1e-15);
        assert!(mexican_hat(-1.0).abs() < 1e-15);
        for &z in &[-2.1, -0.4, 0.0, 0.8, 1.7] {
            let num = fd(mexican_hat, z);
            assert!((mexican_hat_deriv(z) - num).abs() < 1e-6);
        }
    }
}
