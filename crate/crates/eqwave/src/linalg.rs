//! Small dense linear-algebra helpers used across the solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Lifts a real matrix into the complex field.
pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| Complex64::new(m[(i, j)], 0.0))
}

/// Determinant of a complex matrix via LU.
pub fn complex_det(m: &DMatrix<Complex64>) -> Complex64 {
    m.clone().lu().determinant()
}

/// Infinity norm of a real matrix (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// All roots of a complex polynomial `c[0] + c[1] z + ... + c[d] z^d`
/// by the Durand-Kerner simultaneous iteration.
///
/// Leading coefficients smaller than `drop_tol * max|c|` are trimmed, so the
/// returned vector has one entry per *finite* root. Degree zero (or an all
/// tiny coefficient vector) yields an empty vector.
pub fn polynomial_roots(coeffs: &[Complex64], drop_tol: f64) -> Vec<Complex64> {
    let cmax = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if cmax == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<Complex64> = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().norm() <= drop_tol * cmax {
        c.pop();
    }
    let d = c.len() - 1;
    if d == 0 {
        return Vec::new();
    }
    let lead = c[d];
    let monic: Vec<Complex64> = c.iter().map(|ck| ck / lead).collect();

    // Cauchy bound for the root radius keeps the starting circle sensible.
    let radius = 1.0
        + monic[..d]
            .iter()
            .map(|ck| ck.norm())
            .fold(0.0, f64::max);
    let mut z: Vec<Complex64> = (0..d)
        .map(|k| {
            let ang = 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / d as f64;
            Complex64::from_polar(0.5 * radius.max(1e-6), ang)
        })
        .collect();

    let eval = |x: Complex64| -> Complex64 {
        let mut p = monic[d];
        for k in (0..d).rev() {
            p = p * x + monic[k];
        }
        p
    };

    for _ in 0..500 {
        let mut max_step = 0.0_f64;
        for i in 0..d {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..d {
                if j != i {
                    denom *= z[i] - z[j];
                }
            }
            if denom.norm() < 1e-300 {
                // coincident iterates; nudge apart
                z[i] += Complex64::new(1e-8 * radius, 1e-8 * radius);
                continue;
            }
            let step = eval(z[i]) / denom;
            z[i] -= step;
            max_step = max_step.max(step.norm());
        }
        if max_step < 1e-14 * radius.max(1.0) {
            break;
        }
    }
    z
}

/// Value of `theta` minimizing `|x - exp(A theta) y|` together with the
/// attained distance. `action` must return the group element at an angle.
///
/// The objective is a trigonometric polynomial in `theta`, so a dense scan
/// followed by golden-section refinement is reliable.
pub fn min_over_rotation<F>(action: F, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64)
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let dist = |theta: f64| (x - action(theta) * y).norm();
    let m = 256;
    let mut best_theta = 0.0;
    let mut best = f64::INFINITY;
    for k in 0..m {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
        let d = dist(theta);
        if d < best {
            best = d;
            best_theta = theta;
        }
    }
    // Golden-section refinement on the bracketing interval.
    let span = 2.0 * std::f64::consts::PI / m as f64;
    let (mut a, mut b) = (best_theta - span, best_theta + span);
    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d0 = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (dist(c), dist(d0));
    for _ in 0..80 {
        if fc < fd {
            b = d0;
            d0 = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = dist(c);
        } else {
            a = c;
            c = d0;
            fc = fd;
            d0 = a + inv_phi * (b - a);
            fd = dist(d0);
        }
    }
    let theta = 0.5 * (a + b);
    (theta.rem_euclid(2.0 * std::f64::consts::PI), dist(theta))
}

/// Wraps an angle into `[0, 2*pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t >= two_pi {
        t -= two_pi;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durand_kerner_finds_quadratic_roots() {
        // (z - 2)(z + 1 - i) = z^2 + (-1 - i) z + (-2 + 2i) ... compute directly:
        let r1 = Complex64::new(2.0, 0.0);
        let r2 = Complex64::new(-1.0, 1.0);
        let coeffs = [r1 * r2, -(r1 + r2), Complex64::new(1.0, 0.0)];
        let mut roots = polynomial_roots(&coeffs, 1e-12);
        roots.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        assert!((roots[0] - r2).norm() < 1e-10);
        assert!((roots[1] - r1).norm() < 1e-10);
    }

    #[test]
    fn leading_zero_trim_reports_fewer_roots() {
        // 1 + z with a numerically-zero z^2 coefficient: one finite root.
        let coeffs = [
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(1e-18, 0.0),
        ];
        let roots = polynomial_roots(&coeffs, 1e-12);
        assert_eq!(roots.len(), 1);
        assert!((roots[0] - Complex64::new(-1.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn rotation_minimizer_recovers_angle() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let action = |t: f64| (a.clone() * t).exp();
        let y = DVector::from_vec(vec![1.0, 0.5]);
        let x = action(1.234) * &y;
        let (theta, d) = min_over_rotation(action, &x, &y);
        assert!(d < 1e-10, "distance {d}");
        assert!((theta - 1.234).abs() < 1e-6, "theta {theta}");
    }
}
