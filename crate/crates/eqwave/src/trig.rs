//! Trigonometric collocation on an odd uniform grid over `[0, 2 pi)`.
//!
//! With an odd number of points `M = 2 N + 1` the interpolation by a degree-N
//! trigonometric polynomial is exact and the periodic cardinal function is
//! the Dirichlet kernel `sin(M u / 2) / (M sin(u / 2))`. Differentiation and
//! arbitrary phase shifts act as dense `M x M` matrices that are exact on the
//! polynomial space, which is what makes the delayed argument `a(y - beta
//! tau)` exact in this basis.

use nalgebra::{DMatrix, DVector};

/// Collocation grid with `modes` Fourier modes, i.e. `2 modes + 1` points.
#[derive(Clone, Debug)]
pub struct TrigGrid {
    modes: usize,
    points: usize,
}

impl TrigGrid {
    pub fn new(modes: usize) -> Self {
        Self {
            modes,
            points: 2 * modes + 1,
        }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn len(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * i as f64 / self.points as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.node(i)).collect()
    }

    /// Dirichlet cardinal `p_j(y)`: 1 at node j, 0 at the others.
    pub fn cardinal(&self, j: usize, y: f64) -> f64 {
        let m = self.points as f64;
        let u = y - self.node(j);
        let s = (0.5 * u).sin();
        if s.abs() < 1e-14 {
            let k = (u / (2.0 * std::f64::consts::PI)).round();
            let u0 = u - 2.0 * std::f64::consts::PI * k;
            if u0.abs() < 1e-13 {
                return 1.0;
            }
        }
        ((0.5 * m * u).sin()) / (m * s)
    }

    /// Spectral differentiation matrix (exact on degree-N trig polynomials).
    pub fn diff_matrix(&self) -> DMatrix<f64> {
        let m = self.points;
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                0.0
            } else {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                let u = self.node(i) - self.node(j);
                sign / (2.0 * (0.5 * u).sin())
            }
        })
    }

    /// Shift matrix `S(theta)`: maps node values of `a` to node values of
    /// `y -> a(y - theta)`. Exact on the polynomial space and 2 pi-periodic
    /// in `theta`.
    pub fn shift_matrix(&self, theta: f64) -> DMatrix<f64> {
        let m = self.points;
        DMatrix::from_fn(m, m, |i, j| self.cardinal(j, self.node(i) - theta))
    }

    /// Real Fourier coefficients `(a0, [(ak, bk)])` of sampled values, with
    /// `u(y) = a0 + sum ak cos(k y) + bk sin(k y)`.
    pub fn coefficients(&self, values: &DVector<f64>) -> (f64, Vec<(f64, f64)>) {
        let m = self.points as f64;
        let a0 = values.iter().sum::<f64>() / m;
        let mut modes = Vec::with_capacity(self.modes);
        for k in 1..=self.modes {
            let mut ak = 0.0;
            let mut bk = 0.0;
            for (i, v) in values.iter().enumerate() {
                let y = self.node(i);
                ak += v * (k as f64 * y).cos();
                bk += v * (k as f64 * y).sin();
            }
            modes.push((2.0 * ak / m, 2.0 * bk / m));
        }
        (a0, modes)
    }

    /// Evaluates the interpolant of sampled values at an arbitrary point.
    pub fn eval(&self, values: &DVector<f64>, y: f64) -> f64 {
        (0..self.points)
            .map(|j| values[j] * self.cardinal(j, y))
            .sum()
    }
}
