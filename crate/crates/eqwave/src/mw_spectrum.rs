//! Floquet stability of modulated waves via the time-2 pi solution operator
//! of the delayed variational equation
//! `beta v'(y) = [-A omega + D1 f] v(y) + D2 f e^{A psi} v(y - beta tau)`.
//!
//! The operator is discretized on a uniform history mesh over
//! `[-beta tau, 0]` (padded for the interpolation stencil) and marched by
//! RK4 with quintic Lagrange interpolation of the delayed argument; its
//! dense eigenvalues are the Floquet multipliers. Rotation and time-shift
//! symmetry force two trivial multipliers at 1 with eigenfunctions `A a(y)`
//! and `da/dy`. After a reappearance step `tau -> tau + T` the delay spans
//! several profile periods; the mesh-based operator handles any `beta tau`
//! uniformly, only the window grows.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{EqwaveError, Result};
use crate::model::EquivariantModel;
use crate::mw::{self, MWSolution, MwGuess, MwSolveOptions};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const CLASS_TOL: f64 = 1e-8;
/// Extra old nodes kept in the window for the interpolation stencil.
const PAD: usize = 8;

/// Stability classes of one Floquet report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FloquetClass {
    Stable,
    WeaklyUnstable,
    StronglyUnstable,
    Marginal,
}

impl std::fmt::Display for FloquetClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Stable => write!(f, "stable"),
            Self::WeaklyUnstable => write!(f, "weakly_unstable"),
            Self::StronglyUnstable => write!(f, "strongly_unstable"),
            Self::Marginal => write!(f, "marginal"),
        }
    }
}

/// Floquet multipliers of one MW.
#[derive(Clone, Debug)]
pub struct FloquetReport {
    /// Largest multipliers, sorted by descending modulus.
    pub multipliers: Vec<Complex64>,
    /// Indices of the two designated trivial multipliers.
    pub trivial: (usize, usize),
    /// Max distance of the trivial pair from 1.
    pub trivial_error: f64,
    pub class: FloquetClass,
    /// Steps per profile period at which the multipliers were accepted.
    pub steps_per_period: usize,
}

impl FloquetReport {
    /// Largest nontrivial multiplier modulus.
    pub fn max_nontrivial_modulus(&self) -> f64 {
        self.multipliers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.trivial.0 && *i != self.trivial.1)
            .map(|(_, m)| m.norm())
            .fold(0.0, f64::max)
    }
}

/// Options for monodromy discretization.
#[derive(Clone, Debug)]
pub struct FloquetOptions {
    pub steps_per_period: usize,
    pub max_steps_per_period: usize,
    /// Relative stationarity target under mesh doubling.
    pub stationary_tol: f64,
    /// Skip the mesh-doubling check (single resolution).
    pub adaptive: bool,
}

impl Default for FloquetOptions {
    fn default() -> Self {
        Self {
            steps_per_period: 64,
            max_steps_per_period: 1024,
            stationary_tol: 1e-6,
            adaptive: true,
        }
    }
}

/// Uniform-mesh discretization of the period map of the variational
/// equation around a frozen MW.
pub struct FloquetDiscretization {
    n: usize,
    /// Window nodes (oldest to newest); the newest node is "now".
    window: usize,
    /// Mesh step in y.
    h: f64,
    /// Delay in y units.
    lag: f64,
    steps: usize,
    /// Per step: coefficient matrices at the three stage times
    /// `(B, C e^{A psi})` for c = 0, 1/2, 1.
    stages: Vec<[(DMatrix<f64>, DMatrix<f64>); 3]>,
}

impl FloquetDiscretization {
    pub fn new(
        model: &EquivariantModel,
        mw: &MWSolution,
        steps_per_period: usize,
    ) -> Result<Self> {
        let n = model.dim();
        let lag = mw.beta * mw.tau;
        if !(lag > 0.0) {
            return Err(EqwaveError::Domain(
                "variational discretization needs beta tau > 0".into(),
            ));
        }
        let mut s = steps_per_period.max(8);
        // Keep the step below the lag (causal stages) and at least 64 nodes
        // across one delay interval.
        let min_s = ((TWO_PI / lag).ceil() as usize + 1).max((64.0 * TWO_PI / lag).ceil() as usize);
        if lag < TWO_PI {
            s = s.max(min_s);
        }
        let h = TWO_PI / s as f64;
        if h > lag {
            return Err(EqwaveError::Resolution(format!(
                "step {h:.3e} exceeds the lag {lag:.3e}"
            )));
        }
        let window = (lag / h).ceil() as usize + PAD;

        let psi = mw.phi - mw.omega * mw.tau;
        let rot = model.generator().action(psi);
        let a_gen = model.generator().matrix().clone();
        let mut stages = Vec::with_capacity(s);
        for k in 0..s {
            let y = h * k as f64;
            let mut triple: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::with_capacity(3);
            for c in [0.0, 0.5, 1.0] {
                let yc = y + c * h;
                let a_here = mw.profile_at(yc);
                let a_del = mw.profile_at(yc - lag);
                let jac = model.jacobians(&a_here, &(&rot * a_del))?;
                let b = (&jac.m1 - &a_gen * mw.omega) / mw.beta;
                let cmat = (&jac.d2 * &rot) / mw.beta;
                triple.push((b, cmat));
            }
            stages.push([
                triple[0].clone(),
                triple[1].clone(),
                triple[2].clone(),
            ]);
        }
        Ok(Self {
            n,
            window,
            h,
            lag,
            steps: s,
            stages,
        })
    }

    pub fn state_len(&self) -> usize {
        self.n * self.window
    }

    pub fn steps_per_period(&self) -> usize {
        self.steps
    }

    /// Samples a vector-valued function of y on the window ending at y = 0.
    pub fn sample_window(&self, f: impl Fn(f64) -> DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_len());
        for j in 0..self.window {
            let y = -((self.window - 1 - j) as f64) * self.h;
            out.rows_mut(j * self.n, self.n).copy_from(&f(y));
        }
        out
    }

    /// Quintic Lagrange weights for a fractional node position.
    fn stencil(&self, pos: f64) -> (usize, [f64; 6]) {
        let base = (pos.floor() as isize - 2)
            .clamp(0, self.window as isize - 6) as usize;
        let x = pos - base as f64;
        let mut w = [0.0; 6];
        for (i, wi) in w.iter_mut().enumerate() {
            let mut p = 1.0;
            for j in 0..6 {
                if j != i {
                    p *= (x - j as f64) / (i as f64 - j as f64);
                }
            }
            *wi = p;
        }
        (base, w)
    }

    /// Advances a set of window states over steps `[k0, k1)`; each column of
    /// `win` is an independent window.
    fn march(&self, win: &mut DMatrix<f64>, k0: usize, k1: usize) {
        let n = self.n;
        let w = self.window;
        let cols = win.ncols();
        let lag_nodes = self.lag / self.h;
        // Delayed fractional positions relative to the window for the three
        // stage offsets.
        let pos0 = (w - 1) as f64 - lag_nodes;
        let (b0, wt0) = self.stencil(pos0);
        let (bh, wth) = self.stencil(pos0 + 0.5);
        let (b1, wt1) = self.stencil(pos0 + 1.0);

        fn interp(
            win: &DMatrix<f64>,
            col: usize,
            n: usize,
            base: usize,
            wts: &[f64; 6],
            out: &mut DVector<f64>,
        ) {
            for c in 0..n {
                let mut acc = 0.0;
                for (r, wt) in wts.iter().enumerate() {
                    acc += wt * win[((base + r) * n + c, col)];
                }
                out[c] = acc;
            }
        }

        let mut delayed = DVector::zeros(n);
        let mut v0 = DVector::zeros(n);
        for k in k0..k1 {
            let step_idx = k % self.steps;
            let [(bm0, cm0), (bmh, cmh), (bm1, cm1)] = &self.stages[step_idx];
            for col in 0..cols {
                for c in 0..n {
                    v0[c] = win[((w - 1) * n + c, col)];
                }
                interp(win, col, n, b0, &wt0, &mut delayed);
                let k1v = bm0 * &v0 + cm0 * &delayed;
                interp(win, col, n, bh, &wth, &mut delayed);
                let k2v = bmh * (&v0 + &k1v * (0.5 * self.h)) + cmh * &delayed;
                let k3v = bmh * (&v0 + &k2v * (0.5 * self.h)) + cmh * &delayed;
                interp(win, col, n, b1, &wt1, &mut delayed);
                let k4v = bm1 * (&v0 + &k3v * self.h) + cm1 * &delayed;
                let vnew = &v0 + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (self.h / 6.0);
                // Shift the window and append.
                for j in 0..(w - 1) {
                    for c in 0..n {
                        win[(j * n + c, col)] = win[((j + 1) * n + c, col)];
                    }
                }
                for c in 0..n {
                    win[((w - 1) * n + c, col)] = vnew[c];
                }
            }
        }
    }

    /// Dense matrix of the map advancing windows over steps `[k0, k1)`.
    pub fn map_over(&self, k0: usize, k1: usize) -> DMatrix<f64> {
        let len = self.state_len();
        let mut win = DMatrix::identity(len, len);
        self.march(&mut win, k0, k1);
        win
    }

    /// Dense monodromy matrix (one full period).
    pub fn monodromy(&self) -> DMatrix<f64> {
        self.map_over(0, self.steps)
    }

    /// Applies the period map to a single window state.
    pub fn apply(&self, state: &DVector<f64>) -> DVector<f64> {
        let mut win = DMatrix::zeros(self.state_len(), 1);
        win.set_column(0, state);
        self.march(&mut win, 0, self.steps);
        win.column(0).clone_owned()
    }
}

fn classify(
    multipliers: &[Complex64],
    trivial: (usize, usize),
    t_period: f64,
    tau: f64,
) -> FloquetClass {
    let max_nontrivial = multipliers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != trivial.0 && *i != trivial.1)
        .map(|(_, m)| m.norm())
        .fold(0.0, f64::max);
    if (max_nontrivial - 1.0).abs() <= CLASS_TOL {
        return FloquetClass::Marginal;
    }
    if max_nontrivial < 1.0 {
        return FloquetClass::Stable;
    }
    // Heuristic split between O(1) and O(1/tau) Floquet exponents; the
    // reappearance-chain trend is the authoritative discriminator.
    let exponent = max_nontrivial.ln() / t_period;
    if exponent * tau.max(t_period) > 10.0 {
        FloquetClass::StronglyUnstable
    } else {
        FloquetClass::WeaklyUnstable
    }
}

/// Largest `count` Floquet multipliers of an MW with the trivial pair
/// designated, mesh-doubling until stationary.
pub fn monodromy_multipliers(
    model: &EquivariantModel,
    mw: &MWSolution,
    count: usize,
    opts: &FloquetOptions,
) -> Result<FloquetReport> {
    let mut s = opts.steps_per_period;
    let mut prev: Option<Vec<Complex64>> = None;
    loop {
        let report = multipliers_at(model, mw, count, s)?;
        let current: Vec<Complex64> = report.multipliers.clone();
        let good_trivial = report.trivial_error <= opts.stationary_tol;
        if !opts.adaptive {
            return Ok(report);
        }
        if let Some(p) = &prev {
            let stationary = p.len() == current.len()
                && p.iter().zip(current.iter()).all(|(a, b)| {
                    (a - b).norm() <= opts.stationary_tol * (1.0 + a.norm())
                });
            if stationary && good_trivial {
                return Ok(report);
            }
        }
        prev = Some(current);
        if s >= opts.max_steps_per_period {
            return Err(EqwaveError::Resolution(format!(
                "multipliers not stationary at {s} steps per period \
                 (trivial error {:.3e})",
                report.trivial_error
            )));
        }
        s *= 2;
    }
}

fn multipliers_at(
    model: &EquivariantModel,
    mw: &MWSolution,
    count: usize,
    steps_per_period: usize,
) -> Result<FloquetReport> {
    let disc = FloquetDiscretization::new(model, mw, steps_per_period)?;
    let mono = disc.monodromy();
    let eigs = mono.complex_eigenvalues();
    let mut mu: Vec<Complex64> = eigs.iter().copied().collect();
    mu.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap());
    mu.truncate(count.max(3));

    // The two multipliers nearest 1 are the trivial pair.
    let mut by_dist: Vec<(usize, f64)> = mu
        .iter()
        .enumerate()
        .map(|(i, m)| (i, (m - Complex64::new(1.0, 0.0)).norm()))
        .collect();
    by_dist.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    if by_dist.len() < 2 {
        return Err(EqwaveError::Numeric(
            "fewer than two multipliers computed".into(),
        ));
    }
    let trivial = (by_dist[0].0, by_dist[1].0);
    let trivial_error = by_dist[1].1.max(by_dist[0].1);
    let class = classify(&mu, trivial, mw.derived().t_period, mw.tau);
    Ok(FloquetReport {
        multipliers: mu,
        trivial,
        trivial_error,
        class,
        steps_per_period: disc.steps_per_period(),
    })
}

/// Residuals `|P v - v| / |v|` of the two symmetry eigenfunctions
/// `v = da/dy` and `v = A a(y)` under the discretized period map.
pub fn trivial_multiplier_check(
    model: &EquivariantModel,
    mw: &MWSolution,
    steps_per_period: usize,
) -> Result<(f64, f64)> {
    let disc = FloquetDiscretization::new(model, mw, steps_per_period)?;
    let grid = mw.grid().clone();
    let n = model.dim();
    let deriv = mw.derivative_values();
    let v1 = disc.sample_window(|y| {
        DVector::from_fn(n, |c, _| grid.eval(&deriv.row(c).transpose(), y))
    });
    let v2 = disc.sample_window(|y| model.generator().apply(&mw.profile_at(y)));
    let r1 = (disc.apply(&v1) - &v1).norm() / v1.norm();
    let r2 = (disc.apply(&v2) - &v2).norm() / v2.norm();
    Ok((r1, r2))
}

/// Trend classes along the reappearance chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrendClass {
    Stable,
    WeaklyUnstable,
    StronglyUnstable,
    InsufficientData,
}

#[derive(Clone, Debug)]
pub struct TrendReport {
    /// `(tau_k, max nontrivial Floquet exponent ln|mu|/T)` per chain member.
    pub points: Vec<(f64, f64)>,
    /// Extrapolated exponent at infinite delay (intercept of the fit
    /// against 1/tau).
    pub intercept: f64,
    pub class: TrendClass,
    /// True when the chain was cut short by a failed member.
    pub truncated: bool,
}

/// Finite-delay proxy for the large-delay classification: follows the
/// reappearance chain `tau_k = tau0 + k T`, recomputes the multipliers at
/// each member and reports whether the leading nontrivial exponent scales
/// like 1/tau (continuous-spectrum dominated) or tends to a positive
/// constant (strongly unstable).
pub fn large_delay_trend(
    model: &EquivariantModel,
    mw0: &MWSolution,
    k_max: usize,
    opts: &FloquetOptions,
) -> Result<TrendReport> {
    let mut points = Vec::new();
    let mut truncated = false;
    let solve_opts = MwSolveOptions {
        modes: mw0.modes(),
        max_modes: mw0.modes(),
        adaptive: false,
    };
    for k in 0..=k_max {
        let (tau_k, phi_k) = match mw::reappear_mw(mw0, k as i64) {
            Ok(p) => p,
            Err(_) => {
                truncated = true;
                break;
            }
        };
        // Re-solve to confirm the member exists at its own parameters.
        let guess = MwGuess::from_solution(mw0);
        let solved = match mw::solve_mw(model, tau_k, phi_k, &guess, &solve_opts) {
            Ok(s) => s,
            Err(_) => {
                truncated = true;
                break;
            }
        };
        let report = match monodromy_multipliers(model, &solved, 8, opts) {
            Ok(r) => r,
            Err(_) => {
                truncated = true;
                break;
            }
        };
        let t = solved.derived().t_period;
        let exponent = report.max_nontrivial_modulus().ln() / t;
        points.push((tau_k, exponent));
    }

    if points.len() < 3 {
        return Ok(TrendReport {
            points,
            intercept: f64::NAN,
            class: TrendClass::InsufficientData,
            truncated,
        });
    }
    let xs: Vec<f64> = points.iter().map(|(t, _)| 1.0 / t).collect();
    let ys: Vec<f64> = points.iter().map(|(_, e)| *e).collect();
    let (slope, _) = crate::sim::linear_fit(&xs, &ys);
    let mean_x = xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
    let intercept = mean_y - slope * mean_x;

    let max_exp = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let class = if intercept > 1e-3 {
        TrendClass::StronglyUnstable
    } else if max_exp <= CLASS_TOL {
        TrendClass::Stable
    } else {
        TrendClass::WeaklyUnstable
    };
    Ok(TrendReport {
        points,
        intercept,
        class,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trig::TrigGrid;
    use std::collections::BTreeMap;

    fn lk_model(tau: f64, phi: f64) -> EquivariantModel {
        let params = BTreeMap::from([
            ("alpha".to_string(), 2.0),
            ("eta".to_string(), 0.1),
            ("J".to_string(), -0.5),
            ("epsilon".to_string(), 0.05),
        ]);
        crate::model::lang_kobayashi(&params, tau, phi).unwrap()
    }

    /// Smooth synthetic profile; the variational machinery is defined for
    /// any frozen coefficients, solution or not.
    fn synthetic_mw(model: &EquivariantModel, beta: f64, omega: f64, tau: f64) -> MWSolution {
        let grid = TrigGrid::new(10);
        let n = model.dim();
        let values = DMatrix::from_fn(n, grid.len(), |c, i| {
            let y = grid.node(i);
            0.6 + 0.08 * (y + 0.3 * c as f64).sin() + 0.02 * (2.0 * y).cos()
        });
        let rec = crate::mw::MwRecord {
            tau,
            phi: 0.4,
            beta,
            omega,
            t_period: TWO_PI / beta,
            v_phase: TWO_PI / beta * omega,
            coeffs: {
                let mut coeffs = Vec::new();
                for c in 0..n {
                    let (a0, modes) = grid.coefficients(&values.row(c).transpose());
                    let mut row = vec![a0];
                    for (ak, bk) in modes {
                        row.push(ak);
                        row.push(bk);
                    }
                    coeffs.push(row);
                }
                coeffs
            },
        };
        rec.to_solution(model).unwrap()
    }

    #[test]
    fn period_map_factorizes_over_submaps() {
        let model = lk_model(3.0, 0.4);
        let mw = synthetic_mw(&model, 0.9, -0.2, 3.0);
        let disc = FloquetDiscretization::new(&model, &mw, 32).unwrap();
        let s = disc.steps_per_period();
        let full = disc.monodromy();
        let half1 = disc.map_over(0, s / 2);
        let half2 = disc.map_over(s / 2, s);
        let prod = &half2 * &half1;
        let denom = full.amax().max(1.0);
        assert!(
            (&prod - &full).amax() / denom < 1e-8,
            "factorization defect {}",
            (&prod - &full).amax() / denom
        );
    }

    #[test]
    fn multipliers_stationary_under_mesh_doubling() {
        let model = lk_model(2.0, 0.4);
        let mw = synthetic_mw(&model, 1.1, -0.1, 2.0);
        let m1 = multipliers_at(&model, &mw, 5, 48).unwrap();
        let m2 = multipliers_at(&model, &mw, 5, 96).unwrap();
        for (a, b) in m1.multipliers.iter().zip(m2.multipliers.iter()) {
            assert!(
                (a - b).norm() <= 1e-6 * (1.0 + a.norm()),
                "multiplier drift {a} vs {b}"
            );
        }
    }

    #[test]
    fn random_window_is_not_an_eigenfunction() {
        let model = lk_model(2.0, 0.4);
        let mw = synthetic_mw(&model, 1.1, -0.1, 2.0);
        let disc = FloquetDiscretization::new(&model, &mw, 48).unwrap();
        let v = DVector::from_fn(disc.state_len(), |i, _| ((i * 37 % 17) as f64 - 8.0) / 8.0);
        let r = (disc.apply(&v) - &v).norm() / v.norm();
        assert!(r > 1e-2, "random vector unexpectedly invariant: {r}");
    }

    #[test]
    fn lag_must_be_positive() {
        let model = lk_model(0.0, 0.0);
        let mw = synthetic_mw(&model, 1.0, 0.0, 0.0);
        assert!(FloquetDiscretization::new(&model, &mw, 32).is_err());
    }

    #[test]
    fn trend_needs_three_points() {
        let report = TrendReport {
            points: vec![(1.0, -0.1)],
            intercept: f64::NAN,
            class: TrendClass::InsufficientData,
            truncated: false,
        };
        assert_eq!(report.class, TrendClass::InsufficientData);
    }
}
