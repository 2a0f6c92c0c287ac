//! Direct integration of the delay equation by the method of steps.
//!
//! Fixed-step classical Runge-Kutta with cubic Hermite interpolation of the
//! delayed argument. The step is snapped to an integer fraction of the delay
//! so that stage lookups land inside fully-computed past intervals; global
//! error is O(h^4) on smooth solutions. Used as the independent oracle for
//! CW/MW existence, stability rates and basins.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex as FftComplex, FftPlanner};

use crate::cw::CWPoint;
use crate::error::{EqwaveError, Result};
use crate::linalg;
use crate::model::EquivariantModel;
use crate::mw::MWSolution;

const BLOWUP_NORM: f64 = 1e8;

/// Initial data on one delay interval `[t0 - tau, t0]`.
#[derive(Clone, Debug)]
pub struct HistorySegment {
    tau: f64,
    t0: f64,
    /// Uniform mesh `(t, x, x')`, oldest first, spanning exactly one delay.
    points: Vec<(f64, DVector<f64>, DVector<f64>)>,
}

impl HistorySegment {
    /// Constant history.
    pub fn constant(tau: f64, t0: f64, x: DVector<f64>) -> Result<Self> {
        let z = DVector::zeros(x.len());
        Self::from_fn_exact(tau, t0, 16, |_| x.clone(), |_| z.clone())
    }

    /// History sampled from a function; derivatives by central differences.
    pub fn from_fn<F>(tau: f64, t0: f64, points: usize, f: F) -> Result<Self>
    where
        F: Fn(f64) -> DVector<f64>,
    {
        let h = 1e-6_f64;
        Self::from_fn_exact(tau, t0, points, &f, |t| (f(t + h) - f(t - h)) / (2.0 * h))
    }

    /// History sampled from a function with its exact derivative.
    pub fn from_fn_exact<F, G>(tau: f64, t0: f64, points: usize, f: F, df: G) -> Result<Self>
    where
        F: Fn(f64) -> DVector<f64>,
        G: Fn(f64) -> DVector<f64>,
    {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(EqwaveError::Domain(format!(
                "history needs a positive delay, got tau = {tau}"
            )));
        }
        let m = points.max(4);
        let pts = (0..=m)
            .map(|k| {
                let t = t0 - tau + tau * k as f64 / m as f64;
                (t, f(t), df(t))
            })
            .collect();
        Ok(Self { tau, t0, points: pts })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dim(&self) -> usize {
        self.points[0].1.len()
    }

    /// Applies a linear map to every value and derivative.
    pub fn map_linear(&self, g: &DMatrix<f64>) -> Self {
        Self {
            tau: self.tau,
            t0: self.t0,
            points: self
                .points
                .iter()
                .map(|(t, x, d)| (*t, g * x, g * d))
                .collect(),
        }
    }

    /// Cubic Hermite evaluation; clamps to the covered interval.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let m = self.points.len() - 1;
        let h = self.tau / m as f64;
        let s_raw = (t - (self.t0 - self.tau)) / h;
        let k = (s_raw.floor() as isize).clamp(0, m as isize - 1) as usize;
        let (ta, xa, da) = &self.points[k];
        let (_, xb, db) = &self.points[k + 1];
        hermite(*ta, h, xa, da, xb, db, t)
    }
}

fn hermite(
    ta: f64,
    h: f64,
    xa: &DVector<f64>,
    da: &DVector<f64>,
    xb: &DVector<f64>,
    db: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let s = (t - ta) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    xa * h00 + da * (h10 * h) + xb * h01 + db * (h11 * h)
}

/// A computed trajectory with the observables used by the wave analysis.
#[derive(Clone, Debug)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    plane: (usize, usize),
    step: f64,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Norm of the rotation-plane components.
    pub fn amplitude(&self, k: usize) -> f64 {
        let x = &self.states[k];
        (x[self.plane.0].powi(2) + x[self.plane.1].powi(2)).sqrt()
    }

    /// Rotational phase from the rotation-plane pair.
    pub fn phase(&self, k: usize) -> f64 {
        let x = &self.states[k];
        x[self.plane.1].atan2(x[self.plane.0])
    }

    /// First sample index with `t >= t_min`.
    pub fn tail_from(&self, t_min: f64) -> usize {
        self.times.partition_point(|&t| t < t_min)
    }
}

/// Integrates `x'(t) = f(x(t), e^{A phi} x(t - tau))` from the given history
/// up to `t_end` with requested step `h` (snapped to divide the delay).
pub fn integrate(
    model: &EquivariantModel,
    history: &HistorySegment,
    t_end: f64,
    h: f64,
) -> Result<Trajectory> {
    let tau = model.tau();
    if tau <= 0.0 {
        return Err(EqwaveError::Domain(
            "integration requires a positive delay".into(),
        ));
    }
    if !(h > 0.0 && h <= tau / 16.0) {
        return Err(EqwaveError::Domain(format!(
            "step h = {h} must satisfy 0 < h <= tau/16 = {}",
            tau / 16.0
        )));
    }
    if (history.tau() - tau).abs() > 1e-12 * tau {
        return Err(EqwaveError::Domain(
            "history delay span differs from the model delay".into(),
        ));
    }
    let t0 = history.t0();
    if t_end <= t0 {
        return Err(EqwaveError::Domain("t_end must exceed the history end".into()));
    }

    let m = (tau / h).ceil() as usize;
    let h = tau / m as f64;
    let rot = model.generator().action(model.phi());
    let n_steps = ((t_end - t0) / h).ceil() as usize;

    // Node k sits at t_base + k h with t_base = t0 - tau; nodes 0..=m come
    // from the history, the rest from the march.
    let t_base = t0 - tau;
    let mut xs: Vec<DVector<f64>> = Vec::with_capacity(m + n_steps + 1);
    let mut ds: Vec<DVector<f64>> = Vec::with_capacity(m + n_steps + 1);
    for k in 0..=m {
        let t = t_base + h * k as f64;
        xs.push(history.eval(t));
        let eps = 1e-7 * tau;
        let d = if k == 0 {
            (history.eval(t + eps) - history.eval(t)) / eps
        } else if k == m {
            (history.eval(t) - history.eval(t - eps)) / eps
        } else {
            (history.eval(t + eps) - history.eval(t - eps)) / (2.0 * eps)
        };
        ds.push(d);
    }

    let deriv = |i_new: usize,
                 c: f64,
                 x: &DVector<f64>,
                 xs: &[DVector<f64>],
                 ds: &[DVector<f64>]|
     -> Result<DVector<f64>> {
        // Delayed time for stage offset c in [0, 1]: node (i_new - 1 + c) - m.
        let base = i_new - 1 - m;
        let delayed = if c == 0.0 {
            xs[base].clone()
        } else if c == 1.0 {
            xs[base + 1].clone()
        } else {
            let ta = t_base + h * base as f64;
            hermite(
                ta,
                h,
                &xs[base],
                &ds[base],
                &xs[base + 1],
                &ds[base + 1],
                ta + c * h,
            )
        };
        model.eval_rhs(x, &(&rot * delayed))
    };

    for i in (m + 1)..=(m + n_steps) {
        let x = xs[i - 1].clone();
        let k1 = deriv(i, 0.0, &x, &xs, &ds)?;
        let k2 = deriv(i, 0.5, &(&x + &k1 * (0.5 * h)), &xs, &ds)?;
        let k3 = deriv(i, 0.5, &(&x + &k2 * (0.5 * h)), &xs, &ds)?;
        let k4 = deriv(i, 1.0, &(&x + &k3 * h), &xs, &ds)?;
        let x_new = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let norm = x_new.norm();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            return Err(EqwaveError::Divergence {
                t: t_base + h * i as f64,
                norm,
            });
        }
        xs.push(x_new);
        let d_new = deriv(i + 1, 0.0, &xs[i], &xs, &ds)?;
        ds.push(d_new);
    }

    let plane = model.generator().rotation_plane();
    let times: Vec<f64> = (m..=(m + n_steps))
        .map(|k| t_base + h * k as f64)
        .collect();
    let states = xs[m..].to_vec();
    Ok(Trajectory {
        times,
        states,
        plane,
        step: h,
    })
}

/// Reference orbit for group-quotient distances.
pub enum OrbitReference<'a> {
    Cw(&'a CWPoint),
    Mw(&'a MWSolution),
}

/// Distance-to-orbit series and fitted exponential rate.
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub distances: Vec<(f64, f64)>,
    /// Least-squares slope of `ln d(t)` over the tail half.
    pub rate: f64,
    /// Squared correlation of the fit.
    pub r2: f64,
}

/// Quotient distance `min_theta |x - exp(A theta) y|`, specialized to a
/// single-plane generator when possible.
pub fn orbit_distance(model: &EquivariantModel, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let gen = model.generator();
    let a = gen.matrix();
    let (p, q) = gen.rotation_plane();
    let mut single = (a[(p, q)].abs() - 1.0).abs() < 1e-12;
    if single {
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if (i, j) != (p, q) && (i, j) != (q, p) && a[(i, j)].abs() > 1e-14 {
                    single = false;
                }
            }
        }
    }
    if single {
        // Closed-form maximization of <x, exp(A theta) y> over the angle.
        let c = x[p] * y[p] + x[q] * y[q];
        let s = x[q] * y[p] - x[p] * y[q];
        let mut fixed = 0.0;
        for i in 0..x.len() {
            if i != p && i != q {
                fixed += x[i] * y[i];
            }
        }
        let best_inner = (c * c + s * s).sqrt() + fixed;
        let d2 = x.norm_squared() + y.norm_squared() - 2.0 * best_inner;
        d2.max(0.0).sqrt()
    } else {
        linalg::min_over_rotation(|t| gen.action(t), x, y).1
    }
}

/// Computes the group-quotient distance of a trajectory to a reference CW or
/// MW orbit and fits the exponential rate over the tail half.
pub fn converge_to_orbit(
    model: &EquivariantModel,
    traj: &Trajectory,
    reference: &OrbitReference<'_>,
) -> Result<ConvergenceReport> {
    let span = traj.times().last().unwrap() - traj.times()[0];
    if span < 20.0 * model.tau() {
        return Err(EqwaveError::Domain(format!(
            "trajectory spans {span:.3}, need at least 20 delay intervals"
        )));
    }
    let distances: Vec<(f64, f64)> = match reference {
        OrbitReference::Cw(cw) => traj
            .times()
            .iter()
            .zip(traj.states())
            .map(|(&t, x)| (t, orbit_distance(model, x, &cw.x0)))
            .collect(),
        OrbitReference::Mw(mw) => {
            let samples = mw.profile_values();
            traj.times()
                .iter()
                .zip(traj.states())
                .map(|(&t, x)| {
                    let d = samples
                        .column_iter()
                        .map(|col| orbit_distance(model, x, &col.clone_owned()))
                        .fold(f64::INFINITY, f64::min);
                    (t, d)
                })
                .collect()
        }
    };

    let t_mid = 0.5 * (traj.times()[0] + traj.times().last().unwrap());
    let scale = traj
        .states()
        .iter()
        .map(|x| x.norm())
        .fold(0.0, f64::max)
        .max(1.0);
    let tail: Vec<(f64, f64)> = distances
        .iter()
        .filter(|(t, d)| *t >= t_mid && *d > 1e-14 * scale)
        .cloned()
        .collect();
    if tail.len() < 10 {
        return Err(EqwaveError::Numeric(
            "too few usable tail samples for a rate fit".into(),
        ));
    }
    let (rate, r2) = linear_fit(
        &tail.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
        &tail.iter().map(|(_, d)| d.ln()).collect::<Vec<_>>(),
    );
    Ok(ConvergenceReport { distances, rate, r2 })
}

/// Least-squares slope and r^2 of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - xm) * (yi - ym);
        sxx += (xi - xm) * (xi - xm);
        syy += (yi - ym) * (yi - ym);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, r2)
}

/// Dominant angular frequency of a uniformly sampled scalar signal: FFT
/// magnitude peak with quadratic interpolation of the peak bin.
pub fn dominant_frequency(values: &[f64], dt: f64) -> Option<f64> {
    let len = values.len();
    if len < 16 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / len as f64;
    let mut buf: Vec<FftComplex<f64>> = values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = 0.5
                - 0.5
                    * (2.0 * std::f64::consts::PI * k as f64 / (len - 1) as f64).cos();
            FftComplex::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let half = len / 2;
    let mags: Vec<f64> = buf[..half].iter().map(|c| c.norm()).collect();
    let (mut k_max, mut best) = (0usize, 0.0f64);
    for (k, &m) in mags.iter().enumerate().skip(1) {
        if m > best {
            best = m;
            k_max = k;
        }
    }
    if k_max == 0 || best == 0.0 {
        return None;
    }
    let delta = if k_max + 1 < half && k_max >= 1 && mags[k_max - 1] > 0.0 && mags[k_max + 1] > 0.0
    {
        let (la, lb, lc) = (
            mags[k_max - 1].ln(),
            mags[k_max].ln(),
            mags[k_max + 1].ln(),
        );
        let denom = la - 2.0 * lb + lc;
        if denom.abs() > 1e-12 {
            (0.5 * (la - lc) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    } else {
        0.0
    };
    Some(2.0 * std::f64::consts::PI * (k_max as f64 + delta) / (len as f64 * dt))
}

/// Mean angular velocity of a phase signal: unwraps modulo 2 pi and fits a
/// line.
pub fn phase_slope(times: &[f64], phases: &[f64]) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut unwrapped = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    unwrapped.push(phases[0]);
    for k in 1..phases.len() {
        let mut dp = phases[k] - phases[k - 1];
        while dp > std::f64::consts::PI {
            dp -= two_pi;
            offset -= two_pi;
        }
        while dp < -std::f64::consts::PI {
            dp += two_pi;
            offset += two_pi;
        }
        unwrapped.push(phases[k] + offset);
    }
    linear_fit(times, &unwrapped).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn lk(tau: f64, phi: f64) -> EquivariantModel {
        let params = BTreeMap::from([
            ("alpha".to_string(), 2.0),
            ("eta".to_string(), 0.1),
            ("J".to_string(), -0.5),
            ("epsilon".to_string(), 0.05),
        ]);
        crate::model::lang_kobayashi(&params, tau, phi).unwrap()
    }

    #[test]
    fn off_state_stays_constant() {
        let model = lk(2.0, 0.3);
        let x = DVector::from_vec(vec![0.0, 0.0, 0.5]);
        let hist = HistorySegment::constant(2.0, 0.0, x.clone()).unwrap();
        let traj = integrate(&model, &hist, 40.0, 2.0 / 64.0).unwrap();
        for s in traj.states() {
            assert!((s - &x).norm() < 1e-12);
        }
    }

    #[test]
    fn cw_history_is_tracked_with_fourth_order_error() {
        // Closed-form ECM at psi = 0: N0 = -eta, omega = -alpha*eta,
        // E0^2 = -(J + N0)/(2 N0 + 1).
        let (eta, alpha): (f64, f64) = (0.1, 2.0);
        let n0 = -eta;
        let omega = -alpha * eta;
        let e0: f64 = ((0.5 + eta) / (1.0 - 2.0 * eta)).sqrt();
        let tau = 2.0;
        let phi = crate::linalg::wrap_angle(omega * tau);
        let model = lk(tau, phi);
        let x0 = DVector::from_vec(vec![e0, 0.0, n0]);
        let gen = model.generator().clone();
        let make_hist = || {
            let x0a = x0.clone();
            let gena = gen.clone();
            let x0b = x0.clone();
            let genb = gen.clone();
            HistorySegment::from_fn_exact(
                tau,
                0.0,
                512,
                move |t| &gena.action(omega * t) * &x0a,
                move |t| &genb.action(omega * t) * &(genb.apply(&x0b) * omega),
            )
            .unwrap()
        };
        let t_end = 20.0;
        let exact = gen.action(omega * t_end) * &x0;
        let err_at = |h: f64| {
            let traj = integrate(&model, &make_hist(), t_end, h).unwrap();
            (traj.states().last().unwrap() - &exact).norm()
        };
        let e1 = err_at(tau / 64.0);
        let e2 = err_at(tau / 128.0);
        let ratio = e1 / e2;
        assert!(
            (8.0..40.0).contains(&ratio),
            "expected ~16x error drop per halving, got {ratio} ({e1} -> {e2})"
        );
    }

    #[test]
    fn flow_is_equivariant() {
        let model = lk(1.0, 0.7);
        let hist = HistorySegment::from_fn(1.0, 0.0, 64, |t| {
            DVector::from_vec(vec![0.5 + 0.1 * t.sin(), 0.2, -0.1 + 0.05 * t.cos()])
        })
        .unwrap();
        for &theta in &[0.4, 1.9, 3.3, 5.1, 6.0] {
            let g = model.generator().action(theta);
            let t1 = integrate(&model, &hist.map_linear(&g), 10.0, 1.0 / 32.0).unwrap();
            let t2 = integrate(&model, &hist, 10.0, 1.0 / 32.0).unwrap();
            let last_rotated = &g * t2.states().last().unwrap();
            assert!(
                (t1.states().last().unwrap() - last_rotated).norm() < 1e-9,
                "flow equivariance broken for theta = {theta}"
            );
        }
    }

    #[test]
    fn blowup_is_detected() {
        let params = BTreeMap::from([
            ("alpha".to_string(), 1.0),
            ("beta".to_string(), 0.0),
            ("gamma".to_string(), 1.0), // wrong-sign nonlinearity: finite-time blowup
            ("eta".to_string(), 0.0),
        ]);
        let model = crate::model::stuart_landau(&params, 1.0, 0.0).unwrap();
        let hist =
            HistorySegment::constant(1.0, 0.0, DVector::from_vec(vec![1.0, 0.0])).unwrap();
        match integrate(&model, &hist, 50.0, 1.0 / 32.0) {
            Err(EqwaveError::Divergence { t, .. }) => assert!(t > 0.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn step_size_precondition_enforced() {
        let model = lk(1.0, 0.0);
        let hist =
            HistorySegment::constant(1.0, 0.0, DVector::from_vec(vec![0.0, 0.0, 0.5]))
                .unwrap();
        assert!(matches!(
            integrate(&model, &hist, 5.0, 0.2),
            Err(EqwaveError::Domain(_))
        ));
    }

    #[test]
    fn dominant_frequency_detects_tone() {
        let dt = 0.05;
        let w = 1.37;
        let xs: Vec<f64> = (0..4096).map(|k| (w * dt * k as f64).sin()).collect();
        let f = dominant_frequency(&xs, dt).unwrap();
        assert!((f - w).abs() / w < 1e-3, "got {f}, want {w}");
    }

    #[test]
    fn phase_slope_recovers_rotation_rate() {
        let times: Vec<f64> = (0..2000).map(|k| 0.01 * k as f64).collect();
        let phases: Vec<f64> = times
            .iter()
            .map(|t| {
                crate::linalg::wrap_angle(2.3 * t + 0.2 * (5.0 * t).sin())
                    - std::f64::consts::PI
            })
            .collect();
        let slope = phase_slope(&times, &phases);
        assert!((slope - 2.3).abs() < 0.02, "slope {slope}");
    }
}
