//! Stability of a continuous wave: characteristic roots at finite delay,
//! the delay-independent strong point spectrum, the asymptotic continuous
//! spectrum and the three-way large-delay classification.
//!
//! In the frame rotating with the CW the linearization is the constant
//! coefficient delay equation `v' = (M1 - A omega) v + M2 v(t - tau)` with
//! `M1 = D1 f(x0, e^{A psi} x0)` and `M2 = D2 f(x0, e^{A psi} x0) e^{A psi}`.
//! Its characteristic function `det[lambda I - M1 + A omega - M2
//! e^{-lambda tau}]` always vanishes at `lambda = 0` (the group direction).
//! For large delay the roots split into the strong spectrum
//! `eig(M1 - A omega)` and curves `lambda ~ gamma_j(chi)/tau + i chi` with
//! `gamma_j = -ln|Y_j(chi)|/2`, `Y_j` the finite roots of the polynomial
//! `det[i chi I - M1 + A omega - M2 Y]`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::cw::CWPoint;
use crate::error::{EqwaveError, Result};
use crate::linalg;
use crate::model::EquivariantModel;

const CLASS_TOL: f64 = 1e-8;

/// Linearization data of a CW.
#[derive(Clone, Debug)]
pub struct CharEqData {
    /// `D1 f` at the wave.
    pub m1: DMatrix<f64>,
    /// `D2 f` times the feedback rotation `e^{A psi}`.
    pub m2: DMatrix<f64>,
    /// `A omega`.
    pub a_omega: DMatrix<f64>,
    pub tau: f64,
    /// Group-orbit tangent `A x0` (carries the trivial root).
    pub orbit_tangent: DVector<f64>,
}

impl CharEqData {
    pub fn from_cw(model: &EquivariantModel, cw: &CWPoint, tau: f64) -> Result<Self> {
        let rot = model.generator().action(cw.psi);
        let delayed = &rot * &cw.x0;
        let jac = model.jacobians(&cw.x0, &delayed)?;
        Ok(Self {
            m1: jac.m1,
            m2: &jac.d2 * &rot,
            a_omega: model.generator().matrix() * cw.omega,
            tau,
            orbit_tangent: model.generator().apply(&cw.x0),
        })
    }

    pub fn dim(&self) -> usize {
        self.m1.nrows()
    }

    /// `|(M1 + M2 - A omega) A x0|`, which vanishes by equivariance.
    pub fn trivial_root_residual(&self) -> f64 {
        ((&self.m1 + &self.m2 - &self.a_omega) * &self.orbit_tangent).norm()
    }
}

/// Characteristic matrix `lambda I - M1 + A omega - M2 e^{-lambda tau}`.
fn char_matrix(data: &CharEqData, lambda: Complex64) -> DMatrix<Complex64> {
    let n = data.dim();
    let decay = (-lambda * data.tau).exp();
    DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { lambda } else { Complex64::new(0.0, 0.0) };
        diag - data.m1[(i, j)] + data.a_omega[(i, j)] - decay * data.m2[(i, j)]
    })
}

/// Determinant of the characteristic matrix; zero iff `lambda` is a root.
pub fn char_residual(data: &CharEqData, lambda: Complex64) -> Complex64 {
    linalg::complex_det(&char_matrix(data, lambda))
}

/// Characteristic determinant scaled by the product of per-row magnitude
/// bounds of the characteristic matrix, making "small" comparable across
/// models. The bound uses the assembled data rather than the evaluated
/// matrix so it cannot collapse at a root.
pub fn char_residual_scaled(data: &CharEqData, lambda: Complex64) -> f64 {
    let m = char_matrix(data, lambda);
    let det = linalg::complex_det(&m).norm();
    let n = data.dim();
    let decay = (-lambda * data.tau).exp().norm();
    let mut scale = 1.0;
    for i in 0..n {
        let mut row = lambda.norm();
        for j in 0..n {
            row += data.m1[(i, j)].abs()
                + data.a_omega[(i, j)].abs()
                + decay * data.m2[(i, j)].abs();
        }
        scale *= row.max(1e-6);
    }
    det / scale
}

/// Strong point spectrum: all eigenvalues of `M1 - A omega`, sorted by
/// descending real part.
pub fn strong_spectrum(data: &CharEqData) -> Vec<Complex64> {
    let mut ev: Vec<Complex64> = (&data.m1 - &data.a_omega)
        .complex_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
    ev
}

/// One sampled point of the asymptotic continuous spectrum.
#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub chi: f64,
    pub y: Complex64,
    /// `-(1/2) ln |Y|`.
    pub gamma: f64,
}

/// Sampled asymptotic continuous spectrum.
#[derive(Clone, Debug)]
pub struct ContinuousSpectrum {
    /// One curve per finite root branch, each sorted by chi.
    pub branches: Vec<Vec<CurvePoint>>,
    /// Directions with `Y = infinity` per chi (rank deficiency of M2).
    pub deficient_count: usize,
}

impl ContinuousSpectrum {
    /// Largest gamma over all branches, with the trivial chi = 0 touch
    /// clamped to zero inside a small window.
    pub fn gamma_max_excluding_touch(&self) -> f64 {
        let chi_max = self
            .branches
            .iter()
            .flatten()
            .map(|p| p.chi.abs())
            .fold(0.0, f64::max);
        let window = 0.02 * chi_max;
        // The touching branch is the one closest to gamma = 0 at chi = 0.
        let touch_branch = self
            .branches
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let ga = gamma_at_zero(a);
                let gb = gamma_at_zero(b);
                ga.abs().partial_cmp(&gb.abs()).unwrap()
            })
            .map(|(i, _)| i);
        let mut best = f64::NEG_INFINITY;
        for (j, branch) in self.branches.iter().enumerate() {
            for p in branch {
                let g = if Some(j) == touch_branch && p.chi.abs() <= window {
                    p.gamma.min(0.0)
                } else {
                    p.gamma
                };
                best = best.max(g);
            }
        }
        best
    }

    /// Gamma of the branch touching zero at chi = 0.
    pub fn gamma_at_touch(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| gamma_at_zero(b))
            .min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(f64::NAN)
    }
}

fn gamma_at_zero(branch: &[CurvePoint]) -> f64 {
    branch
        .iter()
        .min_by(|a, b| a.chi.abs().partial_cmp(&b.chi.abs()).unwrap())
        .map(|p| p.gamma)
        .unwrap_or(f64::NAN)
}

/// Finite roots `Y_j` of `det[i chi I - M1 + A omega - M2 Y] = 0` for one
/// chi, via coefficient extraction at scaled roots of unity followed by a
/// simultaneous root iteration.
fn y_roots_at(data: &CharEqData, chi: f64) -> Vec<Complex64> {
    let n = data.dim();
    let c = DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j {
            Complex64::new(0.0, chi)
        } else {
            Complex64::new(0.0, 0.0)
        };
        diag - data.m1[(i, j)] + data.a_omega[(i, j)]
    });
    let m2c = linalg::to_complex(&data.m2);
    let scale_c = c.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-12);
    let scale_m2 = m2c.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-12);
    let rho = (scale_c / scale_m2).max(1e-12);

    // det(C - rho z M2) is a degree <= n polynomial in z; sample it at n+1
    // roots of unity and invert the DFT for the coefficients.
    let m = n + 1;
    let samples: Vec<Complex64> = (0..m)
        .map(|s| {
            let z =
                Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * s as f64 / m as f64);
            linalg::complex_det(&(&c - &m2c * (z * rho)))
        })
        .collect();
    let coeffs: Vec<Complex64> = (0..m)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (s, p) in samples.iter().enumerate() {
                let w = Complex64::from_polar(
                    1.0,
                    -2.0 * std::f64::consts::PI * (k * s) as f64 / m as f64,
                );
                acc += p * w;
            }
            acc / m as f64
        })
        .collect();
    linalg::polynomial_roots(&coeffs, 1e-10)
        .into_iter()
        .map(|z| z * rho)
        .collect()
}

/// Default chi grid: 400 uniform points over `[-chi_max, chi_max]` with
/// `chi_max = 4 rho(M1 - A omega) + 4 |M2|`.
pub fn default_chi_grid(data: &CharEqData) -> Vec<f64> {
    let radius = (&data.m1 - &data.a_omega)
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max);
    let m2_norm = data.m2.clone().svd(false, false).singular_values[0];
    let chi_max = 4.0 * radius + 4.0 * m2_norm;
    let m = 400;
    (0..=m)
        .map(|i| -chi_max + 2.0 * chi_max * i as f64 / m as f64)
        .collect()
}

/// Asymptotic continuous spectrum over a chi grid, refined near sign
/// changes of gamma.
pub fn continuous_spectrum(data: &CharEqData, chi_grid: &[f64]) -> Result<ContinuousSpectrum> {
    let n = data.dim();
    let m2_scale = data.m2.amax();
    if m2_scale < 1e-14 * (1.0 + data.m1.amax()) {
        return Err(EqwaveError::NoFeedback);
    }
    // Nondegeneracy `ker M2 = ker M2^2` via rank comparison.
    let rank = |m: &DMatrix<f64>| -> usize {
        let sv = m.clone().svd(false, false).singular_values;
        let smax = sv[0];
        sv.iter().filter(|s| **s > 1e-10 * smax).count()
    };
    let r1 = rank(&data.m2);
    let r2 = rank(&(&data.m2 * &data.m2));
    if r1 != r2 {
        return Err(EqwaveError::Domain(format!(
            "nondegeneracy fails: rank M2 = {r1} but rank M2^2 = {r2}"
        )));
    }
    let deficient = n - r1;

    let mut grid: Vec<f64> = chi_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    if grid.is_empty() {
        return Err(EqwaveError::Domain("empty chi grid".into()));
    }

    let solve_grid =
        |grid: &[f64]| -> Vec<Vec<Complex64>> { grid.par_iter().map(|&chi| y_roots_at(data, chi)).collect() };

    let mut roots = solve_grid(&grid);

    // Refine near sign changes of any gamma.
    for _round in 0..5 {
        let mut extra = Vec::new();
        for i in 0..grid.len() - 1 {
            let g0 = roots[i].iter().map(|y| -0.5 * y.norm().ln());
            let g1: Vec<f64> = roots[i + 1].iter().map(|y| -0.5 * y.norm().ln()).collect();
            let crossing = g0
                .zip(g1.iter())
                .any(|(a, b)| a.signum() != b.signum() && a.is_finite() && b.is_finite());
            if crossing && (grid[i + 1] - grid[i]) > 1e-6 {
                extra.push(0.5 * (grid[i] + grid[i + 1]));
            }
        }
        if extra.is_empty() {
            break;
        }
        let extra_roots = solve_grid(&extra);
        for (chi, rs) in extra.into_iter().zip(extra_roots) {
            let pos = grid.partition_point(|&g| g < chi);
            grid.insert(pos, chi);
            roots.insert(pos, rs);
        }
    }

    // Assemble branches by nearest-neighbor matching across the grid.
    let d = roots.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut branches: Vec<Vec<CurvePoint>> = vec![Vec::new(); d];
    let mut prev: Option<Vec<Complex64>> = None;
    for (gi, rs) in roots.iter().enumerate() {
        let ordered = match &prev {
            Some(p) if p.len() == rs.len() => match_roots(p, rs),
            _ => {
                let mut sorted = rs.clone();
                sorted.sort_by(|a, b| (a.im, a.re).partial_cmp(&(b.im, b.re)).unwrap());
                sorted
            }
        };
        for (j, y) in ordered.iter().enumerate() {
            if j < d {
                branches[j].push(CurvePoint {
                    chi: grid[gi],
                    y: *y,
                    gamma: -0.5 * y.norm().ln(),
                });
            }
        }
        prev = Some(ordered);
    }

    Ok(ContinuousSpectrum {
        branches,
        deficient_count: deficient,
    })
}

/// Orders `next` to minimize total distance to `prev` (small sets only).
fn match_roots(prev: &[Complex64], next: &[Complex64]) -> Vec<Complex64> {
    let d = prev.len();
    if d <= 1 {
        return next.to_vec();
    }
    if d > 6 {
        // Greedy fallback.
        let mut remaining: Vec<Complex64> = next.to_vec();
        let mut out = Vec::with_capacity(d);
        for p in prev {
            let (k, _) = remaining
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| (*a - p).norm().partial_cmp(&(*b - p).norm()).unwrap())
                .unwrap();
            out.push(remaining.remove(k));
        }
        return out;
    }
    let mut idx: Vec<usize> = (0..d).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    permute(&mut idx, 0, &mut |perm| {
        let cost: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| (next[j] - prev[i]).norm())
            .sum();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, perm.to_vec()));
        }
    });
    let (_, perm) = best.unwrap();
    perm.iter().map(|&j| next[j]).collect()
}

fn permute(idx: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == idx.len() {
        visit(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute(idx, k + 1, visit);
        idx.swap(k, i);
    }
}

/// Options for the rightmost-root computation.
#[derive(Clone, Debug)]
pub struct RootOptions {
    /// Initial Chebyshev collocation order.
    pub initial_order: usize,
    pub max_order: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self {
            initial_order: 32,
            max_order: 512,
        }
    }
}

/// The `m` rightmost characteristic roots: Chebyshev discretization of the
/// rotating-frame linearization on `[-tau, 0]`, Newton-polished on the
/// characteristic determinant, with the order doubled until the root set is
/// stationary. Always contains the trivial root near zero.
pub fn rightmost_roots(data: &CharEqData, count: usize) -> Result<Vec<Complex64>> {
    rightmost_roots_opts(data, count, &RootOptions::default())
}

pub fn rightmost_roots_opts(
    data: &CharEqData,
    count: usize,
    opts: &RootOptions,
) -> Result<Vec<Complex64>> {
    if data.tau <= 0.0 {
        return Err(EqwaveError::Domain(
            "rightmost roots need tau > 0; use the strong matrix at tau = 0".into(),
        ));
    }
    let mut order = opts.initial_order;
    let mut prev: Option<Vec<Complex64>> = None;
    loop {
        let roots = roots_at_order(data, count, order)?;
        if let Some(p) = &prev {
            if roots.len() == p.len() {
                let stationary = roots
                    .iter()
                    .zip(p.iter())
                    .all(|(a, b)| (a - b).norm() <= 1e-8 * (1.0 + a.norm()));
                if stationary {
                    return Ok(roots);
                }
            }
        }
        prev = Some(roots);
        if order >= opts.max_order {
            return Err(EqwaveError::Resolution(format!(
                "rightmost roots not stationary at order {order}; request fewer \
                 roots or raise the order limit"
            )));
        }
        order *= 2;
    }
}

fn roots_at_order(data: &CharEqData, count: usize, order: usize) -> Result<Vec<Complex64>> {
    let big = chebyshev_generator(data, order);
    let eigs = big.complex_eigenvalues();
    let mut candidates: Vec<Complex64> = eigs.iter().copied().collect();
    candidates.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
    candidates.truncate(4 * count + 16);
    candidates.push(Complex64::new(0.0, 0.0));

    let polished: Vec<Option<Complex64>> = candidates
        .par_iter()
        .map(|&c| polish_root(data, c))
        .collect();
    let mut roots: Vec<Complex64> = Vec::new();
    for r in polished.into_iter().flatten() {
        let dup = roots
            .iter()
            .any(|q| (q - r).norm() <= 1e-7 * (1.0 + r.norm()));
        if !dup {
            roots.push(r);
        }
    }
    roots.sort_by(|a, b| (b.re, b.im).partial_cmp(&(a.re, a.im)).unwrap());
    roots.truncate(count);
    Ok(roots)
}

/// Newton iteration on the characteristic determinant via the trace formula
/// `d/d lambda ln det M = tr(M^{-1} M')`.
fn polish_root(data: &CharEqData, start: Complex64) -> Option<Complex64> {
    let n = data.dim();
    let mut lambda = start;
    for _ in 0..50 {
        if char_residual_scaled(data, lambda) <= 1e-13 {
            break;
        }
        let m = char_matrix(data, lambda);
        let lu = m.clone().lu();
        // M'(lambda) = I + tau e^{-lambda tau} M2.
        let decay = (-lambda * data.tau).exp();
        let mprime = DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            };
            diag + decay * data.m2[(i, j)] * data.tau
        });
        let solved = match lu.solve(&mprime) {
            Some(s) => s,
            // Exactly singular: we are sitting on a root.
            None => break,
        };
        let trace: Complex64 = (0..n).map(|i| solved[(i, i)]).sum();
        if trace.norm() < 1e-300 {
            return None;
        }
        let step = Complex64::new(1.0, 0.0) / trace;
        lambda -= step;
        if !lambda.re.is_finite() || !lambda.im.is_finite() {
            return None;
        }
        if step.norm() <= 1e-13 * (1.0 + lambda.norm()) {
            break;
        }
    }
    if char_residual_scaled(data, lambda) <= 1e-8 {
        Some(lambda)
    } else {
        None
    }
}

/// Spectral discretization of the generator of the rotating-frame
/// linearization on Chebyshev points over `[-tau, 0]`.
fn chebyshev_generator(data: &CharEqData, order: usize) -> DMatrix<f64> {
    let n = data.dim();
    let nn = order + 1;
    let x: Vec<f64> = (0..nn)
        .map(|k| (std::f64::consts::PI * k as f64 / order as f64).cos())
        .collect();
    let c = |k: usize| -> f64 {
        if k == 0 || k == order {
            2.0
        } else {
            1.0
        }
    };
    let mut dmat = DMatrix::zeros(nn, nn);
    for i in 0..nn {
        for j in 0..nn {
            if i != j {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                dmat[(i, j)] = c(i) / c(j) * sign / (x[i] - x[j]);
            }
        }
    }
    for i in 0..nn {
        let mut s = 0.0;
        for j in 0..nn {
            if i != j {
                s += dmat[(i, j)];
            }
        }
        dmat[(i, i)] = -s;
    }

    // t = (tau/2)(x - 1): node 0 is t = 0, node `order` is t = -tau.
    // Derivative rows everywhere except node 0, which carries the boundary
    // condition v'(0) = L0 v(0) + L1 v(-tau).
    let l0 = &data.m1 - &data.a_omega;
    let l1 = &data.m2;
    let scale = 2.0 / data.tau;
    let mut big = DMatrix::zeros(n * nn, n * nn);
    for k in 1..nn {
        for j in 0..nn {
            let v = scale * dmat[(k, j)];
            for comp in 0..n {
                big[(k * n + comp, j * n + comp)] = v;
            }
        }
    }
    for r in 0..n {
        for col in 0..n {
            big[(r, col)] = l0[(r, col)];
            big[(r, order * n + col)] += l1[(r, col)];
        }
    }
    big
}

/// Large-delay stability classes of a CW.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StabilityClass {
    Stable,
    WeaklyUnstable,
    StronglyUnstable,
}

impl std::fmt::Display for StabilityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Stable => write!(f, "stable"),
            Self::WeaklyUnstable => write!(f, "weakly_unstable"),
            Self::StronglyUnstable => write!(f, "strongly_unstable"),
        }
    }
}

/// Combined spectral data of one CW.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub strong: Vec<Complex64>,
    pub continuous: ContinuousSpectrum,
    pub rightmost: Vec<Complex64>,
    pub class: Option<StabilityClass>,
}

/// Three-way classification from the large-delay spectra.
///
/// Strongly unstable: some strong root has real part above the tolerance.
/// Weakly unstable: strong spectrum negative but some gamma exceeds the
/// tolerance away from the trivial chi = 0 touch. Stable: everything below.
/// A strong root inside the `+-1e-8` band is reported as marginal.
pub fn classify_cw(
    strong: &[Complex64],
    continuous: &ContinuousSpectrum,
) -> Result<StabilityClass> {
    let strong_max = strong.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if strong_max > CLASS_TOL {
        return Ok(StabilityClass::StronglyUnstable);
    }
    if strong_max >= -CLASS_TOL {
        return Err(EqwaveError::Marginal(format!(
            "max strong real part {strong_max:.3e} within +-{CLASS_TOL:.0e}"
        )));
    }
    let gamma_max = continuous.gamma_max_excluding_touch();
    if gamma_max > CLASS_TOL {
        Ok(StabilityClass::WeaklyUnstable)
    } else {
        Ok(StabilityClass::Stable)
    }
}

/// Builds the full spectrum report of a CW at delay `tau`.
pub fn spectrum_report(
    model: &EquivariantModel,
    cw: &CWPoint,
    tau: f64,
    root_count: usize,
    chi_grid: Option<&[f64]>,
) -> Result<SpectrumReport> {
    let data = CharEqData::from_cw(model, cw, tau)?;
    let strong = strong_spectrum(&data);
    let owned_grid;
    let grid: &[f64] = match chi_grid {
        Some(g) => g,
        None => {
            owned_grid = default_chi_grid(&data);
            &owned_grid
        }
    };
    let continuous = continuous_spectrum(&data, grid)?;
    let rightmost = if tau > 0.0 {
        rightmost_roots(&data, root_count)?
    } else {
        let mut ev: Vec<Complex64> = (&data.m1 + &data.m2 - &data.a_omega)
            .complex_eigenvalues()
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
        ev.truncate(root_count);
        ev
    };
    let class = classify_cw(&strong, &continuous).ok();
    Ok(SpectrumReport {
        strong,
        continuous,
        rightmost,
        class,
    })
}
