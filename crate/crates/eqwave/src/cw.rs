//! Continuous waves: the algebraic system, continuation of the primary set
//! over the effective feedback phase, reappearance and counting.
//!
//! A CW is `x(t) = e^{A omega t} x0`. At fixed effective phase
//! `psi = phi - omega tau` it solves the n+1 equations
//! `f(x0, e^{A psi} x0) - A omega x0 = 0`, `b^T x0 = 0` for the n+1
//! unknowns `(x0, omega)`. Everything a CW does under parameter changes is
//! governed by `psi` alone, which is what makes the primary set (all CWs at
//! tau = 0) exhaustive and the counting argument work.

use nalgebra::{DMatrix, DVector};

use crate::error::{EqwaveError, Result};
use crate::linalg::wrap_angle;
use crate::model::EquivariantModel;

const NEWTON_TOL: f64 = 1e-10;
const PIN_TOL: f64 = 1e-12;
const MAX_NEWTON_ITERS: usize = 25;

/// One continuous wave.
#[derive(Clone, Debug)]
pub struct CWPoint {
    /// State profile, pinned by `b^T x0 = 0`.
    pub x0: DVector<f64>,
    /// Rotation frequency (rad/time).
    pub omega: f64,
    /// Effective feedback phase `phi - omega tau`, wrapped to `[0, 2 pi)`.
    pub psi: f64,
    /// Norm of the defining residual at the solution.
    pub residual_norm: f64,
}

/// A sampled piecewise-smooth stretch of the primary CW set.
#[derive(Clone, Debug)]
pub struct PrimaryBranch {
    /// Nodes in continuation order.
    pub nodes: Vec<CWPoint>,
    /// Start index of each smooth piece; `[0]` when the branch has no folds.
    pub piece_starts: Vec<usize>,
    /// Whether the branch wraps the full circle in psi.
    pub closed: bool,
    /// Stall information when continuation ended early.
    pub diagnostic: Option<String>,
}

impl PrimaryBranch {
    pub fn from_nodes(nodes: Vec<CWPoint>, closed: bool) -> Self {
        Self {
            nodes,
            piece_starts: vec![0],
            closed,
            diagnostic: None,
        }
    }

    /// Smooth pieces as `(branch_id, nodes)` slices.
    pub fn pieces(&self) -> impl Iterator<Item = (usize, &[CWPoint])> {
        let bounds: Vec<(usize, usize)> = self
            .piece_starts
            .iter()
            .copied()
            .zip(
                self.piece_starts
                    .iter()
                    .copied()
                    .skip(1)
                    .chain(std::iter::once(self.nodes.len())),
            )
            .collect();
        bounds
            .into_iter()
            .enumerate()
            .map(move |(id, (a, b))| (id, &self.nodes[a..b]))
    }

    pub fn omega_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for n in &self.nodes {
            lo = lo.min(n.omega);
            hi = hi.max(n.omega);
        }
        (lo, hi)
    }

    /// Total variation of omega along the node sequence.
    pub fn omega_total_variation(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| (w[1].omega - w[0].omega).abs())
            .sum()
    }
}

/// Adaptive stepping options for `continue_primary`.
#[derive(Clone, Debug)]
pub struct StepControl {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_nodes: usize,
    /// Secant slope `|d omega / d psi|` beyond which stepping switches to
    /// pseudo-arclength.
    pub fold_slope: f64,
    /// Forces pseudo-arclength stepping throughout (mainly for tests).
    pub force_arclength: bool,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            initial_step: 0.05,
            min_step: 1e-8,
            max_step: 0.15,
            max_nodes: 200_000,
            fold_slope: 1e4,
            force_arclength: false,
        }
    }
}

/// Coexisting-CW count report for one branch at `(tau, phi)`.
#[derive(Clone, Debug)]
pub struct CWCountReport {
    /// Count coefficient `K` (1/time) from the total variation of omega.
    pub k_coeff: f64,
    pub omega_max: f64,
    pub omega_min: f64,
    /// Predicted interval `[floor(K tau) - 1, floor(K tau) + 1]`, clamped
    /// below at the per-sheet minimum (1 for a closed branch).
    pub predicted: (i64, i64),
    pub found: usize,
    pub cws: Vec<CWPoint>,
}

impl CWCountReport {
    pub fn within_predicted(&self) -> bool {
        let f = self.found as i64;
        f >= self.predicted.0 && f <= self.predicted.1
    }
}

struct NewtonOutcome {
    point: CWPoint,
    iterations: usize,
}

fn residual_fixed_psi(
    model: &EquivariantModel,
    rot_psi: &DMatrix<f64>,
    x0: &DVector<f64>,
    omega: f64,
) -> Result<DVector<f64>> {
    let f = model.eval_rhs(x0, &(rot_psi * x0))?;
    Ok(f - model.generator().apply(x0) * omega)
}

/// Newton solve of the CW system at fixed `psi`.
pub fn solve_cw(
    model: &EquivariantModel,
    psi: f64,
    guess: (&DVector<f64>, f64),
) -> Result<CWPoint> {
    solve_cw_inner(model, psi, guess).map(|o| o.point)
}

fn solve_cw_inner(
    model: &EquivariantModel,
    psi: f64,
    guess: (&DVector<f64>, f64),
) -> Result<NewtonOutcome> {
    let n = model.dim();
    let b = model.pinning().clone();
    if model.generator().apply(&b).norm() < 1e-12 {
        return Err(EqwaveError::Config("pinning vector lies in ker A".into()));
    }
    let rot = model.generator().action(psi);
    let a = model.generator().matrix().clone();

    let mut x0 = guess.0.clone();
    let mut omega = guess.1;
    if x0.iter().any(|v| !v.is_finite()) || !omega.is_finite() {
        return Err(EqwaveError::Domain("CW guess must be finite".into()));
    }

    let full_residual = |x0: &DVector<f64>, omega: f64| -> Result<DVector<f64>> {
        let r = residual_fixed_psi(model, &rot, x0, omega)?;
        let mut full = DVector::zeros(n + 1);
        full.rows_mut(0, n).copy_from(&r);
        full[n] = b.dot(x0);
        Ok(full)
    };

    let mut res = full_residual(&x0, omega)?;
    let mut converged_at = None;
    for iter in 0..MAX_NEWTON_ITERS {
        let scale = 1.0 + x0.norm();
        if res.rows(0, n).norm() <= NEWTON_TOL * scale && res[n].abs() <= PIN_TOL * scale {
            // One polishing step squeezes out the remaining O(res/sigma_min)
            // parameter error; keep it only if it helps.
            if converged_at.is_some() {
                return Ok(NewtonOutcome {
                    point: CWPoint {
                        residual_norm: res.rows(0, n).norm(),
                        x0,
                        omega,
                        psi: wrap_angle(psi),
                    },
                    iterations: iter,
                });
            }
            converged_at = Some(iter);
        } else if let Some(it) = converged_at {
            // The polish step made things worse numerically; this cannot
            // happen with a sane Jacobian, but bail out safely.
            return Ok(NewtonOutcome {
                point: CWPoint {
                    residual_norm: res.rows(0, n).norm(),
                    x0,
                    omega,
                    psi: wrap_angle(psi),
                },
                iterations: it,
            });
        }

        let jac_model = model.jacobians(&x0, &(&rot * &x0))?;
        let mut jac = DMatrix::zeros(n + 1, n + 1);
        let dx = &jac_model.m1 + &jac_model.d2 * &rot - &a * omega;
        jac.view_mut((0, 0), (n, n)).copy_from(&dx);
        let domega = -(&a * &x0);
        jac.view_mut((0, n), (n, 1)).copy_from(&domega);
        for j in 0..n {
            jac[(n, j)] = b[j];
        }

        let delta = match jac.lu().solve(&(-&res)) {
            Some(d) => d,
            None => {
                return Err(EqwaveError::RankDeficient {
                    context: format!("CW Newton at psi = {psi:.6}"),
                })
            }
        };
        if delta.norm() > 1e8 * (1.0 + x0.norm()) {
            return Err(EqwaveError::NoConvergence {
                iterations: iter,
                residual: res.norm(),
                last_iterate: iterate_vec(&x0, omega),
            });
        }

        // Backtracking damping on the residual norm.
        let base_norm = res.norm();
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..10 {
            let x_try = &x0 + delta.rows(0, n) * t;
            let w_try = omega + delta[n] * t;
            match full_residual(&x_try, w_try) {
                Ok(r_try) if r_try.norm() < base_norm || r_try.norm() <= NEWTON_TOL => {
                    x0 = x_try;
                    omega = w_try;
                    res = r_try;
                    accepted = true;
                    break;
                }
                _ => t *= 0.5,
            }
        }
        if !accepted {
            if let Some(it) = converged_at {
                return Ok(NewtonOutcome {
                    point: CWPoint {
                        residual_norm: res.rows(0, n).norm(),
                        x0,
                        omega,
                        psi: wrap_angle(psi),
                    },
                    iterations: it,
                });
            }
            return Err(EqwaveError::NoConvergence {
                iterations: iter,
                residual: base_norm,
                last_iterate: iterate_vec(&x0, omega),
            });
        }
    }
    if converged_at.is_some() {
        let scale = 1.0 + x0.norm();
        if res.rows(0, n).norm() <= NEWTON_TOL * scale {
            return Ok(NewtonOutcome {
                point: CWPoint {
                    residual_norm: res.rows(0, n).norm(),
                    x0,
                    omega,
                    psi: wrap_angle(psi),
                },
                iterations: MAX_NEWTON_ITERS,
            });
        }
    }
    Err(EqwaveError::NoConvergence {
        iterations: MAX_NEWTON_ITERS,
        residual: res.norm(),
        last_iterate: iterate_vec(&x0, omega),
    })
}

fn iterate_vec(x0: &DVector<f64>, omega: f64) -> Vec<f64> {
    let mut v: Vec<f64> = x0.iter().copied().collect();
    v.push(omega);
    v
}

/// Newton solve of the CW system at fixed `(tau, phi)`; the effective phase
/// `psi = phi - omega tau` moves with the unknown frequency.
pub fn solve_cw_at_params(
    model: &EquivariantModel,
    tau: f64,
    phi: f64,
    guess: (&DVector<f64>, f64),
) -> Result<CWPoint> {
    let n = model.dim();
    let b = model.pinning().clone();
    let a = model.generator().matrix().clone();

    let mut x0 = guess.0.clone();
    let mut omega = guess.1;

    let full_residual = |x0: &DVector<f64>, omega: f64| -> Result<DVector<f64>> {
        let rot = model.generator().action(phi - omega * tau);
        let r = residual_fixed_psi(model, &rot, x0, omega)?;
        let mut full = DVector::zeros(n + 1);
        full.rows_mut(0, n).copy_from(&r);
        full[n] = b.dot(x0);
        Ok(full)
    };

    let mut res = full_residual(&x0, omega)?;
    let mut converged = false;
    for iter in 0..MAX_NEWTON_ITERS {
        let scale = 1.0 + x0.norm();
        if res.rows(0, n).norm() <= NEWTON_TOL * scale && res[n].abs() <= PIN_TOL * scale {
            if converged {
                return Ok(CWPoint {
                    residual_norm: res.rows(0, n).norm(),
                    x0,
                    omega,
                    psi: wrap_angle(phi - omega * tau),
                });
            }
            // Take one extra polishing step before returning.
            converged = true;
        }

        let rot = model.generator().action(phi - omega * tau);
        let jac_model = model.jacobians(&x0, &(&rot * &x0))?;
        let mut jac = DMatrix::zeros(n + 1, n + 1);
        let dx = &jac_model.m1 + &jac_model.d2 * &rot - &a * omega;
        jac.view_mut((0, 0), (n, n)).copy_from(&dx);
        let domega = -(&a * &x0) - &jac_model.d2 * (&a * (&rot * &x0)) * tau;
        jac.view_mut((0, n), (n, 1)).copy_from(&domega);
        for j in 0..n {
            jac[(n, j)] = b[j];
        }

        let delta = match jac.lu().solve(&(-&res)) {
            Some(d) => d,
            None => {
                return Err(EqwaveError::RankDeficient {
                    context: format!("CW Newton at (tau, phi) = ({tau:.4}, {phi:.4})"),
                })
            }
        };
        let base_norm = res.norm();
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..10 {
            let x_try = &x0 + delta.rows(0, n) * t;
            let w_try = omega + delta[n] * t;
            match full_residual(&x_try, w_try) {
                Ok(r_try) if r_try.norm() < base_norm || r_try.norm() <= NEWTON_TOL => {
                    x0 = x_try;
                    omega = w_try;
                    res = r_try;
                    accepted = true;
                    break;
                }
                _ => t *= 0.5,
            }
        }
        if !accepted {
            if converged {
                return Ok(CWPoint {
                    residual_norm: res.rows(0, n).norm(),
                    x0,
                    omega,
                    psi: wrap_angle(phi - omega * tau),
                });
            }
            return Err(EqwaveError::NoConvergence {
                iterations: iter,
                residual: base_norm,
                last_iterate: iterate_vec(&x0, omega),
            });
        }
    }
    if converged {
        return Ok(CWPoint {
            residual_norm: res.rows(0, n).norm(),
            x0,
            omega,
            psi: wrap_angle(phi - omega * tau),
        });
    }
    Err(EqwaveError::NoConvergence {
        iterations: MAX_NEWTON_ITERS,
        residual: res.norm(),
        last_iterate: iterate_vec(&x0, omega),
    })
}

/// Phase at which a CW exists for delay `tau`:
/// `phi = (psi + omega tau) mod 2 pi`.
pub fn reappearance_phi(cw: &CWPoint, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    wrap_angle(cw.psi + cw.omega * tau)
}

/// Continues the primary set from a converged seed up to `psi_end`.
///
/// Natural psi-stepping with secant prediction; switches to pseudo-arclength
/// in `(x0, omega, psi)` near folds and records separate smooth pieces. A
/// stall returns the partial branch with a diagnostic instead of an error.
pub fn continue_primary(
    model: &EquivariantModel,
    seed: &CWPoint,
    psi_end: f64,
    ctrl: &StepControl,
) -> Result<PrimaryBranch> {
    let psi_start = seed.psi;
    let dir = if psi_end >= psi_start { 1.0 } else { -1.0 };
    let span = (psi_end - psi_start).abs();

    let seed_pt = solve_cw(model, psi_start, (&seed.x0, seed.omega))?;
    let mut nodes = vec![seed_pt];
    let mut piece_starts = vec![0usize];
    let mut diagnostic = None;

    // Unwrapped psi along the branch; nodes store the wrapped value.
    let mut psi_u = vec![psi_start];
    let mut step = ctrl.initial_step.min(span.max(1e-12));
    let mut arclength_mode = ctrl.force_arclength;
    let mut prev_tangent: Option<DVector<f64>> = None;

    'outer: while (psi_u.last().unwrap() - psi_start).abs() < span - 1e-12 {
        if nodes.len() >= ctrl.max_nodes {
            diagnostic = Some(format!(
                "node limit {} reached at psi = {:.6}",
                ctrl.max_nodes,
                psi_u.last().unwrap()
            ));
            break;
        }
        let last = nodes.last().unwrap().clone();
        let last_psi = *psi_u.last().unwrap();

        if !arclength_mode {
            // Natural stepping with secant predictor.
            let remaining = span - (last_psi - psi_start).abs();
            let dpsi = dir * step.min(remaining);
            let target = last_psi + dpsi;
            let (gx, gw) = if nodes.len() >= 2 {
                let prev = &nodes[nodes.len() - 2];
                let prev_psi = psi_u[psi_u.len() - 2];
                let denom = last_psi - prev_psi;
                if denom.abs() > 1e-14 {
                    let s = dpsi / denom;
                    (
                        &last.x0 + (&last.x0 - &prev.x0) * s,
                        last.omega + (last.omega - prev.omega) * s,
                    )
                } else {
                    (last.x0.clone(), last.omega)
                }
            } else {
                (last.x0.clone(), last.omega)
            };

            match solve_cw_inner(model, target, (&gx, gw)) {
                Ok(out) => {
                    let slope = ((out.point.omega - last.omega) / dpsi).abs();
                    nodes.push(out.point);
                    psi_u.push(target);
                    if slope > ctrl.fold_slope {
                        arclength_mode = true;
                        prev_tangent = None;
                    } else if out.iterations <= 4 {
                        step = (step * 1.3).min(ctrl.max_step);
                    } else if out.iterations >= 10 {
                        step *= 0.7;
                    }
                }
                Err(_) => {
                    step *= 0.5;
                    if step < ctrl.min_step {
                        // Give pseudo-arclength a chance before stalling.
                        arclength_mode = true;
                        prev_tangent = None;
                        step = ctrl.initial_step;
                    }
                }
            }
        } else {
            // Pseudo-arclength in z = (x0, omega, psi).
            let tangent =
                match palc_tangent(model, &last, prev_tangent.as_ref(), dir) {
                    Ok(t) => t,
                    Err(e) => {
                        diagnostic = Some(format!("tangent failed: {e}"));
                        break 'outer;
                    }
                };
            let ds = step.max(ctrl.min_step * 10.0);
            match palc_step(model, &last, last_psi, &tangent, ds) {
                Ok((pt, new_psi_u)) => {
                    // A reversal of the psi direction marks a fold: new piece.
                    let dpsi = new_psi_u - last_psi;
                    if dpsi * dir < 0.0 && piece_starts.last() != Some(&nodes.len()) {
                        piece_starts.push(nodes.len());
                    }
                    nodes.push(pt);
                    psi_u.push(new_psi_u);
                    prev_tangent = Some(tangent);
                    step = (step * 1.2).min(ctrl.max_step);
                    // Return to natural stepping once psi moves freely again.
                    if !ctrl.force_arclength && (dpsi / ds).abs() > 0.3 {
                        arclength_mode = false;
                    }
                }
                Err(_) => {
                    step *= 0.5;
                    if step < ctrl.min_step {
                        diagnostic = Some(format!(
                            "stall at psi = {last_psi:.6}: pseudo-arclength floor"
                        ));
                        break 'outer;
                    }
                }
            }
        }
    }

    // Land exactly on psi_end when we got there.
    if diagnostic.is_none() {
        let last = nodes.last().unwrap().clone();
        if let Ok(pt) = solve_cw(model, psi_end, (&last.x0, last.omega)) {
            let last_u = *psi_u.last().unwrap();
            if (last_u - psi_end).abs() > 1e-12 {
                nodes.push(pt);
                psi_u.push(psi_end);
            } else {
                let k = nodes.len() - 1;
                nodes[k] = pt;
            }
        }
    }

    let closed = {
        let full_circle = (span - 2.0 * std::f64::consts::PI).abs() < 1e-9;
        if full_circle && nodes.len() >= 2 && diagnostic.is_none() {
            let first = &nodes[0];
            let last = nodes.last().unwrap();
            (&first.x0 - &last.x0).norm() <= 1e-6 * (1.0 + first.x0.norm())
                && (first.omega - last.omega).abs() <= 1e-6
        } else {
            false
        }
    };

    Ok(PrimaryBranch {
        nodes,
        piece_starts,
        closed,
        diagnostic,
    })
}

/// Tangent of the solution curve in `(x0, omega, psi)` via a bordered solve.
fn palc_tangent(
    model: &EquivariantModel,
    point: &CWPoint,
    prev: Option<&DVector<f64>>,
    dir: f64,
) -> Result<DVector<f64>> {
    let n = model.dim();
    let jac = palc_jacobian(model, point)?;
    // Bordered system: [J; c^T] t = e_{n+2} with c the previous tangent (or
    // the psi axis on the first step).
    let mut c = DVector::zeros(n + 2);
    match prev {
        Some(t) => c.copy_from(t),
        None => c[n + 1] = dir,
    }
    let mut bordered = DMatrix::zeros(n + 2, n + 2);
    bordered.view_mut((0, 0), (n + 1, n + 2)).copy_from(&jac);
    for j in 0..(n + 2) {
        bordered[(n + 1, j)] = c[j];
    }
    let mut rhs = DVector::zeros(n + 2);
    rhs[n + 1] = 1.0;
    let t = bordered
        .lu()
        .solve(&rhs)
        .ok_or_else(|| EqwaveError::RankDeficient {
            context: "pseudo-arclength tangent".into(),
        })?;
    let norm = t.norm();
    if norm < 1e-14 || !norm.is_finite() {
        return Err(EqwaveError::RankDeficient {
            context: "degenerate tangent".into(),
        });
    }
    let mut t = t / norm;
    if let Some(p) = prev {
        if t.dot(p) < 0.0 {
            t = -t;
        }
    } else if t[n + 1] * dir < 0.0 {
        t = -t;
    }
    Ok(t)
}

/// Extended Jacobian `(n+1) x (n+2)` of the CW system w.r.t. `(x0, omega, psi)`.
fn palc_jacobian(model: &EquivariantModel, point: &CWPoint) -> Result<DMatrix<f64>> {
    let n = model.dim();
    let a = model.generator().matrix().clone();
    let rot = model.generator().action(point.psi);
    let jm = model.jacobians(&point.x0, &(&rot * &point.x0))?;
    let mut jac = DMatrix::zeros(n + 1, n + 2);
    let dx = &jm.m1 + &jm.d2 * &rot - &a * point.omega;
    jac.view_mut((0, 0), (n, n)).copy_from(&dx);
    let domega = -(&a * &point.x0);
    jac.view_mut((0, n), (n, 1)).copy_from(&domega);
    let dpsi = &jm.d2 * (&a * (&rot * &point.x0));
    jac.view_mut((0, n + 1), (n, 1)).copy_from(&dpsi);
    let b = model.pinning();
    for j in 0..n {
        jac[(n, j)] = b[j];
    }
    Ok(jac)
}

fn palc_step(
    model: &EquivariantModel,
    point: &CWPoint,
    psi_u: f64,
    tangent: &DVector<f64>,
    ds: f64,
) -> Result<(CWPoint, f64)> {
    let n = model.dim();
    let b = model.pinning().clone();
    let mut z = DVector::zeros(n + 2);
    z.rows_mut(0, n).copy_from(&point.x0);
    z[n] = point.omega;
    z[n + 1] = psi_u;
    let z_pred = &z + tangent * ds;
    z = z_pred.clone();

    for iter in 0..MAX_NEWTON_ITERS {
        let x0 = z.rows(0, n).clone_owned();
        let omega = z[n];
        let psi = z[n + 1];
        let rot = model.generator().action(psi);
        let r = residual_fixed_psi(model, &rot, &x0, omega)?;
        let mut full = DVector::zeros(n + 2);
        full.rows_mut(0, n).copy_from(&r);
        full[n] = b.dot(&x0);
        full[n + 1] = tangent.dot(&(&z - &z_pred));

        let scale = 1.0 + x0.norm();
        if full.rows(0, n).norm() <= NEWTON_TOL * scale
            && full[n].abs() <= PIN_TOL * scale
            && full[n + 1].abs() <= 1e-10 * (1.0 + ds)
        {
            let pt = CWPoint {
                residual_norm: full.rows(0, n).norm(),
                x0,
                omega,
                psi: wrap_angle(psi),
            };
            return Ok((pt, psi));
        }

        let probe = CWPoint {
            x0: x0.clone(),
            omega,
            psi,
            residual_norm: 0.0,
        };
        let jac_ext = palc_jacobian(model, &probe)?;
        let mut jac = DMatrix::zeros(n + 2, n + 2);
        jac.view_mut((0, 0), (n + 1, n + 2)).copy_from(&jac_ext);
        for j in 0..(n + 2) {
            jac[(n + 1, j)] = tangent[j];
        }
        let delta = jac
            .lu()
            .solve(&(-&full))
            .ok_or_else(|| EqwaveError::RankDeficient {
                context: "pseudo-arclength corrector".into(),
            })?;
        z += &delta;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(EqwaveError::NoConvergence {
                iterations: iter,
                residual: full.norm(),
                last_iterate: z.iter().copied().collect(),
            });
        }
    }
    Err(EqwaveError::NoConvergence {
        iterations: MAX_NEWTON_ITERS,
        residual: f64::NAN,
        last_iterate: z.iter().copied().collect(),
    })
}

/// Lift increment target after refinement (radians).
const LIFT_TARGET: f64 = std::f64::consts::PI / 4.0;
/// Lift increment beyond which a branch is rejected as under-resolved.
const LIFT_HARD_LIMIT: f64 = std::f64::consts::PI;

/// Finds every CW of the branch coexisting at `(tau, phi)` by scanning the
/// continuous lift `psi + Omega(psi) tau` for crossings of `phi mod 2 pi`,
/// then Newton-refining each candidate at the fixed parameters.
pub fn enumerate_cws(
    model: &EquivariantModel,
    branch: &PrimaryBranch,
    tau: f64,
    phi: f64,
) -> Result<CWCountReport> {
    if tau < 0.0 {
        return Err(EqwaveError::Domain("tau must be >= 0".into()));
    }
    if branch.nodes.len() < 2 {
        return Err(EqwaveError::Domain(
            "branch needs at least two nodes".into(),
        ));
    }

    // Refine each smooth piece until lift increments are below the target.
    let mut pieces: Vec<Vec<(f64, CWPoint)>> = Vec::new();
    for (_, piece) in branch.pieces() {
        if piece.len() < 2 {
            continue;
        }
        let mut refined: Vec<(f64, CWPoint)> = unwrap_piece(piece);
        let mut rounds = 0;
        loop {
            let mut worst: f64 = 0.0;
            let mut inserts: Vec<(usize, f64, CWPoint)> = Vec::new();
            for i in 0..refined.len() - 1 {
                let (p0, n0) = (&refined[i].0, &refined[i].1);
                let (p1, n1) = (&refined[i + 1].0, &refined[i + 1].1);
                let l0 = p0 + n0.omega * tau;
                let l1 = p1 + n1.omega * tau;
                let d = (l1 - l0).abs();
                worst = worst.max(d);
                if d > LIFT_TARGET {
                    let pm = 0.5 * (p0 + p1);
                    let gx = (&n0.x0 + &n1.x0) * 0.5;
                    let gw = 0.5 * (n0.omega + n1.omega);
                    let sol = solve_cw(model, pm, (&gx, gw)).map_err(|_| {
                        EqwaveError::UnderResolved {
                            delta: d,
                            max: LIFT_HARD_LIMIT,
                        }
                    })?;
                    inserts.push((i + 1, pm, sol));
                }
            }
            if inserts.is_empty() {
                break;
            }
            rounds += 1;
            if rounds > 16 {
                if worst > LIFT_HARD_LIMIT {
                    return Err(EqwaveError::UnderResolved {
                        delta: worst,
                        max: LIFT_HARD_LIMIT,
                    });
                }
                break;
            }
            for (offset, (idx, pm, sol)) in inserts.into_iter().enumerate() {
                refined.insert(idx + offset, (pm, sol));
            }
        }
        pieces.push(refined);
    }

    // Scan each refined piece for lift crossings of phi + 2 pi m.
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut found: Vec<CWPoint> = Vec::new();
    for refined in &pieces {
        for i in 0..refined.len() - 1 {
            let (p0, n0) = (&refined[i].0, &refined[i].1);
            let (p1, n1) = (&refined[i + 1].0, &refined[i + 1].1);
            let l0 = p0 + n0.omega * tau;
            let l1 = p1 + n1.omega * tau;
            let (lo, hi) = if l0 <= l1 { (l0, l1) } else { (l1, l0) };
            let m_lo = ((lo - phi) / two_pi).ceil() as i64;
            let m_hi = ((hi - phi) / two_pi).floor() as i64;
            for m in m_lo..=m_hi {
                let level = phi + two_pi * m as f64;
                // Linear inverse interpolation for the initial guess, then a
                // full Newton solve at fixed (tau, phi).
                let s = if (l1 - l0).abs() > 1e-300 {
                    ((level - l0) / (l1 - l0)).clamp(0.0, 1.0)
                } else {
                    0.5
                };
                let gx = &n0.x0 + (&n1.x0 - &n0.x0) * s;
                let gw = n0.omega + (n1.omega - n0.omega) * s;
                if let Ok(cw) = solve_cw_at_params(model, tau, phi, (&gx, gw)) {
                    let duplicate = found.iter().any(|c| {
                        let dpsi = (c.psi - cw.psi).abs();
                        let dpsi = dpsi.min(two_pi - dpsi);
                        dpsi < 1e-6
                            && (c.omega - cw.omega).abs() < 1e-6
                            && (&c.x0 - &cw.x0).norm() < 1e-5
                    });
                    if !duplicate {
                        found.push(cw);
                    }
                }
            }
        }
    }

    // Count data from the refined nodes.
    let omega_max = pieces
        .iter()
        .flatten()
        .map(|(_, n)| n.omega)
        .fold(f64::NEG_INFINITY, f64::max);
    let omega_min = pieces
        .iter()
        .flatten()
        .map(|(_, n)| n.omega)
        .fold(f64::INFINITY, f64::min);
    let tv: f64 = pieces
        .iter()
        .map(|p| {
            p.windows(2)
                .map(|w| (w[1].1.omega - w[0].1.omega).abs())
                .sum::<f64>()
        })
        .sum();
    let k_coeff = tv / two_pi;
    let predicted = predicted_interval(k_coeff, tau, branch.closed);

    Ok(CWCountReport {
        k_coeff,
        omega_max,
        omega_min,
        predicted,
        found: found.len(),
        cws: found,
    })
}

/// `K` from the total variation of omega along the branch together with the
/// `floor(K tau) +- 1` interval (clamped below at the per-sheet minimum).
pub fn predicted_count(branch: &PrimaryBranch, tau: f64) -> (f64, (i64, i64)) {
    let k = branch.omega_total_variation() / (2.0 * std::f64::consts::PI);
    (k, predicted_interval(k, tau, branch.closed))
}

fn predicted_interval(k: f64, tau: f64, closed: bool) -> (i64, i64) {
    let base = (k * tau).floor() as i64;
    let min_count = if closed { 1 } else { 0 };
    ((base - 1).max(min_count), (base + 1).max(min_count))
}

/// Reconstructs a continuous (unwrapped) psi sequence for one smooth piece.
fn unwrap_piece(piece: &[CWPoint]) -> Vec<(f64, CWPoint)> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out: Vec<(f64, CWPoint)> = Vec::with_capacity(piece.len());
    let mut prev = piece[0].psi;
    out.push((prev, piece[0].clone()));
    for node in &piece[1..] {
        let mut d = node.psi - prev;
        while d > std::f64::consts::PI {
            d -= two_pi;
        }
        while d < -std::f64::consts::PI {
            d += two_pi;
        }
        let unwrapped = out.last().unwrap().0 + d;
        prev = node.psi;
        out.push((unwrapped, node.clone()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn lk(eta: f64, tau: f64, phi: f64) -> EquivariantModel {
        let params = BTreeMap::from([
            ("alpha".to_string(), 2.0),
            ("eta".to_string(), eta),
            ("J".to_string(), -0.5),
            ("epsilon".to_string(), 0.05),
        ]);
        crate::model::lang_kobayashi(&params, tau, phi).unwrap()
    }

    fn sl(eta: f64) -> EquivariantModel {
        let params = BTreeMap::from([
            ("alpha".to_string(), 1.0),
            ("beta".to_string(), 1.0),
            ("gamma".to_string(), -1.0),
            ("eta".to_string(), eta),
        ]);
        crate::model::stuart_landau(&params, 1.0, 0.0).unwrap()
    }

    fn lk_guess() -> (DVector<f64>, f64) {
        (DVector::from_vec(vec![0.8, 0.0, 0.0]), 0.0)
    }

    /// Closed-form ECM branch: N0 = -eta cos psi, omega = eta (sin psi -
    /// alpha cos psi), E0 = sqrt(-(J + N0)/(2 N0 + 1)).
    fn ecm_exact(eta: f64, alpha: f64, j: f64, psi: f64) -> (DVector<f64>, f64) {
        let n0 = -eta * psi.cos();
        let omega = eta * (psi.sin() - alpha * psi.cos());
        let e0 = (-(j + n0) / (2.0 * n0 + 1.0)).sqrt();
        (DVector::from_vec(vec![e0, 0.0, n0]), omega)
    }

    #[test]
    fn solve_cw_matches_ecm_closed_form_without_feedback() {
        let model = lk(0.0, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        for psi in [0.0, 1.0, 4.0] {
            let cw = solve_cw(&model, psi, (&gx, gw)).unwrap();
            assert!((cw.x0[0] - 0.5_f64.sqrt()).abs() < 1e-10);
            assert!(cw.x0[1].abs() < 1e-12);
            assert!(cw.x0[2].abs() < 1e-10);
            assert!(cw.omega.abs() < 1e-10);
        }
    }

    #[test]
    fn solve_cw_matches_ecm_closed_form_with_feedback() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();

        let cw = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        assert!((cw.x0[2] + 0.1).abs() < 1e-10, "N0 {}", cw.x0[2]);
        assert!((cw.omega + 0.2).abs() < 1e-10, "omega {}", cw.omega);
        assert!((cw.x0[0] - 0.75_f64.sqrt()).abs() < 1e-10);

        let cw = solve_cw(&model, std::f64::consts::FRAC_PI_2, (&gx, gw)).unwrap();
        assert!(cw.x0[2].abs() < 1e-10);
        assert!((cw.omega - 0.1).abs() < 1e-10);
        assert!((cw.x0[0] - 0.5_f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn cw_point_invariants_hold() {
        let model = lk(0.1, 2.0, 0.7);
        let (gx, gw) = lk_guess();
        let cw = solve_cw(&model, 1.3, (&gx, gw)).unwrap();
        let rot = model.generator().action(cw.psi);
        let res = model.eval_rhs(&cw.x0, &(rot * &cw.x0)).unwrap()
            - model.generator().apply(&cw.x0) * cw.omega;
        assert!(res.norm() <= 1e-10 * (1.0 + cw.x0.norm()));
        assert!(model.pinning().dot(&cw.x0).abs() <= 1e-12);
    }

    #[test]
    fn branch_matches_closed_form_over_full_circle() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        assert!(branch.closed, "diag {:?}", branch.diagnostic);
        assert!(branch.nodes.len() > 40);
        for node in &branch.nodes {
            let (x_ref, w_ref) = ecm_exact(0.1, 2.0, -0.5, node.psi);
            assert!(
                (node.omega - w_ref).abs() < 1e-8,
                "omega mismatch at psi {}",
                node.psi
            );
            assert!((&node.x0 - &x_ref).norm() < 1e-8);
        }
    }

    #[test]
    fn branch_with_zero_feedback_is_flat() {
        let model = lk(0.0, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        let (lo, hi) = branch.omega_range();
        assert!(hi - lo < 1e-10);
        let x0 = &branch.nodes[0].x0;
        for node in &branch.nodes {
            assert!((&node.x0 - x0).norm() < 1e-9);
        }
    }

    #[test]
    fn forced_arclength_reproduces_natural_branch() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let ctrl = StepControl {
            force_arclength: true,
            initial_step: 0.05,
            ..StepControl::default()
        };
        let branch =
            continue_primary(&model, &seed, 2.0 * std::f64::consts::PI, &ctrl).unwrap();
        assert!(branch.diagnostic.is_none(), "{:?}", branch.diagnostic);
        for node in branch.nodes.iter().step_by(5) {
            let (x_ref, w_ref) = ecm_exact(0.1, 2.0, -0.5, node.psi);
            assert!((node.omega - w_ref).abs() < 1e-7);
            assert!((&node.x0 - &x_ref).norm() < 1e-7);
        }
    }

    #[test]
    fn stuart_landau_branch_matches_split_oracle() {
        // Real/imaginary split: 0 = alpha + gamma r^2 + eta cos psi,
        // omega = beta + eta sin psi  (with alpha=1, gamma=-1).
        let model = sl(0.05);
        let guess = (DVector::from_vec(vec![1.0, 0.0]), 1.0);
        let seed = solve_cw(&model, 0.0, (&guess.0, guess.1)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        assert!(branch.closed);
        for node in &branch.nodes {
            let r2 = 1.0 + 0.05 * node.psi.cos();
            let w = 1.0 + 0.05 * node.psi.sin();
            assert!((node.omega - w).abs() < 1e-9);
            assert!((node.x0.norm_squared() - r2).abs() < 1e-9);
            assert!(node.residual_norm <= 1e-10 * (1.0 + node.x0.norm()));
        }
    }

    #[test]
    fn reappearance_round_trip() {
        let model = lk(0.1, 0.0, 0.0);
        let (gx, gw) = lk_guess();
        let cw = solve_cw(&model, 0.9, (&gx, gw)).unwrap();
        for tau in [0.0, 3.0, 10.0, 47.5] {
            let phi = reappearance_phi(&cw, tau);
            let re = solve_cw_at_params(&model, tau, phi, (&cw.x0, cw.omega)).unwrap();
            assert!((re.omega - cw.omega).abs() < 1e-9);
            assert!((&re.x0 - &cw.x0).norm() < 1e-9);
        }
    }

    #[test]
    fn reappearance_phi_values() {
        let cw = CWPoint {
            x0: DVector::zeros(3),
            omega: 0.0,
            psi: 0.3,
            residual_norm: 0.0,
        };
        assert!((reappearance_phi(&cw, 12.0) - 0.3).abs() < 1e-15);
        let cw = CWPoint {
            x0: DVector::zeros(3),
            omega: -0.2,
            psi: 0.0,
            residual_norm: 0.0,
        };
        let expect = (-2.0_f64).rem_euclid(2.0 * std::f64::consts::PI);
        assert!((reappearance_phi(&cw, 10.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn count_flat_branch_any_parameters() {
        let model = lk(0.0, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        for (tau, phi) in [(0.0, 0.4), (25.0, 2.0), (100.0, 5.5)] {
            let report = enumerate_cws(&model, &branch, tau, phi).unwrap();
            assert_eq!(report.found, 1, "tau {tau} phi {phi}");
            assert!(report.k_coeff < 1e-10);
        }
    }

    #[test]
    fn count_matches_dense_scan_at_moderate_delay() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        let tau = 30.0;
        for phi in [0.0, 1.0, 2.5, 4.0] {
            let report = enumerate_cws(&model, &branch, tau, phi).unwrap();
            // Dense closed-form scan of psi + omega(psi) tau = phi mod 2 pi.
            let alpha = 2.0;
            let eta = 0.1;
            let m = 400_000;
            let two_pi = 2.0 * std::f64::consts::PI;
            let lift = |psi: f64| psi + eta * (psi.sin() - alpha * psi.cos()) * tau;
            let mut count = 0;
            for i in 0..m {
                let p0 = two_pi * i as f64 / m as f64;
                let p1 = two_pi * (i + 1) as f64 / m as f64;
                let (l0, l1) = (lift(p0), lift(p1));
                let (lo, hi) = if l0 <= l1 { (l0, l1) } else { (l1, l0) };
                let m_lo = ((lo - phi) / two_pi).ceil() as i64;
                let m_hi = (((hi - phi) / two_pi) - 1e-15).floor() as i64;
                if m_hi >= m_lo {
                    count += (m_hi - m_lo + 1) as usize;
                }
            }
            assert_eq!(report.found, count, "phi = {phi}");
        }
    }

    #[test]
    fn tau_zero_single_cw_at_psi_equals_phi() {
        let model = lk(0.1, 0.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        let phi = 2.2;
        let report = enumerate_cws(&model, &branch, 0.0, phi).unwrap();
        assert_eq!(report.found, 1);
        assert!((report.cws[0].psi - phi).abs() < 1e-9);
    }

    #[test]
    fn predicted_count_examples() {
        let mk = |omega: f64, psi: f64| CWPoint {
            x0: DVector::zeros(2),
            omega,
            psi,
            residual_norm: 0.0,
        };
        // Constant omega: K = 0, closed sheet keeps at least one CW.
        let flat: Vec<CWPoint> = (0..=64)
            .map(|i| mk(0.0, 2.0 * std::f64::consts::PI * i as f64 / 64.0))
            .collect();
        let branch = PrimaryBranch::from_nodes(flat, true);
        let (k, interval) = predicted_count(&branch, 50.0);
        assert!(k.abs() < 1e-15);
        assert_eq!(interval, (1, 1));

        // Synthetic non-monotone branch omega = sin(2 psi): TV = 8.
        let wiggly: Vec<CWPoint> = (0..=4096)
            .map(|i| {
                let psi = 2.0 * std::f64::consts::PI * i as f64 / 4096.0;
                mk((2.0 * psi).sin(), psi)
            })
            .collect();
        let branch = PrimaryBranch::from_nodes(wiggly, true);
        let (k, _) = predicted_count(&branch, 1.0);
        assert!(
            (k - 8.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-4,
            "K = {k}"
        );
        assert!((k - 1.2732).abs() < 1e-3);
    }

    #[test]
    fn lk_count_coefficient_matches_formula() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let branch = continue_primary(
            &model,
            &seed,
            2.0 * std::f64::consts::PI,
            &StepControl::default(),
        )
        .unwrap();
        // Monotone sub-branch K = (omega_max - omega_min)/2pi
        //                       = eta sqrt(1 + alpha^2)/pi; the sampled
        // extremes miss the true peaks by O(step^2).
        let (lo, hi) = branch.omega_range();
        let k_piece = (hi - lo) / (2.0 * std::f64::consts::PI);
        let expect = 0.1 * 5.0_f64.sqrt() / std::f64::consts::PI;
        assert!((k_piece - expect).abs() < 2e-3, "K {k_piece} vs {expect}");
    }

    #[test]
    fn pinning_invariance_same_group_orbit() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let cw1 = solve_cw(&model, 0.8, (&gx, gw)).unwrap();
        let mut model2 = lk(0.1, 1.0, 0.0);
        model2
            .set_pinning(DVector::from_vec(vec![1.0, 1.0, 0.0]))
            .unwrap();
        let g2 = (DVector::from_vec(vec![0.6, -0.6, 0.0]), cw1.omega);
        let cw2 = solve_cw(&model2, 0.8, (&g2.0, g2.1)).unwrap();
        let d = crate::sim::orbit_distance(&model, &cw1.x0, &cw2.x0);
        assert!(d <= 1e-8, "orbit distance {d}");
        assert!((cw1.omega - cw2.omega).abs() < 1e-9);
    }

    #[test]
    fn kernel_pinning_rejected() {
        let mut model = lk(0.1, 1.0, 0.0);
        assert!(model
            .set_pinning(DVector::from_vec(vec![0.0, 0.0, 1.0]))
            .is_err());
    }

    #[test]
    fn grid_refinement_does_not_change_count() {
        let model = lk(0.1, 1.0, 0.0);
        let (gx, gw) = lk_guess();
        let seed = solve_cw(&model, 0.0, (&gx, gw)).unwrap();
        let coarse_ctrl = StepControl {
            initial_step: 0.15,
            max_step: 0.3,
            ..StepControl::default()
        };
        let fine_ctrl = StepControl {
            initial_step: 0.01,
            max_step: 0.03,
            ..StepControl::default()
        };
        let b1 = continue_primary(&model, &seed, 2.0 * std::f64::consts::PI, &coarse_ctrl)
            .unwrap();
        let b2 = continue_primary(&model, &seed, 2.0 * std::f64::consts::PI, &fine_ctrl)
            .unwrap();
        for (tau, phi) in [(20.0, 0.3), (50.0, 3.1)] {
            let r1 = enumerate_cws(&model, &b1, tau, phi).unwrap();
            let r2 = enumerate_cws(&model, &b2, tau, phi).unwrap();
            assert_eq!(r1.found, r2.found);
        }
    }

    #[test]
    fn newton_failure_carries_last_iterate() {
        let model = lk(0.1, 1.0, 0.0);
        let bad = (DVector::from_vec(vec![1e7, -1e7, 1e7]), 1e7);
        match solve_cw(&model, 0.0, (&bad.0, bad.1)) {
            Err(EqwaveError::NoConvergence { last_iterate, .. }) => {
                assert_eq!(last_iterate.len(), 4);
            }
            Err(EqwaveError::RankDeficient { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
