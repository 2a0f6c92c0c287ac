//! S1-equivariant delay models: group generator, right-hand sides and the
//! built-in Lang-Kobayashi and Stuart-Landau systems.
//!
//! The governing equation is `x'(t) = f(x(t), e^{A phi} x(t - tau))` where
//! `f` commutes with the rotation `e^{A theta}`. By convention `f` receives
//! the *already rotated* delayed argument; solvers apply `e^{A phi}` (and its
//! rotating-frame variants) themselves, so the phase/delay reappearance
//! algebra lives in one place.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EqwaveError, Result};

/// Tolerance for `exp(2 pi A) = I`, i.e. for the action being a true S1
/// representation.
const REPRESENTATION_TOL: f64 = 1e-12;

/// Skew-symmetric generator of the group action.
///
/// The stored matrix satisfies `A^T = -A` exactly: construction symmetrizes
/// the strict triangles and zeroes the diagonal after checking the input was
/// already skew to round-off.
#[derive(Clone, Debug)]
pub struct GroupGenerator {
    a: DMatrix<f64>,
}

impl GroupGenerator {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(EqwaveError::Config(format!(
                "generator must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let scale = 1.0 + a.amax();
        let mut skew = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    if a[(i, i)].abs() > 1e-12 * scale {
                        return Err(EqwaveError::Config(
                            "generator diagonal must vanish (A^T = -A)".into(),
                        ));
                    }
                } else {
                    if (a[(i, j)] + a[(j, i)]).abs() > 1e-12 * scale {
                        return Err(EqwaveError::Config(
                            "generator is not skew-symmetric".into(),
                        ));
                    }
                    let v = 0.5 * (a[(i, j)] - a[(j, i)]);
                    skew[(i, j)] = v;
                    skew[(j, i)] = -v;
                }
            }
        }
        let gen = Self { a: skew };
        let full_turn = gen.action(2.0 * std::f64::consts::PI);
        let dev = (&full_turn - DMatrix::<f64>::identity(n, n)).amax();
        if dev > REPRESENTATION_TOL * 10.0 {
            return Err(EqwaveError::Config(format!(
                "exp(2 pi A) differs from identity by {dev:.3e}; \
                 the action is not a true S1 representation"
            )));
        }
        Ok(gen)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Group element `exp(A theta)`.
    pub fn action(&self, theta: f64) -> DMatrix<f64> {
        if !theta.is_finite() {
            panic!("group action requires a finite angle");
        }
        (self.a.clone() * theta).exp()
    }

    /// Tangent direction `A x` of the group orbit through `x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    /// The first coordinate pair rotated by the action, used for amplitude
    /// and phase observables. Falls back to (0, 1) for a zero generator.
    pub fn rotation_plane(&self) -> (usize, usize) {
        let n = self.dim();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.a[(i, j)].abs() > 1e-12 {
                    return (i, j);
                }
            }
        }
        (0, 1.min(n.saturating_sub(1)))
    }
}

/// First and second partial derivative matrices of `f` at a point.
#[derive(Clone, Debug)]
pub struct ModelJacobians {
    /// `D1 f(x, y)`.
    pub m1: DMatrix<f64>,
    /// `D2 f(x, y)` (not multiplied by any rotation).
    pub d2: DMatrix<f64>,
}

pub type RhsFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;
pub type JacFn =
    dyn Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync;

/// An S1-equivariant delay model.
///
/// Immutable after construction; evaluation is pure, so models can be shared
/// read-only across parallel workers.
#[derive(Clone)]
pub struct EquivariantModel {
    name: String,
    generator: Arc<GroupGenerator>,
    rhs: Arc<RhsFn>,
    analytic_jacobians: Option<Arc<JacFn>>,
    params: BTreeMap<String, f64>,
    tau: f64,
    phi: f64,
    pinning: DVector<f64>,
}

impl fmt::Debug for EquivariantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EquivariantModel")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("params", &self.params)
            .field("tau", &self.tau)
            .field("phi", &self.phi)
            .finish()
    }
}

impl EquivariantModel {
    pub fn new(
        name: impl Into<String>,
        generator: GroupGenerator,
        rhs: Arc<RhsFn>,
        analytic_jacobians: Option<Arc<JacFn>>,
        params: BTreeMap<String, f64>,
        tau: f64,
        phi: f64,
    ) -> Result<Self> {
        if tau < 0.0 || !tau.is_finite() {
            return Err(EqwaveError::Config(format!("delay tau must be >= 0, got {tau}")));
        }
        if !phi.is_finite() {
            return Err(EqwaveError::Config("phase phi must be finite".into()));
        }
        let pinning = default_pinning(&generator);
        Ok(Self {
            name: name.into(),
            generator: Arc::new(generator),
            rhs,
            analytic_jacobians,
            params,
            tau,
            phi: crate::linalg::wrap_angle(phi),
            pinning,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn generator(&self) -> &GroupGenerator {
        &self.generator
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Returns a copy with different `(tau, phi)`; the vector field itself is
    /// parameter-frozen at construction.
    pub fn with_delay_phase(&self, tau: f64, phi: f64) -> Result<Self> {
        let mut m = self.clone();
        if tau < 0.0 || !tau.is_finite() {
            return Err(EqwaveError::Config(format!("delay tau must be >= 0, got {tau}")));
        }
        m.tau = tau;
        m.phi = crate::linalg::wrap_angle(phi);
        Ok(m)
    }

    /// Pinning vector `b` for the phase condition `b^T x0 = 0`.
    pub fn pinning(&self) -> &DVector<f64> {
        &self.pinning
    }

    pub fn set_pinning(&mut self, b: DVector<f64>) -> Result<()> {
        if self.generator.apply(&b).norm() < 1e-12 * (1.0 + b.norm()) {
            return Err(EqwaveError::Config(
                "pinning vector must not lie in ker A".into(),
            ));
        }
        self.pinning = b;
        Ok(())
    }

    /// Evaluates `f(x, y)`. The delayed argument `y` is expected to be
    /// rotated by the caller.
    pub fn eval_rhs(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        let out = (self.rhs)(x, y);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(EqwaveError::NonFinite {
                context: format!("rhs of model '{}'", self.name),
            });
        }
        Ok(out)
    }

    /// `D1 f` and `D2 f` at `(x, y)`: analytic when the model provides them,
    /// otherwise central differences with step `1e-6 (1 + |arg|)`.
    pub fn jacobians(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<ModelJacobians> {
        let (m1, d2) = if let Some(jac) = &self.analytic_jacobians {
            jac(x, y)
        } else {
            let n = self.dim();
            let mut m1 = DMatrix::zeros(n, n);
            let mut d2 = DMatrix::zeros(n, n);
            let hx = 1e-6 * (1.0 + x.norm());
            let hy = 1e-6 * (1.0 + y.norm());
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += hx;
                xm[j] -= hx;
                let col = ((self.rhs)(&xp, y) - (self.rhs)(&xm, y)) / (2.0 * hx);
                m1.set_column(j, &col);

                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += hy;
                ym[j] -= hy;
                let col = ((self.rhs)(x, &yp) - (self.rhs)(x, &ym)) / (2.0 * hy);
                d2.set_column(j, &col);
            }
            (m1, d2)
        };
        if m1.iter().chain(d2.iter()).any(|v| !v.is_finite()) {
            return Err(EqwaveError::NonFinite {
                context: format!("jacobians of model '{}'", self.name),
            });
        }
        Ok(ModelJacobians { m1, d2 })
    }
}

/// Pinning along the second axis of the rotation plane. For Lang-Kobayashi
/// this is `b = (0, 1, 0)^T`, which fixes `Im E0 = 0`.
fn default_pinning(generator: &GroupGenerator) -> DVector<f64> {
    let (_, j) = generator.rotation_plane();
    let mut b = DVector::zeros(generator.dim());
    b[j] = 1.0;
    b
}

fn require(params: &BTreeMap<String, f64>, key: &str, model: &str) -> Result<f64> {
    params.get(key).copied().ok_or_else(|| {
        EqwaveError::Config(format!("model '{model}' requires parameter '{key}'"))
    })
}

/// Lang-Kobayashi laser in real coordinates `(Re E, Im E, N)`.
///
/// `E' = (1 + i alpha) N E + eta Y`, `N' = epsilon [J + N + (2N + 1) |E|^2]`
/// with `Y` the rotated delayed field handed in by the solver.
pub fn lang_kobayashi(
    params: &BTreeMap<String, f64>,
    tau: f64,
    phi: f64,
) -> Result<EquivariantModel> {
    let alpha = require(params, "alpha", "lang_kobayashi")?;
    let eta = require(params, "eta", "lang_kobayashi")?;
    let j_pump = require(params, "J", "lang_kobayashi")?;
    let eps = require(params, "epsilon", "lang_kobayashi")?;

    let a = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    );
    let generator = GroupGenerator::new(a)?;

    let rhs = Arc::new(move |x: &DVector<f64>, y: &DVector<f64>| {
        let (e1, e2, n) = (x[0], x[1], x[2]);
        let r2 = e1 * e1 + e2 * e2;
        DVector::from_vec(vec![
            n * (e1 - alpha * e2) + eta * y[0],
            n * (alpha * e1 + e2) + eta * y[1],
            eps * (j_pump + n + (2.0 * n + 1.0) * r2),
        ])
    });

    let jac = Arc::new(move |x: &DVector<f64>, _y: &DVector<f64>| {
        let (e1, e2, n) = (x[0], x[1], x[2]);
        let r2 = e1 * e1 + e2 * e2;
        let m1 = DMatrix::from_row_slice(
            3,
            3,
            &[
                n,
                -alpha * n,
                e1 - alpha * e2,
                alpha * n,
                n,
                alpha * e1 + e2,
                2.0 * eps * (2.0 * n + 1.0) * e1,
                2.0 * eps * (2.0 * n + 1.0) * e2,
                eps * (1.0 + 2.0 * r2),
            ],
        );
        let d2 = DMatrix::from_row_slice(
            3,
            3,
            &[eta, 0.0, 0.0, 0.0, eta, 0.0, 0.0, 0.0, 0.0],
        );
        (m1, d2)
    });

    EquivariantModel::new(
        "lang_kobayashi",
        generator,
        rhs,
        Some(jac),
        params.clone(),
        tau,
        phi,
    )
}

/// Stuart-Landau oscillator with delayed feedback in real coordinates
/// `(Re z, Im z)`: `z' = (alpha + i beta + gamma |z|^2) z + eta Y`.
pub fn stuart_landau(
    params: &BTreeMap<String, f64>,
    tau: f64,
    phi: f64,
) -> Result<EquivariantModel> {
    let alpha = require(params, "alpha", "stuart_landau")?;
    let beta = require(params, "beta", "stuart_landau")?;
    let gamma = require(params, "gamma", "stuart_landau")?;
    let eta = require(params, "eta", "stuart_landau")?;

    let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    let generator = GroupGenerator::new(a)?;

    let rhs = Arc::new(move |x: &DVector<f64>, y: &DVector<f64>| {
        let r2 = x[0] * x[0] + x[1] * x[1];
        let re = alpha + gamma * r2;
        DVector::from_vec(vec![
            re * x[0] - beta * x[1] + eta * y[0],
            beta * x[0] + re * x[1] + eta * y[1],
        ])
    });

    let jac = Arc::new(move |x: &DVector<f64>, _y: &DVector<f64>| {
        let (x1, x2) = (x[0], x[1]);
        let m1 = DMatrix::from_row_slice(
            2,
            2,
            &[
                alpha + gamma * (3.0 * x1 * x1 + x2 * x2),
                -beta + 2.0 * gamma * x1 * x2,
                beta + 2.0 * gamma * x1 * x2,
                alpha + gamma * (x1 * x1 + 3.0 * x2 * x2),
            ],
        );
        let d2 = DMatrix::from_row_slice(2, 2, &[eta, 0.0, 0.0, eta]);
        (m1, d2)
    });

    EquivariantModel::new(
        "stuart_landau",
        generator,
        rhs,
        Some(jac),
        params.clone(),
        tau,
        phi,
    )
}

/// Serializable model description accepted by the CLI and the FFI layer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub model: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub tau: f64,
    pub phi: f64,
}

type ModelBuilder = dyn Fn(&ModelConfig) -> Result<EquivariantModel> + Send + Sync;

/// Registry mapping model names to builders. Starts with the built-ins;
/// custom models register a named rhs at build time.
pub struct ModelRegistry {
    builders: BTreeMap<String, Arc<ModelBuilder>>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        let mut reg = Self {
            builders: BTreeMap::new(),
        };
        reg.register("lang_kobayashi", |cfg| {
            lang_kobayashi(&cfg.params, cfg.tau, cfg.phi)
        });
        reg.register("lk", |cfg| lang_kobayashi(&cfg.params, cfg.tau, cfg.phi));
        reg.register("stuart_landau", |cfg| {
            stuart_landau(&cfg.params, cfg.tau, cfg.phi)
        });
        reg
    }
}

impl ModelRegistry {
    pub fn register<F>(&mut self, name: &str, builder: F)
    where
        F: Fn(&ModelConfig) -> Result<EquivariantModel> + Send + Sync + 'static,
    {
        self.builders.insert(name.to_string(), Arc::new(builder));
    }

    pub fn build(&self, cfg: &ModelConfig) -> Result<EquivariantModel> {
        match self.builders.get(&cfg.model) {
            Some(b) => b(cfg),
            None => Err(EqwaveError::Config(format!(
                "unknown model '{}'; known: {}",
                cfg.model,
                self.builders
                    .keys()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn lk_default() -> EquivariantModel {
        let params = BTreeMap::from([
            ("alpha".to_string(), 2.0),
            ("eta".to_string(), 0.1),
            ("J".to_string(), -0.5),
            ("epsilon".to_string(), 0.05),
        ]);
        lang_kobayashi(&params, 1.0, 0.0).unwrap()
    }

    fn sl_default() -> EquivariantModel {
        let params = BTreeMap::from([
            ("alpha".to_string(), 1.0),
            ("beta".to_string(), 1.0),
            ("gamma".to_string(), -1.0),
            ("eta".to_string(), 0.05),
        ]);
        stuart_landau(&params, 1.0, 0.0).unwrap()
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn lk_generator_is_skew() {
        let gen = lk_default().generator().matrix().clone();
        assert_eq!(gen.transpose(), -gen.clone());
        assert_eq!(gen[(1, 0)], 1.0);
    }

    #[test]
    fn group_action_identity_at_zero_and_full_turn() {
        let model = lk_default();
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((model.generator().action(0.0) - &id).amax() < 1e-15);
        assert!(
            (model.generator().action(2.0 * std::f64::consts::PI) - &id).amax() < 1e-12
        );
    }

    #[test]
    fn group_action_quarter_turn_rotates_field_block() {
        let model = lk_default();
        let q = model.generator().action(std::f64::consts::FRAC_PI_2);
        let expect = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        );
        assert!((q - expect).amax() < 1e-14);
    }

    #[test]
    fn group_action_is_homomorphism() {
        let model = sl_default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t1: f64 = rng.gen_range(-6.0..6.0);
            let t2: f64 = rng.gen_range(-6.0..6.0);
            let lhs = model.generator().action(t1) * model.generator().action(t2);
            let rhs = model.generator().action(t1 + t2);
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn action_is_orthogonal() {
        let model = lk_default();
        let g = model.generator().action(0.7);
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((g.transpose() * &g - id).amax() < 1e-13);
    }

    #[test]
    fn generator_is_orbit_tangent() {
        let model = lk_default();
        let x = DVector::from_vec(vec![0.4, -0.3, 0.2]);
        let h = 1e-6;
        let fd = (model.generator().action(h) * &x - model.generator().action(-h) * &x)
            / (2.0 * h);
        assert!((fd - model.generator().apply(&x)).norm() < 1e-10);
    }

    #[test]
    fn rejects_non_skew_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(GroupGenerator::new(a).is_err());
    }

    #[test]
    fn rejects_non_integer_rotation_speed() {
        // Frequency 0.5 gives exp(2 pi A) = -I, not a true S1 representation.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!(GroupGenerator::new(a).is_err());
    }

    #[test]
    fn lk_off_state_is_equilibrium() {
        let model = lk_default();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.5]);
        let f = model.eval_rhs(&x, &x).unwrap();
        assert!(f.norm() < 1e-14);
    }

    #[test]
    fn stuart_landau_unit_circle_balances() {
        let params = BTreeMap::from([
            ("alpha".to_string(), 1.0),
            ("beta".to_string(), 0.0),
            ("gamma".to_string(), -1.0),
            ("eta".to_string(), 0.0),
        ]);
        let model = stuart_landau(&params, 1.0, 0.0).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![0.3, -0.8]);
        let f = model.eval_rhs(&x, &y).unwrap();
        assert!(f.norm() < 1e-14);
    }

    #[test]
    fn equivariance_residual_lk_and_sl() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for model in [lk_default(), sl_default()] {
            let n = model.dim();
            for _ in 0..100 {
                let theta: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let x = random_vec(&mut rng, n);
                let y = random_vec(&mut rng, n);
                let g = model.generator().action(theta);
                let lhs = model.eval_rhs(&(&g * &x), &(&g * &y)).unwrap();
                let rhs = &g * model.eval_rhs(&x, &y).unwrap();
                let f_norm = model.eval_rhs(&x, &y).unwrap().norm();
                assert!(
                    (lhs - rhs).norm() <= 1e-10 * (1.0 + f_norm),
                    "equivariance violated for {}",
                    model.name()
                );
            }
        }
    }

    #[test]
    fn jacobians_exact_for_linear_model() {
        let b = DMatrix::from_row_slice(2, 2, &[0.5, -0.25, 0.25, 0.5]);
        let c = DMatrix::from_row_slice(2, 2, &[-1.0, 0.1, -0.1, -1.0]);
        let gen = GroupGenerator::new(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, -1.0, 1.0, 0.0],
        ))
        .unwrap();
        let (bb, cc) = (b.clone(), c.clone());
        let rhs = Arc::new(move |x: &DVector<f64>, y: &DVector<f64>| &bb * x + &cc * y);
        let model = EquivariantModel::new(
            "linear",
            gen,
            rhs,
            None,
            BTreeMap::new(),
            1.0,
            0.0,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let y = DVector::from_vec(vec![1.1, 0.2]);
        let jac = model.jacobians(&x, &y).unwrap();
        assert!((jac.m1 - b).amax() < 1e-9);
        assert!((jac.d2 - c).amax() < 1e-9);
    }

    #[test]
    fn lk_jacobian_block_at_zero_field() {
        let model = lk_default();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.3]);
        let y = DVector::from_vec(vec![0.1, 0.1, 0.0]);
        let jac = model.jacobians(&x, &y).unwrap();
        // Upper-left 2x2 block is N [[1, -alpha], [alpha, 1]] at E = 0.
        let n = 0.3;
        let expect = DMatrix::from_row_slice(2, 2, &[n, -2.0 * n, 2.0 * n, n]);
        assert!((jac.m1.view((0, 0), (2, 2)).clone_owned() - expect).amax() < 1e-12);
    }

    #[test]
    fn lk_finite_difference_matches_analytic_jacobian() {
        let analytic = lk_default();
        // Re-build without the analytic override to force central differences.
        let params = analytic.params().clone();
        let alpha = params["alpha"];
        let eta = params["eta"];
        let j_pump = params["J"];
        let eps = params["epsilon"];
        let gen = GroupGenerator::new(analytic.generator().matrix().clone()).unwrap();
        let rhs = Arc::new(move |x: &DVector<f64>, y: &DVector<f64>| {
            let (e1, e2, n) = (x[0], x[1], x[2]);
            let r2 = e1 * e1 + e2 * e2;
            DVector::from_vec(vec![
                n * (e1 - alpha * e2) + eta * y[0],
                n * (alpha * e1 + e2) + eta * y[1],
                eps * (j_pump + n + (2.0 * n + 1.0) * r2),
            ])
        });
        let fd_model =
            EquivariantModel::new("lk_fd", gen, rhs, None, params, 1.0, 0.0).unwrap();
        let x = DVector::from_vec(vec![0.8, -0.2, 0.1]);
        let y = DVector::from_vec(vec![0.5, 0.4, -0.3]);
        let ja = analytic.jacobians(&x, &y).unwrap();
        let jf = fd_model.jacobians(&x, &y).unwrap();
        assert!((ja.m1 - jf.m1).amax() <= 1e-6);
        assert!((ja.d2 - jf.d2).amax() <= 1e-6);
    }

    #[test]
    fn lk_pinning_vector_not_in_kernel() {
        let model = lk_default();
        let b = model.pinning().clone();
        assert_eq!(b.as_slice(), &[0.0, 1.0, 0.0]);
        let ab = model.generator().apply(&b);
        assert!(ab.norm() > 0.9);
        assert_eq!(ab[0], -1.0);
    }

    #[test]
    fn registry_builds_and_rejects() {
        let reg = ModelRegistry::default();
        let cfg = ModelConfig {
            model: "lang_kobayashi".into(),
            params: BTreeMap::from([
                ("alpha".into(), 2.0),
                ("eta".into(), 0.1),
                ("J".into(), -0.5),
                ("epsilon".into(), 0.05),
            ]),
            tau: 2.0,
            phi: 0.5,
        };
        assert!(reg.build(&cfg).is_ok());
        let missing = ModelConfig {
            model: "lang_kobayashi".into(),
            params: BTreeMap::new(),
            tau: 2.0,
            phi: 0.5,
        };
        assert!(matches!(
            reg.build(&missing),
            Err(EqwaveError::Config(_))
        ));
        let unknown = ModelConfig {
            model: "nope".into(),
            params: BTreeMap::new(),
            tau: 0.0,
            phi: 0.0,
        };
        assert!(reg.build(&unknown).is_err());
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let gen = GroupGenerator::new(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, -1.0, 1.0, 0.0],
        ))
        .unwrap();
        let rhs = Arc::new(|x: &DVector<f64>, _y: &DVector<f64>| {
            DVector::from_vec(vec![1.0 / (x[0] - x[0]), 0.0])
        });
        let model =
            EquivariantModel::new("bad", gen, rhs, None, BTreeMap::new(), 1.0, 0.0)
                .unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            model.eval_rhs(&x, &x),
            Err(EqwaveError::NonFinite { .. })
        ));
    }
}
