use nalgebra::DVector;
use std::collections::BTreeMap;
use std::time::Instant;

fn lk(eta: f64, eps: f64, tau: f64, phi: f64) -> eqwave::EquivariantModel {
    let params = BTreeMap::from([
        ("alpha".to_string(), 2.0),
        ("eta".to_string(), eta),
        ("J".to_string(), -0.5),
        ("epsilon".to_string(), eps),
    ]);
    eqwave::model::lang_kobayashi(&params, tau, phi).unwrap()
}

fn find_mw() -> (eqwave::EquivariantModel, eqwave::mw::MWSolution) {
    let (eta, tau, phi) = (0.15, 20.0, 3.93);
    let model = lk(eta, -0.05, tau, phi);
    let x0 = DVector::from_vec(vec![0.8, 0.0, -0.05]);
    let hist = eqwave::sim::HistorySegment::from_fn(tau, 0.0, 64, |t| {
        &x0 + DVector::from_vec(vec![0.01 * (0.37 * t).sin(), 0.013 * (0.53 * t).cos(), 0.002 * (0.91 * t).sin()])
    }).unwrap();
    let traj = eqwave::sim::integrate(&model, &hist, 3000.0, tau / 64.0).unwrap();
    let seed = eqwave::mw::seed_from_trajectory(&model, &traj, 2000.0, 24).unwrap();
    let mw = eqwave::mw::solve_mw(&model, tau, phi, &seed, &eqwave::mw::MwSolveOptions::default()).unwrap();
    (model, mw)
}

#[test]
fn family_pipeline() {
    let (model, mw) = find_mw();
    let t0 = Instant::now();
    let prim = eqwave::mw::primary_mw_normalize(&model, &mw).unwrap();
    println!("primary: tau={:.4} T0={:.4} V0={:.4} omega={:.4} res={:.2e}",
        prim.tau, prim.derived().t_period, prim.derived().v_phase, prim.omega, prim.residual_norm);
    let gen = eqwave::mw::genericity_rank(&model, &prim).unwrap();
    println!("genericity rank {} sv=({:.3e},{:.3e}) bo_det={:.3e} [{:?}]",
        gen.rank, gen.singular_values.0, gen.singular_values.1, gen.beta_omega_det, t0.elapsed());
    let t1 = Instant::now();
    let (e0, d0, g0) = eqwave::mw::estimate_perturbation_radii(&model, &mw).unwrap();
    println!("radii: eps0={e0} delta0={d0} gamma0={g0}  [{:?}]", t1.elapsed());
    let t0p = prim.derived().t_period;
    let v0p = prim.derived().v_phase;
    let bound_tau_star = (2.0 * t0p / e0).max(8.0 * std::f64::consts::PI * t0p / g0);
    println!("tau* = {bound_tau_star:.2}");
    let tau_test = (bound_tau_star * 1.08).ceil();
    let b = eqwave::mw::count_lower_bound(t0p, v0p, e0, d0, g0, tau_test).unwrap();
    println!("tau={tau_test}: N={} (k={}, l={}) r={:.4}", b.n, b.k_count, b.l_count, b.r);
    let t2 = Instant::now();
    let opts = eqwave::mw::FamilyOptions { eps0: e0, delta0: d0, gamma0: g0, max_pairs: 300, modes: 24 };
    match eqwave::mw::enumerate_family(&model, &mw, tau_test, 1.0, &opts) {
        Ok(rep) => {
            println!("family: {} solutions, {} unresolved, distinct={} [{:?}]",
                rep.solutions.len(), rep.unresolved.len(), rep.distinct, t2.elapsed());
            for s in rep.solutions.iter().take(12) {
                println!("  (k={}, l={}) chi={:.4} psi={:.4} beta={:.6} omega={:.6} res={:.1e}",
                    s.k, s.l, s.chi, s.psi, s.mw.beta, s.mw.omega, s.mw.residual_norm);
            }
            assert!(rep.solutions.len() as u64 >= b.n, "need >= {} got {}", b.n, rep.solutions.len());
        }
        Err(e) => println!("family fail: {e}"),
    }
}
