use approx::assert_relative_eq;

use rmpc_core::certify::{classify_kkt, Classification};
use rmpc_core::fixtures::{
    bilinear_cascade_default, linear_affine_default, make_irregular, make_trigonometric,
    IrregularKind,
};
use rmpc_core::harness::{ExperimentConfig, InflowConfig};
use rmpc_core::hydraulics::{mass_balance_error, steady_state_for_upstream, tracking_objective};
use rmpc_core::linalg::{norm_inf, DenseLu};
use rmpc_core::optimizer::{minimize, OptimizerConfig};
use rmpc_core::problem::{solve_states, Evaluator, RmpcProblem};
use rmpc_core::sampling::latin_hypercube;

fn central_difference<P: RmpcProblem + ?Sized>(p: &P, u: &[f64], h: f64) -> Vec<f64> {
    (0..u.len())
        .map(|i| {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[i] += h;
            dn[i] -= h;
            let mut ev = Evaluator::new(p).unchecked();
            (ev.objective(&up).unwrap() - ev.objective(&dn).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm_inf(&d) / norm_inf(b).max(1e-12)
}

fn steady_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::paper();
    cfg.inflow = InflowConfig::Values(vec![100.0; cfg.channel.horizon]);
    cfg
}

#[test]
fn hydraulic_gradient_at_constant_150_matches_fd() {
    let p = ExperimentConfig::paper().build_problem().unwrap();
    let u = vec![150.0; p.control_dim()];
    let g = Evaluator::new(&p).gradient(&u).unwrap();
    let fd = central_difference(&p, &u, 1e-4);
    assert!(rel_err(&g, &fd) <= 1e-5, "rel err {}", rel_err(&g, &fd));
}

#[test]
fn single_step_horizon_gradient_matches_fd() {
    let mut cfg = ExperimentConfig::paper();
    cfg.channel.horizon = 1;
    let p = cfg.build_problem().unwrap();
    assert_eq!(p.control_dim(), 1);
    for u in [100.0, 137.0, 200.0 - 1e-3] {
        let g = Evaluator::new(&p).gradient(&[u]).unwrap();
        let fd = central_difference(&p, &[u], 1e-4);
        assert!(rel_err(&g, &fd) <= 1e-5);
    }
    let r = minimize(&p, &[150.0], &cfg.optimizer).unwrap();
    assert!(r.converged());
}

#[test]
fn linear_affine_gradient_closed_form() {
    let p = linear_affine_default();
    let lu = DenseLu::factor(p.a(), 1e-14).unwrap();
    // D_uT = −C A⁻¹ B
    let dut = p.c().mul(&lu.inverse().mul(p.b()));
    for u in latin_hypercube(5, p.bounds(), 11).unwrap() {
        let mut ev = Evaluator::new(&p);
        let y = ev.output(&u).unwrap();
        let df = p.objective().gradient(&y);
        let expect: Vec<f64> = dut.tr_mul_vec(&df).iter().map(|v| -v).collect();
        let g = ev.gradient(&u).unwrap();
        for (a, b) in g.iter().zip(&expect) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12, max_relative = 1e-10);
        }
    }
}

#[test]
fn steady_release_keeps_downstream_level_constant() {
    let cfg = steady_config();
    let p = cfg.build_problem().unwrap();
    let steady = steady_state_for_upstream(&cfg.channel, 100.0, 0.0).unwrap();
    let h_last = *steady.h.last().unwrap();
    let traj = p.simulate(&vec![100.0; cfg.channel.horizon]).unwrap();
    for h in traj.downstream_levels() {
        assert!((h - h_last).abs() <= 1e-9);
    }
    let f = tracking_objective(&traj, 0.0, 2.0);
    assert_relative_eq!(
        f,
        cfg.channel.horizon as f64 * h_last * h_last,
        max_relative = 1e-8
    );
    let mut ev = Evaluator::new(&p);
    assert_relative_eq!(
        ev.objective(&vec![100.0; cfg.channel.horizon]).unwrap(),
        f,
        max_relative = 1e-10
    );
}

#[test]
fn mass_balance_on_random_releases() {
    let p = ExperimentConfig::paper().build_problem().unwrap();
    for u in latin_hypercube(6, p.bounds(), 5).unwrap() {
        let traj = p.simulate(&u).unwrap();
        assert!(mass_balance_error(p.model(), &traj) <= 1e-8);
    }
}

#[test]
fn sine_newton_branches_disagree() {
    let p = make_irregular(IrregularKind::Sine);
    let pi = std::f64::consts::PI;
    let xs: Vec<f64> = [0.0, pi, 2.0 * pi]
        .iter()
        .map(|&x0| solve_states(&p, &[0.0], &[x0 + 0.1], 1e-12, 50).unwrap().x[0])
        .collect();
    for (x, want) in xs.iter().zip([0.0, pi, 2.0 * pi]) {
        assert!((x - want).abs() < 1e-9, "{x} vs {want}");
    }
}

#[test]
fn cascade_constructed_target_is_interior_optimum() {
    let p = bilinear_cascade_default();
    let r = minimize(&p, &p.bounds().center(), &OptimizerConfig::default()).unwrap();
    assert!(r.converged());
    assert!((r.u_star[0] - 2.0).abs() < 1e-5 && (r.u_star[1] - 3.0).abs() < 1e-5);
    let cert = classify_kkt(&p, &r, 1e-6).unwrap();
    assert_eq!(cert.classification, Classification::Interior);
}

#[test]
fn trigonometric_target_outside_annulus_lands_on_radius_bound() {
    // Target at radius 3, angle 0.4: nearest feasible point is radius 2 at the same angle.
    let (r_t, a_t) = (3.0f64, 0.4f64);
    let p = make_trigonometric(
        (0.5, 2.0),
        (0.0, 6.0),
        [r_t * a_t.cos(), r_t * a_t.sin()],
        2.0,
    )
    .unwrap();
    let r = minimize(&p, &[1.0, 1.0], &OptimizerConfig::default()).unwrap();
    assert!(r.converged());
    assert!((r.u_star[0] - 2.0).abs() < 1e-9);
    assert!((r.u_star[1] - a_t).abs() < 1e-5);
    assert_relative_eq!(r.f_star, 1.0, max_relative = 1e-8);
    let cert = classify_kkt(&p, &r, 1e-6).unwrap();
    assert_eq!(cert.classification, Classification::Boundary);
    assert_eq!(cert.active_set.len(), 1);
    assert_eq!(cert.active_set[0].index, 0);
}
