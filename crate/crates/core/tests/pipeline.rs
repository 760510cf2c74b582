use proptest::prelude::*;
use rabiflow_core::critical::{align_torus, ellipsoid_spectrum, realize_loop, refine_full, solve_reduced, FamilyFlag};
use rabiflow_core::flow::{flow_run, FlowConfig, Termination};
use rabiflow_core::functionals::{action, grad_norm};
use rabiflow_core::loopspace::{random_loop, reparametrize};
use rabiflow_core::{Coupling, ProductSystem, TorusShift};

fn ellipsoid(a: &[f64]) -> ProductSystem {
    ProductSystem::uncut(a.len(), Coupling::ellipsoid(a)).unwrap()
}

fn nonlinear() -> ProductSystem {
    ProductSystem::uncut(
        2,
        Coupling::pairwise(vec![1.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], -1.0),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_spectrum_entry_realizes_a_critical_loop(a1 in 0.5f64..3.0, a2 in 0.5f64..3.0, r in 0.0f64..=1.0) {
        let sys = ellipsoid(&[a1, a2]);
        for entry in ellipsoid_spectrum(&[a1, a2], 2).unwrap() {
            let st = realize_loop(&sys, &entry.orbit(), 64, r).unwrap();
            prop_assert!(grad_norm(&sys, &st) < 1e-9, "{entry:?}");
            prop_assert!((action(&sys, &st) - entry.action).abs() < 1e-9);
            prop_assert!((entry.action + entry.tau).abs() < 1e-12);
        }
    }
}

#[test]
fn reduced_solver_agrees_with_the_closed_form() {
    let a = [1.0, 2.0];
    let sys = ellipsoid(&a);
    let spectrum = ellipsoid_spectrum(&a, 2).unwrap();
    for entry in spectrum
        .iter()
        .filter(|e| e.flag == FamilyFlag::Isolated && e.tau > 0.0)
    {
        let guess: Vec<f64> = entry.h.iter().map(|h| 0.8 * h + 0.05).collect();
        let orbit = solve_reduced(&sys, &entry.k, &guess).unwrap();
        assert!((orbit.tau - entry.tau).abs() < 1e-12, "{entry:?}");
        assert!((orbit.action - entry.action).abs() < 1e-12);
    }
}

#[test]
fn perturbed_orbit_refines_back_up_to_a_shift() {
    let sys = nonlinear();
    let orbit = solve_reduced(&sys, &[1, 1], &[0.4, 0.4]).unwrap();
    let reference = realize_loop(&sys, &orbit, 128, 0.3).unwrap();
    let shift = TorusShift::new(vec![0.25, 0.6]);
    let mut start = reference.clone();
    start.curve = reparametrize(&reference.curve, &shift).unwrap();
    let noise = random_loop(&sys, 128, 5, 2.0, 1.0).unwrap();
    start.curve.add_scaled(1e-3 / noise.l2_norm(), &noise);
    start.tau += 1e-4;

    let refined = refine_full(&sys, &start, 1e-12).unwrap();
    assert!(grad_norm(&sys, &refined) <= 1e-12);
    let (_, distance) = align_torus(&reference.curve, &refined.curve).unwrap();
    assert!(distance < 1e-9, "{distance}");
    assert!((refined.tau - orbit.tau).abs() < 1e-11);
}

#[test]
fn flow_started_on_a_refined_orbit_stops_immediately() {
    let sys = nonlinear();
    let orbit = solve_reduced(&sys, &[1, 1], &[0.4, 0.4]).unwrap();
    let state = realize_loop(&sys, &orbit, 128, 0.5).unwrap();
    let report = flow_run(&sys, state, &FlowConfig::default()).unwrap();
    assert_eq!(report.termination, Termination::Converged);
    assert_eq!(report.steps, 0);
    assert!((report.last().action - orbit.action).abs() < 1e-12);
}
