//! End-to-end runs through the public API: catalogue problem, Picard loop,
//! path assembly and the lemma checks.

use fbsde_core::backward::{
    backward_iterate, dominated_property_check, BackwardStepConfig, DominatedConfig, Weighting,
};
use fbsde_core::bench::{get_benchmark, random_smooth_problem_with_dim, BenchmarkCase};
use fbsde_core::driver::{assemble_solution, holder_uniformity_check, run_iteration, StopRule, Verdict};
use fbsde_core::fields::{Lattice, OutOfBox};
use fbsde_core::forward::key_lemma_estimate;
use fbsde_core::noise::NoisePlan;
use proptest::prelude::*;

fn converged(case: &BenchmarkCase) -> fbsde_core::fields::DecouplingFieldPair {
    let (field, report) = run_iteration(
        &case.spec,
        &case.lattice,
        &BackwardStepConfig::default(),
        &StopRule::default(),
    )
    .unwrap();
    assert_eq!(report.verdict, Verdict::Converged);
    field
}

#[test]
fn degenerate_start_at_zero_is_a_frozen_solution() {
    let case = get_benchmark("degenerate-y-diffusion").unwrap();
    let field = converged(&case);
    let noise = NoisePlan::new(3, 500, case.lattice.time_steps(), 1).unwrap();
    let sol = assemble_solution(&case.spec, &field, &[0.0], &noise).unwrap();
    // 64 nodes on [−2, 2] put no node at 0, so interpolation leaves round-off.
    let tol = 1e-12;
    for p in 0..sol.paths() {
        for i in 0..sol.time_nodes() {
            assert!(sol.x(p, i)[0].abs() <= tol);
            assert!(sol.y(p, i)[0].abs() <= tol);
        }
        for i in 0..sol.time_nodes() - 1 {
            assert!(sol.z(p, i)[0].abs() <= tol);
        }
    }
    assert!(sol.residuals.terminal <= tol);
    assert!(sol.residuals.backward_dynamics <= tol);
}

#[test]
fn degenerate_start_at_one_keeps_the_martingale_mean() {
    let case = get_benchmark("degenerate-y-diffusion").unwrap();
    let field = converged(&case);
    let noise = NoisePlan::new(11, 20_000, case.lattice.time_steps(), 1).unwrap();
    let sol = assemble_solution(&case.spec, &field, &[1.0], &noise).unwrap();
    let last = sol.time_nodes() - 1;
    let ys: Vec<f64> = (0..sol.paths()).map(|p| sol.y(p, last)[0]).collect();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "E Y(T) = {mean} ± {se}");
    assert!(sol.residuals.terminal < 1e-10);
}

#[test]
fn linear_z_paths_carry_the_closed_form_z() {
    let case = get_benchmark("linear-z-diffusion").unwrap();
    let field = converged(&case);
    let noise = NoisePlan::new(5, 200, case.lattice.time_steps(), 1).unwrap();
    let sol = assemble_solution(&case.spec, &field, &[0.0], &noise).unwrap();
    for p in 0..sol.paths() {
        for i in 0..sol.time_nodes() - 1 {
            let z = sol.z(p, i)[0];
            assert!((z - 2.0).abs() < 2e-3, "path {p} step {i}: z = {z}");
        }
    }
}

#[test]
fn fromm_moduli_grow_with_every_iteration() {
    let case = get_benchmark("fromm-drift").unwrap();
    let stop = StopRule {
        max_iter: 30,
        ..Default::default()
    };
    let (_, report) =
        run_iteration(&case.spec, &case.lattice, &BackwardStepConfig::default(), &stop).unwrap();
    assert_eq!(report.verdict, Verdict::BlowUp);
    let moduli: Vec<f64> = report
        .records
        .iter()
        .map(|r| r.regularity.holder_half_modulus_u)
        .collect();
    assert!(moduli.windows(2).all(|w| w[1] > w[0]), "{moduli:?}");
    assert!(report.sup_norm_monotone(10));
    assert_eq!(report.max_frozen_residual(), 0.0);
}

#[test]
fn decoupled_problem_stops_changing_after_one_pass() {
    let spec = random_smooth_problem_with_dim(17, 1, false).unwrap();
    let lattice = Lattice::for_spec(&spec, 16, 25).unwrap();
    let stop = StopRule {
        min_iter: 3,
        ..Default::default()
    };
    let (_, report) = run_iteration(&spec, &lattice, &BackwardStepConfig::default(), &stop).unwrap();
    assert_eq!(report.verdict, Verdict::Converged);
    assert!(report.records[1..].iter().all(|r| r.delta == 0.0));
    let h = holder_uniformity_check(&report).unwrap();
    assert_eq!(h.ratio_last_to_first, 1.0);
    assert_eq!(h.ratio_last_to_first_v, 1.0);
}

#[test]
fn dominated_property_on_the_exponential_martingale() {
    let case = get_benchmark("exponential-martingale-decoupled").unwrap();
    let field = converged(&case);
    let noise = NoisePlan::new(9, 10_000, case.lattice.time_steps(), 1).unwrap();
    let cfg = DominatedConfig {
        weighting: Weighting::Growing,
        ..Default::default()
    };
    let same = dominated_property_check(&case.spec, &field, &[0.5], &[0.5], &cfg, &noise).unwrap();
    assert_eq!((same.lhs, same.rhs), (0.0, 0.0));
    let check = dominated_property_check(&case.spec, &field, &[0.5], &[0.3], &cfg, &noise).unwrap();
    assert!(check.satisfied, "{check:?}");
}

#[test]
fn reference_field_is_nearly_fixed_by_one_backward_step() {
    let case = get_benchmark("linear-z-diffusion").unwrap();
    let reference = case.reference_field_pair(&case.lattice).unwrap();
    let (next, _) = backward_iterate(&case.spec, &reference, &BackwardStepConfig::default()).unwrap();
    let d = next.distance(&reference).unwrap();
    let dx = case.lattice.axes()[0].spacing();
    assert!(d <= case.lattice.dt() + dx * dx, "distance {d}");
}

#[test]
fn key_lemma_holds_on_a_decoupled_field() {
    let case = get_benchmark("exponential-martingale-decoupled").unwrap();
    let field = converged(&case);
    let noise = NoisePlan::new(21, 20_000, case.lattice.time_steps(), 1).unwrap();
    for h in [0.0, 0.05, 0.2] {
        let est = key_lemma_estimate(&case.spec, &field, &[0.0], &[h], &noise).unwrap();
        assert!(est.within_bound(3.0), "h = {h}: {est:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn uncoupled_random_problems_converge_in_two_passes(seed in 0u64..10_000, rule in prop_oneof![Just(OutOfBox::Clamp), Just(OutOfBox::LinearExtrapolate)]) {
        let spec = random_smooth_problem_with_dim(seed, 1, false).unwrap();
        let lattice = Lattice::for_spec(&spec, 8, 17).unwrap().with_out_of_box(rule);
        let (_, report) = run_iteration(&spec, &lattice, &BackwardStepConfig::default(), &StopRule::default()).unwrap();
        prop_assert_eq!(report.verdict, Verdict::Converged);
        prop_assert!(report.records.len() <= 2);
        prop_assert!(report.records.iter().all(|r| r.regularity.is_finite()));
    }

    #[test]
    fn common_noise_estimate_is_zero_without_shift(seed in 0u64..10_000, x in -1.0f64..1.0) {
        let spec = random_smooth_problem_with_dim(seed, 1, true).unwrap();
        let lattice = Lattice::for_spec(&spec, 8, 17).unwrap();
        let field = fbsde_core::fields::make_initial_field(&spec, &lattice).unwrap();
        let noise = NoisePlan::new(seed, 64, 8, 1).unwrap();
        let est = key_lemma_estimate(&spec, &field, &[x], &[0.0], &noise).unwrap();
        prop_assert_eq!(est.estimate, 0.0);
        prop_assert_eq!(est.second_moment, 0.0);
    }
}
