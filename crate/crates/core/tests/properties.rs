use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use stoflow_core::field::{FiniteDifference, GaussianExp, Scaled, ShiftedQuadratic};
use stoflow_core::flow::{step_with_increment, BrownianDriver, FlowState, DEFAULT_BLOWUP_RADIUS};
use stoflow_core::modelfile::{ModelFile, PotentialKind};
use stoflow_core::operators::{apply, sqrt_lift, square_identity, OperatorKind};
use stoflow_core::ou::{exact_flow_step, OuModel};
use stoflow_core::table::fmt_float;
use stoflow_core::volume::{u_volume, u_volume_of_box, AaBox, CompactRegion, GridRule, QuadratureGrid};
use stoflow_core::{DiffusionModel, FlowDirection, ScalarField};

fn point(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d)
}

fn anisotropic() -> DiffusionModel {
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
    DiffusionModel::new(sigma, Arc::new(GaussianExp::new(0.2, 0.7)), 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_ignores_potential_scale(x in point(2), c in 0.01..100.0f64) {
        let model = anisotropic();
        let scaled = DiffusionModel::new(model.sigma().matrix().clone(), Arc::new(Scaled::new(model.psi().clone(), c)), 1.0).unwrap();
        let (a, b) = (model.drift(&x).unwrap(), scaled.drift(&x).unwrap());
        prop_assert!((a - b).norm() <= 1e-12 * (1.0 + x.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn sqrt_lift_squares_back(x in point(3), offset in 0.1..10.0f64) {
        let z = ShiftedQuadratic::new(offset);
        let u = sqrt_lift(z);
        let v = u.value(&x);
        prop_assert!((v * v - z.value(&x)).abs() <= 1e-12 * z.value(&x));
        let g = u.gradient(&x).unwrap();
        let gz = z.gradient(&x).unwrap();
        prop_assert!((2.0 * v * g - &gz).norm() <= 1e-12 * (1.0 + gz.norm()));
    }

    #[test]
    fn generator_minus_sharp_generator_is_twice_transport(x in point(2), offset in 0.5..4.0f64) {
        let model = anisotropic();
        let f = ShiftedQuadratic::new(offset);
        let diff = apply(&model, OperatorKind::Generator, &f, &x).unwrap() - apply(&model, OperatorKind::SharpGenerator, &f, &x).unwrap();
        let transport = model.drift(&x).unwrap().dot(&f.gradient(&x).unwrap());
        prop_assert!((diff - 2.0 * transport).abs() <= 1e-10 * (1.0 + transport.abs()));
        let adj = apply(&model, OperatorKind::GeneratorAdjoint, &f, &x).unwrap() + apply(&model, OperatorKind::SharpAdjoint, &f, &x).unwrap();
        let gen = apply(&model, OperatorKind::Generator, &f, &x).unwrap() + apply(&model, OperatorKind::SharpGenerator, &f, &x).unwrap();
        prop_assert!((adj - gen).abs() <= 1e-10 * (1.0 + gen.abs()));
    }

    #[test]
    fn square_identity_holds_for_quadratics(x in point(2), offset in 0.1..10.0f64) {
        let s = square_identity(&anisotropic(), &ShiftedQuadratic::new(offset), &x).unwrap();
        prop_assert!(s.relative_residual() <= 1e-13, "{s:?}");
    }

    #[test]
    fn region_measure_and_volume_are_additive(w in 0.1..2.0f64, h in 0.1..2.0f64, gap in 0.0..1.0f64) {
        let a = AaBox::new(vec![0.0, 0.0], vec![w, h]).unwrap();
        let b = AaBox::new(vec![w + gap, -1.0], vec![w + gap + 1.0, h]).unwrap();
        let region = CompactRegion::new(vec![a.clone(), b.clone()]).unwrap();
        prop_assert!((region.measure() - a.volume() - b.volume()).abs() <= 1e-12);
        let grid = QuadratureGrid::new(&region, GridRule::Midpoint { per_axis: 4 }).unwrap();
        let state = grid.initial_state();
        let u = OuModel::new(2).unwrap().psi();
        let total = u_volume(&state, &u, &grid).unwrap();
        let parts = u_volume_of_box(&state, &u, &grid, 0).unwrap() + u_volume_of_box(&state, &u, &grid, 1).unwrap();
        prop_assert!((total - parts).abs() <= 1e-12 * total);
    }

    #[test]
    fn shared_noise_makes_ou_differences_deterministic(x in point(2), y in point(2), seed in any::<u64>()) {
        let model = OuModel::new(2).unwrap().model();
        let dt = 1e-2;
        let driver = BrownianDriver::new(seed, 2, dt).unwrap();
        let mut state = FlowState::new(&[x.clone(), y.clone()]).unwrap();
        for k in 0..100 {
            step_with_increment(&model, &mut state, &driver.increment(k), dt, None, FlowDirection::Forward, DEFAULT_BLOWUP_RADIUS).unwrap();
        }
        let c = (1.0 - dt).powi(100);
        for j in 0..2 {
            let want = c * (x[j] - y[j]);
            prop_assert!((state.point(0)[j] - state.point(1)[j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn exact_step_contracts_differences(x in point(3), y in point(3), delta in 0.0..5.0f64, eta in point(3)) {
        let mut pts: Vec<f64> = x.iter().chain(&y).copied().collect();
        exact_flow_step(&mut pts, delta, &eta);
        for j in 0..3 {
            prop_assert!((pts[j] - pts[3 + j] - (-delta).exp() * (x[j] - y[j])).abs() <= 1e-12 * (1.0 + (x[j] - y[j]).abs()));
        }
    }

    #[test]
    fn floats_round_trip_through_text(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        prop_assert_eq!(fmt_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn model_files_round_trip(d in 2usize..5, lambda in 0.1..10.0f64, step in proptest::option::of(1e-6..1e-2f64)) {
        let mut f = ModelFile::ou(d);
        f.lambda_c = lambda;
        f.fd_step = step;
        if step.is_some() {
            f.potential = PotentialKind::Expression;
            f.expression = Some("exp(x1^2 / 2) * (1 + x2^2)".into());
        }
        prop_assert_eq!(ModelFile::parse(&f.to_toml()).unwrap(), f);
    }

    #[test]
    fn increments_are_reproducible(seed in any::<u64>(), k in 0u64..10_000) {
        let a = BrownianDriver::new(seed, 3, 1e-3).unwrap();
        let b = BrownianDriver::new(seed, 3, 1e-3).unwrap();
        prop_assert_eq!(a.increment(k), b.increment(k));
        prop_assert_eq!(a.shifted(k).increment(0), a.increment(k));
    }
}

#[test]
fn midpoint_grid_converges_at_second_order() {
    let f = |x: &[f64]| (x[0] * 1.3).sin() * (0.7 * x[1]).exp();
    let exact = (1.0 - 1.3f64.cos()) / 1.3 * (0.7f64.exp() - 1.0) / 0.7;
    let region = CompactRegion::new(vec![AaBox::unit(2)]).unwrap();
    let err = |n: usize| {
        let grid = QuadratureGrid::new(&region, GridRule::Midpoint { per_axis: n }).unwrap();
        let sum: f64 = (0..grid.len()).map(|i| grid.weights[i] * f(grid.node(i))).sum();
        (sum - exact).abs()
    };
    let ns = [4usize, 8, 16, 32];
    let xs: Vec<f64> = ns.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = ns.iter().map(|&n| err(n).ln()).collect();
    let order = stoflow_core::stats::ls_slope(&xs, &ys);
    assert!(order >= 1.5, "observed order {order}");
}

#[test]
fn finite_differences_converge_at_second_order() {
    let psi = GaussianExp::new(0.0, 0.8);
    let x = [0.4, -0.9];
    let exact = psi.hessian(&x).unwrap();
    let err = |h: f64| {
        let fd = FiniteDifference::with_step(psi, stoflow_core::FdStep::Absolute(h));
        (fd.hessian(&x).unwrap() - &exact).norm()
    };
    let hs = [4e-2, 2e-2, 1e-2, 5e-3];
    let xs: Vec<f64> = hs.iter().map(|h: &f64| h.ln()).collect();
    let ys: Vec<f64> = hs.iter().map(|&h| err(h).ln()).collect();
    let order = stoflow_core::stats::ls_slope(&xs, &ys);
    assert!((1.8..2.3).contains(&order), "observed order {order}");
}

#[test]
fn brownian_increments_have_variance_dt() {
    let dt = 0.01;
    let driver = BrownianDriver::new(5, 2, dt).unwrap();
    let mut stream = driver.stream(0);
    let mut buf = [0.0; 2];
    let mut stats = [stoflow_core::stats::Running::new(), stoflow_core::stats::Running::new()];
    for _ in 0..200_000 {
        stream.next_into(&mut buf);
        stats[0].push(buf[0]);
        stats[1].push(buf[1]);
    }
    for s in &stats {
        assert!(s.mean().abs() < 5.0 * (dt / 200_000.0f64).sqrt());
        assert!((s.variance() / dt - 1.0).abs() < 0.02, "{}", s.variance() / dt);
    }
}
