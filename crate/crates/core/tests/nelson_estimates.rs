use nlab::jet::Jet;
use nlab::nelson::{
    backward_analytic, d_of_functional, drift_agreement, estimate_drift, im_identity_gap, product_rule_gap,
    regress_increments, Derivative, Direction, GaussianField, Mu, NelsonField, Regression,
};
use nlab::sde::{simulate_recorded, Ensemble, RecordPlan, SdeSpec};
use num_complex::Complex64;

const N: usize = 100_000;

fn pooled() -> Regression {
    Regression {
        window: 0.2,
        ..Regression::default()
    }
}

/// Steps 0.9..=1.1 of a dt = 1e-3 grid, enough for a pooled window at t = 1.
fn around_one(spec: &SdeSpec, seed: u64) -> Ensemble {
    simulate_recorded(spec, N, 1100, seed, &RecordPlan::Range { from: 899, to: 1100 }).unwrap()
}

fn at(ens: &Ensemble, dir: Direction, t: f64, x: f64) -> f64 {
    estimate_drift(ens, dir, t, &[vec![x]], &pooled()).unwrap()[0][0]
}

#[test]
fn brownian_drifts() {
    let spec = SdeSpec::brownian(1).with_horizon(0.0, 1.1);
    let ens = around_one(&spec, 5);
    for x in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let f = at(&ens, Direction::Forward, 1.0, x);
        assert!(f.abs() <= 0.05, "forward at {x}: {f}");
    }
    let b = at(&ens, Direction::Backward, 1.0, 1.0);
    assert!((b - 1.0).abs() <= 0.07, "backward {b}");
    assert!(backward_analytic(&spec, None, 1.0, 2.0).is_err());
    let field = GaussianField::from_spec(&spec).unwrap();
    assert!((field.backward(1.0, &[2.0]).unwrap()[0] - 2.0).abs() < 1e-12);
}

#[test]
fn constant_drift_estimates() {
    let spec = SdeSpec::constant_drift(0.7, 0.5, 1).with_horizon(0.0, 1.1);
    let ens = around_one(&spec, 6);
    let f = at(&ens, Direction::Forward, 1.0, 0.7);
    assert!((f - 0.7).abs() <= 0.05, "forward {f}");
    let b = at(&ens, Direction::Backward, 1.0, 0.7);
    assert!((b - 0.7).abs() <= 0.07, "backward {b}");
    // b_* = b + (x - x0 - b t) / t
    let field = GaussianField::from_spec(&spec).unwrap();
    assert!((field.backward(0.5, &[1.0]).unwrap()[0] - (0.7 + (1.0 - 0.35) / 0.5)).abs() < 1e-12);
}

#[test]
fn ou_forward_drift() {
    let spec = SdeSpec::ou(1.0, 2f64.sqrt(), 1).with_horizon(0.0, 2.1);
    let ens = simulate_recorded(&spec, N, 2100, 7, &RecordPlan::Range { from: 1899, to: 2100 }).unwrap();
    let f = at(&ens, Direction::Forward, 2.0, 0.5);
    assert!((f + 0.5).abs() <= 0.05, "forward {f}");
}

#[test]
fn deterministic_ensemble_is_nelson_differentiable() {
    let spec = SdeSpec::deterministic(1.0, 1);
    let ens = simulate_recorded(&spec, 200, 100, 0, &RecordPlan::All).unwrap();
    let opts = Regression {
        bandwidth: Some(0.1),
        ..Regression::default()
    };
    let x = [vec![0.5]];
    let f = estimate_drift(&ens, Direction::Forward, 0.5, &x, &opts).unwrap()[0][0];
    let b = estimate_drift(&ens, Direction::Backward, 0.5, &x, &opts).unwrap()[0][0];
    assert!((f - 1.0).abs() < 1e-10 && (b - 1.0).abs() < 1e-10);
    let field = GaussianField::from_spec(&spec).unwrap();
    for t in [0.2, 0.7] {
        let gap = field.forward(t, &[t])[0] - field.backward(t, &[t]).unwrap()[0];
        assert!(gap.abs() <= 1e-10);
    }
}

#[test]
fn generator_formula_matches_regression_of_square() {
    let spec = SdeSpec::brownian(1).with_horizon(0.0, 1.1);
    let ens = around_one(&spec, 8);
    let field = GaussianField::from_spec(&spec).unwrap();
    let square = |_: &Jet<Complex64>, x: &[Jet<Complex64>]| x[0].clone() * x[0].clone();
    let pts: Vec<Vec<f64>> = [-0.5, 0.0, 0.5].iter().map(|&x| vec![x]).collect();
    let est = regress_increments(
        &ens,
        &|_, x: &[f64], out: &mut [f64]| out[0] = x[0] * x[0],
        1,
        Direction::Forward,
        1.0,
        &pts,
        &pooled(),
    )
    .unwrap();
    for (p, e) in pts.iter().zip(est) {
        let formula = d_of_functional(&field, &square, 1.0, p, Derivative::Forward).unwrap();
        assert!((formula.re - 1.0).abs() < 1e-12);
        assert!((e[0] - formula.re).abs() <= 0.1, "at {p:?}: {}", e[0]);
    }
}

#[test]
fn product_rule_and_im_identity_on_brownian_pair() {
    // E[W^2] is linear in t, so a wide centered difference has no bias and
    // much less Monte Carlo noise than a one-step one.
    let plan = RecordPlan::Steps(vec![800, 1000, 1200]);
    let spec = SdeSpec::brownian(1).with_horizon(0.0, 1.2);
    let ens = simulate_recorded(&spec, N, 1200, 9, &plan).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let rep = product_rule_gap((&ens, &field), (&ens, &field), 1.0, 0.2).unwrap();
    assert!(rep.gap <= 0.05, "{rep:?}");
    for mu in [Mu::Plus, Mu::Minus] {
        assert!(im_identity_gap((&ens, &field), (&ens, &field), 1.0, mu).unwrap() <= 0.05);
    }

    let line = SdeSpec::deterministic(0.5, 1).with_horizon(0.0, 1.2);
    let det = simulate_recorded(&line, N, 1200, 9, &plan).unwrap();
    let det_field = GaussianField::from_spec(&line).unwrap();
    let rep = product_rule_gap((&det, &det_field), (&ens, &field), 1.0, 0.2).unwrap();
    assert!(rep.gap <= 4.0 * rep.lhs_stderr.hypot(rep.rhs_stderr), "{rep:?}");
}

#[test]
fn agreement_report_on_small_ou_run() {
    let spec = SdeSpec::ou(1.0, 2f64.sqrt(), 1).with_horizon(0.0, 1.1);
    let ens = around_one(&spec, 10);
    let field = GaussianField::from_spec(&spec).unwrap();
    let rep = drift_agreement(&ens, &field, &[1.0], 11, (0.1, 0.9), &pooled()).unwrap();
    assert_eq!(rep.rows.len(), 11);
    assert!(rep.forward_rmse <= 0.05 * (1.0 + rep.drift_scale), "{}", rep.forward_rmse);
    assert!(rep.backward_rmse <= 0.08 * (1.0 + rep.drift_scale), "{}", rep.backward_rmse);
}
