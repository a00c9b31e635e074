use nlab::lagrangian::{Lagrangian, Monomial, Polynomial};
use nlab::nelson::{GaussianField, Mu};
use nlab::noether::{noether_charge, GeneratorPair};
use nlab::sde::{simulate_recorded, InitialState, RecordPlan, SdeSpec};
use nlab::stochastic::{
    action_functional, check_differential, expected_el_residual, invariance_check, noether_quantity,
    AdmissibleLagrangian, DiffeoGroup, Profile, Space, Variation,
};
use num_complex::Complex64;

fn kinetic(d: usize) -> AdmissibleLagrangian {
    AdmissibleLagrangian::with_default_region(Lagrangian::kinetic(d)).unwrap()
}

#[test]
fn brownian_action_matches_closed_form() {
    let spec = SdeSpec::brownian(1);
    let ens = simulate_recorded(&spec, 100_000, 1000, 17, &RecordPlan::Range { from: 500, to: 1000 }).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let est = action_functional(&kinetic(1), &ens, &field, Mu::Plus, (0.5, 1.0)).unwrap();
    // E[((1 - i) W / 2t)^2 / 2] = -i / 4t, integrated over (1/2, 1)
    let exact = Complex64::new(0.0, -0.25 * 2f64.ln());
    assert!(est.within(exact, 3.0), "{est:?}");
    assert!(est.stderr <= 0.01);
}

#[test]
fn linear_lagrangian_sees_the_mean_drift() {
    let linear = Polynomial::new(1, vec![Monomial::new(1.0, 0, vec![0], vec![1])]).unwrap();
    let l = AdmissibleLagrangian::with_default_region(Lagrangian::from_polynomial("v", linear)).unwrap();
    let spec = SdeSpec::constant_drift(0.7, 0.5, 1);
    let ens = simulate_recorded(&spec, 20_000, 1000, 3, &RecordPlan::Every(10)).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let est = action_functional(&l, &ens, &field, Mu::Minus, (0.2, 1.0)).unwrap();
    assert!((est.value.re - 0.7 * 0.8).abs() <= 3.0 * est.stderr, "{est:?}");
}

#[test]
fn translation_charge_is_the_constant_drift() {
    let spec = SdeSpec::constant_drift(0.7, 0.5, 1);
    let ens = simulate_recorded(&spec, 100_000, 1000, 42, &RecordPlan::Every(10)).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let group = DiffeoGroup::Translation(vec![1.0]);
    let plus = noether_quantity(&kinetic(1), &group, &ens, &field, Mu::Plus, None).unwrap();
    assert!(plus.pass, "drift {} threshold {}", plus.drift, plus.threshold);
    assert_eq!(plus.grid.len(), 91);
    for (q, se) in plus.q.iter().zip(&plus.stderr) {
        assert!(*se > 0.0);
        assert!((q - Complex64::new(0.7, 0.0)).norm() <= 3.0 * se, "{q} {se}");
    }
    let minus = noether_quantity(&kinetic(1), &group, &ens, &field, Mu::Minus, None).unwrap();
    for (a, b) in plus.q.iter().zip(&minus.q) {
        assert!((a - b.conj()).norm() <= 1e-12);
    }
    for t in [0.1, 0.5, 1.0] {
        let r = expected_el_residual(&kinetic(1), &ens, &field, t, Mu::Plus).unwrap();
        assert!(r[0].within(Complex64::new(0.0, 0.0), 4.0), "{t}: {:?}", r[0]);
    }
}

#[test]
fn rotation_charge_is_constant_in_the_plane() {
    let spec = SdeSpec::constant_drift(0.7, 0.5, 2);
    let ens = simulate_recorded(&spec, 50_000, 1000, 8, &RecordPlan::Every(50)).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let trace = noether_quantity(&kinetic(2), &DiffeoGroup::Rotation2d, &ens, &field, Mu::Plus, None).unwrap();
    assert!(trace.pass, "drift {} threshold {}", trace.drift, trace.threshold);

    // Brute force at two distant times: average D_mu X . (-y, x) directly.
    let brute = |t: f64| {
        let i = ens.index_of_time(t).unwrap();
        let c = Complex64::new(0.5, -0.5);
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..ens.n_paths() {
            let x = ens.state(p, i);
            let m = 0.7 * t;
            let v0 = 0.7 + c * (x[0] - m) / t;
            let v1 = 0.7 + c * (x[1] - m) / t;
            acc += -v0 * x[1] + v1 * x[0];
        }
        acc / ens.n_paths() as f64
    };
    for (k, t) in [(0usize, 0.1), (trace.grid.len() - 1, 1.0)] {
        assert!((trace.grid[k] - t).abs() < 1e-12);
        assert!((trace.q[k] - brute(t)).norm() <= 1e-9 * (1.0 + trace.q[k].norm()));
    }
    // Both sides are centered on zero for isotropic drift.
    assert!(trace.mean.norm() <= 3.0 * trace.stderr.iter().cloned().fold(0.0, f64::max));
}

#[test]
fn deterministic_reduction_reproduces_momentum() {
    let (a, c) = (1.3, -0.4);
    let spec = SdeSpec::deterministic(a, 1).with_x0(InitialState::Fixed(vec![c]));
    let ens = simulate_recorded(&spec, 3, 200, 0, &RecordPlan::Every(20)).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let trace = noether_quantity(&kinetic(1), &DiffeoGroup::Translation(vec![1.0]), &ens, &field, Mu::Plus, None).unwrap();
    let g = GeneratorPair::space_translation(vec![1.0]);
    for (t, q) in trace.grid.iter().zip(&trace.q) {
        let classical = noether_charge(&Lagrangian::kinetic(1), &g, *t, &[a * t + c], &[a]).unwrap();
        assert!((q.re - classical).abs() <= 1e-10 && q.im == 0.0);
        assert_eq!(q.re, a);
    }
    assert!(trace.pass && trace.drift <= 1e-15);
}

#[test]
fn non_invariant_group_and_non_stationary_process_are_flagged() {
    let pot = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic_potential(1.0, 1)).unwrap();
    assert!(!invariance_check(&pot, &DiffeoGroup::Translation(vec![1.0]), 1000, 5).invariant);
    assert!(invariance_check(&pot, &DiffeoGroup::Dilation(1), 1000, 5).max_gap > 1e-3);
    let planar = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic_potential(1.0, 2)).unwrap();
    assert!(invariance_check(&planar, &DiffeoGroup::Rotation2d, 1000, 5).invariant);

    // OU with L = v^2/2 is not stationary: its mean residual is clearly nonzero.
    let spec = SdeSpec::ou(1.0, 2f64.sqrt(), 1).with_x0(InitialState::Fixed(vec![1.0]));
    let ens = simulate_recorded(&spec, 20_000, 1000, 4, &RecordPlan::Every(100)).unwrap();
    let field = GaussianField::from_spec(&spec).unwrap();
    let r = expected_el_residual(&kinetic(1), &ens, &field, 0.5, Mu::Plus).unwrap();
    assert!(!r[0].within(Complex64::new(0.0, 0.0), 10.0), "{:?}", r[0]);
}

#[test]
fn differential_formula_agrees_with_finite_differences() {
    let specs = [
        SdeSpec::brownian(1),
        SdeSpec::constant_drift(0.7, 0.5, 1),
        SdeSpec::ou(1.0, 2f64.sqrt(), 1).with_x0(InitialState::Fixed(vec![1.0])),
    ];
    let lagrangians = [
        kinetic(1),
        AdmissibleLagrangian::with_default_region(Lagrangian::kinetic_potential(1.0, 1)).unwrap(),
    ];
    for (k, spec) in specs.iter().enumerate() {
        let ens = simulate_recorded(spec, 2_000, 1000, 30 + k as u64, &RecordPlan::Every(20)).unwrap();
        let field = GaussianField::from_spec(spec).unwrap();
        for l in &lagrangians {
            for profile in [Profile::Sine, Profile::Bump, Profile::Ramp] {
                let z = Variation::new(profile, vec![1.0]);
                for mu in [Mu::Plus, Mu::Minus] {
                    for space in [Space::C1, Space::N1] {
                        let chk = check_differential(l, &ens, &field, &z, mu, space, (0.3, 1.0)).unwrap();
                        assert!(chk.pass, "{} {:?} {profile:?} {mu:?} {space:?}: {chk:?}", spec.key(), l.base().key());
                    }
                }
            }
        }
    }
}
