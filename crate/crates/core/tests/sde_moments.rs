use nlab::sde::{
    estimate_density, mean_var, simulate, simulate_recorded, DensityOutcome, Ensemble, RecordPlan, SdeSpec,
};

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn last_marginal(ens: &Ensemble) -> Vec<f64> {
    ens.marginal(ens.recorded_steps().len() - 1, 0)
}

#[test]
fn brownian_moments_and_density() {
    let ens = simulate_recorded(&SdeSpec::brownian(1), 100_000, 1000, 11, &RecordPlan::Every(100)).unwrap();
    let xs = last_marginal(&ens);
    let (m, v) = mean_var(&xs);
    assert!(m.abs() <= 4.0 / 100_000f64.sqrt(), "mean {m}");
    assert!((v - 1.0).abs() <= 0.02, "variance {v}");

    let grid: Vec<f64> = (0..=400).map(|i| -6.0 + 0.03 * i as f64).collect();
    let DensityOutcome::Estimate(est) = estimate_density(&ens, 1.0, &grid, None).unwrap() else {
        panic!("unexpected degenerate flag");
    };
    assert!(est.p.iter().all(|&p| p >= 0.0));
    assert!((est.integral() - 1.0).abs() <= 0.02);
    let sup = grid
        .iter()
        .zip(&est.p)
        .filter(|(x, _)| x.abs() <= 2.0)
        .map(|(&x, &p)| (p - normal_pdf(x, 1.0)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 0.02, "sup-norm {sup}");
}

#[test]
fn ou_reaches_stationary_variance() {
    let spec = SdeSpec::ou(1.0, 2f64.sqrt(), 1).with_horizon(0.0, 5.0);
    let ens = simulate_recorded(&spec, 100_000, 1000, 12, &RecordPlan::Every(200)).unwrap();
    let (m, v) = mean_var(&last_marginal(&ens));
    assert!(m.abs() <= 4.0 * (1.0f64 / 100_000.0).sqrt(), "mean {m}");
    assert!((v - 1.0).abs() <= 0.02, "variance {v}");

    let grid: Vec<f64> = (0..=400).map(|i| -6.0 + 0.03 * i as f64).collect();
    let est = estimate_density(&ens, 5.0, &grid, None).unwrap();
    let est = est.estimate().unwrap();
    let sup = grid
        .iter()
        .zip(&est.p)
        .filter(|(x, _)| x.abs() <= 2.0)
        .map(|(&x, &p)| (p - normal_pdf(x, 1.0)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 0.02, "sup-norm {sup}");
}

#[test]
fn constant_drift_weak_order_one() {
    // A state-dependent drift makes the Euler bias visible: for b = 1 - x
    // the exact mean at t = 1 is 1 - e^{-1}, Euler gives 1 - (1 - dt)^M.
    let spec = SdeSpec::linear(1.0, 0.0, 1.0, 0.3, 1);
    let exact = 1.0 - (-1.0f64).exp();
    let mut errors = Vec::new();
    for m in [5, 10, 20] {
        let ens = simulate_recorded(&spec, 200_000, m, 21, &RecordPlan::Every(m)).unwrap();
        let (mean, _) = mean_var(&last_marginal(&ens));
        errors.push((mean - exact).abs());
    }
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.5).contains(&ratio), "errors {errors:?}");
    }

    // With a state-free drift the scheme is exact in mean.
    let ens = simulate(&SdeSpec::constant_drift(0.7, 0.5, 1), 100_000, 100, 3).unwrap();
    let (mean, var) = mean_var(&last_marginal(&ens));
    assert!((mean - 0.7).abs() <= 4.0 * (var / 100_000.0).sqrt());
}

#[test]
fn paths_start_at_x0() {
    let spec = SdeSpec::ou(0.5, 1.0, 2).with_x0(nlab::sde::InitialState::Fixed(vec![1.0, -2.0]));
    let ens = simulate(&spec, 100, 50, 1).unwrap();
    for p in 0..100 {
        assert_eq!(ens.state(p, 0), &[1.0, -2.0]);
    }
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_paths() {
    let spec = SdeSpec::ou(1.0, 1.0, 2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate(&spec, 2000, 200, 42).unwrap())
    };
    let a = run(1);
    let b = run(8);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let again = run(8);
    assert_eq!(b.data(), again.data());
}
