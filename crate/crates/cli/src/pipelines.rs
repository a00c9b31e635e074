//! One function per experiment kind. Each writes its artifacts into the
//! output directory and returns the summary entries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nlab::lagrangian::Lagrangian;
use nlab::nelson::{
    drift_agreement, im_identity_gap, product_rule_gap, write_drift_csv, GaussianField, Mu, Regression,
};
use nlab::noether::{max_invariance_residual, verify_conservation, GeneratorPair, CONSERVATION_TOL, EXTREMAL_TOL};
use nlab::sde::{mean_var, simulate_recorded, Ensemble, InitialState, RecordPlan, SdeSpec};
use nlab::stochastic::{
    action_functional, check_differential, expected_el_residual, invariance_check, noether_quantity,
    stochastic_el_residual, AdmissibleLagrangian, DiffeoGroup, Space, Variation, INVARIANCE_TOL,
};
use nlab::variational::{max_dubois_reymond_residual, max_el_residual, solve_bvp, BoundaryProblem, Extremal};
use num_complex::Complex64;

use crate::config::{ExperimentConfig, Kind};
use crate::{CliError, Summary};

/// Sampled points of the deterministic invariance check.
const INVARIANCE_SAMPLES: usize = 1000;
/// Forward and backward drift RMSE bounds of the drift comparison.
const FORWARD_RMSE_TOL: f64 = 0.05;
const BACKWARD_RMSE_TOL: f64 = 0.08;
/// Bound on the product-rule and imaginary-part identity gaps.
const PRODUCT_RULE_TOL: f64 = 0.05;
/// Expected residuals within this many standard errors count as stationary.
const STATIONARITY_Z: f64 = 4.0;
const STATIONARITY_TIMES: usize = 5;

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let mut s = Summary::default();
    s.push("kind", cfg.kind.name());
    match cfg.kind {
        Kind::Extremal => extremal(cfg, out, &mut s)?,
        Kind::NoetherCheck => noether_check(cfg, out, &mut s)?,
        Kind::Simulate => simulate(cfg, out, &mut s)?,
        Kind::NelsonEstimate => nelson_estimate(cfg, out, &mut s)?,
        Kind::StochasticNoether => stochastic_noether(cfg, out, &mut s)?,
        Kind::DifferentialCheck => differential_check(cfg, out, &mut s)?,
    }
    let pass = s.passed();
    s.push("pass", pass);
    Ok(s)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn lagrangian(cfg: &ExperimentConfig) -> Result<Lagrangian, CliError> {
    Ok(Lagrangian::from_key(cfg.lagrangian.as_deref().unwrap_or_default(), cfg.dim)?)
}

fn admissible(cfg: &ExperimentConfig) -> Result<AdmissibleLagrangian, CliError> {
    Ok(AdmissibleLagrangian::with_default_region(lagrangian(cfg)?)?)
}

fn solve(cfg: &ExperimentConfig, l: &Lagrangian) -> Result<Extremal, CliError> {
    let b = cfg.boundary.as_ref().expect("validated");
    let bp = BoundaryProblem::new(b.interval[0], b.interval[1], b.start.clone(), b.end.clone())?;
    Ok(solve_bvp(l, &bp, cfg.numeric.n.expect("validated"))?)
}

/// The config seed, unless `NLAB_SEED` overrides it.
pub fn seed(cfg: &ExperimentConfig) -> Result<u64, CliError> {
    match std::env::var("NLAB_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("NLAB_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(cfg.numeric.seed.expect("validated")),
    }
}

fn sde_spec(cfg: &ExperimentConfig) -> Result<SdeSpec, CliError> {
    let [a, b] = cfg.numeric.horizon.unwrap_or([0.0, 1.0]);
    let mut spec = SdeSpec::from_key(cfg.sde.as_deref().expect("validated"), cfg.dim)?.with_horizon(a, b);
    if let Some(x0) = &cfg.x0 {
        if x0.len() != cfg.dim {
            return Err(CliError::Validation(format!("x0 has {} entries, dim is {}", x0.len(), cfg.dim)));
        }
        spec = spec.with_x0(InitialState::Fixed(x0.clone()));
    }
    Ok(spec)
}

/// Number of Euler steps covering the horizon with the configured `dt`.
fn step_count(cfg: &ExperimentConfig, spec: &SdeSpec) -> Result<usize, CliError> {
    let dt = cfg.numeric.dt.expect("validated");
    let (a, b) = spec.horizon();
    let m = ((b - a) / dt).round();
    if m < 1.0 || (m * dt - (b - a)).abs() > 1e-9 * (b - a) {
        return Err(CliError::Validation(format!("horizon ({a}, {b}) is not a multiple of dt={dt}")));
    }
    Ok(m as usize)
}

fn field(cfg: &ExperimentConfig, spec: &SdeSpec) -> Result<GaussianField, CliError> {
    let f = GaussianField::from_spec(spec)?;
    Ok(match cfg.numeric.t_min {
        Some(t) => f.with_t_min(t),
        None => f,
    })
}

fn simulate_with(cfg: &ExperimentConfig, spec: &SdeSpec, plan: &RecordPlan) -> Result<Ensemble, CliError> {
    let m = step_count(cfg, spec)?;
    Ok(simulate_recorded(spec, cfg.numeric.n_paths.expect("validated"), m, seed(cfg)?, plan)?)
}

fn mus(cfg: &ExperimentConfig) -> Vec<Mu> {
    cfg.mus().into_iter().map(|m| Mu::try_from(m).expect("validated")).collect()
}

fn tag(mu: Mu) -> &'static str {
    match mu {
        Mu::Plus => "plus",
        Mu::Minus => "minus",
    }
}

fn extremal(cfg: &ExperimentConfig, out: &Path, s: &mut Summary) -> Result<(), CliError> {
    let l = lagrangian(cfg)?;
    let traj = solve(cfg, &l)?;
    traj.write_csv(create(out, "extremal.csv")?)?;
    let el = max_el_residual(&l, &traj)?;
    s.push("lagrangian", l.key());
    s.push("steps", traj.len() - 1);
    s.push("max_el_residual", el);
    s.push("max_dubois_reymond_residual", max_dubois_reymond_residual(&l, &traj)?);
    s.push("el_tolerance", EXTREMAL_TOL);
    s.push("extremal_pass", el <= EXTREMAL_TOL);
    Ok(())
}

fn noether_check(cfg: &ExperimentConfig, out: &Path, s: &mut Summary) -> Result<(), CliError> {
    let l = lagrangian(cfg)?;
    let g = GeneratorPair::from_key(cfg.generators.as_deref().expect("validated"), cfg.dim)?;
    let b = cfg.boundary.as_ref().expect("validated");
    let inv = max_invariance_residual(&l, &g, (b.interval[0], b.interval[1]), 2.0, INVARIANCE_SAMPLES, 0)?;
    let traj = solve(cfg, &l)?;
    let report = verify_conservation(&l, &g, &traj)?;
    traj.write_csv(create(out, "extremal.csv")?)?;
    report.write_csv(create(out, "charge.csv")?)?;
    s.push("lagrangian", l.key());
    s.push("generators", g.name());
    s.push("max_invariance_residual", inv);
    s.push("invariance_tolerance", INVARIANCE_TOL);
    s.push("invariance_pass", inv <= INVARIANCE_TOL);
    s.push("max_el_residual", report.max_el_residual);
    s.push("drift", report.drift);
    s.push("relative_drift", report.relative_drift);
    s.push("conservation_tolerance", CONSERVATION_TOL);
    s.push("conservation_pass", report.passes());
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, out: &Path, s: &mut Summary) -> Result<(), CliError> {
    let spec = sde_spec(cfg)?;
    let plan = RecordPlan::Every(cfg.numeric.record_every.unwrap_or(1));
    let ens = simulate_with(cfg, &spec, &plan)?;
    ens.write_csv(create(out, "paths.csv")?)?;
    ens.write_binary(create(out, "paths.nlab")?)?;
    s.push("sde", spec.key());
    s.push("n_paths", ens.n_paths());
    s.push("steps", ens.steps_total());
    s.push("dt", ens.dt());
    s.push("seed", ens.seed());
    let last = ens.recorded_steps().len() - 1;
    for j in 0..ens.dim() {
        let (m, v) = mean_var(&ens.marginal(last, j));
        s.push(&format!("final_mean_{j}"), m);
        s.push(&format!("final_var_{j}"), v);
    }
    Ok(())
}

/// Recorded steps for pooled regressions around `times` plus extra points.
fn regression_steps(cfg: &ExperimentConfig, spec: &SdeSpec, m: usize, lag: usize, extra: &[f64]) -> Vec<usize> {
    let dt = cfg.numeric.dt.expect("validated");
    let t0 = spec.horizon().0;
    let to_step = |t: f64| ((t - t0) / dt).round().max(0.0) as usize;
    let half = (0.5 * cfg.numeric.pool.unwrap_or(0.0) / dt + 1e-9).floor() as usize;
    let mut steps = Vec::new();
    for &t in cfg.numeric.times.as_deref().unwrap_or_default() {
        let c = to_step(t);
        steps.extend(c.saturating_sub(half + lag)..=(c + half + lag).min(m));
    }
    steps.extend(extra.iter().map(|&t| to_step(t).min(m)));
    steps.sort_unstable();
    steps.dedup();
    steps
}

fn nelson_estimate(cfg: &ExperimentConfig, out: &Path, s: &mut Summary) -> Result<(), CliError> {
    let spec = sde_spec(cfg)?;
    let m = step_count(cfg, &spec)?;
    let dt = cfg.numeric.dt.expect("validated");
    let lag = match cfg.numeric.h {
        Some(h) => {
            let k = (h / dt).round();
            if k < 1.0 || (k * dt - h).abs() > 1e-9 * dt {
                return Err(CliError::Validation(format!("h={h} is not a multiple of dt={dt}")));
            }
            k as usize
        }
        None => 1,
    };
    let extra: Vec<f64> = cfg
        .product_rule
        .iter()
        .flat_map(|p| [p.t - p.delta, p.t, p.t + p.delta])
        .collect();
    let plan = RecordPlan::Steps(regression_steps(cfg, &spec, m, lag, &extra));
    let ens = simulate_with(cfg, &spec, &plan)?;
    let f = field(cfg, &spec)?;
    let opts = Regression {
        lag_steps: lag,
        bandwidth: cfg.numeric.bandwidth,
        window: cfg.numeric.pool.unwrap_or(0.0),
        ..Regression::default()
    };
    let band = cfg.numeric.band.unwrap_or([0.1, 0.9]);
    let times = cfg.numeric.times.as_deref().expect("validated");
    let rep = drift_agreement(&ens, &f, times, cfg.numeric.points.unwrap_or(21), (band[0], band[1]), &opts)?;
    write_drift_csv(&rep.rows, create(out, "drift.csv")?)?;
    s.push("sde", spec.key());
    s.push("n_paths", ens.n_paths());
    s.push("forward_rmse", rep.forward_rmse);
    s.push("backward_rmse", rep.backward_rmse);
    s.push("drift_scale", rep.drift_scale);
    s.push("forward_tolerance", FORWARD_RMSE_TOL);
    s.push("backward_tolerance", BACKWARD_RMSE_TOL);
    s.push(
        "drift_pass",
        rep.forward_rmse <= FORWARD_RMSE_TOL && rep.backward_rmse <= BACKWARD_RMSE_TOL,
    );
    if let Some(p) = &cfg.product_rule {
        let pr = product_rule_gap((&ens, &f), (&ens, &f), p.t, p.delta)?;
        let im = [Mu::Plus, Mu::Minus]
            .iter()
            .map(|&mu| im_identity_gap((&ens, &f), (&ens, &f), p.t, mu))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        s.push("product_rule_lhs", pr.lhs);
        s.push("product_rule_rhs", pr.rhs);
        s.push("product_rule_gap", pr.gap);
        s.push("im_identity_gap", im);
        s.push("product_rule_tolerance", PRODUCT_RULE_TOL);
        s.push("product_rule_pass", pr.gap <= PRODUCT_RULE_TOL && im <= PRODUCT_RULE_TOL);
    }
    Ok(())
}

fn stochastic_noether(cfg: &ExperimentConfig, out: &Path, s: &mut Summary) -> Result<(), CliError> {
    let l = admissible(cfg)?;
    let group = DiffeoGroup::from_key(cfg.group.as_deref().expect("validated"), cfg.dim)?;
    let spec = sde_spec(cfg)?;
    let ens = simulate_with(cfg, &spec, &RecordPlan::Every(cfg.numeric.record_every.unwrap_or(10)))?;
    let f = field(cfg, &spec)?;
    let inv = invariance_check(&l, &group, INVARIANCE_SAMPLES, 0);
    s.push("lagrangian", l.base().key());
    s.push("sde", spec.key());
    s.push("n_paths", ens.n_paths());
    s.push("invariance_gap", inv.max_gap);
    s.push("invariance_pass", inv.invariant);
    let range = cfg.numeric.window.map(|[a, b]| (a, b));
    let mut traces = Vec::new();
    for mu in mus(cfg) {
        let trace = noether_quantity(&l, &group, &ens, &f, mu, range)?;
        let t = tag(mu);
        trace.write_csv(create(out, &format!("trace_{t}.csv"))?)?;
        trace.write_verdict(create(out, &format!("verdict_{t}.csv"))?)?;
        s.push(&format!("{t}_q_mean_re"), trace.mean.re);
        s.push(&format!("{t}_q_mean_im"), trace.mean.im);
        s.push(&format!("{t}_max_stderr"), trace.stderr.iter().cloned().fold(0.0, f64::max));
        s.push(&format!("{t}_drift"), trace.drift);
        s.push(&format!("{t}_threshold"), trace.threshold);
        s.push(&format!("{t}_points"), trace.grid.len());
        s.push(&format!("{t}_pass"), trace.pass);

        // Stationarity: expected residual at a few grid times.
        let n = trace.grid.len();
        let picks: Vec<f64> = (0..STATIONARITY_TIMES)
            .map(|k| trace.grid[k * (n - 1) / (STATIONARITY_TIMES - 1).max(1)])
            .collect();
        let mut worst: f64 = 0.0;
        let mut stationary = true;
        for &time in &picks {
            for est in expected_el_residual(&l, &ens, &f, time, mu)? {
                stationary &= est.within(Complex64::new(0.0, 0.0), STATIONARITY_Z);
                worst = worst.max(est.value.norm());
            }
        }
        s.push(&format!("{t}_max_mean_el_residual"), worst);
        s.push(&format!("{t}_stationary_pass"), stationary);
        traces.push(trace);
    }
    if let [plus, minus] = traces.as_slice() {
        let gap = plus
            .q
            .iter()
            .zip(&minus.q)
            .map(|(a, b)| (a - b.conj()).norm())
            .fold(0.0, f64::max);
        s.push("conjugacy_gap", gap);
        s.push("conjugacy_pass", gap <= 1e-9 * (1.0 + plus.mean.norm()));
    }
    Ok(())
}

fn differential_check(cfg: &ExperimentConfig, out: &Path, s: &mut Summary) -> Result<(), CliError> {
    let l = admissible(cfg)?;
    let spec = sde_spec(cfg)?;
    let f = field(cfg, &spec)?;
    s.push("lagrangian", l.base().key());
    s.push("sde", spec.key());
    for (k, probe) in cfg.probes.iter().flatten().enumerate() {
        for mu in mus(cfg) {
            let r = stochastic_el_residual(&l, &f, probe.t, &probe.x, mu)?;
            for (j, c) in r.iter().enumerate() {
                s.push(&format!("probe{k}_{}_c{j}_re", tag(mu)), c.re);
                s.push(&format!("probe{k}_{}_c{j}_im", tag(mu)), c.im);
            }
        }
    }
    let Some([a, b]) = cfg.numeric.window else {
        return Ok(());
    };
    let ens = simulate_with(cfg, &spec, &RecordPlan::Every(cfg.numeric.record_every.unwrap_or(10)))?;
    s.push("n_paths", ens.n_paths());
    for mu in mus(cfg) {
        let est = action_functional(&l, &ens, &f, mu, (a, b))?;
        s.push(&format!("action_{}_re", tag(mu)), est.value.re);
        s.push(&format!("action_{}_im", tag(mu)), est.value.im);
        s.push(&format!("action_{}_stderr", tag(mu)), est.stderr);
    }
    let Some(variations) = &cfg.variations else {
        return Ok(());
    };
    let spaces: Vec<Space> = match &cfg.spaces {
        Some(v) => v.iter().map(|k| if k == "C1" { Space::C1 } else { Space::N1 }).collect(),
        None => vec![Space::C1, Space::N1],
    };
    let mut w = create(out, "differential.csv")?;
    writeln!(w, "variation,mu,space,formula_re,formula_im,fd_re,fd_im,combined_stderr,pass")?;
    let (mut checks, mut failures) = (0, 0);
    for key in variations {
        let z = Variation::from_key(key, cfg.dim)?;
        for mu in mus(cfg) {
            for &space in &spaces {
                let c = check_differential(&l, &ens, &f, &z, mu, space, (a, b))?;
                checks += 1;
                failures += usize::from(!c.pass);
                writeln!(
                    w,
                    "{key},{},{space:?},{},{},{},{},{},{}",
                    mu.sign(),
                    c.formula.value.re,
                    c.formula.value.im,
                    c.finite_difference.value.re,
                    c.finite_difference.value.im,
                    c.combined,
                    c.pass
                )?;
            }
        }
    }
    w.flush()?;
    s.push("checks", checks);
    s.push("failures", failures);
    s.push("differential_pass", failures == 0);
    Ok(())
}
