//! Runs the shipped configs and prints one PASS/FAIL line per acceptance
//! criterion. Run with `cargo test --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nlab::lagrangian::Lagrangian;
use nlab::noether::{noether_charge, noether_charge_with_sign, ChargeSign, GeneratorPair};
use nlab::variational::{solve_bvp, BoundaryProblem};
use nlab_cli::Summary;

struct Run {
    code: i32,
    elapsed: Duration,
    dir: PathBuf,
}

impl Run {
    fn summary(&self) -> Summary {
        Summary::parse(&std::fs::read_to_string(self.dir.join("summary")).unwrap_or_default())
    }

    fn num(&self, key: &str) -> f64 {
        self.summary().get(key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
    }

    fn flag(&self, key: &str) -> bool {
        self.summary().get(key) == Some("true")
    }

    fn csv(&self, name: &str) -> Vec<Vec<String>> {
        let text = std::fs::read_to_string(self.dir.join(name)).unwrap_or_default();
        text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
    }
}

struct Harness {
    root: tempfile::TempDir,
    runs: BTreeMap<String, Run>,
    verdicts: Vec<(usize, bool, String)>,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped_configs() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(configs_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "json").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

impl Harness {
    fn exec(&self, name: &str, threads: usize, tag: &str) -> Run {
        let dir = self.root.path().join(format!("{name}.{tag}"));
        let config = configs_dir().join(format!("{name}.json"));
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_nlab"))
            .arg("run")
            .arg(&config)
            .args(["--threads", &threads.to_string(), "--output"])
            .arg(&dir)
            .env_remove("NLAB_SEED")
            .output()
            .unwrap();
        Run { code: out.status.code().unwrap_or(-1), elapsed: start.elapsed(), dir }
    }

    fn run(&mut self, name: &str) -> &Run {
        if !self.runs.contains_key(name) {
            let r = self.exec(name, 1, "t1");
            self.runs.insert(name.to_string(), r);
        }
        &self.runs[name]
    }

    fn verdict(&mut self, criterion: usize, pass: bool, detail: String) {
        println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.verdicts.push((criterion, pass, detail));
    }
}

/// Running maximum that keeps a NaN once one appears.
fn worst(acc: f64, x: f64) -> f64 {
    if acc.is_nan() || x.is_nan() {
        f64::NAN
    } else {
        acc.max(x)
    }
}

fn field(row: &[String], i: usize) -> f64 {
    row.get(i).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

fn harmonic_bvp(h: &mut Harness) {
    let r = h.run("c1_harmonic_bvp");
    let err = r
        .csv("extremal.csv")
        .iter()
        .map(|row| (field(row, 1) - (field(row, 0) / 2.0).sin()).abs())
        .fold(0.0, worst);
    let (code, secs) = (r.code, r.elapsed.as_secs_f64());
    let resonant = h.run("c1_resonant_bvp").code;
    let pass = code == 0 && err <= 1e-6 && resonant == 3 && secs < 1.0;
    h.verdict(1, pass, format!("sup error {err:.2e} (<= 1e-6), resonant exit {resonant} (3), {secs:.2}s (< 1s)"));
}

fn noether_chain(h: &mut Harness) {
    let mut pass = true;
    let mut worst = (0.0f64, 0.0f64);
    let mut secs = 0.0;
    for name in ["c2_harmonic_energy", "c2_momentum_free", "c2_free_square_scaling"] {
        let r = h.run(name);
        let (inv, drift) = (r.num("max_invariance_residual"), r.num("relative_drift"));
        pass &= r.code == 0 && inv <= 1e-9 && drift <= 1e-5;
        worst = (worst.0.max(inv), worst.1.max(drift));
        secs += r.elapsed.as_secs_f64();
    }
    // With the sign of the L term flipped the scaling charge along the
    // extremal x = t + 1 of L = v^2 grows like 2 + 4t.
    let l = Lagrangian::free_square(1);
    let g = GeneratorPair::scaling(1.0, 0.0, 0.0, 1);
    let line = solve_bvp(&l, &BoundaryProblem::new(0.0, 1.0, vec![1.0], vec![2.0]).unwrap(), 100).unwrap();
    let mut sign_gap: f64 = 0.0;
    for i in 0..line.len() {
        let (t, x, v) = (line.grid()[i], &line.states()[i], &line.velocities()[i]);
        let minus = noether_charge_with_sign(&l, &g, t, x, v, ChargeSign::Minus).unwrap();
        sign_gap = sign_gap.max((minus - (2.0 + 4.0 * t)).abs());
    }
    pass &= sign_gap <= 1e-9 && secs < 5.0;
    h.verdict(
        2,
        pass,
        format!(
            "max invariance residual {:.1e} (<= 1e-9), max relative drift {:.1e} (<= 1e-5), \
             minus-sign gap to 2+4t {sign_gap:.1e}, {secs:.2}s (< 5s)",
            worst.0, worst.1
        ),
    );
}

fn nelson_agreement(h: &mut Harness) {
    let mut pass = true;
    let mut detail = Vec::new();
    for name in ["c3_brownian_drift", "c3_ou_drift"] {
        let r = h.run(name);
        let (f, b, secs) = (r.num("forward_rmse"), r.num("backward_rmse"), r.elapsed.as_secs_f64());
        pass &= r.code == 0 && f <= 0.05 && b <= 0.08 && secs < 60.0;
        detail.push(format!("{name}: forward {f:.4} (<= 0.05), backward {b:.4} (<= 0.08), {secs:.1}s"));
    }
    // Brownian reference backward drift is x / t.
    let rows = h.run("c3_brownian_drift").csv("drift.csv");
    let gap = rows
        .iter()
        .map(|row| (field(row, 5) - field(row, 1) / field(row, 0)).abs())
        .fold(0.0, worst);
    pass &= !rows.is_empty() && gap <= 1e-12;
    detail.push(format!("x/t gap {gap:.1e}"));
    h.verdict(3, pass, detail.join("; "));
}

fn product_rule(h: &mut Harness) {
    let r = h.run("c4_product_rule");
    let (gap, im) = (r.num("product_rule_gap"), r.num("im_identity_gap"));
    let pass = r.code == 0 && gap <= 0.05 && im <= 0.05;
    h.verdict(4, pass, format!("product rule gap {gap:.4} (<= 0.05), Im identity gap {im:.1e} (<= 0.05)"));
}

fn brownian_action(h: &mut Harness) {
    let r = h.run("c5_brownian_action");
    let (re, im, se) = (r.num("action_plus_re"), r.num("action_plus_im"), r.num("action_plus_stderr"));
    let target = -LN_2 / 4.0;
    let dist = (re * re + (im - target) * (im - target)).sqrt();
    let pass = r.code == 0 && dist <= 3.0 * se && se <= 0.01;
    h.verdict(5, pass, format!("estimate {re:.4}{im:+.4}i vs {target:.4}i, distance {dist:.1e} (<= 3 x {se:.1e}), stderr <= 0.01"));
}

fn el_residual(h: &mut Harness) {
    let r = h.run("c6_el_residual");
    let (re, im) = (r.num("probe0_plus_c0_re"), r.num("probe0_plus_c0_im"));
    let gap = (re * re + (im + 1.0) * (im + 1.0)).sqrt();
    let code = r.code;
    let line = h.run("c6_straight_line");
    let worst = line
        .summary()
        .entries()
        .iter()
        .filter(|(k, _)| k.starts_with("probe"))
        .map(|(_, v)| v.parse::<f64>().unwrap_or(f64::NAN).abs())
        .fold(0.0, worst);
    let pass = code == 0 && line.code == 0 && gap <= 1e-10 && worst <= 1e-10;
    h.verdict(6, pass, format!("|R + i| = {gap:.1e} (<= 1e-10), straight-line residual {worst:.1e}"));
}

fn stochastic_noether(h: &mut Harness) {
    let r = h.run("c7_stochastic_noether");
    let mut pass = r.code == 0 && r.elapsed.as_secs_f64() < 60.0;
    let mut worst_z: f64 = 0.0;
    for tag in ["plus", "minus"] {
        let trace = r.csv(&format!("trace_{tag}.csv"));
        pass &= trace.len() > 1;
        for row in &trace {
            let (re, im, se) = (field(row, 1), field(row, 2), field(row, 3));
            let z = ((re - 0.7).powi(2) + im * im).sqrt() / se;
            worst_z = worst_z.max(z);
            pass &= z <= 3.0;
        }
        pass &= r.num(&format!("{tag}_drift")) <= r.num(&format!("{tag}_threshold"));
    }
    let (drift, thr) = (r.num("plus_drift"), r.num("plus_threshold"));
    let secs = r.elapsed.as_secs_f64();

    // Deterministic reduction: the charge equals the classical momentum.
    let det = h.run("c7_deterministic_reduction");
    let l = Lagrangian::kinetic(1);
    let momentum = noether_charge(&l, &GeneratorPair::space_translation(vec![1.0]), 0.5, &[0.65], &[0.7]).unwrap();
    let rows = det.csv("trace_plus.csv");
    let det_gap = rows
        .iter()
        .map(|row| (field(row, 1) - momentum).abs().max(field(row, 2).abs()))
        .fold(0.0, worst);
    pass &= det.code == 0 && !rows.is_empty() && det_gap <= 1e-12;
    h.verdict(
        7,
        pass,
        format!(
            "max |Q - 0.7| / stderr {worst_z:.2} (<= 3), drift {drift:.2e} vs threshold {thr:.2e}, \
             deterministic gap {det_gap:.1e}, {secs:.1}s (< 60s)"
        ),
    );
}

fn differential(h: &mut Harness) {
    let names: Vec<String> = shipped_configs().into_iter().filter(|n| n.starts_with("c8_")).collect();
    let mut pass = true;
    let (mut checks, mut failures) = (0.0, 0.0);
    for name in &names {
        let r = h.run(name);
        pass &= r.code == 0 && r.flag("differential_pass");
        checks += r.num("checks");
        failures += r.num("failures");
    }
    let rows = h.run("c8_parabola").csv("differential.csv");
    let oracle = -4.0 / PI;
    let gap = rows
        .iter()
        .map(|row| (field(row, 3) - oracle).abs().max(field(row, 4).abs()))
        .fold(0.0, worst);
    pass &= !rows.is_empty() && gap <= 1e-4;
    h.verdict(
        8,
        pass,
        format!("{failures} of {checks} checks outside 3 error bars, parabola |dF - (-4/pi)| = {gap:.1e} (<= 1e-4)"),
    );
}

fn reproducibility(h: &mut Harness) {
    let mut mismatches = Vec::new();
    let names = shipped_configs();
    for name in &names {
        h.run(name);
        let again = h.exec(name, 8, "t8");
        let first = &h.runs[name];
        if first.code != again.code {
            mismatches.push(format!("{name}: exit codes"));
            continue;
        }
        let mut files: Vec<_> = std::fs::read_dir(&first.dir)
            .map(|d| d.map(|e| e.unwrap().file_name()).collect())
            .unwrap_or_default();
        files.sort();
        for f in files {
            let a = std::fs::read(first.dir.join(&f)).unwrap();
            let b = std::fs::read(again.dir.join(&f)).unwrap_or_default();
            if a != b {
                mismatches.push(format!("{name}/{}", f.to_string_lossy()));
            }
        }
    }
    let pass = mismatches.is_empty();
    h.verdict(9, pass, format!("{} configs, threads 1 vs 8, mismatches: {mismatches:?}", names.len()));
}

#[test]
fn acceptance() {
    let mut h = Harness { root: tempfile::tempdir().unwrap(), runs: BTreeMap::new(), verdicts: Vec::new() };
    harmonic_bvp(&mut h);
    noether_chain(&mut h);
    nelson_agreement(&mut h);
    product_rule(&mut h);
    brownian_action(&mut h);
    el_residual(&mut h);
    stochastic_noether(&mut h);
    differential(&mut h);
    reproducibility(&mut h);
    let failed: Vec<_> = h.verdicts.iter().filter(|v| !v.1).map(|v| v.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
