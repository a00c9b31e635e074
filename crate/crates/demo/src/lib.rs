//! Three operations for the static page in `www/`: solve a boundary value
//! problem, sample SDE paths, and trace the stochastic Noether quantity.
//! Every entry point returns a flat `Vec<f64>` so the page can read it as a
//! `Float64Array` without serialization glue.

use nlab::lagrangian::Lagrangian;
use nlab::nelson::{GaussianField, Mu};
use nlab::noether::{verify_conservation, GeneratorPair};
use nlab::sde::{simulate_recorded, RecordPlan, SdeSpec};
use nlab::stochastic::{noether_quantity, AdmissibleLagrangian, DiffeoGroup};
use nlab::variational::{solve_bvp, BoundaryProblem};
use wasm_bindgen::prelude::*;

const MAX_PATHS: usize = 20_000;
const MAX_STEPS: usize = 5_000;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn bounded(name: &str, v: usize, max: usize) -> Result<usize, String> {
    if v == 0 || v > max {
        Err(format!("{name} must be in 1..={max}"))
    } else {
        Ok(v)
    }
}

/// Rows `t, x, Q` of the extremal of a one-dimensional Lagrangian, with the
/// Noether charge of `generators` along it.
pub fn extremal_rows(
    lagrangian: &str,
    generators: &str,
    (a, b): (f64, f64),
    (xa, xb): (f64, f64),
    steps: usize,
) -> Result<Vec<f64>, String> {
    let steps = bounded("steps", steps, MAX_STEPS)?;
    let l = Lagrangian::from_key(lagrangian, 1).map_err(|e| e.to_string())?;
    let g = GeneratorPair::from_key(generators, 1).map_err(|e| e.to_string())?;
    let bp = BoundaryProblem::new(a, b, vec![xa], vec![xb]).map_err(|e| e.to_string())?;
    let traj = solve_bvp(&l, &bp, steps).map_err(|e| e.to_string())?;
    let report = verify_conservation(&l, &g, &traj).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(3 * traj.len());
    for i in 0..traj.len() {
        out.extend([traj.grid()[i], traj.states()[i][0], report.charge[i]]);
    }
    Ok(out)
}

/// `[t_0..t_m, path_0, path_1, ...]` for `paths` sample paths on `(0, 1)`.
pub fn path_rows(sde: &str, paths: usize, steps: usize, seed: u64) -> Result<Vec<f64>, String> {
    let paths = bounded("paths", paths, MAX_PATHS)?;
    let steps = bounded("steps", steps, MAX_STEPS)?;
    let spec = SdeSpec::from_key(sde, 1).map_err(|e| e.to_string())?;
    let ens = simulate_recorded(&spec, paths, steps, seed, &RecordPlan::Every(1)).map_err(|e| e.to_string())?;
    let mut out = ens.times();
    for p in 0..paths {
        out.extend((0..ens.recorded_steps().len()).map(|i| ens.state(p, i)[0]));
    }
    Ok(out)
}

/// Rows `t, Re Q, Im Q, stderr` of the translation charge of `L = v^2 / 2`
/// along a constant-drift diffusion.
pub fn charge_rows(drift: f64, sigma: f64, paths: usize, seed: u64) -> Result<Vec<f64>, String> {
    let paths = bounded("paths", paths, MAX_PATHS)?;
    let spec = SdeSpec::constant_drift(drift, sigma, 1);
    let ens = simulate_recorded(&spec, paths, 500, seed, &RecordPlan::Every(10)).map_err(|e| e.to_string())?;
    let field = GaussianField::from_spec(&spec).map_err(|e| e.to_string())?;
    let l = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic(1)).map_err(|e| e.to_string())?;
    let group = DiffeoGroup::from_key("translation", 1).map_err(|e| e.to_string())?;
    let trace = noether_quantity(&l, &group, &ens, &field, Mu::Plus, Some((0.1, 1.0))).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(4 * trace.grid.len());
    for i in 0..trace.grid.len() {
        out.extend([trace.grid[i], trace.q[i].re, trace.q[i].im, trace.stderr[i]]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn extremal(lagrangian: &str, generators: &str, a: f64, b: f64, xa: f64, xb: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    extremal_rows(lagrangian, generators, (a, b), (xa, xb), steps).map_err(err)
}

#[wasm_bindgen]
pub fn sample_paths(sde: &str, paths: usize, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    path_rows(sde, paths, steps, seed).map_err(err)
}

#[wasm_bindgen]
pub fn noether_trace(drift: f64, sigma: f64, paths: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    charge_rows(drift, sigma, paths, seed).map_err(err)
}
