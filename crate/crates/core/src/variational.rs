//! Deterministic variational engine: action values, Euler–Lagrange and
//! DuBois–Reymond residuals, and a shooting solver for two-point problems.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lagrangian::{Lagrangian, LagrangianError, Partials};
use crate::quadrature::simpson;

#[derive(Debug, Error)]
pub enum VariationalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error("d2L/dv2 is singular at t={t}: the Euler-Lagrange equation has no explicit second-order form")]
    DegenerateLagrangian { t: f64 },
    #[error("boundary data admit a family of extremals (terminal sensitivity {sensitivity:e})")]
    DegenerateFamily { sensitivity: f64 },
    #[error("shooting did not converge after {iterations} iterations (terminal mismatch {mismatch:e})")]
    NoConvergence { iterations: usize, mismatch: f64 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// A sampled trajectory `t_i -> (x, x', x'')`.
#[derive(Clone, Debug, PartialEq)]
pub struct Extremal {
    grid: Vec<f64>,
    states: Vec<Vec<f64>>,
    velocities: Vec<Vec<f64>>,
    accelerations: Vec<Vec<f64>>,
}

impl Extremal {
    pub fn new(
        grid: Vec<f64>,
        states: Vec<Vec<f64>>,
        velocities: Vec<Vec<f64>>,
        accelerations: Vec<Vec<f64>>,
    ) -> Result<Self, VariationalError> {
        let n = grid.len();
        if states.len() != n || velocities.len() != n || accelerations.len() != n {
            return Err(VariationalError::Argument(
                "grid, states, velocities and accelerations must share a length".into(),
            ));
        }
        if n == 0 {
            return Err(VariationalError::Argument("empty trajectory".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(VariationalError::Argument("grid must be strictly increasing".into()));
        }
        let d = states[0].len();
        let same_dim = |rows: &[Vec<f64>]| rows.iter().all(|r| r.len() == d);
        if !same_dim(&states) || !same_dim(&velocities) || !same_dim(&accelerations) {
            return Err(VariationalError::Argument("inconsistent state dimension".into()));
        }
        Ok(Extremal {
            grid,
            states,
            velocities,
            accelerations,
        })
    }

    /// Samples a closed-form curve and its first two derivatives.
    pub fn from_fn(
        grid: Vec<f64>,
        x: impl Fn(f64) -> Vec<f64>,
        v: impl Fn(f64) -> Vec<f64>,
        a: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self, VariationalError> {
        let states = grid.iter().map(|&t| x(t)).collect();
        let velocities = grid.iter().map(|&t| v(t)).collect();
        let accelerations = grid.iter().map(|&t| a(t)).collect();
        Self::new(grid, states, velocities, accelerations)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }
    pub fn accelerations(&self) -> &[Vec<f64>] {
        &self.accelerations
    }
    pub fn len(&self) -> usize {
        self.grid.len()
    }
    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// `x + eps * phi`, with velocities and accelerations shifted by the
    /// derivatives of `phi`.
    pub fn perturbed(
        &self,
        eps: f64,
        phi: impl Fn(f64) -> (Vec<f64>, Vec<f64>, Vec<f64>),
    ) -> Extremal {
        let mut out = self.clone();
        for (i, &t) in self.grid.iter().enumerate() {
            let (p, dp, ddp) = phi(t);
            for j in 0..self.dim() {
                out.states[i][j] += eps * p[j];
                out.velocities[i][j] += eps * dp[j];
                out.accelerations[i][j] += eps * ddp[j];
            }
        }
        out
    }

    /// Largest gap between stored velocities and centered differences of
    /// the states, over interior points.
    pub fn velocity_consistency(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..self.len().saturating_sub(1) {
            let dt = self.grid[i + 1] - self.grid[i - 1];
            for j in 0..self.dim() {
                let fd = (self.states[i + 1][j] - self.states[i - 1][j]) / dt;
                worst = worst.max((fd - self.velocities[i][j]).abs());
            }
        }
        worst
    }

    /// Writes `t,x_1..x_d,v_1..v_d,a_1..a_d` rows with round-trip precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.dim();
        let mut header = vec!["t".to_string()];
        for prefix in ["x", "v", "a"] {
            header.extend((1..=d).map(|j| format!("{prefix}_{j}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![self.grid[i].to_string()];
            for block in [&self.states[i], &self.velocities[i], &self.accelerations[i]] {
                row.extend(block.iter().map(f64::to_string));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, VariationalError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| VariationalError::Argument("empty csv".into()))??;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 1) % 3 != 0 || !header.starts_with("t,") {
            return Err(VariationalError::Argument(format!("bad extremal header `{header}`")));
        }
        let d = (cols - 1) / 3;
        let (mut grid, mut xs, mut vs, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| VariationalError::Argument(e.to_string()))?;
            if vals.len() != cols {
                return Err(VariationalError::Argument(format!("row has {} columns", vals.len())));
            }
            grid.push(vals[0]);
            xs.push(vals[1..1 + d].to_vec());
            vs.push(vals[1 + d..1 + 2 * d].to_vec());
            as_.push(vals[1 + 2 * d..].to_vec());
        }
        Extremal::new(grid, xs, vs, as_)
    }
}

/// `x(a) = A`, `x(b) = B`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryProblem {
    pub a: f64,
    pub b: f64,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl BoundaryProblem {
    pub fn new(a: f64, b: f64, start: Vec<f64>, end: Vec<f64>) -> Result<Self, VariationalError> {
        if !(a < b) {
            return Err(VariationalError::Argument(format!("need a < b, got a={a}, b={b}")));
        }
        if start.len() != end.len() || start.is_empty() {
            return Err(VariationalError::Argument("boundary states must share a positive dimension".into()));
        }
        Ok(BoundaryProblem { a, b, start, end })
    }

    pub fn dim(&self) -> usize {
        self.start.len()
    }
}

pub fn uniform_grid(a: f64, b: f64, steps: usize) -> Vec<f64> {
    let h = (b - a) / steps as f64;
    (0..=steps)
        .map(|i| if i == steps { b } else { a + h * i as f64 })
        .collect()
}

fn check_dim(l: &Lagrangian, traj: &Extremal) -> Result<(), VariationalError> {
    if l.dim() != traj.dim() {
        return Err(LagrangianError::Dimension {
            expected: l.dim(),
            got: traj.dim(),
        }
        .into());
    }
    Ok(())
}

/// `J = int L(t, x, x') dt` by composite Simpson over the trajectory grid.
pub fn action_value(l: &Lagrangian, traj: &Extremal) -> Result<f64, VariationalError> {
    check_dim(l, traj)?;
    if traj.len() < 3 {
        return Err(VariationalError::Argument("action needs at least 3 grid points".into()));
    }
    let vals = (0..traj.len())
        .map(|i| l.eval(traj.grid[i], &traj.states[i], &traj.velocities[i]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(simpson(&traj.grid, &vals).expect("length checked"))
}

fn interior_partials(l: &Lagrangian, traj: &Extremal, i: usize) -> Result<Partials, VariationalError> {
    check_dim(l, traj)?;
    if i == 0 || i + 1 >= traj.len() {
        return Err(VariationalError::Argument(format!(
            "index {i} is not interior to a grid of {} points",
            traj.len()
        )));
    }
    Ok(l.eval_partials(traj.grid[i], &traj.states[i], &traj.velocities[i])?)
}

/// `d/dt (dL/dv_k)` along the trajectory, expanded by the chain rule.
fn total_derivative_of_momentum(p: &Partials, v: &[f64], a: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|k| {
            let mut s = p.d2_tv[k];
            for j in 0..d {
                s += p.d2_xv[k * d + j] * v[j] + p.d2_vv[k * d + j] * a[j];
            }
            s
        })
        .collect()
}

/// `L_x - d/dt L_v` at interior grid point `i`.
pub fn el_residual(l: &Lagrangian, traj: &Extremal, i: usize) -> Result<Vec<f64>, VariationalError> {
    let p = interior_partials(l, traj, i)?;
    let dp = total_derivative_of_momentum(&p, &traj.velocities[i], &traj.accelerations[i]);
    Ok(p.d_x.iter().zip(dp).map(|(lx, d)| lx - d).collect())
}

/// `L_t - d/dt (L - L_v . x')` at interior grid point `i`.
pub fn dubois_reymond_residual(l: &Lagrangian, traj: &Extremal, i: usize) -> Result<f64, VariationalError> {
    let p = interior_partials(l, traj, i)?;
    let (v, a) = (&traj.velocities[i], &traj.accelerations[i]);
    let dp = total_derivative_of_momentum(&p, v, a);
    let dot = |u: &[f64], w: &[f64]| u.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
    let dl_dt = p.d_t + dot(&p.d_x, v) + dot(&p.d_v, a);
    let d_momentum_dot_v = dot(&dp, v) + dot(&p.d_v, a);
    Ok(p.d_t - (dl_dt - d_momentum_dot_v))
}

pub fn max_el_residual(l: &Lagrangian, traj: &Extremal) -> Result<f64, VariationalError> {
    let mut worst: f64 = 0.0;
    for i in 1..traj.len().saturating_sub(1) {
        for r in el_residual(l, traj, i)? {
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

pub fn max_dubois_reymond_residual(l: &Lagrangian, traj: &Extremal) -> Result<f64, VariationalError> {
    let mut worst: f64 = 0.0;
    for i in 1..traj.len().saturating_sub(1) {
        worst = worst.max(dubois_reymond_residual(l, traj, i)?.abs());
    }
    Ok(worst)
}

/// Explicit second-order form `x'' = g(t, x, x')` of the Euler–Lagrange
/// equation: solves `L_vv x'' = L_x - L_vt - L_vx x'`.
pub fn el_acceleration(l: &Lagrangian, t: f64, x: &[f64], v: &[f64]) -> Result<Vec<f64>, VariationalError> {
    let p = l.eval_partials(t, x, v)?;
    let d = x.len();
    let hess = DMatrix::from_row_slice(d, d, &p.d2_vv);
    let scale = hess.iter().fold(0.0f64, |m, h| m.max(h.abs()));
    let lu = hess.lu();
    let det = lu.determinant();
    if scale == 0.0 || det.abs() <= 1e-12 * scale.powi(d as i32) {
        return Err(VariationalError::DegenerateLagrangian { t });
    }
    let rhs = DVector::from_iterator(
        d,
        (0..d).map(|k| {
            let mut s = p.d_x[k] - p.d2_tv[k];
            for j in 0..d {
                s -= p.d2_xv[k * d + j] * v[j];
            }
            s
        }),
    );
    let sol = lu.solve(&rhs).ok_or(VariationalError::DegenerateLagrangian { t })?;
    Ok(sol.iter().copied().collect())
}

/// Integrates the Euler–Lagrange ODE with classical RK4 from `(a, x0, v0)`.
pub fn integrate_el(
    l: &Lagrangian,
    grid: &[f64],
    x0: &[f64],
    v0: &[f64],
) -> Result<Extremal, VariationalError> {
    let d = x0.len();
    let mut xs = Vec::with_capacity(grid.len());
    let mut vs = Vec::with_capacity(grid.len());
    let mut accs = Vec::with_capacity(grid.len());
    let (mut x, mut v) = (x0.to_vec(), v0.to_vec());
    let axpy = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(b, k)| b + h * k).collect()
    };
    for (i, &t) in grid.iter().enumerate() {
        let a = el_acceleration(l, t, &x, &v)?;
        xs.push(x.clone());
        vs.push(v.clone());
        accs.push(a.clone());
        if i + 1 == grid.len() {
            break;
        }
        let h = grid[i + 1] - t;
        let (k1x, k1v) = (v.clone(), a);
        let (x2, v2) = (axpy(&x, &k1x, 0.5 * h), axpy(&v, &k1v, 0.5 * h));
        let k2v = el_acceleration(l, t + 0.5 * h, &x2, &v2)?;
        let k2x = v2;
        let (x3, v3) = (axpy(&x, &k2x, 0.5 * h), axpy(&v, &k2v, 0.5 * h));
        let k3v = el_acceleration(l, t + 0.5 * h, &x3, &v3)?;
        let k3x = v3;
        let (x4, v4) = (axpy(&x, &k3x, h), axpy(&v, &k3v, h));
        let k4v = el_acceleration(l, t + h, &x4, &v4)?;
        let k4x = v4;
        for j in 0..d {
            x[j] += h / 6.0 * (k1x[j] + 2.0 * k2x[j] + 2.0 * k3x[j] + k4x[j]);
            v[j] += h / 6.0 * (k1v[j] + 2.0 * k2v[j] + 2.0 * k3v[j] + k4v[j]);
        }
    }
    Extremal::new(grid.to_vec(), xs, vs, accs)
}

/// Tolerances for [`solve_bvp_with`].
#[derive(Clone, Copy, Debug)]
pub struct ShootingOptions {
    pub mismatch_tol: f64,
    pub max_iterations: usize,
    /// Terminal sensitivities `|det dx(b)/dv0|` below `family_tol * (b-a)^d`
    /// mean the solution is not isolated.
    pub family_tol: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions {
            mismatch_tol: 1e-10,
            max_iterations: 100,
            family_tol: 1e-6,
        }
    }
}

pub fn solve_bvp(l: &Lagrangian, bp: &BoundaryProblem, steps: usize) -> Result<Extremal, VariationalError> {
    solve_bvp_with(l, bp, steps, ShootingOptions::default())
}

/// Single shooting on the initial velocity over an RK4 integration of the
/// Euler–Lagrange equation.
pub fn solve_bvp_with(
    l: &Lagrangian,
    bp: &BoundaryProblem,
    steps: usize,
    opts: ShootingOptions,
) -> Result<Extremal, VariationalError> {
    if l.dim() != bp.dim() {
        return Err(LagrangianError::Dimension {
            expected: l.dim(),
            got: bp.dim(),
        }
        .into());
    }
    if steps < 2 {
        return Err(VariationalError::Argument("need at least 2 steps".into()));
    }
    let d = bp.dim();
    let grid = uniform_grid(bp.a, bp.b, steps);
    let shoot = |v0: &[f64]| -> Result<(Extremal, Vec<f64>), VariationalError> {
        let traj = integrate_el(l, &grid, &bp.start, v0)?;
        let last = &traj.states()[traj.len() - 1];
        let miss = last.iter().zip(&bp.end).map(|(x, b)| x - b).collect();
        Ok((traj, miss))
    };
    let norm = |m: &[f64]| m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let chord: Vec<f64> = (0..d).map(|j| (bp.end[j] - bp.start[j]) / (bp.b - bp.a)).collect();

    let sensitivity = |v0: &[f64]| -> Result<f64, VariationalError> {
        let jac = terminal_jacobian(&shoot, v0)?;
        Ok(jac.determinant().abs())
    };
    let family_threshold = opts.family_tol * (bp.b - bp.a).powi(d as i32);

    let outcome = if d == 1 {
        shoot_scalar(&shoot, chord[0], opts)
    } else {
        shoot_newton(&shoot, chord, opts)
    };
    match outcome {
        Ok((traj, v0)) => {
            let s = sensitivity(&v0)?;
            if s <= family_threshold {
                return Err(VariationalError::DegenerateFamily { sensitivity: s });
            }
            Ok(traj)
        }
        Err(ShootFailure::Error(e)) => Err(e),
        Err(ShootFailure::Stalled { last_v0, mismatch, iterations }) => {
            match sensitivity(&last_v0) {
                Ok(s) if s <= family_threshold => Err(VariationalError::DegenerateFamily { sensitivity: s }),
                _ => Err(VariationalError::NoConvergence {
                    iterations,
                    mismatch: norm(&mismatch),
                }),
            }
        }
    }
}

enum ShootFailure {
    Error(VariationalError),
    Stalled {
        last_v0: Vec<f64>,
        mismatch: Vec<f64>,
        iterations: usize,
    },
}

impl From<VariationalError> for ShootFailure {
    fn from(e: VariationalError) -> Self {
        ShootFailure::Error(e)
    }
}

type Shooter<'a> = dyn Fn(&[f64]) -> Result<(Extremal, Vec<f64>), VariationalError> + 'a;

fn terminal_jacobian(shoot: &Shooter<'_>, v0: &[f64]) -> Result<DMatrix<f64>, VariationalError> {
    let d = v0.len();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let h = 1e-6 * (1.0 + v0[j].abs());
        let mut vp = v0.to_vec();
        let mut vm = v0.to_vec();
        vp[j] += h;
        vm[j] -= h;
        let (_, mp) = shoot(&vp)?;
        let (_, mm) = shoot(&vm)?;
        for i in 0..d {
            jac[(i, j)] = (mp[i] - mm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Secant iteration from `v0 in {chord, 0}`, falling back to bisection once
/// a sign change has been bracketed.
fn shoot_scalar(
    shoot: &Shooter<'_>,
    chord: f64,
    opts: ShootingOptions,
) -> Result<(Extremal, Vec<f64>), ShootFailure> {
    let mut v_prev = chord;
    let (traj, m) = shoot(&[v_prev])?;
    let mut f_prev = m[0];
    if f_prev.abs() <= opts.mismatch_tol {
        return Ok((traj, vec![v_prev]));
    }
    let mut v_cur = if chord == 0.0 { 1.0 } else { 0.0 };
    let (mut traj_cur, m) = shoot(&[v_cur])?;
    let mut f_cur = m[0];
    let mut bracket: Option<(f64, f64, f64, f64)> = None;
    let update_bracket = |br: &mut Option<(f64, f64, f64, f64)>, va: f64, fa: f64, vb: f64, fb: f64| {
        if fa.signum() != fb.signum() {
            *br = Some(if va < vb { (va, fa, vb, fb) } else { (vb, fb, va, fa) });
        }
    };
    update_bracket(&mut bracket, v_prev, f_prev, v_cur, f_cur);
    for _ in 0..opts.max_iterations {
        if f_cur.abs() <= opts.mismatch_tol {
            return Ok((traj_cur, vec![v_cur]));
        }
        let slope = (f_cur - f_prev) / (v_cur - v_prev);
        let mut next = v_cur - f_cur / slope;
        if let Some((lo, _, hi, _)) = bracket {
            if !next.is_finite() || next <= lo || next >= hi {
                next = 0.5 * (lo + hi);
            }
        } else if !next.is_finite() {
            return Err(ShootFailure::Stalled {
                last_v0: vec![v_cur],
                mismatch: vec![f_cur],
                iterations: 0,
            });
        }
        let (traj_next, m) = shoot(&[next])?;
        let f_next = m[0];
        if let Some((lo, flo, hi, fhi)) = bracket {
            bracket = Some(if f_next.signum() == flo.signum() {
                (next, f_next, hi, fhi)
            } else {
                (lo, flo, next, f_next)
            });
        } else {
            update_bracket(&mut bracket, v_cur, f_cur, next, f_next);
        }
        v_prev = v_cur;
        f_prev = f_cur;
        v_cur = next;
        f_cur = f_next;
        traj_cur = traj_next;
    }
    if f_cur.abs() <= opts.mismatch_tol {
        return Ok((traj_cur, vec![v_cur]));
    }
    Err(ShootFailure::Stalled {
        last_v0: vec![v_cur],
        mismatch: vec![f_cur],
        iterations: opts.max_iterations,
    })
}

fn shoot_newton(
    shoot: &Shooter<'_>,
    mut v0: Vec<f64>,
    opts: ShootingOptions,
) -> Result<(Extremal, Vec<f64>), ShootFailure> {
    let d = v0.len();
    let mut last_miss = Vec::new();
    for _ in 0..opts.max_iterations {
        let (traj, miss) = shoot(&v0)?;
        if miss.iter().all(|m| m.abs() <= opts.mismatch_tol) {
            return Ok((traj, v0));
        }
        let jac = terminal_jacobian(shoot, &v0)?;
        let rhs = DVector::from_vec(miss.clone());
        last_miss = miss;
        let Some(step) = jac.lu().solve(&rhs) else {
            return Err(ShootFailure::Stalled {
                last_v0: v0,
                mismatch: last_miss,
                iterations: 0,
            });
        };
        for j in 0..d {
            v0[j] -= step[j];
        }
    }
    Err(ShootFailure::Stalled {
        last_v0: v0,
        mismatch: last_miss,
        iterations: opts.max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(n: usize) -> Extremal {
        Extremal::from_fn(uniform_grid(0.0, 1.0, n), |t| vec![t], |_| vec![1.0], |_| vec![0.0]).unwrap()
    }

    fn parabola(n: usize) -> Extremal {
        Extremal::from_fn(uniform_grid(0.0, 1.0, n), |t| vec![t * t], |t| vec![2.0 * t], |_| vec![2.0])
            .unwrap()
    }

    #[test]
    fn action_examples() {
        let j = action_value(&Lagrangian::free_square(1), &line(100)).unwrap();
        assert!((j - 1.0).abs() < 1e-8);
        let j = action_value(&Lagrangian::kinetic(1), &line(100)).unwrap();
        assert!((j - 0.5).abs() < 1e-12);
        let sine = Extremal::from_fn(
            uniform_grid(0.0, PI, 1000),
            |t| vec![t.sin()],
            |t| vec![t.cos()],
            |t| vec![-t.sin()],
        )
        .unwrap();
        let j = action_value(&Lagrangian::harmonic(1.0, 1), &sine).unwrap();
        assert!(j.abs() < 1e-6, "{j}");
    }

    #[test]
    fn action_needs_three_points() {
        let short = line(1);
        assert!(matches!(
            action_value(&Lagrangian::kinetic(1), &short),
            Err(VariationalError::Argument(_))
        ));
    }

    #[test]
    fn el_residual_examples() {
        let l = Lagrangian::free_square(1);
        assert_eq!(el_residual(&l, &line(10), 5).unwrap(), vec![0.0]);
        let p = parabola(10);
        for i in 1..10 {
            assert_eq!(el_residual(&l, &p, i).unwrap(), vec![-4.0]);
        }
        assert!(matches!(el_residual(&l, &p, 0), Err(VariationalError::Argument(_))));
        assert!(matches!(el_residual(&l, &p, 10), Err(VariationalError::Argument(_))));
    }

    #[test]
    fn harmonic_sine_is_extremal() {
        let sine = Extremal::from_fn(
            uniform_grid(0.0, PI, 50),
            |t| vec![t.sin()],
            |t| vec![t.cos()],
            |t| vec![-t.sin()],
        )
        .unwrap();
        let l = Lagrangian::harmonic(1.0, 1);
        assert!(max_el_residual(&l, &sine).unwrap() <= 1e-8);
        assert!(max_dubois_reymond_residual(&l, &sine).unwrap() <= 1e-8);
    }

    #[test]
    fn dubois_reymond_examples() {
        let l = Lagrangian::free_square(1);
        assert_eq!(dubois_reymond_residual(&l, &line(10), 3).unwrap(), 0.0);
        let p = parabola(10);
        for i in 1..10 {
            let t = p.grid()[i];
            assert!((dubois_reymond_residual(&l, &p, i).unwrap() - 8.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_line_bvp() {
        let bp = BoundaryProblem::new(0.0, 1.0, vec![0.0], vec![1.0]).unwrap();
        let ex = solve_bvp(&Lagrangian::free_square(1), &bp, 100).unwrap();
        for (t, x) in ex.grid().iter().zip(ex.states()) {
            assert!((x[0] - t).abs() <= 1e-10);
        }
    }

    #[test]
    fn harmonic_quarter_bvp() {
        let bp = BoundaryProblem::new(0.0, PI, vec![0.0], vec![1.0]).unwrap();
        let ex = solve_bvp(&Lagrangian::harmonic(0.25, 1), &bp, 1000).unwrap();
        let err = ex
            .grid()
            .iter()
            .zip(ex.states())
            .map(|(t, x)| (x[0] - (t / 2.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
        assert!(max_el_residual(&Lagrangian::harmonic(0.25, 1), &ex).unwrap() <= 1e-6);
    }

    #[test]
    fn resonant_harmonic_is_degenerate_family() {
        let bp = BoundaryProblem::new(0.0, PI, vec![0.0], vec![0.0]).unwrap();
        let err = solve_bvp(&Lagrangian::harmonic(1.0, 1), &bp, 1000).unwrap_err();
        assert!(matches!(err, VariationalError::DegenerateFamily { .. }), "{err}");
    }

    #[test]
    fn resonant_with_incompatible_data_fails() {
        let bp = BoundaryProblem::new(0.0, PI, vec![0.0], vec![1.0]).unwrap();
        let err = solve_bvp(&Lagrangian::harmonic(1.0, 1), &bp, 200).unwrap_err();
        assert!(
            matches!(err, VariationalError::DegenerateFamily { .. } | VariationalError::NoConvergence { .. }),
            "{err}"
        );
    }

    #[test]
    fn singular_hessian_is_reported() {
        // t v^2 has L_vv = 2t = 0 at t = 0
        let bp = BoundaryProblem::new(0.0, 1.0, vec![0.0], vec![1.0]).unwrap();
        let err = solve_bvp(&Lagrangian::momentum_free(1.0, 1, 2, 1), &bp, 10).unwrap_err();
        assert!(matches!(err, VariationalError::DegenerateLagrangian { t } if t == 0.0));
    }

    #[test]
    fn two_dimensional_bvp() {
        let bp = BoundaryProblem::new(0.0, 1.0, vec![0.0, 1.0], vec![1.0, -1.0]).unwrap();
        let ex = solve_bvp(&Lagrangian::harmonic(0.5, 2), &bp, 200).unwrap();
        let last = ex.states().last().unwrap();
        assert!((last[0] - 1.0).abs() <= 1e-8 && (last[1] + 1.0).abs() <= 1e-8);
        assert!(max_el_residual(&Lagrangian::harmonic(0.5, 2), &ex).unwrap() <= 1e-6);
    }

    #[test]
    fn boundary_problem_validation() {
        assert!(BoundaryProblem::new(1.0, 1.0, vec![0.0], vec![0.0]).is_err());
        assert!(BoundaryProblem::new(0.0, 1.0, vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let bp = BoundaryProblem::new(0.0, 1.0, vec![0.3], vec![0.7]).unwrap();
        let ex = solve_bvp(&Lagrangian::harmonic(0.25, 1), &bp, 17).unwrap();
        let mut buf = Vec::new();
        ex.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x_1,v_1,a_1\n"));
        let back = Extremal::read_csv(&buf[..]).unwrap();
        assert_eq!(back, ex);
    }
}
