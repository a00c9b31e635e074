//! Stochastic action functionals `F(X) = E[int L(X_t, D_mu X_t) dt]`, their
//! Gateaux differentials, the stochastic Euler–Lagrange residual and the
//! Noether quantity of a symmetry group acting on processes.

use std::io::{self, Write};

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::jet::Jet;
use crate::lagrangian::{parse_key, Lagrangian, LagrangianError, Polynomial};
use crate::nelson::{apply_generator, regress_increments, Direction, Mu, NelsonError, NelsonField, Regression};
use crate::quadrature::simpson;
use crate::sde::{Ensemble, SdeError};

type C = Complex64;

/// Absolute bound on `|L(phi_s x, dphi_s v) - L(x, v)|` for invariance.
pub const INVARIANCE_TOL: f64 = 1e-9;
/// Step of the central finite difference of the action.
pub const FD_EPSILON: f64 = 1e-4;
/// Allowance for rounding when every error bar is zero.
pub const ARITHMETIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Nelson(#[from] NelsonError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("non-finite action integrand on path {path} at t={t}")]
    NotFinite { path: usize, t: f64 },
    #[error("Lagrangian is not invariant under the group: max gap {gap}")]
    NotInvariant { gap: f64 },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

/// An autonomous Lagrangian `L(x, v)`, polynomial (hence holomorphic) in `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibleLagrangian {
    base: Lagrangian,
    poly: Polynomial,
    dv: Vec<Polynomial>,
    region: Vec<(f64, f64)>,
}

impl AdmissibleLagrangian {
    /// `region` is the state box used for sampling checks.
    pub fn new(base: Lagrangian, region: Vec<(f64, f64)>) -> Result<Self, StochasticError> {
        let poly = base
            .polynomial()
            .ok_or_else(|| LagrangianError::UnsupportedClass(format!("`{}` is not polynomial in v", base.key())))?
            .clone();
        if !base.is_autonomous() {
            return Err(LagrangianError::NotAutonomous(base.key().to_string()).into());
        }
        if region.len() != base.dim() || region.iter().any(|(a, b)| !(a < b)) {
            return Err(StochasticError::Argument("region must be a non-empty box of the state dimension".into()));
        }
        let dv = (0..base.dim()).map(|j| poly.d_velocity(j)).collect();
        Ok(AdmissibleLagrangian { base, poly, dv, region })
    }

    /// Uses the box `[-5, 5]^d`.
    pub fn with_default_region(base: Lagrangian) -> Result<Self, StochasticError> {
        let d = base.dim();
        Self::new(base, vec![(-5.0, 5.0); d])
    }

    pub fn base(&self) -> &Lagrangian {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn region(&self) -> &[(f64, f64)] {
        &self.region
    }

    pub fn eval(&self, x: &[f64], v: &[C]) -> C {
        let xc: Vec<C> = x.iter().map(|&a| C::new(a, 0.0)).collect();
        self.poly.eval(&C::new(0.0, 0.0), &xc, v)
    }

    /// `dL/dv_j` at `(x, v)`.
    pub fn d_v(&self, x: &[f64], v: &[C]) -> Vec<C> {
        let xc: Vec<C> = x.iter().map(|&a| C::new(a, 0.0)).collect();
        self.dv.iter().map(|p| p.eval(&C::new(0.0, 0.0), &xc, v)).collect()
    }

    /// `dL/dx_j` at `(x, v)`.
    pub fn d_x(&self, x: &[f64], v: &[C]) -> Vec<C> {
        let d = self.dim();
        let xj: Vec<Jet<C>> = (0..d).map(|i| Jet::variable(C::new(x[i], 0.0), i, d)).collect();
        let vj: Vec<Jet<C>> = v.iter().map(|&c| Jet::constant(c)).collect();
        let l = self.poly.eval(&Jet::constant(C::new(0.0, 0.0)), &xj, &vj);
        if l.is_constant() {
            return vec![C::new(0.0, 0.0); d];
        }
        (0..d).map(|i| l.d(i)).collect()
    }

    /// `dL/dv_j (x, V(t, x))` as jets in `(t, x)`, given `V` as jets.
    fn d_v_jets(&self, x: &[Jet<C>], v: &[Jet<C>]) -> Vec<Jet<C>> {
        let t = Jet::constant(C::new(0.0, 0.0));
        self.dv.iter().map(|p| p.eval(&t, x, v)).collect()
    }
}

/// One-parameter groups of diffeomorphisms `phi_s` of the state space.
#[derive(Clone, Debug, PartialEq)]
pub enum DiffeoGroup {
    /// `x + s e`.
    Translation(Vec<f64>),
    /// Planar rotation by angle `s`.
    Rotation2d,
    /// `e^s x` in dimension `d`.
    Dilation(usize),
}

impl DiffeoGroup {
    /// Keys: `translation`, `translation(e_1,...,e_d)`, `rotation-2d`, `dilation`.
    pub fn from_key(key: &str, dim: usize) -> Result<Self, StochasticError> {
        let (name, args) = parse_key(key).map_err(|_| StochasticError::UnknownKey(key.to_string()))?;
        match (name, args.len()) {
            ("translation" | "translation-x", 0) => Ok(DiffeoGroup::Translation(vec![1.0; dim])),
            ("translation" | "translation-x", n) if n == dim => Ok(DiffeoGroup::Translation(args)),
            ("rotation-2d", 0) if dim == 2 => Ok(DiffeoGroup::Rotation2d),
            ("dilation", 0) => Ok(DiffeoGroup::Dilation(dim)),
            _ => Err(StochasticError::UnknownKey(key.to_string())),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DiffeoGroup::Translation(e) => e.len(),
            DiffeoGroup::Rotation2d => 2,
            DiffeoGroup::Dilation(d) => *d,
        }
    }

    pub fn phi(&self, s: f64, x: &[f64]) -> Vec<f64> {
        match self {
            DiffeoGroup::Translation(e) => x.iter().zip(e).map(|(a, b)| a + s * b).collect(),
            DiffeoGroup::Rotation2d => {
                let (sn, cs) = s.sin_cos();
                vec![cs * x[0] - sn * x[1], sn * x[0] + cs * x[1]]
            }
            DiffeoGroup::Dilation(_) => x.iter().map(|a| s.exp() * a).collect(),
        }
    }

    /// `d phi_s(x) / ds` at `s = 0`.
    pub fn dphi_ds_at0(&self, x: &[f64]) -> Vec<f64> {
        match self {
            DiffeoGroup::Translation(e) => e.clone(),
            DiffeoGroup::Rotation2d => vec![-x[1], x[0]],
            DiffeoGroup::Dilation(_) => x.to_vec(),
        }
    }

    /// Jacobian of `phi_s` at `x`, row-major.
    pub fn dphi_dx(&self, s: f64, _x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        match self {
            DiffeoGroup::Translation(_) => identity(d),
            DiffeoGroup::Rotation2d => {
                let (sn, cs) = s.sin_cos();
                vec![cs, -sn, sn, cs]
            }
            DiffeoGroup::Dilation(_) => identity(d).into_iter().map(|v| v * s.exp()).collect(),
        }
    }

    /// `max |phi_0(x) - x|` over `samples` points of the box.
    pub fn identity_gap(&self, region: &[(f64, f64)], samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let x = sample_box(&mut rng, region);
                max_abs_diff(&self.phi(0.0, &x), &x)
            })
            .fold(0.0, f64::max)
    }

    /// `max |phi_s(phi_u(x)) - phi_{s+u}(x)|` over sampled `(s, u, x)`.
    pub fn group_gap(&self, region: &[(f64, f64)], samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let x = sample_box(&mut rng, region);
                let s = uniform(&mut rng, -1.0, 1.0);
                let u = uniform(&mut rng, -1.0, 1.0);
                max_abs_diff(&self.phi(s, &self.phi(u, &x)), &self.phi(s + u, &x))
            })
            .fold(0.0, f64::max)
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
}

fn sample_box(rng: &mut ChaCha8Rng, region: &[(f64, f64)]) -> Vec<f64> {
    region.iter().map(|&(a, b)| uniform(rng, a, b)).collect()
}

/// Applies `phi_s` to every recorded state. The result carries no spec,
/// since the transformed process is not the simulated one.
pub fn suspend(group: &DiffeoGroup, ens: &Ensemble, s: f64) -> Result<Ensemble, StochasticError> {
    if group.dim() != ens.dim() {
        return Err(StochasticError::Argument("group and ensemble dimensions differ".into()));
    }
    if s == 0.0 {
        return Ok(ens.clone());
    }
    Ok(ens.map_states(|_, x, out| out.copy_from_slice(&group.phi(s, x))).with_spec(None))
}

/// Result of [`invariance_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub max_gap: f64,
    pub invariant: bool,
}

/// Samples `(x, v, s)` with `x` in the Lagrangian's region, complex `v`
/// in `[-2, 2] + i [-2, 2]` and `s` in `[-1, 1]`, and compares
/// `L(phi_s x, dphi_s v)` with `L(x, v)`.
pub fn invariance_check(l: &AdmissibleLagrangian, group: &DiffeoGroup, samples: usize, seed: u64) -> InvarianceReport {
    let d = l.dim();
    if group.dim() != d {
        return InvarianceReport {
            max_gap: f64::INFINITY,
            invariant: false,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap: f64 = 0.0;
    for _ in 0..samples {
        let x = sample_box(&mut rng, l.region());
        let v: Vec<C> = (0..d)
            .map(|_| C::new(uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0)))
            .collect();
        let s = uniform(&mut rng, -1.0, 1.0);
        let jac = group.dphi_dx(s, &x);
        let pushed: Vec<C> = (0..d).map(|i| (0..d).map(|j| v[j] * jac[i * d + j]).sum()).collect();
        let gap = (l.eval(&group.phi(s, &x), &pushed) - l.eval(&x, &v)).norm();
        max_gap = max_gap.max(if gap.is_nan() { f64::INFINITY } else { gap });
    }
    InvarianceReport {
        max_gap,
        invariant: max_gap <= INVARIANCE_TOL,
    }
}

/// A Monte Carlo mean with its standard error
/// `sqrt((Var Re + Var Im) / n)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: C,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[C]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<C>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).norm_sqr()).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            value: mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// `|value - target| <= k stderr`, with [`ARITHMETIC_TOL`] slack.
    pub fn within(&self, target: C, k: f64) -> bool {
        (self.value - target).norm() <= k * self.stderr + ARITHMETIC_TOL * (1.0 + target.norm())
    }
}

fn per_path<F>(n: usize, f: F) -> Result<Vec<C>, StochasticError>
where
    F: Fn(usize) -> Result<C, StochasticError> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Recorded indices and times covering `window`, both ends included.
fn window_indices(
    ens: &Ensemble,
    field: &dyn NelsonField,
    window: (f64, f64),
) -> Result<(Vec<usize>, Vec<f64>), StochasticError> {
    let (a, b) = window;
    if !(a < b) {
        return Err(StochasticError::Argument(format!("empty window ({a}, {b})")));
    }
    if a < field.t_min() - 1e-12 {
        return Err(NelsonError::BelowTmin { t: a, t_min: field.t_min() }.into());
    }
    let (ia, ib) = (ens.index_of_time(a)?, ens.index_of_time(b)?);
    if ib - ia < 2 {
        return Err(StochasticError::Argument("window needs at least three recorded times".into()));
    }
    let times = ens.times();
    Ok(((ia..=ib).collect(), times[ia..=ib].to_vec()))
}

fn check_dims(l: &AdmissibleLagrangian, ens: &Ensemble, field: &dyn NelsonField) -> Result<(), StochasticError> {
    if l.dim() != ens.dim() || field.dim() != ens.dim() {
        return Err(StochasticError::Argument("Lagrangian, ensemble and field dimensions differ".into()));
    }
    Ok(())
}

fn bilinear(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// `E[int_a^b L(X_t, D_mu X_t) dt]` by Simpson's rule on the recorded
/// times of each path and a Monte Carlo mean over paths.
pub fn action_functional(
    l: &AdmissibleLagrangian,
    ens: &Ensemble,
    field: &dyn NelsonField,
    mu: Mu,
    window: (f64, f64),
) -> Result<Estimate, StochasticError> {
    check_dims(l, ens, field)?;
    let (idx, times) = window_indices(ens, field, window)?;
    let values = per_path(ens.n_paths(), |p| {
        let mut row = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(&times) {
            let x = ens.state(p, i);
            let val = l.eval(x, &field.velocity(t, x, mu)?);
            if !(val.re.is_finite() && val.im.is_finite()) {
                return Err(StochasticError::NotFinite { path: p, t });
            }
            row.push(val);
        }
        Ok(simpson(&times, &row).expect("at least three points"))
    })?;
    Ok(Estimate::from_samples(&values))
}

/// Time profile of a deterministic variation on a window `(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Profile {
    Zero,
    /// `sin(pi (t - a) / (b - a))`.
    Sine,
    /// `exp(1 - 1 / (1 - r^2))` with `r = (2t - a - b) / (b - a)`, zero outside.
    Bump,
    /// `(t - a) / (b - a)`; does not vanish at `b`.
    Ramp,
    Constant,
}

/// The deterministic variation `Z(t) = profile(t) e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Variation {
    pub profile: Profile,
    pub direction: Vec<f64>,
}

impl Variation {
    pub fn new(profile: Profile, direction: Vec<f64>) -> Self {
        Variation { profile, direction }
    }

    /// Keys: `zero`, `sine`, `bump`, `ramp`, `constant`; direction all ones.
    pub fn from_key(key: &str, dim: usize) -> Result<Self, StochasticError> {
        let profile = match key {
            "zero" => Profile::Zero,
            "sine" => Profile::Sine,
            "bump" => Profile::Bump,
            "ramp" => Profile::Ramp,
            "constant" => Profile::Constant,
            _ => return Err(StochasticError::UnknownKey(key.to_string())),
        };
        Ok(Variation::new(profile, vec![1.0; dim]))
    }

    /// `(profile, d profile / dt)` at `t`.
    pub fn profile_at(&self, t: f64, window: (f64, f64)) -> (f64, f64) {
        let (a, b) = window;
        let w = b - a;
        match self.profile {
            Profile::Zero => (0.0, 0.0),
            Profile::Sine => {
                let k = std::f64::consts::PI / w;
                ((k * (t - a)).sin(), k * (k * (t - a)).cos())
            }
            Profile::Bump => {
                let r = (2.0 * t - a - b) / w;
                if r.abs() >= 1.0 {
                    return (0.0, 0.0);
                }
                let q = 1.0 - r * r;
                let z = (1.0 - 1.0 / q).exp();
                // d/dr = z * (-2 r / q^2), dr/dt = 2 / w
                (z, z * (-2.0 * r / (q * q)) * (2.0 / w))
            }
            Profile::Ramp => ((t - a) / w, 1.0 / w),
            Profile::Constant => (1.0, 0.0),
        }
    }
}

/// Variation space of the differential.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// `C^1` variations; the residual uses `D_{-mu}`.
    C1,
    /// Nelson-differentiable variations; the residual uses `D_mu`.
    N1,
}

/// `sum_j D_nu [dL/dv_j (X, D_mu X)](t, x) z_j` via the closed form of the field.
fn transported_momentum(
    l: &AdmissibleLagrangian,
    field: &dyn NelsonField,
    t: f64,
    x: &[f64],
    mu: Mu,
    nu: Mu,
) -> Result<Vec<C>, StochasticError> {
    let d = l.dim();
    let n = d + 1;
    let tj = Jet::variable(C::new(t, 0.0), 0, n);
    let xj: Vec<Jet<C>> = (0..d).map(|i| Jet::variable(C::new(x[i], 0.0), i + 1, n)).collect();
    let vj = field.velocity_jet(&tj, &xj, mu).ok_or(NelsonError::NotClosedForm)?;
    let f = l.d_v_jets(&xj, &vj);
    let drift = field.velocity(t, x, nu)?;
    let a = field.diffusion(t, x);
    let ito = C::new(0.0, 0.5 * nu.sign());
    Ok(f.iter().map(|fj| apply_generator(fj, &drift, &a, ito)).collect())
}

/// `dL/dx (x, D_mu X) - D_{-mu}[dL/dv (X, D_mu X)]` at `(t, x)`, with the
/// outer derivative applied to the closed-form field `f(t, x) = dL/dv`.
pub fn stochastic_el_residual(
    l: &AdmissibleLagrangian,
    field: &dyn NelsonField,
    t: f64,
    x: &[f64],
    mu: Mu,
) -> Result<Vec<C>, StochasticError> {
    if l.dim() != field.dim() || x.len() != l.dim() {
        return Err(StochasticError::Argument("dimension mismatch".into()));
    }
    let v = field.velocity(t, x, mu)?;
    let dx = l.d_x(x, &v);
    let transported = transported_momentum(l, field, t, x, mu, mu.flip())?;
    Ok(dx.iter().zip(&transported).map(|(a, b)| a - b).collect())
}

/// `E[r(t, X_t)]` per component for the closed-form residual `r`. Along
/// diffusions the residual is a mean-zero fluctuation at stationary
/// processes, so stationarity is judged on this expectation.
pub fn expected_el_residual(
    l: &AdmissibleLagrangian,
    ens: &Ensemble,
    field: &dyn NelsonField,
    t: f64,
    mu: Mu,
) -> Result<Vec<Estimate>, StochasticError> {
    check_dims(l, ens, field)?;
    let i = ens.index_of_time(t)?;
    let d = l.dim();
    let rows = (0..ens.n_paths())
        .map(|p| stochastic_el_residual(l, field, t, ens.state(p, i), mu))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..d)
        .map(|j| Estimate::from_samples(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect())
}

/// The same residual with `D_{-mu}` of the process `dL/dv (X_t, D_mu X_t)`
/// estimated from the ensemble by kernel regression.
pub fn stochastic_el_residual_empirical(
    l: &AdmissibleLagrangian,
    ens: &Ensemble,
    field: &dyn NelsonField,
    t: f64,
    x: &[f64],
    mu: Mu,
    opts: &Regression,
) -> Result<Vec<C>, StochasticError> {
    check_dims(l, ens, field)?;
    let d = l.dim();
    let momentum = |s: f64, y: &[f64], out: &mut [f64]| match field.velocity(s, y, mu) {
        Ok(v) => {
            for (j, p) in l.d_v(y, &v).into_iter().enumerate() {
                out[2 * j] = p.re;
                out[2 * j + 1] = p.im;
            }
        }
        Err(_) => out.fill(f64::NAN),
    };
    let pt = [x.to_vec()];
    let fwd = regress_increments(ens, &momentum, 2 * d, Direction::Forward, t, &pt, opts)?.remove(0);
    let bwd = regress_increments(ens, &momentum, 2 * d, Direction::Backward, t, &pt, opts)?.remove(0);
    if fwd.iter().chain(&bwd).any(|v| !v.is_finite()) {
        return Err(StochasticError::NotFinite { path: 0, t });
    }
    let v = field.velocity(t, x, mu)?;
    let dx = l.d_x(x, &v);
    let nu = mu.flip().sign();
    Ok((0..d)
        .map(|j| {
            let df = C::new(fwd[2 * j], fwd[2 * j + 1]);
            let db = C::new(bwd[2 * j], bwd[2 * j + 1]);
            let d_nu = (df + db) * 0.5 + C::new(0.0, nu) * (df - db) * 0.5;
            dx[j] - d_nu
        })
        .collect())
}

/// Gateaux differential of the action at `X` in the direction `Z`:
/// `E[int (dL/dx - D_nu dL/dv) . Z dt] + E[Z . dL/dv]_a^b` with
/// `nu = -mu` on `C^1` and `nu = mu` on `N^1`.
pub fn gateaux_differential(
    l: &AdmissibleLagrangian,
    ens: &Ensemble,
    field: &dyn NelsonField,
    z: &Variation,
    mu: Mu,
    space: Space,
    window: (f64, f64),
) -> Result<Estimate, StochasticError> {
    check_dims(l, ens, field)?;
    if z.direction.len() != l.dim() {
        return Err(StochasticError::Argument("variation direction has the wrong dimension".into()));
    }
    let (idx, times) = window_indices(ens, field, window)?;
    let nu = match space {
        Space::C1 => mu.flip(),
        Space::N1 => mu,
    };
    let zc: Vec<C> = z.direction.iter().map(|&e| C::new(e, 0.0)).collect();
    let values = per_path(ens.n_paths(), |p| {
        let mut row = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(&times) {
            let (prof, _) = z.profile_at(t, window);
            if prof == 0.0 {
                row.push(C::new(0.0, 0.0));
                continue;
            }
            let x = ens.state(p, i);
            let v = field.velocity(t, x, mu)?;
            let dx = l.d_x(x, &v);
            let tr = transported_momentum(l, field, t, x, mu, nu)?;
            let integrand: Vec<C> = dx.iter().zip(&tr).map(|(a, b)| a - b).collect();
            row.push(bilinear(&integrand, &zc) * prof);
        }
        let mut total = simpson(&times, &row).expect("at least three points");
        for (&i, &t, sign) in [(idx[0], times[0], -1.0), (idx[idx.len() - 1], times[times.len() - 1], 1.0)]
            .iter()
            .map(|(i, t, s)| (i, t, *s))
        {
            let (prof, _) = z.profile_at(t, window);
            if prof != 0.0 {
                let x = ens.state(p, i);
                let pv = l.d_v(x, &field.velocity(t, x, mu)?);
                total += bilinear(&pv, &zc) * (sign * prof);
            }
        }
        if !(total.re.is_finite() && total.im.is_finite()) {
            return Err(StochasticError::NotFinite { path: p, t: window.0 });
        }
        Ok(total)
    })?;
    Ok(Estimate::from_samples(&values))
}

/// `[F(X + eps Z) - F(X - eps Z)] / (2 eps)` on common paths; the velocity
/// of `X + eps Z` is `D_mu X + eps Z'` because `Z` is deterministic.
pub fn action_finite_difference(
    l: &AdmissibleLagrangian,
    ens: &Ensemble,
    field: &dyn NelsonField,
    z: &Variation,
    mu: Mu,
    window: (f64, f64),
    eps: f64,
) -> Result<Estimate, StochasticError> {
    check_dims(l, ens, field)?;
    let (idx, times) = window_indices(ens, field, window)?;
    let d = l.dim();
    let values = per_path(ens.n_paths(), |p| {
        let mut plus = Vec::with_capacity(idx.len());
        let mut minus = Vec::with_capacity(idx.len());
        for (&i, &t) in idx.iter().zip(&times) {
            let x = ens.state(p, i);
            let v = field.velocity(t, x, mu)?;
            let (prof, dprof) = z.profile_at(t, window);
            let shift = |s: f64| {
                let xs: Vec<f64> = (0..d).map(|j| x[j] + s * prof * z.direction[j]).collect();
                let vs: Vec<C> = (0..d).map(|j| v[j] + s * dprof * z.direction[j]).collect();
                l.eval(&xs, &vs)
            };
            plus.push(shift(eps));
            minus.push(shift(-eps));
        }
        let fp = simpson(&times, &plus).expect("at least three points");
        let fm = simpson(&times, &minus).expect("at least three points");
        let q = (fp - fm) / (2.0 * eps);
        if !(q.re.is_finite() && q.im.is_finite()) {
            return Err(StochasticError::NotFinite { path: p, t: window.0 });
        }
        Ok(q)
    })?;
    Ok(Estimate::from_samples(&values))
}

/// Closed-form differential against the finite difference of the action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DifferentialCheck {
    pub formula: Estimate,
    pub finite_difference: Estimate,
    /// `sqrt(stderr_formula^2 + stderr_fd^2)`.
    pub combined: f64,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn check_differential(
    l: &AdmissibleLagrangian,
    ens: &Ensemble,
    field: &dyn NelsonField,
    z: &Variation,
    mu: Mu,
    space: Space,
    window: (f64, f64),
) -> Result<DifferentialCheck, StochasticError> {
    let formula = gateaux_differential(l, ens, field, z, mu, space, window)?;
    let fd = action_finite_difference(l, ens, field, z, mu, window, FD_EPSILON)?;
    let combined = formula.stderr.hypot(fd.stderr);
    let gap = (formula.value - fd.value).norm();
    Ok(DifferentialCheck {
        formula,
        finite_difference: fd,
        combined,
        pass: gap <= 3.0 * combined + ARITHMETIC_TOL * (1.0 + fd.value.norm()),
    })
}

/// `Q(t) = E[dL/dv (X_t, D_mu X_t) . d phi_s(X_t)/ds |_{s=0}]` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoetherTrace {
    pub grid: Vec<f64>,
    pub q: Vec<C>,
    pub stderr: Vec<f64>,
    /// Time average of `q`.
    pub mean: C,
    /// `max_i |q_i - mean|`.
    pub drift: f64,
    /// `3 max_i stderr_i`, plus [`ARITHMETIC_TOL`] slack.
    pub threshold: f64,
    pub pass: bool,
}

impl NoetherTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,Re_Q,Im_Q,stderr")?;
        for i in 0..self.grid.len() {
            writeln!(w, "{},{},{},{}", self.grid[i], self.q[i].re, self.q[i].im, self.stderr[i])?;
        }
        Ok(())
    }

    pub fn write_verdict<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "drift,threshold,pass")?;
        writeln!(w, "{},{},{}", self.drift, self.threshold, self.pass)
    }
}

/// Evaluates the Noether quantity at every recorded time in `[t_from, t_to]`
/// (default: from the field's `t_min` to the end). Refuses groups under
/// which the Lagrangian is not invariant.
pub fn noether_quantity(
    l: &AdmissibleLagrangian,
    group: &DiffeoGroup,
    ens: &Ensemble,
    field: &dyn NelsonField,
    mu: Mu,
    range: Option<(f64, f64)>,
) -> Result<NoetherTrace, StochasticError> {
    check_dims(l, ens, field)?;
    let report = invariance_check(l, group, 1000, 0);
    if !report.invariant {
        return Err(StochasticError::NotInvariant { gap: report.max_gap });
    }
    let times = ens.times();
    let (from, to) = range.unwrap_or((field.t_min(), f64::INFINITY));
    let from = from.max(field.t_min());
    let idx: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] >= from - 1e-12 && times[i] <= to + 1e-12)
        .collect();
    if idx.is_empty() {
        return Err(StochasticError::Argument("no recorded times in range".into()));
    }
    let mut q = Vec::with_capacity(idx.len());
    let mut stderr = Vec::with_capacity(idx.len());
    for &i in &idx {
        let t = times[i];
        let values = per_path(ens.n_paths(), |p| {
            let x = ens.state(p, i);
            let pv = l.d_v(x, &field.velocity(t, x, mu)?);
            let gen: Vec<C> = group.dphi_ds_at0(x).into_iter().map(C::from).collect();
            Ok(bilinear(&pv, &gen))
        })?;
        let est = Estimate::from_samples(&values);
        q.push(est.value);
        stderr.push(est.stderr);
    }
    let mean = q.iter().sum::<C>() / q.len() as f64;
    let drift = q.iter().map(|v| (v - mean).norm()).fold(0.0, f64::max);
    let threshold = 3.0 * stderr.iter().cloned().fold(0.0, f64::max) + ARITHMETIC_TOL * (1.0 + mean.norm());
    Ok(NoetherTrace {
        grid: idx.iter().map(|&i| times[i]).collect(),
        q,
        stderr,
        mean,
        drift,
        threshold,
        pass: drift <= threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nelson::GaussianField;
    use crate::sde::{simulate, simulate_recorded, RecordPlan, SdeSpec};
    use std::f64::consts::PI;

    fn kinetic() -> AdmissibleLagrangian {
        AdmissibleLagrangian::with_default_region(Lagrangian::kinetic(1)).unwrap()
    }

    #[test]
    fn admissibility() {
        assert!(AdmissibleLagrangian::with_default_region(Lagrangian::momentum_free(1.0, 1, 2, 1)).is_err());
        assert!(AdmissibleLagrangian::with_default_region(Lagrangian::relativistic(1.0, 1)).is_err());
        assert!(AdmissibleLagrangian::new(Lagrangian::kinetic(2), vec![(0.0, 1.0)]).is_err());
    }

    #[test]
    fn partials() {
        let l = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic_potential(1.0, 1)).unwrap();
        let v = [C::new(1.0, -2.0)];
        assert_eq!(l.d_v(&[3.0], &v), vec![v[0]]);
        assert_eq!(l.d_x(&[3.0], &v), vec![C::new(6.0, 0.0)]);
        assert_eq!(l.eval(&[3.0], &v), v[0] * v[0] * 0.5 + 9.0);
    }

    #[test]
    fn group_axioms() {
        let region = vec![(-3.0, 3.0); 2];
        for g in [DiffeoGroup::Translation(vec![1.0, -0.5]), DiffeoGroup::Rotation2d, DiffeoGroup::Dilation(2)] {
            assert!(g.identity_gap(&region, 500, 1) <= 1e-12);
            assert!(g.group_gap(&region, 500, 2) <= 1e-9, "{g:?}");
        }
        assert_eq!(DiffeoGroup::from_key("rotation-2d", 2).unwrap(), DiffeoGroup::Rotation2d);
        assert!(DiffeoGroup::from_key("rotation-2d", 3).is_err());
        assert!(DiffeoGroup::from_key("shear", 2).is_err());
    }

    #[test]
    fn suspension_examples() {
        let ens = simulate(&SdeSpec::brownian(1), 20, 10, 3).unwrap();
        let shifted = suspend(&DiffeoGroup::Translation(vec![1.0]), &ens, 0.3).unwrap();
        for (a, b) in shifted.data().iter().zip(ens.data()) {
            assert_eq!(*a, b + 0.3);
        }
        assert_eq!(shifted.times(), ens.times());
        assert_eq!(shifted.seed(), ens.seed());
        let same = suspend(&DiffeoGroup::Translation(vec![1.0]), &ens, 0.0).unwrap();
        assert!(same.data().iter().zip(ens.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let planar = simulate(&SdeSpec::brownian(2), 10, 10, 4).unwrap();
        let rotated = suspend(&DiffeoGroup::Rotation2d, &planar, PI / 2.0).unwrap();
        for (r, p) in rotated.data().chunks(2).zip(planar.data().chunks(2)) {
            assert!((r[0] + p[1]).abs() < 1e-15 && (r[1] - p[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn invariance_examples() {
        let free = kinetic();
        let tr = DiffeoGroup::Translation(vec![1.0]);
        assert_eq!(invariance_check(&free, &tr, 1000, 0).max_gap, 0.0);
        let planar = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic(2)).unwrap();
        assert!(invariance_check(&planar, &DiffeoGroup::Rotation2d, 1000, 0).invariant);
        let pot = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic_potential(1.0, 1)).unwrap();
        let rep = invariance_check(&pot, &tr, 1000, 0);
        assert!(!rep.invariant && rep.max_gap > 1.0);
        // |2 s x + s^2| at a single point
        let (x, s) = (0.7, 0.4);
        let gap = (pot.eval(&[x + s], &[C::new(1.0, 0.0)]) - pot.eval(&[x], &[C::new(1.0, 0.0)])).norm();
        assert!((gap - (2.0 * s * x + s * s)).abs() < 1e-15);
    }

    #[test]
    fn el_residual_examples() {
        let l = kinetic();
        let bm = GaussianField::from_spec(&SdeSpec::brownian(1)).unwrap();
        let r = stochastic_el_residual(&l, &bm, 1.0, &[2.0], Mu::Plus).unwrap();
        assert!((r[0] - C::new(0.0, -1.0)).norm() < 1e-10);
        let line = GaussianField::from_spec(&SdeSpec::deterministic(0.8, 1)).unwrap();
        assert!(stochastic_el_residual(&l, &line, 0.4, &[1.0], Mu::Plus).unwrap()[0].norm() < 1e-12);
        let parabola = GaussianField::from_spec(&SdeSpec::linear(0.0, 2.0, 0.0, 0.0, 1)).unwrap();
        let r = stochastic_el_residual(&l, &parabola, 0.6, &[0.36], Mu::Minus).unwrap();
        assert!((r[0] + 2.0).norm() < 1e-12);
    }

    #[test]
    fn deterministic_action_and_differentials() {
        let l = kinetic();
        let spec = SdeSpec::deterministic(1.0, 1);
        let ens = simulate(&spec, 2, 100, 0).unwrap();
        let field = GaussianField::from_spec(&spec).unwrap();
        let a = action_functional(&l, &ens, &field, Mu::Plus, (0.0, 1.0)).unwrap();
        assert!((a.value - 0.5).norm() < 1e-12 && a.stderr == 0.0);

        let bump = Variation::from_key("bump", 1).unwrap();
        for space in [Space::C1, Space::N1] {
            let g = gateaux_differential(&l, &ens, &field, &bump, Mu::Plus, space, (0.0, 1.0)).unwrap();
            assert!(g.value.norm() < 1e-12);
        }
        let zero = Variation::from_key("zero", 1).unwrap();
        let g = gateaux_differential(&l, &ens, &field, &zero, Mu::Minus, Space::C1, (0.0, 1.0)).unwrap();
        assert_eq!(g.value, C::new(0.0, 0.0));

        let spec = SdeSpec::linear(0.0, 2.0, 0.0, 0.0, 1);
        let ens = simulate(&spec, 2, 1000, 0).unwrap();
        let field = GaussianField::from_spec(&spec).unwrap();
        let sine = Variation::from_key("sine", 1).unwrap();
        let chk = check_differential(&l, &ens, &field, &sine, Mu::Plus, Space::C1, (0.0, 1.0)).unwrap();
        assert!((chk.formula.value - (-4.0 / PI)).norm() < 1e-4);
        assert!((chk.finite_difference.value - (-4.0 / PI)).norm() < 1e-4);
        assert!(chk.pass);
    }

    #[test]
    fn window_checks() {
        let ens = simulate(&SdeSpec::brownian(1), 2, 100, 0).unwrap();
        let f = GaussianField::from_spec(&SdeSpec::brownian(1)).unwrap();
        assert!(matches!(
            action_functional(&kinetic(), &ens, &f, Mu::Plus, (0.0, 1.0)),
            Err(StochasticError::Nelson(NelsonError::BelowTmin { .. }))
        ));
        assert!(action_functional(&kinetic(), &ens, &f, Mu::Plus, (0.5, 0.5)).is_err());
        assert!(action_functional(&kinetic(), &ens, &f, Mu::Plus, (0.505, 1.0)).is_err());
    }

    #[test]
    fn noether_refuses_non_invariant_pairs() {
        let spec = SdeSpec::constant_drift(0.7, 0.5, 1);
        let ens = simulate_recorded(&spec, 100, 100, 1, &RecordPlan::Every(10)).unwrap();
        let field = GaussianField::from_spec(&spec).unwrap();
        let pot = AdmissibleLagrangian::with_default_region(Lagrangian::kinetic_potential(1.0, 1)).unwrap();
        assert!(matches!(
            noether_quantity(&pot, &DiffeoGroup::Translation(vec![1.0]), &ens, &field, Mu::Plus, None),
            Err(StochasticError::NotInvariant { .. })
        ));
    }

    #[test]
    fn trace_csv() {
        let trace = NoetherTrace {
            grid: vec![0.5],
            q: vec![C::new(0.7, -0.1)],
            stderr: vec![0.01],
            mean: C::new(0.7, -0.1),
            drift: 0.0,
            threshold: 0.03,
            pass: true,
        };
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        trace.write_verdict(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "t,Re_Q,Im_Q,stderr\n0.5,0.7,-0.1,0.01\ndrift,threshold,pass\n0,0.03,true\n"
        );
    }
}
