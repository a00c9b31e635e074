//! Forward and backward stochastic derivatives, the complex velocity
//! `D_mu = (D + D_*) / 2 + i mu (D - D_*) / 2`, and their estimation from
//! ensembles by kernel regression on the current state.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use thiserror::Error;

use crate::jet::{Jet, Scalar};
use crate::sde::{mean_var, silverman_bandwidth, DensityEstimate, Diffusion, Drift, Ensemble, InitialState, SdeError, SdeSpec};

/// Nelson quantities are evaluated on `t >= t_start + DEFAULT_T_MIN` when the
/// initial state is deterministic, where the backward drift is singular.
pub const DEFAULT_T_MIN: f64 = 0.1;
/// Fewest samples within one bandwidth of the evaluation point.
pub const MIN_LOCAL_PATHS: usize = 50;
/// Bins per bandwidth for the binned kernel regression.
const BINS_PER_BANDWIDTH: f64 = 40.0;

type C = Complex64;

#[derive(Debug, Error)]
pub enum NelsonError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("backward drift needs a density at t={t}")]
    MissingDensity { t: f64 },
    #[error("t={t} is below t_min={t_min}")]
    BelowTmin { t: f64, t_min: f64 },
    #[error("only {count} samples near x={x:?} at t={t}; need {needed}")]
    InsufficientData { t: f64, x: Vec<f64>, count: usize, needed: usize },
    #[error("field has no closed form for this operation")]
    NotClosedForm,
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// The sign `mu` in `D_mu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mu {
    Plus,
    Minus,
}

impl Mu {
    pub fn sign(self) -> f64 {
        match self {
            Mu::Plus => 1.0,
            Mu::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Mu {
        match self {
            Mu::Plus => Mu::Minus,
            Mu::Minus => Mu::Plus,
        }
    }
}

impl TryFrom<i32> for Mu {
    type Error = NelsonError;

    fn try_from(v: i32) -> Result<Self, NelsonError> {
        match v {
            1 => Ok(Mu::Plus),
            -1 => Ok(Mu::Minus),
            _ => Err(NelsonError::Argument(format!("mu must be +1 or -1, got {v}"))),
        }
    }
}

/// `(D + D_*) / 2 + i mu (D - D_*) / 2`, componentwise.
pub fn d_mu(forward: &[f64], backward: &[f64], mu: Mu) -> Vec<C> {
    forward
        .iter()
        .zip(backward)
        .map(|(&f, &b)| C::new(0.5 * (f + b), mu.sign() * 0.5 * (f - b)))
        .collect()
}

/// `(1 - e^{-u}) / u`, by its series near zero.
fn phi1<S: Scalar>(u: &S) -> S {
    if u.real_part().abs() < 1e-2 {
        series(u, &[1.0, -1.0 / 2.0, 1.0 / 6.0, -1.0 / 24.0, 1.0 / 120.0, -1.0 / 720.0, 1.0 / 5040.0])
    } else {
        (S::from_f64(1.0) - (-u.clone()).exp()) / u.clone()
    }
}

/// `(u - 1 + e^{-u}) / u^2`, by its series near zero.
fn phi2<S: Scalar>(u: &S) -> S {
    if u.real_part().abs() < 1e-2 {
        series(u, &[1.0 / 2.0, -1.0 / 6.0, 1.0 / 24.0, -1.0 / 120.0, 1.0 / 720.0, -1.0 / 5040.0, 1.0 / 40320.0])
    } else {
        (u.clone() - S::from_f64(1.0) + (-u.clone()).exp()) / (u.clone() * u.clone())
    }
}

fn series<S: Scalar>(u: &S, coeffs: &[f64]) -> S {
    coeffs
        .iter()
        .rev()
        .fold(S::from_f64(0.0), |acc, &c| acc * u.clone() + S::from_f64(c))
}

/// Forward drift, backward drift and diffusion `a = sigma sigma^T` of a
/// diffusion process.
pub trait NelsonField: Send + Sync {
    fn dim(&self) -> usize;

    fn forward(&self, t: f64, x: &[f64]) -> Vec<f64>;

    fn backward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, NelsonError>;

    /// Row-major `d x d`.
    fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64>;

    /// Earliest time at which the backward drift is trusted.
    fn t_min(&self) -> f64;

    /// `D_mu X` as jets in the variables `(t, x_1, ..., x_d)`, for fields
    /// with a closed form.
    fn velocity_jet(&self, _t: &Jet<C>, _x: &[Jet<C>], _mu: Mu) -> Option<Vec<Jet<C>>> {
        None
    }

    fn velocity(&self, t: f64, x: &[f64], mu: Mu) -> Result<Vec<C>, NelsonError> {
        Ok(d_mu(&self.forward(t, x), &self.backward(t, x)?, mu))
    }
}

/// Closed-form field of the linear family `b_i = c0_i + c1_i t - theta_i x_i`
/// with constant diagonal `sigma` and a fixed or Gaussian initial state.
/// The marginals are Gaussian, so the backward drift is
/// `b + a (x - m(t)) / V(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    t_start: f64,
    t_min: f64,
    /// `c0 + c1 t_start`, so the drift reads `c0 + c1 tau - theta x`.
    c0: Vec<f64>,
    c1: Vec<f64>,
    theta: Vec<f64>,
    sigma: Vec<f64>,
    x0: Vec<f64>,
    v0: Vec<f64>,
}

impl GaussianField {
    pub fn from_spec(spec: &SdeSpec) -> Result<Self, NelsonError> {
        let (Drift::Linear { c0, c1, theta }, Diffusion::Diagonal(sigma)) = (spec.drift(), spec.diffusion()) else {
            return Err(NelsonError::NotClosedForm);
        };
        let (x0, v0) = match spec.x0() {
            InitialState::Fixed(x) => (x.clone(), vec![0.0; x.len()]),
            InitialState::Gaussian { mean, std } => (mean.clone(), std.iter().map(|s| s * s).collect()),
        };
        let t_start = spec.horizon().0;
        let singular = v0.iter().zip(sigma).any(|(&v, &s)| v == 0.0 && s != 0.0);
        Ok(GaussianField {
            t_start,
            t_min: if singular { t_start + DEFAULT_T_MIN } else { t_start },
            c0: c0.iter().zip(c1).map(|(a, b)| a + b * t_start).collect(),
            c1: c1.clone(),
            theta: theta.clone(),
            sigma: sigma.clone(),
            x0,
            v0,
        })
    }

    pub fn with_t_min(mut self, t_min: f64) -> Self {
        self.t_min = t_min;
        self
    }

    /// Mean and variance of component `i` at time `t`.
    pub fn moments<S: Scalar>(&self, i: usize, t: &S) -> (S, S) {
        let tau = t.clone() - S::from_f64(self.t_start);
        let (c0, c1, th, s2) = (self.c0[i], self.c1[i], self.theta[i], self.sigma[i] * self.sigma[i]);
        let u = tau.scale(th);
        let e = (-u.clone()).exp();
        // m = x0 e + c0 tau phi1(u) + c1 tau^2 phi2(u), V = v0 e^2 + s2 tau phi1(2u)
        let m = e.scale(self.x0[i])
            + (tau.clone() * phi1(&u)).scale(c0)
            + (tau.clone() * tau.clone() * phi2(&u)).scale(c1);
        let v = (e.clone() * e).scale(self.v0[i]) + (tau * phi1(&u.scale(2.0))).scale(s2);
        (m, v)
    }

    /// `1/V` and `m/V` with their first two time derivatives. The moments
    /// solve `m' = c0 + c1 tau - theta m` and `V' = sigma^2 - 2 theta V`.
    fn inverse_moment_derivatives(&self, i: usize, t: f64) -> ([f64; 3], [f64; 3]) {
        let (m, v) = self.moments(i, &t);
        let (c1, th, s2) = (self.c1[i], self.theta[i], self.sigma[i] * self.sigma[i]);
        let m1 = self.c0[i] + c1 * (t - self.t_start) - th * m;
        let m2 = c1 - th * m1;
        let v1 = s2 - 2.0 * th * v;
        let v2 = -2.0 * th * v1;
        let r = 1.0 / v;
        let r1 = -v1 * r * r;
        let r2 = -v2 * r * r + 2.0 * v1 * v1 * r * r * r;
        ([r, r1, r2], [m * r, m1 * r + m * r1, m2 * r + 2.0 * m1 * r1 + m * r2])
    }

    fn drift_generic<S: Scalar>(&self, i: usize, t: &S, x: &S) -> S {
        let tau = t.clone() - S::from_f64(self.t_start);
        S::from_f64(self.c0[i]) + tau.scale(self.c1[i]) - x.scale(self.theta[i])
    }

    /// `a (x - m) / V`, zero where `a = 0` or the density is below the floor.
    fn correction_generic<S: Scalar>(&self, i: usize, t: &S, x: &S, tail: f64) -> S {
        let a = self.sigma[i] * self.sigma[i];
        if a == 0.0 || tail > 2.0 * (1.0 / crate::sde::DENSITY_FLOOR).ln() {
            return S::from_f64(0.0);
        }
        let (m, v) = self.moments(i, t);
        (x.clone() - m) / v * S::from_f64(a)
    }

    /// `(x - m)^2 / V` summed over components, the log-density drop from the peak.
    fn tail(&self, t: f64, x: &[f64]) -> f64 {
        (0..self.c0.len())
            .map(|i| {
                let (m, v) = self.moments(i, &t);
                if v > 0.0 {
                    (x[i] - m) * (x[i] - m) / v
                } else {
                    0.0
                }
            })
            .sum()
    }

    fn check_t(&self, t: f64) -> Result<(), NelsonError> {
        if t < self.t_min - 1e-12 {
            return Err(NelsonError::BelowTmin { t, t_min: self.t_min });
        }
        Ok(())
    }

    /// Closed-form marginal density of component `i`.
    pub fn density(&self, i: usize, t: f64, x: f64) -> f64 {
        let (m, v) = self.moments(i, &t);
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
    }
}

impl NelsonField for GaussianField {
    fn dim(&self) -> usize {
        self.c0.len()
    }

    fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|i| self.drift_generic(i, &t, &x[i])).collect()
    }

    fn backward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, NelsonError> {
        self.check_t(t)?;
        let tail = self.tail(t, x);
        Ok((0..self.dim())
            .map(|i| self.drift_generic(i, &t, &x[i]) + self.correction_generic(i, &t, &x[i], tail))
            .collect())
    }

    fn diffusion(&self, _t: f64, _x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = self.sigma[i] * self.sigma[i];
        }
        a
    }

    fn t_min(&self) -> f64 {
        self.t_min
    }

    fn velocity_jet(&self, t: &Jet<C>, x: &[Jet<C>], mu: Mu) -> Option<Vec<Jet<C>>> {
        let tf = t.value.re;
        let xf: Vec<f64> = x.iter().map(|j| j.value.re).collect();
        let tail = self.tail(tf, &xf);
        // D_mu = b + (1 - i mu) / 2 * correction
        let w = C::new(0.5, -0.5 * mu.sign());
        let floor = 2.0 * (1.0 / crate::sde::DENSITY_FLOOR).ln();
        // The moments depend on t alone: differentiate 1/V and m/V in t once
        // and compose with the jet of t, which is much cheaper than
        // pushing the full jet through the moment formulas.
        let lift = |f: [f64; 3]| t.chain(C::from(f[0]), C::from(f[1]), C::from(f[2]));
        Some(
            (0..self.dim())
                .map(|i| {
                    let drift = self.drift_generic(i, t, &x[i]);
                    let a = self.sigma[i] * self.sigma[i];
                    if a == 0.0 || tail > floor {
                        return drift;
                    }
                    let (r, q) = self.inverse_moment_derivatives(i, tf);
                    let corr = x[i].clone() * lift(r) - lift(q);
                    drift + scale_jet_by(&corr, w * a)
                })
                .collect(),
        )
    }
}

fn scale_jet_by(j: &Jet<C>, c: C) -> Jet<C> {
    j.map_base(|v| v * c)
}

/// Forward drift read from an arbitrary spec; no backward drift.
#[derive(Clone, Debug)]
pub struct SpecField {
    spec: SdeSpec,
}

impl SpecField {
    pub fn new(spec: SdeSpec) -> Self {
        SpecField { spec }
    }
}

impl NelsonField for SpecField {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        forward_analytic(&self.spec, t, x)
    }

    fn backward(&self, t: f64, _x: &[f64]) -> Result<Vec<f64>, NelsonError> {
        Err(NelsonError::MissingDensity { t })
    }

    fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.spec.a_at(t, x)
    }

    fn t_min(&self) -> f64 {
        self.spec.horizon().0 + DEFAULT_T_MIN
    }
}

/// `DX(t) = b(t, x)`.
pub fn forward_analytic(spec: &SdeSpec, t: f64, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.dim()];
    spec.drift_at(t, x, &mut out);
    out
}

/// `b - d_x(a p) / p` for a one-dimensional spec and an estimated density;
/// the correction is zero where the density is below its floor.
pub fn backward_analytic(
    spec: &SdeSpec,
    density: Option<&DensityEstimate>,
    t: f64,
    x: f64,
) -> Result<f64, NelsonError> {
    let density = density.ok_or(NelsonError::MissingDensity { t })?;
    if spec.dim() != 1 {
        return Err(NelsonError::Argument("estimated densities need d = 1".into()));
    }
    if (density.t - t).abs() > 1e-9 {
        return Err(NelsonError::Argument(format!("density is for t={}, not t={t}", density.t)));
    }
    let b = forward_analytic(spec, t, &[x])[0];
    let (p, dp) = density.eval(x);
    if p <= 0.0 || p < density.floor {
        return Ok(b);
    }
    let a = spec.a_at(t, &[x])[0];
    let eps = 1e-6 * (1.0 + x.abs());
    let da = (spec.a_at(t, &[x + eps])[0] - spec.a_at(t, &[x - eps])[0]) / (2.0 * eps);
    Ok(b - (da + a * dp / p))
}

/// Backward drift from kernel density estimates at a set of times.
#[derive(Clone, Debug)]
pub struct KdeField {
    spec: SdeSpec,
    densities: Vec<DensityEstimate>,
    t_min: f64,
}

impl KdeField {
    pub fn new(spec: SdeSpec, densities: Vec<DensityEstimate>) -> Result<Self, NelsonError> {
        if spec.dim() != 1 {
            return Err(NelsonError::Argument("estimated densities need d = 1".into()));
        }
        let t_min = spec.horizon().0 + DEFAULT_T_MIN;
        Ok(KdeField { spec, densities, t_min })
    }
}

impl NelsonField for KdeField {
    fn dim(&self) -> usize {
        1
    }

    fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        forward_analytic(&self.spec, t, x)
    }

    fn backward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, NelsonError> {
        if t < self.t_min - 1e-12 {
            return Err(NelsonError::BelowTmin { t, t_min: self.t_min });
        }
        let d = self.densities.iter().find(|d| (d.t - t).abs() <= 1e-9);
        Ok(vec![backward_analytic(&self.spec, d, t, x[0])?])
    }

    fn diffusion(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.spec.a_at(t, x)
    }

    fn t_min(&self) -> f64 {
        self.t_min
    }
}

/// One-dimensional field tabulated on a `(t, x)` grid and interpolated
/// bilinearly; `x` outside the table is clamped to its edge.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedField {
    times: Vec<f64>,
    xs: Vec<f64>,
    /// `forward[i * xs.len() + j]` at `(times[i], xs[j])`.
    forward: Vec<f64>,
    backward: Vec<f64>,
    a: f64,
    t_min: f64,
}

impl TabulatedField {
    pub fn new(
        times: Vec<f64>,
        xs: Vec<f64>,
        forward: Vec<f64>,
        backward: Vec<f64>,
        a: f64,
    ) -> Result<Self, NelsonError> {
        let n = times.len() * xs.len();
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if times.is_empty() || xs.len() < 2 || forward.len() != n || backward.len() != n {
            return Err(NelsonError::Argument("table shape mismatch".into()));
        }
        if !increasing(&times) || !increasing(&xs) {
            return Err(NelsonError::Argument("table axes must be increasing".into()));
        }
        let t_min = times[0];
        Ok(TabulatedField { times, xs, forward, backward, a, t_min })
    }

    /// Tabulates empirical drifts of a one-dimensional ensemble.
    pub fn estimate(ens: &Ensemble, times: &[f64], xs: &[f64], opts: &Regression) -> Result<Self, NelsonError> {
        if ens.dim() != 1 {
            return Err(NelsonError::Argument("tabulated fields are one-dimensional".into()));
        }
        let points: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for &t in times {
            fwd.extend(estimate_drift(ens, Direction::Forward, t, &points, opts)?.into_iter().map(|v| v[0]));
            bwd.extend(estimate_drift(ens, Direction::Backward, t, &points, opts)?.into_iter().map(|v| v[0]));
        }
        let a = match ens.spec() {
            Some(spec) => spec.a_at(times[0], &[0.0])[0],
            None => return Err(NelsonError::Argument("ensemble has no spec for the diffusion".into())),
        };
        Self::new(times.to_vec(), xs.to_vec(), fwd, bwd, a)
    }

    fn interp(&self, table: &[f64], t: f64, x: f64) -> f64 {
        let locate = |axis: &[f64], v: f64| {
            if axis.len() == 1 {
                return (0, 0, 0.0);
            }
            let v = v.clamp(axis[0], axis[axis.len() - 1]);
            let i = axis.partition_point(|&a| a <= v).clamp(1, axis.len() - 1);
            (i - 1, i, (v - axis[i - 1]) / (axis[i] - axis[i - 1]))
        };
        let (t0, t1, wt) = locate(&self.times, t);
        let (x0, x1, wx) = locate(&self.xs, x);
        let n = self.xs.len();
        let at = |i: usize, j: usize| table[i * n + j];
        let row = |i: usize| at(i, x0) + wx * (at(i, x1) - at(i, x0));
        row(t0) + wt * (row(t1) - row(t0))
    }
}

impl NelsonField for TabulatedField {
    fn dim(&self) -> usize {
        1
    }

    fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        vec![self.interp(&self.forward, t, x[0])]
    }

    fn backward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, NelsonError> {
        Ok(vec![self.interp(&self.backward, t, x[0])])
    }

    fn diffusion(&self, _t: f64, _x: &[f64]) -> Vec<f64> {
        vec![self.a]
    }

    fn t_min(&self) -> f64 {
        self.t_min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Increments `(X_{t+h} - X_t) / h`.
    Forward,
    /// Increments `(X_t - X_{t-h}) / h`.
    Backward,
}

/// Settings of the kernel regression behind the empirical estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Regression {
    /// Lag `h` in grid steps.
    pub lag_steps: usize,
    /// Kernel width; `None` uses Silverman's rule on `X_t`.
    pub bandwidth: Option<f64>,
    /// Width of a time window centered at `t`: increments based at every
    /// recorded time in the window are pooled. Zero uses `t` alone.
    pub window: f64,
    /// Combine lags `h` and `h / 2` as `2 m(h/2) - m(h)`.
    pub extrapolate: bool,
    pub min_local: usize,
}

impl Default for Regression {
    fn default() -> Self {
        Regression {
            lag_steps: 1,
            bandwidth: None,
            window: 0.0,
            extrapolate: false,
            min_local: MIN_LOCAL_PATHS,
        }
    }
}

/// `h^{-1} E[X_{t+h} - X_t | X_t = x]`, Nadaraya–Watson with lag `h` (in
/// time units, a multiple of the grid step).
pub fn forward_empirical(
    ens: &Ensemble,
    t: f64,
    x: &[f64],
    h: f64,
    bandwidth: Option<f64>,
) -> Result<Vec<f64>, NelsonError> {
    let opts = Regression {
        lag_steps: lag_in_steps(ens, h)?,
        bandwidth,
        ..Regression::default()
    };
    Ok(estimate_drift(ens, Direction::Forward, t, &[x.to_vec()], &opts)?.remove(0))
}

/// `h^{-1} E[X_t - X_{t-h} | X_t = x]`.
pub fn backward_empirical(
    ens: &Ensemble,
    t: f64,
    x: &[f64],
    h: f64,
    bandwidth: Option<f64>,
) -> Result<Vec<f64>, NelsonError> {
    let opts = Regression {
        lag_steps: lag_in_steps(ens, h)?,
        bandwidth,
        ..Regression::default()
    };
    Ok(estimate_drift(ens, Direction::Backward, t, &[x.to_vec()], &opts)?.remove(0))
}

fn lag_in_steps(ens: &Ensemble, h: f64) -> Result<usize, NelsonError> {
    let k = (h / ens.dt()).round();
    if k < 1.0 || (k * ens.dt() - h).abs() > 1e-9 * ens.dt() {
        return Err(NelsonError::Argument(format!("lag {h} is not a positive multiple of dt={}", ens.dt())));
    }
    Ok(k as usize)
}

/// Empirical drift of the process itself at several points.
pub fn estimate_drift(
    ens: &Ensemble,
    dir: Direction,
    t: f64,
    points: &[Vec<f64>],
    opts: &Regression,
) -> Result<Vec<Vec<f64>>, NelsonError> {
    let d = ens.dim();
    regress_increments(ens, &|_, x: &[f64], out: &mut [f64]| out.copy_from_slice(x), d, dir, t, points, opts)
}

/// Kernel regression of the increments of `g(s, X_s)` (a vector of length
/// `out_dim`) over lag `h`, conditioned on `X_s`, at each point.
pub fn regress_increments(
    ens: &Ensemble,
    g: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    out_dim: usize,
    dir: Direction,
    t: f64,
    points: &[Vec<f64>],
    opts: &Regression,
) -> Result<Vec<Vec<f64>>, NelsonError> {
    if opts.lag_steps == 0 {
        return Err(NelsonError::Argument("lag must be at least one step".into()));
    }
    if points.iter().any(|p| p.len() != ens.dim()) {
        return Err(NelsonError::Argument("point dimension mismatch".into()));
    }
    if !opts.extrapolate {
        return regress_lag(ens, g, out_dim, dir, t, points, opts, opts.lag_steps);
    }
    if opts.lag_steps % 2 != 0 {
        return Err(NelsonError::Argument("extrapolation needs an even lag".into()));
    }
    let full = regress_lag(ens, g, out_dim, dir, t, points, opts, opts.lag_steps)?;
    let half = regress_lag(ens, g, out_dim, dir, t, points, opts, opts.lag_steps / 2)?;
    Ok(full
        .into_iter()
        .zip(half)
        .map(|(f, h)| f.iter().zip(&h).map(|(a, b)| 2.0 * b - a).collect())
        .collect())
}

/// Base recorded indices of the pooled increments and their partners.
fn increment_pairs(ens: &Ensemble, dir: Direction, t: f64, window: f64, lag: usize) -> Result<Vec<(usize, usize)>, NelsonError> {
    let centre = ens.step_of_time(t)?;
    let half = (0.5 * window / ens.dt() + 1e-9).floor() as usize;
    let lo = centre.saturating_sub(half);
    let hi = (centre + half).min(ens.steps_total());
    let mut pairs = Vec::new();
    for &k in ens.recorded_steps().iter().filter(|&&k| k >= lo && k <= hi) {
        let partner = match dir {
            Direction::Forward => k.checked_add(lag).filter(|&p| p <= ens.steps_total()),
            Direction::Backward => k.checked_sub(lag),
        };
        if let (Some(p), Some(i)) = (partner.and_then(|p| ens.index_of_step(p)), ens.index_of_step(k)) {
            pairs.push((i, p));
        }
    }
    if ens.index_of_step(centre).is_none() {
        return Err(NelsonError::Sde(SdeError::OffGrid { t }));
    }
    if pairs.is_empty() {
        return Err(NelsonError::Argument(format!("no recorded increments of lag {lag} steps at t={t}")));
    }
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn regress_lag(
    ens: &Ensemble,
    g: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    out_dim: usize,
    dir: Direction,
    t: f64,
    points: &[Vec<f64>],
    opts: &Regression,
    lag: usize,
) -> Result<Vec<Vec<f64>>, NelsonError> {
    let pairs = increment_pairs(ens, dir, t, opts.window, lag)?;
    let d = ens.dim();
    let centre = ens.index_of_time(t)?;
    let bw: Vec<f64> = (0..d)
        .map(|j| match opts.bandwidth {
            Some(b) if b > 0.0 && b.is_finite() => Ok(b),
            Some(b) => Err(NelsonError::Argument(format!("bandwidth {b} must be positive"))),
            None => Ok(silverman_bandwidth(&ens.marginal(centre, j))),
        })
        .collect::<Result<_, _>>()?;
    if bw.iter().any(|&b| !(b > 0.0)) {
        return Err(NelsonError::Argument(format!("degenerate ensemble at t={t}; give a bandwidth")));
    }
    let h = lag as f64 * ens.dt();
    let times = ens.times();
    // For each path and pair: the conditioning state and the scaled increment.
    let sample = |p: usize, (i, q): (usize, usize), gi: &mut [f64], gq: &mut [f64], inc: &mut [f64]| {
        g(times[i], ens.state(p, i), gi);
        g(times[q], ens.state(p, q), gq);
        let s = match dir {
            Direction::Forward => 1.0 / h,
            Direction::Backward => -1.0 / h,
        };
        for k in 0..out_dim {
            inc[k] = s * (gq[k] - gi[k]);
        }
    };
    if d == 1 {
        binned_regression(ens, &pairs, out_dim, &sample, bw[0], t, points, opts.min_local)
    } else {
        exact_regression(ens, &pairs, out_dim, &sample, &bw, t, points, opts.min_local)
    }
}

type Sampler<'a> = dyn Fn(usize, (usize, usize), &mut [f64], &mut [f64], &mut [f64]) + Sync + 'a;

/// One-dimensional Nadaraya–Watson on a linearly binned design.
#[allow(clippy::too_many_arguments)]
fn binned_regression(
    ens: &Ensemble,
    pairs: &[(usize, usize)],
    out_dim: usize,
    sample: &Sampler<'_>,
    bw: f64,
    t: f64,
    points: &[Vec<f64>],
    min_local: usize,
) -> Result<Vec<Vec<f64>>, NelsonError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in 0..ens.n_paths() {
        for &(i, _) in pairs {
            let x = ens.state(p, i)[0];
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let delta = bw / BINS_PER_BANDWIDTH;
    let nb = ((hi - lo) / delta).ceil() as usize + 2;
    // Per bin: weight, then out_dim weighted increment sums.
    let stride = 1 + out_dim;
    let accumulate = |paths: std::ops::Range<usize>| {
        let mut bins = vec![0.0; nb * stride];
        let mut gi = vec![0.0; out_dim];
        let mut gq = vec![0.0; out_dim];
        let mut inc = vec![0.0; out_dim];
        for p in paths {
            for &pair in pairs {
                let x = ens.state(p, pair.0)[0];
                sample(p, pair, &mut gi, &mut gq, &mut inc);
                let pos = (x - lo) / delta;
                let b = (pos.floor() as usize).min(nb - 2);
                let w1 = pos - b as f64;
                let w0 = 1.0 - w1;
                bins[b * stride] += w0;
                bins[(b + 1) * stride] += w1;
                for k in 0..out_dim {
                    bins[b * stride + 1 + k] += w0 * inc[k];
                    bins[(b + 1) * stride + 1 + k] += w1 * inc[k];
                }
            }
        }
        bins
    };
    let bins = sum_chunks(ens.n_paths(), nb * stride, &accumulate);

    let reach = (8.0 * BINS_PER_BANDWIDTH) as isize;
    points
        .iter()
        .map(|pt| {
            let x = pt[0];
            let centre = ((x - lo) / delta).round() as isize;
            let (mut den, mut count) = (0.0, 0.0);
            let mut num = vec![0.0; out_dim];
            for b in (centre - reach).max(0)..(centre + reach + 1).min(nb as isize) {
                let c = lo + b as f64 * delta;
                let z = (c - x) / bw;
                let k = (-0.5 * z * z).exp();
                let row = &bins[b as usize * stride..(b as usize + 1) * stride];
                den += k * row[0];
                for (n, v) in num.iter_mut().zip(&row[1..]) {
                    *n += k * v;
                }
                if z.abs() <= 1.0 {
                    count += row[0];
                }
            }
            let count = count.round() as usize;
            if count < min_local || den <= 0.0 {
                return Err(NelsonError::InsufficientData {
                    t,
                    x: pt.clone(),
                    count,
                    needed: min_local,
                });
            }
            Ok(num.into_iter().map(|n| n / den).collect())
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn exact_regression(
    ens: &Ensemble,
    pairs: &[(usize, usize)],
    out_dim: usize,
    sample: &Sampler<'_>,
    bw: &[f64],
    t: f64,
    points: &[Vec<f64>],
    min_local: usize,
) -> Result<Vec<Vec<f64>>, NelsonError> {
    points
        .iter()
        .map(|pt| {
            let stride = 2 + out_dim;
            let accumulate = |paths: std::ops::Range<usize>| {
                let mut acc = vec![0.0; stride];
                let mut gi = vec![0.0; out_dim];
                let mut gq = vec![0.0; out_dim];
                let mut inc = vec![0.0; out_dim];
                for p in paths {
                    for &pair in pairs {
                        let x = ens.state(p, pair.0);
                        let mut q = 0.0;
                        let mut near = true;
                        for j in 0..x.len() {
                            let z = (x[j] - pt[j]) / bw[j];
                            q += z * z;
                            near &= z.abs() <= 1.0;
                        }
                        let k = (-0.5 * q).exp();
                        if k == 0.0 {
                            continue;
                        }
                        sample(p, pair, &mut gi, &mut gq, &mut inc);
                        acc[0] += k;
                        acc[1] += if near { 1.0 } else { 0.0 };
                        for m in 0..out_dim {
                            acc[2 + m] += k * inc[m];
                        }
                    }
                }
                acc
            };
            let acc = sum_chunks(ens.n_paths(), stride, &accumulate);
            let count = acc[1] as usize;
            if count < min_local || acc[0] <= 0.0 {
                return Err(NelsonError::InsufficientData {
                    t,
                    x: pt.clone(),
                    count,
                    needed: min_local,
                });
            }
            Ok(acc[2..].iter().map(|v| v / acc[0]).collect())
        })
        .collect()
}

/// Sums per-chunk accumulators over fixed path chunks in a fixed order, so
/// the result does not depend on the thread count.
pub(crate) fn sum_chunks(
    n_paths: usize,
    len: usize,
    f: &(dyn Fn(std::ops::Range<usize>) -> Vec<f64> + Sync),
) -> Vec<f64> {
    const CHUNK: usize = 4096;
    let ranges: Vec<std::ops::Range<usize>> =
        (0..n_paths).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n_paths)).collect();
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<f64>> = ranges.into_iter().map(f).collect();
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Which stochastic derivative [`d_of_functional`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Derivative {
    Forward,
    Backward,
    Mu(Mu),
}

/// Stochastic derivative of the process `f(t, X_t)` at `(t, x)`:
///
/// - forward: `f_t + b . grad f + a : hess f / 2`
/// - backward: `f_t + b_* . grad f - a : hess f / 2`
/// - mu: `f_t + D_mu X . grad f + i mu a : hess f / 2`
///
/// `f` receives jets in the variables `(t, x_1, ..., x_d)`.
pub fn d_of_functional(
    field: &dyn NelsonField,
    f: &dyn Fn(&Jet<C>, &[Jet<C>]) -> Jet<C>,
    t: f64,
    x: &[f64],
    which: Derivative,
) -> Result<C, NelsonError> {
    let d = field.dim();
    if x.len() != d {
        return Err(NelsonError::Argument("point dimension mismatch".into()));
    }
    let n = d + 1;
    let tj = Jet::variable(C::new(t, 0.0), 0, n);
    let xj: Vec<Jet<C>> = (0..d).map(|i| Jet::variable(C::new(x[i], 0.0), i + 1, n)).collect();
    let fj = f(&tj, &xj);
    let (drift, ito): (Vec<C>, C) = match which {
        Derivative::Forward => (field.forward(t, x).into_iter().map(C::from).collect(), C::new(0.5, 0.0)),
        Derivative::Backward => (field.backward(t, x)?.into_iter().map(C::from).collect(), C::new(-0.5, 0.0)),
        Derivative::Mu(mu) => (field.velocity(t, x, mu)?, C::new(0.0, 0.5 * mu.sign())),
    };
    Ok(apply_generator(&fj, &drift, &field.diffusion(t, x), ito))
}

/// `f_t + drift . grad f + ito * a : hess f` for a jet in `(t, x)`.
pub(crate) fn apply_generator(fj: &Jet<C>, drift: &[C], a: &[f64], ito: C) -> C {
    let d = drift.len();
    if fj.is_constant() {
        return C::new(0.0, 0.0);
    }
    let mut out = fj.d(0);
    for i in 0..d {
        out += drift[i] * fj.d(i + 1);
    }
    let mut trace = C::new(0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            trace += fj.d2(i + 1, j + 1) * a[i * d + j];
        }
    }
    out + ito * trace
}

/// Both sides of the product rule `d/dt E[X . Y] = E[DX . Y + X . D_*Y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductRuleReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
}

fn check_aligned(x: &Ensemble, y: &Ensemble) -> Result<(), NelsonError> {
    if x.n_paths() != y.n_paths()
        || x.dim() != y.dim()
        || x.recorded_steps() != y.recorded_steps()
        || x.dt() != y.dt()
        || x.t_start() != y.t_start()
    {
        return Err(NelsonError::Argument("ensembles are not aligned".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// `d/dt E[X.Y]` by a centered difference of width `2 delta` against
/// `E[DX . Y + X . D_*Y]` at `t`, with drifts read from the fields.
pub fn product_rule_gap(
    x: (&Ensemble, &dyn NelsonField),
    y: (&Ensemble, &dyn NelsonField),
    t: f64,
    delta: f64,
) -> Result<ProductRuleReport, NelsonError> {
    let ((ex, fx), (ey, fy)) = (x, y);
    check_aligned(ex, ey)?;
    if !(delta > 0.0) {
        return Err(NelsonError::Argument("delta must be positive".into()));
    }
    let (ip, im, ic) = (ex.index_of_time(t + delta)?, ex.index_of_time(t - delta)?, ex.index_of_time(t)?);
    let n = ex.n_paths();
    let mut quotient = Vec::with_capacity(n);
    let mut rhs = Vec::with_capacity(n);
    for p in 0..n {
        let plus = dot(ex.state(p, ip), ey.state(p, ip));
        let minus = dot(ex.state(p, im), ey.state(p, im));
        quotient.push((plus - minus) / (2.0 * delta));
        let (xs, ys) = (ex.state(p, ic), ey.state(p, ic));
        rhs.push(dot(&fx.forward(t, xs), ys) + dot(xs, &fy.backward(t, ys)?));
    }
    let (lhs, lv) = mean_var(&quotient);
    let (r, rv) = mean_var(&rhs);
    Ok(ProductRuleReport {
        lhs,
        rhs: r,
        gap: (lhs - r).abs(),
        lhs_stderr: (lv / n as f64).sqrt(),
        rhs_stderr: (rv / n as f64).sqrt(),
    })
}

/// `|E[Im(D_mu X) . Y] - E[X . Im(D_mu Y)]|` at `t`.
pub fn im_identity_gap(
    x: (&Ensemble, &dyn NelsonField),
    y: (&Ensemble, &dyn NelsonField),
    t: f64,
    mu: Mu,
) -> Result<f64, NelsonError> {
    let ((ex, fx), (ey, fy)) = (x, y);
    check_aligned(ex, ey)?;
    let i = ex.index_of_time(t)?;
    let mut acc = 0.0;
    for p in 0..ex.n_paths() {
        let (xs, ys) = (ex.state(p, i), ey.state(p, i));
        let vx: Vec<f64> = fx.velocity(t, xs, mu)?.iter().map(|c| c.im).collect();
        let vy: Vec<f64> = fy.velocity(t, ys, mu)?.iter().map(|c| c.im).collect();
        acc += dot(&vx, ys) - dot(xs, &vy);
    }
    Ok((acc / ex.n_paths() as f64).abs())
}

/// `q`-quantile by sorting (linear interpolation between order statistics).
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(s.len() - 1);
    s[i] + (pos - i as f64) * (s[j] - s[i])
}

/// One row of a drift-field export.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub t: f64,
    pub x: f64,
    pub forward: f64,
    pub backward: f64,
    pub analytic_forward: f64,
    pub analytic_backward: f64,
}

pub fn write_drift_csv<W: Write>(rows: &[DriftRow], mut w: W) -> io::Result<()> {
    writeln!(w, "t,x,forward,backward,analytic_forward,analytic_backward")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.t, r.x, r.forward, r.backward, r.analytic_forward, r.analytic_backward
        )?;
    }
    Ok(())
}

/// Empirical drifts against a reference field on quantile bands of `X_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementReport {
    pub rows: Vec<DriftRow>,
    pub forward_rmse: f64,
    pub backward_rmse: f64,
    /// `max |b|` over the evaluation points.
    pub drift_scale: f64,
}

/// Evaluates forward and backward drift estimates of a one-dimensional
/// ensemble at `points` equally spaced points between the `band` quantiles
/// of `X_t`, for each `t`, and compares them with `reference`.
pub fn drift_agreement(
    ens: &Ensemble,
    reference: &dyn NelsonField,
    times: &[f64],
    points: usize,
    band: (f64, f64),
    opts: &Regression,
) -> Result<AgreementReport, NelsonError> {
    if ens.dim() != 1 || reference.dim() != 1 {
        return Err(NelsonError::Argument("drift agreement is one-dimensional".into()));
    }
    if points < 2 || !(0.0 <= band.0 && band.0 < band.1 && band.1 <= 1.0) {
        return Err(NelsonError::Argument("need two points and a quantile band inside [0, 1]".into()));
    }
    let mut rows = Vec::with_capacity(times.len() * points);
    for &t in times {
        let xs = ens.marginal(ens.index_of_time(t)?, 0);
        let (lo, hi) = (quantile(&xs, band.0), quantile(&xs, band.1));
        let pts: Vec<Vec<f64>> = (0..points)
            .map(|k| vec![lo + (hi - lo) * k as f64 / (points - 1) as f64])
            .collect();
        let fwd = estimate_drift(ens, Direction::Forward, t, &pts, opts)?;
        let bwd = estimate_drift(ens, Direction::Backward, t, &pts, opts)?;
        for ((p, f), b) in pts.iter().zip(fwd).zip(bwd) {
            rows.push(DriftRow {
                t,
                x: p[0],
                forward: f[0],
                backward: b[0],
                analytic_forward: reference.forward(t, p)[0],
                analytic_backward: reference.backward(t, p)?[0],
            });
        }
    }
    let col = |f: fn(&DriftRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(AgreementReport {
        forward_rmse: rmse(&col(|r| r.forward), &col(|r| r.analytic_forward)),
        backward_rmse: rmse(&col(|r| r.backward), &col(|r| r.analytic_backward)),
        drift_scale: rows.iter().map(|r| r.analytic_forward.abs()).fold(0.0, f64::max),
        rows,
    })
}

/// Root-mean-square of `a - b`.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64).sqrt()
}
