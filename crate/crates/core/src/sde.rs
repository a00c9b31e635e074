//! Euler–Maruyama ensembles for `dX = b(t, X) dt + sigma(t, X) dW` and
//! kernel density estimates of their time marginals.
//!
//! Every Gaussian increment is addressed by `(seed, path, step)`: path `p`
//! reads ChaCha8 stream `p` of the key derived from `seed`, and each step
//! consumes a fixed number of normals. Results therefore do not depend on how
//! paths are scheduled across threads.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Read, Write};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::lagrangian::parse_key;
use crate::quadrature::trapezoid;

/// `(t, x, out)`; writes a vector (drift) or a row-major matrix (diffusion).
pub type Field = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Pairs drawn for the Lipschitz and growth spot-check.
pub const SPOT_CHECK_PAIRS: usize = 10_000;
/// Half-width of the state box the spot-check samples from.
pub const SPOT_CHECK_RADIUS: f64 = 10.0;
/// Densities below this fraction of the maximum are set to zero.
pub const DENSITY_FLOOR: f64 = 1e-6;
pub const MIN_DENSITY_PATHS: usize = 1000;

const MAGIC: &[u8; 4] = b"NLAB";

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unknown SDE key `{0}`")]
    UnknownKey(String),
    #[error("specification rejected: {0}")]
    Rejected(String),
    #[error("non-finite state on path {path} at step {step}")]
    BlowUp { path: usize, step: usize },
    #[error("time {t} is not a recorded grid time")]
    OffGrid { t: f64 },
    #[error("density integrates to {integral} on the evaluation grid; widen the grid")]
    Normalization { integral: f64 },
    #[error("malformed ensemble file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Drift `b(t, x)`.
#[derive(Clone)]
pub enum Drift {
    /// `b_i = c0_i + c1_i t - theta_i x_i`.
    Linear { c0: Vec<f64>, c1: Vec<f64>, theta: Vec<f64> },
    Custom(Field),
}

/// Diffusion matrix `sigma(t, x)`.
#[derive(Clone)]
pub enum Diffusion {
    /// Constant diagonal matrix.
    Diagonal(Vec<f64>),
    /// Row-major `d x d`.
    Custom(Field),
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// Independent normal components.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drift::Linear { c0, c1, theta } => f
                .debug_struct("Linear")
                .field("c0", c0)
                .field("c1", c1)
                .field("theta", theta)
                .finish(),
            Drift::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Diagonal(s) => f.debug_tuple("Diagonal").field(s).finish(),
            Diffusion::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdeSpec {
    key: String,
    dim: usize,
    drift: Drift,
    diffusion: Diffusion,
    x0: InitialState,
    horizon: (f64, f64),
    lipschitz_k: Option<f64>,
}

impl SdeSpec {
    /// A spec with arbitrary coefficient fields. `lipschitz_k` is mandatory
    /// here because it cannot be derived.
    pub fn custom(
        key: impl Into<String>,
        dim: usize,
        drift: Drift,
        diffusion: Diffusion,
        x0: InitialState,
        horizon: (f64, f64),
        lipschitz_k: f64,
    ) -> Self {
        SdeSpec {
            key: key.into(),
            dim,
            drift,
            diffusion,
            x0,
            horizon,
            lipschitz_k: Some(lipschitz_k),
        }
    }

    /// `b_i = c0 + c1 t - theta x_i`, `sigma = sigma I`, `x0 = 0`, horizon `(0, 1)`.
    pub fn linear(c0: f64, c1: f64, theta: f64, sigma: f64, dim: usize) -> Self {
        SdeSpec {
            key: format!("linear({c0},{c1},{theta},{sigma})"),
            dim,
            drift: Drift::Linear {
                c0: vec![c0; dim],
                c1: vec![c1; dim],
                theta: vec![theta; dim],
            },
            diffusion: Diffusion::Diagonal(vec![sigma; dim]),
            x0: InitialState::Fixed(vec![0.0; dim]),
            horizon: (0.0, 1.0),
            lipschitz_k: None,
        }
    }

    pub fn brownian(dim: usize) -> Self {
        Self::linear(0.0, 0.0, 0.0, 1.0, dim).with_key("brownian")
    }

    pub fn constant_drift(b: f64, sigma: f64, dim: usize) -> Self {
        Self::linear(b, 0.0, 0.0, sigma, dim).with_key(format!("constant({b},{sigma})"))
    }

    pub fn ou(theta: f64, sigma: f64, dim: usize) -> Self {
        Self::linear(0.0, 0.0, theta, sigma, dim).with_key(format!("ou({theta},{sigma})"))
    }

    /// `sigma = 0`, constant drift `b`.
    pub fn deterministic(b: f64, dim: usize) -> Self {
        Self::linear(b, 0.0, 0.0, 0.0, dim).with_key(format!("deterministic({b})"))
    }

    /// Catalog keys: `brownian`, `constant(b,sigma)`, `ou(theta,sigma)`,
    /// `deterministic(b)`, `linear(c0,c1,theta,sigma)`.
    pub fn from_key(key: &str, dim: usize) -> Result<Self, SdeError> {
        let (name, args) = parse_key(key).map_err(|_| SdeError::UnknownKey(key.to_string()))?;
        if dim == 0 {
            return Err(SdeError::Argument("dimension must be positive".into()));
        }
        let spec = match (name, args.as_slice()) {
            ("brownian", []) => Self::brownian(dim),
            ("constant", &[b, s]) => Self::constant_drift(b, s, dim),
            ("ou", []) => Self::ou(1.0, 2f64.sqrt(), dim),
            ("ou", &[th, s]) => Self::ou(th, s, dim),
            ("deterministic", &[b]) => Self::deterministic(b, dim),
            ("linear", &[c0, c1, th, s]) => Self::linear(c0, c1, th, s, dim),
            _ => return Err(SdeError::UnknownKey(key.to_string())),
        };
        if args.iter().any(|a| !a.is_finite()) {
            return Err(SdeError::Argument(format!("non-finite parameter in `{key}`")));
        }
        Ok(spec)
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = key.into();
        self
    }

    pub fn with_x0(mut self, x0: InitialState) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_horizon(mut self, t_start: f64, t_end: f64) -> Self {
        self.horizon = (t_start, t_end);
        self
    }

    pub fn with_lipschitz(mut self, k: f64) -> Self {
        self.lipschitz_k = Some(k);
        self
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn x0(&self) -> &InitialState {
        &self.x0
    }

    pub fn horizon(&self) -> (f64, f64) {
        self.horizon
    }

    /// Declared constant, or the one implied by a catalog form.
    pub fn lipschitz_k(&self) -> Option<f64> {
        self.lipschitz_k.or_else(|| self.catalog_k())
    }

    fn catalog_k(&self) -> Option<f64> {
        let (Drift::Linear { c0, c1, theta }, Diffusion::Diagonal(s)) = (&self.drift, &self.diffusion) else {
            return None;
        };
        let (a, b) = self.horizon;
        let max_theta = theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let offset = |t: f64| norm(&c0.iter().zip(c1).map(|(p, q)| p + q * t).collect::<Vec<_>>());
        let sigma = norm(s);
        Some(max_theta.max(sigma + offset(a).max(offset(b))).max(f64::MIN_POSITIVE))
    }

    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Linear { c0, c1, theta } => {
                for i in 0..self.dim {
                    out[i] = c0[i] + c1[i] * t - theta[i] * x[i];
                }
            }
            Drift::Custom(f) => f(t, x, out),
        }
    }

    /// Row-major `d x d` diffusion matrix.
    pub fn sigma_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            Diffusion::Diagonal(s) => {
                out.fill(0.0);
                for i in 0..self.dim {
                    out[i * self.dim + i] = s[i];
                }
            }
            Diffusion::Custom(f) => f(t, x, out),
        }
    }

    /// `a = sigma sigma^T`, row-major.
    pub fn a_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut s = vec![0.0; d * d];
        self.sigma_at(t, x, &mut s);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
            }
        }
        a
    }

    /// True when `sigma` vanishes identically and `x0` is fixed.
    pub fn is_deterministic(&self) -> bool {
        matches!(&self.diffusion, Diffusion::Diagonal(s) if s.iter().all(|&v| v == 0.0))
            && matches!(self.x0, InitialState::Fixed(_))
    }

    /// Checks shapes, the horizon and the Lipschitz and linear-growth bounds
    /// on [`SPOT_CHECK_PAIRS`] random pairs.
    pub fn validate(&self) -> Result<(), SdeError> {
        let d = self.dim;
        if d == 0 {
            return Err(SdeError::Rejected("dimension must be positive".into()));
        }
        let (a, b) = self.horizon;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(SdeError::Rejected(format!("bad horizon ({a}, {b})")));
        }
        let shapes_ok = match &self.drift {
            Drift::Linear { c0, c1, theta } => c0.len() == d && c1.len() == d && theta.len() == d,
            Drift::Custom(_) => true,
        } && match &self.diffusion {
            Diffusion::Diagonal(s) => s.len() == d,
            Diffusion::Custom(_) => true,
        } && match &self.x0 {
            InitialState::Fixed(x) => x.len() == d,
            InitialState::Gaussian { mean, std } => mean.len() == d && std.len() == d,
        };
        if !shapes_ok {
            return Err(SdeError::Rejected("coefficient shapes do not match the dimension".into()));
        }
        let k = self
            .lipschitz_k()
            .ok_or_else(|| SdeError::Rejected("custom coefficients need a declared Lipschitz constant".into()))?;
        if !(k > 0.0 && k.is_finite()) {
            return Err(SdeError::Rejected(format!("Lipschitz constant {k} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x4c69_7073);
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * unit_open(rng.next_u64());
        let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
        let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
        let (mut sx, mut sy) = (vec![0.0; d * d], vec![0.0; d * d]);
        for _ in 0..SPOT_CHECK_PAIRS {
            let t = uniform(a, b);
            for i in 0..d {
                x[i] = uniform(-SPOT_CHECK_RADIUS, SPOT_CHECK_RADIUS);
                y[i] = uniform(-SPOT_CHECK_RADIUS, SPOT_CHECK_RADIUS);
            }
            self.drift_at(t, &x, &mut bx);
            self.drift_at(t, &y, &mut by);
            self.sigma_at(t, &x, &mut sx);
            self.sigma_at(t, &y, &mut sy);
            let dist = norm(&x.iter().zip(&y).map(|(p, q)| p - q).collect::<Vec<_>>());
            let lip = norm_diff(&sx, &sy) + norm_diff(&bx, &by);
            let growth = norm(&sx) + norm(&bx);
            let slack = 1.0 + 1e-12;
            if !(lip <= k * dist * slack) {
                return Err(SdeError::Rejected(format!(
                    "Lipschitz bound K={k} violated at t={t}: |db|+|dsigma|={lip}, |x-y|={dist}"
                )));
            }
            if !(growth <= k * (1.0 + norm(&x)) * slack) {
                return Err(SdeError::Rejected(format!(
                    "growth bound K={k} violated at t={t}, x={x:?}: |b|+|sigma|={growth}"
                )));
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Maps 53 random bits into the open interval `(0, 1)`.
fn unit_open(u: u64) -> f64 {
    ((u >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Gaussian draws for one path.
///
/// The stream is a flat sequence of standard normals produced in Box–Muller
/// pairs, each pair consuming four 32-bit words. Block `0` (the first `d`
/// normals) initializes the state and block `k + 1` drives step `k`.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        rng.set_word_pos(0);
        NormalStream { rng, spare: None }
    }

    /// Jumps to the start of `block` for dimension `dim`.
    pub fn seek(&mut self, block: u64, dim: usize) {
        let n = block as u128 * dim as u128;
        self.rng.set_word_pos(n / 2 * 4);
        self.spare = None;
        if n % 2 == 1 {
            let _ = self.next_normal();
        }
    }

    fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = unit_open(self.rng.next_u64());
        let u2 = unit_open(self.rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// Fills `out` with the next `out.len()` normals.
    pub fn fill(&mut self, out: &mut [f64]) {
        for z in out {
            *z = self.next_normal();
        }
    }
}

/// The normals that drive `step` of `path`, read directly by address.
pub fn increment_normals(seed: u64, path: u64, step: u64, dim: usize) -> Vec<f64> {
    let mut s = NormalStream::new(seed, path);
    s.seek(step + 1, dim);
    let mut out = vec![0.0; dim];
    s.fill(&mut out);
    out
}

/// Which grid steps an ensemble keeps. Step `0` is always kept.
#[derive(Clone, Debug, PartialEq)]
pub enum RecordPlan {
    All,
    /// Multiples of `k`, plus the final step.
    Every(usize),
    /// The inclusive step range `from..=to`.
    Range { from: usize, to: usize },
    Steps(Vec<usize>),
}

impl RecordPlan {
    pub fn resolve(&self, m: usize) -> Result<Vec<usize>, SdeError> {
        let mut steps: Vec<usize> = match self {
            RecordPlan::All => (0..=m).collect(),
            RecordPlan::Every(0) => return Err(SdeError::Argument("record stride must be positive".into())),
            RecordPlan::Every(k) => (0..=m).step_by(*k).chain(std::iter::once(m)).collect(),
            RecordPlan::Range { from, to } => {
                if from > to || *to > m {
                    return Err(SdeError::Argument(format!("record range {from}..={to} outside 0..={m}")));
                }
                (*from..=*to).collect()
            }
            RecordPlan::Steps(s) => {
                if s.iter().any(|&k| k > m) {
                    return Err(SdeError::Argument(format!("recorded step beyond M={m}")));
                }
                s.clone()
            }
        };
        steps.push(0);
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }
}

/// Simulated paths, immutable after construction.
#[derive(Clone, Debug)]
pub struct Ensemble {
    spec: Option<SdeSpec>,
    t_start: f64,
    dt: f64,
    m: usize,
    seed: u64,
    n_paths: usize,
    dim: usize,
    steps: Vec<usize>,
    /// `n_paths x steps.len() x dim`, row-major.
    data: Vec<f64>,
}

impl Ensemble {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        spec: Option<SdeSpec>,
        t_start: f64,
        dt: f64,
        m: usize,
        seed: u64,
        dim: usize,
        steps: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Self, SdeError> {
        if dim == 0 || steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) || steps[steps.len() - 1] > m {
            return Err(SdeError::Argument("recorded steps must be strictly increasing and within M".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SdeError::Argument(format!("bad step {dt}")));
        }
        let row = steps.len() * dim;
        if data.len() % row != 0 {
            return Err(SdeError::Argument("data length is not a whole number of paths".into()));
        }
        Ok(Ensemble {
            spec,
            t_start,
            dt,
            m,
            seed,
            n_paths: data.len() / row,
            dim,
            steps,
            data,
        })
    }

    pub fn spec(&self) -> Option<&SdeSpec> {
        self.spec.as_ref()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of simulated steps `M`.
    pub fn steps_total(&self) -> usize {
        self.m
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn recorded_steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn time_of_step(&self, step: usize) -> f64 {
        self.t_start + step as f64 * self.dt
    }

    /// Full simulation grid `t_0..t_M`.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.m).map(|k| self.time_of_step(k)).collect()
    }

    /// Times of the recorded steps.
    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&k| self.time_of_step(k)).collect()
    }

    pub fn is_dense(&self) -> bool {
        self.steps.len() == self.m + 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Grid step nearest `t`, if `t` is within `1e-9 dt` of it.
    pub fn step_of_time(&self, t: f64) -> Result<usize, SdeError> {
        let k = ((t - self.t_start) / self.dt).round();
        if k < 0.0 || k > self.m as f64 || (self.time_of_step(k as usize) - t).abs() > 1e-9 * self.dt.max(1.0) {
            return Err(SdeError::OffGrid { t });
        }
        Ok(k as usize)
    }

    /// Position of `step` among the recorded steps.
    pub fn index_of_step(&self, step: usize) -> Option<usize> {
        self.steps.binary_search(&step).ok()
    }

    /// Position of the recorded time `t`.
    pub fn index_of_time(&self, t: f64) -> Result<usize, SdeError> {
        let k = self.step_of_time(t)?;
        self.index_of_step(k).ok_or(SdeError::OffGrid { t })
    }

    pub fn state(&self, path: usize, index: usize) -> &[f64] {
        let off = (path * self.steps.len() + index) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Component `j` of every path at recorded index `index`.
    pub fn marginal(&self, index: usize, j: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, index)[j]).collect()
    }

    /// Applies `f(t, x, out)` to every recorded state; metadata is kept.
    pub fn map_states(&self, f: impl Fn(f64, &[f64], &mut [f64]) + Sync) -> Ensemble {
        let mut data = vec![0.0; self.data.len()];
        let d = self.dim;
        let times = self.times();
        let n_rec = self.steps.len();
        for (p, row) in data.chunks_mut(n_rec * d).enumerate() {
            for (i, &t) in times.iter().enumerate() {
                f(t, self.state(p, i), &mut row[i * d..(i + 1) * d]);
            }
        }
        Ensemble { data, ..self.clone() }
    }

    /// Replaces the generating spec, e.g. after a transformation of the states.
    pub fn with_spec(mut self, spec: Option<SdeSpec>) -> Ensemble {
        self.spec = spec;
        self
    }

    /// Little-endian binary format. Dense ensembles starting at `t = 0` use
    /// version 1 (header then paths); anything else uses version 2, which
    /// adds the start time and the recorded step table after the header.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        let v1 = self.is_dense() && self.t_start == 0.0;
        w.write_all(MAGIC)?;
        w.write_all(&(if v1 { 1u32 } else { 2u32 }).to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        if !v1 {
            w.write_all(&self.t_start.to_le_bytes())?;
            w.write_all(&(self.steps.len() as u64).to_le_bytes())?;
            for &k in &self.steps {
                w.write_all(&(k as u64).to_le_bytes())?;
            }
        }
        let mut buf = Vec::with_capacity(8 * 4096);
        for chunk in self.data.chunks(4096) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Ensemble, SdeError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SdeError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        let n_paths = read_u64(&mut r)? as usize;
        let m = read_u64(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let dt = f64::from_le_bytes(read_bytes(&mut r)?);
        let seed = read_u64(&mut r)?;
        let (t_start, steps) = match version {
            1 => (0.0, (0..=m).collect::<Vec<_>>()),
            2 => {
                let t0 = f64::from_le_bytes(read_bytes(&mut r)?);
                let n = read_u64(&mut r)? as usize;
                if n > m + 1 {
                    return Err(SdeError::Format("step table longer than the grid".into()));
                }
                let steps = (0..n).map(|_| read_u64(&mut r).map(|k| k as usize)).collect::<Result<_, _>>()?;
                (t0, steps)
            }
            v => return Err(SdeError::Format(format!("unsupported version {v}"))),
        };
        let len = n_paths
            .checked_mul(steps.len())
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| SdeError::Format("size overflow".into()))?;
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(SdeError::Format("trailing bytes".into()));
        }
        Ensemble::from_parts(None, t_start, dt, m, seed, dim, steps, data)
            .map_err(|e| SdeError::Format(e.to_string()))
    }

    /// Wide CSV: the header row holds the recorded times and each further
    /// row is one path component (path-major). Refuses ensembles with more
    /// than `10^7` values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), SdeError> {
        if self.data.len() > 10_000_000 {
            return Err(SdeError::Argument("ensemble too large for CSV export".into()));
        }
        let times: Vec<String> = self.times().iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", times.join(","))?;
        let n_rec = self.steps.len();
        for p in 0..self.n_paths {
            for j in 0..self.dim {
                let row: Vec<String> = (0..n_rec).map(|i| self.state(p, i)[j].to_string()).collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

fn read_bytes<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    read_bytes(r).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    read_bytes(r).map(u64::from_le_bytes)
}

pub fn simulate(spec: &SdeSpec, n_paths: usize, m: usize, seed: u64) -> Result<Ensemble, SdeError> {
    simulate_recorded(spec, n_paths, m, seed, &RecordPlan::All)
}

/// Euler–Maruyama with `M` steps over the spec's horizon, keeping only the
/// steps selected by `plan`.
pub fn simulate_recorded(
    spec: &SdeSpec,
    n_paths: usize,
    m: usize,
    seed: u64,
    plan: &RecordPlan,
) -> Result<Ensemble, SdeError> {
    spec.validate()?;
    if m < 2 {
        return Err(SdeError::Argument(format!("need M >= 2 steps, got {m}")));
    }
    if n_paths == 0 {
        return Err(SdeError::Argument("need at least one path".into()));
    }
    let steps = plan.resolve(m)?;
    let (a, b) = spec.horizon;
    let dt = (b - a) / m as f64;
    let d = spec.dim;
    let row = steps.len() * d;
    let mut data = vec![0.0; n_paths * row];
    let run = |(p, out): (usize, &mut [f64])| simulate_path(spec, p, seed, dt, m, &steps, out);

    #[cfg(feature = "parallel")]
    let results: Vec<Result<(), SdeError>> = {
        use rayon::prelude::*;
        data.par_chunks_mut(row).enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(), SdeError>> = data.chunks_mut(row).enumerate().map(run).collect();

    results.into_iter().collect::<Result<(), _>>()?;
    Ensemble::from_parts(Some(spec.clone()), a, dt, m, seed, d, steps, data)
}

fn simulate_path(
    spec: &SdeSpec,
    path: usize,
    seed: u64,
    dt: f64,
    m: usize,
    steps: &[usize],
    out: &mut [f64],
) -> Result<(), SdeError> {
    let d = spec.dim;
    let sqrt_dt = dt.sqrt();
    let t0 = spec.horizon.0;
    let mut stream = NormalStream::new(seed, path as u64);
    let mut xi = vec![0.0; d];
    stream.fill(&mut xi);
    let mut x = match &spec.x0 {
        InitialState::Fixed(x0) => x0.clone(),
        InitialState::Gaussian { mean, std } => (0..d).map(|i| mean[i] + std[i] * xi[i]).collect(),
    };
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut next_rec = 0;
    if steps[0] == 0 {
        out[..d].copy_from_slice(&x);
        next_rec = 1;
    }
    for k in 0..m {
        let t = t0 + k as f64 * dt;
        stream.fill(&mut xi);
        spec.drift_at(t, &x, &mut drift);
        match &spec.diffusion {
            Diffusion::Diagonal(s) => {
                for i in 0..d {
                    x[i] += drift[i] * dt + s[i] * sqrt_dt * xi[i];
                }
            }
            Diffusion::Custom(f) => {
                f(t, &x, &mut sigma);
                for i in 0..d {
                    let noise: f64 = (0..d).map(|j| sigma[i * d + j] * xi[j]).sum();
                    x[i] += drift[i] * dt + noise * sqrt_dt;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SdeError::BlowUp { path, step: k + 1 });
        }
        if next_rec < steps.len() && steps[next_rec] == k + 1 {
            out[next_rec * d..(next_rec + 1) * d].copy_from_slice(&x);
            next_rec += 1;
        }
    }
    Ok(())
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Gaussian kernel density estimate on a grid, with its `x`-derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityEstimate {
    pub t: f64,
    pub grid_x: Vec<f64>,
    pub p: Vec<f64>,
    pub dp: Vec<f64>,
    pub bandwidth: f64,
    /// Values below `floor` were set to zero.
    pub floor: f64,
}

impl DensityEstimate {
    /// Linear interpolation of `(p, dp)`; zero outside the grid.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let g = &self.grid_x;
        if g.is_empty() || x < g[0] || x > g[g.len() - 1] {
            return (0.0, 0.0);
        }
        let i = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
        let w = (x - g[i - 1]) / (g[i] - g[i - 1]);
        let lerp = |v: &[f64]| v[i - 1] + w * (v[i] - v[i - 1]);
        (lerp(&self.p), lerp(&self.dp))
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid_x, &self.p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DensityOutcome {
    Estimate(DensityEstimate),
    /// All samples coincide, so there is no density.
    Degenerate { t: f64, value: f64 },
}

impl DensityOutcome {
    pub fn estimate(&self) -> Option<&DensityEstimate> {
        match self {
            DensityOutcome::Estimate(e) => Some(e),
            DensityOutcome::Degenerate { .. } => None,
        }
    }
}

/// `1.06 s n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let (_, var) = mean_var(samples);
    1.06 * var.sqrt() * (samples.len() as f64).powf(-0.2)
}

/// Kernel density estimate of the one-dimensional marginal at the recorded
/// time `t`. `bandwidth = None` selects Silverman's rule.
pub fn estimate_density(
    ens: &Ensemble,
    t: f64,
    grid_x: &[f64],
    bandwidth: Option<f64>,
) -> Result<DensityOutcome, SdeError> {
    if ens.dim() != 1 {
        return Err(SdeError::Argument("density estimation needs d = 1".into()));
    }
    if ens.n_paths() < MIN_DENSITY_PATHS {
        return Err(SdeError::Argument(format!(
            "need at least {MIN_DENSITY_PATHS} paths, got {}",
            ens.n_paths()
        )));
    }
    if grid_x.len() < 2 || grid_x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SdeError::Argument("grid_x must be strictly increasing".into()));
    }
    let idx = ens.index_of_time(t)?;
    let mut xs = ens.marginal(idx, 0);
    if xs.iter().all(|&v| v == xs[0]) {
        return Ok(DensityOutcome::Degenerate { t, value: xs[0] });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(SdeError::Argument(format!("bandwidth {h} must be positive"))),
        None => silverman_bandwidth(&xs),
    };
    xs.sort_by(f64::total_cmp);
    let norm_c = 1.0 / (xs.len() as f64 * h * (2.0 * PI).sqrt());
    let eval = |x: f64| {
        let lo = xs.partition_point(|&s| s < x - 9.0 * h);
        let hi = xs.partition_point(|&s| s <= x + 9.0 * h);
        let (mut p, mut dp) = (0.0, 0.0);
        for &s in &xs[lo..hi] {
            let z = (x - s) / h;
            let k = (-0.5 * z * z).exp();
            p += k;
            dp -= z / h * k;
        }
        (p * norm_c, dp * norm_c)
    };
    #[cfg(feature = "parallel")]
    let values: Vec<(f64, f64)> = {
        use rayon::prelude::*;
        grid_x.par_iter().map(|&x| eval(x)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let values: Vec<(f64, f64)> = grid_x.iter().map(|&x| eval(x)).collect();

    let max = values.iter().fold(0.0f64, |m, v| m.max(v.0));
    let floor = DENSITY_FLOOR * max;
    let (p, dp): (Vec<f64>, Vec<f64>) =
        values.into_iter().map(|(p, dp)| if p < floor { (0.0, 0.0) } else { (p, dp) }).unzip();
    let est = DensityEstimate {
        t,
        grid_x: grid_x.to_vec(),
        p,
        dp,
        bandwidth: h,
        floor,
    };
    let integral = est.integral();
    if !(0.98..=1.02).contains(&integral) {
        return Err(SdeError::Normalization { integral });
    }
    Ok(DensityOutcome::Estimate(est))
}
