//! Deterministic Noether machinery: infinitesimal generators, invariance
//! residuals, conserved charges and conservation checks along extremals.

use std::io::{self, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::lagrangian::{parse_key, Lagrangian, LagrangianError};
use crate::quadrature::simpson;
use crate::variational::{max_el_residual, Extremal, VariationalError};

/// Relative drift below which a charge counts as conserved.
pub const CONSERVATION_TOL: f64 = 1e-5;
/// Largest interior Euler–Lagrange residual for a trajectory to count as an extremal.
pub const EXTREMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NoetherError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Lagrangian(#[from] LagrangianError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error("unknown generator key `{0}`")]
    UnknownKey(String),
}

/// Affine infinitesimal generators
/// `T(t, x) = t0 + t_t t + t_x . x` and `X(t, x) = x0 + x_t t + x_x x`.
///
/// Affine forms cover translations in time and space, scalings and
/// rotations; their partials are the coefficients themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorPair {
    name: String,
    t0: f64,
    t_t: f64,
    t_x: Vec<f64>,
    x0: Vec<f64>,
    x_t: Vec<f64>,
    /// Row-major `d x d`.
    x_x: Vec<f64>,
}

impl GeneratorPair {
    #[allow(clippy::too_many_arguments)]
    pub fn affine(
        name: impl Into<String>,
        t0: f64,
        t_t: f64,
        t_x: Vec<f64>,
        x0: Vec<f64>,
        x_t: Vec<f64>,
        x_x: Vec<f64>,
    ) -> Result<Self, NoetherError> {
        let d = x0.len();
        if t_x.len() != d || x_t.len() != d || x_x.len() != d * d {
            return Err(NoetherError::Argument("generator coefficient shapes disagree".into()));
        }
        Ok(GeneratorPair {
            name: name.into(),
            t0,
            t_t,
            t_x,
            x0,
            x_t,
            x_x,
        })
    }

    fn zero(name: &str, dim: usize) -> Self {
        GeneratorPair {
            name: name.to_string(),
            t0: 0.0,
            t_t: 0.0,
            t_x: vec![0.0; dim],
            x0: vec![0.0; dim],
            x_t: vec![0.0; dim],
            x_x: vec![0.0; dim * dim],
        }
    }

    /// `T = 0, X = 0`.
    pub fn identity(dim: usize) -> Self {
        Self::zero("identity", dim)
    }

    /// `T = 1, X = 0`: energy.
    pub fn time_translation(dim: usize) -> Self {
        let mut g = Self::zero("translation-t", dim);
        g.t0 = 1.0;
        g
    }

    /// `T = 0, X = direction`: momentum along `direction`.
    pub fn space_translation(direction: Vec<f64>) -> Self {
        let mut g = Self::zero("translation-x", direction.len());
        g.x0 = direction;
        g
    }

    /// `X = c x + b1, T = 2 c t + b2`: the symmetries of `int |v|^2 dt`.
    pub fn scaling(c: f64, b1: f64, b2: f64, dim: usize) -> Self {
        let mut g = Self::zero("scaling", dim);
        g.t0 = b2;
        g.t_t = 2.0 * c;
        g.x0 = vec![b1; dim];
        for j in 0..dim {
            g.x_x[j * dim + j] = c;
        }
        g
    }

    /// `T = 0, X = (-x_2, x_1)`.
    pub fn rotation_2d() -> Self {
        let mut g = Self::zero("rotation-2d", 2);
        g.x_x = vec![0.0, -1.0, 1.0, 0.0];
        g
    }

    /// Catalog keys: `translation-t`, `translation-x`, `scaling(c,b1,b2)`,
    /// `rotation-2d`, `identity`.
    pub fn from_key(key: &str, dim: usize) -> Result<Self, NoetherError> {
        let (name, args) = parse_key(key)?;
        let g = match (name, args.as_slice()) {
            ("identity", []) => Self::identity(dim),
            ("translation-t", []) => Self::time_translation(dim),
            ("translation-x", []) => Self::space_translation(vec![1.0; dim]),
            ("translation-x", dir) if dir.len() == dim => Self::space_translation(dir.to_vec()),
            ("scaling", []) => Self::scaling(1.0, 0.0, 0.0, dim),
            ("scaling", &[c, b1, b2]) => Self::scaling(c, b1, b2, dim),
            ("rotation-2d", []) if dim == 2 => Self::rotation_2d(),
            _ => return Err(NoetherError::UnknownKey(key.to_string())),
        };
        Ok(g)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn time_generator(&self, t: f64, x: &[f64]) -> f64 {
        self.t0 + self.t_t * t + dot(&self.t_x, x)
    }

    pub fn state_generator(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.x0[i] + self.x_t[i] * t + dot(&self.x_x[i * d..(i + 1) * d], x))
            .collect()
    }

    /// `(T_t, T_x, X_t, X_x)`; `X_x` is row-major `d x d`.
    pub fn partials(&self) -> (f64, &[f64], &[f64], &[f64]) {
        (self.t_t, &self.t_x, &self.x_t, &self.x_x)
    }

    /// Total derivatives `(T', X')` along a curve with velocity `v`.
    pub fn total_derivatives(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim();
        let t_dot = self.t_t + dot(&self.t_x, v);
        let x_dot = (0..d)
            .map(|i| self.x_t[i] + dot(&self.x_x[i * d..(i + 1) * d], v))
            .collect();
        (t_dot, x_dot)
    }

    /// Componentwise sum of two generator pairs.
    pub fn sum(&self, other: &GeneratorPair) -> Result<GeneratorPair, NoetherError> {
        if self.dim() != other.dim() {
            return Err(NoetherError::Argument("generator dimensions differ".into()));
        }
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        Ok(GeneratorPair {
            name: format!("{}+{}", self.name, other.name),
            t0: self.t0 + other.t0,
            t_t: self.t_t + other.t_t,
            t_x: add(&self.t_x, &other.t_x),
            x0: add(&self.x0, &other.x0),
            x_t: add(&self.x_t, &other.x_t),
            x_x: add(&self.x_x, &other.x_x),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(l: &Lagrangian, g: &GeneratorPair, x: &[f64], v: &[f64]) -> Result<(), NoetherError> {
    if g.dim() != l.dim() {
        return Err(NoetherError::Argument(format!(
            "generator dimension {} does not match Lagrangian dimension {}",
            g.dim(),
            l.dim()
        )));
    }
    if x.len() != l.dim() || v.len() != l.dim() {
        return Err(LagrangianError::Dimension {
            expected: l.dim(),
            got: x.len().min(v.len()),
        }
        .into());
    }
    Ok(())
}

/// `L_t T + L_x . X + L_v . (X' - v T') + L T'`, zero for every `(t, x, v)`
/// when the action is invariant under the generated group.
pub fn invariance_residual(
    l: &Lagrangian,
    g: &GeneratorPair,
    t: f64,
    x: &[f64],
    v: &[f64],
) -> Result<f64, NoetherError> {
    check_dims(l, g, x, v)?;
    let p = l.eval_partials(t, x, v)?;
    let big_t = g.time_generator(t, x);
    let big_x = g.state_generator(t, x);
    let (t_dot, x_dot) = g.total_derivatives(v);
    let shifted: Vec<f64> = x_dot.iter().zip(v).map(|(xd, vi)| xd - vi * t_dot).collect();
    Ok(p.d_t * big_t + dot(&p.d_x, &big_x) + dot(&p.d_v, &shifted) + p.value * t_dot)
}

/// Largest `|invariance_residual|` over `samples` seeded points with `t` in
/// `t_range` and every component of `x` and `v` in `[-radius, radius]`.
pub fn max_invariance_residual(
    l: &Lagrangian,
    g: &GeneratorPair,
    t_range: (f64, f64),
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, NoetherError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let d = l.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = t_range.0 + (t_range.1 - t_range.0) * unit();
        let x: Vec<f64> = (0..d).map(|_| radius * (2.0 * unit() - 1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| radius * (2.0 * unit() - 1.0)).collect();
        worst = worst.max(invariance_residual(l, g, t, &x, &v)?.abs());
    }
    Ok(worst)
}

/// `|int L dt - int L d(t bar)|` for the first-order transformed curve
/// `t bar = t + eps T`, `x bar = x + eps X`.
///
/// For an invariant pair the gap is `O(eps^2)`; otherwise it is `O(eps)`.
pub fn finite_invariance_gap(
    l: &Lagrangian,
    g: &GeneratorPair,
    traj: &Extremal,
    eps: f64,
) -> Result<f64, NoetherError> {
    if g.dim() != l.dim() || traj.dim() != l.dim() {
        return Err(NoetherError::Argument("dimension mismatch".into()));
    }
    if traj.len() < 3 {
        return Err(NoetherError::Argument("need at least 3 grid points".into()));
    }
    let n = traj.len();
    let mut orig = Vec::with_capacity(n);
    let mut t_bar = Vec::with_capacity(n);
    let mut l_bar = Vec::with_capacity(n);
    for i in 0..n {
        let (t, x, v) = (traj.grid()[i], &traj.states()[i], &traj.velocities()[i]);
        orig.push(l.eval(t, x, v)?);
        let big_x = g.state_generator(t, x);
        let (t_dot, x_dot) = g.total_derivatives(v);
        let tb = t + eps * g.time_generator(t, x);
        let xb: Vec<f64> = x.iter().zip(&big_x).map(|(a, b)| a + eps * b).collect();
        let vb: Vec<f64> = v
            .iter()
            .zip(&x_dot)
            .map(|(a, b)| (a + eps * b) / (1.0 + eps * t_dot))
            .collect();
        t_bar.push(tb);
        l_bar.push(l.eval(tb, &xb, &vb)?);
    }
    if t_bar.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(NoetherError::Argument(format!(
            "transformed time grid is not increasing for eps={eps}"
        )));
    }
    let j = simpson(traj.grid(), &orig).expect("length checked");
    let j_bar = simpson(&t_bar, &l_bar).expect("length checked");
    Ok((j - j_bar).abs())
}

/// Sign in front of the `(L - L_v . v) T` term of the charge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChargeSign {
    /// `Q = L_v . X + (L - L_v . v) T`; constant along extremals.
    Plus,
    /// `Q = L_v . X - (L - L_v . v) T`; kept only to document that it is
    /// not conserved under time-dependent generators.
    Minus,
}

pub fn noether_charge(
    l: &Lagrangian,
    g: &GeneratorPair,
    t: f64,
    x: &[f64],
    v: &[f64],
) -> Result<f64, NoetherError> {
    noether_charge_with_sign(l, g, t, x, v, ChargeSign::Plus)
}

pub fn noether_charge_with_sign(
    l: &Lagrangian,
    g: &GeneratorPair,
    t: f64,
    x: &[f64],
    v: &[f64],
    sign: ChargeSign,
) -> Result<f64, NoetherError> {
    check_dims(l, g, x, v)?;
    let p = l.eval_partials(t, x, v)?;
    let s = match sign {
        ChargeSign::Plus => 1.0,
        ChargeSign::Minus => -1.0,
    };
    let hamiltonian_like = p.value - dot(&p.d_v, v);
    Ok(dot(&p.d_v, &g.state_generator(t, x)) + s * hamiltonian_like * g.time_generator(t, x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConservationReport {
    pub grid: Vec<f64>,
    pub charge: Vec<f64>,
    pub drift: f64,
    pub relative_drift: f64,
    pub max_el_residual: f64,
    /// False when the trajectory is not an extremal to [`EXTREMAL_TOL`].
    pub extremal: bool,
}

impl ConservationReport {
    pub fn passes(&self) -> bool {
        self.relative_drift <= CONSERVATION_TOL
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,Q")?;
        for (t, q) in self.grid.iter().zip(&self.charge) {
            writeln!(w, "{t},{q}")?;
        }
        Ok(())
    }

    /// `drift,relative_drift,pass` header and values.
    pub fn write_summary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "drift,relative_drift,pass")?;
        writeln!(w, "{},{},{}", self.drift, self.relative_drift, self.passes())
    }
}

/// Evaluates the charge at every grid point of `traj`.
pub fn verify_conservation(
    l: &Lagrangian,
    g: &GeneratorPair,
    traj: &Extremal,
) -> Result<ConservationReport, NoetherError> {
    verify_conservation_with_sign(l, g, traj, ChargeSign::Plus)
}

pub fn verify_conservation_with_sign(
    l: &Lagrangian,
    g: &GeneratorPair,
    traj: &Extremal,
    sign: ChargeSign,
) -> Result<ConservationReport, NoetherError> {
    let charge = (0..traj.len())
        .map(|i| {
            noether_charge_with_sign(
                l,
                g,
                traj.grid()[i],
                &traj.states()[i],
                &traj.velocities()[i],
                sign,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let q0 = charge[0];
    let drift = charge.iter().map(|q| (q - q0).abs()).fold(0.0, f64::max);
    let residual = max_el_residual(l, traj)?;
    Ok(ConservationReport {
        grid: traj.grid().to_vec(),
        drift,
        relative_drift: drift / q0.abs().max(1.0),
        charge,
        max_el_residual: residual,
        extremal: residual <= EXTREMAL_TOL,
    })
}
