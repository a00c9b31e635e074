//! Lagrangians `L(t, x, v)` and their exact partial derivatives.
//!
//! Every Lagrangian in the catalog except `relativistic` is a polynomial in
//! the velocity with coefficients that are products of powers of `t`, powers
//! of the state components and a few smooth factors (`exp`, `sin`, `cos`).
//! That form is what makes complex velocities meaningful: the same
//! expression is holomorphic in `v`.

use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::jet::{Jet, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LagrangianError {
    #[error("non-finite Lagrangian evaluation at t={t}, x={x:?}, v={v:?}")]
    Domain { t: f64, x: Vec<f64>, v: Vec<f64> },
    #[error("dimension mismatch: Lagrangian has d={expected}, argument has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported Lagrangian class: {0}")]
    UnsupportedClass(String),
    #[error("Lagrangian `{0}` depends explicitly on time")]
    NotAutonomous(String),
    #[error("unknown Lagrangian key `{0}`")]
    UnknownKey(String),
    #[error("bad parameters for `{key}`: {reason}")]
    BadParameters { key: String, reason: String },
}

/// Argument a smooth coefficient factor depends on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FactorArg {
    Time,
    State(usize),
}

/// Smooth non-polynomial coefficient factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Factor {
    Exp { arg: FactorArg, rate: f64 },
    Sin { arg: FactorArg, freq: f64 },
    Cos { arg: FactorArg, freq: f64 },
}

impl Factor {
    fn arg(&self) -> FactorArg {
        match *self {
            Factor::Exp { arg, .. } | Factor::Sin { arg, .. } | Factor::Cos { arg, .. } => arg,
        }
    }

    fn eval<S: Scalar>(&self, t: &S, x: &[S]) -> S {
        let a = match self.arg() {
            FactorArg::Time => t.clone(),
            FactorArg::State(j) => x[j].clone(),
        };
        match *self {
            Factor::Exp { rate, .. } => a.scale(rate).exp(),
            Factor::Sin { freq, .. } => a.scale(freq).sin(),
            Factor::Cos { freq, .. } => a.scale(freq).cos(),
        }
    }
}

/// `coeff * t^t_pow * prod_j x_j^x_pow[j] * prod_j v_j^v_pow[j] * prod factors`.
#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub t_pow: u32,
    pub x_pow: Vec<u32>,
    pub v_pow: Vec<u32>,
    pub factors: Vec<Factor>,
}

impl Monomial {
    pub fn new(coeff: f64, t_pow: u32, x_pow: Vec<u32>, v_pow: Vec<u32>) -> Self {
        Monomial {
            coeff,
            t_pow,
            x_pow,
            v_pow,
            factors: Vec::new(),
        }
    }

    pub fn with_factor(mut self, f: Factor) -> Self {
        self.factors.push(f);
        self
    }

    fn eval<S: Scalar>(&self, t: &S, x: &[S], v: &[S]) -> S {
        let mut acc = S::from_f64(self.coeff);
        if self.t_pow > 0 {
            acc = acc * t.powi(self.t_pow);
        }
        for (xj, &p) in x.iter().zip(&self.x_pow) {
            if p > 0 {
                acc = acc * xj.powi(p);
            }
        }
        for (vj, &p) in v.iter().zip(&self.v_pow) {
            if p > 0 {
                acc = acc * vj.powi(p);
            }
        }
        for f in &self.factors {
            acc = acc * f.eval(t, x);
        }
        acc
    }

    fn depends_on_time(&self) -> bool {
        self.t_pow > 0
            || self
                .factors
                .iter()
                .any(|f| matches!(f.arg(), FactorArg::Time))
    }

    fn depends_on_state(&self) -> bool {
        self.x_pow.iter().any(|&p| p > 0)
            || self
                .factors
                .iter()
                .any(|f| matches!(f.arg(), FactorArg::State(_)))
    }
}

/// Sum of monomials in `(t, x, v)` of a fixed spatial dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(dim: usize, terms: Vec<Monomial>) -> Result<Self, LagrangianError> {
        for m in &terms {
            if m.x_pow.len() != dim || m.v_pow.len() != dim {
                return Err(LagrangianError::Dimension {
                    expected: dim,
                    got: m.x_pow.len().max(m.v_pow.len()),
                });
            }
            for f in &m.factors {
                if let FactorArg::State(j) = f.arg() {
                    if j >= dim {
                        return Err(LagrangianError::Dimension {
                            expected: dim,
                            got: j + 1,
                        });
                    }
                }
            }
        }
        Ok(Polynomial { dim, terms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn eval<S: Scalar>(&self, t: &S, x: &[S], v: &[S]) -> S {
        self.terms
            .iter()
            .fold(S::from_f64(0.0), |acc, m| acc + m.eval(t, x, v))
    }

    /// Symbolic partial derivative with respect to `v_j`.
    pub fn d_velocity(&self, j: usize) -> Polynomial {
        let terms = self
            .terms
            .iter()
            .filter(|m| m.v_pow[j] > 0)
            .map(|m| {
                let mut d = m.clone();
                d.coeff *= m.v_pow[j] as f64;
                d.v_pow[j] -= 1;
                d
            })
            .collect();
        Polynomial {
            dim: self.dim,
            terms,
        }
    }

    pub fn is_autonomous(&self) -> bool {
        !self.terms.iter().any(Monomial::depends_on_time)
    }

    pub fn is_state_free(&self) -> bool {
        !self.terms.iter().any(Monomial::depends_on_state)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Form {
    Polynomial(Polynomial),
    /// `-m sqrt(1 - |v|^2)`; not polynomial in `v`.
    Relativistic { mass: f64 },
}

/// A Lagrangian `L(t, x, v)` on `R x R^d x R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lagrangian {
    key: String,
    dim: usize,
    form: Form,
}

/// Value and first/second partials of `L` at a point.
///
/// Matrices are row-major `d x d`; `d2_xv[i * d + j]` is `d^2 L / dv_i dx_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Partials {
    pub value: f64,
    pub d_t: f64,
    pub d_x: Vec<f64>,
    pub d_v: Vec<f64>,
    pub d2_vv: Vec<f64>,
    pub d2_xv: Vec<f64>,
    pub d2_tv: Vec<f64>,
}

impl Lagrangian {
    pub fn from_polynomial(key: impl Into<String>, poly: Polynomial) -> Self {
        Lagrangian {
            key: key.into(),
            dim: poly.dim(),
            form: Form::Polynomial(poly),
        }
    }

    /// `|v|^2 / 2`.
    pub fn kinetic(dim: usize) -> Self {
        let terms = (0..dim).map(|j| Monomial::new(0.5, 0, vec![0; dim], unit(dim, j, 2)));
        Self::from_polynomial("kinetic", Polynomial { dim, terms: terms.collect() })
    }

    /// `|v|^2 - k |x|^2`.
    pub fn harmonic(k: f64, dim: usize) -> Self {
        let mut terms = Vec::new();
        for j in 0..dim {
            terms.push(Monomial::new(1.0, 0, vec![0; dim], unit(dim, j, 2)));
            terms.push(Monomial::new(-k, 0, unit(dim, j, 2), vec![0; dim]));
        }
        Self::from_polynomial(format!("harmonic({k})"), Polynomial { dim, terms })
    }

    /// `|v|^2 / 2 + c |x|^2`.
    pub fn kinetic_potential(c: f64, dim: usize) -> Self {
        let mut terms = Vec::new();
        for j in 0..dim {
            terms.push(Monomial::new(0.5, 0, vec![0; dim], unit(dim, j, 2)));
            terms.push(Monomial::new(c, 0, unit(dim, j, 2), vec![0; dim]));
        }
        Self::from_polynomial(format!("kinetic-potential({c})"), Polynomial { dim, terms })
    }

    /// `|v|^2`.
    pub fn free_square(dim: usize) -> Self {
        let terms = (0..dim).map(|j| Monomial::new(1.0, 0, vec![0; dim], unit(dim, j, 2)));
        Self::from_polynomial("free-square", Polynomial { dim, terms: terms.collect() })
    }

    /// `sum_j c t^p v_j^r`, an `x`-free Lagrangian `f(t, v)`.
    pub fn momentum_free(coeff: f64, t_pow: u32, v_pow: u32, dim: usize) -> Self {
        let terms = (0..dim).map(|j| Monomial::new(coeff, t_pow, vec![0; dim], unit(dim, j, v_pow)));
        Self::from_polynomial(
            format!("momentum-free({coeff},{t_pow},{v_pow})"),
            Polynomial { dim, terms: terms.collect() },
        )
    }

    /// `v^2 / 2 + w2 cos x` in one dimension.
    pub fn pendulum(w2: f64) -> Self {
        let terms = vec![
            Monomial::new(0.5, 0, vec![0], vec![2]),
            Monomial::new(w2, 0, vec![0], vec![0]).with_factor(Factor::Cos {
                arg: FactorArg::State(0),
                freq: 1.0,
            }),
        ];
        Self::from_polynomial(format!("pendulum({w2})"), Polynomial { dim: 1, terms })
    }

    pub fn relativistic(mass: f64, dim: usize) -> Self {
        Lagrangian {
            key: format!("relativistic({mass})"),
            dim,
            form: Form::Relativistic { mass },
        }
    }

    /// Parses a catalog key such as `kinetic`, `harmonic(0.25)` or
    /// `momentum-free(1,1,2)`.
    pub fn from_key(key: &str, dim: usize) -> Result<Self, LagrangianError> {
        let (name, args) = parse_key(key)?;
        let bad = |reason: &str| LagrangianError::BadParameters {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(bad(&format!("expected {n} parameter(s), got {}", args.len())))
            }
        };
        match name {
            "kinetic" => arity(0).map(|_| Self::kinetic(dim)),
            "free-square" => arity(0).map(|_| Self::free_square(dim)),
            "harmonic" => {
                arity(1)?;
                Ok(Self::harmonic(args[0], dim))
            }
            "kinetic-potential" => {
                arity(1)?;
                Ok(Self::kinetic_potential(args[0], dim))
            }
            "momentum-free" => match args.len() {
                0 => Ok(Self::momentum_free(1.0, 1, 2, dim)),
                3 => {
                    let nonneg_int = |a: f64| a >= 0.0 && a.fract() == 0.0;
                    if !nonneg_int(args[1]) || !nonneg_int(args[2]) {
                        return Err(bad("powers must be non-negative integers"));
                    }
                    Ok(Self::momentum_free(args[0], args[1] as u32, args[2] as u32, dim))
                }
                _ => Err(bad("expected 0 or 3 parameters")),
            },
            "pendulum" => {
                arity(1)?;
                if dim != 1 {
                    return Err(bad("pendulum is one-dimensional"));
                }
                Ok(Self::pendulum(args[0]))
            }
            "relativistic" => {
                arity(1)?;
                Ok(Self::relativistic(args[0], dim))
            }
            _ => Err(LagrangianError::UnknownKey(key.to_string())),
        }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn polynomial(&self) -> Option<&Polynomial> {
        match &self.form {
            Form::Polynomial(p) => Some(p),
            Form::Relativistic { .. } => None,
        }
    }

    pub fn is_polynomial_in_v(&self) -> bool {
        self.polynomial().is_some()
    }

    pub fn is_autonomous(&self) -> bool {
        match &self.form {
            Form::Polynomial(p) => p.is_autonomous(),
            Form::Relativistic { .. } => true,
        }
    }

    pub fn is_state_free(&self) -> bool {
        match &self.form {
            Form::Polynomial(p) => p.is_state_free(),
            Form::Relativistic { .. } => true,
        }
    }

    /// Generic evaluation; callers guarantee argument lengths.
    pub fn eval_generic<S: Scalar>(&self, t: &S, x: &[S], v: &[S]) -> S {
        match &self.form {
            Form::Polynomial(p) => p.eval(t, x, v),
            Form::Relativistic { mass } => {
                let v2 = v
                    .iter()
                    .fold(S::from_f64(0.0), |acc, vj| acc + vj.clone() * vj.clone());
                -(S::from_f64(1.0) - v2).sqrt().scale(*mass)
            }
        }
    }

    fn check_dims(&self, x: usize, v: usize) -> Result<(), LagrangianError> {
        for got in [x, v] {
            if got != self.dim {
                return Err(LagrangianError::Dimension {
                    expected: self.dim,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> Result<f64, LagrangianError> {
        self.check_dims(x.len(), v.len())?;
        let val = self.eval_generic(&t, x, v);
        if val.is_finite() {
            Ok(val)
        } else {
            Err(domain(t, x, v))
        }
    }

    /// Exact value, gradient and the second partials needed for total time
    /// derivatives, by second-order forward-mode propagation.
    pub fn eval_partials(&self, t: f64, x: &[f64], v: &[f64]) -> Result<Partials, LagrangianError> {
        self.check_dims(x.len(), v.len())?;
        let d = self.dim;
        let n = 2 * d + 1;
        let tj = Jet::variable(t, 0, n);
        let xj: Vec<Jet<f64>> = (0..d).map(|i| Jet::variable(x[i], 1 + i, n)).collect();
        let vj: Vec<Jet<f64>> = (0..d).map(|i| Jet::variable(v[i], 1 + d + i, n)).collect();
        let l = self.eval_generic(&tj, &xj, &vj);
        if !l.is_finite() {
            return Err(domain(t, x, v));
        }
        let vi = |i: usize| 1 + d + i;
        let mut d2_vv = Vec::with_capacity(d * d);
        let mut d2_xv = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                d2_vv.push(l.d2(vi(i), vi(j)));
                d2_xv.push(l.d2(vi(i), 1 + j));
            }
        }
        Ok(Partials {
            value: l.value,
            d_t: l.d(0),
            d_x: (0..d).map(|i| l.d(1 + i)).collect(),
            d_v: (0..d).map(|i| l.d(vi(i))).collect(),
            d2_vv,
            d2_xv,
            d2_tv: (0..d).map(|i| l.d2(vi(i), 0)).collect(),
        })
    }

    /// Evaluates an autonomous polynomial Lagrangian at a complex velocity.
    pub fn eval_complex(&self, x: &[f64], v: &[Complex64]) -> Result<Complex64, LagrangianError> {
        self.check_dims(x.len(), v.len())?;
        let poly = self.polynomial().ok_or_else(|| {
            LagrangianError::UnsupportedClass(format!("`{}` is not polynomial in v", self.key))
        })?;
        if !poly.is_autonomous() {
            return Err(LagrangianError::NotAutonomous(self.key.clone()));
        }
        let xc: Vec<Complex64> = x.iter().map(|&a| Complex64::new(a, 0.0)).collect();
        let val = poly.eval(&Complex64::new(0.0, 0.0), &xc, v);
        if Scalar::is_finite(&val) {
            Ok(val)
        } else {
            Err(domain(0.0, x, &v.iter().map(|c| c.re).collect::<Vec<_>>()))
        }
    }
}

impl fmt::Display for Lagrangian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (d={})", self.key, self.dim)
    }
}

fn unit(dim: usize, j: usize, p: u32) -> Vec<u32> {
    let mut e = vec![0; dim];
    e[j] = p;
    e
}

fn domain(t: f64, x: &[f64], v: &[f64]) -> LagrangianError {
    LagrangianError::Domain {
        t,
        x: x.to_vec(),
        v: v.to_vec(),
    }
}

/// Splits `name(a,b,...)` into the name and numeric arguments.
pub fn parse_key(key: &str) -> Result<(&str, Vec<f64>), LagrangianError> {
    let key = key.trim();
    let Some(open) = key.find('(') else {
        return Ok((key, Vec::new()));
    };
    if !key.ends_with(')') {
        return Err(LagrangianError::UnknownKey(key.to_string()));
    }
    let name = &key[..open];
    let inner = &key[open + 1..key.len() - 1];
    if inner.trim().is_empty() {
        return Ok((name, Vec::new()));
    }
    let args = inner
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| LagrangianError::BadParameters {
            key: key.to_string(),
            reason: e.to_string(),
        })?;
    Ok((name, args))
}

/// Central finite-difference estimate of [`Partials`], used as an
/// independent cross-check of the forward-mode derivatives.
pub fn finite_difference_partials(
    l: &Lagrangian,
    t: f64,
    x: &[f64],
    v: &[f64],
    step: f64,
) -> Result<Partials, LagrangianError> {
    let d = l.dim();
    // packed argument z = (t, x, v)
    let mut z = Vec::with_capacity(2 * d + 1);
    z.push(t);
    z.extend_from_slice(x);
    z.extend_from_slice(v);
    let f = |z: &[f64]| l.eval(z[0], &z[1..1 + d], &z[1 + d..]);
    let h = |i: usize| step * (1.0 + z[i].abs());
    let first = |i: usize| -> Result<f64, LagrangianError> {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h(i);
        zm[i] -= h(i);
        Ok((f(&zp)? - f(&zm)?) / (2.0 * h(i)))
    };
    let second = |i: usize, j: usize| -> Result<f64, LagrangianError> {
        let (hi, hj) = (h(i), h(j));
        if i == j {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += hi;
            zm[i] -= hi;
            return Ok((f(&zp)? - 2.0 * f(&z)? + f(&zm)?) / (hi * hi));
        }
        let mut acc = 0.0;
        for (si, sj, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
            let mut zz = z.clone();
            zz[i] += si * hi;
            zz[j] += sj * hj;
            acc += w * f(&zz)?;
        }
        Ok(acc / (4.0 * hi * hj))
    };
    let vi = |i: usize| 1 + d + i;
    let mut d2_vv = Vec::with_capacity(d * d);
    let mut d2_xv = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            d2_vv.push(second(vi(i), vi(j))?);
            d2_xv.push(second(vi(i), 1 + j)?);
        }
    }
    Ok(Partials {
        value: f(&z)?,
        d_t: first(0)?,
        d_x: (0..d).map(|i| first(1 + i)).collect::<Result<_, _>>()?,
        d_v: (0..d).map(|i| first(vi(i))).collect::<Result<_, _>>()?,
        d2_vv,
        d2_xv,
        d2_tv: (0..d).map(|i| second(vi(i), 0)).collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_square_partials() {
        let l = Lagrangian::free_square(1);
        let p = l.eval_partials(0.0, &[1.0], &[2.0]).unwrap();
        assert_eq!(p.value, 4.0);
        assert_eq!(p.d_t, 0.0);
        assert_eq!(p.d_x, vec![0.0]);
        assert_eq!(p.d_v, vec![4.0]);
        assert_eq!(p.d2_vv, vec![2.0]);
    }

    #[test]
    fn harmonic_partials() {
        let l = Lagrangian::harmonic(1.0, 1);
        let p = l.eval_partials(0.0, &[1.0], &[2.0]).unwrap();
        assert_eq!(p.value, 3.0);
        assert_eq!(p.d_x, vec![-2.0]);
        assert_eq!(p.d_v, vec![4.0]);
    }

    #[test]
    fn complex_kinetic() {
        let l = Lagrangian::kinetic(1);
        let z = l.eval_complex(&[0.3], &[Complex64::new(1.0, 1.0)]).unwrap();
        assert!((z - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        let z = l.eval_complex(&[0.3], &[Complex64::new(1.0, -1.0)]).unwrap();
        assert!((z - Complex64::new(0.0, -1.0)).norm() < 1e-15);
        let z = l.eval_complex(&[0.3], &[Complex64::new(2.0, 0.0)]).unwrap();
        assert_eq!(z, Complex64::new(l.eval(0.0, &[0.3], &[2.0]).unwrap(), 0.0));
    }

    #[test]
    fn complex_eval_rejects_other_classes() {
        let rel = Lagrangian::relativistic(1.0, 1);
        assert!(matches!(
            rel.eval_complex(&[0.0], &[Complex64::new(0.1, 0.0)]),
            Err(LagrangianError::UnsupportedClass(_))
        ));
        let tv = Lagrangian::momentum_free(1.0, 1, 2, 1);
        assert!(matches!(
            tv.eval_complex(&[0.0], &[Complex64::new(0.1, 0.0)]),
            Err(LagrangianError::NotAutonomous(_))
        ));
    }

    #[test]
    fn non_finite_is_domain_error() {
        let rel = Lagrangian::relativistic(1.0, 1);
        assert!(rel.eval_partials(0.0, &[0.0], &[0.5]).is_ok());
        // |v| = 1: the second derivative blows up
        assert!(matches!(
            rel.eval_partials(0.0, &[0.0], &[1.0]),
            Err(LagrangianError::Domain { .. })
        ));
        assert!(matches!(rel.eval(0.0, &[0.0], &[2.0]), Err(LagrangianError::Domain { .. })));
    }

    #[test]
    fn flags() {
        assert!(Lagrangian::kinetic(2).is_state_free());
        assert!(Lagrangian::kinetic(2).is_autonomous());
        assert!(!Lagrangian::harmonic(1.0, 1).is_state_free());
        assert!(!Lagrangian::momentum_free(1.0, 1, 2, 1).is_autonomous());
        assert!(Lagrangian::momentum_free(1.0, 1, 2, 1).is_state_free());
        assert!(!Lagrangian::pendulum(1.0).is_state_free());
    }

    #[test]
    fn catalog_keys() {
        assert_eq!(Lagrangian::from_key("harmonic(0.25)", 1).unwrap(), Lagrangian::harmonic(0.25, 1));
        assert_eq!(Lagrangian::from_key("kinetic", 2).unwrap(), Lagrangian::kinetic(2));
        assert_eq!(
            Lagrangian::from_key("momentum-free", 1).unwrap(),
            Lagrangian::momentum_free(1.0, 1, 2, 1)
        );
        assert!(matches!(Lagrangian::from_key("lagrange", 1), Err(LagrangianError::UnknownKey(_))));
        assert!(matches!(
            Lagrangian::from_key("harmonic", 1),
            Err(LagrangianError::BadParameters { .. })
        ));
        assert!(Lagrangian::from_key("momentum-free(1,0.5,2)", 1).is_err());
    }

    #[test]
    fn velocity_derivative_polynomial() {
        let l = Lagrangian::harmonic(2.0, 1);
        let dv = l.polynomial().unwrap().d_velocity(0);
        assert_eq!(dv.eval(&0.0, &[3.0], &[1.5]), 3.0);
    }

    #[test]
    fn dimension_checked() {
        let l = Lagrangian::kinetic(2);
        assert!(matches!(
            l.eval(0.0, &[1.0], &[1.0, 2.0]),
            Err(LagrangianError::Dimension { expected: 2, got: 1 })
        ));
    }
}
