//! Second-order forward-mode automatic differentiation.
//!
//! A [`Jet`] carries a value together with its gradient and Hessian with
//! respect to a fixed set of independent variables. Arithmetic propagates
//! all three exactly (truncated second-order Taylor arithmetic), so partials
//! of polynomial and elementary expressions are exact to rounding.
//!
//! The base field is generic: `Jet<f64>` for real Lagrangians, and
//! `Jet<Complex64>` when velocities are complex.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;
use smallvec::{smallvec, SmallVec};

/// Gradient storage; inline up to four variables.
pub type Grad<T> = SmallVec<[T; 4]>;
/// Row-major Hessian storage; inline up to four variables.
pub type Hess<T> = SmallVec<[T; 16]>;

/// Numeric types the Lagrangian and field evaluators are generic over.
pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn exp(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, n: u32) -> Self;
    fn is_finite(&self) -> bool;
    /// Real part of the underlying value, used for branch decisions.
    fn real_part(&self) -> f64;

    fn scale(&self, c: f64) -> Self {
        self.clone() * Self::from_f64(c)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powi(&self, n: u32) -> Self {
        f64::powi(*self, n as i32)
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
    fn real_part(&self) -> f64 {
        *self
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

impl Scalar for Complex64 {
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn exp(&self) -> Self {
        Complex64::exp(*self)
    }
    fn sin(&self) -> Self {
        Complex64::sin(*self)
    }
    fn cos(&self) -> Self {
        Complex64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        Complex64::sqrt(*self)
    }
    fn powi(&self, n: u32) -> Self {
        // repeated squaring keeps real inputs bit-identical to f64::powi for small n
        let mut acc = Complex64::new(1.0, 0.0);
        let mut base = *self;
        let mut k = n;
        while k > 0 {
            if k & 1 == 1 {
                acc *= base;
            }
            base *= base;
            k >>= 1;
        }
        acc
    }
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn real_part(&self) -> f64 {
        self.re
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
}

/// Value, gradient and Hessian of a scalar expression.
///
/// An empty gradient means "constant": it is treated as all zeros, which
/// lets constants mix with variables without knowing the variable count.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet<T> {
    pub value: T,
    pub grad: Grad<T>,
    /// Row-major `n x n`, empty for constants.
    pub hess: Hess<T>,
}

impl<T: Scalar> Jet<T> {
    pub fn constant(value: T) -> Self {
        Jet {
            value,
            grad: SmallVec::new(),
            hess: SmallVec::new(),
        }
    }

    /// The `index`-th of `n` independent variables, seeded at `value`.
    pub fn variable(value: T, index: usize, n: usize) -> Self {
        let zero = T::from_f64(0.0);
        let mut grad: Grad<T> = smallvec![zero.clone(); n];
        grad[index] = T::from_f64(1.0);
        Jet {
            value,
            grad,
            hess: smallvec![zero; n * n],
        }
    }

    /// Builds a jet from explicitly known derivatives.
    pub fn from_parts(value: T, grad: Vec<T>, hess: Vec<T>) -> Self {
        debug_assert_eq!(hess.len(), grad.len() * grad.len());
        Jet {
            value,
            grad: SmallVec::from_vec(grad),
            hess: SmallVec::from_vec(hess),
        }
    }

    pub fn nvars(&self) -> usize {
        self.grad.len()
    }

    pub fn is_constant(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn d(&self, i: usize) -> T {
        self.grad.get(i).cloned().unwrap_or_else(|| T::from_f64(0.0))
    }

    pub fn d2(&self, i: usize, j: usize) -> T {
        let n = self.grad.len();
        if n == 0 {
            T::from_f64(0.0)
        } else {
            self.hess[i * n + j].clone()
        }
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at `self.value`.
    pub fn chain(&self, f0: T, f1: T, f2: T) -> Self {
        if self.is_constant() {
            return Jet::constant(f0);
        }
        let n = self.grad.len();
        let grad: Grad<T> = self.grad.iter().map(|g| f1.clone() * g.clone()).collect();
        let mut hess = Hess::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                hess.push(
                    f1.clone() * self.hess[i * n + j].clone()
                        + f2.clone() * self.grad[i].clone() * self.grad[j].clone(),
                );
            }
        }
        Jet {
            value: f0,
            grad,
            hess,
        }
    }

    pub fn recip(&self) -> Self {
        let one = T::from_f64(1.0);
        let inv = one / self.value.clone();
        let inv2 = inv.clone() * inv.clone();
        let f2 = (inv2.clone() * inv.clone()).scale(2.0);
        self.chain(inv, -inv2, f2)
    }

    pub fn map_base<U: Scalar>(&self, f: impl Fn(&T) -> U) -> Jet<U> {
        Jet {
            value: f(&self.value),
            grad: self.grad.iter().map(&f).collect(),
            hess: self.hess.iter().map(&f).collect(),
        }
    }
}

impl Jet<f64> {
    pub fn to_complex(&self) -> Jet<Complex64> {
        self.map_base(|v| Complex64::new(*v, 0.0))
    }
}

fn zip_add<A: smallvec::Array>(a: &[A::Item], b: &[A::Item], sign: f64) -> SmallVec<A>
where
    A::Item: Scalar,
{
    match (a.is_empty(), b.is_empty()) {
        (true, true) => SmallVec::new(),
        (false, true) => a.iter().cloned().collect(),
        (true, false) => b.iter().map(|x| x.scale(sign)).collect(),
        (false, false) => a
            .iter()
            .zip(b)
            .map(|(x, y)| x.clone() + y.scale(sign))
            .collect(),
    }
}

impl<T: Scalar> Add for Jet<T> {
    type Output = Jet<T>;
    fn add(self, rhs: Jet<T>) -> Jet<T> {
        Jet {
            value: self.value + rhs.value,
            grad: zip_add(&self.grad, &rhs.grad, 1.0),
            hess: zip_add(&self.hess, &rhs.hess, 1.0),
        }
    }
}

impl<T: Scalar> Sub for Jet<T> {
    type Output = Jet<T>;
    fn sub(self, rhs: Jet<T>) -> Jet<T> {
        Jet {
            value: self.value - rhs.value,
            grad: zip_add(&self.grad, &rhs.grad, -1.0),
            hess: zip_add(&self.hess, &rhs.hess, -1.0),
        }
    }
}

impl<T: Scalar> Neg for Jet<T> {
    type Output = Jet<T>;
    fn neg(self) -> Jet<T> {
        Jet {
            value: -self.value,
            grad: self.grad.into_iter().map(|g| -g).collect(),
            hess: self.hess.into_iter().map(|h| -h).collect(),
        }
    }
}

impl<T: Scalar> Mul for Jet<T> {
    type Output = Jet<T>;
    fn mul(self, rhs: Jet<T>) -> Jet<T> {
        let (a, b) = (&self, &rhs);
        match (a.is_constant(), b.is_constant()) {
            (true, true) => Jet::constant(a.value.clone() * b.value.clone()),
            (true, false) => scale_jet(b, &a.value),
            (false, true) => scale_jet(a, &b.value),
            (false, false) => {
                let n = a.grad.len();
                let grad = (0..n)
                    .map(|i| {
                        a.value.clone() * b.grad[i].clone() + b.value.clone() * a.grad[i].clone()
                    })
                    .collect();
                let mut hess = Hess::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        let k = i * n + j;
                        hess.push(
                            a.value.clone() * b.hess[k].clone()
                                + b.value.clone() * a.hess[k].clone()
                                + a.grad[i].clone() * b.grad[j].clone()
                                + b.grad[i].clone() * a.grad[j].clone(),
                        );
                    }
                }
                Jet {
                    value: a.value.clone() * b.value.clone(),
                    grad,
                    hess,
                }
            }
        }
    }
}

fn scale_jet<T: Scalar>(j: &Jet<T>, c: &T) -> Jet<T> {
    Jet {
        value: j.value.clone() * c.clone(),
        grad: j.grad.iter().map(|g| g.clone() * c.clone()).collect(),
        hess: j.hess.iter().map(|h| h.clone() * c.clone()).collect(),
    }
}

impl<T: Scalar> Div for Jet<T> {
    type Output = Jet<T>;
    fn div(self, rhs: Jet<T>) -> Jet<T> {
        if rhs.is_constant() {
            let inv = T::from_f64(1.0) / rhs.value;
            return scale_jet(&self, &inv);
        }
        self * rhs.recip()
    }
}

impl<T: Scalar> Scalar for Jet<T> {
    fn from_f64(x: f64) -> Self {
        Jet::constant(T::from_f64(x))
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e.clone(), e.clone(), e)
    }
    fn sin(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(s.clone(), c, -s)
    }
    fn cos(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(c.clone(), -s, -c)
    }
    fn sqrt(&self) -> Self {
        let r = self.value.sqrt();
        let f1 = T::from_f64(0.5) / r.clone();
        let f2 = -(f1.clone() / self.value.clone()).scale(0.5);
        self.chain(r, f1, f2)
    }
    fn powi(&self, n: u32) -> Self {
        match n {
            0 => Jet::constant(T::from_f64(1.0)),
            1 => self.clone(),
            _ => {
                let f0 = self.value.powi(n);
                let f1 = self.value.powi(n - 1).scale(n as f64);
                let f2 = self.value.powi(n - 2).scale((n * (n - 1)) as f64);
                self.chain(f0, f1, f2)
            }
        }
    }
    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad.iter().all(|g| g.is_finite())
            && self.hess.iter().all(|h| h.is_finite())
    }
    fn real_part(&self) -> f64 {
        self.value.real_part()
    }
    fn scale(&self, c: f64) -> Self {
        Jet {
            value: self.value.scale(c),
            grad: self.grad.iter().map(|g| g.scale(c)).collect(),
            hess: self.hess.iter().map(|h| h.scale(c)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(x: f64, y: f64) -> (Jet<f64>, Jet<f64>) {
        (Jet::variable(x, 0, 2), Jet::variable(y, 1, 2))
    }

    #[test]
    fn product_and_quotient() {
        let (x, y) = vars(1.5, -0.5);
        // f = x^2 y / (1 + y^2)
        let f = x.powi(2) * y.clone() / (Jet::from_f64(1.0) + y.powi(2));
        let (xv, yv) = (1.5f64, -0.5f64);
        let den = 1.0 + yv * yv;
        assert!((f.value - xv * xv * yv / den).abs() < 1e-15);
        assert!((f.d(0) - 2.0 * xv * yv / den).abs() < 1e-14);
        let dfdy = xv * xv * (1.0 - yv * yv) / (den * den);
        assert!((f.d(1) - dfdy).abs() < 1e-14);
        assert!((f.d2(0, 0) - 2.0 * yv / den).abs() < 1e-14);
        assert!((f.d2(0, 1) - f.d2(1, 0)).abs() < 1e-15);
        assert!((f.d2(0, 1) - 2.0 * xv * (1.0 - yv * yv) / (den * den)).abs() < 1e-14);
    }

    #[test]
    fn elementary_functions() {
        let (x, _) = vars(0.3, 0.0);
        let e = x.exp();
        assert!((e.d2(0, 0) - 0.3f64.exp()).abs() < 1e-15);
        let s = x.sin();
        assert!((s.d(0) - 0.3f64.cos()).abs() < 1e-15);
        assert!((s.d2(0, 0) + 0.3f64.sin()).abs() < 1e-15);
        let r = x.sqrt();
        assert!((r.d2(0, 0) + 0.25 * 0.3f64.powf(-1.5)).abs() < 1e-12);
    }

    #[test]
    fn constants_broadcast() {
        let (x, _) = vars(2.0, 0.0);
        let c = Jet::from_f64(3.0);
        let f = c.clone() * x.clone() + c - x;
        assert_eq!(f.value, 7.0);
        assert_eq!(f.grad.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn complex_base() {
        let v = Jet::variable(Complex64::new(1.0, 1.0), 0, 1);
        let f = v.powi(2).scale(0.5);
        assert!((f.value - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert!((f.d(0) - Complex64::new(1.0, 1.0)).norm() < 1e-15);
        assert!((f.d2(0, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }
}
