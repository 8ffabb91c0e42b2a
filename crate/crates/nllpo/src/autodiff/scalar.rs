//! Scalar abstraction for the tape: plain `f64` for gradients, dual numbers
//! for the forward-tangent pass that turns a reverse sweep into a
//! Hessian-vector product.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + 'static
{
    /// Lift a constant (zero tangent).
    fn from_f64(v: f64) -> Self;
    /// Lift a value carrying a directional-derivative seed.
    fn with_tangent(v: f64, t: f64) -> Self;
    fn value(self) -> f64;
    fn tangent(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn with_tangent(v: f64, _t: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn tangent(self) -> f64 {
        0.0
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number: value plus directional derivative.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Dual {
    pub val: f64,
    pub tan: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual { val: self.val + rhs.val, tan: self.tan + rhs.tan }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual { val: self.val - rhs.val, tan: self.tan - rhs.tan }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual { val: self.val * rhs.val, tan: self.tan * rhs.val + self.val * rhs.tan }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let val = self.val / rhs.val;
        Dual { val, tan: (self.tan - val * rhs.tan) / rhs.val }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { val: -self.val, tan: -self.tan }
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, rhs: Dual) {
        *self = *self + rhs;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, rhs: Dual) {
        *self = *self - rhs;
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual { val: v, tan: 0.0 }
    }
    fn with_tangent(v: f64, t: f64) -> Self {
        Dual { val: v, tan: t }
    }
    fn value(self) -> f64 {
        self.val
    }
    fn tangent(self) -> f64 {
        self.tan
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        Dual { val: e, tan: self.tan * e }
    }
    fn ln(self) -> Self {
        Dual { val: self.val.ln(), tan: self.tan / self.val }
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        Dual { val: t, tan: self.tan * (1.0 - t * t) }
    }
}
