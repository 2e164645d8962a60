//! Minimal scalar abstraction shared by the analytic transform code.
//!
//! The element-wise transforms are written once against [`Real`] and
//! evaluated either on plain `f64` or on [`Dual`] numbers, which carry one
//! directional derivative. Parameter jacobians of the transform jets are
//! obtained by seeding a single parameter with a unit tangent.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    /// Primal value.
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: f64) -> Self;

    fn recip(self) -> Self {
        Self::cst(1.0) / self
    }

    /// Logistic function `1 / (1 + e^{-x})`, evaluated without overflow.
    fn logistic(self) -> Self {
        if self.val() >= 0.0 {
            (Self::cst(1.0) + (-self).exp()).recip()
        } else {
            let e = self.exp();
            e / (e + 1.0)
        }
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self {
        let v = self.val();
        if v > 35.0 {
            self
        } else if v < -35.0 {
            self.exp()
        } else {
            (self.exp() + 1.0).ln()
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
}

/// First-order dual number `v + d·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Self { v, d }
    }

    pub fn var(v: f64) -> Self {
        Self { v, d: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual::new(self.v + o, self.d)
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(self, o: f64) -> Dual {
        Dual::new(self.v - o, self.d)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual::new(self.v * o, self.d * o)
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, o: f64) -> Dual {
        Dual::new(self.v / o, self.d / o)
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, self.d * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dual::cst(1.0);
        }
        Dual::new(self.v.powi(n), self.d * n as f64 * self.v.powi(n - 1))
    }
    fn powf(self, p: f64) -> Self {
        Dual::new(self.v.powf(p), self.d * p * self.v.powf(p - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_chain_rule() {
        // d/dx [exp(x^2) / (1 + x)] at x = 0.7
        let f = |x: Dual| (x.powi(2)).exp() / (x + 1.0);
        let x = 0.7_f64;
        let got = f(Dual::var(x));
        let expected = (x * x).exp() * (2.0 * x * (1.0 + x) - 1.0) / (1.0 + x).powi(2);
        assert!((got.d - expected).abs() < 1e-14);
    }

    #[test]
    fn logistic_and_softplus_are_stable() {
        assert_eq!(Real::logistic(800.0_f64), 1.0);
        assert_eq!(Real::logistic(-800.0_f64), 0.0);
        assert_eq!(Real::softplus(800.0_f64), 800.0);
        assert!((Real::softplus(0.0_f64) - 2.0_f64.ln()).abs() < 1e-15);
        let s = Dual::var(-1.3).logistic();
        let l = 1.0 / (1.0 + 1.3_f64.exp());
        assert!((s.d - l * (1.0 - l)).abs() < 1e-15);
    }
}
