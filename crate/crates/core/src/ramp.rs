//! Ramp functions and the generalized sigmoid built from them.
//!
//! A ramp `ρ` vanishes for `x ≤ 0` and increases strictly on `(0, 1]`. The
//! generalized sigmoid
//!
//! ```text
//! σ[ρ](x) = ρ(x) / (ρ(x) + ρ(1 − x))
//! ```
//!
//! maps `[0, 1]` onto itself. For the exponential ramp
//! `ρ(x) = exp(−1 / (α xᵝ))` every derivative of `σ` vanishes at both ends,
//! which is what makes the bump transforms in [`crate::transform`] smooth.
//!
//! Derivatives are closed-form up to third order. Internally the ramp is
//! handled through `L = log ρ`, and `σ` is evaluated on ramps rescaled by a
//! common factor (`σ[λρ] = σ[ρ]`), so it stays finite when `ρ` itself
//! underflows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Exponent below which `exp` underflows to zero in `f64`.
const EXP_UNDERFLOW: f64 = -745.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RampError {
    #[error("monomial ramp order must be >= 1, got {0}")]
    InvalidOrder(u32),
    #[error("exponential ramp requires alpha > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("exponential ramp requires beta >= 1, got {0}")]
    InvalidBeta(f64),
}

/// Parameterization of the ramp `ρ`.
///
/// `Monomial { k }` is `ρ(x) = xᵏ` on `x > 0`. Extended by zero it is
/// `C^{k-1}` at the origin, so a bump built from it is only finitely smooth.
/// `Exponential { alpha, beta }` is `ρ(x) = exp(−1/(α xᵝ))`, smooth everywhere.
/// Note `ρ(1) = exp(−1/α)`; no normalization is applied because `σ[ρ]` does
/// not depend on the scale of `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RampSpec {
    Monomial { k: u32 },
    Exponential { alpha: f64, beta: f64 },
}

impl RampSpec {
    pub fn monomial(k: u32) -> Result<Self, RampError> {
        let spec = RampSpec::Monomial { k };
        spec.validate()?;
        Ok(spec)
    }

    pub fn exponential(alpha: f64, beta: f64) -> Result<Self, RampError> {
        let spec = RampSpec::Exponential { alpha, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RampError> {
        match *self {
            RampSpec::Monomial { k } if k < 1 => Err(RampError::InvalidOrder(k)),
            RampSpec::Exponential { alpha, .. } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(RampError::InvalidAlpha(alpha))
            }
            RampSpec::Exponential { beta, .. } if !(beta >= 1.0 && beta.is_finite()) => {
                Err(RampError::InvalidBeta(beta))
            }
            _ => Ok(()),
        }
    }

    /// Whether the ramp carries a trainable concentration `α`.
    pub fn has_alpha(&self) -> bool {
        matches!(self, RampSpec::Exponential { .. })
    }

    pub fn shape(&self) -> RampShape {
        match *self {
            RampSpec::Monomial { k } => RampShape::Monomial(k as f64),
            RampSpec::Exponential { beta, .. } => RampShape::Exponential(beta),
        }
    }
}

/// Ramp family without the (possibly trainable) `α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RampShape {
    Monomial(f64),
    Exponential(f64),
}

/// `x^{-p}` with a fast path for the integer exponents used in practice.
#[inline]
pub(crate) fn inv_pow<R: Real>(x: R, p: f64) -> R {
    if p.fract() == 0.0 && p.abs() < 16.0 {
        x.powi(-(p as i32))
    } else {
        x.powf(-p)
    }
}

impl RampShape {
    /// `(L, L′, L″, L‴)` with `L = log ρ`, valid for `x > 0`.
    /// `inv_alpha` is `1/α`; it is ignored by monomial ramps.
    #[inline]
    pub(crate) fn log_derivs<R: Real>(&self, inv_alpha: R, x: R) -> [R; 4] {
        match *self {
            RampShape::Monomial(k) => {
                let r = x.recip();
                let r2 = r * r;
                [x.ln() * k, r * k, -r2 * k, r2 * r * (2.0 * k)]
            }
            RampShape::Exponential(beta) => {
                let r = x.recip();
                let p0 = inv_pow(x, beta) * inv_alpha;
                let p1 = p0 * r;
                let p2 = p1 * r;
                let p3 = p2 * r;
                [
                    -p0,
                    p1 * beta,
                    -p2 * (beta * (beta + 1.0)),
                    p3 * (beta * (beta + 1.0) * (beta + 2.0)),
                ]
            }
        }
    }

    /// `L(x) − L(1 − x)` for `x ∈ (0, 1)`; `σ = logistic` of this value.
    #[inline]
    pub(crate) fn logit(&self, inv_alpha: f64, x: f64) -> f64 {
        match *self {
            RampShape::Monomial(k) => k * (x.ln() - (1.0 - x).ln()),
            RampShape::Exponential(beta) => {
                inv_alpha * (inv_pow(1.0 - x, beta) - inv_pow(x, beta))
            }
        }
    }
}

/// Ramp value and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampJet {
    pub rho: f64,
    pub drho: f64,
    pub d2rho: f64,
    pub d3rho: f64,
}

/// Generalized sigmoid value and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidJet {
    pub s: f64,
    pub ds: f64,
    pub d2s: f64,
    pub d3s: f64,
}

/// `ρ·(1, L′, L″ + L′², L‴ + 3L′L″ + L′³)` with `ρ = exp(L − shift)`.
/// Exact zeros once the exponential underflows.
#[inline]
fn ramp_from_log<R: Real>(l: [R; 4], shift: R) -> [R; 4] {
    let e = l[0] - shift;
    if e.val() < EXP_UNDERFLOW {
        let z = R::cst(0.0);
        return [z, z, z, z];
    }
    let rho = e.exp();
    let (l1, l2, l3) = (l[1], l[2], l[3]);
    [
        rho,
        rho * l1,
        rho * (l2 + l1 * l1),
        rho * (l3 + l1 * l2 * 3.0 + l1 * l1 * l1),
    ]
}

/// Ramp value and derivatives at `x`; all zero for `x ≤ 0`.
pub fn ramp_eval(spec: &RampSpec, x: f64) -> RampJet {
    if !(x > 0.0) {
        return RampJet { rho: 0.0, drho: 0.0, d2rho: 0.0, d3rho: 0.0 };
    }
    let inv_alpha = match *spec {
        RampSpec::Exponential { alpha, .. } => 1.0 / alpha,
        RampSpec::Monomial { .. } => 1.0,
    };
    let [rho, drho, d2rho, d3rho] = ramp_from_log(spec.shape().log_derivs(inv_alpha, x), 0.0);
    RampJet { rho, drho, d2rho, d3rho }
}

/// Quotient-rule derivatives of `u / v` given the jets of `u` and `v`.
#[inline]
fn quotient<R: Real>(u: [R; 4], v: [R; 4]) -> [R; 4] {
    let inv = v[0].recip();
    let s = u[0] * inv;
    let s1 = (u[1] - s * v[1]) * inv;
    let s2 = (u[2] - s1 * v[1] * 2.0 - s * v[2]) * inv;
    let s3 = (u[3] - s2 * v[1] * 3.0 - s1 * v[2] * 3.0 - s * v[3]) * inv;
    [s, s1, s2, s3]
}

/// `σ` and its derivatives at `x` from the ramp jets at `x` and at `1 − x`
/// (the latter differentiated with respect to its own argument).
pub fn sigmoid_from_ramps(at_x: RampJet, at_one_minus_x: RampJet) -> SigmoidJet {
    let u = [at_x.rho, at_x.drho, at_x.d2rho, at_x.d3rho];
    let w = [at_one_minus_x.rho, at_one_minus_x.drho, at_one_minus_x.d2rho, at_one_minus_x.d3rho];
    let [s, ds, d2s, d3s] = sigmoid_quotient(u, w);
    SigmoidJet { s, ds, d2s, d3s }
}

#[inline]
fn sigmoid_quotient<R: Real>(u: [R; 4], w: [R; 4]) -> [R; 4] {
    // v(x) = ρ(x) + ρ(1 − x); odd derivatives of the reflected term flip sign.
    let v = [u[0] + w[0], u[1] - w[1], u[2] + w[2], u[3] - w[3]];
    quotient(u, v)
}

/// Generic `σ` jet used by the transform code. Outside `(0, 1)` the sigmoid
/// is flat (0 below, 1 above).
///
/// Evaluated as `σ = logistic(h)` with `h(x) = L(x) − L(1 − x)`, so the
/// derivatives carry the factor `σ(1 − σ)` explicitly and stay accurate in
/// the saturated tails where the quotient form cancels.
#[inline]
pub(crate) fn sigmoid_jet<R: Real>(shape: RampShape, inv_alpha: R, x: R) -> [R; 4] {
    let xv = x.val();
    if xv <= 0.0 {
        let z = R::cst(0.0);
        return [z, z, z, z];
    }
    if xv >= 1.0 {
        let z = R::cst(0.0);
        return [R::cst(1.0), z, z, z];
    }
    let lx = shape.log_derivs(inv_alpha, x);
    let lr = shape.log_derivs(inv_alpha, R::cst(1.0) - x);
    let h = lx[0] - lr[0];
    let h1 = lx[1] + lr[1];
    let h2 = lx[2] - lr[2];
    let h3 = lx[3] + lr[3];
    let s = h.logistic();
    let q = (-h).logistic();
    let sq = s * q;
    let skew = q - s;
    [
        s,
        sq * h1,
        sq * (h2 + skew * h1 * h1),
        sq * (h3 + skew * h1 * h2 * 3.0 + (R::cst(1.0) - sq * 6.0) * h1 * h1 * h1),
    ]
}

/// Generalized sigmoid and derivatives at `x`, clamped outside `[0, 1]`.
pub fn sigmoid_eval(spec: &RampSpec, x: f64) -> SigmoidJet {
    let inv_alpha = match *spec {
        RampSpec::Exponential { alpha, .. } => 1.0 / alpha,
        RampSpec::Monomial { .. } => 1.0,
    };
    let [s, ds, d2s, d3s] = sigmoid_jet(spec.shape(), inv_alpha, x);
    SigmoidJet { s, ds, d2s, d3s }
}

/// Value-only sigmoid through the logistic form `σ = logistic(L(x) − L(1−x))`.
#[inline]
pub(crate) fn sigmoid_value(shape: RampShape, inv_alpha: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        Real::logistic(shape.logit(inv_alpha, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exp_ramp(alpha: f64, beta: f64) -> RampSpec {
        RampSpec::exponential(alpha, beta).unwrap()
    }

    #[test]
    fn construction_is_validated() {
        assert_eq!(RampSpec::monomial(0), Err(RampError::InvalidOrder(0)));
        assert_eq!(RampSpec::exponential(0.0, 2.0), Err(RampError::InvalidAlpha(0.0)));
        assert_eq!(RampSpec::exponential(1.0, 0.5), Err(RampError::InvalidBeta(0.5)));
        assert!(RampSpec::exponential(0.3, 1.0).is_ok());
    }

    #[test]
    fn linear_ramp() {
        let r = ramp_eval(&RampSpec::monomial(1).unwrap(), 0.3);
        assert_eq!((r.rho, r.drho, r.d2rho), (0.3, 1.0, 0.0));
        assert!(r.d3rho.abs() < 1e-13);
        let s = sigmoid_eval(&RampSpec::monomial(1).unwrap(), 0.3);
        assert!((s.s - 0.3).abs() < 1e-15);
    }

    #[test]
    fn exponential_ramp_vanishes_left_of_origin() {
        let spec = exp_ramp(1.0, 1.0);
        for x in [-3.0, -1e-9, 0.0] {
            let r = ramp_eval(&spec, x);
            assert_eq!(r, RampJet { rho: 0.0, drho: 0.0, d2rho: 0.0, d3rho: 0.0 });
        }
    }

    #[test]
    fn exponential_ramp_first_derivative() {
        // ρ(0.5) = exp(−4), ρ′ = (β/α) x^{−3} ρ = 16 e^{−4}.
        let r = ramp_eval(&exp_ramp(1.0, 2.0), 0.5);
        assert!((r.rho - (-4.0f64).exp()).abs() < 1e-16);
        assert!((r.drho - 16.0 * (-4.0f64).exp()).abs() < 1e-15);
        // Central differences on ρ for a non-unit α.
        let spec = exp_ramp(0.7, 2.0);
        let h = 1e-4;
        let x = 0.43;
        let f = |x| ramp_eval(&spec, x).rho;
        let fd = (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h);
        assert!((ramp_eval(&spec, x).drho - fd).abs() < 1e-8 * fd.abs());
    }

    #[test]
    fn ramp_underflow_returns_exact_zeros() {
        let r = ramp_eval(&exp_ramp(1.0, 2.0), 1e-3);
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.d3rho, 0.0);
    }

    #[test]
    fn exponential_sigmoid_at_quarter() {
        // ρ(.25) = e^{−16}, ρ(.75) = e^{−16/9}; reference from 40-digit arithmetic.
        let s = sigmoid_eval(&exp_ramp(1.0, 2.0), 0.25).s;
        let reference = 6.658_357_036_482_515e-7;
        assert!((s - reference).abs() < 1e-13 * reference);
    }

    #[test]
    fn sigmoid_clamps_outside_unit_interval() {
        let spec = exp_ramp(1.0, 2.0);
        assert_eq!(sigmoid_eval(&spec, -0.5).s, 0.0);
        assert_eq!(sigmoid_eval(&spec, 1.5), SigmoidJet { s: 1.0, ds: 0.0, d2s: 0.0, d3s: 0.0 });
        assert_eq!(sigmoid_eval(&spec, 0.0).s, 0.0);
        assert_eq!(sigmoid_eval(&spec, 1.0).s, 1.0);
    }

    #[test]
    fn boundary_flatness_of_exponential_sigmoid() {
        let spec = exp_ramp(1.0, 2.0);
        for x in [1e-4, 1.0 - 1e-4] {
            let j = sigmoid_eval(&spec, x);
            assert!(j.ds.abs() <= 1e-6 && j.d2s.abs() <= 1e-6 && j.d3s.abs() <= 1e-6);
        }
    }

    #[test]
    fn tiny_alpha_does_not_produce_nan() {
        // Both ρ(x) and ρ(1−x) underflow here; the rescaled quotient must not.
        let spec = exp_ramp(1e-5, 2.0);
        let j = sigmoid_eval(&spec, 0.49);
        assert!(j.s.is_finite() && j.ds.is_finite() && j.d3s.is_finite());
        assert!(j.s < 0.5);
        assert_eq!(sigmoid_eval(&spec, 0.5).s, 0.5);
    }

    #[test]
    fn value_path_matches_quotient_path() {
        for spec in [exp_ramp(0.4, 1.0), exp_ramp(2.0, 2.0), RampSpec::monomial(3).unwrap()] {
            let inv_alpha = match spec {
                RampSpec::Exponential { alpha, .. } => 1.0 / alpha,
                _ => 1.0,
            };
            for i in 1..100 {
                let x = i as f64 / 100.0;
                let a = sigmoid_eval(&spec, x).s;
                let b = sigmoid_value(spec.shape(), inv_alpha, x);
                assert!((a - b).abs() < 1e-14, "{spec:?} x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ramp_quotient_route_matches_logistic_route() {
        for spec in [exp_ramp(1.0, 2.0), exp_ramp(0.6, 1.0), RampSpec::monomial(2).unwrap()] {
            for i in 1..20 {
                let x = 0.3 + 0.4 * i as f64 / 20.0;
                let a = sigmoid_from_ramps(ramp_eval(&spec, x), ramp_eval(&spec, 1.0 - x));
                let b = sigmoid_eval(&spec, x);
                for (u, v) in [(a.s, b.s), (a.ds, b.ds), (a.d2s, b.d2s), (a.d3s, b.d3s)] {
                    assert!((u - v).abs() <= 1e-11 * v.abs().max(1.0), "{spec:?} x={x}: {u} vs {v}");
                }
            }
        }
    }

    fn arb_spec() -> impl Strategy<Value = RampSpec> {
        prop_oneof![
            (1u32..6).prop_map(|k| RampSpec::Monomial { k }),
            (0.2f64..3.0, prop::sample::select(vec![1.0, 2.0]))
                .prop_map(|(alpha, beta)| RampSpec::Exponential { alpha, beta }),
        ]
    }

    proptest! {
        #[test]
        fn sigmoid_is_symmetric(spec in arb_spec(), x in 0.0f64..=1.0) {
            let a = sigmoid_eval(&spec, x).s;
            let b = sigmoid_eval(&spec, 1.0 - x).s;
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn sigmoid_is_monotone(spec in arb_spec(), x in 0.01f64..0.99) {
            // Deep in the tails the true slope is below the smallest f64.
            let j = sigmoid_eval(&spec, x);
            prop_assert!(j.ds >= 0.0);
            if j.s > 1e-290 && 1.0 - j.s > 1e-12 {
                prop_assert!(j.ds > 0.0);
            }
        }

        #[test]
        fn sigmoid_is_scale_invariant(spec in arb_spec(), x in 0.01f64..0.99, lambda in 1e-3f64..1e3) {
            let scale = |r: RampJet| RampJet {
                rho: lambda * r.rho,
                drho: lambda * r.drho,
                d2rho: lambda * r.d2rho,
                d3rho: lambda * r.d3rho,
            };
            let a = sigmoid_from_ramps(ramp_eval(&spec, x), ramp_eval(&spec, 1.0 - x));
            let b = sigmoid_from_ramps(scale(ramp_eval(&spec, x)), scale(ramp_eval(&spec, 1.0 - x)));
            prop_assert!((a.s - b.s).abs() <= 1e-12);
            prop_assert!((a.ds - b.ds).abs() <= 1e-9 * (1.0 + a.ds.abs()));
        }
    }

    #[test]
    fn sigmoid_derivatives_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let specs = [exp_ramp(1.0, 2.0), exp_ramp(0.5, 1.0), RampSpec::monomial(4).unwrap()];
        let h = 1e-4;
        for spec in specs {
            for _ in 0..100 {
                let x: f64 = rng.random_range(0.1..0.9);
                let j = sigmoid_eval(&spec, x);
                let f = |t: f64| sigmoid_eval(&spec, t);
                // Differentiate the next-lower analytic derivative with a
                // fourth-order stencil; the tails are steep.
                let fd = |g: &dyn Fn(SigmoidJet) -> f64| {
                    (g(f(x - 2.0 * h)) - 8.0 * g(f(x - h)) + 8.0 * g(f(x + h)) - g(f(x + 2.0 * h)))
                        / (12.0 * h)
                };
                let ds = fd(&|j| j.s);
                let d2s = fd(&|j| j.ds);
                let d3s = fd(&|j| j.d2s);
                for (a, b) in [(j.ds, ds), (j.d2s, d2s), (j.d3s, d3s)] {
                    let err = (a - b).abs() / a.abs().max(1e-3);
                    assert!(err < 1e-5, "{spec:?} x={x}: {a} vs {b}");
                }
            }
        }
    }
}
