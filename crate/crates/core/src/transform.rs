//! Element-wise bijections on the unit interval and the unit circle.
//!
//! A single bump component rescales the generalized sigmoid of
//! [`crate::ramp`] to a location `b` and concentration `a`:
//!
//! ```text
//! u(x) = σ(a(x − b) + ½)
//! ```
//!
//! On the interval the component is renormalized to `(u(x) − u(0)) / (u(1) − u(0))`.
//! On the circle its density `u′` is wrapped modulo one instead, so the value
//! is the closed-form integral `Σ_k u(x + k) − u(k)` over the (at most two)
//! pieces of the wrapped support. Components are mixed convexly and blended
//! with the identity:
//!
//! ```text
//! f(x) = (1 − c) Σᵢ πᵢ uᵢ(x) + c·x
//! ```
//!
//! which bounds the slope from below by `c` everywhere.
//!
//! All quantities here are analytic. Parameter derivatives are obtained by
//! running the same code on [`Dual`] numbers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ramp::{sigmoid_jet, sigmoid_value, RampShape, RampSpec};
use crate::real::{Dual, Real};

/// Lower bound of the identity-mix coefficient `c`.
pub const C_MIN: f64 = 1e-3;
/// Lower bound of the bump concentration on the interval.
pub const A_MIN_INTERVAL: f64 = 0.1;
/// Lower bound of the bump concentration on the circle (support width ≤ 1).
pub const A_MIN_CIRCLE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Interval,
    Circle,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("mixture needs at least one component")]
    NoComponents,
    #[error("expected {expected} weight logits, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("component {0} disagrees with the others on carrying a trainable alpha")]
    AlphaLayout(usize),
    #[error("monomial ramps have no alpha, but component {0} carries one")]
    UnexpectedAlpha(usize),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Ramp(#[from] crate::ramp::RampError),
}

/// Value, first three derivatives, and the log-slope `g = log dy` with its
/// first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformJet {
    pub y: f64,
    pub dy: f64,
    pub d2y: f64,
    pub d3y: f64,
    pub g: f64,
    pub dg: f64,
    pub d2g: f64,
}

impl TransformJet {
    pub fn new(y: f64, dy: f64, d2y: f64, d3y: f64) -> Self {
        let dg = d2y / dy;
        Self { y, dy, d2y, d3y, g: dy.ln(), dg, d2g: d3y / dy - dg * dg }
    }
}

/// Partial derivatives of `y`, `∂ₓy` and `∂ₓ²y` with respect to every
/// unconstrained parameter of a transform.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamJacobian {
    pub dy_dtheta: Vec<f64>,
    pub ddy_dtheta: Vec<f64>,
    pub dd2y_dtheta: Vec<f64>,
}

/// A strictly increasing scalar map with analytic jets and parameter
/// derivatives. This is the interface the root finder and the implicit
/// gradient code work against.
pub trait ElementwiseBijection {
    /// `None` for maps on the whole real line.
    fn domain(&self) -> Option<Domain>;
    fn jet(&self, x: f64) -> TransformJet;
    fn value(&self, x: f64) -> f64 {
        self.jet(x).y
    }
    /// Value-only evaluator for repeated calls (e.g. inside a root finder).
    fn evaluator(&self) -> Box<dyn Fn(f64) -> f64 + '_> {
        Box::new(move |x| self.value(x))
    }
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<(), TransformError>;
    fn param_jacobian(&self, x: f64) -> ParamJacobian;
    fn n_params(&self) -> usize {
        self.params().len()
    }
}

/// Unconstrained parameters of one bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpParams {
    pub a_raw: f64,
    pub b_raw: f64,
    /// `log α` of an exponential ramp when `α` is trained per component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_raw: Option<f64>,
}

fn concentration<R: Real>(domain: Domain, a_raw: R) -> R {
    let floor = match domain {
        Domain::Interval => A_MIN_INTERVAL,
        Domain::Circle => A_MIN_CIRCLE,
    };
    a_raw.softplus() + floor
}

fn location<R: Real>(domain: Domain, b_raw: R) -> R {
    match domain {
        Domain::Interval => b_raw.logistic(),
        Domain::Circle => b_raw - b_raw.val().floor(),
    }
}

fn identity_mix<R: Real>(c_raw: R) -> R {
    c_raw.logistic() * (1.0 - C_MIN) + C_MIN
}

/// Inverse of the `a` map, for initialization.
pub fn a_raw_for(domain: Domain, a: f64) -> f64 {
    let floor = match domain {
        Domain::Interval => A_MIN_INTERVAL,
        Domain::Circle => A_MIN_CIRCLE,
    };
    let t = (a - floor).max(1e-12);
    // softplus⁻¹(t) = log(eᵗ − 1)
    if t > 35.0 {
        t
    } else {
        t.exp_m1().ln()
    }
}

/// Inverse of the `b` map, for initialization.
pub fn b_raw_for(domain: Domain, b: f64) -> f64 {
    match domain {
        Domain::Interval => {
            let b = b.clamp(1e-9, 1.0 - 1e-9);
            (b / (1.0 - b)).ln()
        }
        Domain::Circle => b.rem_euclid(1.0),
    }
}

/// Inverse of the `c` map, for initialization.
pub fn c_raw_for(c: f64) -> f64 {
    let t = ((c - C_MIN) / (1.0 - C_MIN)).clamp(1e-12, 1.0 - 1e-12);
    (t / (1.0 - t)).ln()
}

/// Jet `(u, u′, u″, u‴)` of one bump in `x` (without the identity mix).
fn bump_jet<R: Real>(domain: Domain, shape: RampShape, a: R, b: R, inv_alpha: R, x: f64) -> [R; 4] {
    let z = |t: f64| (R::cst(t) - b) * a + 0.5;
    let zero = R::cst(0.0);
    match domain {
        Domain::Interval => {
            let s0 = sigmoid_jet(shape, inv_alpha, z(0.0))[0];
            let s1 = sigmoid_jet(shape, inv_alpha, z(1.0))[0];
            let inv_n = (s1 - s0).recip();
            let s = sigmoid_jet(shape, inv_alpha, z(x));
            [
                (s[0] - s0) * inv_n,
                s[1] * a * inv_n,
                s[2] * a * a * inv_n,
                s[3] * a * a * a * inv_n,
            ]
        }
        Domain::Circle => {
            let mut out = [zero; 4];
            for k in [-1.0, 0.0, 1.0] {
                let base = sigmoid_jet(shape, inv_alpha, z(k))[0];
                let s = sigmoid_jet(shape, inv_alpha, z(x + k));
                out[0] = out[0] + s[0] - base;
                out[1] = out[1] + s[1] * a;
                out[2] = out[2] + s[2] * a * a;
                out[3] = out[3] + s[3] * a * a * a;
            }
            out
        }
    }
}

/// Single bump component on `domain`, evaluated with fixed ramp `α`
/// unless the component carries its own `alpha_raw`.
pub fn bump_forward(p: &BumpParams, ramp: &RampSpec, x: f64, domain: Domain) -> TransformJet {
    let a = concentration(domain, p.a_raw);
    let b = location(domain, p.b_raw);
    let inv_alpha = inv_alpha_of(ramp, p.alpha_raw);
    let [y, dy, d2y, d3y] = bump_jet(domain, ramp.shape(), a, b, inv_alpha, x);
    TransformJet::new(y, dy, d2y, d3y)
}

fn inv_alpha_of(ramp: &RampSpec, alpha_raw: Option<f64>) -> f64 {
    match (ramp, alpha_raw) {
        (_, Some(raw)) => (-raw).exp(),
        (RampSpec::Exponential { alpha, .. }, None) => 1.0 / alpha,
        (RampSpec::Monomial { .. }, None) => 1.0,
    }
}

/// Convex mixture of bumps blended with the identity.
///
/// Serialized as
/// `{domain, ramp:{kind, k|alpha,beta}, components:[{a_raw,b_raw[,alpha_raw]}], weight_logits, c_raw}`.
///
/// The flat parameter vector is ordered `[a_raw, b_raw, (alpha_raw)]` per
/// component, then the weight logits, then `c_raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureTransform {
    pub domain: Domain,
    pub ramp: RampSpec,
    pub components: Vec<BumpParams>,
    pub weight_logits: Vec<f64>,
    pub c_raw: f64,
}

impl MixtureTransform {
    /// Evenly spaced bumps of concentration `n_components / 2`, equal
    /// weights and `c = ½`. Exponential ramps get a trainable `α`.
    pub fn new(domain: Domain, ramp: RampSpec, n_components: usize) -> Result<Self, TransformError> {
        ramp.validate()?;
        if n_components == 0 {
            return Err(TransformError::NoComponents);
        }
        let a = (n_components as f64 / 2.0).max(match domain {
            Domain::Interval => 1.0,
            Domain::Circle => 1.5,
        });
        let alpha_raw = match ramp {
            RampSpec::Exponential { alpha, .. } => Some(alpha.ln()),
            RampSpec::Monomial { .. } => None,
        };
        let components = (0..n_components)
            .map(|i| BumpParams {
                a_raw: a_raw_for(domain, a),
                b_raw: b_raw_for(domain, (i as f64 + 0.5) / n_components as f64),
                alpha_raw,
            })
            .collect();
        Ok(Self {
            domain,
            ramp,
            components,
            weight_logits: vec![0.0; n_components],
            c_raw: c_raw_for(0.5),
        })
    }

    /// Rebuild from a flat parameter vector.
    pub fn from_params(
        domain: Domain,
        ramp: RampSpec,
        n_components: usize,
        params: &[f64],
    ) -> Result<Self, TransformError> {
        let mut t = Self::new(domain, ramp, n_components)?;
        t.set_params(params)?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        self.ramp.validate()?;
        if self.components.is_empty() {
            return Err(TransformError::NoComponents);
        }
        if self.weight_logits.len() != self.components.len() {
            return Err(TransformError::WeightCount {
                expected: self.components.len(),
                got: self.weight_logits.len(),
            });
        }
        let first = self.components[0].alpha_raw.is_some();
        for (i, c) in self.components.iter().enumerate() {
            if c.alpha_raw.is_some() != first {
                return Err(TransformError::AlphaLayout(i));
            }
            if c.alpha_raw.is_some() && !self.ramp.has_alpha() {
                return Err(TransformError::UnexpectedAlpha(i));
            }
        }
        Ok(())
    }

    fn per_component(&self) -> usize {
        if self.components.first().is_some_and(|c| c.alpha_raw.is_some()) {
            3
        } else {
            2
        }
    }

    /// Number of unconstrained parameters for a mixture layout.
    pub fn param_count(ramp: &RampSpec, n_components: usize) -> usize {
        let per = if ramp.has_alpha() { 3 } else { 2 };
        per * n_components + n_components + 1
    }

    /// Mixture weights `π = softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.weight_logits)
    }

    pub fn identity_coefficient(&self) -> f64 {
        identity_mix(self.c_raw)
    }

    fn jet_generic<R: Real>(&self, raw: &[R], x: f64) -> [R; 4] {
        let per = self.per_component();
        let n = self.components.len();
        let shape = self.ramp.shape();
        let logits = &raw[per * n..per * n + n];
        let weights = softmax(logits);
        let c = identity_mix(raw[per * n + n]);
        let fixed_inv_alpha = inv_alpha_of(&self.ramp, None);
        let zero = R::cst(0.0);
        let mut acc = [zero; 4];
        for (i, w) in weights.iter().enumerate() {
            let p = &raw[per * i..per * (i + 1)];
            let a = concentration(self.domain, p[0]);
            let b = location(self.domain, p[1]);
            let inv_alpha = if per == 3 { (-p[2]).exp() } else { R::cst(fixed_inv_alpha) };
            let u = bump_jet(self.domain, shape, a, b, inv_alpha, x);
            for k in 0..4 {
                acc[k] = acc[k] + u[k] * *w;
            }
        }
        let keep = R::cst(1.0) - c;
        [
            acc[0] * keep + c * x,
            acc[1] * keep + c,
            acc[2] * keep,
            acc[3] * keep,
        ]
    }

    /// Precompute the constrained parameters for fast value-only evaluation.
    pub fn resolve(&self) -> ResolvedMixture {
        ResolvedMixture::from_params(self.domain, self.ramp, self.components.len(), &self.params())
    }
}

fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let m = logits.iter().map(|l| l.val()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<R> = logits.iter().map(|&l| (l - m).exp()).collect();
    let total = e.iter().fold(R::cst(0.0), |s, &v| s + v);
    e.into_iter().map(|v| v / total).collect()
}

impl ElementwiseBijection for MixtureTransform {
    fn domain(&self) -> Option<Domain> {
        Some(self.domain)
    }

    fn jet(&self, x: f64) -> TransformJet {
        let [y, dy, d2y, d3y] = self.jet_generic(&self.params(), x);
        TransformJet::new(y, dy, d2y, d3y)
    }

    fn value(&self, x: f64) -> f64 {
        self.resolve().value(x)
    }

    fn evaluator(&self) -> Box<dyn Fn(f64) -> f64 + '_> {
        let r = self.resolve();
        Box::new(move |x| r.value(x))
    }

    fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.components.len() * 4 + 1);
        for c in &self.components {
            out.push(c.a_raw);
            out.push(c.b_raw);
            if let Some(al) = c.alpha_raw {
                out.push(al);
            }
        }
        out.extend_from_slice(&self.weight_logits);
        out.push(self.c_raw);
        out
    }

    fn set_params(&mut self, params: &[f64]) -> Result<(), TransformError> {
        let per = self.per_component();
        let n = self.components.len();
        let expected = per * n + n + 1;
        if params.len() != expected {
            return Err(TransformError::ParamCount { expected, got: params.len() });
        }
        for (i, c) in self.components.iter_mut().enumerate() {
            let p = &params[per * i..per * (i + 1)];
            c.a_raw = p[0];
            c.b_raw = p[1];
            if per == 3 {
                c.alpha_raw = Some(p[2]);
            }
        }
        self.weight_logits.copy_from_slice(&params[per * n..per * n + n]);
        self.c_raw = params[per * n + n];
        Ok(())
    }

    fn param_jacobian(&self, x: f64) -> ParamJacobian {
        let base = self.params();
        let n = base.len();
        let mut jac = ParamJacobian {
            dy_dtheta: vec![0.0; n],
            ddy_dtheta: vec![0.0; n],
            dd2y_dtheta: vec![0.0; n],
        };
        let mut raw: Vec<Dual> = base.iter().map(|&v| Dual::cst(v)).collect();
        for j in 0..n {
            raw[j].d = 1.0;
            let out = self.jet_generic(&raw, x);
            raw[j].d = 0.0;
            jac.dy_dtheta[j] = out[0].d;
            jac.ddy_dtheta[j] = out[1].d;
            jac.dd2y_dtheta[j] = out[2].d;
        }
        jac
    }
}

/// Value and jets of a mixture transform at `x`.
pub fn mixture_forward(t: &MixtureTransform, x: f64) -> TransformJet {
    t.jet(x)
}

/// Parameter derivatives of `y`, `∂ₓy` and `∂ₓ²y` in the flat ordering.
pub fn transform_param_jacobian(t: &MixtureTransform, x: f64) -> ParamJacobian {
    t.param_jacobian(x)
}

/// Mixture with constrained parameters precomputed, for the many value-only
/// evaluations made by the root finder.
#[derive(Debug, Clone)]
pub struct ResolvedMixture {
    domain: Domain,
    shape: RampShape,
    a: Vec<f64>,
    b: Vec<f64>,
    inv_alpha: Vec<f64>,
    // (1 − c)·πᵢ
    scaled_weights: Vec<f64>,
    // Interval: u(0) and 1 / (u(1) − u(0)). Circle: Σ_k u(k).
    offset: Vec<f64>,
    inv_norm: Vec<f64>,
    c: f64,
}

impl ResolvedMixture {
    /// Build from a flat parameter vector in [`MixtureTransform`] ordering.
    /// Panics if the length does not match the layout.
    pub fn from_params(domain: Domain, ramp: RampSpec, n: usize, raw: &[f64]) -> Self {
        let per = if raw.len() == 3 * n + n + 1 { 3 } else { 2 };
        assert_eq!(raw.len(), per * n + n + 1, "mixture parameter count");
        let shape = ramp.shape();
        let fixed = inv_alpha_of(&ramp, None);
        let c = identity_mix(raw[per * n + n]);
        let weights = softmax(&raw[per * n..per * n + n]);
        let mut out = ResolvedMixture {
            domain,
            shape,
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            inv_alpha: Vec::with_capacity(n),
            scaled_weights: weights.iter().map(|w| w * (1.0 - c)).collect(),
            offset: Vec::with_capacity(n),
            inv_norm: Vec::with_capacity(n),
            c,
        };
        for i in 0..n {
            let p = &raw[per * i..per * (i + 1)];
            let a = concentration(domain, p[0]);
            let b = location(domain, p[1]);
            let ia = if per == 3 { (-p[2]).exp() } else { fixed };
            let u = |t: f64| sigmoid_value(shape, ia, a * (t - b) + 0.5);
            match domain {
                Domain::Interval => {
                    let u0 = u(0.0);
                    out.offset.push(u0);
                    out.inv_norm.push(1.0 / (u(1.0) - u0));
                }
                Domain::Circle => {
                    out.offset.push(u(-1.0) + u(0.0) + u(1.0));
                    out.inv_norm.push(1.0);
                }
            }
            out.a.push(a);
            out.b.push(b);
            out.inv_alpha.push(ia);
        }
        out
    }

    pub fn value(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.a.len() {
            let (a, b, ia) = (self.a[i], self.b[i], self.inv_alpha[i]);
            let u = match self.domain {
                Domain::Interval => {
                    (sigmoid_value(self.shape, ia, a * (x - b) + 0.5) - self.offset[i]) * self.inv_norm[i]
                }
                Domain::Circle => {
                    let z = a * (x - b) + 0.5;
                    sigmoid_value(self.shape, ia, z - a)
                        + sigmoid_value(self.shape, ia, z)
                        + sigmoid_value(self.shape, ia, z + a)
                        - self.offset[i]
                }
            };
            acc += self.scaled_weights[i] * u;
        }
        acc + self.c * x
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }
}

/// Affine map `scale·x + shift` on the real line, parameterized by
/// `(log scale, shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub log_scale: f64,
    pub shift: f64,
}

impl AffineTransform {
    /// Panics unless `scale > 0`.
    pub fn new(scale: f64, shift: f64) -> Self {
        assert!(scale > 0.0, "affine scale must be positive");
        Self { log_scale: scale.ln(), shift }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn inverse(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale()
    }
}

/// `scale·x + shift` with its jet.
pub fn affine_forward(scale: f64, shift: f64, x: f64) -> TransformJet {
    TransformJet::new(scale * x + shift, scale, 0.0, 0.0)
}

/// Analytic inverse of [`affine_forward`].
pub fn affine_inverse(scale: f64, shift: f64, y: f64) -> f64 {
    (y - shift) / scale
}

impl ElementwiseBijection for AffineTransform {
    fn domain(&self) -> Option<Domain> {
        None
    }
    fn jet(&self, x: f64) -> TransformJet {
        affine_forward(self.scale(), self.shift, x)
    }
    fn params(&self) -> Vec<f64> {
        vec![self.log_scale, self.shift]
    }
    fn set_params(&mut self, params: &[f64]) -> Result<(), TransformError> {
        if params.len() != 2 {
            return Err(TransformError::ParamCount { expected: 2, got: params.len() });
        }
        self.log_scale = params[0];
        self.shift = params[1];
        Ok(())
    }
    fn param_jacobian(&self, x: f64) -> ParamJacobian {
        let s = self.scale();
        ParamJacobian {
            dy_dtheta: vec![s * x, 1.0],
            ddy_dtheta: vec![s, 0.0],
            dd2y_dtheta: vec![0.0, 0.0],
        }
    }
}

/// The identity on the unit interval; has no parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityTransform;

impl ElementwiseBijection for IdentityTransform {
    fn domain(&self) -> Option<Domain> {
        Some(Domain::Interval)
    }
    fn jet(&self, x: f64) -> TransformJet {
        TransformJet::new(x, 1.0, 0.0, 0.0)
    }
    fn params(&self) -> Vec<f64> {
        Vec::new()
    }
    fn set_params(&mut self, params: &[f64]) -> Result<(), TransformError> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(TransformError::ParamCount { expected: 0, got: params.len() })
        }
    }
    fn param_jacobian(&self, _x: f64) -> ParamJacobian {
        ParamJacobian { dy_dtheta: vec![], ddy_dtheta: vec![], dd2y_dtheta: vec![] }
    }
}

/// Random mixture transforms for tests, benchmarks and acceptance runs.
pub mod random {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Draw a mixture with `n` components and standard-normal raw parameters
    /// (concentrations shifted up so bumps are visibly peaked).
    pub fn mixture<G: Rng + ?Sized>(rng: &mut G, domain: Domain, ramp: RampSpec, n: usize) -> MixtureTransform {
        let mut t = MixtureTransform::new(domain, ramp, n).expect("valid layout");
        let mut p = t.params();
        let per = t.per_component();
        for (j, v) in p.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = if j < per * n {
                match j % per {
                    0 => 1.0 + z,
                    1 => {
                        if domain == Domain::Circle {
                            rng.random::<f64>()
                        } else {
                            1.5 * z
                        }
                    }
                    _ => 0.5 * z,
                }
            } else {
                z
            };
        }
        t.set_params(&p).expect("same layout");
        t
    }
}
