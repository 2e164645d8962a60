//! Derivatives of numerically inverted bijections.
//!
//! For `y = f(x; θ)` with inverse `x = f⁻¹(y; θ)` found by root finding,
//! every derivative of the inverse follows from derivatives of the forward
//! map at the recovered point (writing `f′ = ∂ₓf`, `g = log f′`):
//!
//! ```text
//! ∂ᵧx           =  1 / f′
//! ∂θx           = −∂θf / f′
//! ∂ᵧ(−g)        = −g′ / f′
//! ∂θ(−g)        = (g′·∂θf − ∂θf′) / f′
//! ∂ᵧ²x          = −g′ / f′²
//! ∂ᵧ³x          = (3f″²/f′ − f‴) / f′⁴
//! ```
//!
//! No derivative ever flows through the bisection iterates themselves.

use crate::rootfind::{multibin_invert, RootFindConfig, RootFindError};
use crate::transform::{Domain, ElementwiseBijection, TransformJet};

/// What the backward passes need from a batched inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseCallRecord {
    /// Recovered inputs.
    pub x: Vec<f64>,
    /// Forward jets at `x`; `jets[i].dy` is the diagonal Jacobian entry and
    /// `jets[i].g` its log.
    pub jets: Vec<TransformJet>,
}

impl InverseCallRecord {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Bracket and target reduction implied by a transform's domain.
fn prepare_targets(domain: Option<Domain>, y: &[f64], cfg: &RootFindConfig) -> (Vec<f64>, RootFindConfig) {
    match domain {
        Some(Domain::Circle) => (y.iter().map(|v| v.rem_euclid(1.0)).collect(), RootFindConfig { bracket: (0.0, 1.0), ..*cfg }),
        Some(Domain::Interval) => (y.to_vec(), RootFindConfig { bracket: (0.0, 1.0), ..*cfg }),
        None => (y.to_vec(), *cfg),
    }
}

/// Invert `t` at every target. Returns `x`, the inverse log-det
/// `−g(xᵢ)` per element, and the record for the backward passes.
///
/// Circle targets are reduced modulo one; interval and circle transforms
/// are bracketed on `[0, 1]`, others on `cfg.bracket`.
pub fn inverse_forward<T: ElementwiseBijection + ?Sized>(
    t: &T,
    y: &[f64],
    cfg: &RootFindConfig,
) -> Result<(Vec<f64>, Vec<f64>, InverseCallRecord), RootFindError> {
    let (targets, cfg) = prepare_targets(t.domain(), y, cfg);
    let f = t.evaluator();
    let out = multibin_invert(|_, x| f(x), &targets, &cfg)?;
    let jets: Vec<TransformJet> = out.x.iter().map(|&x| t.jet(x)).collect();
    let neg_log_jac = jets.iter().map(|j| -j.g).collect();
    Ok((out.x.clone(), neg_log_jac, InverseCallRecord { x: out.x, jets }))
}

/// Gradient with respect to the targets given upstream gradients of `x`
/// and of the inverse log-det `−g(x)`.
pub fn backward_input(record: &InverseCallRecord, grad_x: &[f64], grad_ldj: &[f64]) -> Vec<f64> {
    assert_eq!(grad_x.len(), record.len(), "grad_x length");
    assert_eq!(grad_ldj.len(), record.len(), "grad_ldj length");
    record
        .jets
        .iter()
        .zip(grad_x.iter().zip(grad_ldj))
        .map(|(j, (&gx, &gl))| (gx - gl * j.dg) / j.dy)
        .collect()
}

/// Gradient with respect to the transform parameters, summed over the batch.
pub fn backward_params<T: ElementwiseBijection + ?Sized>(
    t: &T,
    record: &InverseCallRecord,
    grad_x: &[f64],
    grad_ldj: &[f64],
) -> Vec<f64> {
    assert_eq!(grad_x.len(), record.len(), "grad_x length");
    assert_eq!(grad_ldj.len(), record.len(), "grad_ldj length");
    let mut grad = vec![0.0; t.n_params()];
    for (i, (&x, j)) in record.x.iter().zip(&record.jets).enumerate() {
        let (gx, gl) = (grad_x[i], grad_ldj[i]);
        if gx == 0.0 && gl == 0.0 {
            continue;
        }
        let jac = t.param_jacobian(x);
        for (k, g) in grad.iter_mut().enumerate() {
            let dx = -jac.dy_dtheta[k] / j.dy;
            let dldj = (j.dg * jac.dy_dtheta[k] - jac.ddy_dtheta[k]) / j.dy;
            *g += gx * dx + gl * dldj;
        }
    }
    grad
}

/// `∂ᵧ²x` at every recorded point.
pub fn inverse_second_derivative(record: &InverseCallRecord) -> Vec<f64> {
    record.jets.iter().map(|j| -j.dg / (j.dy * j.dy)).collect()
}

/// `∂ᵧ³x` at every recorded point.
pub fn inverse_third_derivative(record: &InverseCallRecord) -> Vec<f64> {
    record
        .jets
        .iter()
        .map(|j| (3.0 * j.d2y * j.d2y / j.dy - j.d3y) / j.dy.powi(4))
        .collect()
}

/// `∂θ∂ᵧ²x` at fixed `y`, one parameter vector per recorded point.
///
/// Differentiates `∂ᵧ²x = −f″/f′³` in `θ` both explicitly and through the
/// dependence of the recovered `x` on `θ`.
pub fn inverse_mixed_second_param<T: ElementwiseBijection + ?Sized>(t: &T, record: &InverseCallRecord) -> Vec<Vec<f64>> {
    record
        .x
        .iter()
        .zip(&record.jets)
        .map(|(&x, j)| {
            let jac = t.param_jacobian(x);
            let (a1, a2, a3) = (j.dy, j.d2y, j.d3y);
            let a1_3 = a1 * a1 * a1;
            let a1_4 = a1_3 * a1;
            let slope_in_x = -a3 / a1_3 + 3.0 * a2 * a2 / a1_4;
            (0..jac.dy_dtheta.len())
                .map(|k| {
                    let explicit = -jac.dd2y_dtheta[k] / a1_3 + 3.0 * a2 * jac.ddy_dtheta[k] / a1_4;
                    explicit + slope_in_x * (-jac.dy_dtheta[k] / a1)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ramp::RampSpec;
    use crate::transform::{random, AffineTransform, IdentityTransform, MixtureTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> RootFindConfig {
        RootFindConfig { eps: 1e-14, ..RootFindConfig::default() }
    }

    fn ramp() -> RampSpec {
        RampSpec::Exponential { alpha: 1.0, beta: 2.0 }
    }

    fn invert(t: &MixtureTransform, y: f64) -> f64 {
        inverse_forward(t, &[y], &tight()).unwrap().0[0]
    }

    fn rel(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    /// Fourth-order central difference.
    fn d1(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn identity_inverse_is_trivial() {
        let (x, nlj, rec) = inverse_forward(&IdentityTransform, &[0.1, 0.7], &tight()).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-14 && (x[1] - 0.7).abs() < 1e-14);
        assert_eq!(nlj, vec![0.0, 0.0]);
        assert_eq!(inverse_second_derivative(&rec), vec![0.0, 0.0]);
        assert_eq!(inverse_third_derivative(&rec), vec![0.0, 0.0]);
        assert_eq!(backward_params(&IdentityTransform, &rec, &[1.0, 1.0], &[1.0, 1.0]), Vec::<f64>::new());
    }

    #[test]
    fn affine_inverse_matches_closed_form() {
        let a = AffineTransform::new(2.0, 0.25);
        let cfg = RootFindConfig { bracket: (-5.0, 5.0), ..tight() };
        let (x, nlj, rec) = inverse_forward(&a, &[1.25, -0.75], &cfg).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-13 && (x[1] + 0.5).abs() < 1e-13);
        assert!(nlj.iter().all(|v| (v + 2.0_f64.ln()).abs() < 1e-15));
        assert_eq!(backward_input(&rec, &[1.0, 1.0], &[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(backward_input(&rec, &[0.0, 0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
        // ∂x/∂shift = −1/2; ∂x/∂log_scale = −x.
        let g = backward_params(&a, &rec, &[1.0, 0.0], &[0.0, 0.0]);
        assert!((g[1] + 0.5).abs() < 1e-15);
        assert!((g[0] + x[0]).abs() < 1e-13);
        assert_eq!(inverse_second_derivative(&rec), vec![0.0, 0.0]);
        assert_eq!(inverse_third_derivative(&rec), vec![0.0, 0.0]);
        assert!(inverse_mixed_second_param(&a, &rec).iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_gradients_equal_analytic_inverse_gradients() {
        // x = (y − shift)·e^{−s}, −g = −s.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = AffineTransform { log_scale: rng.random_range(-1.0..1.0), shift: rng.random_range(-1.0..1.0) };
            let y: f64 = rng.random_range(-2.0..2.0);
            let (gx, gl) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let cfg = RootFindConfig { bracket: (-20.0, 20.0), ..tight() };
            let (x, _, rec) = inverse_forward(&a, &[y], &cfg).unwrap();
            let inv_s = (-a.log_scale).exp();
            let gy = backward_input(&rec, &[gx], &[gl])[0];
            assert!((gy - gx * inv_s).abs() < 1e-10);
            let gp = backward_params(&a, &rec, &[gx], &[gl]);
            let analytic = [gx * -(y - a.shift) * inv_s - gl, -gx * inv_s];
            assert!((gp[0] - analytic[0]).abs() < 1e-10 && (gp[1] - analytic[1]).abs() < 1e-10);
            assert!((x[0] - (y - a.shift) * inv_s).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_round_trip_and_reciprocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for domain in [Domain::Interval, Domain::Circle] {
            let t = random::mixture(&mut rng, domain, ramp(), 5);
            let y: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let (x, nlj, rec) = inverse_forward(&t, &y, &RootFindConfig::default()).unwrap();
            let gy = backward_input(&rec, &vec![1.0; 30], &vec![0.0; 30]);
            for i in 0..30 {
                let j = t.jet(x[i]);
                assert!((j.y - y[i]).abs() < 1e-9);
                assert!((gy[i] * j.dy - 1.0).abs() < 1e-9);
                assert_eq!(nlj[i], -j.g);
            }
        }
    }

    #[test]
    fn circle_targets_wrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random::mixture(&mut rng, Domain::Circle, ramp(), 3);
        let a = inverse_forward(&t, &[0.3], &tight()).unwrap().0[0];
        let b = inverse_forward(&t, &[2.3], &tight()).unwrap().0[0];
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-4;
        for domain in [Domain::Interval, Domain::Circle] {
            for _ in 0..10 {
                let t = random::mixture(&mut rng, domain, ramp(), 4);
                let y: f64 = rng.random_range(0.1..0.9);
                let (_, _, rec) = inverse_forward(&t, &[y], &tight()).unwrap();
                let dx = backward_input(&rec, &[1.0], &[0.0])[0];
                let dl = backward_input(&rec, &[0.0], &[1.0])[0];
                let fd_x = d1(|v| invert(&t, v), y, h);
                let fd_l = d1(|v| -t.jet(invert(&t, v)).g, y, h);
                assert!(rel(dx, fd_x, 1e-3) < 1e-5, "{dx} vs {fd_x}");
                assert!(rel(dl, fd_l, 1e-1) < 1e-5, "{dl} vs {fd_l}");
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        for domain in [Domain::Interval, Domain::Circle] {
            for _ in 0..5 {
                let t = random::mixture(&mut rng, domain, ramp(), 3);
                let y: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
                let (_, _, rec) = inverse_forward(&t, &y, &tight()).unwrap();
                let ones = vec![1.0; y.len()];
                let grad = backward_params(&t, &rec, &ones, &ones);
                let base = t.params();
                for k in 0..base.len() {
                    let loss = |d: f64| {
                        let mut p = base.clone();
                        p[k] += d;
                        let mut tt = t.clone();
                        tt.set_params(&p).unwrap();
                        let (x, nlj, _) = inverse_forward(&tt, &y, &tight()).unwrap();
                        x.iter().sum::<f64>() + nlj.iter().sum::<f64>()
                    };
                    let fd = d1(loss, 0.0, h);
                    assert!(rel(grad[k], fd, 1e-2) < 1e-4, "param {k}: {} vs {fd}", grad[k]);
                }
            }
        }
    }

    #[test]
    fn higher_order_relations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for domain in [Domain::Interval, Domain::Circle] {
            for _ in 0..10 {
                let t = random::mixture(&mut rng, domain, ramp(), 3);
                let y: f64 = rng.random_range(0.15..0.85);
                let (_, _, rec) = inverse_forward(&t, &[y], &tight()).unwrap();
                let f = |v: f64| invert(&t, v);
                let h = 2e-3;
                let d2 = (-f(y + 2.0 * h) + 16.0 * f(y + h) - 30.0 * f(y) + 16.0 * f(y - h) - f(y - 2.0 * h))
                    / (12.0 * h * h);
                let scale = 1.0 / rec.jets[0].dy.powi(2);
                assert!(rel(inverse_second_derivative(&rec)[0], d2, scale) < 1e-3);
                // Third order: Richardson extrapolation of the 4-point stencil.
                let d3h = |h: f64| (f(y + 2.0 * h) - 2.0 * f(y + h) + 2.0 * f(y - h) - f(y - 2.0 * h)) / (2.0 * h * h * h);
                let d3 = (4.0 * d3h(1e-3) - d3h(2e-3)) / 3.0;
                let scale3 = 1.0 / rec.jets[0].dy.powi(3);
                assert!(rel(inverse_third_derivative(&rec)[0], d3, scale3) < 1e-2, "{} vs {d3} (dy {})", inverse_third_derivative(&rec)[0], rec.jets[0].dy);
            }
        }
    }

    #[test]
    fn third_derivative_of_exponential_inverse() {
        // f = eˣ on ℝ: the inverse is log y with third derivative 2/y³.
        struct Exp;
        impl ElementwiseBijection for Exp {
            fn domain(&self) -> Option<Domain> {
                None
            }
            fn jet(&self, x: f64) -> TransformJet {
                let e = x.exp();
                TransformJet::new(e, e, e, e)
            }
            fn params(&self) -> Vec<f64> {
                vec![]
            }
            fn set_params(&mut self, _: &[f64]) -> Result<(), crate::transform::TransformError> {
                Ok(())
            }
            fn param_jacobian(&self, _: f64) -> crate::transform::ParamJacobian {
                crate::transform::ParamJacobian { dy_dtheta: vec![], ddy_dtheta: vec![], dd2y_dtheta: vec![] }
            }
        }
        let cfg = RootFindConfig { bracket: (-3.0, 3.0), ..tight() };
        let (_, _, rec) = inverse_forward(&Exp, &[2.0], &cfg).unwrap();
        assert!((inverse_third_derivative(&rec)[0] - 0.25).abs() < 1e-12);
        assert!((inverse_second_derivative(&rec)[0] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn mixed_relation_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-5;
        for domain in [Domain::Interval, Domain::Circle] {
            for _ in 0..5 {
                let t = random::mixture(&mut rng, domain, ramp(), 3);
                let y: f64 = rng.random_range(0.15..0.85);
                let (_, _, rec) = inverse_forward(&t, &[y], &tight()).unwrap();
                let mixed = &inverse_mixed_second_param(&t, &rec)[0];
                let base = t.params();
                let scale = 1.0 / rec.jets[0].dy.powi(2);
                for k in 0..base.len() {
                    let second = |d: f64| {
                        let mut p = base.clone();
                        p[k] += d;
                        let mut tt = t.clone();
                        tt.set_params(&p).unwrap();
                        let (_, _, r) = inverse_forward(&tt, &[y], &tight()).unwrap();
                        inverse_second_derivative(&r)[0]
                    };
                    let fd = d1(second, 0.0, h);
                    assert!(rel(mixed[k], fd, 1e-2 * scale) < 1e-2, "param {k}: {} vs {fd}", mixed[k]);
                }
            }
        }
    }
}
