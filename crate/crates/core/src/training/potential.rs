//! Analytic toy energies with forces, in their native coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::Matrix;
use crate::transform::Domain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("need matching, non-empty alphas and radii ({0} vs {1})")]
    Terms(usize, usize),
    #[error("alphas must be positive")]
    Alphas,
    #[error("radii must be increasing")]
    Radii,
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("potential is defined for {expected} dimensions, got {got}")]
    Dims { expected: usize, got: usize },
}

/// `u(x) = −log Σᵢ αᵢ exp(−(s(x) − rᵢ)²/(2σ))` with `s = ‖x‖` for rings and
/// `s = (cos x₁² + cos x₂² + 2)^{1/2}` for the periodic variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyPotential {
    RingMixture { sigma: f64, alphas: Vec<f64>, radii: Vec<f64> },
    PeriodicMixture { sigma: f64, alphas: Vec<f64>, radii: Vec<f64> },
    /// `u ≡ 0` on the periodic box `[−half_width, half_width]^dims`.
    Flat { dims: usize, half_width: f64 },
    /// `u = ½ k ‖x‖²`.
    Harmonic { dims: usize, stiffness: f64 },
}

/// Where a potential's samples live before compactification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    /// Periodic box `[lo, hi)` in every coordinate.
    Periodic { lo: f64, hi: f64 },
    /// Unbounded; `[−half_width, half_width]` holds essentially all mass.
    Unbounded { half_width: f64 },
}

impl ToyPotential {
    /// Four rings of radii 1–4, `σ = 0.06`.
    pub fn ring_default() -> Self {
        ToyPotential::RingMixture {
            sigma: 0.06,
            alphas: vec![1.0, 0.8, 0.6, 0.4],
            radii: vec![1.0, 2.0, 3.0, 4.0],
        }
    }

    /// Periodic variant on `[−π, π)²`, `σ = 0.05`.
    pub fn periodic_default() -> Self {
        ToyPotential::PeriodicMixture {
            sigma: 0.05,
            alphas: vec![1.0, 0.8, 0.6, 0.4],
            radii: vec![0.5, 1.0, 1.5, 2.0],
        }
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        match self {
            ToyPotential::RingMixture { sigma, alphas, radii } | ToyPotential::PeriodicMixture { sigma, alphas, radii } => {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(PotentialError::Sigma(*sigma));
                }
                if alphas.is_empty() || alphas.len() != radii.len() {
                    return Err(PotentialError::Terms(alphas.len(), radii.len()));
                }
                if !alphas.iter().all(|a| *a > 0.0 && a.is_finite()) {
                    return Err(PotentialError::Alphas);
                }
                if radii.windows(2).any(|w| !(w[1] > w[0])) || !radii.iter().all(|r| r.is_finite()) {
                    return Err(PotentialError::Radii);
                }
                Ok(())
            }
            ToyPotential::Flat { dims, half_width } => {
                if *dims == 0 {
                    return Err(PotentialError::NonPositive("dims"));
                }
                if !(*half_width > 0.0) {
                    return Err(PotentialError::NonPositive("half_width"));
                }
                Ok(())
            }
            ToyPotential::Harmonic { dims, stiffness } => {
                if *dims == 0 {
                    return Err(PotentialError::NonPositive("dims"));
                }
                if !(*stiffness > 0.0) {
                    return Err(PotentialError::NonPositive("stiffness"));
                }
                Ok(())
            }
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            ToyPotential::RingMixture { .. } | ToyPotential::PeriodicMixture { .. } => 2,
            ToyPotential::Flat { dims, .. } | ToyPotential::Harmonic { dims, .. } => *dims,
        }
    }

    pub fn support(&self) -> Support {
        match self {
            ToyPotential::RingMixture { sigma, radii, .. } => {
                Support::Unbounded { half_width: radii.last().copied().unwrap_or(0.0) + 3.3 * sigma.sqrt() }
            }
            ToyPotential::PeriodicMixture { .. } => Support::Periodic { lo: -PI, hi: PI },
            ToyPotential::Flat { half_width, .. } => Support::Periodic { lo: -half_width, hi: *half_width },
            ToyPotential::Harmonic { stiffness, .. } => Support::Unbounded { half_width: 5.0 / stiffness.sqrt() },
        }
    }

    pub fn domain(&self) -> Domain {
        match self.support() {
            Support::Periodic { .. } => Domain::Circle,
            Support::Unbounded { .. } => Domain::Interval,
        }
    }

    /// Energy and force `−∇u` at one point.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            ToyPotential::RingMixture { sigma, alphas, radii } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (u, du_dr) = shell_mixture(*sigma, alphas, radii, r);
                let force = if r > 0.0 { x.iter().map(|v| -du_dr * v / r).collect() } else { vec![0.0; x.len()] };
                (u, force)
            }
            ToyPotential::PeriodicMixture { sigma, alphas, radii } => {
                let beta = (x.iter().map(|v| (v * v).cos()).sum::<f64>() + 2.0).max(0.0).sqrt();
                let (u, du_db) = shell_mixture(*sigma, alphas, radii, beta);
                // ∂β/∂xⱼ = −xⱼ sin(xⱼ²)/β
                let force = if beta > 0.0 {
                    x.iter().map(|v| du_db * v * (v * v).sin() / beta).collect()
                } else {
                    vec![0.0; x.len()]
                };
                (u, force)
            }
            ToyPotential::Flat { .. } => (0.0, vec![0.0; x.len()]),
            ToyPotential::Harmonic { stiffness, .. } => {
                let u = 0.5 * stiffness * x.iter().map(|v| v * v).sum::<f64>();
                (u, x.iter().map(|v| -stiffness * v).collect())
            }
        }
    }

    /// Row-wise [`ToyPotential::eval`].
    pub fn eval_batch(&self, x: &Matrix) -> (Vec<f64>, Matrix) {
        let mut u = Vec::with_capacity(x.nrows());
        let mut f = Matrix::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let (ui, fi) = self.eval(&row.to_vec());
            u.push(ui);
            f.row_mut(i).assign(&ndarray::Array1::from(fi));
        }
        (u, f)
    }
}

/// `(u, du/ds)` for `u(s) = −log Σ αᵢ exp(−(s − rᵢ)²/(2σ))`, via log-sum-exp.
fn shell_mixture(sigma: f64, alphas: &[f64], radii: &[f64], s: f64) -> (f64, f64) {
    let logs: Vec<f64> = alphas.iter().zip(radii).map(|(a, r)| a.ln() - (s - r).powi(2) / (2.0 * sigma)).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = -(m + total.ln());
    let du = w.iter().zip(radii).map(|(wi, r)| wi * (s - r) / sigma).sum::<f64>() / total;
    (u, du)
}

/// A potential seen through the affine chart `unit = scale·native + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPotential {
    pub potential: ToyPotential,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl UnitPotential {
    pub fn to_native(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.scale).zip(&self.shift).map(|((v, a), b)| (v - b) / a).collect()
    }

    /// Energy and force in unit coordinates; forces pick up `1/scale`.
    pub fn eval(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let (u, f) = self.potential.eval(&self.to_native(y));
        (u, f.iter().zip(&self.scale).map(|(fi, a)| fi / a).collect())
    }

    pub fn eval_batch(&self, y: &Matrix) -> (Vec<f64>, Matrix) {
        let mut u = Vec::with_capacity(y.nrows());
        let mut f = Matrix::zeros(y.raw_dim());
        for (i, row) in y.rows().into_iter().enumerate() {
            let (ui, fi) = self.eval(&row.to_vec());
            u.push(ui);
            f.row_mut(i).assign(&ndarray::Array1::from(fi));
        }
        (u, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(p: &ToyPotential, x: &[f64]) {
        let (_, f) = p.eval(x);
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = -(p.eval(&xp).0 - p.eval(&xm).0) / (2.0 * h);
            assert!((f[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{p:?} at {x:?}: {} vs {fd}", f[j]);
        }
    }

    #[test]
    fn forces_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pots = [
            ToyPotential::ring_default(),
            ToyPotential::periodic_default(),
            ToyPotential::Harmonic { dims: 3, stiffness: 2.5 },
        ];
        for p in &pots {
            for _ in 0..200 {
                let x: Vec<f64> = (0..p.dims()).map(|_| rng.random_range(-3.0..3.0)).collect();
                fd_check(p, &x);
            }
        }
    }

    #[test]
    fn ring_energy_on_the_first_ring() {
        // Cross terms are at most e^{−1/0.12} relative to the first.
        let (u, _) = ToyPotential::ring_default().eval(&[0.6, 0.8]);
        assert!(u.abs() < 2e-4 && u <= 0.0, "{u}");
    }

    #[test]
    fn ring_force_is_radial() {
        let p = ToyPotential::ring_default();
        for x in [[1.3, -0.4], [-2.2, 2.9], [0.1, 3.7]] {
            let (_, f) = p.eval(&x);
            assert!((f[0] * x[1] - f[1] * x[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn periodic_energy_is_even_in_each_coordinate() {
        let p = ToyPotential::periodic_default();
        let a = p.eval(&[-PI, 0.7]).0;
        let b = p.eval(&[PI, 0.7]).0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn unit_chart_rescales_forces() {
        let p = ToyPotential::Harmonic { dims: 1, stiffness: 1.0 };
        let unit = UnitPotential { potential: p, scale: vec![0.1], shift: vec![0.5] };
        let (u, f) = unit.eval(&[0.7]);
        assert!((u - 2.0).abs() < 1e-12);
        assert!((f[0] + 20.0).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let bad = ToyPotential::RingMixture { sigma: 0.0, alphas: vec![1.0], radii: vec![1.0] };
        assert_eq!(bad.validate(), Err(PotentialError::Sigma(0.0)));
        let bad = ToyPotential::RingMixture { sigma: 1.0, alphas: vec![1.0, 1.0], radii: vec![2.0, 1.0] };
        assert_eq!(bad.validate(), Err(PotentialError::Radii));
        assert!(ToyPotential::ring_default().validate().is_ok());
    }
}
