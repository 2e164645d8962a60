//! Coupling flows on products of intervals and circles.
//!
//! Layers are stored in sampling order, base `z` to data `x`. A layer's
//! [`Direction`] says which way its transformer is analytic:
//! `Forward` layers evaluate `T` when sampling and root-find during density
//! evaluation; `Inverse` layers do the opposite. The base distribution is
//! uniform on the unit cube, so `log p(x) = log|∂z/∂x|`.

mod transformer;

use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{Activation, DenseNet, Featurizer, Matrix, NetError, NetVars, Tape, Var};
use crate::ramp::RampSpec;
use crate::rootfind::{RootFindConfig, RootFindError};
use crate::transform::{Domain, ElementwiseBijection, MixtureTransform, TransformError};

pub use transformer::{taped_mixture, InverseMixture, TransformerConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    RootFind(#[from] RootFindError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("expected {expected} columns, got {got}")]
    Width { expected: usize, got: usize },
    #[error("row {row}, dimension {dim}: {value} lies outside [0, 1]")]
    OutOfDomain { row: usize, dim: usize, value: f64 },
    #[error("layer {0}: mask must transform at least one dimension")]
    EmptyMask(usize),
    #[error("dimension {0} is never transformed")]
    Uncovered(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Analytic when sampling, root-found for densities.
    Forward,
    /// Root-found when sampling, analytic for densities.
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingLayer {
    /// `true` marks dimensions this layer transforms; the rest condition.
    pub mask: Vec<bool>,
    pub conditioner: DenseNet,
    pub transformer_cfg: TransformerConfig,
    pub direction: Direction,
}

impl CouplingLayer {
    pub fn conditioning(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| !self.mask[j]).collect()
    }

    pub fn transformed(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&j| self.mask[j]).collect()
    }
}

/// Architecture of a freshly initialized flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub domain_tags: Vec<Domain>,
    pub n_layers: usize,
    pub n_components: usize,
    pub ramp: RampSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_frequencies")]
    pub n_frequencies: usize,
    pub direction: Direction,
}

fn default_frequencies() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowModel {
    pub dims: usize,
    pub domain_tags: Vec<Domain>,
    pub layers: Vec<CouplingLayer>,
    pub version: u32,
    #[serde(default)]
    pub rootfind: RootFindConfig,
}

/// Parameter leaves of a model on one tape, one entry per layer.
#[derive(Debug, Clone)]
pub struct FlowVars<'t> {
    pub nets: Vec<NetVars<'t>>,
}

impl<'t> FlowVars<'t> {
    /// All leaves in [`FlowModel::params`] order.
    pub fn all(&self) -> Vec<Var<'t>> {
        self.nets.iter().flat_map(|n| n.vars.iter().copied()).collect()
    }
}

/// Flatten gradient matrices returned for [`FlowVars::all`].
pub fn flatten_grads(grads: &[Var<'_>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.value().iter().copied().collect::<Vec<_>>()).collect()
}

impl FlowModel {
    /// Alternating masks; the last conditioner layer starts at zero weights
    /// with biases that reproduce [`MixtureTransform::new`] for every row.
    pub fn new<R: Rng + ?Sized>(spec: &FlowSpec, rng: &mut R) -> Result<Self, FlowError> {
        let dims = spec.domain_tags.len();
        if dims == 0 || spec.n_layers == 0 {
            return Err(FlowError::Invalid("need at least one dimension and one layer".into()));
        }
        spec.ramp.validate().map_err(TransformError::from)?;
        let cfg = TransformerConfig { ramp: spec.ramp, n_components: spec.n_components };
        let mut layers = Vec::with_capacity(spec.n_layers);
        for l in 0..spec.n_layers {
            let mask: Vec<bool> = (0..dims).map(|j| dims == 1 || (j + l) % 2 == 0).collect();
            let cond: Vec<usize> = (0..dims).filter(|&j| !mask[j]).collect();
            let featurizer = if !cond.is_empty() && cond.iter().all(|&j| spec.domain_tags[j] == Domain::Circle) {
                Featurizer::CircularCosSin { n_frequencies: spec.n_frequencies }
            } else {
                Featurizer::Identity
            };
            let mut bias = Vec::new();
            for j in (0..dims).filter(|&j| mask[j]) {
                bias.extend(MixtureTransform::new(spec.domain_tags[j], spec.ramp, spec.n_components)?.params());
            }
            let mut sizes = vec![cond.len()];
            sizes.extend(&spec.hidden);
            sizes.push(bias.len());
            let conditioner = DenseNet::new(&sizes, spec.activation, featurizer, &bias, rng)?;
            layers.push(CouplingLayer { mask, conditioner, transformer_cfg: cfg, direction: spec.direction });
        }
        let model = FlowModel {
            dims,
            domain_tags: spec.domain_tags.clone(),
            layers,
            version: CHECKPOINT_VERSION,
            rootfind: RootFindConfig::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(FlowError::Version(self.version));
        }
        if self.domain_tags.len() != self.dims {
            return Err(FlowError::Invalid(format!("{} domain tags for {} dims", self.domain_tags.len(), self.dims)));
        }
        self.rootfind.validate()?;
        let mut covered = vec![false; self.dims];
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.mask.len() != self.dims {
                return Err(FlowError::Invalid(format!("layer {l}: mask has {} entries", layer.mask.len())));
            }
            let t = layer.transformed();
            if t.is_empty() {
                return Err(FlowError::EmptyMask(l));
            }
            for &j in &t {
                covered[j] = true;
            }
            layer.transformer_cfg.ramp.validate().map_err(TransformError::from)?;
            if layer.transformer_cfg.n_components == 0 {
                return Err(TransformError::NoComponents.into());
            }
            layer.conditioner.validate()?;
            let net = &layer.conditioner;
            if net.sizes[0] != self.dims - t.len() {
                return Err(FlowError::Invalid(format!("layer {l}: conditioner input width {}", net.sizes[0])));
            }
            let want = t.len() * layer.transformer_cfg.param_count();
            if net.output_width() != want {
                return Err(FlowError::Invalid(format!("layer {l}: conditioner emits {}, needs {want}", net.output_width())));
            }
        }
        if let Some(j) = covered.iter().position(|c| !c) {
            return Err(FlowError::Uncovered(j));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, FlowError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, FlowError> {
        let model: FlowModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.conditioner.n_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.conditioner.params()).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), FlowError> {
        if p.len() != self.n_params() {
            return Err(NetError::ParamCount { expected: self.n_params(), got: p.len() }.into());
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let k = layer.conditioner.n_params();
            layer.conditioner.set_params(&p[at..at + k])?;
            at += k;
        }
        Ok(())
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> FlowVars<'t> {
        FlowVars { nets: self.layers.iter().map(|l| l.conditioner.leaves(tape)).collect() }
    }

    /// Wrap circle coordinates into `[0, 1)` and reject interval coordinates
    /// outside `[0, 1]`.
    pub fn canonicalize(&self, x: &Matrix) -> Result<Matrix, FlowError> {
        if x.ncols() != self.dims {
            return Err(FlowError::Width { expected: self.dims, got: x.ncols() });
        }
        let mut out = x.clone();
        for ((row, dim), v) in out.indexed_iter_mut() {
            match self.domain_tags[dim] {
                Domain::Circle => *v = v.rem_euclid(1.0),
                Domain::Interval => {
                    if !(0.0..=1.0).contains(v) {
                        return Err(FlowError::OutOfDomain { row, dim, value: *v });
                    }
                }
            }
        }
        Ok(out)
    }

    fn layer_pass<'t>(&self, l: usize, vars: &NetVars<'t>, x: Var<'t>, solve: bool) -> Result<(Var<'t>, Var<'t>), FlowError> {
        let layer = &self.layers[l];
        let tape = x.tape();
        let n = x.rows();
        let cfg = layer.transformer_cfg;
        let width = cfg.param_count();
        let params = layer.conditioner.forward(vars, x.gather_cols(&layer.conditioning()))?;
        let mut cols: Vec<Var<'t>> = (0..self.dims).map(|j| x.gather_cols(&[j])).collect();
        let mut ldj = tape.zeros(n, 1);
        for (k, j) in layer.transformed().into_iter().enumerate() {
            let p = params.gather_cols(&(k * width..(k + 1) * width).collect::<Vec<_>>());
            let domain = self.domain_tags[j];
            if solve {
                let op = Rc::new(InverseMixture { domain, cfg, rootfind: self.rootfind });
                let z = op.apply(cols[j], p)?;
                let (_, dz) = taped_mixture(z, p, domain, &cfg);
                cols[j] = z;
                ldj = ldj - dz.ln();
            } else {
                let (y, dy) = taped_mixture(cols[j], p, domain, &cfg);
                cols[j] = y;
                ldj = ldj + dy.ln();
            }
        }
        Ok((tape.concat_cols(&cols), ldj))
    }

    /// Data to base: returns `z` and `log|∂z/∂x|` per row (n×1).
    pub fn density_pass<'t>(&self, vars: &FlowVars<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), FlowError> {
        let mut h = x;
        let mut total = x.tape().zeros(x.rows(), 1);
        for l in (0..self.layers.len()).rev() {
            let solve = self.layers[l].direction == Direction::Inverse;
            let (next, ldj) = self.layer_pass(l, &vars.nets[l], h, solve)?;
            h = next;
            total = total + ldj;
        }
        Ok((h, total))
    }

    /// Base to data: returns `x` and `log|∂x/∂z|` per row (n×1).
    pub fn sampling_pass<'t>(&self, vars: &FlowVars<'t>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>), FlowError> {
        let mut h = z;
        let mut total = z.tape().zeros(z.rows(), 1);
        for l in 0..self.layers.len() {
            let solve = self.layers[l].direction == Direction::Forward;
            let (next, ldj) = self.layer_pass(l, &vars.nets[l], h, solve)?;
            h = next;
            total = total + ldj;
        }
        Ok((h, total))
    }

    /// Uniform base, so the log density is the density-pass log-Jacobian.
    pub fn log_density_taped<'t>(&self, vars: &FlowVars<'t>, x: Var<'t>) -> Result<Var<'t>, FlowError> {
        Ok(self.density_pass(vars, x)?.1)
    }
}

fn column_vec(v: &Var<'_>) -> Vec<f64> {
    v.value().column(0).to_vec()
}

/// Sampling direction `z → x` with `log|∂x/∂z|`.
pub fn flow_forward(model: &FlowModel, z: &Matrix) -> Result<(Matrix, Vec<f64>), FlowError> {
    let z = model.canonicalize(z)?;
    let tape = Tape::new();
    let vars = model.leaves(&tape);
    let (x, ldj) = model.sampling_pass(&vars, tape.leaf(z))?;
    Ok(((*x.value()).clone(), column_vec(&ldj)))
}

/// Density direction `x → z` with `log|∂z/∂x|`.
pub fn flow_inverse(model: &FlowModel, x: &Matrix) -> Result<(Matrix, Vec<f64>), FlowError> {
    let x = model.canonicalize(x)?;
    let tape = Tape::new();
    let vars = model.leaves(&tape);
    let (z, ldj) = model.density_pass(&vars, tape.leaf(x))?;
    Ok(((*z.value()).clone(), column_vec(&ldj)))
}

pub fn log_density(model: &FlowModel, x: &Matrix) -> Result<Vec<f64>, FlowError> {
    Ok(flow_inverse(model, x)?.1)
}

/// `∇ₓ log p(x)` row by row.
pub fn flow_force(model: &FlowModel, x: &Matrix) -> Result<Matrix, FlowError> {
    Ok(log_density_and_force(model, x)?.1)
}

/// `log p(x)` and `∇ₓ log p(x)` from one tape.
pub fn log_density_and_force(model: &FlowModel, x: &Matrix) -> Result<(Vec<f64>, Matrix), FlowError> {
    let x = model.canonicalize(x)?;
    let tape = Tape::new();
    let vars = model.leaves(&tape);
    let xv = tape.leaf(x);
    let lp = model.log_density_taped(&vars, xv)?;
    let g = tape.grad(lp.sum(), &[xv]).map_err(|e| FlowError::Invalid(e.to_string()))?;
    Ok((column_vec(&lp), (*g[0].value()).clone()))
}

/// `n` samples with their log densities, from a ChaCha8 stream seeded by `seed`.
pub fn sample(model: &FlowModel, n: usize, seed: u64) -> Result<(Matrix, Vec<f64>), FlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array2::from_shape_fn((n, model.dims), |_| rng.random::<f64>());
    let (x, ldj) = flow_forward(model, &z)?;
    Ok((x, ldj.into_iter().map(|v| -v).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    pub(super) fn spec(tags: Vec<Domain>, direction: Direction, ramp: RampSpec) -> FlowSpec {
        FlowSpec {
            domain_tags: tags,
            n_layers: 2,
            n_components: 4,
            ramp,
            hidden: vec![8],
            activation: Activation::Swish,
            n_frequencies: 2,
            direction,
        }
    }

    pub(super) fn perturbed(spec: &FlowSpec, seed: u64, scale: f64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FlowModel::new(spec, &mut rng).unwrap();
        let p: Vec<f64> = m.params().iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        m.set_params(&p).unwrap();
        m.rootfind.eps = 1e-13;
        m
    }

    pub(super) fn cases() -> Vec<FlowSpec> {
        let exp = RampSpec::exponential(1.0, 1.0).unwrap();
        let mono = RampSpec::monomial(2).unwrap();
        vec![
            spec(vec![Domain::Interval, Domain::Interval], Direction::Forward, exp),
            spec(vec![Domain::Circle, Domain::Circle], Direction::Inverse, exp),
            spec(vec![Domain::Interval, Domain::Circle], Direction::Inverse, mono),
            spec(vec![Domain::Circle, Domain::Interval, Domain::Circle], Direction::Forward, mono),
        ]
    }

    pub(super) fn grid(dims: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, dims), |_| 0.02 + 0.96 * rng.random::<f64>())
    }

    #[test]
    fn saturated_identity_weight_is_the_identity() {
        let s = spec(vec![Domain::Interval, Domain::Circle], Direction::Forward, RampSpec::monomial(3).unwrap());
        let mut m = FlowModel::new(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for layer in &mut m.layers {
            let width = layer.transformer_cfg.param_count();
            let last = layer.conditioner.biases.len() - 1;
            for (i, b) in layer.conditioner.biases[last].iter_mut().enumerate() {
                if i % width == width - 1 {
                    *b = 800.0;
                }
            }
        }
        let z = grid(2, 20, 1);
        let (x, ldj) = flow_forward(&m, &z).unwrap();
        // Sampling root-finds here, so agreement is limited by the solver.
        assert!((&x - &z).iter().all(|d| d.abs() < 1e-9));
        assert!(ldj.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn round_trips_and_log_jacobians_cancel() {
        for (i, s) in cases().iter().enumerate() {
            let m = perturbed(s, i as u64, 0.3);
            let z = grid(m.dims, 50, 10 + i as u64);
            let (x, fwd) = flow_forward(&m, &z).unwrap();
            let (back, inv) = flow_inverse(&m, &x).unwrap();
            for ((r, c), v) in back.indexed_iter() {
                let mut d = v - z[[r, c]];
                if m.domain_tags[c] == Domain::Circle {
                    d -= d.round();
                }
                assert!(d.abs() < 1e-8, "case {i}: row {r} dim {c} off by {d}");
            }
            for (a, b) in fwd.iter().zip(&inv) {
                assert!((a + b).abs() < 1e-7, "case {i}: {a} + {b}");
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Midpoint rule; both directions and both domains.
        let n = 96;
        let pts = Array2::from_shape_fn((n * n, 2), |(k, d)| {
            let i = if d == 0 { k / n } else { k % n };
            (i as f64 + 0.5) / n as f64
        });
        for (i, s) in cases().iter().take(3).enumerate() {
            let m = perturbed(s, 20 + i as u64, 0.3);
            let lp = log_density(&m, &pts).unwrap();
            let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() / (n * n) as f64;
            assert!((mass - 1.0).abs() < 2e-3, "case {i}: mass {mass}");
        }
    }

    #[test]
    fn force_matches_finite_differences() {
        for (i, s) in cases().iter().enumerate() {
            let m = perturbed(s, 30 + i as u64, 0.5);
            let x = grid(m.dims, 6, 40 + i as u64);
            let f = flow_force(&m, &x).unwrap();
            let h = 2e-5;
            for d in 0..m.dims {
                let at = |k: f64| {
                    let mut xs = x.clone();
                    xs.column_mut(d).mapv_inplace(|v| v + k * h);
                    log_density(&m, &xs).unwrap()
                };
                let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
                for r in 0..x.nrows() {
                    let fd = (8.0 * (p1[r] - m1[r]) - (p2[r] - m2[r])) / (12.0 * h);
                    assert!((f[[r, d]] - fd).abs() < 1e-5 * fd.abs().max(1.0), "case {i} row {r} dim {d}: {} vs {fd}", f[[r, d]]);
                }
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        for (i, s) in cases().iter().enumerate() {
            let m = perturbed(s, 50 + i as u64, 0.5);
            let x = grid(m.dims, 5, 60 + i as u64);
            let tape = Tape::new();
            let vars = m.leaves(&tape);
            let lp = m.log_density_taped(&vars, tape.leaf(x.clone())).unwrap();
            let g = flatten_grads(&tape.grad(lp.sum(), &vars.all()).unwrap());
            let theta = m.params();
            let total = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p).unwrap();
                log_density(&mm, &x).unwrap().iter().sum::<f64>()
            };
            let h = 1e-6;
            for k in (0..theta.len()).step_by(7) {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fd = (total(&tp) - total(&tm)) / (2.0 * h);
                assert!((g[k] - fd).abs() < 1e-5 * fd.abs().max(1.0), "case {i} param {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn circle_density_is_periodic() {
        let m = perturbed(&cases()[1], 70, 0.5);
        for d in 0..2 {
            let mut lo = grid(2, 8, 71);
            lo.column_mut(d).fill(0.0);
            let mut hi = lo.clone();
            hi.column_mut(d).fill(1.0 - 1e-15);
            let a = log_density(&m, &lo).unwrap();
            let b = log_density(&m, &hi).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn samples_follow_the_model() {
        // The CDF of a 1D flow is its density-direction map.
        let s = FlowSpec { n_layers: 1, ..spec(vec![Domain::Interval], Direction::Forward, RampSpec::monomial(2).unwrap()) };
        let m = perturbed(&s, 80, 1.0);
        let n = 2000;
        let (x, lp) = sample(&m, n, 5).unwrap();
        let (u, _) = flow_inverse(&m, &x).unwrap();
        let mut u: Vec<f64> = u.column(0).to_vec();
        u.sort_by(f64::total_cmp);
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - v).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS {ks}");
        let direct = log_density(&m, &x).unwrap();
        for (a, b) in lp.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let m = perturbed(&cases()[2], 90, 0.3);
        let back = FlowModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.layers[1].mask = vec![false, false];
        assert!(matches!(bad.validate(), Err(FlowError::EmptyMask(1))));
        let mut bad = m.clone();
        bad.layers.truncate(1);
        assert!(matches!(bad.validate(), Err(FlowError::Uncovered(1))));
        let mut bad = m;
        bad.version = 99;
        assert!(matches!(bad.validate(), Err(FlowError::Version(99))));
        assert!(FlowModel::from_json("{\"dims\":1}").is_err());
    }

    #[test]
    fn rejects_points_outside_the_interval() {
        let m = perturbed(&cases()[0], 1, 0.1);
        let x = Array2::from_shape_vec((1, 2), vec![0.5, 1.2]).unwrap();
        assert!(matches!(log_density(&m, &x), Err(FlowError::OutOfDomain { row: 0, dim: 1, .. })));
    }
}
