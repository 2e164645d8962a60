//! Objectives, toy targets, data generation and the optimization loop.

pub mod data;
pub mod losses;
pub mod potential;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{GradError, Tape};
use crate::flow::{flatten_grads, FlowError, FlowModel};
use crate::rootfind::RootFindConfig;
use data::Samples;
use potential::UnitPotential;

pub use losses::{energy_cutoff, kish_efficiency, loss_fm, loss_kld, loss_nll};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{0}")]
    Shape(String),
    #[error("model has no parameters")]
    NoParameters,
    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: usize, term: &'static str },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("energy-based training needs a target potential")]
    NoTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub omega_n: f64,
    pub omega_k: f64,
    pub omega_f: f64,
    /// Replace `omega_n` by `1 − omega_k − omega_f`.
    #[serde(default)]
    pub normalize_weights: bool,
    pub lr: f64,
    #[serde(default = "unit")]
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rootfind: RootFindConfig,
    #[serde(default)]
    pub kld_cutoff_enabled: bool,
    /// Base samples per iteration for the KLD term.
    #[serde(default = "default_kld_batch")]
    pub kld_batch_size: usize,
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
}

fn unit() -> f64 {
    1.0
}

fn default_kld_batch() -> usize {
    256
}

fn default_validate_every() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            omega_n: 1.0,
            omega_k: 0.0,
            omega_f: 0.0,
            normalize_weights: false,
            lr: 5e-4,
            lr_decay_per_epoch: 1.0,
            batch_size: 1000,
            iterations: 2000,
            seed: 0,
            rootfind: RootFindConfig::default(),
            kld_cutoff_enabled: false,
            kld_batch_size: default_kld_batch(),
            validate_every: default_validate_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = [self.omega_n, self.omega_k, self.omega_f];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(TrainError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.normalize_weights && self.omega_k + self.omega_f > 1.0 {
            return Err(TrainError::Config("omega_k + omega_f exceeds 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_per_epoch > 0.0) {
            return Err(TrainError::Config("lr and lr_decay_per_epoch must be positive".into()));
        }
        if self.batch_size == 0 || self.validate_every == 0 || self.kld_batch_size == 0 {
            return Err(TrainError::Config("batch sizes and validate_every must be positive".into()));
        }
        self.rootfind.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    /// `(ω_n, ω_k, ω_f)` after optional normalization.
    pub fn weights(&self) -> (f64, f64, f64) {
        let n = if self.normalize_weights { 1.0 - self.omega_k - self.omega_f } else { self.omega_n };
        (n, self.omega_k, self.omega_f)
    }
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e−8`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// One row of the per-iteration metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iter: usize,
    pub nll: f64,
    pub fme: f64,
    pub kld: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub iter: usize,
    pub nll: f64,
    pub fme: f64,
    pub kld: Option<f64>,
    pub objective: f64,
}

impl MetricRow {
    pub fn header(with_kld: bool) -> &'static str {
        if with_kld {
            "iter,nll,fme,kld,grad_norm"
        } else {
            "iter,nll,fme,grad_norm"
        }
    }

    pub fn csv_line(&self) -> String {
        match self.kld {
            Some(k) => format!("{},{:?},{:?},{:?},{:?}", self.iter, self.nll, self.fme, k, self.grad_norm),
            None => format!("{},{:?},{:?},{:?}", self.iter, self.nll, self.fme, self.grad_norm),
        }
    }
}

impl ValidationRow {
    pub fn header(with_kld: bool) -> &'static str {
        if with_kld {
            "iter,nll,fme,kld,objective"
        } else {
            "iter,nll,fme,objective"
        }
    }

    pub fn csv_line(&self) -> String {
        match self.kld {
            Some(k) => format!("{},{:?},{:?},{:?},{:?}", self.iter, self.nll, self.fme, k, self.objective),
            None => format!("{},{:?},{:?},{:?}", self.iter, self.nll, self.fme, self.objective),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub validation: Vec<ValidationRow>,
    /// Parameters with the lowest validation objective.
    pub best: FlowModel,
    pub best_iteration: usize,
}

/// Validation metrics of `model`; KLD only when `kld_samples > 0`.
pub fn validate_model(
    model: &FlowModel,
    valid: &Samples,
    target: Option<&UnitPotential>,
    kld_samples: usize,
    seed: u64,
    chunk: usize,
) -> Result<(f64, f64, Option<f64>), TrainError> {
    let (nll, fme) = losses::nll_fme(model, &valid.x, &valid.f, chunk)?;
    let kld = match (target, kld_samples) {
        (Some(t), n) if n > 0 => Some(losses::kld_and_efficiency(model, t, n, seed)?.0),
        _ => None,
    };
    Ok((nll, fme, kld))
}

fn check(v: f64, iteration: usize, term: &'static str) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { iteration, term })
    }
}

/// Minimize `ω_n·NLL + ω_k·KLD + ω_f·FME` with Adam. `model` ends at the
/// final parameters; the report carries the best-validation copy.
pub fn train(
    model: &mut FlowModel,
    train_set: &Samples,
    valid: &Samples,
    target: Option<&UnitPotential>,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let (w_n, w_k, w_f) = cfg.weights();
    let use_kld = w_k > 0.0;
    if use_kld && target.is_none() {
        return Err(TrainError::NoTarget);
    }
    model.rootfind = cfg.rootfind;
    let mut params = model.params();
    let mut adam = Adam::new(params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut base_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = train_set.len();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epoch = 0usize;

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let mut best = model.clone();
    let mut best_objective = f64::INFINITY;
    let mut best_iteration = 0;
    let kld_valid = if use_kld { cfg.kld_batch_size } else { 0 };

    let mut record_validation = |it: usize, m: &FlowModel| -> Result<(), TrainError> {
        if valid.is_empty() {
            return Ok(());
        }
        let (nll, fme, kld) = validate_model(m, valid, target, kld_valid, cfg.seed.wrapping_add(1), cfg.batch_size)?;
        let objective = w_n * nll + w_f * fme + w_k * kld.unwrap_or(0.0);
        validation.push(ValidationRow { iter: it, nll, fme, kld, objective });
        if objective < best_objective {
            best_objective = objective;
            best = m.clone();
            best_iteration = it;
        }
        Ok(())
    };
    record_validation(0, model)?;

    for it in 1..=cfg.iterations {
        if cursor + batch > n {
            if epoch > 0 {
                adam.lr *= cfg.lr_decay_per_epoch;
            }
            epoch += 1;
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
        }
        let rows = &order[cursor..cursor + batch];
        cursor += batch;
        let b = train_set.select(rows);

        let tape = Tape::new();
        let vars = model.leaves(&tape);
        let leaves = vars.all();
        let x = tape.leaf(b.x.clone());
        let lp = model.log_density_taped(&vars, x)?;
        let nll = check(-lp.value().sum() / batch as f64, it, "nll")?;

        let mut grad: Vec<f64>;
        let fme;
        if w_f > 0.0 {
            let force = tape.grad(lp.sum(), &[x])?.pop().expect("one input");
            let r = force - tape.leaf(b.f.clone());
            let fm = (r * r).sum().scale(1.0 / batch as f64);
            fme = check(fm.item(), it, "fme")?;
            let total = -lp.mean() * w_n + fm * w_f;
            grad = flatten_grads(&tape.grad(total, &leaves)?);
        } else {
            // A single sweep gives both the parameter gradient and the force.
            let mut wrt = vec![x];
            wrt.extend(&leaves);
            let g = tape.grad(lp.sum(), &wrt)?;
            let r = &*g[0].value() - &b.f;
            fme = check(r.mapv(|v| v * v).sum() / batch as f64, it, "fme")?;
            grad = flatten_grads(&g[1..]).into_iter().map(|v| -w_n * v / batch as f64).collect();
        }
        let mut kld_value = None;
        if use_kld {
            let z = losses::base_batch(model.dims, cfg.kld_batch_size, &mut base_rng);
            let t = target.expect("checked above");
            let kld = loss_kld(model, &vars, t, &z, cfg.kld_cutoff_enabled)?;
            kld_value = Some(check(kld.item(), it, "kld")?);
            for (g, k) in grad.iter_mut().zip(flatten_grads(&tape.grad(kld, &leaves)?)) {
                *g += w_k * k;
            }
        }
        let grad_norm = check(grad.iter().map(|g| g * g).sum::<f64>().sqrt(), it, "gradient")?;
        adam.step(&mut params, &grad);
        model.set_params(&params)?;

        let row = MetricRow { iter: it, nll, fme, kld: kld_value, grad_norm };
        on_row(&row);
        metrics.push(row);
        if it % cfg.validate_every == 0 || it == cfg.iterations {
            record_validation(it, model)?;
        }
    }
    Ok(TrainReport { metrics, validation, best, best_iteration })
}
