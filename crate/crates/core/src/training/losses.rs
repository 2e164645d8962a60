//! Training objectives on the tape, and their plain-number evaluations.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::potential::UnitPotential;
use super::TrainError;
use crate::diffengine::{CustomOp, Matrix, Tape, Var};
use crate::flow::{FlowModel, FlowVars};

/// Energy cutoff `Λ(x) = min{x, 10³ + log(1 + x − 10³), 10⁹}`.
pub fn energy_cutoff(x: f64) -> f64 {
    const KNEE: f64 = 1e3;
    if x <= KNEE {
        x
    } else {
        (KNEE + (x - KNEE).ln_1p()).min(1e9)
    }
}

fn energy_cutoff_taped(v: Var<'_>) -> Var<'_> {
    const KNEE: f64 = 1e3;
    let x = v.item();
    if x <= KNEE {
        v
    } else if KNEE + (x - KNEE).ln_1p() < 1e9 {
        v.add_scalar(1.0 - KNEE).ln().add_scalar(KNEE)
    } else {
        v * 0.0 + 1e9
    }
}

/// `u(x)` as a tape node with first-order gradient `−force`.
struct PotentialNode {
    forces: Matrix,
}

impl CustomOp for PotentialNode {
    fn name(&self) -> &str {
        "potential"
    }

    fn backward<'t>(&self, _: &'t Tape, _: &[Var<'t>], _: Var<'t>, grad: Var<'t>) -> Vec<Option<Var<'t>>> {
        let d = self.forces.ncols();
        vec![Some(grad.broadcast_cols(d).mul_const(-&self.forces))]
    }
}

fn potential_node<'t>(target: &UnitPotential, x: Var<'t>) -> Var<'t> {
    let (u, forces) = target.eval_batch(&x.value());
    let value = Matrix::from_shape_vec((u.len(), 1), u).expect("column");
    x.tape().custom(Rc::new(PotentialNode { forces }), &[x], value)
}

/// `−mean log p(x)`.
pub fn loss_nll<'t>(model: &FlowModel, vars: &FlowVars<'t>, x: Var<'t>) -> Result<Var<'t>, TrainError> {
    Ok(-model.log_density_taped(vars, x)?.mean())
}

/// Model force `∂ₓ log p` kept on the tape, with `log p`.
pub fn taped_force<'t>(model: &FlowModel, vars: &FlowVars<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), TrainError> {
    let lp = model.log_density_taped(vars, x)?;
    let force = x.tape().grad(lp.sum(), &[x])?.pop().expect("one input");
    Ok((force, lp))
}

/// `mean ‖f_ref − ∂ₓ log p‖²`; `x` must be a leaf of the tape.
pub fn loss_fm<'t>(model: &FlowModel, vars: &FlowVars<'t>, x: Var<'t>, f_ref: &Matrix) -> Result<Var<'t>, TrainError> {
    if f_ref.dim() != x.shape() {
        return Err(TrainError::Shape(format!("forces {:?} vs positions {:?}", f_ref.dim(), x.shape())));
    }
    let (force, _) = taped_force(model, vars, x)?;
    let r = force - x.tape().leaf(f_ref.clone());
    Ok((r * r).sum().scale(1.0 / x.rows() as f64))
}

/// Reverse KL up to a constant, `mean(log p(x) + u(x))` over `x = f(z)`,
/// optionally passed through [`energy_cutoff`].
pub fn loss_kld<'t>(
    model: &FlowModel,
    vars: &FlowVars<'t>,
    target: &UnitPotential,
    z: &Matrix,
    cutoff: bool,
) -> Result<Var<'t>, TrainError> {
    let tape = vars.nets.first().and_then(|n| n.vars.first()).map(|v| v.tape()).ok_or(TrainError::NoParameters)?;
    let (x, ldj) = model.sampling_pass(vars, tape.leaf(z.clone()))?;
    let u = potential_node(target, x);
    let loss = (u - ldj).mean();
    Ok(if cutoff { energy_cutoff_taped(loss) } else { loss })
}

/// Uniform base draws for the sampling direction.
pub fn base_batch(dims: usize, n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((n, dims), |_| rng.random::<f64>())
}

/// `(Σw)² / (n Σw²)` from log weights.
pub fn kish_efficiency(log_w: &[f64]) -> f64 {
    if log_w.is_empty() {
        return f64::NAN;
    }
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s1 * s1 / (log_w.len() as f64 * s2)
}

/// Mean NLL and FME over `x` in chunks of `chunk` rows.
pub fn nll_fme(model: &FlowModel, x: &Matrix, f_ref: &Matrix, chunk: usize) -> Result<(f64, f64), TrainError> {
    let n = x.nrows();
    let (mut nll, mut fme) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let tape = Tape::new();
        let vars = model.leaves(&tape);
        let xv = tape.leaf(x.slice(ndarray::s![start..end, ..]).to_owned());
        let lp = model.log_density_taped(&vars, xv)?;
        let force = tape.grad(lp.sum(), &[xv])?.pop().expect("one input");
        nll -= lp.value().sum();
        let r = &*force.value() - &f_ref.slice(ndarray::s![start..end, ..]);
        fme += r.mapv(|v| v * v).sum();
        start = end;
    }
    Ok((nll / n as f64, fme / n as f64))
}

/// KLD estimate and Kish efficiency from `n` model samples.
pub fn kld_and_efficiency(model: &FlowModel, target: &UnitPotential, n: usize, seed: u64) -> Result<(f64, f64), TrainError> {
    let (x, lp) = crate::flow::sample(model, n, seed)?;
    let (u, _) = target.eval_batch(&x);
    let kld = lp.iter().zip(&u).map(|(l, u)| l + u).sum::<f64>() / n as f64;
    let log_w: Vec<f64> = lp.iter().zip(&u).map(|(l, u)| -u - l).collect();
    Ok((kld, kish_efficiency(&log_w)))
}

/// Draw `n` base points from a seeded stream.
pub fn seeded_base(dims: usize, n: usize, seed: u64) -> Matrix {
    base_batch(dims, n, &mut ChaCha8Rng::seed_from_u64(seed))
}
