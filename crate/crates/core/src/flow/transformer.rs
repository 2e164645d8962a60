//! Mixture transformers recorded on a tape, batched over rows.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffengine::{CustomOp, Tape, Var};
use crate::ramp::RampSpec;
use crate::rootfind::{multibin_invert, RootFindConfig, RootFindError};
use crate::transform::{Domain, MixtureTransform, ResolvedMixture, A_MIN_CIRCLE, A_MIN_INTERVAL, C_MIN};

/// Layout of the element-wise transformer applied to each transformed
/// dimension of a coupling layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub ramp: RampSpec,
    pub n_components: usize,
}

impl TransformerConfig {
    /// Conditioner outputs consumed per transformed dimension.
    pub fn param_count(&self) -> usize {
        MixtureTransform::param_count(&self.ramp, self.n_components)
    }

    fn per_component(&self) -> usize {
        if self.ramp.has_alpha() {
            3
        } else {
            2
        }
    }
}

/// Rows of `x` (n×1) pushed through the mixture whose flat parameters are
/// the rows of `params` (n×P). Returns `(y, ∂y/∂x)`, both n×1.
pub fn taped_mixture<'t>(
    x: Var<'t>,
    params: Var<'t>,
    domain: Domain,
    cfg: &TransformerConfig,
) -> (Var<'t>, Var<'t>) {
    let tape = x.tape();
    let n = x.rows();
    let m = cfg.n_components;
    let per = cfg.per_component();
    assert_eq!(params.cols(), cfg.param_count(), "transformer parameter width");
    let cols = |offset: usize| (0..m).map(|i| per * i + offset).collect::<Vec<_>>();

    let floor = match domain {
        Domain::Interval => A_MIN_INTERVAL,
        Domain::Circle => A_MIN_CIRCLE,
    };
    let a = params.gather_cols(&cols(0)).softplus().add_scalar(floor);
    let b_raw = params.gather_cols(&cols(1));
    let b = match domain {
        Domain::Interval => b_raw.logistic(),
        Domain::Circle => b_raw - tape.leaf(b_raw.value().mapv(f64::floor)),
    };
    let p = match cfg.ramp {
        RampSpec::Exponential { .. } => params.gather_cols(&cols(2)),
        RampSpec::Monomial { .. } => tape.zeros(n, m),
    };
    let logits = params.gather_cols(&(per * m..per * m + m).collect::<Vec<_>>());
    let shift = logits.value().map_axis(ndarray::Axis(1), |r| r.fold(f64::NEG_INFINITY, |s, &v| s.max(v)));
    let shift = Array2::from_shape_fn((n, m), |(i, _)| -shift[i]);
    let e = (logits + tape.leaf(shift)).exp();
    let w = e / e.sum_cols().broadcast_cols(m);
    let c = params.gather_cols(&[per * m + m]).logistic().scale(1.0 - C_MIN).add_scalar(C_MIN);

    let shape = cfg.ramp.shape();
    let sig = |z: Var<'t>| z.ramp_logit(p, shape).logistic();
    let xb = x.broadcast_cols(m);
    // z(t) = a·(t − b) + ½
    let z_at = |t: Var<'t>| a * (t - b) + 0.5;
    let slope = |z: Var<'t>, s: Var<'t>| s * (1.0 - s) * z.ramp_logit_slope(p, shape) * a;

    let (u, du) = match domain {
        Domain::Interval => {
            let s0 = sig(z_at(tape.zeros(n, m)));
            let s1 = sig(z_at(tape.full(n, m, 1.0)));
            let norm = s1 - s0;
            let zx = z_at(xb);
            let sx = sig(zx);
            ((sx - s0) / norm, slope(zx, sx) / norm)
        }
        Domain::Circle => {
            let mut u: Option<Var<'t>> = None;
            let mut du: Option<Var<'t>> = None;
            for k in [-1.0, 0.0, 1.0] {
                let zx = z_at(xb + k);
                let sx = sig(zx);
                let base = sig(z_at(tape.full(n, m, k)));
                let (du_k, u_k) = (slope(zx, sx), sx - base);
                u = Some(u.map_or(u_k, |acc| acc + u_k));
                du = Some(du.map_or(du_k, |acc| acc + du_k));
            }
            (u.expect("three shifts"), du.expect("three shifts"))
        }
    };
    let keep = 1.0 - c;
    let y = keep * (w * u).sum_cols() + c * x;
    let dy = keep * (w * du).sum_cols() + c;
    (y, dy)
}

/// Numerical inverse of [`taped_mixture`] in its first argument, recorded
/// as a single node with implicit-function gradients.
pub struct InverseMixture {
    pub domain: Domain,
    pub cfg: TransformerConfig,
    pub rootfind: RootFindConfig,
}

impl InverseMixture {
    /// Solve `T(z; params_i) = y_i` row by row. Circle targets are reduced
    /// mod 1 first.
    pub fn apply<'t>(self: &Rc<Self>, y: Var<'t>, params: Var<'t>) -> Result<Var<'t>, RootFindError> {
        let tape = y.tape();
        let yv = y.value();
        let pv = params.value();
        let rows: Vec<ResolvedMixture> = pv
            .rows()
            .into_iter()
            .map(|r| ResolvedMixture::from_params(self.domain, self.cfg.ramp, self.cfg.n_components, &r.to_vec()))
            .collect();
        let targets: Vec<f64> = yv
            .column(0)
            .iter()
            .map(|&v| match self.domain {
                Domain::Interval => v,
                Domain::Circle => v.rem_euclid(1.0),
            })
            .collect();
        let mut rf = self.rootfind;
        rf.bracket = (0.0, 1.0);
        let out = multibin_invert(|i, x| rows[i].value(x), &targets, &rf)?;
        let z = Array2::from_shape_vec((out.x.len(), 1), out.x).expect("column");
        let op: Rc<dyn CustomOp> = self.clone();
        Ok(tape.custom(op, &[y, params], z))
    }
}

impl CustomOp for InverseMixture {
    fn name(&self) -> &str {
        "inverse_mixture"
    }

    // z = T⁻¹(y; P): ∂z/∂y = 1/T′(z), ∂z/∂P = −(∂T/∂P)/T′(z).
    fn backward<'t>(&self, tape: &'t Tape, inputs: &[Var<'t>], output: Var<'t>, grad: Var<'t>) -> Vec<Option<Var<'t>>> {
        let params = inputs[1];
        let (y_hat, dy_hat) = taped_mixture(output, params, self.domain, &self.cfg);
        let grad_y = grad / dy_hat;
        let grad_p = tape
            .vjp(&[(y_hat, -grad_y)], &[params], Some(output.id()))
            .expect("parameter path exists")
            .pop();
        vec![Some(grad_y), grad_p]
    }
}
