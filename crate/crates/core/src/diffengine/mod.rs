//! Reverse-mode differentiation and the conditioner networks built on it.

mod net;
mod tape;

pub use net::{Activation, DenseNet, Featurizer, NetError, NetVars};
pub use tape::{ramp_logit, CustomOp, GradError, Matrix, Tape, Var, LOGIT_CLAMP};
