//! Smooth normalizing flows on the unit interval and the torus.

pub mod ramp;
pub mod real;
pub mod transform;
pub mod rootfind;
pub mod implicit;
pub mod diffengine;
pub mod dynamics;
pub mod flow;
pub mod training;
