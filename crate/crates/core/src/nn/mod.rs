//! Network building blocks for the inverse model.

mod linear;
mod lstm;
mod model;

pub use linear::{bbb_kl, bbb_sample, BbbLinearParams, LayerNoise, LinearVars};
pub use lstm::{lstm_cell, GateActivation, LstmParams, LstmVars};
pub(crate) use lstm::xavier;
pub use model::{
    flatten_time_major, BoundModel, InverseModel, ModelConfig, Placement, DEC, DEC_INIT, DEC_OUT,
    ENC_BWD, ENC_FWD, ENC_HEAD, STATIC1, STATIC2,
};
