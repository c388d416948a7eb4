//! Pluggable denoiser priors: an analytic oracle and a small trainable network.

mod oracle;
mod toy;

pub use crate::diffusion::DenoiserPrior;
pub use oracle::{inconsistency_field, InputModel, OracleConfig, OracleDenoiser};
pub use toy::{time_embedding, toy_predict_eps, toy_train, ToyDenoiser, ToyTrainConfig, TrainTrace, TOY_CHANNELS, TOY_EMBED};
