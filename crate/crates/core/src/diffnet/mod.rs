//! Minimal dense-network core: forward passes, parameter and input
//! gradients, the second-order action-gradient penalty, Adam and Polyak.

pub mod fd;
pub mod mlp;
pub mod optim;
pub mod penalty;
pub mod rng;

pub use mlp::{polyak_update, Activation, Layer, MlpParams, MlpSpec, ParamGrads, Tape};
pub use optim::{adam_step, OptimState};
pub use penalty::{action_grad_norms, concat_inputs, gp_value_and_param_grad, PenaltyOutput};
pub use rng::Rng;
