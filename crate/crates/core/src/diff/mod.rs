//! Differentiable numerics: a vector tape, MLP and recurrent layers,
//! diagonal Gaussians, Adam and a finite-difference gradient checker.

pub mod gaussian;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use gaussian::{gaussian_sample_reparam, kl_diag, DiagGaussian, GaussVar, STD_FLOOR};
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{mlp_forward, recurrent_step, Linear, LstmCell, LstmState, Mlp};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamManifest, ParamSet, ParamTensor, TensorEntry};
pub use tape::{log_sigmoid, sigmoid, softplus, Tape, Var};
