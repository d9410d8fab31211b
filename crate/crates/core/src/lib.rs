//! Unsupervised 3-D deformable registration with per-level variational
//! latent fields and multilayer KL regularization.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion_warp;
pub mod gradsuite;
pub mod loss_optim;
pub mod model;
pub mod par;
pub mod problatent;
pub mod tensor;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
