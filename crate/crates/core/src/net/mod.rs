//! Network definition, objectives, optimization and persistence for both
//! pipeline stages.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unet;

pub use checkpoint::{load_model, load_stage, save_model};
pub use loss::{s1_loss, s1_loss_grad, s2_loss, s2_loss_grad, LossTerms, S1LossParams};
pub use train::{train, Objective, TrainConfig, TrainSample, Target};
pub use unet::{NetConfig, Propagation, Stage, UNet};
