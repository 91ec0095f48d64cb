//! Velocity network, training and Euler sampling.

pub mod checkpoint;
pub mod codec;
pub mod net;
pub mod nn;
pub mod sampler;
pub mod train;

pub use checkpoint::Checkpoint;
pub use codec::SinusoidalCodec;
pub use net::{VelocityNet, VelocityNetConfig};
pub use nn::Activation;
pub use sampler::{derive_seed, initial_noise, integrate, Prompt, Sampler, VelocityField, DEFAULT_STEPS};
pub use train::{Optimizer, Schedule, StepLog, TrainConfig, Trainer, TrainingSample};
