//! Pixel-space multi-view diffusion: schedule, DDIM, the toy denoiser and
//! its pretraining.

pub mod checkpoint;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use net::{DenoiserNet, Forward, KvCache, KvMode, NetConfig, NetOutput, Trainable, VIEWS};
pub use sampler::{ddim_invert, ddim_sample, EpsModel};
pub use schedule::{ddim_invert_step, ddim_sample_step, make_schedule, NoiseSchedule};
pub use train::{pretrain_mv, TrainConfig, TrainSample};
