//! Session service and command line around `dragsplat-core`: LoRA
//! fine-tuning, multi-view drag editing and masked refitting of a Gaussian
//! scene, with content-addressed artifacts and streamed telemetry.

pub mod api;
pub mod cli;
pub mod pipeline;
pub mod session;
pub mod store;
