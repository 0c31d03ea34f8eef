//! Noise schedules, the conditional denoiser, training and sampling.

pub mod checkpoint;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use model::{Model, ModelConfig, TrainItem};
pub use sampler::{reverse_from, sample, sample_from_guide, start_time, steps_for_strength};
pub use schedule::{
    cfg_combine, em_reverse_step, forward_marginal, forward_marginal_at, make_schedule,
    score_from_eps, score_from_sigma, NoiseSchedule, ScheduleKind, ScheduleParams,
};
pub use train::{train, LossTrace, TrainConfig, TrainData};
pub use unet::{UNet, UNetConfig};
