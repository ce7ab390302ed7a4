//! Noise schedule, epsilon-prediction denoisers, guidance compositions and the
//! deterministic DDIM sampler.

mod denoiser;
mod guidance;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{
    Denoiser, DenoiserConfig, EpsModel, EpsQuery, Geometry, Parameterization, Role,
    PROMPT_EMBEDDING,
};
pub use guidance::{
    cfg_epsilon, ipa_epsilon, pa_epsilon, AdaptationMode, Composer, GuidanceConfig, Item,
    NoisyVideo,
};
pub use sampler::{
    ddim_integrate, ddim_sample, ddim_sample_batch, ddim_timesteps, initial_noise, PlanRequest,
    VideoPlan,
};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{eps_mse, forward_noise, DenoiserTrainer, TrainItem};
