//! Conditional DDIM generator.

mod checkpoint;
mod net;
mod sampler;
mod schedule;
mod train;

pub use checkpoint::{Generator, GeneratorManifest};
pub use net::{DenoiserConfig, DenoiserNet, Timesteps, LINEAR_LAYERS};
pub use sampler::{
    denoise_graph, denoise_values, guided_eps, initial_latent, sample, GradRouting, SampleOutput,
    SampleRequest,
};
pub use schedule::{make_schedule, DdimCoeffs, NoiseSchedule};
pub use train::{denoising_loss, train_denoiser, DenoiserTrainConfig, TrainReport};
