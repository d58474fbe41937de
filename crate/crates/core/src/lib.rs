//! Detector-guided probing of a diffusion generator's output space.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense tensors, a tape-based reverse-mode graph with an explicit
//!   stop-gradient, parameter stores and the PTNS/PTAR binary formats.
//! * [`toydata`] the procedural "real" image distribution.
//! * [`diffusion`] noise schedule, conditional ε-prediction denoiser and the
//!   deterministic DDIM sampler (plain and gradient-routed).
//! * [`lora`] low-rank adapters on the denoiser's hidden layers.
//! * [`probe`] the probing engine: train-step plans, critic and perceptual
//!   losses, the manual gradient accumulator and the fine-tuning loop.
//! * [`detector`] the real/fake classifier, pretraining and mixed fine-tuning.
//! * [`augment`] augmentations, post-processing operators and PGD baselines.
//! * [`eval`] metrics, robustness sweeps and residual spectra.
//! * [`pipeline`] staged experiment runner behind the `probekit` binary.

pub mod augment;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod lora;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod toydata;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{GradMap, Graph, ParamStore, Tensor, Var};
