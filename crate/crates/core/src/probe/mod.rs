//! Generator probing: adapt a LoRA on the frozen generator so its samples
//! lower a frozen detector's fake score, with gradients routed through a
//! detached DDIM sampler at a strided subset of steps.

mod engine;
mod losses;
mod plan;

pub use engine::{
    drtune_gradient_manual, manual_step_term, objective_grad_x0, probe_step, replay_samples,
    run_probe, ProbeAbort, ProbeConfig, ProbeContext, ProbeLogEntry, ProbeRun, StartMode,
    StepOutcome,
};
pub use losses::{perceptual_loss, probe_loss, PerceptualExtractor};
pub use plan::{make_train_steps, max_start, StepCount, TrainStepPlan};
