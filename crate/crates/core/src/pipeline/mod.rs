//! Staged experiment runner: configuration, run manifests, sample
//! aggregation and the stage graph behind the `probekit` binary.

mod aggregate;
mod config;
mod manifest;
mod stages;

pub use aggregate::aggregate_samples;
pub use config::{
    DataSection, DetectorSection, EvalSection, GeneratorSection, IoSection, Precision,
    ProbeSection, RunConfig,
};
pub use manifest::{RunManifest, StageRecord, MANIFEST_FILE};
pub use stages::{explain, run_stage, Stage};
