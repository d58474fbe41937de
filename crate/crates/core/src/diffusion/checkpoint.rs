use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_schedule, DenoiserConfig, DenoiserNet, NoiseSchedule};
use crate::tensor::io::{read_ptar, write_bytes, write_ptar};
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Real, Result};

/// Sidecar manifest of a generator checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub net: DenoiserConfig,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    pub guidance: f64,
    pub tag: String,
}

/// A trained generator and the sampler it was trained for.
#[derive(Clone, Debug)]
pub struct Generator<F> {
    pub net: DenoiserNet<F>,
    pub sched: NoiseSchedule,
    pub guidance: f64,
    pub tag: String,
}

impl<F: Real> Generator<F> {
    /// Writes `path` (PTAR) and the manifest at `path` with extension `json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor<F>)> = self
            .net
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.as_ref()))
            .collect();
        write_ptar(path, &entries)?;
        let m = GeneratorManifest {
            net: self.net.cfg,
            steps: self.sched.steps(),
            beta_start: self.sched.beta_start,
            beta_end: self.sched.beta_end,
            eta: self.sched.eta(),
            guidance: self.guidance,
            tag: self.tag.clone(),
        };
        write_bytes(
            &path.with_extension("json"),
            &serde_json::to_vec_pretty(&m)?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = path.with_extension("json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: GeneratorManifest = serde_json::from_slice(&bytes)?;
        let sched = make_schedule(m.steps, m.beta_start, m.beta_end, m.eta)?;
        let mut params = ParamStore::new();
        for (name, t) in read_ptar::<F>(path)? {
            params.insert(name, t)?;
        }
        let net = DenoiserNet::from_params(m.net, &sched, params)?;
        Ok(Self {
            net,
            sched,
            guidance: m.guidance,
            tag: m.tag,
        })
    }
}
