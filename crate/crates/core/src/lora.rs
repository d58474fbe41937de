//! Low-rank adapters: `W_eff = W + (α/r)·B·A` with `A: [r, in]`, `B: [out, r]`.
//!
//! `B` starts at exact zeros so a fresh adapter leaves the generator
//! bit-identical. Attaching freezes every base parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserNet;
use crate::rng;
use crate::tensor::io::{read_ptar, write_bytes, write_ptar};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Real, Result};

pub const DEFAULT_TARGETS: [&str; 2] = ["hidden1", "hidden2"];

#[derive(Clone, Debug)]
pub struct LoraParams<F> {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    /// Entries `lora/{target}/A` and `lora/{target}/B`.
    pub params: ParamStore<F>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraManifest {
    rank: usize,
    alpha: f64,
    targets: Vec<String>,
}

pub fn a_name(target: &str) -> String {
    format!("lora/{target}/A")
}

pub fn b_name(target: &str) -> String {
    format!("lora/{target}/B")
}

/// Attach rank-`rank` adapters to `targets` with `α = r`.
pub fn attach_lora<F: Real>(
    net: &mut DenoiserNet<F>,
    rank: usize,
    targets: &[&str],
    seed: u64,
) -> Result<LoraParams<F>> {
    attach_lora_scaled(net, rank, rank as f64, targets, seed)
}

pub fn attach_lora_scaled<F: Real>(
    net: &mut DenoiserNet<F>,
    rank: usize,
    alpha: f64,
    targets: &[&str],
    seed: u64,
) -> Result<LoraParams<F>> {
    if targets.is_empty() {
        return Err(Error::Config("LoRA needs at least one target".into()));
    }
    let mut params = ParamStore::new();
    for &t in targets {
        let (inp, out) = net
            .linear_shape(t)
            .map_err(|_| Error::Config(format!("unknown LoRA target `{t}`")))?;
        if rank == 0 || rank > inp.min(out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must lie in [1, {}] for `{t}`",
                inp.min(out)
            )));
        }
        let mut r = rng::rng(rng::derive(seed, &a_name(t)));
        params.insert(
            a_name(t),
            Tensor::randn(&[rank, inp], (1.0 / rank as f64).sqrt(), &mut r),
        )?;
        params.insert(b_name(t), Tensor::zeros(&[out, rank]))?;
    }
    net.params.freeze_all();
    Ok(LoraParams {
        rank,
        alpha,
        targets: targets.iter().map(|s| s.to_string()).collect(),
        params,
    })
}

/// `base + scale·(B·A)` on the graph.
pub fn effective_weight<F: Real>(
    g: &mut Graph<F>,
    base: Var,
    a: Var,
    b: Var,
    scale: F,
) -> Result<Var> {
    let ba = g.matmul(b, a)?;
    if g.value(ba).dims() != g.value(base).dims() {
        return Err(Error::shape(format!(
            "LoRA delta {:?} vs base {:?}",
            g.value(ba).dims(),
            g.value(base).dims()
        )));
    }
    let d = g.scale(ba, scale)?;
    g.add(base, d)
}

impl<F: Real> LoraParams<F> {
    pub fn scale(&self) -> F {
        F::c(self.alpha / self.rank as f64)
    }

    pub fn targets_layer(&self, layer: &str) -> bool {
        self.targets.iter().any(|t| t == layer)
    }

    /// Effective weight for `layer`, built once per graph.
    pub fn weight(&self, g: &mut Graph<F>, layer: &str, base: Var) -> Result<Var> {
        let key = format!("lora-eff/{layer}");
        g.memo(&key, |g| {
            let a = g.param(&self.params, &a_name(layer))?;
            let b = g.param(&self.params, &b_name(layer))?;
            effective_weight(g, base, a, b, self.scale())
        })
    }

    /// Materialised `(α/r)·B·A` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor<F>> {
        let mut g = Graph::no_grad();
        let a = g.param(&self.params, &a_name(target))?;
        let b = g.param(&self.params, &b_name(target))?;
        let ba = g.matmul(b, a)?;
        let d = g.scale(ba, self.scale())?;
        Ok(g.value(d).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor<F>)> = self
            .params
            .iter()
            .map(|(k, v)| (k.to_string(), v.as_ref()))
            .collect();
        write_ptar(path, &entries)?;
        let m = LoraManifest {
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.clone(),
        };
        write_bytes(
            &path.with_extension("json"),
            &serde_json::to_vec_pretty(&m)?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = path.with_extension("json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: LoraManifest = serde_json::from_slice(&bytes)?;
        let mut params = ParamStore::new();
        for (k, v) in read_ptar::<F>(path)? {
            params.insert(k, v)?;
        }
        for t in &m.targets {
            params.get(&a_name(t))?;
            params.get(&b_name(t))?;
        }
        Ok(Self {
            rank: m.rank,
            alpha: m.alpha,
            targets: m.targets,
            params,
        })
    }
}

/// Number of singular values above `tol`: power iteration on `MᵀM`, then
/// deflation `M ← M(I − v·vᵀ)`, which removes exactly one rank per round.
pub fn numerical_rank(m: &Tensor<f64>, tol: f64) -> usize {
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    let mut d = m.data().to_vec();
    let mut r = rng::rng(0x5eed);
    let mut count = 0;
    for _ in 0..cols.min(rows) {
        let mut v = rng::normal_vec::<f64>(&mut r, cols, 1.0);
        let mut sigma = 0.0;
        for _ in 0..300 {
            let mv: Vec<f64> = (0..rows)
                .map(|i| (0..cols).map(|j| d[i * cols + j] * v[j]).sum())
                .collect();
            sigma = mv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let w: Vec<f64> = (0..cols)
                .map(|j| (0..rows).map(|i| d[i * cols + j] * mv[i]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        if sigma <= tol {
            break;
        }
        count += 1;
        for i in 0..rows {
            let dot: f64 = (0..cols).map(|j| d[i * cols + j] * v[j]).sum();
            for j in 0..cols {
                d[i * cols + j] -= dot * v[j];
            }
        }
    }
    count
}
