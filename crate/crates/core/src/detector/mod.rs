//! Binary real/fake classifier.
//!
//! Logit convention: a positive logit means "fake", `p_fake = sigmoid(z)`.
//! Every loss in the crate (detector BCE, probe softplus, PGD) follows it.

mod train;

pub use train::{
    bce_step, finetune_mixed, pretrain, BalancedPool, DetectorTrainConfig, MixConfig, TrainSummary,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{crop, reflect_pad_to};
use crate::nn::{add_conv, add_linear};
use crate::rng;
use crate::tensor::io::{read_ptar, write_bytes, write_ptar};
use crate::tensor::sigmoid;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Real, Result};

pub const LOGIT_CONVENTION: &str = "positive logit = fake";

#[derive(Clone, Debug)]
pub struct DetectorNet<F> {
    pub input_size: usize,
    pub params: ParamStore<F>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorManifest {
    input_size: usize,
    logit_convention: String,
}

fn conv_out(n: usize) -> usize {
    // kernel 3, stride 2, padding 1
    (n - 1) / 2 + 1
}

impl<F: Real> DetectorNet<F> {
    pub fn new(input_size: usize, seed: u64) -> Result<Self> {
        if input_size < 4 {
            return Err(Error::Config(format!(
                "detector input size {input_size} < 4"
            )));
        }
        let mut rng = rng::rng(rng::derive(seed, "detector-init"));
        let mut params = ParamStore::new();
        add_conv(&mut params, "conv1", 1, 8, 3, &mut rng)?;
        add_conv(&mut params, "conv2", 8, 16, 3, &mut rng)?;
        let flat = 16 * conv_out(conv_out(input_size)).pow(2);
        add_linear(&mut params, "head", flat, 1, &mut rng)?;
        Ok(Self { input_size, params })
    }

    /// Zero the output layer so every logit is exactly 0.
    pub fn zero_head(&mut self) -> Result<()> {
        for name in ["head.w", "head.b"] {
            let dims = self.params.get(name)?.dims().to_vec();
            self.params.set(name, Tensor::zeros(&dims))?;
        }
        Ok(())
    }

    /// Copy with every parameter frozen, for use as a fixed critic.
    pub fn frozen(&self) -> Self {
        let mut d = self.clone();
        d.params.freeze_all();
        d
    }

    /// Logits `[B]` for images given as `[B, S*S]` or `[B, S, S]`.
    pub fn logits(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let s = self.input_size;
        let dims = g.value(x).dims().to_vec();
        let b = dims[0];
        if dims.iter().skip(1).product::<usize>() != s * s || dims.len() < 2 {
            return Err(Error::shape(format!(
                "detector expects [B, {s}, {s}] input, got {dims:?}"
            )));
        }
        let x = g.reshape(x, &[b, 1, s, s])?;
        let mut h = x;
        for name in ["conv1", "conv2"] {
            let w = g.param(&self.params, &format!("{name}.w"))?;
            let bias = g.param(&self.params, &format!("{name}.b"))?;
            h = g.conv2d(h, w, Some(bias), 2, 1)?;
            h = g.relu(h)?;
        }
        let flat = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, flat])?;
        let w = g.param(&self.params, "head.w")?;
        let bias = g.param(&self.params, "head.b")?;
        let z = g.linear(h, w, Some(bias))?;
        g.reshape(z, &[b])
    }

    /// Logits for a stack `[B, S, S]`, evaluated without gradients.
    pub fn logits_batch(&self, xs: &Tensor<F>) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let x = g.constant(xs.clone())?;
        let z = self.logits(&mut g, x)?;
        Ok(g.value(z).data().iter().map(|v| v.f64()).collect())
    }

    fn check_size(&self, x: &Tensor<F>) -> Result<()> {
        let s = self.input_size;
        if x.dims() != [s, s] {
            return Err(Error::shape(format!(
                "expected a {s}x{s} image, got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// `p_fake` for one `input_size x input_size` image.
    pub fn predict(&self, x: &Tensor<F>) -> Result<f64> {
        self.check_size(x)?;
        let s = self.input_size;
        let z = self.logits_batch(&x.clone().reshape(&[1, s, s])?)?[0];
        Ok(sigmoid(z))
    }

    /// Per-patch logits: non-overlapping `input_size` tiles in row-major
    /// order, the image first reflect-padded up to a whole number of tiles.
    pub fn patch_logits(&self, x: &Tensor<F>) -> Result<Vec<f64>> {
        let s = self.input_size;
        let &[h, w] = x.dims() else {
            return Err(Error::shape(format!("expected [H, W], got {:?}", x.dims())));
        };
        let (ph, pw) = (h.div_ceil(s).max(1) * s, w.div_ceil(s).max(1) * s);
        let padded = reflect_pad_to(x, ph, pw)?;
        let mut rows = Vec::new();
        for ty in 0..ph / s {
            for tx in 0..pw / s {
                rows.push(crop(&padded, ty * s, tx * s, s, s)?.into_data());
            }
        }
        let refs: Vec<&[F]> = rows.iter().map(|r| r.as_slice()).collect();
        self.logits_batch(&Tensor::stack_rows(&refs, &[s, s])?)
    }

    /// `sigmoid(mean patch logit)`; equals [`predict`](Self::predict) when
    /// the image is exactly one patch.
    pub fn predict_patched(&self, x: &Tensor<F>) -> Result<f64> {
        let z = self.patch_logits(x)?;
        Ok(sigmoid(z.iter().sum::<f64>() / z.len() as f64))
    }

    /// Logits for many images, batched and parallel across chunks; order
    /// follows the input. Images that are not exactly one patch get their
    /// mean patch logit.
    pub fn logits_many(&self, images: &[&Tensor<F>]) -> Result<Vec<f64>> {
        let s = self.input_size;
        if images.iter().all(|x| x.dims() == [s, s]) {
            let chunks: Vec<&[&Tensor<F>]> = images.chunks(256).collect();
            let out = crate::par::parallel_map(&chunks, |chunk| {
                let rows: Vec<&[F]> = chunk.iter().map(|x| x.data()).collect();
                self.logits_batch(&Tensor::stack_rows(&rows, &[s, s])?)
            })?;
            Ok(out.into_iter().flatten().collect())
        } else {
            crate::par::parallel_map(images, |x| {
                let z = self.patch_logits(x)?;
                Ok(z.iter().sum::<f64>() / z.len() as f64)
            })
        }
    }

    /// `p_fake` for many images (patch-averaged where needed).
    pub fn predict_many(&self, images: &[&Tensor<F>]) -> Result<Vec<f64>> {
        Ok(self.logits_many(images)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor<F>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.as_ref()))
            .collect();
        write_ptar(path, &entries)?;
        let m = DetectorManifest {
            input_size: self.input_size,
            logit_convention: LOGIT_CONVENTION.into(),
        };
        write_bytes(
            &path.with_extension("json"),
            &serde_json::to_vec_pretty(&m)?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = path.with_extension("json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: DetectorManifest = serde_json::from_slice(&bytes)?;
        if m.logit_convention != LOGIT_CONVENTION {
            return Err(Error::Format(format!(
                "unsupported logit convention `{}`",
                m.logit_convention
            )));
        }
        let mut net = Self::new(m.input_size, 0)?;
        let entries = read_ptar::<F>(path)?;
        if entries.len() != net.params.len() {
            return Err(Error::Format(format!(
                "{}: expected {} tensors",
                path.display(),
                net.params.len()
            )));
        }
        for (name, t) in entries {
            net.params.set(&name, t)?;
        }
        Ok(net)
    }
}
