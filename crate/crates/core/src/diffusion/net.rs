use serde::{Deserialize, Serialize};

use super::NoiseSchedule;

use crate::lora::LoraParams;
use crate::nn::add_linear;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Real, Result};

/// Shape of the ε-prediction MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Number of real classes; the embedding table has one extra null row.
    pub classes: usize,
    pub hidden: usize,
    pub time_freqs: usize,
}

impl DenoiserConfig {
    pub fn desk(image_size: usize, classes: usize) -> Self {
        Self {
            image_size,
            classes,
            hidden: 128,
            time_freqs: 32,
        }
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn null_class(&self) -> usize {
        self.classes
    }
}

/// ε_φ(x_t, t, c): input projection plus time and class embeddings, two
/// residual SiLU hidden layers, output projection to image size.
///
/// The output projection estimates the clean image `D`; the returned noise
/// prediction is `(x_t − sqrt(ᾱ_t)·D) / sqrt(1 − ᾱ_t)`, so the net carries the
/// `ᾱ` table of the schedule it was built for.
#[derive(Clone, Debug)]
pub struct DenoiserNet<F> {
    pub cfg: DenoiserConfig,
    pub params: ParamStore<F>,
    alpha_bar: Vec<f64>,
}

/// Timestep argument: one step shared by the batch, or one per row.
#[derive(Clone, Copy, Debug)]
pub enum Timesteps<'a> {
    Same(usize),
    PerRow(&'a [usize]),
}

/// Names of the linear layers, in forward order.
pub const LINEAR_LAYERS: [&str; 6] = ["time1", "time2", "in", "hidden1", "hidden2", "out"];

impl<F: Real> DenoiserNet<F> {
    pub fn new(cfg: DenoiserConfig, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.time_freqs == 0 || cfg.image_size == 0 || cfg.classes == 0 {
            return Err(Error::Config(format!("degenerate denoiser config {cfg:?}")));
        }
        let mut r = rng::rng(rng::derive(seed, "denoiser-init"));
        let mut p = ParamStore::new();
        let (h, d) = (cfg.hidden, cfg.pixels());
        add_linear(&mut p, "time1", 2 * cfg.time_freqs, h, &mut r)?;
        add_linear(&mut p, "time2", h, h, &mut r)?;
        add_linear(&mut p, "in", d, h, &mut r)?;
        p.insert(
            "class_emb",
            Tensor::randn(&[cfg.classes + 1, h], 0.5, &mut r),
        )?;
        add_linear(&mut p, "hidden1", h, h, &mut r)?;
        add_linear(&mut p, "hidden2", h, h, &mut r)?;
        add_linear(&mut p, "out", h, d, &mut r)?;
        // Small output layer so the untrained net predicts ε ≈ 0.
        let w = p.get("out.w")?.map(|v| v * F::c(0.1));
        p.set("out.w", w)?;
        Ok(Self {
            cfg,
            params: p,
            alpha_bar: (0..=sched.steps()).map(|t| sched.alpha_bar(t)).collect(),
        })
    }

    /// Rebuild from stored parameters.
    pub fn from_params(
        cfg: DenoiserConfig,
        sched: &NoiseSchedule,
        params: ParamStore<F>,
    ) -> Result<Self> {
        let fresh = Self::new(cfg, sched, 0)?;
        for (name, t) in fresh.params.iter() {
            if params.get(name)?.dims() != t.dims() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has the wrong shape"
                )));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Format("unexpected denoiser parameters".into()));
        }
        Ok(Self {
            cfg,
            params,
            alpha_bar: fresh.alpha_bar,
        })
    }

    /// Cumulative signal level the network was built for, `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `[in, out]` of a linear layer.
    pub fn linear_shape(&self, layer: &str) -> Result<(usize, usize)> {
        let w = self.params.get(&format!("{layer}.w"))?;
        if w.dims().len() != 2 {
            return Err(Error::Contract(format!("`{layer}` is not a linear layer")));
        }
        Ok((w.dims()[1], w.dims()[0]))
    }

    fn sinusoid(&self, t: &[usize]) -> Result<Tensor<F>> {
        let f = self.cfg.time_freqs;
        let mut data = Vec::with_capacity(t.len() * 2 * f);
        for &step in t {
            for i in 0..f {
                let freq = (-(10_000f64.ln()) * i as f64 / f as f64).exp();
                data.push(F::c((step as f64 * freq).sin()));
            }
            for i in 0..f {
                let freq = (-(10_000f64.ln()) * i as f64 / f as f64).exp();
                data.push(F::c((step as f64 * freq).cos()));
            }
        }
        Tensor::new(vec![t.len(), 2 * f], data)
    }

    fn layer(
        &self,
        g: &mut Graph<F>,
        lora: Option<&LoraParams<F>>,
        name: &str,
        x: Var,
    ) -> Result<Var> {
        let base = g.param(&self.params, &format!("{name}.w"))?;
        let w = match lora {
            Some(l) if l.targets_layer(name) => l.weight(g, name, base)?,
            _ => base,
        };
        let b = g.param(&self.params, &format!("{name}.b"))?;
        g.linear(x, w, Some(b))
    }

    /// Predicted noise for `x: [B, H·W]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        lora: Option<&LoraParams<F>>,
        x: Var,
        t: Timesteps<'_>,
        classes: &[usize],
    ) -> Result<Var> {
        let xd = g.value(x).dims().to_vec();
        if xd.len() != 2 || xd[1] != self.cfg.pixels() {
            return Err(Error::shape(format!(
                "denoiser input {xd:?}, expected [B, {}]",
                self.cfg.pixels()
            )));
        }
        if classes.len() != xd[0] {
            return Err(Error::shape(format!(
                "{} class ids for batch {}",
                classes.len(),
                xd[0]
            )));
        }
        if let Some(&c) = classes.iter().find(|&&c| c > self.cfg.classes) {
            return Err(Error::Contract(format!(
                "class id {c} beyond null class {}",
                self.cfg.classes
            )));
        }
        let ts: Vec<usize> = match t {
            Timesteps::Same(s) => {
                if s == 0 || s > self.steps() {
                    return Err(Error::Contract(format!(
                        "timestep {s} outside [1, {}]",
                        self.steps()
                    )));
                }
                vec![s]
            }
            Timesteps::PerRow(r) => {
                if r.len() != xd[0] {
                    return Err(Error::shape(format!(
                        "{} timesteps for batch {}",
                        r.len(),
                        xd[0]
                    )));
                }
                r.to_vec()
            }
        };
        let sin = g.constant(self.sinusoid(&ts)?)?;
        let te = self.layer(g, lora, "time1", sin)?;
        let te = g.silu(te)?;
        let te = self.layer(g, lora, "time2", te)?;

        let h = self.layer(g, lora, "in", x)?;
        let h = g.add(h, te)?;
        let table = g.param(&self.params, "class_emb")?;
        let ce = g.embed(table, classes)?;
        let h = g.add(h, ce)?;
        let mut h = g.silu(h)?;
        for name in ["hidden1", "hidden2"] {
            let z = self.layer(g, lora, name, h)?;
            let z = g.silu(z)?;
            h = g.add(h, z)?;
        }
        let d = self.layer(g, lora, "out", h)?;
        self.to_eps(g, x, d, t)
    }

    fn to_eps(&self, g: &mut Graph<F>, x: Var, d: Var, t: Timesteps<'_>) -> Result<Var> {
        let k = |ab: f64| (1.0 / (1.0 - ab).sqrt(), (ab / (1.0 - ab)).sqrt());
        match t {
            Timesteps::Same(s) => {
                let (kx, kd) = k(self.alpha_bar[s]);
                let a = g.scale(x, F::c(kx))?;
                let b = g.scale(d, F::c(kd))?;
                g.sub(a, b)
            }
            Timesteps::PerRow(ts) => {
                let pixels = self.cfg.pixels();
                let mut kx = Vec::with_capacity(ts.len() * pixels);
                let mut kd = Vec::with_capacity(ts.len() * pixels);
                for &s in ts {
                    if s == 0 || s > self.steps() {
                        return Err(Error::Contract(format!(
                            "timestep {s} outside [1, {}]",
                            self.steps()
                        )));
                    }
                    let (a, b) = k(self.alpha_bar[s]);
                    kx.extend(std::iter::repeat_n(F::c(a), pixels));
                    kd.extend(std::iter::repeat_n(F::c(b), pixels));
                }
                let kx = g.constant(Tensor::new(vec![ts.len(), pixels], kx)?)?;
                let kd = g.constant(Tensor::new(vec![ts.len(), pixels], kd)?)?;
                let a = g.mul(x, kx)?;
                let b = g.mul(d, kd)?;
                g.sub(a, b)
            }
        }
    }
}
