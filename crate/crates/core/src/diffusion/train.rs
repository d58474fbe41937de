use rand::Rng as _;

use super::{DenoiserNet, NoiseSchedule, Timesteps};
use crate::nn::Adam;
use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::toydata::SplitDataset;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Probability of replacing the class with the null class.
    pub cond_drop: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 2e-3,
            batch: 64,
            cond_drop: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// `MSE(ε_φ(q_sample(x0, t, ε), t, c), ε)` for a fixed batch.
pub fn denoising_loss<F: Real>(
    g: &mut Graph<F>,
    net: &DenoiserNet<F>,
    sched: &NoiseSchedule,
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    classes: &[usize],
) -> Result<crate::Var> {
    let pixels = net.cfg.pixels();
    let n = ts.len();
    let mut xt = Vec::with_capacity(n * pixels);
    for (i, &t) in ts.iter().enumerate() {
        let row = Tensor::new(vec![pixels], x0.row(i).to_vec())?;
        let e = Tensor::new(vec![pixels], eps.row(i).to_vec())?;
        xt.extend(sched.q_sample(&row, t, &e)?.into_data());
    }
    let x = g.constant(Tensor::new(vec![n, pixels], xt)?)?;
    let target = g.constant(eps.clone().reshape(&[n, pixels])?)?;
    let pred = net.forward(g, None, x, Timesteps::PerRow(ts), classes)?;
    g.mse(pred, target)
}

/// Train the denoiser on real images with uniform timesteps and
/// classifier-free condition dropout.
pub fn train_denoiser<F: Real>(
    mut net: DenoiserNet<F>,
    data: &SplitDataset<F>,
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
) -> Result<(DenoiserNet<F>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Contract("denoiser training set is empty".into()));
    }
    if cfg.batch == 0 || !(0.0..=1.0).contains(&cfg.cond_drop) {
        return Err(Error::Config(format!(
            "bad denoiser training config {cfg:?}"
        )));
    }
    let pixels = net.cfg.pixels();
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut r = rng::rng(rng::derive_path(cfg.seed, "denoiser-step", step as u64));
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| r.random_range(0..data.len()))
            .collect();
        let ts: Vec<usize> = (0..cfg.batch)
            .map(|_| r.random_range(1..=sched.steps()))
            .collect();
        let classes: Vec<usize> = idx
            .iter()
            .map(|&i| {
                if r.random::<f64>() < cfg.cond_drop {
                    net.cfg.null_class()
                } else {
                    data.items[i].class_id
                }
            })
            .collect();
        let eps = Tensor::randn(&[cfg.batch, pixels], 1.0, &mut r);
        let x0 = data.batch(&idx)?.reshape(&[cfg.batch, pixels])?;
        let mut g = Graph::new();
        let loss = denoising_loss(&mut g, &net, sched, &x0, &ts, &eps, &classes).map_err(|e| {
            Error::Training {
                step,
                detail: e.to_string(),
            }
        })?;
        let lv = g.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(Error::Training {
                step,
                detail: "loss is NaN".into(),
            });
        }
        report.losses.push(lv);
        let grads = g.backward(loss)?;
        opt.step(&mut net.params, &grads)
            .map_err(|e| Error::Training {
                step,
                detail: e.to_string(),
            })?;
    }
    Ok((net, report))
}
