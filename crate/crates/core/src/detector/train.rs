use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DetectorNet;
use crate::augment::{fit_to_size, random_augment, AugmentPolicy};
use crate::eval::{balanced_accuracy, ScoredSample};
use crate::nn::Adam;
use crate::rng::{self, Rng};
use crate::tensor::{sigmoid, softplus, Graph, Tensor};
use crate::toydata::{SourceTag, SplitDataset, ToyImage};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_frac: f64,
    /// Overrides the default of one pass over the smaller class.
    pub iters_per_epoch: Option<usize>,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 64,
            epochs: 12,
            patience: 4,
            val_frac: 0.1,
            iters_per_epoch: None,
            seed: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

/// Mixed-batch fine-tuning: `L = (1 - w) * L_pre + w * L_probe`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub w: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_frac: f64,
    pub iters_per_epoch: Option<usize>,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            w: 0.5,
            lr: 1e-3,
            batch: 64,
            max_epochs: 8,
            patience: 3,
            val_frac: 0.1,
            iters_per_epoch: None,
            seed: 0,
            augment: AugmentPolicy::default(),
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config(format!(
                "mix weight w = {} outside [0, 1]",
                self.w
            )));
        }
        check_common(self.lr, self.batch, self.max_epochs, self.val_frac)?;
        self.augment.validate()
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lr, self.batch, self.epochs, self.val_frac)?;
        self.augment.validate()
    }
}

fn check_common(lr: f64, batch: usize, epochs: usize, val_frac: f64) -> Result<()> {
    if !(lr > 0.0) || batch < 2 || batch % 2 != 0 || epochs == 0 || !(0.0..1.0).contains(&val_frac)
    {
        return Err(Error::Config(format!(
            "detector training: need lr > 0, even batch >= 2, epochs >= 1, val_frac in [0, 1) \
             (got lr {lr}, batch {batch}, epochs {epochs}, val_frac {val_frac})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_bacc: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Real and fake images to draw class-balanced batches from.
#[derive(Clone, Debug)]
pub struct BalancedPool<'a, F> {
    pub real: Vec<&'a ToyImage<F>>,
    pub fake: Vec<&'a ToyImage<F>>,
}

impl<'a, F: Real> BalancedPool<'a, F> {
    pub fn new(real: Vec<&'a ToyImage<F>>, fake: Vec<&'a ToyImage<F>>) -> Result<Self> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::Contract(format!(
                "balanced pool needs both classes (real {}, fake {})",
                real.len(),
                fake.len()
            )));
        }
        Ok(Self { real, fake })
    }

    /// Split a mixed dataset by label.
    pub fn from_mixed(items: impl IntoIterator<Item = &'a ToyImage<F>>) -> Result<Self> {
        let (real, fake): (Vec<_>, Vec<_>) = items.into_iter().partition(|i| i.label() == 0);
        Self::new(real, fake)
    }

    /// `batch / 2` reals then `batch / 2` fakes, drawn with replacement and
    /// augmented per sample; returns `[B, S, S]` and labels.
    pub fn draw(
        &self,
        batch: usize,
        size: usize,
        policy: &AugmentPolicy,
        rng: &mut Rng,
    ) -> Result<(Tensor<F>, Vec<F>)> {
        let half = batch / 2;
        let mut rows = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        for (pool, label) in [(&self.real, 0.0), (&self.fake, 1.0)] {
            for _ in 0..half {
                let item = pool[rng.random_range(0..pool.len())];
                let aug = random_augment(&item.pixels, policy, rng)?;
                rows.push(fit_to_size(&aug, size, rng)?.into_data());
                labels.push(F::c(label));
            }
        }
        let refs: Vec<&[F]> = rows.iter().map(|r| r.as_slice()).collect();
        Ok((Tensor::stack_rows(&refs, &[size, size])?, labels))
    }
}

/// One optimizer step on `sum_i weight_i * BCE(batch_i)`; returns the loss.
pub fn bce_step<F: Real>(
    net: &mut DetectorNet<F>,
    opt: &mut Adam<F>,
    terms: &[(f64, &Tensor<F>, &[F])],
) -> Result<f64> {
    let mut g = Graph::new();
    let mut total = None;
    for &(w, x, y) in terms {
        let xv = g.constant(x.clone())?;
        let z = net.logits(&mut g, xv)?;
        let l = g.bce_with_logits(z, y)?;
        let l = g.scale(l, F::c(w))?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("bce_step without terms".into()))?;
    let loss = g.value(total).item().f64();
    let grads = g.backward(total)?;
    opt.step(&mut net.params, &grads)?;
    Ok(loss)
}

fn holdout<T: Copy>(items: &[T], frac: f64, rng: &mut Rng) -> (Vec<T>, Vec<T>) {
    let mut v = items.to_vec();
    v.shuffle(rng);
    let n_val = if frac > 0.0 && v.len() >= 2 {
        ((v.len() as f64 * frac).ceil() as usize).min(v.len() - 1)
    } else {
        0
    };
    let train = v.split_off(n_val);
    (train, v)
}

struct Validation<'a, F> {
    items: Vec<&'a ToyImage<F>>,
}

impl<F: Real> Validation<'_, F> {
    /// `(bAcc, mean BCE)`; an empty set scores as `(0, inf)`.
    fn score(&self, net: &DetectorNet<F>) -> Result<(f64, f64)> {
        if self.items.is_empty() {
            return Ok((0.0, f64::INFINITY));
        }
        let imgs: Vec<&Tensor<F>> = self.items.iter().map(|i| &i.pixels).collect();
        let z = net.logits_many(&imgs)?;
        let samples: Vec<ScoredSample> = self
            .items
            .iter()
            .zip(&z)
            .map(|(i, &z)| ScoredSample::new(sigmoid(z), i.label(), i.source))
            .collect();
        let bacc = balanced_accuracy(&samples, 0.5).unwrap_or(0.0);
        let loss = z
            .iter()
            .zip(&self.items)
            .map(|(&z, i)| softplus(z) - i.label() as f64 * z)
            .sum::<f64>()
            / z.len() as f64;
        Ok((bacc, loss))
    }
}

/// Epoch loop with best-on-validation selection and patience.
fn fit<F: Real>(
    mut net: DetectorNet<F>,
    epochs: usize,
    patience: usize,
    iters: usize,
    lr: f64,
    val: &Validation<'_, F>,
    mut step: impl FnMut(&mut DetectorNet<F>, &mut Adam<F>, usize) -> Result<f64>,
) -> Result<(DetectorNet<F>, TrainSummary)> {
    let mut opt = Adam::new(lr);
    let mut summary = TrainSummary::default();
    let mut best: Option<(f64, f64, DetectorNet<F>)> = None;
    let mut since_best = 0;
    let mut it = 0;
    for epoch in 1..=epochs {
        let mut acc = 0.0;
        for _ in 0..iters {
            let loss = step(&mut net, &mut opt, it).map_err(|e| match e {
                Error::Numeric(d) => Error::Training {
                    step: it,
                    detail: d,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: it,
                    detail: format!("loss {loss}"),
                });
            }
            acc += loss;
            it += 1;
        }
        summary.train_loss.push(acc / iters as f64);
        let (bacc, vloss) = val.score(&net)?;
        summary.val_bacc.push(bacc);
        summary.val_loss.push(vloss);
        let improved = match &best {
            None => true,
            Some((b, l, _)) => bacc > *b || (bacc == *b && vloss < *l),
        };
        if improved {
            best = Some((bacc, vloss, net.clone()));
            summary.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if patience > 0 && since_best >= patience {
                break;
            }
        }
    }
    let (_, _, net) = best.expect("at least one epoch");
    Ok((net, summary))
}

fn image_size<F: Real>(d: &SplitDataset<F>) -> Result<usize> {
    match d.image_dims() {
        Some(&[h, w]) if h == w => Ok(h),
        other => Err(Error::shape(format!(
            "dataset `{}` has image dims {other:?}",
            d.name
        ))),
    }
}

/// Train a fresh detector on real vs. fake with class-balanced batches.
pub fn pretrain<F: Real>(
    real: &SplitDataset<F>,
    fake: &SplitDataset<F>,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorNet<F>, TrainSummary)> {
    cfg.validate()?;
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Contract(
            "pretrain needs non-empty real and fake sets".into(),
        ));
    }
    let size = image_size(real)?;
    let net = DetectorNet::new(size, rng::derive(cfg.seed, "init"))?;
    let mut split_rng = rng::rng(rng::derive(cfg.seed, "val-split"));
    let (real_tr, real_val) = holdout(
        &real.items.iter().collect::<Vec<_>>(),
        cfg.val_frac,
        &mut split_rng,
    );
    let (fake_tr, fake_val) = holdout(
        &fake.items.iter().collect::<Vec<_>>(),
        cfg.val_frac,
        &mut split_rng,
    );
    let pool = BalancedPool::new(real_tr, fake_tr)?;
    let val = Validation {
        items: real_val.into_iter().chain(fake_val).collect(),
    };
    let iters = cfg
        .iters_per_epoch
        .unwrap_or_else(|| (2 * pool.real.len().min(pool.fake.len())).div_ceil(cfg.batch));
    fit(
        net,
        cfg.epochs,
        cfg.patience,
        iters.max(1),
        cfg.lr,
        &val,
        |net, opt, it| {
            let mut r = rng::rng(rng::derive_path(cfg.seed, "batch", it as u64));
            let (x, y) = pool.draw(cfg.batch, size, &cfg.augment, &mut r)?;
            bce_step(net, opt, &[(1.0, &x, &y)])
        },
    )
}

/// Continue training `net` with one `D_pre` batch and one equal-size
/// `D_probe_paired` batch per iteration. The two streams draw from
/// independent RNGs so either can be reproduced alone.
pub fn finetune_mixed<F: Real>(
    net: &DetectorNet<F>,
    pre_real: &SplitDataset<F>,
    pre_fake: &SplitDataset<F>,
    probe_paired: &SplitDataset<F>,
    cfg: &MixConfig,
) -> Result<(DetectorNet<F>, TrainSummary)> {
    cfg.validate()?;
    if probe_paired.is_empty() {
        return Err(Error::Contract("finetune_mixed: empty probe set".into()));
    }
    if probe_paired
        .items
        .iter()
        .all(|i| i.source == SourceTag::Real)
    {
        return Err(Error::Contract(
            "finetune_mixed: probe set has no fakes".into(),
        ));
    }
    let size = net.input_size;
    let mut split_rng = rng::rng(rng::derive(cfg.seed, "val-split"));
    let frac = cfg.val_frac;
    let (pr_tr, pr_val) = holdout(
        &pre_real.items.iter().collect::<Vec<_>>(),
        frac,
        &mut split_rng,
    );
    let (pf_tr, pf_val) = holdout(
        &pre_fake.items.iter().collect::<Vec<_>>(),
        frac,
        &mut split_rng,
    );
    let probe = BalancedPool::from_mixed(&probe_paired.items)?;
    let (qr_tr, qr_val) = holdout(&probe.real, frac, &mut split_rng);
    let (qf_tr, qf_val) = holdout(&probe.fake, frac, &mut split_rng);
    let pre_pool = BalancedPool::new(pr_tr, pf_tr)?;
    let probe_pool = BalancedPool::new(qr_tr, qf_tr)?;
    let val = Validation {
        items: pr_val
            .into_iter()
            .chain(pf_val)
            .chain(qr_val)
            .chain(qf_val)
            .collect(),
    };
    let iters = cfg
        .iters_per_epoch
        .unwrap_or_else(|| (probe_pool.real.len() + probe_pool.fake.len()).div_ceil(cfg.batch));
    let w = cfg.w;
    fit(
        net.clone(),
        cfg.max_epochs,
        cfg.patience,
        iters.max(1),
        cfg.lr,
        &val,
        |net, opt, it| {
            let mut r_pre = rng::rng(rng::derive_path(cfg.seed, "pre-batch", it as u64));
            let mut r_probe = rng::rng(rng::derive_path(cfg.seed, "probe-batch", it as u64));
            let (xa, ya) = pre_pool.draw(cfg.batch, size, &cfg.augment, &mut r_pre)?;
            let (xb, yb) = probe_pool.draw(cfg.batch, size, &cfg.augment, &mut r_probe)?;
            bce_step(net, opt, &[(1.0 - w, &xa, &ya), (w, &xb, &yb)])
        },
    )
}
