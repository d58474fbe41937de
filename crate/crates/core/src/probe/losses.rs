use crate::detector::DetectorNet;
use crate::nn::add_conv;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Real, Result};

/// `mean(softplus(z))` over the batch, `z` the detector's fake logit; equal
/// to `-log(1 - p_fake)`. `x` is `[B, S*S]` or `[B, S, S]`.
pub fn probe_loss<F: Real>(g: &mut Graph<F>, detector: &DetectorNet<F>, x: Var) -> Result<Var> {
    let z = detector.logits(g, x)?;
    let sp = g.softplus(z)?;
    g.mean(sp)
}

/// Fixed random convolutional features: three stride-2 3×3 convolutions
/// with 8, 16 and 32 channels and ReLU. All weights are frozen.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<F> {
    pub image_size: usize,
    pub params: ParamStore<F>,
}

const CHANNELS: [usize; 4] = [1, 8, 16, 32];

impl<F: Real> PerceptualExtractor<F> {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        let mut r = rng::rng(rng::derive(seed, "perceptual"));
        let mut params = ParamStore::new();
        for l in 0..3 {
            add_conv(
                &mut params,
                &format!("feat{l}"),
                CHANNELS[l],
                CHANNELS[l + 1],
                3,
                &mut r,
            )?;
        }
        params.freeze_all();
        Ok(Self { image_size, params })
    }

    /// The three ReLU feature maps of `x` (`[B, S*S]` or `[B, S, S]`).
    pub fn features(&self, g: &mut Graph<F>, x: Var) -> Result<Vec<Var>> {
        let s = self.image_size;
        let b = g.value(x).dims()[0];
        if g.value(x).numel() != b * s * s {
            return Err(Error::shape(format!(
                "extractor expects {s}x{s} images, got {:?}",
                g.value(x).dims()
            )));
        }
        let mut h = g.reshape(x, &[b, 1, s, s])?;
        let mut out = Vec::with_capacity(3);
        for l in 0..3 {
            let w = g.param(&self.params, &format!("feat{l}.w"))?;
            let bias = g.param(&self.params, &format!("feat{l}.b"))?;
            h = g.conv2d(h, w, Some(bias), 2, 1)?;
            h = g.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Sum over the three feature maps of the mean squared feature difference
/// between `x_adapted` (differentiable) and `x_base` (a constant).
pub fn perceptual_loss<F: Real>(
    g: &mut Graph<F>,
    extractor: &PerceptualExtractor<F>,
    x_adapted: Var,
    x_base: &Tensor<F>,
) -> Result<Var> {
    if g.value(x_adapted).numel() != x_base.numel()
        || g.value(x_adapted).dims()[0] != x_base.dims()[0]
    {
        return Err(Error::shape(format!(
            "perceptual loss inputs differ: {:?} vs {:?}",
            g.value(x_adapted).dims(),
            x_base.dims()
        )));
    }
    let base = g.constant(x_base.clone())?;
    let fa = extractor.features(g, x_adapted)?;
    let fb = extractor.features(g, base)?;
    let mut total: Option<Var> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let m = g.mse(a, b)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("three feature maps"))
}
