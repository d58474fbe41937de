//! L∞ PGD baselines minimising the same softplus probe loss as probing,
//! either directly on pixels or on a sampler latent.

use serde::{Deserialize, Serialize};

use crate::detector::DetectorNet;
use crate::diffusion::{
    denoise_graph, denoise_values, initial_latent, DenoiserNet, GradRouting, NoiseSchedule,
    SampleRequest,
};
use crate::tensor::{sigmoid, Graph, Tensor};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdSpace {
    Pixel,
    Latent,
}

/// Budgets are on the `[0, 1]` intensity scale; pixels live in `[-1, 1]`,
/// so both are doubled internally. Latent budgets use the same numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub space: PgdSpace,
    /// Latent step attacked in latent space; `None` means `x_T`.
    pub latent_step_t: Option<usize>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps: 4.0 / 255.0,
            alpha: 1.0 / 255.0,
            steps: 10,
            space: PgdSpace::Pixel,
            latent_step_t: None,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps >= 0.0
            && self.alpha > 0.0
            && (self.eps == 0.0 || self.alpha <= self.eps)
            && self.steps >= 1;
        if !ok {
            return Err(Error::Config(format!(
                "PGD needs eps >= 0, 0 < alpha <= eps, steps >= 1 (eps {}, alpha {}, steps {})",
                self.eps, self.alpha, self.steps
            )));
        }
        Ok(())
    }

    /// Budget in working units (`[-1, 1]` pixels or latent units).
    pub fn budget(&self) -> f64 {
        2.0 * self.eps
    }

    fn step_size(&self) -> f64 {
        2.0 * self.alpha
    }
}

/// Slack allowed by the budget assertion for rounding in `x + delta`.
pub fn budget_tolerance<F: Real>() -> f64 {
    4.0 * F::epsilon().f64()
}

fn assert_budget<F: Real>(orig: &[f64], out: &[F], budget: f64) -> Result<()> {
    let worst = linf(orig, out);
    if worst > budget + budget_tolerance::<F>() {
        return Err(Error::Contract(format!(
            "PGD moved {worst} beyond budget {budget}"
        )));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of a batched attack.
#[derive(Clone, Debug)]
pub struct PgdOutcome<F> {
    /// Best iterate per row, same shape as the input.
    pub images: Tensor<F>,
    /// Detector fake probability of each returned row.
    pub scores: Vec<f64>,
    /// Fake probability of the unperturbed rows.
    pub initial_scores: Vec<f64>,
    /// L∞ size of the returned perturbation in working units (pixels in
    /// `[-1, 1]`, or latent units).
    pub max_shift: f64,
}

fn linf<F: Real>(orig: &[f64], out: &[F]) -> f64 {
    orig.iter()
        .zip(out)
        .map(|(a, b)| (b.f64() - a).abs())
        .fold(0.0, f64::max)
}

/// Pixel-space PGD on a batch `[B, S, S]`. Each row keeps the iterate with
/// the lowest detector score, starting from the (clamped) input itself.
pub fn pgd_pixel<F: Real>(
    x: &Tensor<F>,
    detector: &DetectorNet<F>,
    cfg: &PgdConfig,
) -> Result<PgdOutcome<F>> {
    cfg.validate()?;
    let det = detector.frozen();
    let dims = x.dims().to_vec();
    let b = *dims
        .first()
        .ok_or_else(|| Error::shape("empty PGD input"))?;
    let per = x.numel() / b.max(1);
    let base: Vec<f64> = x.data().iter().map(|v| v.f64().clamp(-1.0, 1.0)).collect();
    let (budget, step) = (cfg.budget(), cfg.step_size());

    let mut delta = vec![0.0; base.len()];
    let mut best: Vec<F> = base.iter().map(|&v| F::c(v)).collect();
    let mut best_z: Vec<f64> = Vec::new();
    let mut initial = Vec::new();
    for it in 0..=cfg.steps {
        let cur: Vec<F> = base
            .iter()
            .zip(&delta)
            .map(|(&a, &d)| F::c(a + d))
            .collect();
        let mut g = Graph::new();
        let xv = g.leaf(
            "pgd/x",
            std::sync::Arc::new(Tensor::new(dims.clone(), cur.clone())?),
            true,
        )?;
        let z = det.logits(&mut g, xv)?;
        let zs: Vec<f64> = g.value(z).data().iter().map(|v| v.f64()).collect();
        if it == 0 {
            best_z = zs.clone();
            initial = zs.iter().map(|&z| sigmoid(z)).collect();
        } else {
            for r in 0..b {
                if zs[r] < best_z[r] {
                    best_z[r] = zs[r];
                    best[r * per..(r + 1) * per].copy_from_slice(&cur[r * per..(r + 1) * per]);
                }
            }
        }
        if it == cfg.steps || budget == 0.0 {
            break;
        }
        let sp = g.softplus(z)?;
        let loss = g.sum(sp)?;
        let grads = g.backward(loss)?;
        let grad = grads.get("pgd/x").expect("input leaf requires grad");
        for ((d, gv), &a) in delta.iter_mut().zip(grad.data()).zip(&base) {
            let nd = (*d - step * sign(gv.f64())).clamp(-budget, budget);
            *d = (a + nd).clamp(-1.0, 1.0) - a;
        }
    }
    assert_budget(&base, &best, budget)?;
    Ok(PgdOutcome {
        max_shift: linf(&base, &best),
        images: Tensor::new(dims, best)?,
        scores: best_z.into_iter().map(sigmoid).collect(),
        initial_scores: initial,
    })
}

/// Latent-space PGD. Perturbs the sampler state at `latent_step_t` within
/// the budget and differentiates the detector loss through the detached
/// sampler with every downstream network call recorded. Returns the raw
/// (unclamped) sample of the best iterate per request; scores are taken on
/// the clamped images.
pub fn pgd_latent<F: Real>(
    net: &DenoiserNet<F>,
    sched: &NoiseSchedule,
    detector: &DetectorNet<F>,
    reqs: &[SampleRequest],
    cfg: &PgdConfig,
) -> Result<PgdOutcome<F>> {
    cfg.validate()?;
    let t_lat = cfg.latent_step_t.unwrap_or(sched.steps());
    if t_lat == 0 || t_lat > sched.steps() {
        return Err(Error::Config(format!(
            "latent_step_t {t_lat} outside [1, {}]",
            sched.steps()
        )));
    }
    let det = detector.frozen();
    let mut frozen = net.clone();
    frozen.params.freeze_all();
    let pixels = net.cfg.pixels();
    let b = reqs.len();
    let x_top = initial_latent::<F>(reqs, pixels)?;
    let start = if t_lat == sched.steps() {
        x_top
    } else {
        let out = denoise_values(&frozen, None, sched, x_top, sched.steps(), reqs, true)?;
        out.trajectory.expect("recorded")[t_lat].clone()
    };
    let base: Vec<f64> = start.data().iter().map(|v| v.f64()).collect();
    let plan: Vec<usize> = (1..=t_lat).collect();
    let (budget, step) = (cfg.budget(), cfg.step_size());
    let s = det.input_size;

    let mut delta = vec![0.0; base.len()];
    let mut best: Option<Tensor<F>> = None;
    let mut best_latent: Vec<F> = base.iter().map(|&v| F::c(v)).collect();
    let mut best_z = vec![f64::INFINITY; b];
    let mut initial = Vec::new();
    for it in 0..=cfg.steps {
        let cur: Vec<F> = base
            .iter()
            .zip(&delta)
            .map(|(&a, &d)| F::c(a + d))
            .collect();
        assert_budget(&base, &cur, budget)?;
        let mut g = Graph::new();
        let lv = g.leaf(
            "pgd/latent",
            std::sync::Arc::new(Tensor::new(vec![b, pixels], cur.clone())?),
            true,
        )?;
        let x0 = denoise_graph(
            &mut g,
            &frozen,
            None,
            sched,
            lv,
            t_lat,
            reqs,
            GradRouting::new(&plan),
            None,
        )?;
        let raw = g.value(x0).clone();
        let clamped = raw
            .map(|v| v.max(-F::one()).min(F::one()))
            .reshape(&[b, s, s])?;
        let zs = det.logits_batch(&clamped)?;
        if it == 0 {
            initial = zs.iter().map(|&z| sigmoid(z)).collect();
        }
        let best_t = best.get_or_insert_with(|| raw.clone());
        for r in 0..b {
            if zs[r] < best_z[r] {
                best_z[r] = zs[r];
                best_t.data_mut()[r * pixels..(r + 1) * pixels].copy_from_slice(raw.row(r));
                best_latent[r * pixels..(r + 1) * pixels]
                    .copy_from_slice(&cur[r * pixels..(r + 1) * pixels]);
            }
        }
        if it == cfg.steps || budget == 0.0 {
            break;
        }
        let z = det.logits(&mut g, x0)?;
        let sp = g.softplus(z)?;
        let loss = g.sum(sp)?;
        let grads = g.backward(loss)?;
        let grad = grads.get("pgd/latent").expect("latent leaf requires grad");
        for (d, gv) in delta.iter_mut().zip(grad.data()) {
            *d = (*d - step * sign(gv.f64())).clamp(-budget, budget);
        }
    }
    Ok(PgdOutcome {
        max_shift: linf(&base, &best_latent),
        images: best.expect("at least one iterate"),
        scores: best_z.into_iter().map(sigmoid).collect(),
        initial_scores: initial,
    })
}
