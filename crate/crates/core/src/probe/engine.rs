use std::fmt;

use serde::{Deserialize, Serialize};

use super::losses::{perceptual_loss, probe_loss, PerceptualExtractor};
use super::plan::{make_train_steps, StepCount, TrainStepPlan};
use crate::detector::DetectorNet;
use crate::diffusion::{
    denoise_graph, denoise_values, guided_eps, initial_latent, DenoiserNet, GradRouting,
    NoiseSchedule, SampleRequest,
};
use crate::lora::{attach_lora, LoraParams, DEFAULT_TARGETS};
use crate::nn::Momentum;
use crate::rng;
use crate::tensor::{sigmoid, GradMap, Graph, Tensor};
use crate::toydata::{SampleMeta, SourceTag, SplitDataset, ToyImage};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    /// Every batch uses the configured `t_s`.
    #[default]
    Fixed,
    /// A fresh uniformly drawn `t_s` per batch.
    RandomPerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Weight of the perceptual term.
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub n_prompts: usize,
    pub k: usize,
    pub t_s: usize,
    pub t_s_mode: StartMode,
    pub step_count: StepCount,
    /// Probing rounds; each round after the first is driven by the caller
    /// with a refreshed detector.
    pub rounds: usize,
    pub seed: u64,
    pub guidance: f64,
    pub rank: usize,
    pub targets: Vec<String>,
    /// Route gradient through the unconditional guidance branch too.
    pub both_branches: bool,
    /// Rescale the adapter gradient to at most this global L2 norm; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 1e-3,
            momentum: 0.9,
            batch: 8,
            n_prompts: 2000,
            k: 5,
            t_s: 5,
            t_s_mode: StartMode::Fixed,
            step_count: StepCount::Inclusive,
            rounds: 1,
            seed: 0,
            guidance: 2.0,
            rank: 4,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            both_branches: true,
            max_grad_norm: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("probe: {m}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} / momentum {}", self.lr, self.momentum));
        }
        if self.batch == 0
            || self.n_prompts == 0
            || self.rounds == 0
            || self.rank == 0
            || self.k == 0
        {
            return bad("batch, n_prompts, rounds, rank and K must be >= 1".into());
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return bad(format!("guidance {}", self.guidance));
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad(format!("max_grad_norm {}", self.max_grad_norm));
        }
        Ok(())
    }

    /// The plan for batch `index`.
    pub fn plan(&self, total_steps: usize, index: usize) -> Result<TrainStepPlan> {
        let mut r = rng::rng(rng::derive_path(self.seed, "plan", index as u64));
        let ts = match self.t_s_mode {
            StartMode::Fixed => Some(self.t_s),
            StartMode::RandomPerBatch => None,
        };
        make_train_steps(total_steps, self.k, ts, self.step_count, &mut r)
    }

    /// Request `i` of the prompt stream: a class and a latent seed.
    pub fn request(&self, i: usize, classes: usize) -> SampleRequest {
        SampleRequest {
            class_id: (rng::derive_path(self.seed, "prompt-class", i as u64) % classes as u64)
                as usize,
            guidance: self.guidance,
            seed: rng::derive_path(self.seed, "prompt-latent", i as u64),
        }
    }

    pub fn requests(&self, classes: usize) -> Vec<SampleRequest> {
        (0..self.n_prompts)
            .map(|i| self.request(i, classes))
            .collect()
    }
}

/// Frozen models shared by every probe step.
#[derive(Clone, Debug)]
pub struct ProbeContext<F> {
    pub net: DenoiserNet<F>,
    pub sched: NoiseSchedule,
    pub detector: DetectorNet<F>,
    pub extractor: PerceptualExtractor<F>,
    pub lambda: f64,
    pub both_branches: bool,
}

impl<F: Real> ProbeContext<F> {
    /// Takes frozen copies of the generator, detector and extractor.
    pub fn new(
        net: &DenoiserNet<F>,
        sched: &NoiseSchedule,
        detector: &DetectorNet<F>,
        extractor: &PerceptualExtractor<F>,
        lambda: f64,
    ) -> Self {
        let mut net = net.clone();
        net.params.freeze_all();
        let mut extractor = extractor.clone();
        extractor.params.freeze_all();
        Self {
            net,
            sched: sched.clone(),
            detector: detector.frozen(),
            extractor,
            lambda,
            both_branches: true,
        }
    }

    fn routing<'a>(&self, plan: &'a TrainStepPlan) -> GradRouting<'a> {
        GradRouting {
            steps: plan.steps(),
            both_branches: self.both_branches,
        }
    }

    /// Gradient-free output of the unadapted generator.
    pub fn base_sample(&self, reqs: &[SampleRequest]) -> Result<Tensor<F>> {
        let x_t = initial_latent::<F>(reqs, self.net.cfg.pixels())?;
        Ok(denoise_values(
            &self.net,
            None,
            &self.sched,
            x_t,
            self.sched.steps(),
            reqs,
            false,
        )?
        .x0)
    }

    /// Gradient-free output of the adapted generator.
    pub fn adapted_sample(
        &self,
        lora: &LoraParams<F>,
        reqs: &[SampleRequest],
    ) -> Result<Tensor<F>> {
        let x_t = initial_latent::<F>(reqs, self.net.cfg.pixels())?;
        Ok(denoise_values(
            &self.net,
            Some(lora),
            &self.sched,
            x_t,
            self.sched.steps(),
            reqs,
            false,
        )?
        .x0)
    }

    /// `L_probe + lambda * L_perc` on graph `g` for generated `x0`;
    /// returns `(total, l_probe, l_perc)`.
    fn objective(
        &self,
        g: &mut Graph<F>,
        x0: crate::tensor::Var,
        base: &Tensor<F>,
    ) -> Result<[crate::tensor::Var; 3]> {
        let lp = probe_loss(g, &self.detector, x0)?;
        let lperc = perceptual_loss(g, &self.extractor, x0, base)?;
        let total = if self.lambda == 0.0 {
            lp
        } else {
            let w = g.scale(lperc, F::c(self.lambda))?;
            g.add(lp, w)?
        };
        Ok([total, lp, lperc])
    }
}

/// Everything one probe step produces.
#[derive(Clone, Debug)]
pub struct StepOutcome<F> {
    pub total: f64,
    pub l_probe: f64,
    pub l_perc: f64,
    /// Gradients of `total` for the LoRA entries only.
    pub grads: GradMap<F>,
    /// Raw adapted outputs `[B, H*W]`.
    pub x_adapted: Tensor<F>,
    pub x_base: Tensor<F>,
    /// `x_t` of the adapted pass, `trajectory[t]` for `t = 0..=T`.
    pub trajectory: Vec<Tensor<F>>,
    /// Network calls recorded with gradient.
    pub activations: usize,
}

/// One adapted stop-grad sampling pass with gradient at the plan steps, one
/// base pass from the same latents, and backward of the objective.
pub fn probe_step<F: Real>(
    ctx: &ProbeContext<F>,
    lora: &LoraParams<F>,
    reqs: &[SampleRequest],
    plan: &TrainStepPlan,
) -> Result<StepOutcome<F>> {
    let total_steps = ctx.sched.steps();
    if plan.total_steps != total_steps {
        return Err(Error::Contract(format!(
            "plan built for T = {}, sampler has T = {total_steps}",
            plan.total_steps
        )));
    }
    let x_t = initial_latent::<F>(reqs, ctx.net.cfg.pixels())?;
    let x_base = denoise_values(
        &ctx.net,
        None,
        &ctx.sched,
        x_t.clone(),
        total_steps,
        reqs,
        false,
    )?
    .x0;
    let mut g = Graph::new();
    let xv = g.constant(x_t)?;
    let mut trajectory = Vec::new();
    let x0 = denoise_graph(
        &mut g,
        &ctx.net,
        Some(lora),
        &ctx.sched,
        xv,
        total_steps,
        reqs,
        ctx.routing(plan),
        Some(&mut trajectory),
    )?;
    let [total, lp, lperc] = ctx.objective(&mut g, x0, &x_base)?;
    let grads = g.backward(total)?;
    Ok(StepOutcome {
        total: g.value(total).item().f64(),
        l_probe: g.value(lp).item().f64(),
        l_perc: g.value(lperc).item().f64(),
        grads,
        x_adapted: g.value(x0).clone(),
        x_base,
        trajectory,
        activations: g.activations(),
    })
}

/// `dL/dx0` of the probing objective at generated `x0`.
pub fn objective_grad_x0<F: Real>(
    ctx: &ProbeContext<F>,
    x0: &Tensor<F>,
    x_base: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let xv = g.leaf("probe/x0", std::sync::Arc::new(x0.clone()), true)?;
    let [total, _, _] = ctx.objective(&mut g, xv, x_base)?;
    let grads = g.backward(total)?;
    Ok(grads
        .get("probe/x0")
        .expect("x0 leaf requires grad")
        .clone())
}

fn zero_grads<F: Real>(lora: &LoraParams<F>) -> GradMap<F> {
    let mut out = GradMap::new();
    for (name, t) in lora.params.iter() {
        if !lora.params.is_frozen(name) {
            out.insert(name.to_string(), Tensor::zeros(t.dims()));
        }
    }
    out
}

/// The contribution of the network call at step `t`:
/// `VJP(eps(x_t, t); dL/dx0 * a_1...a_{t-1} * b_t)` w.r.t. the LoRA entries.
pub fn manual_step_term<F: Real>(
    ctx: &ProbeContext<F>,
    lora: &LoraParams<F>,
    reqs: &[SampleRequest],
    trajectory: &[Tensor<F>],
    dl_dx0: &Tensor<F>,
    t: usize,
) -> Result<GradMap<F>> {
    let total_steps = ctx.sched.steps();
    if trajectory.len() != total_steps + 1 {
        return Err(Error::Contract(format!(
            "trajectory has {} states, expected {}",
            trajectory.len(),
            total_steps + 1
        )));
    }
    if t == 0 || t > total_steps {
        return Err(Error::Contract(format!(
            "step {t} outside [1, {total_steps}]"
        )));
    }
    if trajectory[t].dims() != dl_dx0.dims() {
        return Err(Error::shape(format!(
            "x_{t} {:?} vs dL/dx0 {:?}",
            trajectory[t].dims(),
            dl_dx0.dims()
        )));
    }
    let coef = ctx.sched.a_product(t - 1) * ctx.sched.coeffs(t)?.b;
    let classes: Vec<usize> = reqs.iter().map(|r| r.class_id).collect();
    let guidance = reqs
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?
        .guidance;
    let mut g = Graph::new();
    let xin = g.constant(trajectory[t].clone())?;
    let eps = guided_eps(
        &mut g,
        &ctx.net,
        Some(lora),
        xin,
        t,
        &classes,
        guidance,
        ctx.both_branches,
    )?;
    let cot = g.constant(dl_dx0.map(|v| v * F::c(coef)))?;
    let prod = g.mul(eps, cot)?;
    let s = g.sum(prod)?;
    let mut out = zero_grads(lora);
    out.accumulate(&g.backward(s)?, F::one());
    Ok(out)
}

/// Analytic gradient of the routed sampler: the sum of
/// [`manual_step_term`] over the plan steps.
pub fn drtune_gradient_manual<F: Real>(
    ctx: &ProbeContext<F>,
    lora: &LoraParams<F>,
    reqs: &[SampleRequest],
    trajectory: &[Tensor<F>],
    dl_dx0: &Tensor<F>,
    plan: &TrainStepPlan,
) -> Result<GradMap<F>> {
    if plan.total_steps + 1 != trajectory.len() {
        return Err(Error::Contract(format!(
            "plan for T = {} but trajectory has {} states",
            plan.total_steps,
            trajectory.len()
        )));
    }
    let mut out = zero_grads(lora);
    for &t in plan.steps() {
        out.accumulate(
            &manual_step_term(ctx, lora, reqs, trajectory, dl_dx0, t)?,
            F::one(),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLogEntry {
    pub step: usize,
    pub l_probe: f64,
    pub l_perc: f64,
    pub total: f64,
    pub t_start: usize,
    /// Mean detector fake probability of this step's (clamped) samples.
    pub score_mean: f64,
    /// Adapter gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeRun<F> {
    pub lora: LoraParams<F>,
    /// Every adapted image generated during the run, clamped, tagged
    /// `probe`, with seed, step and detector score in its metadata.
    pub samples: SplitDataset<F>,
    pub log: Vec<ProbeLogEntry>,
}

/// A probe run that hit a non-finite loss or gradient.
#[derive(Debug)]
pub struct ProbeAbort<F> {
    pub step: usize,
    /// Adapter state before the failing step.
    pub last_good: LoraParams<F>,
    /// Log entries of the completed steps.
    pub log: Vec<ProbeLogEntry>,
    pub error: Error,
}

impl<F> fmt::Display for ProbeAbort<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "probing aborted at step {}: {}", self.step, self.error)
    }
}

impl<F: fmt::Debug> std::error::Error for ProbeAbort<F> {}

impl<F> From<ProbeAbort<F>> for Error {
    fn from(a: ProbeAbort<F>) -> Self {
        Error::Training {
            step: a.step,
            detail: a.error.to_string(),
        }
    }
}

/// Clamp raw outputs and wrap them as tagged probe samples.
fn export_rows<F: Real>(
    ctx: &ProbeContext<F>,
    x: &Tensor<F>,
    reqs: &[SampleRequest],
    step: usize,
) -> Result<(Vec<ToyImage<F>>, f64)> {
    let s = ctx.detector.input_size;
    let clamped = x
        .map(|v| v.max(-F::one()).min(F::one()))
        .reshape(&[reqs.len(), s, s])?;
    let scores: Vec<f64> = ctx
        .detector
        .logits_batch(&clamped)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let items = reqs
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(i, (r, &score))| {
            Ok(ToyImage {
                pixels: Tensor::new(vec![s, s], clamped.row(i).to_vec())?,
                class_id: r.class_id,
                source: SourceTag::Probe,
                meta: SampleMeta {
                    seed: Some(r.seed),
                    score: Some(score),
                    step: Some(step),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((items, mean))
}

/// One round of probing: a single pass over `cfg.n_prompts` requests in
/// batches, one momentum update of the adapter per batch. The image of each
/// request is the one generated (before the update) at its step.
pub fn run_probe<F: Real>(
    ctx: &ProbeContext<F>,
    cfg: &ProbeConfig,
) -> std::result::Result<ProbeRun<F>, ProbeAbort<F>> {
    let mut net = ctx.net.clone();
    let targets: Vec<&str> = cfg.targets.iter().map(String::as_str).collect();
    let fail = |step, last_good: LoraParams<F>, log: &Vec<ProbeLogEntry>, error| ProbeAbort {
        step,
        last_good,
        log: log.clone(),
        error,
    };
    let mut lora = match cfg
        .validate()
        .and_then(|_| attach_lora(&mut net, cfg.rank, &targets, rng::derive(cfg.seed, "lora")))
    {
        Ok(l) => l,
        Err(e) => {
            let empty = LoraParams {
                rank: cfg.rank,
                alpha: cfg.rank as f64,
                targets: cfg.targets.clone(),
                params: Default::default(),
            };
            return Err(fail(0, empty, &Vec::new(), e));
        }
    };
    let mut ctx = ctx.clone();
    ctx.net = net;
    ctx.both_branches = cfg.both_branches;
    let reqs = cfg.requests(ctx.net.cfg.classes);
    let mut opt = Momentum::<F>::new(cfg.lr, cfg.momentum);
    let mut items = Vec::with_capacity(reqs.len());
    let mut log = Vec::new();
    for (step, batch) in reqs.chunks(cfg.batch).enumerate() {
        let outcome = cfg.plan(ctx.sched.steps(), step).and_then(|plan| {
            let o = probe_step(&ctx, &lora, batch, &plan)?;
            if !o.total.is_finite() {
                return Err(Error::Numeric(format!("probe loss {}", o.total)));
            }
            Ok((plan, o))
        });
        let (plan, o) = match outcome {
            Ok(v) => v,
            Err(e) => return Err(fail(step, lora, &log, e)),
        };
        let (rows, score_mean) = match export_rows(&ctx, &o.x_adapted, batch, step) {
            Ok(v) => v,
            Err(e) => return Err(fail(step, lora, &log, e)),
        };
        items.extend(rows);
        let grad_norm = o.grads.global_norm();
        log.push(ProbeLogEntry {
            step,
            l_probe: o.l_probe,
            l_perc: o.l_perc,
            total: o.total,
            t_start: plan.t_start,
            score_mean,
            grad_norm,
        });
        let mut grads = o.grads;
        if cfg.max_grad_norm > 0.0 && grad_norm > cfg.max_grad_norm {
            let mut scaled = GradMap::new();
            scaled.accumulate(&grads, F::c(cfg.max_grad_norm / grad_norm));
            grads = scaled;
        }
        let before = lora.clone();
        if let Err(e) = opt.step(&mut lora.params, &grads) {
            return Err(fail(step, before, &log, e));
        }
    }
    Ok(ProbeRun {
        lora,
        samples: SplitDataset {
            name: "probe".into(),
            seed: cfg.seed,
            items,
        },
        log,
    })
}

/// Replay requests with a given adapter, producing clamped probe samples
/// exactly as `run_probe` exports them.
pub fn replay_samples<F: Real>(
    ctx: &ProbeContext<F>,
    lora: &LoraParams<F>,
    reqs: &[SampleRequest],
    step: usize,
) -> Result<Vec<ToyImage<F>>> {
    let x = ctx.adapted_sample(lora, reqs)?;
    Ok(export_rows(ctx, &x, reqs, step)?.0)
}
