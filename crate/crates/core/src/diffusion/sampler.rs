use serde::{Deserialize, Serialize};

use super::{DenoiserNet, NoiseSchedule, Timesteps};
use crate::lora::LoraParams;
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// One generation request: class condition, guidance scale and the seed of
/// its initial latent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub class_id: usize,
    pub guidance: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SampleOutput<F> {
    /// `[B, H·W]`, unclamped.
    pub x0: Tensor<F>,
    /// `trajectory[t] = x_t` for `t = 0..=t_start`.
    pub trajectory: Option<Vec<Tensor<F>>>,
}

/// Which network calls carry gradient during a routed sampling pass.
#[derive(Clone, Copy, Debug)]
pub struct GradRouting<'a> {
    /// Steps whose network call is recorded (input detached).
    pub steps: &'a [usize],
    /// Route gradient through the unconditional guidance branch as well.
    pub both_branches: bool,
}

impl<'a> GradRouting<'a> {
    pub fn new(steps: &'a [usize]) -> Self {
        Self {
            steps,
            both_branches: true,
        }
    }

    pub const NONE: GradRouting<'static> = GradRouting {
        steps: &[],
        both_branches: true,
    };
}

/// `x_T ~ N(0, I)`, one row per request, from the request seed.
pub fn initial_latent<F: Real>(reqs: &[SampleRequest], pixels: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(reqs.len() * pixels);
    for r in reqs {
        let mut g = rng::rng(rng::derive(r.seed, "latent"));
        data.extend(rng::normal_vec::<F>(&mut g, pixels, 1.0));
    }
    Tensor::new(vec![reqs.len(), pixels], data)
}

fn step_noise<F: Real>(reqs: &[SampleRequest], t: usize, pixels: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(reqs.len() * pixels);
    for r in reqs {
        let mut g = rng::rng(rng::derive_path(r.seed, "ddim-noise", t as u64));
        data.extend(rng::normal_vec::<F>(&mut g, pixels, 1.0));
    }
    Tensor::new(vec![reqs.len(), pixels], data)
}

fn shared_guidance(reqs: &[SampleRequest]) -> Result<f64> {
    let g = reqs
        .first()
        .ok_or_else(|| Error::Contract("empty sampling batch".into()))?
        .guidance;
    if reqs.iter().any(|r| r.guidance.to_bits() != g.to_bits()) {
        return Err(Error::Contract(
            "a sampling batch must share one guidance scale".into(),
        ));
    }
    if !(g >= 0.0 && g.is_finite()) {
        return Err(Error::Config(format!("guidance scale {g} must be >= 0")));
    }
    Ok(g)
}

/// `ε_u + g·(ε_c − ε_u)`; a single pass when `g` is 0 (unconditional) or 1
/// (conditional). With `both_branches = false` the unconditional pass is
/// detached.
#[allow(clippy::too_many_arguments)]
pub fn guided_eps<F: Real>(
    g: &mut Graph<F>,
    net: &DenoiserNet<F>,
    lora: Option<&LoraParams<F>>,
    x: Var,
    t: usize,
    classes: &[usize],
    guidance: f64,
    both_branches: bool,
) -> Result<Var> {
    let null = vec![net.cfg.null_class(); classes.len()];
    if guidance == 0.0 {
        return net.forward(g, lora, x, Timesteps::Same(t), &null);
    }
    let cond = net.forward(g, lora, x, Timesteps::Same(t), classes)?;
    if guidance == 1.0 {
        return Ok(cond);
    }
    let mut uncond = net.forward(g, lora, x, Timesteps::Same(t), &null)?;
    if !both_branches {
        uncond = g.stop_grad(uncond);
    }
    let d = g.sub(cond, uncond)?;
    let d = g.scale(d, F::c(guidance))?;
    g.add(uncond, d)
}

fn eps_value<F: Real>(
    net: &DenoiserNet<F>,
    lora: Option<&LoraParams<F>>,
    x: &Tensor<F>,
    t: usize,
    classes: &[usize],
    guidance: f64,
) -> Result<Tensor<F>> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone())?;
    let e = guided_eps(&mut g, net, lora, xv, t, classes, guidance, true)?;
    Ok(g.value(e).clone())
}

fn check_start(sched: &NoiseSchedule, t_start: usize) -> Result<()> {
    if t_start == 0 || t_start > sched.steps() {
        return Err(Error::Contract(format!(
            "start step {t_start} outside [1, {}]",
            sched.steps()
        )));
    }
    Ok(())
}

/// Gradient-free DDIM from `x_start` at step `t_start` down to `x_0`.
pub fn denoise_values<F: Real>(
    net: &DenoiserNet<F>,
    lora: Option<&LoraParams<F>>,
    sched: &NoiseSchedule,
    x_start: Tensor<F>,
    t_start: usize,
    reqs: &[SampleRequest],
    record: bool,
) -> Result<SampleOutput<F>> {
    check_start(sched, t_start)?;
    let guidance = shared_guidance(reqs)?;
    let classes: Vec<usize> = reqs.iter().map(|r| r.class_id).collect();
    let pixels = net.cfg.pixels();
    let mut traj = record.then(|| vec![Tensor::zeros(&[0]); t_start + 1]);
    let mut x = x_start;
    for t in (1..=t_start).rev() {
        if let Some(tr) = traj.as_mut() {
            tr[t] = x.clone();
        }
        let c = sched.coeffs(t)?;
        let eps = eps_value(net, lora, &x, t, &classes, guidance)?;
        let (a, b, cc) = (F::c(c.a), F::c(c.b), F::c(c.c));
        let noise = if c.c != 0.0 {
            Some(step_noise::<F>(reqs, t, pixels)?)
        } else {
            None
        };
        let data: Vec<F> = x
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (xv, ev))| {
                let v = a * *xv + b * *ev;
                match &noise {
                    Some(n) => v + cc * n.data()[i],
                    None => v,
                }
            })
            .collect();
        x = Tensor::new(x.dims().to_vec(), data)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sampler diverged at step {t}")));
        }
    }
    if let Some(tr) = traj.as_mut() {
        tr[0] = x.clone();
    }
    Ok(SampleOutput {
        x0: x,
        trajectory: traj,
    })
}

/// DDIM recorded on `g` with the network input detached at every step:
/// `x_{t-1} = a_t·x_t + b_t·ε̂(sg(x_t), t)`. Network calls at
/// `routing.steps` are recorded with gradient; all others are evaluated on a
/// scratch graph and enter as constants. The `c_t·ε` term is always a
/// constant. Returns `x_0` (unclamped).
#[allow(clippy::too_many_arguments)]
pub fn denoise_graph<F: Real>(
    g: &mut Graph<F>,
    net: &DenoiserNet<F>,
    lora: Option<&LoraParams<F>>,
    sched: &NoiseSchedule,
    x_start: Var,
    t_start: usize,
    reqs: &[SampleRequest],
    routing: GradRouting<'_>,
    mut trajectory: Option<&mut Vec<Tensor<F>>>,
) -> Result<Var> {
    check_start(sched, t_start)?;
    if let Some(&bad) = routing.steps.iter().find(|&&s| s == 0 || s > sched.steps()) {
        return Err(Error::Contract(format!(
            "gradient step {bad} outside [1, {}]",
            sched.steps()
        )));
    }
    let guidance = shared_guidance(reqs)?;
    let classes: Vec<usize> = reqs.iter().map(|r| r.class_id).collect();
    let pixels = net.cfg.pixels();
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.clear();
        tr.resize(t_start + 1, Tensor::zeros(&[0]));
    }
    let mut x = x_start;
    for t in (1..=t_start).rev() {
        if let Some(tr) = trajectory.as_deref_mut() {
            tr[t] = g.value(x).clone();
        }
        let c = sched.coeffs(t)?;
        let eps = if routing.steps.contains(&t) && g.grad_enabled() {
            let xin = g.stop_grad(x);
            g.note_activation();
            guided_eps(
                g,
                net,
                lora,
                xin,
                t,
                &classes,
                guidance,
                routing.both_branches,
            )?
        } else {
            let v = eps_value(net, lora, g.value(x), t, &classes, guidance)?;
            g.constant(v)?
        };
        let ax = g.scale(x, F::c(c.a))?;
        let be = g.scale(eps, F::c(c.b))?;
        x = g.add(ax, be)?;
        if c.c != 0.0 {
            let n = g.constant(step_noise::<F>(reqs, t, pixels)?)?;
            let cn = g.scale(n, F::c(c.c))?;
            x = g.add(x, cn)?;
        }
    }
    if let Some(tr) = trajectory {
        tr[0] = g.value(x).clone();
    }
    Ok(x)
}

const CHUNK: usize = 64;

/// Plain sampling from `x_T` for every request. Requests are processed in
/// chunks of consecutive equal guidance; rows are independent, so results do
/// not depend on chunking.
pub fn sample<F: Real>(
    net: &DenoiserNet<F>,
    lora: Option<&LoraParams<F>>,
    sched: &NoiseSchedule,
    reqs: &[SampleRequest],
    record: bool,
) -> Result<SampleOutput<F>> {
    if reqs.is_empty() {
        return Err(Error::Contract("no sampling requests".into()));
    }
    for r in reqs {
        if r.class_id >= net.cfg.classes {
            return Err(Error::Contract(format!(
                "class {} outside [0, {})",
                r.class_id, net.cfg.classes
            )));
        }
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < reqs.len() {
        let mut end = start + 1;
        while end < reqs.len()
            && end - start < CHUNK
            && reqs[end].guidance.to_bits() == reqs[start].guidance.to_bits()
        {
            end += 1;
        }
        chunks.push(start..end);
        start = end;
    }
    let pixels = net.cfg.pixels();
    let outs = crate::par::parallel_map(&chunks, |range| {
        let part = &reqs[range.clone()];
        let x_t = initial_latent::<F>(part, pixels)?;
        denoise_values(net, lora, sched, x_t, sched.steps(), part, record)
    })?;
    let mut x0 = Vec::with_capacity(reqs.len() * pixels);
    let mut traj: Option<Vec<Vec<F>>> = record.then(|| vec![Vec::new(); sched.steps() + 1]);
    for o in outs {
        x0.extend_from_slice(o.x0.data());
        if let (Some(all), Some(tr)) = (traj.as_mut(), o.trajectory) {
            for (t, xt) in tr.into_iter().enumerate() {
                all[t].extend_from_slice(xt.data());
            }
        }
    }
    let trajectory = match traj {
        Some(all) => Some(
            all.into_iter()
                .map(|d| Tensor::new(vec![reqs.len(), pixels], d))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(SampleOutput {
        x0: Tensor::new(vec![reqs.len(), pixels], x0)?,
        trajectory,
    })
}
