//! Initialisers and first-order optimizers over [`ParamStore`]s.

use std::collections::HashMap;

use crate::rng::Rng;
use crate::tensor::{GradMap, ParamStore, Tensor};
use crate::{Error, Real, Result};

/// Kaiming-style normal init for a weight with `fan_in` inputs.
pub fn init_weight<F: Real>(dims: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<F> {
    Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn add_linear<F: Real>(
    p: &mut ParamStore<F>,
    name: &str,
    inp: usize,
    out: usize,
    rng: &mut Rng,
) -> Result<()> {
    p.insert(format!("{name}.w"), init_weight(&[out, inp], inp, rng))?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[out]))
}

pub fn add_conv<F: Real>(
    p: &mut ParamStore<F>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<()> {
    p.insert(
        format!("{name}.w"),
        init_weight(&[cout, cin, k, k], cin * k * k, rng),
    )?;
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

fn check_finite<F: Real>(grads: &GradMap<F>) -> Result<()> {
    for (k, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{k}`")));
        }
    }
    Ok(())
}

/// Adam with bias correction; used for pretraining.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradMap<F>) -> Result<()> {
        check_finite(grads)?;
        self.step += 1;
        let (b1, b2) = (F::c(self.beta1), F::c(self.beta2));
        let c1 = F::c(1.0 - self.beta1.powi(self.step));
        let c2 = F::c(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (F::c(self.lr), F::c(self.eps));
        for (name, g) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            let mut w = (**params.get(name)?).clone();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); g.numel()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); g.numel()]);
            for (((wi, gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * *gi;
                *vi = b2 * *vi + (F::one() - b2) * *gi * *gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *wi -= lr * mh / (vh.sqrt() + eps);
            }
            params.set(name, w)?;
        }
        Ok(())
    }
}

/// Heavy-ball momentum SGD without weight decay.
#[derive(Debug, Clone)]
pub struct Momentum<F> {
    pub lr: f64,
    pub momentum: f64,
    buf: HashMap<String, Vec<F>>,
}

impl<F: Real> Momentum<F> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            buf: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradMap<F>) -> Result<()> {
        check_finite(grads)?;
        let (lr, mu) = (F::c(self.lr), F::c(self.momentum));
        for (name, g) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            let mut w = (**params.get(name)?).clone();
            let b = self
                .buf
                .entry(name.to_string())
                .or_insert_with(|| vec![F::zero(); g.numel()]);
            for ((wi, gi), bi) in w.data_mut().iter_mut().zip(g.data()).zip(b.iter_mut()) {
                *bi = mu * *bi + *gi;
                *wi -= lr * *bi;
            }
            params.set(name, w)?;
        }
        Ok(())
    }
}
