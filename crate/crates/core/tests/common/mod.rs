#![allow(dead_code)]

use probekit::detector::DetectorNet;
use probekit::diffusion::{
    make_schedule, DenoiserConfig, DenoiserNet, NoiseSchedule, SampleRequest,
};
use probekit::lora::{attach_lora, b_name, LoraParams};
use probekit::probe::{PerceptualExtractor, ProbeContext};
use probekit::rng;
use probekit::tensor::Tensor;
use probekit::Real;

pub mod criteria;
pub mod fd;

pub const SIZE: usize = 8;
pub const CLASSES: usize = 2;

pub fn tiny_net<F: Real>(
    steps: usize,
    hidden: usize,
    seed: u64,
) -> (DenoiserNet<F>, NoiseSchedule) {
    let sched = make_schedule(steps, 1e-4, 0.2, 0.0).unwrap();
    let cfg = DenoiserConfig {
        image_size: SIZE,
        classes: CLASSES,
        hidden,
        time_freqs: 4,
    };
    (DenoiserNet::new(cfg, &sched, seed).unwrap(), sched)
}

/// Attach an adapter and give B random entries so gradients reach A too.
pub fn random_lora<F: Real>(net: &mut DenoiserNet<F>, rank: usize, seed: u64) -> LoraParams<F> {
    let mut lora = attach_lora(net, rank, &["hidden1", "hidden2"], seed).unwrap();
    let mut r = rng::rng(rng::derive(seed, "test-b"));
    for t in ["hidden1", "hidden2"] {
        let dims = lora.params.get(&b_name(t)).unwrap().dims().to_vec();
        lora.params
            .set(&b_name(t), Tensor::randn(&dims, 0.3, &mut r))
            .unwrap();
    }
    lora
}

pub fn tiny_context<F: Real>(
    steps: usize,
    seed: u64,
    lambda: f64,
) -> (ProbeContext<F>, LoraParams<F>) {
    let (mut net, sched) = tiny_net::<F>(steps, 8, seed);
    let base = net.clone();
    let lora = random_lora(&mut net, 2, seed);
    let det = DetectorNet::new(SIZE, seed).unwrap();
    let ext = PerceptualExtractor::new(SIZE, seed).unwrap();
    (ProbeContext::new(&base, &sched, &det, &ext, lambda), lora)
}

pub fn requests(n: usize, seed: u64, guidance: f64) -> Vec<SampleRequest> {
    (0..n)
        .map(|i| SampleRequest {
            class_id: i % CLASSES,
            guidance,
            seed: rng::derive_index(seed, i as u64),
        })
        .collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
