//! Checks shared by the module suites and the acceptance run. Each panics
//! on failure and returns a one-line summary of what it measured.

use probekit::augment::{
    add_noise, crop, flip_horizontal, gaussian_blur, jitter, pgd_latent, pgd_pixel, random_augment,
    resize, rotate90, AugmentPolicy, PgdConfig, PgdSpace,
};
use probekit::detector::DetectorNet;
use probekit::diffusion::{denoise_values, make_schedule, sample, DenoiserConfig, DenoiserNet};
use probekit::eval::{average_precision, balanced_accuracy, ScoredSample};
use probekit::lora::attach_lora;
use probekit::probe::{
    drtune_gradient_manual, make_train_steps, manual_step_term, max_start, objective_grad_x0,
    probe_step, StepCount, TrainStepPlan,
};
use probekit::rng;
use probekit::tensor::Tensor;
use probekit::toydata::SourceTag;
use rand::Rng as _;

use super::{rel, requests, tiny_context, tiny_net, CLASSES, SIZE};

pub const ORACLE_TOL: f64 = 1e-6;

/// Every plan the strided generator can produce for (T, K).
pub fn all_plans(total: usize, k: usize) -> Vec<TrainStepPlan> {
    let mut out = Vec::new();
    for ts in 1..=max_start(total, k) {
        for count in [StepCount::Inclusive, StepCount::Exact] {
            out.push(make_train_steps(total, k, Some(ts), count, &mut rng::rng(0)).unwrap());
        }
    }
    out
}

/// Relative gap between autodiff through the detached sampler and the
/// step-wise manual gradient.
pub fn oracle_error(
    total: usize,
    seed: u64,
    plan: &TrainStepPlan,
    guidance: f64,
    both: bool,
) -> f64 {
    let (mut ctx, lora) = tiny_context::<f64>(total, seed, 0.7);
    ctx.both_branches = both;
    let reqs = requests(3, seed, guidance);
    let step = probe_step(&ctx, &lora, &reqs, plan).unwrap();
    let dl = objective_grad_x0(&ctx, &step.x_adapted, &step.x_base).unwrap();
    let manual = drtune_gradient_manual(&ctx, &lora, &reqs, &step.trajectory, &dl, plan).unwrap();
    assert!(step.grads.global_norm() > 0.0 || plan.steps().is_empty());
    step.grads.max_rel_diff(&manual, 1e-12)
}

pub fn drtune_oracle() -> String {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for total in [2, 3, 5] {
        for k in 1..=total {
            for seed in [11, 12, 13] {
                for plan in all_plans(total, k) {
                    worst = worst.max(oracle_error(total, seed, &plan, 2.0, true));
                    cases += 1;
                }
            }
        }
    }
    assert!(cases > 50);
    assert!(
        worst < ORACLE_TOL,
        "max rel err {worst:e} over {cases} cases"
    );
    format!("{cases} cases, max rel err {worst:.2e}")
}

/// Dropping one step from a plan removes exactly that step's term, both
/// from autodiff and from the manual sum.
pub fn step_additivity() -> String {
    let (mut worst_auto, mut worst_manual) = (0.0f64, 0.0f64);
    for total in [2, 3, 5] {
        for seed in [11, 12, 13] {
            let (ctx, lora) = tiny_context::<f64>(total, seed, 0.5);
            let reqs = requests(3, seed, 2.0);
            let full = TrainStepPlan::custom(total, (1..=total).collect()).unwrap();
            let step = probe_step(&ctx, &lora, &reqs, &full).unwrap();
            let dl = objective_grad_x0(&ctx, &step.x_adapted, &step.x_base).unwrap();
            let m_full =
                drtune_gradient_manual(&ctx, &lora, &reqs, &step.trajectory, &dl, &full).unwrap();
            for drop in 1..=total {
                let rest =
                    TrainStepPlan::custom(total, (1..=total).filter(|&s| s != drop).collect())
                        .unwrap();
                let term =
                    manual_step_term(&ctx, &lora, &reqs, &step.trajectory, &dl, drop).unwrap();

                let reduced = probe_step(&ctx, &lora, &reqs, &rest).unwrap();
                let mut diff = step.grads.clone();
                diff.accumulate(&reduced.grads, -1.0);
                worst_auto = worst_auto.max(diff.max_rel_diff(&term, 1e-9));

                let mut sum =
                    drtune_gradient_manual(&ctx, &lora, &reqs, &step.trajectory, &dl, &rest)
                        .unwrap();
                sum.accumulate(&term, 1.0);
                worst_manual = worst_manual.max(sum.max_rel_diff(&m_full, 1e-12));
            }
        }
    }
    assert!(
        worst_auto < ORACLE_TOL,
        "autodiff additivity {worst_auto:e}"
    );
    assert!(worst_manual < 1e-12, "manual additivity {worst_manual:e}");
    format!("additivity autodiff {worst_auto:.1e}, manual {worst_manual:.1e}")
}

pub fn empty_plan_is_zero() -> String {
    let (ctx, lora) = tiny_context::<f64>(5, 2, 1.0);
    let reqs = requests(2, 2, 2.0);
    let plan = TrainStepPlan::empty(5);
    let step = probe_step(&ctx, &lora, &reqs, &plan).unwrap();
    assert!(step.grads.is_all_zero());
    assert_eq!(step.activations, 0);
    let dl = objective_grad_x0(&ctx, &step.x_adapted, &step.x_base).unwrap();
    let manual = drtune_gradient_manual(&ctx, &lora, &reqs, &step.trajectory, &dl, &plan).unwrap();
    assert!(manual.is_all_zero());
    assert_eq!(manual.len(), lora.params.len());
    "empty plan: all-zero gradient".into()
}

pub fn schedule_identities() -> String {
    let mut worst = 0.0f64;
    for (steps, lo, hi) in [
        (1, 0.5, 0.5),
        (2, 1e-4, 0.05),
        (5, 1e-4, 0.05),
        (10, 1e-3, 0.2),
        (35, 1e-4, 0.05),
        (100, 1e-4, 0.02),
    ] {
        let s = make_schedule(steps, lo, hi, 0.0).unwrap();
        for t in 1..=steps {
            let c = s.coeffs(t).unwrap();
            assert_eq!(c.c, 0.0, "T={steps} t={t}");
            worst = worst.max(rel(c.a * s.alpha_bar(t).sqrt(), s.alpha_bar(t - 1).sqrt()));
        }
    }
    assert!(worst < 1e-12, "a_t identity {worst:e}");
    format!("c_t = 0, a_t identity max rel err {worst:.1e}")
}

/// With the output layer zeroed and its bias set to `x0`, the network's
/// ε estimate is the true noise, so one DDIM step from `q_sample(x0, 1, ε)`
/// must land back on `x0`.
pub fn one_step_inversion() -> String {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let beta = 0.02 + 0.05 * seed as f64;
        let sched = make_schedule(1, beta, beta, 0.0).unwrap();
        let cfg = DenoiserConfig {
            image_size: SIZE,
            classes: CLASSES,
            hidden: 8,
            time_freqs: 4,
        };
        let mut net = DenoiserNet::<f64>::new(cfg, &sched, seed).unwrap();
        let mut r = rng::rng(seed);
        let x0 = Tensor::<f64>::randn(&[SIZE * SIZE], 0.5, &mut r);
        net.params
            .set("out.w", Tensor::zeros(&[SIZE * SIZE, 8]))
            .unwrap();
        net.params.set("out.b", x0.clone()).unwrap();
        let eps = Tensor::<f64>::randn(&[SIZE * SIZE], 1.0, &mut r);
        let x1 = sched
            .q_sample(&x0, 1, &eps)
            .unwrap()
            .reshape(&[1, SIZE * SIZE])
            .unwrap();
        let out =
            denoise_values(&net, None, &sched, x1, 1, &requests(1, seed, 2.0), false).unwrap();
        for (a, b) in out.x0.data().iter().zip(x0.data()) {
            // Relative to the entry, floored so near-zero pixels are not judged on roundoff alone.
            let err = (a - b).abs() / b.abs().max(1e-3);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-6, "T=1 inversion {worst:e}");
    format!("T=1 inversion max rel err {worst:.1e}")
}

pub fn zero_lora_is_bit_identical() -> String {
    let (net, sched) = tiny_net::<f32>(6, 16, 3);
    let reqs = requests(10, 9, 2.0);
    let plain = sample(&net, None, &sched, &reqs, true).unwrap();
    let mut adapted = net.clone();
    let lora = attach_lora(&mut adapted, 4, &["hidden1", "hidden2", "in"], 5).unwrap();
    let with = sample(&adapted, Some(&lora), &sched, &reqs, true).unwrap();
    assert_eq!(plain.x0, with.x0);
    assert_eq!(plain.trajectory, with.trajectory);
    "zero-init adapter: sampling bit-identical".into()
}

pub fn scored(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            ScoredSample::new(
                s,
                l,
                if l == 1 {
                    SourceTag::GenBase
                } else {
                    SourceTag::Real
                },
            )
        })
        .collect()
}

/// Confusion matrix by explicit enumeration of all four cells.
pub fn brute_bacc(scores: &[f64], labels: &[u8], thr: f64) -> f64 {
    let cell = |label: u8, fake: bool| {
        scores
            .iter()
            .zip(labels)
            .filter(|&(&s, &l)| l == label && (s > thr) == fake)
            .count() as f64
    };
    let (tp, fneg, tn, fp) = (cell(1, true), cell(1, false), cell(0, false), cell(0, true));
    0.5 * (tp / (tp + fneg) + tn / (tn + fp))
}

/// Mean over positives of precision at that positive's own score
/// (scores are distinct, so the threshold set is unambiguous).
pub fn brute_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    pos.iter()
        .map(|&t| {
            let above = scores.iter().filter(|&&s| s >= t).count() as f64;
            let hits = pos.iter().filter(|&&s| s >= t).count() as f64;
            hits / above
        })
        .sum::<f64>()
        / pos.len() as f64
}

pub fn random_set(r: &mut rng::Rng) -> (Vec<f64>, Vec<u8>) {
    let n = r.random_range(2..=50);
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| r.random::<f64>()).collect();
    (scores, labels)
}

pub fn metric_oracles() -> String {
    let mut r = rng::rng(42);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (scores, labels) = random_set(&mut r);
        let s = scored(&scores, &labels);
        for thr in [0.5, 0.25, 0.9] {
            worst = worst.max(
                (balanced_accuracy(&s, thr).unwrap() - brute_bacc(&scores, &labels, thr)).abs(),
            );
        }
        worst = worst.max((average_precision(&s).unwrap() - brute_ap(&scores, &labels)).abs());
    }
    assert!(worst <= 1e-12, "metric gap {worst:e}");
    format!("200 sets, max abs gap {worst:.1e}")
}

pub fn ap_monotone_invariance() -> String {
    let mut r = rng::rng(7);
    let transforms: [fn(f64) -> f64; 4] = [
        |x| x.powi(3),
        |x| (x / (1.0 - x)).ln(),
        |x| 10.0 * x - 3.0,
        |x| x.exp(),
    ];
    for trial in 0..50 {
        let (scores, labels) = random_set(&mut r);
        let base = average_precision(&scored(&scores, &labels)).unwrap();
        let f = transforms[trial % 4];
        let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
        assert_eq!(
            average_precision(&scored(&moved, &labels)).unwrap(),
            base,
            "trial {trial}"
        );
    }
    "AP invariant over 50 monotone transforms".into()
}

pub fn augment_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    Tensor::<f64>::randn(&[h, w], 0.4, &mut rng::rng(seed)).map(|v| v.clamp(-1.0, 1.0))
}

pub fn augment_identities() -> String {
    for seed in 0..20 {
        let x = augment_image(seed, 9 + seed as usize % 5, 8 + seed as usize % 7);
        assert_eq!(gaussian_blur(&x, 0.0).unwrap(), x);
        assert_eq!(resize(&x, 1.0).unwrap(), x);
        assert_eq!(add_noise(&x, 0.0, &mut rng::rng(seed)).unwrap(), x);
        assert_eq!(jitter(&x, 0.0, 1.0).unwrap(), x);
        assert_eq!(rotate90(&x, 4).unwrap(), x);
        assert_eq!(flip_horizontal(&flip_horizontal(&x).unwrap()).unwrap(), x);
        let (h, w) = (x.dims()[0], x.dims()[1]);
        assert_eq!(crop(&x, 0, 0, h, w).unwrap(), x);
        assert_eq!(
            random_augment(&x, &AugmentPolicy::identity(), &mut rng::rng(seed)).unwrap(),
            x
        );
    }
    "identity parameters exact on 20 images".into()
}

/// 950 pixel-space and 50 latent-space PGD calls.
pub fn pgd_budgets() -> String {
    let mut worst = f64::NEG_INFINITY;
    let mut calls = 0;
    for i in 0..950u64 {
        let det = DetectorNet::<f64>::new(SIZE, i % 7).unwrap();
        let cfg = PgdConfig {
            eps: [0.0, 1.0 / 255.0, 4.0 / 255.0, 16.0 / 255.0][i as usize % 4],
            alpha: [1.0 / 255.0, 0.5 / 255.0, 1.0 / 255.0, 6.0 / 255.0][i as usize % 4],
            steps: 1 + i as usize % 5,
            space: PgdSpace::Pixel,
            latent_step_t: None,
        };
        let x = Tensor::<f64>::randn(&[3, SIZE, SIZE], 0.6, &mut rng::rng(i))
            .map(|v| v.clamp(-1.0, 1.0));
        let out = pgd_pixel(&x, &det, &cfg).unwrap();
        for row in 0..3 {
            let shift = x
                .row(row)
                .iter()
                .zip(out.images.row(row))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(shift - cfg.budget());
            assert!(shift <= cfg.budget() + 1e-12, "call {i}: {shift}");
            assert!(
                out.scores[row] <= out.initial_scores[row],
                "call {i} raised the score"
            );
        }
        assert!(out.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        calls += 1;
    }
    for i in 0..50u64 {
        let (net, sched) = tiny_net::<f64>(3, 8, i);
        let det = DetectorNet::<f64>::new(SIZE, i).unwrap();
        let cfg = PgdConfig {
            eps: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 3,
            space: PgdSpace::Latent,
            latent_step_t: [None, Some(1), Some(2)][i as usize % 3],
        };
        let out = pgd_latent(&net, &sched, &det, &requests(2, i, 2.0), &cfg).unwrap();
        worst = worst.max(out.max_shift - cfg.budget());
        assert!(
            out.max_shift <= cfg.budget() + 1e-12,
            "latent call {i}: {}",
            out.max_shift
        );
        for row in 0..2 {
            assert!(
                out.scores[row] <= out.initial_scores[row],
                "latent call {i} raised the score"
            );
        }
        calls += 1;
    }
    assert_eq!(calls, 1000);
    format!("{calls} PGD calls, max shift − budget {worst:.1e}")
}
