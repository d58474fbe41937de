//! The ten acceptance criteria, one PASS/FAIL line each. The end-to-end
//! ones run the default desk configuration for seeds 1..=5, about four
//! minutes per seed, so the target is opt-in:
//!
//! ```text
//! cargo test --test acceptance -- --ignored
//! ```

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::criteria;
use probekit::detector::DetectorNet;
use probekit::diffusion::Generator;
use probekit::eval::{Metric, MetricsReport};
use probekit::pipeline::{run_stage, RunConfig, Stage};
use probekit::probe::{run_probe, PerceptualExtractor, ProbeContext, ProbeLogEntry};
use probekit::rng;
use probekit::tensor::Tensor;
use probekit::toydata::SplitDataset;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Fraction of the probe log averaged as the "final" perceptual loss.
const TAIL: f64 = 0.1;

/// Writes straight to the process stderr so lines survive output capture.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

struct Verdict {
    id: u8,
    ok: bool,
    line: String,
}

fn criterion(id: u8, name: &str, checks: &[&dyn Fn() -> String]) -> Verdict {
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    for check in checks {
        match catch_unwind(AssertUnwindSafe(check)) {
            Ok(note) => notes.push(note),
            Err(p) => {
                ok = false;
                notes.push(format!("FAILED: {}", panic_text(p)));
            }
        }
    }
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!(
        "[{verdict}] criterion {id:>2} {name} ({:.1}s): {}",
        start.elapsed().as_secs_f64(),
        notes.join("; ")
    );
    report(&line);
    Verdict { id, ok, line }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn score_mean(data: &SplitDataset<f32>) -> f64 {
    mean(data.items.iter().map(|i| i.meta.score.expect("scored sample")))
}

fn tail_perc(log: &[ProbeLogEntry]) -> f64 {
    let n = ((log.len() as f64 * TAIL).ceil() as usize).max(1);
    mean(log[log.len() - n..].iter().map(|e| e.l_perc))
}

/// Every non-manifest file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !matches!(
                p.file_name().unwrap().to_str().unwrap(),
                "manifest.json" | "config.toml"
            ) {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// One seed of the desk experiment: the default run-all, plus a λ = 0
/// probe run against the same generator, critic, extractor and prompts.
struct SeedRun {
    seed: u64,
    run_dir: PathBuf,
    variant_gain: f64,
    base_drop: f64,
    perc_lambda1: f64,
    perc_lambda0: f64,
    reduction_lambda1: f64,
    reduction_lambda0: f64,
    base_mean: f64,
    probe_mean_lambda0: f64,
    frozen: bool,
}

fn desk_config(seed: u64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.io.out_dir = out.to_path_buf();
    cfg
}

fn run_seed(seed: u64, out: &Path) -> SeedRun {
    let cfg = desk_config(seed, out);
    run_stage(&cfg, Stage::RunAll).unwrap();
    let run = cfg.run_dir();

    let metrics = MetricsReport::read(&run.join("evaluate/metrics.csv")).unwrap();
    let bacc = |tag: &str, param: &str| {
        metrics
            .find("test", tag, Metric::Bacc, param)
            .unwrap_or_else(|| panic!("missing bAcc {tag} {param}"))
    };
    let variant_gain = 100.0 * (bacc("gen_variant", "finetuned") - bacc("gen_variant", "pretrained"));
    let base_drop = 100.0 * (bacc("gen_base", "pretrained") - bacc("gen_base", "finetuned"));

    let probe_dir = run.join(Stage::Probe.name());
    let log1: Vec<ProbeLogEntry> =
        serde_json::from_slice(&std::fs::read(probe_dir.join("log_r0_c0.json")).unwrap()).unwrap();
    let samples1 = SplitDataset::<f32>::load(&probe_dir.join("samples_r0_c0.ptar")).unwrap();
    let base1 = SplitDataset::<f32>::load(&probe_dir.join("base_r0_c0.ptar")).unwrap();

    // The same frozen models and prompt stream the pipeline probed with.
    let stage_seed = |purpose: &str| rng::derive(rng::derive(cfg.seed, Stage::Probe.name()), purpose);
    let generator = Generator::<f32>::load(&run.join("pretrain-generator/generator.ptar")).unwrap();
    let det = DetectorNet::<f32>::load(&run.join("pretrain-detector/detector.ptar")).unwrap();
    let ext = PerceptualExtractor::<f32>::new(cfg.data.image_size, stage_seed("extractor")).unwrap();
    let mut pcfg = cfg.probe_config(rng::derive_index(rng::derive_index(stage_seed("run"), 0), 0));
    pcfg.lambda = 0.0;
    let ctx = ProbeContext::new(&generator.net, &generator.sched, &det, &ext, 0.0);
    let before = ctx.clone();
    let run0 = run_probe(&ctx, &pcfg).unwrap_or_else(|abort| panic!("λ=0 probe aborted: {abort}"));
    let frozen = ctx.net.params.bit_identical(&before.net.params)
        && ctx.detector.params.bit_identical(&before.detector.params)
        && ctx.extractor.params.bit_identical(&before.extractor.params);

    let s = cfg.data.image_size;
    let reqs = pcfg.requests(cfg.data.classes);
    let base_x = ctx.base_sample(&reqs).unwrap();
    let base_images: Vec<Tensor<f32>> = (0..reqs.len())
        .map(|i| Tensor::new(vec![s, s], base_x.row(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&Tensor<f32>> = base_images.iter().collect();
    let base_mean = mean(det.predict_many(&refs).unwrap());
    // Same prompts and critic as the pipeline's paired base samples.
    assert_eq!(base_mean.to_bits(), score_mean(&base1).to_bits(), "seed {seed}: base pairing differs");

    let probe_mean_lambda0 = score_mean(&run0.samples);
    SeedRun {
        seed,
        run_dir: run,
        variant_gain,
        base_drop,
        perc_lambda1: tail_perc(&log1),
        perc_lambda0: tail_perc(&run0.log),
        reduction_lambda1: score_mean(&base1) - score_mean(&samples1),
        reduction_lambda0: base_mean - probe_mean_lambda0,
        base_mean,
        probe_mean_lambda0,
        frozen,
    }
}

#[test]
#[ignore = "end-to-end desk experiment (~20 min); run with --ignored"]
fn acceptance_criteria() {
    // Failures are caught and summarised per criterion; keep the default
    // hook's backtraces out of the report.
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut results = Vec::new();

    results.push(criterion(1, "manual step-wise gradient equals autodiff", &[&criteria::drtune_oracle]));
    results.push(criterion(2, "finite-difference suite", &[&|| {
        let cases = common::fd::all_cases();
        let mut worst = (0.0f64, String::new());
        for case in &cases {
            let err = case.worst_error();
            assert!(err < common::fd::TOL, "{}: max rel err {err:e}", case.label);
            if err >= worst.0 {
                worst = (err, case.label.clone());
            }
        }
        format!(
            "{} cases × {} instances, worst {:.2e} ({})",
            cases.len(),
            common::fd::INSTANCES,
            worst.0,
            worst.1
        )
    }]));
    results.push(criterion(4, "schedule and sampler identities", &[
        &criteria::schedule_identities,
        &criteria::one_step_inversion,
        &criteria::zero_lora_is_bit_identical,
    ]));
    results.push(criterion(5, "metric oracles", &[&criteria::metric_oracles, &criteria::ap_monotone_invariance]));
    results.push(criterion(9, "augmentation identities and PGD budgets", &[
        &criteria::augment_identities,
        &criteria::pgd_budgets,
    ]));

    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        match catch_unwind(AssertUnwindSafe(|| run_seed(seed, &root.path().join(format!("seed{seed}"))))) {
            Ok(r) => {
                report(&format!(
                    "  seed {seed} ({:.0}s): variant {:+.2} pts, base {:+.2} pts, score base {:.4} → λ0 {:.4}, \
                     L_perc λ1 {:.3e} / λ0 {:.3e}, reduction λ1 {:.4} / λ0 {:.4}",
                    start.elapsed().as_secs_f64(),
                    r.variant_gain,
                    -r.base_drop,
                    r.base_mean,
                    r.probe_mean_lambda0,
                    r.perc_lambda1,
                    r.perc_lambda0,
                    r.reduction_lambda1,
                    r.reduction_lambda0,
                ));
                runs.push(r);
            }
            Err(p) => report(&format!("  seed {seed}: run failed: {}", panic_text(p))),
        }
    }
    let all_seeds = || assert_eq!(runs.len(), SEEDS.len(), "not every seed completed");

    results.push(criterion(3, "detachment", &[
        &criteria::empty_plan_is_zero,
        &criteria::step_additivity,
        &|| {
            all_seeds();
            assert!(runs.iter().all(|r| r.frozen), "a frozen model changed during probing");
            format!("generator, critic and extractor bit-identical across {} full probe runs", runs.len())
        },
    ]));
    results.push(criterion(6, "probing lowers fake-probability (λ = 0)", &[&|| {
        all_seeds();
        let lower = runs.iter().filter(|r| r.probe_mean_lambda0 < r.base_mean).count();
        assert_eq!(lower, SEEDS.len(), "lower in {lower}/5 seeds");
        format!("lower in {lower}/5 seeds")
    }]));
    results.push(criterion(7, "λ trade-off direction", &[&|| {
        all_seeds();
        let perc = runs.iter().filter(|r| r.perc_lambda1 < r.perc_lambda0).count();
        let red = runs.iter().filter(|r| r.reduction_lambda0 >= r.reduction_lambda1).count();
        assert_eq!(perc, SEEDS.len(), "final L_perc lower at λ=1 in {perc}/5 seeds");
        assert!(red >= 4, "reduction larger at λ=0 in {red}/5 seeds");
        format!("L_perc λ1 < λ0 in {perc}/5; reduction λ0 ≥ λ1 in {red}/5")
    }]));
    results.push(criterion(8, "end-to-end generalization", &[&|| {
        all_seeds();
        let gain = mean(runs.iter().map(|r| r.variant_gain));
        let drop = mean(runs.iter().map(|r| r.base_drop));
        let note = format!("variant bAcc {gain:+.2} pts (need ≥ +2.00), base bAcc {:+.2} pts (need ≥ −1.00)", -drop);
        assert!(gain >= 2.0 && drop <= 1.0, "{note}");
        note
    }]));
    results.push(criterion(10, "reproducibility across runs and thread counts", &[&|| {
        let first = runs.iter().find(|r| r.seed == SEEDS[0]).expect("seed run missing");
        let other = root.path().join("rerun");
        let out = Command::new(env!("CARGO_BIN_EXE_probekit"))
            .args(["--seed", &SEEDS[0].to_string(), "--out", other.to_str().unwrap(), "--stage", "run-all"])
            .env("PROBEKIT_THREADS", "3")
            .output()
            .unwrap();
        assert!(out.status.success(), "rerun failed: {}", String::from_utf8_lossy(&out.stderr));
        let a = snapshot(&first.run_dir);
        let b = snapshot(&other.join(first.run_dir.file_name().unwrap()));
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "artifact sets differ");
        let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
        assert!(differing.is_empty(), "differing files: {differing:?}");
        format!("{} files byte-identical (in-process default threads vs CLI with 3 threads)", a.len())
    }]));

    std::panic::set_hook(default_hook);
    results.sort_by_key(|v| v.id);
    report("acceptance summary:");
    for v in &results {
        report(&v.line);
    }
    let passed = results.iter().filter(|v| v.ok).count();
    report(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "some acceptance criteria failed; see the lines above");
}
