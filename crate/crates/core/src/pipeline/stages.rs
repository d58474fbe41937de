use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::aggregate::aggregate_samples;
use super::config::{GeneratorSection, Precision, RunConfig};
use super::manifest::{unix_now, RunManifest, StageRecord};
use crate::augment::{pgd_latent, pgd_pixel, PgdSpace};
use crate::detector::{finetune_mixed, pretrain, DetectorNet};
use crate::diffusion::{
    make_schedule, sample, train_denoiser, DenoiserNet, DenoiserTrainConfig, Generator,
    SampleRequest,
};
use crate::eval::{
    average_precision, balanced_accuracy, residual_spectrum, robustness_sweep, score_dataset,
    Metric, MetricsReport, RowContext,
};
use crate::probe::{run_probe, PerceptualExtractor, ProbeContext, ProbeLogEntry};
use crate::rng;
use crate::tensor::io::write_bytes;
use crate::tensor::Tensor;
use crate::toydata::{SampleMeta, SourceTag, SplitDataset, ToyDomain, ToyImage};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    PretrainGenerator,
    PretrainVariantGenerator,
    PretrainDetector,
    Probe,
    ExportSamples,
    FinetuneDetector,
    Evaluate,
    SweepRobustness,
    AnalyzeSpectrum,
    RunAll,
}

impl Stage {
    /// Every concrete stage, in an order compatible with the dependency graph.
    pub const PIPELINE: [Stage; 10] = [
        Stage::GenData,
        Stage::PretrainGenerator,
        Stage::PretrainVariantGenerator,
        Stage::PretrainDetector,
        Stage::Probe,
        Stage::ExportSamples,
        Stage::FinetuneDetector,
        Stage::Evaluate,
        Stage::SweepRobustness,
        Stage::AnalyzeSpectrum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::PretrainGenerator => "pretrain-generator",
            Stage::PretrainVariantGenerator => "pretrain-variant-generator",
            Stage::PretrainDetector => "pretrain-detector",
            Stage::Probe => "probe",
            Stage::ExportSamples => "export-samples",
            Stage::FinetuneDetector => "finetune-detector",
            Stage::Evaluate => "evaluate",
            Stage::SweepRobustness => "sweep-robustness",
            Stage::AnalyzeSpectrum => "analyze-spectrum",
            Stage::RunAll => "run-all",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::PIPELINE
            .into_iter()
            .chain([Stage::RunAll])
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                let all: Vec<&str> = Self::PIPELINE
                    .iter()
                    .map(|s| s.name())
                    .chain(["run-all"])
                    .collect();
                Error::Config(format!(
                    "unknown stage `{name}`; expected one of {}",
                    all.join(", ")
                ))
            })
    }

    /// Direct upstream stages. The variant generator feeds evaluation only;
    /// probing and fine-tuning never see it.
    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenData => &[],
            PretrainGenerator | PretrainVariantGenerator => &[GenData],
            PretrainDetector => &[GenData, PretrainGenerator],
            Probe => &[GenData, PretrainGenerator, PretrainDetector],
            ExportSamples => &[GenData, Probe],
            FinetuneDetector => &[GenData, PretrainDetector, Probe, ExportSamples],
            Evaluate => &[
                GenData,
                PretrainDetector,
                PretrainVariantGenerator,
                Probe,
                ExportSamples,
                FinetuneDetector,
            ],
            SweepRobustness => &[
                GenData,
                PretrainDetector,
                PretrainVariantGenerator,
                FinetuneDetector,
            ],
            AnalyzeSpectrum => &[
                GenData,
                PretrainGenerator,
                PretrainDetector,
                PretrainVariantGenerator,
                ExportSamples,
            ],
            RunAll => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The dependency graph, one line per stage in execution order.
pub fn explain() -> String {
    let mut out = String::new();
    for s in Stage::PIPELINE {
        let deps: Vec<&str> = s.deps().iter().map(|d| d.name()).collect();
        if deps.is_empty() {
            out.push_str(&format!("{s}\n"));
        } else {
            out.push_str(&format!("{s} <- {}\n", deps.join(", ")));
        }
    }
    out.push_str(&format!(
        "run-all = {}\n",
        Stage::PIPELINE.map(|s| s.name()).join(" -> ")
    ));
    out
}

/// Run one stage (or all of them) for `cfg`, returning the updated manifest.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<RunManifest> {
    cfg.validate()?;
    match cfg.io.precision {
        Precision::F32 => Runner::<f32>::open(cfg)?.run(stage),
        Precision::F64 => Runner::<f64>::open(cfg)?.run(stage),
    }
}

type Artifacts = BTreeMap<String, PathBuf>;

struct Runner<'a, F> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    manifest: RunManifest,
    _real: PhantomData<F>,
}

fn clamp_rows<F: Real>(x: &Tensor<F>, size: usize) -> Result<Vec<Tensor<F>>> {
    let n = x.dims()[0];
    (0..n)
        .map(|i| {
            Tensor::new(
                vec![size, size],
                x.row(i)
                    .iter()
                    .map(|v| v.max(-F::one()).min(F::one()))
                    .collect(),
            )
        })
        .collect()
}

fn requests_of<F: Real>(data: &SplitDataset<F>, guidance: f64) -> Result<Vec<SampleRequest>> {
    data.items
        .iter()
        .map(|i| {
            let seed = i
                .meta
                .seed
                .ok_or_else(|| Error::Format(format!("`{}` item without seed", data.name)))?;
            Ok(SampleRequest {
                class_id: i.class_id,
                guidance,
                seed,
            })
        })
        .collect()
}

fn tail_mean(log: &[ProbeLogEntry], f: impl Fn(&ProbeLogEntry) -> f64) -> f64 {
    let n = (log.len() / 10).max(1).min(log.len());
    log[log.len() - n..].iter().map(f).sum::<f64>() / n as f64
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &serde_json::to_vec_pretty(value)?)
}

fn scores_of<F: Real>(data: &SplitDataset<F>) -> Result<f64> {
    let s: Option<Vec<f64>> = data.items.iter().map(|i| i.meta.score).collect();
    let s = s.ok_or_else(|| Error::Format(format!("`{}` item without score", data.name)))?;
    Ok(s.iter().sum::<f64>() / s.len().max(1) as f64)
}

impl<'a, F: Real> Runner<'a, F> {
    fn open(cfg: &'a RunConfig) -> Result<Self> {
        let dir = cfg.run_dir();
        let hash = cfg.hash();
        let manifest = match RunManifest::load(&dir)? {
            Some(m) if m.config_hash != hash => {
                return Err(Error::Config(format!(
                    "{} holds run {} with config hash {}, this config hashes to {hash}; refusing to overwrite",
                    dir.display(),
                    m.run_id,
                    m.config_hash
                )))
            }
            Some(m) => m,
            None => {
                let p = match cfg.io.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                };
                RunManifest::new(cfg.run_id(), hash, p.into())
            }
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_bytes(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        Ok(Self {
            cfg,
            dir,
            manifest,
            _real: PhantomData,
        })
    }

    fn run(mut self, stage: Stage) -> Result<RunManifest> {
        if stage == Stage::RunAll {
            for s in Stage::PIPELINE {
                self.run_one(s)?;
            }
        } else {
            self.run_one(stage)?;
        }
        Ok(self.manifest)
    }

    fn run_one(&mut self, stage: Stage) -> Result<()> {
        let missing: Vec<&str> = stage
            .deps()
            .iter()
            .filter(|d| !self.manifest.stages.contains_key(d.name()))
            .map(|d| d.name())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Dependency {
                stage: missing.join(", "),
                detail: format!("`{stage}` needs their outputs; run them first"),
            });
        }
        for dep in stage.deps() {
            let rec = &self.manifest.stages[dep.name()];
            if let Some(rel) = rec.artifacts.values().find(|p| !self.dir.join(p).exists()) {
                return Err(Error::Dependency {
                    stage: dep.name().into(),
                    detail: format!("artifact {} is missing; rerun `{dep}`", rel.display()),
                });
            }
        }
        let started = unix_now();
        let sdir = self.dir.join(stage.name());
        if sdir.exists() {
            std::fs::remove_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        }
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        self.manifest.stages.remove(stage.name());
        let artifacts = match stage {
            Stage::GenData => self.gen_data()?,
            Stage::PretrainGenerator => {
                self.pretrain_generator(stage, &self.cfg.generator, SourceTag::GenBase)?
            }
            Stage::PretrainVariantGenerator => {
                let mut a = self.pretrain_generator(
                    stage,
                    &self.cfg.generator_variant,
                    SourceTag::GenVariant,
                )?;
                let generator = Generator::<F>::load(&self.dir.join(&a["generator"]))?;
                let fakes = self.generate(
                    &generator,
                    self.cfg.data.fake_test,
                    self.seed(stage, "fakes-test"),
                    SourceTag::GenVariant,
                )?;
                a.insert(
                    "fakes_test".into(),
                    self.save_data(stage, "fakes_test.ptar", &fakes)?,
                );
                a
            }
            Stage::PretrainDetector => self.pretrain_detector()?,
            Stage::Probe => self.probe()?,
            Stage::ExportSamples => self.export_samples()?,
            Stage::FinetuneDetector => self.finetune_detector()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::SweepRobustness => self.sweep_robustness()?,
            Stage::AnalyzeSpectrum => self.analyze_spectrum()?,
            Stage::RunAll => unreachable!("expanded by run"),
        };
        self.manifest.stages.insert(
            stage.name().into(),
            StageRecord {
                artifacts,
                inputs: stage.deps().iter().map(|d| d.name().to_string()).collect(),
                started_unix: started,
                finished_unix: unix_now(),
            },
        );
        self.manifest.save(&self.dir)
    }

    fn seed(&self, stage: Stage, purpose: &str) -> u64 {
        rng::derive(rng::derive(self.cfg.seed, stage.name()), purpose)
    }

    fn rel(stage: Stage, file: &str) -> PathBuf {
        Path::new(stage.name()).join(file)
    }

    fn artifact(&self, stage: Stage, role: &str) -> Result<PathBuf> {
        self.manifest
            .stages
            .get(stage.name())
            .and_then(|r| r.artifacts.get(role))
            .map(|p| self.dir.join(p))
            .ok_or_else(|| Error::Dependency {
                stage: stage.name().into(),
                detail: format!("no `{role}` artifact recorded"),
            })
    }

    fn data(&self, stage: Stage, role: &str) -> Result<SplitDataset<F>> {
        SplitDataset::load(&self.artifact(stage, role)?)
    }

    fn detector(&self, stage: Stage, role: &str) -> Result<DetectorNet<F>> {
        DetectorNet::load(&self.artifact(stage, role)?)
    }

    fn save_data(&self, stage: Stage, file: &str, data: &SplitDataset<F>) -> Result<PathBuf> {
        let rel = Self::rel(stage, file);
        data.save(&self.dir.join(&rel))?;
        Ok(rel)
    }

    fn save_detector(&self, stage: Stage, file: &str, det: &DetectorNet<F>) -> Result<PathBuf> {
        let rel = Self::rel(stage, file);
        det.save(&self.dir.join(&rel))?;
        Ok(rel)
    }

    fn save_json<T: Serialize>(&self, stage: Stage, file: &str, value: &T) -> Result<PathBuf> {
        let rel = Self::rel(stage, file);
        write_json(&self.dir.join(&rel), value)?;
        Ok(rel)
    }

    fn save_report(&self, stage: Stage, file: &str, report: &MetricsReport) -> Result<PathBuf> {
        let rel = Self::rel(stage, file);
        report.write(&self.dir.join(&rel))?;
        Ok(rel)
    }

    fn row_context(&self, stage: Stage) -> RowContext {
        RowContext {
            run_id: self.manifest.run_id.clone(),
            stage: stage.name().into(),
            seed: self.cfg.seed,
        }
    }

    /// `n` clamped samples, classes cycling, latent seeds indexed from `seed`.
    fn generate(
        &self,
        generator: &Generator<F>,
        n: usize,
        seed: u64,
        tag: SourceTag,
    ) -> Result<SplitDataset<F>> {
        let classes = generator.net.cfg.classes;
        let reqs: Vec<SampleRequest> = (0..n)
            .map(|i| SampleRequest {
                class_id: i % classes,
                guidance: generator.guidance,
                seed: rng::derive_index(seed, i as u64),
            })
            .collect();
        let out = sample(&generator.net, None, &generator.sched, &reqs, false)?;
        let images = clamp_rows(&out.x0, generator.net.cfg.image_size)?;
        let items = images
            .into_iter()
            .zip(&reqs)
            .map(|(pixels, r)| ToyImage {
                pixels,
                class_id: r.class_id,
                source: tag,
                meta: SampleMeta {
                    seed: Some(r.seed),
                    ..Default::default()
                },
            })
            .collect();
        Ok(SplitDataset {
            name: format!("{}-{}", generator.tag, n),
            seed,
            items,
        })
    }

    fn gen_data(&self) -> Result<Artifacts> {
        let s = Stage::GenData;
        let d = &self.cfg.data;
        let domain = ToyDomain {
            size: d.image_size,
            classes: d.classes,
            noise_std: d.noise_std,
        };
        let mut a = Artifacts::new();
        for (role, per_class) in [
            ("real_train", d.train_per_class),
            ("real_test", d.test_per_class),
            ("real_fresh", d.fresh_per_class),
        ] {
            let split: SplitDataset<F> = domain.make_split(per_class, self.seed(s, role), role)?;
            a.insert(
                role.into(),
                self.save_data(s, &format!("{role}.ptar"), &split)?,
            );
        }
        Ok(a)
    }

    fn pretrain_generator(
        &self,
        stage: Stage,
        section: &GeneratorSection,
        tag: SourceTag,
    ) -> Result<Artifacts> {
        let real = self.data(Stage::GenData, "real_train")?;
        let sched = make_schedule(
            section.steps,
            section.beta_start,
            section.beta_end,
            section.eta,
        )?;
        let net = DenoiserNet::<F>::new(
            section.net_config(&self.cfg.data),
            &sched,
            self.seed(stage, "init"),
        )?;
        let tcfg = DenoiserTrainConfig {
            steps: section.train_steps,
            lr: section.lr,
            batch: section.batch,
            cond_drop: section.cond_drop,
            seed: self.seed(stage, "train"),
        };
        let (net, report) = train_denoiser(net, &real, &sched, &tcfg)?;
        let generator = Generator {
            net,
            sched,
            guidance: section.guidance,
            tag: tag.as_str().into(),
        };
        let rel = Self::rel(stage, "generator.ptar");
        generator.save(&self.dir.join(&rel))?;
        let mut a = Artifacts::new();
        a.insert("generator".into(), rel);
        a.insert(
            "train_log".into(),
            self.save_json(stage, "train_log.json", &report.losses)?,
        );
        Ok(a)
    }

    fn pretrain_detector(&self) -> Result<Artifacts> {
        let s = Stage::PretrainDetector;
        let d = &self.cfg.data;
        let real = self.data(Stage::GenData, "real_train")?;
        let generator =
            Generator::<F>::load(&self.artifact(Stage::PretrainGenerator, "generator")?)?;
        let fakes_train = self.generate(
            &generator,
            d.fake_train,
            self.seed(s, "fakes-train"),
            SourceTag::GenBase,
        )?;
        let fakes_test = self.generate(
            &generator,
            d.fake_test,
            self.seed(s, "fakes-test"),
            SourceTag::GenBase,
        )?;
        let mut a = Artifacts::new();
        a.insert(
            "fakes_train".into(),
            self.save_data(s, "fakes_train.ptar", &fakes_train)?,
        );
        a.insert(
            "fakes_test".into(),
            self.save_data(s, "fakes_test.ptar", &fakes_test)?,
        );
        let mut summaries = Vec::new();
        for c in 0..self.cfg.detector.critics {
            let tcfg = self
                .cfg
                .pretrain_config(rng::derive_index(self.seed(s, "critic"), c as u64));
            let (det, summary) = pretrain(&real, &fakes_train, &tcfg)?;
            let role = if c == 0 {
                "detector".to_string()
            } else {
                format!("critic_{c}")
            };
            a.insert(
                role.clone(),
                self.save_detector(s, &format!("{role}.ptar"), &det)?,
            );
            summaries.push(summary);
        }
        a.insert(
            "summary".into(),
            self.save_json(s, "summary.json", &summaries)?,
        );
        Ok(a)
    }

    fn critics(&self) -> Result<Vec<DetectorNet<F>>> {
        (0..self.cfg.detector.critics)
            .map(|c| {
                let role = if c == 0 {
                    "detector".to_string()
                } else {
                    format!("critic_{c}")
                };
                self.detector(Stage::PretrainDetector, &role)
            })
            .collect()
    }

    /// Probe-round loop. Each round probes the current generator with every
    /// critic; between rounds each critic is fine-tuned on its own samples.
    fn probe(&self) -> Result<Artifacts> {
        let s = Stage::Probe;
        let generator =
            Generator::<F>::load(&self.artifact(Stage::PretrainGenerator, "generator")?)?;
        let real = self.data(Stage::GenData, "real_train")?;
        let fresh = self.data(Stage::GenData, "real_fresh")?;
        let fakes_train = self.data(Stage::PretrainDetector, "fakes_train")?;
        let extractor =
            PerceptualExtractor::<F>::new(self.cfg.data.image_size, self.seed(s, "extractor"))?;
        let mut critics = self.critics()?;
        let rounds = self.cfg.probe.rounds;
        let mut a = Artifacts::new();
        for round in 0..rounds {
            let mut round_samples = Vec::with_capacity(critics.len());
            for (c, det) in critics.iter().enumerate() {
                let tag = format!("r{round}_c{c}");
                let pcfg = self.cfg.probe_config(rng::derive_index(
                    rng::derive_index(self.seed(s, "run"), round as u64),
                    c as u64,
                ));
                let ctx = ProbeContext::new(
                    &generator.net,
                    &generator.sched,
                    det,
                    &extractor,
                    pcfg.lambda,
                );
                let run = match run_probe(&ctx, &pcfg) {
                    Ok(run) => run,
                    Err(abort) => {
                        write_json(
                            &self.dir.join(Self::rel(s, &format!("log_{tag}.json"))),
                            &abort.log,
                        )?;
                        abort.last_good.save(
                            &self
                                .dir
                                .join(Self::rel(s, &format!("lora_{tag}_last_good.ptar"))),
                        )?;
                        return Err(abort.into());
                    }
                };
                let lora_rel = Self::rel(s, &format!("lora_{tag}.ptar"));
                run.lora.save(&self.dir.join(&lora_rel))?;
                a.insert(format!("lora_{tag}"), lora_rel);
                a.insert(
                    format!("log_{tag}"),
                    self.save_json(s, &format!("log_{tag}.json"), &run.log)?,
                );
                a.insert(
                    format!("samples_{tag}"),
                    self.save_data(s, &format!("samples_{tag}.ptar"), &run.samples)?,
                );

                // Base-generator outputs for the identical requests, scored by the same critic.
                let reqs = requests_of(&run.samples, generator.guidance)?;
                let base = clamp_rows(&ctx.base_sample(&reqs)?, self.cfg.data.image_size)?;
                let refs: Vec<&Tensor<F>> = base.iter().collect();
                let scores = det.predict_many(&refs)?;
                let items = base
                    .into_iter()
                    .zip(&reqs)
                    .zip(scores)
                    .map(|((pixels, r), score)| ToyImage {
                        pixels,
                        class_id: r.class_id,
                        source: SourceTag::GenBase,
                        meta: SampleMeta {
                            seed: Some(r.seed),
                            score: Some(score),
                            step: None,
                        },
                    })
                    .collect();
                let paired_base = SplitDataset {
                    name: format!("base_{tag}"),
                    seed: run.samples.seed,
                    items,
                };
                a.insert(
                    format!("base_{tag}"),
                    self.save_data(s, &format!("base_{tag}.ptar"), &paired_base)?,
                );
                round_samples.push(run.samples);
            }
            if round + 1 < rounds {
                for (c, (det, samples)) in critics.iter_mut().zip(&round_samples).enumerate() {
                    let paired = self.pair_with_fresh(
                        samples,
                        &fresh,
                        rng::derive_index(self.seed(s, "refresh-pair"), round as u64),
                    )?;
                    let mcfg = self.cfg.mix_config(rng::derive_index(
                        rng::derive_index(self.seed(s, "refresh"), round as u64),
                        c as u64,
                    ));
                    *det = finetune_mixed(det, &real, &fakes_train, &paired, &mcfg)?.0;
                    let role = format!("critic_r{}_c{c}", round + 1);
                    a.insert(
                        role.clone(),
                        self.save_detector(s, &format!("{role}.ptar"), det)?,
                    );
                }
            }
        }
        // The detector the final round probed against; fine-tuning continues from it.
        a.insert(
            "detector_in".into(),
            self.save_detector(s, "detector_in.ptar", &critics[0])?,
        );
        Ok(a)
    }

    /// Probe samples plus an equal number of fresh reals.
    fn pair_with_fresh(
        &self,
        probe: &SplitDataset<F>,
        fresh: &SplitDataset<F>,
        seed: u64,
    ) -> Result<SplitDataset<F>> {
        let reals = aggregate_samples(&[fresh], probe.len(), seed)?;
        let mut paired = SplitDataset::concat("probe_paired", seed, &[probe, &reals]);
        paired.items.sort_by_key(|i| i.source.label());
        Ok(paired)
    }

    fn export_samples(&self) -> Result<Artifacts> {
        let s = Stage::ExportSamples;
        let last = self.cfg.probe.rounds - 1;
        let mut sources = Vec::new();
        for c in 0..self.cfg.detector.critics {
            sources.push(self.data(Stage::Probe, &format!("samples_r{last}_c{c}"))?);
        }
        for path in &self.cfg.probe.extra_sources {
            let extra = SplitDataset::<F>::load(path)
                .map_err(|e| Error::Config(format!("probe.extra_sources: {e}")))?;
            sources.push(extra);
        }
        let refs: Vec<&SplitDataset<F>> = sources.iter().collect();
        let mut probe =
            aggregate_samples(&refs, self.cfg.probe.n_prompts, self.seed(s, "aggregate"))?;
        probe.name = "probe_samples".into();
        let fresh = self.data(Stage::GenData, "real_fresh")?;
        let paired = self.pair_with_fresh(&probe, &fresh, self.seed(s, "pair"))?;
        let mut a = Artifacts::new();
        a.insert(
            "probe_samples".into(),
            self.save_data(s, "probe_samples.ptar", &probe)?,
        );
        a.insert(
            "probe_paired".into(),
            self.save_data(s, "probe_paired.ptar", &paired)?,
        );
        Ok(a)
    }

    fn finetune_detector(&self) -> Result<Artifacts> {
        let s = Stage::FinetuneDetector;
        let det = self.detector(Stage::Probe, "detector_in")?;
        let real = self.data(Stage::GenData, "real_train")?;
        let fakes = self.data(Stage::PretrainDetector, "fakes_train")?;
        let paired = self.data(Stage::ExportSamples, "probe_paired")?;
        let (tuned, summary) = finetune_mixed(
            &det,
            &real,
            &fakes,
            &paired,
            &self.cfg.mix_config(self.seed(s, "mix")),
        )?;
        let mut a = Artifacts::new();
        a.insert(
            "detector".into(),
            self.save_detector(s, "detector.ptar", &tuned)?,
        );
        a.insert(
            "summary".into(),
            self.save_json(s, "summary.json", &summary)?,
        );
        Ok(a)
    }

    /// Pretrained and fine-tuned detectors against both generators' test fakes.
    fn detection_rows(
        &self,
        report: &mut MetricsReport,
        ctx: &RowContext,
        name: &str,
        det: &DetectorNet<F>,
        real_test: &SplitDataset<F>,
        fakes: &[(&str, &SplitDataset<F>)],
    ) -> Result<()> {
        for (tag, f) in fakes {
            let both = SplitDataset::concat("eval", 0, &[real_test, f]);
            let scored = score_dataset(det, &both, None)?;
            report.push(ctx.row(
                "test",
                tag,
                Metric::Bacc,
                balanced_accuracy(&scored, 0.5)?,
                name,
            ))?;
            report.push(ctx.row("test", tag, Metric::Ap, average_precision(&scored)?, name))?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<Artifacts> {
        let s = Stage::Evaluate;
        let ctx = self.row_context(s);
        let real_test = self.data(Stage::GenData, "real_test")?;
        let base_test = self.data(Stage::PretrainDetector, "fakes_test")?;
        let var_test = self.data(Stage::PretrainVariantGenerator, "fakes_test")?;
        let fakes = [("gen_base", &base_test), ("gen_variant", &var_test)];
        let pre = self.detector(Stage::PretrainDetector, "detector")?;
        let tuned = self.detector(Stage::FinetuneDetector, "detector")?;
        let mut report = MetricsReport::default();
        self.detection_rows(&mut report, &ctx, "pretrained", &pre, &real_test, &fakes)?;
        self.detection_rows(&mut report, &ctx, "finetuned", &tuned, &real_test, &fakes)?;

        for round in 0..self.cfg.probe.rounds {
            for c in 0..self.cfg.detector.critics {
                let tag = format!("r{round}_c{c}");
                let path = self.artifact(Stage::Probe, &format!("log_{tag}"))?;
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let log: Vec<ProbeLogEntry> = serde_json::from_slice(&bytes)?;
                report.push(ctx.row(
                    "probe",
                    "probe",
                    Metric::Loss,
                    tail_mean(&log, |e| e.total),
                    &tag,
                ))?;
                report.push(ctx.row(
                    "probe",
                    "probe",
                    Metric::Lperc,
                    tail_mean(&log, |e| e.l_perc),
                    &tag,
                ))?;
                let probe = self.data(Stage::Probe, &format!("samples_{tag}"))?;
                let base = self.data(Stage::Probe, &format!("base_{tag}"))?;
                report.push(ctx.row(
                    "probe",
                    "probe",
                    Metric::ScoreMean,
                    scores_of(&probe)?,
                    &tag,
                ))?;
                report.push(ctx.row(
                    "probe",
                    "gen_base",
                    Metric::ScoreMean,
                    scores_of(&base)?,
                    &tag,
                ))?;
            }
        }

        let mut a = Artifacts::new();
        if self.cfg.eval.pgd_baselines {
            self.pgd_baselines(&mut report, &ctx, &real_test, &fakes, &mut a)?;
        }
        a.insert(
            "metrics".into(),
            self.save_report(s, "metrics.csv", &report)?,
        );
        Ok(a)
    }

    /// Replace probe samples with PGD outputs on the same requests and
    /// fine-tune the same detector on them, for comparison.
    fn pgd_baselines(
        &self,
        report: &mut MetricsReport,
        ctx: &RowContext,
        real_test: &SplitDataset<F>,
        fakes: &[(&str, &SplitDataset<F>)],
        a: &mut Artifacts,
    ) -> Result<()> {
        let s = Stage::Evaluate;
        let size = self.cfg.data.image_size;
        let last = self.cfg.probe.rounds - 1;
        let generator =
            Generator::<F>::load(&self.artifact(Stage::PretrainGenerator, "generator")?)?;
        let det = self.detector(Stage::Probe, "detector_in")?;
        let base = self.data(Stage::Probe, &format!("base_r{last}_c0"))?;
        let paired = self.data(Stage::ExportSamples, "probe_paired")?;
        let reals = SplitDataset {
            name: "fresh".into(),
            seed: paired.seed,
            items: paired
                .items
                .iter()
                .filter(|i| i.source == SourceTag::Real)
                .cloned()
                .collect(),
        };
        let real = self.data(Stage::GenData, "real_train")?;
        let fakes_train = self.data(Stage::PretrainDetector, "fakes_train")?;
        let reqs = requests_of(&base, generator.guidance)?;
        for space in [PgdSpace::Pixel, PgdSpace::Latent] {
            let pcfg = self.cfg.eval.pgd(space);
            let (tag, name) = match space {
                PgdSpace::Pixel => (SourceTag::PgdPixel, "pgd_pixel"),
                PgdSpace::Latent => (SourceTag::PgdLatent, "pgd_latent"),
            };
            let mut items = Vec::with_capacity(base.len());
            for (chunk, req_chunk) in base.items.chunks(64).zip(reqs.chunks(64)) {
                let outcome = match space {
                    PgdSpace::Pixel => {
                        let rows: Vec<&[F]> = chunk.iter().map(|i| i.pixels.data()).collect();
                        pgd_pixel(&Tensor::stack_rows(&rows, &[size, size])?, &det, &pcfg)?
                    }
                    PgdSpace::Latent => {
                        pgd_latent(&generator.net, &generator.sched, &det, req_chunk, &pcfg)?
                    }
                };
                let images =
                    clamp_rows(&outcome.images.reshape(&[chunk.len(), size * size])?, size)?;
                for ((pixels, src), score) in images.into_iter().zip(chunk).zip(outcome.scores) {
                    items.push(ToyImage {
                        pixels,
                        class_id: src.class_id,
                        source: tag,
                        meta: SampleMeta {
                            score: Some(score),
                            ..src.meta
                        },
                    });
                }
            }
            let attacked = SplitDataset {
                name: name.into(),
                seed: base.seed,
                items,
            };
            a.insert(
                name.into(),
                self.save_data(s, &format!("{name}.ptar"), &attacked)?,
            );
            report.push(ctx.row(
                "probe",
                name,
                Metric::ScoreMean,
                scores_of(&attacked)?,
                &format!("r{last}_c0"),
            ))?;
            let mut pgd_paired =
                SplitDataset::concat("pgd_paired", paired.seed, &[&attacked, &reals]);
            pgd_paired.items.sort_by_key(|i| i.source.label());
            let mcfg = self
                .cfg
                .mix_config(self.seed(Stage::FinetuneDetector, "mix"));
            let (tuned, _) = finetune_mixed(&det, &real, &fakes_train, &pgd_paired, &mcfg)?;
            self.detection_rows(
                report,
                ctx,
                &format!("finetuned_{name}"),
                &tuned,
                real_test,
                fakes,
            )?;
        }
        Ok(())
    }

    fn sweep_robustness(&self) -> Result<Artifacts> {
        let s = Stage::SweepRobustness;
        let ctx = self.row_context(s);
        let real_test = self.data(Stage::GenData, "real_test")?;
        let base_test = self.data(Stage::PretrainDetector, "fakes_test")?;
        let var_test = self.data(Stage::PretrainVariantGenerator, "fakes_test")?;
        let mut report = MetricsReport::default();
        for (name, det) in [
            (
                "pretrained",
                self.detector(Stage::PretrainDetector, "detector")?,
            ),
            (
                "finetuned",
                self.detector(Stage::FinetuneDetector, "detector")?,
            ),
        ] {
            for (tag, fakes) in [("gen_base", &base_test), ("gen_variant", &var_test)] {
                let both = SplitDataset::concat("sweep", 0, &[&real_test, fakes]);
                report.extend(robustness_sweep(
                    &det,
                    &both,
                    &self.cfg.eval.grid,
                    &ctx,
                    &format!("test-{name}"),
                    tag,
                )?)?;
            }
        }
        let mut a = Artifacts::new();
        a.insert(
            "robustness".into(),
            self.save_report(s, "robustness.csv", &report)?,
        );
        Ok(a)
    }

    fn analyze_spectrum(&self) -> Result<Artifacts> {
        let s = Stage::AnalyzeSpectrum;
        let generator =
            Generator::<F>::load(&self.artifact(Stage::PretrainGenerator, "generator")?)?;
        let n = self.cfg.eval.spectrum_images;
        let sets = [
            ("real", self.data(Stage::GenData, "real_test")?),
            (
                "gen_base",
                self.data(Stage::PretrainDetector, "fakes_test")?,
            ),
            (
                "gen_variant",
                self.data(Stage::PretrainVariantGenerator, "fakes_test")?,
            ),
            ("probe", self.data(Stage::ExportSamples, "probe_samples")?),
        ];
        let mut a = Artifacts::new();
        for (tag, data) in sets {
            let images: Vec<Tensor<F>> = data
                .items
                .iter()
                .take(n)
                .map(|i| i.pixels.clone())
                .collect();
            let profile = residual_spectrum(&generator.net, &images, self.cfg.eval.t_probe)?;
            let rel = Self::rel(s, &format!("spectrum_{tag}.csv"));
            profile.write_csv(&self.dir.join(&rel))?;
            a.insert(format!("spectrum_{tag}"), rel);
        }
        Ok(a)
    }
}
